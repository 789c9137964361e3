"""File formats, dataset manifests, and the synthetic dataset generator.

Images are binary PPM (P6) and masks binary PGM (P5), both maxval 255,
chosen because they are implementable from scratch in any language.
Tensors travel as FANT files: little-endian ``"FANT"`` magic, u32
version 1, u8 dtype 1 (float64), u8 ndim, ndim u64 extents, then the
row-major float64 payload. Manifests are TSV text: one
``image<TAB>mask<TAB>identity<TAB>camera`` line per sample, paths
relative to the manifest root.
"""

from __future__ import annotations

import colorsys
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "Sample",
    "ManifestEntry",
    "DatasetManifest",
    "read_image_ppm",
    "write_image_ppm",
    "read_mask_pgm",
    "write_mask_pgm",
    "read_fant",
    "write_fant",
    "read_manifest",
    "write_manifest",
    "load_samples",
    "resize_bilinear",
    "generate_synthetic_dataset",
]

FANT_MAGIC = b"FANT"
FANT_VERSION = 1
FANT_DTYPE_F64 = 1


@dataclass(frozen=True)
class Sample:
    image: np.ndarray  # (3, H, W) in [0, 1]
    mask: np.ndarray  # (1, H, W) in {0, 1}
    identity: int
    camera: int


@dataclass(frozen=True)
class ManifestEntry:
    image_path: str
    mask_path: str
    identity: int
    camera: int


@dataclass(frozen=True)
class DatasetManifest:
    root: Path
    entries: tuple[ManifestEntry, ...]


# -- netpbm ------------------------------------------------------------------


def _parse_pnm_header(data: bytes, magic: bytes, path) -> tuple[int, int, int]:
    """Return (width, height, payload_offset); raises with byte offsets."""
    if data[:2] != magic:
        raise ValueError(f"{path}: bad magic {data[:2]!r} at byte 0, expected {magic!r}")
    pos = 2
    fields = []
    field_offsets = []
    while len(fields) < 3:
        # skip whitespace and comments
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        token = data[start:pos]
        if not token.isdigit():
            raise ValueError(f"{path}: bad header token {token!r} at byte {start}")
        fields.append(int(token))
        field_offsets.append(start)
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise ValueError(f"{path}: missing whitespace after maxval at byte {pos}")
    pos += 1
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise ValueError(f"{path}: non-positive dimensions {width}x{height}")
    if maxval != 255:
        raise ValueError(f"{path}: maxval {maxval} at byte {field_offsets[2]}, only 255 supported")
    return width, height, pos


def _read_pnm_payload(path, magic: bytes, channels: int) -> np.ndarray:
    data = Path(path).read_bytes()
    width, height, offset = _parse_pnm_header(data, magic, path)
    expected = width * height * channels
    payload = data[offset:]
    if len(payload) != expected:
        raise ValueError(
            f"{path}: expected {expected} payload bytes, got {len(payload)}"
        )
    flat = np.frombuffer(payload, dtype=np.uint8).astype(np.float64)
    # interleaved rows -> channels-first planes
    return flat.reshape(height, width, channels).transpose(2, 0, 1)


def read_image_ppm(path) -> np.ndarray:
    """Binary PPM -> (3, H, W) float64 tensor in [0, 1]."""
    return _read_pnm_payload(path, b"P6", 3) / 255.0


def read_mask_pgm(path) -> np.ndarray:
    """Binary PGM -> (1, H, W) mask thresholded at 0.5 to {0, 1}."""
    gray = _read_pnm_payload(path, b"P5", 1) / 255.0
    return (gray >= 0.5).astype(np.float64)


def _quantize(t: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(t * 255.0), 0, 255).astype(np.uint8)


def write_image_ppm(path, image: np.ndarray) -> None:
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got {image.shape}")
    _, h, w = image.shape
    body = _quantize(image).transpose(1, 2, 0).tobytes()
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + body)


def write_mask_pgm(path, mask: np.ndarray) -> None:
    if mask.ndim != 3 or mask.shape[0] != 1:
        raise ValueError(f"expected a (1, H, W) mask, got {mask.shape}")
    _, h, w = mask.shape
    body = _quantize(mask[0]).tobytes()
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + body)


# -- FANT tensors --------------------------------------------------------------


def write_fant(path, t: np.ndarray) -> None:
    arr = np.asarray(t, dtype=np.float64)
    if arr.ndim == 0:
        raise ValueError("cannot write a zero-dimensional tensor")
    arr = np.ascontiguousarray(arr)
    if any(d < 1 for d in arr.shape):
        raise ValueError(f"all extents must be >= 1, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError("refusing to write non-finite values")
    with open(path, "wb") as fh:
        fh.write(FANT_MAGIC)
        fh.write(struct.pack("<IBB", FANT_VERSION, FANT_DTYPE_F64, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.tobytes(order="C"))


def read_fant(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != FANT_MAGIC:
        raise ValueError(f"{path}: bad magic {data[:4]!r}, expected {FANT_MAGIC!r}")
    if len(data) < 10:
        raise ValueError(f"{path}: truncated header ({len(data)} bytes)")
    version, dtype, ndim = struct.unpack("<IBB", data[4:10])
    if version != FANT_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    if dtype != FANT_DTYPE_F64:
        raise ValueError(f"{path}: unsupported dtype code {dtype}")
    if ndim < 1:
        raise ValueError(f"{path}: tensors need at least one dimension")
    dims_end = 10 + 8 * ndim
    if len(data) < dims_end:
        raise ValueError(f"{path}: truncated dimension list")
    dims = struct.unpack(f"<{ndim}Q", data[10:dims_end])
    if any(d < 1 for d in dims):
        raise ValueError(f"{path}: non-positive extent in {dims}")
    count = int(np.prod(dims))
    expected = dims_end + 8 * count
    if len(data) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, got {len(data)}")
    arr = np.frombuffer(data[dims_end:], dtype="<f8").reshape(dims).copy()
    if not np.isfinite(arr).all():
        raise ValueError(f"{path}: payload contains non-finite values")
    return arr


# -- manifests -----------------------------------------------------------------


def write_manifest(manifest: DatasetManifest, path) -> None:
    lines = [
        f"{e.image_path}\t{e.mask_path}\t{e.identity}\t{e.camera}\n"
        for e in manifest.entries
    ]
    Path(path).write_text("".join(lines), encoding="utf-8", newline="\n")


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    entries = []
    for ln, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ValueError(f"{path}:{ln}: expected 4 tab-separated fields, got {len(parts)}")
        entries.append(ManifestEntry(parts[0], parts[1], int(parts[2]), int(parts[3])))
    return DatasetManifest(root=path.parent, entries=tuple(entries))


def load_samples(manifest: DatasetManifest, target_hw: tuple[int, int] | None = None) -> list[Sample]:
    """Load every manifest entry, optionally resizing to (H, W)."""
    samples = []
    for e in manifest.entries:
        image = read_image_ppm(manifest.root / e.image_path)
        mask = read_mask_pgm(manifest.root / e.mask_path)
        if image.shape[1:] != mask.shape[1:]:
            raise ValueError(
                f"{e.image_path}: image {image.shape[1:]} and mask {mask.shape[1:]} sizes differ"
            )
        if target_hw is not None and image.shape[1:] != tuple(target_hw):
            image = resize_bilinear(image, *target_hw)
            mask = (resize_bilinear(mask, *target_hw) >= 0.5).astype(np.float64)
        samples.append(Sample(image, mask, e.identity, e.camera))
    return samples


# -- resizing ------------------------------------------------------------------


def resize_bilinear(t: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned bilinear resize of a (C, H, W) tensor."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target dims must be >= 1, got {out_h}x{out_w}")
    c, h, w = t.shape
    if (h, w) == (out_h, out_w):
        return t.copy()

    def coords(n_in, n_out):
        if n_out == 1:
            return np.zeros(1)
        return np.arange(n_out) * ((n_in - 1) / (n_out - 1))

    ys = coords(h, out_h)
    xs = coords(w, out_w)
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[None, :, None]
    fx = (xs - x0)[None, None, :]
    tl = t[:, y0][:, :, x0]
    tr = t[:, y0][:, :, x1]
    bl = t[:, y1][:, :, x0]
    br = t[:, y1][:, :, x1]
    top = tl * (1 - fx) + tr * fx
    bot = bl * (1 - fx) + br * fx
    return top * (1 - fy) + bot * fy


# -- synthetic dataset ---------------------------------------------------------


def _hsv(h, s, v):
    return np.array(colorsys.hsv_to_rgb(h % 1.0, s, v))


def _jittered(rng: np.random.Generator, extent: int, size: int) -> int:
    """Offset near the centered position, jittered by up to ~12% of the extent."""
    center = (extent - size) // 2
    jitter = max(1, round(0.12 * extent))
    lo = max(0, center - jitter)
    hi = min(extent - size, center + jitter)
    return int(rng.integers(lo, hi + 1))


def _identity_palette(ident: int, n_identities: int):
    hue = (ident + 0.5) / n_identities
    base = _hsv(hue, 0.9, 0.8 + 0.15 * (ident % 2))
    stripe = _hsv(hue + 0.33 + 0.17 * (ident % 2), 0.8, 0.6)
    period = 2 + ident % 4
    return base, stripe, period


def _draw_striped_rect(rng, img, top, left, rh, rw, base, stripe, period):
    patch = np.empty((3, rh, rw))
    rows = (np.arange(top, top + rh) // period) % 2
    patch[:, rows == 0, :] = base[:, None, None]
    patch[:, rows == 1, :] = stripe[:, None, None]
    patch += rng.normal(0.0, 0.02, patch.shape)
    img[:, top : top + rh, left : left + rw] = patch


def _draw_fake_person(rng, img, ident, n_identities, height, width):
    base, stripe, period = _identity_palette(ident, n_identities)
    rh = min(max(int(round(height * rng.uniform(0.45, 0.8))), 2), height)
    rw = min(max(int(round(width * rng.uniform(0.3, 0.65))), 2), width)
    top = int(rng.integers(0, height - rh + 1))
    left = int(rng.integers(0, width - rw + 1))
    _draw_striped_rect(rng, img, top, left, rh, rw, base, stripe, period)


def _draw_rect(img, top, left, rh, rw, color):
    img[:, top : top + rh, left : left + rw] = color[:, None, None]


def generate_synthetic_dataset(
    n_identities: int,
    images_per_identity_per_camera: int,
    cameras: int,
    height: int,
    width: int,
    seed: int,
    out_dir,
    clutter: str = "normal",
) -> DatasetManifest:
    """Write a deterministic toy re-id dataset with exact foreground masks.

    Each identity is a striped rectangle with an identity-specific hue,
    placed at a random position over camera-specific background noise
    and distractor shapes. The rectangle area fraction is sampled inside
    [0.135, 0.52] so every mask stays within the documented [0.1, 0.6]
    foreground bounds. ``clutter="heavy"`` draws many large, saturated
    distractors from the same hue palette as the identities, which is
    what makes background-sensitive embeddings fail.
    """
    if n_identities < 2:
        raise ValueError("need at least 2 identities")
    if cameras < 2:
        raise ValueError("need at least 2 cameras")
    if images_per_identity_per_camera < 1:
        raise ValueError("need at least 1 image per identity per camera")
    if height < 8 or width < 6:
        raise ValueError(f"frame {height}x{width} too small for a person rectangle")
    if clutter not in ("normal", "heavy"):
        raise ValueError(f"unknown clutter level {clutter!r}")

    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    n_distractors = 7 if clutter == "heavy" else 3
    cam_tints = [
        np.array([1.0, 0.96, 0.92]),
        np.array([0.92, 0.98, 1.0]),
        np.array([0.97, 1.0, 0.94]),
        np.array([1.0, 1.0, 1.0]),
    ]
    cam_bg = [
        np.array([0.45, 0.5, 0.45]),
        np.array([0.55, 0.5, 0.4]),
        np.array([0.4, 0.45, 0.55]),
        np.array([0.5, 0.5, 0.5]),
    ]

    entries = []
    for ident in range(n_identities):
        base, stripe, period = _identity_palette(ident, n_identities)
        for cam in range(cameras):
            tint = cam_tints[cam % len(cam_tints)]
            bg = cam_bg[cam % len(cam_bg)]
            for j in range(images_per_identity_per_camera):
                img = bg[:, None, None] + rng.normal(0.0, 0.05, (3, height, width))
                for _ in range(n_distractors):
                    if clutter == "heavy":
                        # fake persons: striped rectangles wearing another
                        # identity's palette at person-like sizes, placed
                        # anywhere. Only the mask says which one is real.
                        fake = int(rng.integers(n_identities))
                        _draw_fake_person(rng, img, fake, n_identities, height, width)
                    else:
                        color = _hsv(rng.uniform(), 0.3, rng.uniform(0.3, 0.7))
                        dh = int(rng.integers(2, max(3, height // 4)))
                        dw = int(rng.integers(2, max(3, width // 4)))
                        dt = int(rng.integers(0, height - dh + 1))
                        dl = int(rng.integers(0, width - dw + 1))
                        _draw_rect(img, dt, dl, dh, dw, color)

                # pedestrian-crop statistics: tall, frame-filling, jittered
                # around center rather than placed anywhere
                rh = int(round(height * rng.uniform(0.55, 0.8)))
                rw = int(round(width * rng.uniform(0.4, 0.65)))
                rh = min(max(rh, 2), height)
                rw = min(max(rw, 2), width)
                if rh > height or rw > width:
                    raise ValueError(f"person rectangle {rh}x{rw} larger than frame")
                top = _jittered(rng, height, rh)
                left = _jittered(rng, width, rw)
                _draw_striped_rect(rng, img, top, left, rh, rw, base, stripe, period)

                img = np.clip(img * tint[:, None, None], 0.0, 1.0)
                mask = np.zeros((1, height, width))
                mask[0, top : top + rh, left : left + rw] = 1.0

                stem = f"id{ident:03d}_cam{cam}_{j}"
                image_rel = f"images/{stem}.ppm"
                mask_rel = f"masks/{stem}.pgm"
                write_image_ppm(out_dir / image_rel, img)
                write_mask_pgm(out_dir / mask_rel, mask)
                entries.append(ManifestEntry(image_rel, mask_rel, ident, cam))

    manifest = DatasetManifest(root=out_dir, entries=tuple(entries))
    write_manifest(manifest, out_dir / "manifest.tsv")
    return manifest
