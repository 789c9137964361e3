"""Ranking evaluation: distance matrices, CMC curves, and mAP.

Embeddings are unit-norm, so ranking by squared Euclidean distance is
identical to ranking by descending cosine similarity. The protocol
evaluator runs repeated random single-shot gallery draws (one gallery
image per identity per trial) and averages the curves.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .dataio import Sample
from .losses import UNIT_TOL

__all__ = [
    "RankingResult",
    "SplitSpec",
    "distance_matrix",
    "cmc",
    "mean_average_precision",
    "evaluate_single",
    "evaluate_protocol",
    "write_ranking_csv",
    "default_workers",
]


@dataclass
class RankingResult:
    distance_matrix: np.ndarray
    cmc: np.ndarray
    map: float
    trials: int
    per_trial_cmc: list = field(default_factory=list)
    per_trial_map: list = field(default_factory=list)


@dataclass(frozen=True)
class SplitSpec:
    """Camera roles for one evaluation.

    Probe and gallery cameras must differ; that enforces the usual
    convention that same-camera images of the probe's identity never
    count as matches.
    """

    probe_camera: int = 0
    gallery_camera: int = 1
    single_shot: bool = True
    max_rank: int = 20

    def __post_init__(self):
        if self.probe_camera == self.gallery_camera:
            raise ValueError("probe and gallery cameras must differ")
        if self.max_rank < 1:
            raise ValueError("max_rank must be >= 1")


def _check_embeddings(mat: np.ndarray, name: str) -> None:
    norms = np.linalg.norm(mat, axis=1)
    worst = float(np.max(np.abs(norms - 1.0)))
    if worst > UNIT_TOL:
        raise ValueError(f"{name} embeddings are not unit-norm (worst |norm-1| = {worst:.3e})")


def distance_matrix(probes: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances between unit-norm row vectors."""
    probes = np.atleast_2d(probes)
    gallery = np.atleast_2d(gallery)
    if probes.shape[1] != gallery.shape[1]:
        raise ValueError(
            f"embedding dimensions differ: {probes.shape[1]} vs {gallery.shape[1]}"
        )
    _check_embeddings(probes, "probe")
    _check_embeddings(gallery, "gallery")
    diff = probes[:, None, :] - gallery[None, :, :]
    return np.einsum("pgd,pgd->pg", diff, diff)


def _match_ranks(dist: np.ndarray, probe_ids, gallery_ids) -> np.ndarray:
    """1-based rank of each probe's best same-identity gallery entry.

    Ties in distance resolve to the lower gallery index (stable sort).
    """
    probe_ids = np.asarray(probe_ids)
    gallery_ids = np.asarray(gallery_ids)
    if dist.shape != (len(probe_ids), len(gallery_ids)):
        raise ValueError(
            f"distance matrix {dist.shape} does not match {len(probe_ids)} probes x {len(gallery_ids)} gallery"
        )
    ranks = np.empty(len(probe_ids), dtype=int)
    for i in range(len(probe_ids)):
        order = np.argsort(dist[i], kind="stable")
        hits = np.nonzero(gallery_ids[order] == probe_ids[i])[0]
        if hits.size == 0:
            raise ValueError(f"probe {i} has no same-identity gallery entry")
        ranks[i] = hits[0] + 1
    return ranks


def cmc(dist: np.ndarray, probe_ids, gallery_ids, max_rank: int) -> np.ndarray:
    """Fraction of probes whose first match lands within each rank 1..max_rank."""
    if max_rank < 1:
        raise ValueError("max_rank must be >= 1")
    ranks = _match_ranks(dist, probe_ids, gallery_ids)
    counts = np.zeros(max_rank)
    for r in ranks:
        if r <= max_rank:
            counts[r - 1] += 1
    return np.cumsum(counts) / len(ranks)


def mean_average_precision(dist: np.ndarray, probe_ids, gallery_ids) -> float:
    """Mean over probes of the average precision over relevant gallery items."""
    probe_ids = np.asarray(probe_ids)
    gallery_ids = np.asarray(gallery_ids)
    if dist.shape != (len(probe_ids), len(gallery_ids)):
        raise ValueError(
            f"distance matrix {dist.shape} does not match {len(probe_ids)} probes x {len(gallery_ids)} gallery"
        )
    aps = []
    for i in range(len(probe_ids)):
        order = np.argsort(dist[i], kind="stable")
        relevant = gallery_ids[order] == probe_ids[i]
        n_rel = int(relevant.sum())
        if n_rel == 0:
            raise ValueError(f"probe {i} has no same-identity gallery entry")
        hits = np.cumsum(relevant)
        precisions = hits[relevant] / (np.nonzero(relevant)[0] + 1)
        aps.append(float(precisions.mean()))
    return float(np.mean(aps))


def default_workers() -> int:
    """Worker cap for embedding extraction; FANN_THREADS overrides."""
    env = os.environ.get("FANN_THREADS")
    if env:
        n = int(env)
        if n < 1:
            raise ValueError(f"FANN_THREADS must be >= 1, got {env}")
        return n
    return os.cpu_count() or 1


def embed_all(embed_fn, images, max_workers: int | None = None) -> np.ndarray:
    """Embed a list of images, optionally across threads; order preserved."""
    if max_workers is None:
        max_workers = default_workers()
    if max_workers <= 1 or len(images) < 4:
        return np.array([embed_fn(img) for img in images])
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return np.array(list(pool.map(embed_fn, images)))


def evaluate_single(
    embeddings: np.ndarray,
    samples: list[Sample],
    split: SplitSpec,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray, float]:
    """One trial: draw the gallery, rank probes, return (dist, cmc, mAP).

    Gallery entries sharing both identity and camera with a probe are a
    non-issue here because probe and gallery cameras are disjoint by
    construction.
    """
    probe_idx = [i for i, s in enumerate(samples) if s.camera == split.probe_camera]
    gal_pool: dict[int, list[int]] = {}
    for i, s in enumerate(samples):
        if s.camera == split.gallery_camera:
            gal_pool.setdefault(s.identity, []).append(i)

    probe_idx = [i for i in probe_idx if samples[i].identity in gal_pool]
    idents = sorted({samples[i].identity for i in probe_idx})
    if len(idents) < 2:
        raise ValueError("need at least two identities present in both cameras")

    if split.single_shot:
        gallery_idx = [
            gal_pool[ident][rng.integers(len(gal_pool[ident]))] for ident in idents
        ]
    else:
        gallery_idx = [i for ident in idents for i in gal_pool[ident]]

    probe_ids = [samples[i].identity for i in probe_idx]
    gallery_ids = [samples[i].identity for i in gallery_idx]
    dist = distance_matrix(embeddings[probe_idx], embeddings[gallery_idx])
    curve = cmc(dist, probe_ids, gallery_ids, split.max_rank)
    ap = mean_average_precision(dist, probe_ids, gallery_ids)
    return dist, curve, ap


def evaluate_protocol(
    embed_fn,
    samples: list[Sample],
    split: SplitSpec,
    trials: int,
    rng: np.random.Generator,
    max_workers: int | None = None,
) -> RankingResult:
    """Average CMC and mAP over repeated random gallery draws."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    embeddings = embed_all(embed_fn, [s.image for s in samples], max_workers)
    per_cmc = []
    per_map = []
    dist = None
    for _ in range(trials):
        dist, curve, ap = evaluate_single(embeddings, samples, split, rng)
        per_cmc.append(curve)
        per_map.append(ap)
    return RankingResult(
        distance_matrix=dist,
        cmc=np.mean(per_cmc, axis=0),
        map=float(np.mean(per_map)),
        trials=trials,
        per_trial_cmc=per_cmc,
        per_trial_map=per_map,
    )


def write_ranking_csv(path, curve: np.ndarray, map_value: float) -> None:
    """rank,cmc table with a map=<value> footer."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("rank,cmc\n")
        for i, value in enumerate(curve, start=1):
            fh.write(f"{i},{float(value)!r}\n")
        fh.write(f"map={float(map_value)!r}\n")
