"""Plain key=value run configuration.

One ``key = value`` per line, ``#`` starts a comment, unknown keys are
rejected. Defaults are the stock full-scale training settings; the
``arch`` key switches between the full-scale, desk-scale and micro
geometry presets.
"""

from __future__ import annotations

from pathlib import Path

from .evaluator import SplitSpec
from .network import NetworkConfig, desk_config, micro_config, paper_config
from .trainer import TrainConfig

__all__ = ["RunConfig", "parse_config_file", "format_config", "REGISTRY"]


def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_choice(*options):
    def parse(s: str):
        if s not in options:
            raise ValueError(f"expected one of {options}, got {s!r}")
        return s

    return parse


# key -> (parser, default)
REGISTRY = {
    "arch": (_parse_choice("paper", "desk", "micro"), "paper"),
    "height": (int, 229),
    "width": (int, 79),
    "residual_blocks": (int, None),  # None = preset default
    "init_std": (float, None),  # None = preset default
    "margin": (float, 0.1),
    "zeta": (float, 0.02),
    "eta": (float, 0.05),
    "sigma": (float, 0.01),
    "rho": (float, 3.0),
    "kernel_normalized": (_parse_bool, True),
    "init_u": (float, 0.6),
    "init_v": (float, 0.4),
    "gamma": (float, 0.01),
    "sign_mode": (_parse_choice("textual", "literal"), "textual"),
    "seed": (int, 1),
    "lr": (float, 0.01),
    "lr_decay": (float, 0.1),
    "lr_decay_interval": (int, 10000),
    "batch_size": (int, 16),
    "log_interval": (int, 100),
    "checkpoint_interval": (int, 0),
    "trials": (int, 10),
    "probe_camera": (int, 0),
    "gallery_camera": (int, 1),
    "max_rank": (int, 20),
    "single_shot": (_parse_bool, True),
}

_PRESETS = {"paper": paper_config, "desk": desk_config, "micro": micro_config}
_PRESET_INPUTS = {"paper": (229, 79), "desk": (37, 13), "micro": (13, 7)}


class RunConfig:
    """Validated flat settings dict with typed accessors."""

    def __init__(self, values: dict | None = None):
        self.values = {k: d for k, (_, d) in REGISTRY.items()}
        for k, v in (values or {}).items():
            if k not in REGISTRY:
                raise ValueError(f"unknown configuration key {k!r}")
            self.values[k] = v

    def __getitem__(self, key: str):
        return self.values[key]

    def network_config(self) -> NetworkConfig:
        arch = self.values["arch"]
        overrides = dict(
            margin=self.values["margin"],
            zeta=self.values["zeta"],
            eta=self.values["eta"],
            sigma=self.values["sigma"],
            rho=self.values["rho"],
            kernel_normalized=self.values["kernel_normalized"],
            init_u=self.values["init_u"],
            init_v=self.values["init_v"],
            gamma=self.values["gamma"],
            sign_mode=self.values["sign_mode"],
            seed=self.values["seed"],
        )
        h, w = self.values["height"], self.values["width"]
        if (h, w) != _PRESET_INPUTS[arch]:
            overrides["input_shape"] = (3, h, w)
        if self.values["residual_blocks"] is not None:
            overrides["residual_blocks_per_part"] = self.values["residual_blocks"]
        if self.values["init_std"] is not None:
            overrides["init_std"] = self.values["init_std"]
        return _PRESETS[arch](**overrides)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.values["batch_size"],
            lr=self.values["lr"],
            lr_decay=self.values["lr_decay"],
            lr_decay_interval=self.values["lr_decay_interval"],
            log_interval=self.values["log_interval"],
            checkpoint_interval=self.values["checkpoint_interval"],
        )

    def split_spec(self) -> SplitSpec:
        return SplitSpec(
            probe_camera=self.values["probe_camera"],
            gallery_camera=self.values["gallery_camera"],
            single_shot=self.values["single_shot"],
            max_rank=self.values["max_rank"],
        )


def parse_config_file(path) -> RunConfig:
    values = {}
    for ln, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{ln}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in REGISTRY:
            raise ValueError(f"{path}:{ln}: unknown configuration key {key!r}")
        parser, _ = REGISTRY[key]
        try:
            values[key] = parser(value)
        except ValueError as e:
            raise ValueError(f"{path}:{ln}: bad value for {key}: {e}") from None
    return RunConfig(values)


def format_config(cfg: RunConfig) -> str:
    lines = []
    for key in REGISTRY:
        v = cfg.values[key]
        if v is None:
            continue
        if isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{key} = {v}\n")
    return "".join(lines)
