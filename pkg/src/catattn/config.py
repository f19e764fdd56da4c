"""Run configuration: a plain ``key = value`` text file plus named presets.

Resolution order, later wins: field defaults, the selected preset, the file,
then command-line overrides. Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Iterable

from .attention import ATTENTION_KINDS, FUSIONS
from .backbone import ModelSpec


class ConfigError(ValueError):
    pass


# Per-channel standardisation constants. The synthetic values were measured
# once on gen_synthetic(2000, seed=0) output and then frozen.
SYNTHETIC_MEAN = (0.5002, 0.5002, 0.5002)
SYNTHETIC_STD = (0.0974, 0.0975, 0.0974)
CIFAR100_MEAN = (0.5071, 0.4865, 0.4409)
CIFAR100_STD = (0.2673, 0.2564, 0.2762)

PRESETS: dict[str, dict[str, Any]] = {
    "desk": {
        "epochs": 10,
        "batch_size": 64,
        "lr": 0.05,
        "drop_every": 5,
        "stage_widths": (8, 16, 32),
        "blocks_per_stage": 1,
        "reduction": 4,
    },
    "paper-cifar": {
        "dataset": "cifar-binary",
        "epochs": 200,
        "batch_size": 128,
        "lr": 0.001,
        "drop_every": 50,
        "stage_widths": (16, 32, 64),
        "blocks_per_stage": 3,
        "reduction": 16,
        "label_bytes": 2,
        "label_index": 1,
        "augment": True,
        "norm_mean": CIFAR100_MEAN,
        "norm_std": CIFAR100_STD,
    },
}


@dataclass
class RunConfig:
    """Every recognised key with its default.

    preset           desk | paper-cifar; supplies defaults for the keys it names
    dataset          synthetic | cifar-binary
    train_path       CIFAR binary training file (cifar-binary only)
    test_path        CIFAR binary evaluation file; empty means hold out val_fraction
    label_bytes      label bytes per CIFAR record (1 for CIFAR-10, 2 for CIFAR-100)
    label_index      which label byte is the class (CIFAR-100: 0 coarse, 1 fine)
    num_classes      0 infers it from the dataset
    n_samples        size of the generated synthetic set
    val_fraction     share of samples held out for validation
    seed             seeds the data generator, the split, init and shuffling
    epochs, batch_size, lr, drop_every, momentum, weight_decay
                     optimiser and step-decay schedule
    max_steps        stop after this many optimiser steps (0 = no cap)
    stage_widths, blocks_per_stage, attention, gep, reduction,
    gaussian_k, gaussian_sigma, fusion, signed_range
                     model and attention-block hyperparameters
    ablation_arms    'default' or a comma list of arm ids such as full_cat,channel_only:nogep
    export_dir       where train/ablate/export-attn write their files
    augment          horizontal flip plus 4-pixel pad-and-crop on training batches
    norm_mean, norm_std
                     per-channel standardisation applied after scaling pixels to [0, 1]
    verify           64-bit arithmetic and a single BLAS thread
    """

    preset: str = "desk"
    dataset: str = "synthetic"
    train_path: str = ""
    test_path: str = ""
    label_bytes: int = 1
    label_index: int = 0
    num_classes: int = 0
    n_samples: int = 2000
    val_fraction: float = 0.2
    seed: int = 0
    epochs: int = 10
    batch_size: int = 64
    lr: float = 0.05
    drop_every: int = 5
    momentum: float = 0.9
    weight_decay: float = 0.0005
    max_steps: int = 0
    stage_widths: tuple[int, ...] = (16, 32, 64)
    blocks_per_stage: int = 3
    attention: str = "full_cat"
    gep: bool = True
    reduction: int = 16
    gaussian_k: int = 5
    gaussian_sigma: float = 1.0
    fusion: str = "canonical"
    signed_range: bool = False
    ablation_arms: str = "default"
    export_dir: str = "runs"
    augment: bool = False
    norm_mean: tuple[float, ...] = SYNTHETIC_MEAN
    norm_std: tuple[float, ...] = SYNTHETIC_STD
    verify: bool = False

    def validate(self) -> "RunConfig":
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; expected one of {sorted(PRESETS)}")
        if self.dataset not in ("synthetic", "cifar-binary"):
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        if self.dataset == "cifar-binary" and not self.train_path:
            raise ConfigError("dataset=cifar-binary needs train_path")
        if self.attention not in ATTENTION_KINDS:
            raise ConfigError(f"unknown attention {self.attention!r}; expected one of {ATTENTION_KINDS}")
        if self.fusion not in FUSIONS:
            raise ConfigError(f"unknown fusion {self.fusion!r}; expected one of {FUSIONS}")
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 0 or self.drop_every < 1:
            raise ConfigError("lr, batch_size and drop_every must be positive and epochs non-negative")
        if not 0 < self.val_fraction < 1:
            raise ConfigError(f"val_fraction must lie in (0, 1), got {self.val_fraction}")
        if len(self.norm_mean) != 3 or len(self.norm_std) != 3 or min(self.norm_std) <= 0:
            raise ConfigError("norm_mean and norm_std need three entries, std positive")
        return self

    def model_spec(self, num_classes: int, **changes) -> ModelSpec:
        kw = dict(
            stage_widths=self.stage_widths,
            blocks_per_stage=self.blocks_per_stage,
            num_classes=num_classes,
            attention=self.attention,
            gep=self.gep,
            reduction=self.reduction,
            gaussian_k=self.gaussian_k,
            gaussian_sigma=self.gaussian_sigma,
            fusion=self.fusion,
            signed_range=self.signed_range,
        )
        kw.update(changes)
        return ModelSpec(**kw)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def dump(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _convert(key: str, raw: Any) -> Any:
    ftype = _FIELDS[key].type
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    try:
        if ftype == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if ftype == "int":
            return int(raw)
        if ftype == "float":
            return float(raw)
        if ftype == "tuple[int, ...]":
            return tuple(int(x) for x in raw.split(",") if x.strip())
        if ftype == "tuple[float, ...]":
            return tuple(float(x) for x in raw.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r} (expected {ftype})") from None
    return raw


def parse_pairs(lines: Iterable[str], source: str = "<config>") -> dict[str, Any]:
    out: dict[str, Any] = {}
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = _convert(key, value)
    return out


def load_config(path: str | Path | None = None, overrides: Iterable[str] = (), **extra) -> RunConfig:
    """Build a validated RunConfig from an optional file and ``key=value`` overrides."""
    given: dict[str, Any] = {}
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        given.update(parse_pairs(text.splitlines(), str(path)))
    given.update(parse_pairs(overrides, "--override"))
    for k, v in extra.items():
        if k not in _FIELDS:
            raise ConfigError(f"unknown key {k!r}")
        given[k] = _convert(k, v)
    preset = given.get("preset", RunConfig.preset)
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
    merged = {**PRESETS[preset], **given}
    return RunConfig(**merged).validate()
