"""SGD training, evaluation, colla-factor trajectories and the ablation driver."""

from __future__ import annotations

import contextlib
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np
from threadpoolctl import threadpool_limits

from . import autograd as ag
from .attention import CHANNEL_FACTORS, EXTERIOR_FACTORS, FACTOR_NAMES, SPATIAL_FACTORS
from .backbone import ModelSpec, ParamStore, init_model, model_forward
from .config import RunConfig
from .data import DatasetHandle, gen_synthetic, load_cifar_bin
from .tensor import precision

log = logging.getLogger(__name__)

FACTOR_COLUMNS = ["epoch", "block", "C_w", "S_w", "w_c", "w_s", *CHANNEL_FACTORS, *SPATIAL_FACTORS]
# no wall-clock column: verification reruns must produce identical files
METRIC_COLUMNS = ["epoch", "step", "lr", "train_loss", "train_acc", "val_loss", "val_acc"]
ABLATION_COLUMNS = ["mode", "gep", "params", "accuracy", "seconds"]

# (attention mode, GEP on, row label); row order follows the published comparison
ABLATION_ARMS = [
    ("spatial_only", True, "+ spatial"),
    ("spatial_only", False, "+ spatial w/o GEP"),
    ("channel_only", True, "+ channel"),
    ("channel_only", False, "+ channel w/o GEP"),
    ("channel_then_spatial", True, "+ channel + spatial"),
    ("channel_then_spatial", False, "+ channel + spatial w/o GEP"),
    ("spatial_then_channel", True, "+ spatial + channel"),
    ("spatial_then_channel", False, "+ spatial + channel w/o GEP"),
    ("cat_exterior", True, "CAT w/ exterior colla-factors"),
    ("full_cat", True, "CAT w/ exterior & interior colla-factors"),
]
BASELINE_ARM = ("none", False, "baseline")


@contextlib.contextmanager
def verification_mode(enabled: bool = True) -> Iterator[None]:
    """64-bit arithmetic on a single BLAS thread (bitwise-reproducible runs)."""
    if not enabled:
        yield
        return
    with threadpool_limits(limits=1), precision(np.float64):
        yield


# --------------------------------------------------------------------------
# Loss, optimiser, schedule
# --------------------------------------------------------------------------

cross_entropy = ag.cross_entropy


@dataclass
class OptimState:
    lr: float
    momentum: float = 0.9
    weight_decay: float = 0.0005
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")


def decay_exempt(name: str) -> bool:
    """Colla-factors and batch-norm parameters are excluded from weight decay."""
    parts = name.split(".")
    return parts[-1] in FACTOR_NAMES or any(p.startswith("bn") for p in parts)


def sgd_step(store: ParamStore, state: OptimState) -> None:
    """v = momentum * v + grad + wd * theta;  theta -= lr * v."""
    params = store.trainable()
    missing = [k for k, v in params.items() if v.grad is None]
    if missing:
        raise RuntimeError(f"no gradient for {len(missing)} parameter(s): {', '.join(missing[:5])}")
    for name, p in params.items():
        g = p.grad
        if state.weight_decay and not decay_exempt(name):
            g = g + p.value.dtype.type(state.weight_decay) * p.value
        buf = state.buffers.get(name)
        buf = g.copy() if buf is None else p.value.dtype.type(state.momentum) * buf + g
        state.buffers[name] = buf
        p.value = (p.value - p.value.dtype.type(state.lr) * buf).astype(p.value.dtype, copy=False)


def lr_schedule(epoch: int, base: float, drop_every: int, factor: float = 0.1) -> float:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    # dividing by (1 / factor) ** k keeps decimal rates exact: 0.001 / 100 == 1e-05
    return base / (1.0 / factor) ** (epoch // drop_every)


# --------------------------------------------------------------------------
# Data plumbing
# --------------------------------------------------------------------------


def prepare_data(cfg: RunConfig) -> tuple[DatasetHandle, DatasetHandle]:
    if cfg.dataset == "synthetic":
        full = gen_synthetic(cfg.n_samples, cfg.seed)
    else:
        full = load_cifar_bin(
            cfg.train_path, cfg.label_bytes, cfg.label_index, cfg.num_classes or None
        )
    if cfg.test_path:
        test = load_cifar_bin(cfg.test_path, cfg.label_bytes, cfg.label_index, full.num_classes)
        return full, test
    return full.split(cfg.val_fraction, cfg.seed)


def augment_batch(x: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Random horizontal flip and zero-padded random crop."""
    n, _, h, w = x.shape
    flip = rng.random(n) < 0.5
    x = np.where(flip[:, None, None, None], x[..., ::-1], x)
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dy, dx = rng.integers(0, 2 * pad + 1, size=(2, n))
    return np.stack([padded[i, :, dy[i] : dy[i] + h, dx[i] : dx[i] + w] for i in range(n)])


def evaluate(store: ParamStore, spec: ModelSpec, x: np.ndarray, y: np.ndarray, batch_size: int = 250):
    """(accuracy, mean loss, n) in eval mode."""
    correct, total_loss = 0, 0.0
    for s in range(0, len(y), batch_size):
        logits = model_forward(x[s : s + batch_size], store, spec, training=False)
        yb = y[s : s + batch_size]
        total_loss += float(ag.cross_entropy(logits, yb).value) * len(yb)
        correct += int((logits.value.argmax(axis=1) == yb).sum())
    n = len(y)
    return (correct / n if n else 0.0), (total_loss / n if n else 0.0), n


# --------------------------------------------------------------------------
# Trajectories
# --------------------------------------------------------------------------


def factor_rows(store: ParamStore, spec: ModelSpec, epoch: int) -> list[dict]:
    """One row per block that carries exterior colla-factors."""
    rows = []
    for name, cat in store.cat_blocks(spec).items():
        if not all(k in cat.factors for k in EXTERIOR_FACTORS):
            continue
        w_c, w_s = cat.exterior_weights()
        row = {"epoch": epoch, "block": name, "w_c": w_c, "w_s": w_s}
        for k in EXTERIOR_FACTORS + CHANNEL_FACTORS + SPATIAL_FACTORS:
            row[k] = cat.factor_value(k)
        rows.append(row)
    return rows


@dataclass
class TrainResult:
    spec: ModelSpec
    store: ParamStore
    factors: list[dict]
    metrics: list[dict]
    step_losses: list[float]
    accuracy: float
    loss: float
    n_eval: int
    steps: int
    seconds: float
    x_val: np.ndarray = field(repr=False, default=None)
    y_val: np.ndarray = field(repr=False, default=None)


def train(
    cfg: RunConfig,
    spec: ModelSpec | None = None,
    data: tuple[DatasetHandle, DatasetHandle] | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Train per ``cfg``; factor rows are snapshots taken at the start of each epoch."""
    with verification_mode(cfg.verify):
        return _train(cfg, spec, data, on_epoch)


def _train(cfg, spec, data, on_epoch) -> TrainResult:
    t0 = time.perf_counter()
    train_ds, val_ds = data if data is not None else prepare_data(cfg)
    dtype = np.float64 if cfg.verify else np.float32
    spec = spec or cfg.model_spec(cfg.num_classes or train_ds.num_classes)
    store = init_model(spec, seed=cfg.seed, dtype=dtype)
    state = OptimState(cfg.lr, cfg.momentum, cfg.weight_decay)
    x_tr = train_ds.standardized(cfg.norm_mean, cfg.norm_std, dtype)
    y_tr = train_ds.labels
    x_val = val_ds.standardized(cfg.norm_mean, cfg.norm_std, dtype)
    y_val = val_ds.labels
    rng = np.random.default_rng([cfg.seed, 1])

    factors, metrics, step_losses = [], [], []
    step = 0
    done = False
    for epoch in range(cfg.epochs):
        state.lr = lr_schedule(epoch, cfg.lr, cfg.drop_every)
        factors.extend(factor_rows(store, spec, epoch))
        order = rng.permutation(len(y_tr))
        seen, correct, loss_sum = 0, 0, 0.0
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            xb, yb = x_tr[idx], y_tr[idx]
            if cfg.augment:
                xb = augment_batch(xb, rng)
            store.zero_grad()
            with ag.GradTape() as tape:
                logits = model_forward(xb, store, spec, training=True)
                loss = ag.cross_entropy(logits, yb)
            tape.backward(loss)
            sgd_step(store, state)
            step += 1
            lv = float(loss.value)
            if not math.isfinite(lv):
                raise FloatingPointError(f"training loss diverged at step {step}")
            step_losses.append(lv)
            loss_sum += lv * len(yb)
            correct += int((logits.value.argmax(axis=1) == yb).sum())
            seen += len(yb)
            if cfg.max_steps and step >= cfg.max_steps:
                done = True
                break
        acc, vloss, _ = evaluate(store, spec, x_val, y_val)
        row = {
            "epoch": epoch,
            "step": step,
            "lr": state.lr,
            "train_loss": loss_sum / max(seen, 1),
            "train_acc": correct / max(seen, 1),
            "val_loss": vloss,
            "val_acc": acc,
        }
        metrics.append(row)
        log.info("epoch %d step %d loss %.4f val_acc %.4f", epoch, step, row["train_loss"], acc)
        if on_epoch:
            on_epoch(row)
        if done:
            break
    acc, vloss, n = evaluate(store, spec, x_val, y_val)
    return TrainResult(
        spec, store, factors, metrics, step_losses, acc, vloss, n, step, time.perf_counter() - t0, x_val, y_val
    )


# --------------------------------------------------------------------------
# Ablation
# --------------------------------------------------------------------------


@dataclass
class AblationRow:
    mode: str
    gep: bool
    label: str
    params: int
    accuracy: float
    seconds: float
    error: str = ""

    def csv_fields(self) -> list[str]:
        acc = "nan" if math.isnan(self.accuracy) else f"{self.accuracy:.6f}"
        return [self.mode, "1" if self.gep else "0", str(self.params), acc, f"{self.seconds:.3f}"]


def resolve_arms(spec: str) -> list[tuple[str, bool, str]]:
    """Arm ids: ``default`` (the ten attention arms), ``all`` (baseline first),
    or a comma list of ``mode`` / ``mode:nogep``."""
    if spec in ("default", ""):
        return list(ABLATION_ARMS)
    if spec == "all":
        return [BASELINE_ARM] + list(ABLATION_ARMS)
    table = {(m, g): label for m, g, label in ABLATION_ARMS + [BASELINE_ARM]}
    arms = []
    for tok in (t.strip() for t in spec.split(",")):
        if not tok:
            continue
        mode, _, flag = tok.partition(":")
        gep = flag != "nogep" and mode != "none"
        if flag not in ("", "nogep"):
            raise ValueError(f"bad arm flag in {tok!r}")
        label = table.get((mode, gep))
        if label is None:
            raise ValueError(f"unknown ablation arm {tok!r}")
        arms.append((mode, gep, label))
    return arms


def run_ablation(cfg: RunConfig, on_row: Callable[[AblationRow], None] | None = None) -> list[AblationRow]:
    """Train each arm with identical data, seed and schedule; failures become nan rows."""
    rows = []
    with verification_mode(cfg.verify):
        data = prepare_data(cfg)
        num_classes = cfg.num_classes or data[0].num_classes
        for mode, gep, label in resolve_arms(cfg.ablation_arms):
            t0 = time.perf_counter()
            params = 0
            try:
                spec = cfg.model_spec(num_classes, attention=mode, gep=gep)
                params = init_model(spec, seed=cfg.seed).num_parameters()
                result = _train(cfg, spec, data, None)
                row = AblationRow(mode, gep, label, params, result.accuracy, time.perf_counter() - t0)
            except Exception as exc:  # one broken arm must not sink the table
                log.error("ablation arm %s (gep=%s) failed: %s", mode, gep, exc)
                row = AblationRow(mode, gep, label, params, float("nan"), time.perf_counter() - t0, str(exc))
            rows.append(row)
            if on_row:
                on_row(row)
    return rows
