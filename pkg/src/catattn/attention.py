"""The CAT block: channel and spatial attention fused by learnable colla-factors.

Each module pools its input three ways (GAP, GMP, GEP) and mixes the three
branches with interior colla-factors; the two modules are then mixed with the
exterior colla-factors ``C_w`` and ``S_w`` through a two-way softmax.
All eight factors start at zero, so a fresh block is the identity map:
both gates are sigmoid(0) = 0.5 and 0.5 F + 0.5 F = F.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Variable
from .pooling import pool_channel, pool_spatial
from .tensor import ShapeError

CHANNEL_FACTORS = ("C_alpha", "C_beta", "C_gamma")
SPATIAL_FACTORS = ("S_alpha", "S_beta", "S_gamma")
EXTERIOR_FACTORS = ("C_w", "S_w")
FACTOR_NAMES = CHANNEL_FACTORS + SPATIAL_FACTORS + EXTERIOR_FACTORS

# ablation arms, in the order they appear in the comparison table
MODES = (
    "spatial_only",
    "channel_only",
    "channel_then_spatial",
    "spatial_then_channel",
    "cat_exterior",
    "full_cat",
)
ATTENTION_KINDS = ("none", "se") + MODES
FUSIONS = ("canonical", "pseudocode")

_CHANNEL_MODES = {"channel_only", "channel_then_spatial", "spatial_then_channel", "cat_exterior", "full_cat", "se"}
_SPATIAL_MODES = {"spatial_only", "channel_then_spatial", "spatial_then_channel", "cat_exterior", "full_cat"}
_EXTERIOR_MODES = {"cat_exterior", "full_cat"}


@dataclass(frozen=True)
class CatConfig:
    mode: str = "full_cat"
    gep: bool = True
    reduction: int = 16
    gaussian_k: int = 5
    sigma: float = 1.0
    fusion: str = "canonical"
    signed_range: bool = False

    def __post_init__(self):
        if self.mode not in MODES + ("se",):
            raise ValueError(f"unknown attention mode {self.mode!r}")
        if self.fusion not in FUSIONS:
            raise ValueError(f"unknown fusion variant {self.fusion!r}; expected one of {FUSIONS}")
        if self.gaussian_k < 1 or self.gaussian_k % 2 == 0:
            raise ValueError(f"gaussian_k must be odd and >= 1, got {self.gaussian_k}")
        if self.reduction < 1:
            raise ValueError(f"reduction ratio must be >= 1, got {self.reduction}")


def reduced_width(channels: int, reduction: int) -> int:
    return max(1, round(channels / reduction))


@dataclass
class CatParams:
    """Learnable state of one CAT block.

    ``factors`` maps a colla-factor name to a scalar Variable (learnable) or a
    plain float (frozen). A missing name disables that branch entirely.
    """

    channels: int
    config: CatConfig = field(default_factory=CatConfig)
    factors: dict[str, Variable | float] = field(default_factory=dict)
    w1: Variable | None = None
    w2: Variable | None = None
    conv_w: Variable | None = None
    conv_b: Variable | None = None

    @classmethod
    def init(cls, channels: int, config: CatConfig | None = None, rng=None, dtype=None) -> "CatParams":
        config = config or CatConfig()
        rng = rng if rng is not None else np.random.default_rng(0)
        dtype = dtype or ag.T.default_dtype()
        p = cls(channels, config)
        mode = config.mode

        def zero():
            return Variable(np.zeros((), dtype=dtype), requires_grad=True)

        def he(shape, fan_in):
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(dtype)
            return Variable(w, requires_grad=True)

        layout = factor_layout(config)
        for name, kind in layout.items():
            p.factors[name] = zero() if kind is None else kind
        if mode in _CHANNEL_MODES:
            hidden = reduced_width(channels, config.reduction)
            p.w1 = he((hidden, channels), channels)
            p.w2 = he((channels, hidden), hidden)
        if mode in _SPATIAL_MODES:
            p.conv_w = he((1, 1, 7, 7), 49)
            p.conv_b = Variable(np.zeros((1,), dtype=dtype), requires_grad=True)
        return p

    @classmethod
    def from_named(cls, channels: int, config: CatConfig, named: dict[str, Variable]) -> "CatParams":
        """Rebuild a block from the mapping produced by :meth:`named_parameters`."""
        p = cls(channels, config)
        for name, kind in factor_layout(config).items():
            p.factors[name] = named[name] if kind is None else kind
        p.w1 = named.get("mlp.w1")
        p.w2 = named.get("mlp.w2")
        p.conv_w = named.get("conv7.weight")
        p.conv_b = named.get("conv7.bias")
        return p

    def named_parameters(self) -> dict[str, Variable]:
        """Learnable tensors keyed by their name inside the block namespace."""
        out = {k: v for k, v in self.factors.items() if isinstance(v, Variable)}
        for name, v in (
            ("mlp.w1", self.w1),
            ("mlp.w2", self.w2),
            ("conv7.weight", self.conv_w),
            ("conv7.bias", self.conv_b),
        ):
            if v is not None:
                out[name] = v
        return {k: out[k] for k in sorted(out, key=_param_order)}

    def factor_value(self, name: str) -> float | None:
        f = self.factors.get(name)
        if f is None:
            return None
        return float(f.value) if isinstance(f, Variable) else float(f)

    def exterior_weights(self) -> tuple[float, float]:
        """Softmaxed (w_c, w_s) as plain floats."""
        c_w, s_w = self.factor_value("C_w") or 0.0, self.factor_value("S_w") or 0.0
        m = max(c_w, s_w)
        ec, es = np.exp(c_w - m), np.exp(s_w - m)
        return float(ec / (ec + es)), float(es / (ec + es))


def factor_layout(config: CatConfig) -> dict[str, float | None]:
    """Colla-factors present for ``config``: None marks a learnable factor,
    a float marks a frozen one. Absent names are disabled branches."""
    mode = config.mode
    if mode == "se":
        return {"C_alpha": 1.0}
    # the exterior-only arm keeps an unweighted sum inside each module
    interior = 1.0 if mode == "cat_exterior" else None
    names: list[str] = []
    if mode in _CHANNEL_MODES:
        names += CHANNEL_FACTORS
    if mode in _SPATIAL_MODES:
        names += SPATIAL_FACTORS
    layout = {n: interior for n in names if config.gep or not n.endswith("gamma")}
    if mode in _EXTERIOR_MODES:
        layout.update(C_w=None, S_w=None)
    return layout


def _param_order(name: str) -> tuple[int, str]:
    return (FACTOR_NAMES.index(name), "") if name in FACTOR_NAMES else (len(FACTOR_NAMES), name)


@dataclass
class AttentionOutput:
    refined: Variable
    channel_map: Variable | None
    spatial_map: Variable | None
    descriptors: dict[str, Variable] = field(default_factory=dict)


def _mlp(desc: Variable, p: CatParams) -> Variable:
    n, c = desc.shape[:2]
    h = ag.relu(ag.linear(ag.reshape(desc, (n, c)), p.w1))
    return ag.reshape(ag.linear(h, p.w2), (n, c, 1, 1))


def _use_gep(p: CatParams, gep: bool | None) -> bool:
    return p.config.gep if gep is None else gep


def channel_attention(x: Variable, p: CatParams, gep: bool | None = None, trace: dict | None = None) -> Variable:
    """Pre-sigmoid channel score C'_A of shape N x C x 1 x 1."""
    if x.value.ndim != 4 or x.shape[1] != p.channels:
        raise ShapeError(f"channel attention built for C={p.channels}, got input {x.shape}")
    if p.w1 is None:
        raise ValueError(f"mode {p.config.mode!r} has no channel module")
    cfg = p.config
    branches = [("c_avg", "gap", "C_alpha"), ("c_max", "gmp", "C_beta")]
    if _use_gep(p, gep):
        branches.append(("c_ent", "gep", "C_gamma"))
    score = None
    for key, method, fname in branches:
        factor = p.factors.get(fname)
        if factor is None:
            continue
        desc = pool_channel(x, method, cfg.gaussian_k, cfg.sigma, cfg.signed_range)
        if trace is not None:
            trace[key] = desc
        term = ag.mul(_mlp(desc, p), factor)
        score = term if score is None else ag.add(score, term)
    if score is None:
        score = Variable(np.zeros((x.shape[0], p.channels, 1, 1), dtype=x.dtype))
    return score


def spatial_attention(x: Variable, p: CatParams, gep: bool | None = None, trace: dict | None = None) -> Variable:
    """Pre-sigmoid spatial score of shape N x 1 x H x W (7x7 conv output)."""
    if x.value.ndim != 4:
        raise ShapeError(f"spatial attention expects NCHW input, got {x.shape}")
    if p.conv_w is None:
        raise ValueError(f"mode {p.config.mode!r} has no spatial module")
    cfg = p.config
    branches = [("s_avg", "gap", "S_alpha", True), ("s_max", "gmp", "S_beta", False)]
    if _use_gep(p, gep):
        branches.append(("s_ent", "gep", "S_gamma", False))
    combined = None
    for key, method, fname, negate in branches:
        factor = p.factors.get(fname)
        if factor is None:
            continue
        desc = pool_spatial(x, method, cfg.gaussian_k, cfg.sigma, cfg.signed_range)
        if trace is not None:
            trace[key] = desc
        term = ag.mul(ag.neg(desc) if negate else desc, factor)
        combined = term if combined is None else ag.add(combined, term)
    if combined is None:
        n, _, h, w = x.shape
        combined = Variable(np.zeros((n, 1, h, w), dtype=x.dtype))
    return ag.conv2d(combined, p.conv_w, p.conv_b, padding=3)


def exterior_weights(p: CatParams) -> tuple[Variable, Variable]:
    """Two-way softmax of (C_w, S_w), written as sigmoid of the difference."""
    diff = ag.sub(p.factors["C_w"], p.factors["S_w"])
    return ag.sigmoid(diff), ag.sigmoid(ag.neg(diff))


def cat_forward(x: Variable, p: CatParams, gep: bool | None = None) -> AttentionOutput:
    trace: dict[str, Variable] = {}
    c_raw = channel_attention(x, p, gep, trace)
    s_raw = spatial_attention(x, p, gep, trace)
    w_c, w_s = exterior_weights(p)
    if p.config.fusion == "canonical":
        c_map = ag.sigmoid(ag.mul(c_raw, w_c))
        s_map = ag.sigmoid(ag.mul(s_raw, w_s))
        refined = ag.add(ag.mul(x, c_map), ag.mul(x, s_map))
    else:
        # sigmoid first, then a single weighted gate multiplies the input
        c_map = ag.sigmoid(c_raw)
        s_map = ag.sigmoid(s_raw)
        gate = ag.add(ag.mul(c_map, w_c), ag.mul(s_map, w_s))
        refined = ag.mul(x, gate)
    return AttentionOutput(refined, c_map, s_map, trace)


def ablation_variant(
    x: Variable, p: CatParams, mode: str | None = None, gep_enabled: bool | None = None
) -> Variable:
    """Refined features for one ablation arm (defaults to the block's own mode)."""
    mode = mode or p.config.mode
    if mode in ("channel_only", "se"):
        return ag.mul(x, ag.sigmoid(channel_attention(x, p, gep_enabled)))
    if mode == "spatial_only":
        return ag.mul(x, ag.sigmoid(spatial_attention(x, p, gep_enabled)))
    if mode == "channel_then_spatial":
        y = ag.mul(x, ag.sigmoid(channel_attention(x, p, gep_enabled)))
        return ag.mul(y, ag.sigmoid(spatial_attention(y, p, gep_enabled)))
    if mode == "spatial_then_channel":
        y = ag.mul(x, ag.sigmoid(spatial_attention(x, p, gep_enabled)))
        return ag.mul(y, ag.sigmoid(channel_attention(y, p, gep_enabled)))
    if mode in _EXTERIOR_MODES:
        return cat_forward(x, p, gep_enabled).refined
    raise ValueError(f"unknown ablation mode {mode!r}")

