"""A CIFAR-style three-stage residual network with attention on every residual branch."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import autograd as ag
from .attention import ATTENTION_KINDS, CatConfig, CatParams, ablation_variant
from .autograd import Variable
from .tensor import ShapeError, default_dtype

BN_MOMENTUM = 0.9


@dataclass(frozen=True)
class ModelSpec:
    stage_widths: tuple[int, ...] = (16, 32, 64)
    blocks_per_stage: int = 3
    num_classes: int = 10
    attention: str = "full_cat"
    gep: bool = True
    reduction: int = 16
    gaussian_k: int = 5
    gaussian_sigma: float = 1.0
    fusion: str = "canonical"
    signed_range: bool = False
    in_channels: int = 3
    image_size: int = 32

    def __post_init__(self):
        widths = tuple(int(w) for w in self.stage_widths)
        object.__setattr__(self, "stage_widths", widths)
        if not widths or any(w < 1 for w in widths):
            raise ValueError(f"stage widths must be positive, got {widths}")
        if any(b < a for a, b in zip(widths, widths[1:])):
            raise ValueError(f"stage widths must be nondecreasing, got {widths}")
        if self.blocks_per_stage < 1:
            raise ValueError("blocks_per_stage must be >= 1")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.attention not in ATTENTION_KINDS:
            raise ValueError(f"unknown attention {self.attention!r}; expected one of {ATTENTION_KINDS}")
        if self.attention != "none":
            self.cat_config()

    def cat_config(self) -> CatConfig:
        return CatConfig(
            mode=self.attention,
            gep=self.gep,
            reduction=self.reduction,
            gaussian_k=self.gaussian_k,
            sigma=self.gaussian_sigma,
            fusion=self.fusion,
            signed_range=self.signed_range,
        )

    def blocks(self) -> Iterator[tuple[str, int, int, int]]:
        """Yield (name, in_width, out_width, stride) for each residual block."""
        cin = self.stage_widths[0]
        for s, width in enumerate(self.stage_widths, start=1):
            for b in range(1, self.blocks_per_stage + 1):
                stride = 2 if (s > 1 and b == 1) else 1
                yield f"stage{s}.block{b}", cin, width, stride
                cin = width


class ParamStore(dict):
    """Ordered mapping from hierarchical names to Variables.

    Learnable entries have ``requires_grad=True``; batch-norm running
    statistics are stored alongside as non-learnable buffers.
    """

    def trainable(self) -> dict[str, Variable]:
        return {k: v for k, v in self.items() if v.requires_grad}

    def buffers(self) -> dict[str, Variable]:
        return {k: v for k, v in self.items() if not v.requires_grad}

    def num_parameters(self) -> int:
        return int(sum(v.value.size for v in self.trainable().values()))

    def scoped(self, prefix: str) -> dict[str, Variable]:
        dot = prefix + "."
        return {k[len(dot) :]: v for k, v in self.items() if k.startswith(dot)}

    def zero_grad(self) -> None:
        for v in self.values():
            v.grad = None

    def cat_blocks(self, spec: ModelSpec) -> dict[str, CatParams]:
        """CatParams view of every attention insertion point."""
        if spec.attention == "none":
            return {}
        cfg = spec.cat_config()
        return {
            name: CatParams.from_named(cout, cfg, self.scoped(f"{name}.cat"))
            for name, _, cout, _ in spec.blocks()
        }


def _he(rng, shape, fan_in, dtype) -> Variable:
    return Variable(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(dtype), requires_grad=True)


def _add_bn(store: ParamStore, prefix: str, width: int, dtype) -> None:
    store[f"{prefix}.gamma"] = Variable(np.ones(width, dtype=dtype), requires_grad=True)
    store[f"{prefix}.beta"] = Variable(np.zeros(width, dtype=dtype), requires_grad=True)
    store[f"{prefix}.running_mean"] = Variable(np.zeros(width, dtype=dtype))
    store[f"{prefix}.running_var"] = Variable(np.ones(width, dtype=dtype))


def init_model(spec: ModelSpec, seed: int = 0, dtype=None) -> ParamStore:
    """Fresh parameters: He-normal weights, unit BN scale, zero colla-factors."""
    dtype = dtype or default_dtype()
    rng = np.random.default_rng(seed)
    store = ParamStore()
    w0 = spec.stage_widths[0]
    store["stem.conv.weight"] = _he(rng, (w0, spec.in_channels, 3, 3), spec.in_channels * 9, dtype)
    _add_bn(store, "stem.bn", w0, dtype)
    cat_cfg = spec.cat_config() if spec.attention != "none" else None
    for name, cin, cout, stride in spec.blocks():
        store[f"{name}.conv1.weight"] = _he(rng, (cout, cin, 3, 3), cin * 9, dtype)
        _add_bn(store, f"{name}.bn1", cout, dtype)
        store[f"{name}.conv2.weight"] = _he(rng, (cout, cout, 3, 3), cout * 9, dtype)
        _add_bn(store, f"{name}.bn2", cout, dtype)
        if stride != 1 or cin != cout:
            store[f"{name}.skip.conv.weight"] = _he(rng, (cout, cin, 1, 1), cin, dtype)
            _add_bn(store, f"{name}.skip.bn", cout, dtype)
        if cat_cfg is not None:
            cat = CatParams.init(cout, cat_cfg, rng, dtype)
            for local, v in cat.named_parameters().items():
                store[f"{name}.cat.{local}"] = v
    width = spec.stage_widths[-1]
    store["fc.weight"] = _he(rng, (spec.num_classes, width), width, dtype)
    store["fc.bias"] = Variable(np.zeros(spec.num_classes, dtype=dtype), requires_grad=True)
    return store


def _bn(x: Variable, store: ParamStore, prefix: str, training: bool) -> Variable:
    return ag.batch_norm(
        x,
        store[f"{prefix}.gamma"],
        store[f"{prefix}.beta"],
        store[f"{prefix}.running_mean"].value,
        store[f"{prefix}.running_var"].value,
        training,
        BN_MOMENTUM,
    )


def _conv3x3(x: Variable, w: Variable, stride: int) -> Variable:
    # replicate padding keeps constant inputs constant through the network
    return ag.conv2d(ag.pad_edge(x, 1), w, None, padding=0, stride=stride)


def block_forward(
    x: Variable,
    store: ParamStore,
    name: str,
    stride: int,
    training: bool,
    cat: CatParams | None = None,
    trace: dict | None = None,
) -> Variable:
    """relu(skip(x) + attention(bn(conv(relu(bn(conv(x))))))).

    ``trace``, when given, receives the residual-branch output that feeds the
    attention block under the key ``name``.
    """
    h = ag.relu(_bn(_conv3x3(x, store[f"{name}.conv1.weight"], stride), store, f"{name}.bn1", training))
    h = _bn(_conv3x3(h, store[f"{name}.conv2.weight"], 1), store, f"{name}.bn2", training)
    if trace is not None:
        trace[name] = h
    if cat is not None:
        h = ablation_variant(h, cat)
    skip_key = f"{name}.skip.conv.weight"
    if skip_key in store:
        skip = _bn(ag.conv2d(x, store[skip_key], None, padding=0, stride=stride), store, f"{name}.skip.bn", training)
    else:
        skip = x
    return ag.relu(ag.add(skip, h))


def model_forward(
    batch, store: ParamStore, spec: ModelSpec, training: bool = False, trace: dict | None = None
) -> Variable:
    """Logits of shape N x num_classes for an N x 3 x 32 x 32 batch."""
    x = batch if isinstance(batch, Variable) else Variable(np.asarray(batch, dtype=store["fc.weight"].dtype))
    expect = (spec.in_channels, spec.image_size, spec.image_size)
    if x.value.ndim != 4 or x.shape[1:] != expect:
        raise ShapeError(f"model expects input N x {' x '.join(map(str, expect))}, got {x.shape}")
    h = ag.relu(_bn(_conv3x3(x, store["stem.conv.weight"], 1), store, "stem.bn", training))
    cats = store.cat_blocks(spec)
    for name, _, _, stride in spec.blocks():
        h = block_forward(h, store, name, stride, training, cats.get(name), trace)
    pooled = ag.reshape(ag.mean(h, (2, 3), keepdims=True), h.shape[:2])
    return ag.linear(pooled, store["fc.weight"], store["fc.bias"])


def analytic_param_count(spec: ModelSpec) -> int:
    """Closed-form count of learnable scalars for ``spec``."""
    w = spec.stage_widths
    total = spec.in_channels * w[0] * 9 + 2 * w[0]
    for _, cin, cout, stride in spec.blocks():
        total += 9 * cin * cout + 9 * cout * cout + 4 * cout
        if stride != 1 or cin != cout:
            total += cin * cout + 2 * cout
        total += _attention_count(spec, cout)
    return total + w[-1] * spec.num_classes + spec.num_classes


def _attention_count(spec: ModelSpec, c: int) -> int:
    mode = spec.attention
    if mode == "none":
        return 0
    hidden = max(1, round(c / spec.reduction))
    mlp = 2 * c * hidden
    conv7 = 49 + 1
    per_module = 3 if spec.gep else 2
    if mode == "se":
        return mlp
    if mode == "channel_only":
        return mlp + per_module
    if mode == "spatial_only":
        return conv7 + per_module
    if mode in ("channel_then_spatial", "spatial_then_channel"):
        return mlp + conv7 + 2 * per_module
    if mode == "cat_exterior":
        return mlp + conv7 + 2
    return mlp + conv7 + 2 * per_module + 2

