"""Global average, max and entropy pooling for the channel and spatial paths.

Channel pooling collapses H and W (output N x C x 1 x 1); spatial pooling
collapses C (output N x 1 x H x W). Entropy pooling takes the Shannon entropy
of the softmax over the collapsed axes and then min-max normalises the result
per sample.
"""

from __future__ import annotations

from . import autograd as ag
from .autograd import Variable
from .tensor import ShapeError

CHANNEL_AXES = (2, 3)
SPATIAL_AXES = (1,)
METHODS = ("gap", "gmp", "gep")


def entropy(x: Variable, axes) -> Variable:
    """-sum p log p with p = softmax(x) over ``axes``; reduced axes kept."""
    p = ag.softmax(x, axes)
    return ag.neg(ag.sum_(ag.mul(p, ag.log_clamped(p)), axes, keepdims=True))


def minmax_normalize(x: Variable, axes, signed: bool = False) -> Variable:
    """Rescale each slice over ``axes`` to [0, 1]; constant slices become 0.

    With ``signed=True`` the result is remapped to [-1, 1] via ``2y - 1``
    (constant slices then map to -1).
    """
    lo = ag.amin(x, axes)
    span = ag.sub(ag.amax(x, axes), lo)
    y = ag.mul(ag.sub(x, lo), ag.safe_reciprocal(span))
    if signed:
        y = ag.sub(ag.scale(y, 2.0), 1.0)
    return y


def _check_nchw(x: Variable) -> None:
    if x.value.ndim != 4:
        raise ShapeError(f"pooling expects an NCHW tensor, got shape {x.shape}")


def pool_channel(
    x: Variable, method: str, gaussian_k: int = 5, sigma: float = 1.0, signed: bool = False
) -> Variable:
    """Per-channel descriptor of shape N x C x 1 x 1."""
    _check_nchw(x)
    if method == "gap":
        return ag.mean(x, CHANNEL_AXES, keepdims=True)
    if method == "gmp":
        if gaussian_k > 1:
            x = ag.gaussian_filter(x, gaussian_k, "vertical-1D", sigma)
        return ag.amax(x, CHANNEL_AXES)
    if method == "gep":
        # normalised across the C channels of each sample
        return minmax_normalize(entropy(x, CHANNEL_AXES), (1, 2, 3), signed)
    raise ValueError(f"unknown pooling method {method!r}; expected one of {METHODS}")


def pool_spatial(
    x: Variable, method: str, gaussian_k: int = 5, sigma: float = 1.0, signed: bool = False
) -> Variable:
    """Per-pixel descriptor of shape N x 1 x H x W."""
    _check_nchw(x)
    if method == "gap":
        return ag.mean(x, SPATIAL_AXES, keepdims=True)
    if method == "gmp":
        if gaussian_k > 1:
            x = ag.gaussian_filter(x, gaussian_k, "full-2D", sigma)
        return ag.amax(x, SPATIAL_AXES)
    if method == "gep":
        return minmax_normalize(entropy(x, SPATIAL_AXES), (1, 2, 3), signed)
    raise ValueError(f"unknown pooling method {method!r}; expected one of {METHODS}")
