"""Spatial attention maps as grayscale PGM images."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import autograd as ag
from .attention import CatParams, channel_attention, exterior_weights, spatial_attention
from .autograd import Variable
from .backbone import ModelSpec, ParamStore, model_forward
from .pooling import pool_spatial

MAP_SUFFIXES = ("-savg", "smax", "sent", "fused")


def write_pgm(path, image: np.ndarray) -> None:
    """Binary P5 with maxval 255; ``image`` is H x W uint8."""
    image = np.asarray(image)
    if image.ndim != 2 or image.dtype != np.uint8:
        raise ValueError(f"PGM needs a 2-D uint8 array, got {image.dtype} {image.shape}")
    h, w = image.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + image.tobytes())


def read_pgm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    magic, dims, maxval, pixels = blob.split(b"\n", 3)
    if magic != b"P5" or maxval != b"255":
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    w, h = (int(v) for v in dims.split())
    return np.frombuffer(pixels, dtype=np.uint8, count=w * h).reshape(h, w)


def to_gray(m: np.ndarray) -> np.ndarray:
    """Min-max scale to 0..255; a constant map becomes all zeros."""
    m = np.asarray(m, dtype=np.float64)
    lo, hi = m.min(), m.max()
    if not hi > lo:
        return np.zeros(m.shape, dtype=np.uint8)
    return np.round((m - lo) / (hi - lo) * 255.0).astype(np.uint8)


def unit_to_gray(m: np.ndarray) -> np.ndarray:
    """Map values already in [0, 1] straight to 0..255."""
    return np.round(np.clip(np.asarray(m, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def spatial_maps(h: Variable, cat: CatParams) -> dict[str, np.ndarray]:
    """The three spatial descriptors and the post-sigmoid spatial map, N x H x W each."""
    mode = cat.config.mode
    x = h
    if mode == "channel_then_spatial":
        x = ag.mul(h, ag.sigmoid(channel_attention(h, cat)))
    s_raw = spatial_attention(x, cat)
    if mode in ("full_cat", "cat_exterior") and cat.config.fusion == "canonical":
        fused = ag.sigmoid(ag.mul(s_raw, exterior_weights(cat)[1]))
    else:
        fused = ag.sigmoid(s_raw)
    cfg = cat.config
    desc = {
        "-savg": ag.neg(pool_spatial(x, "gap")),
        "smax": pool_spatial(x, "gmp", cfg.gaussian_k, cfg.sigma),
        "sent": pool_spatial(x, "gep", cfg.gaussian_k, cfg.sigma, cfg.signed_range),
        "fused": fused,
    }
    return {k: v.value[:, 0] for k, v in desc.items()}


def spatial_blocks(store: ParamStore, spec: ModelSpec) -> dict[str, CatParams]:
    return {k: v for k, v in store.cat_blocks(spec).items() if v.conv_w is not None}


def export_attention(
    store: ParamStore,
    spec: ModelSpec,
    images: np.ndarray,
    out_dir,
    layers: list[str] | None = None,
    tags: list[str] | None = None,
) -> list[Path]:
    """Write ``<block>_<tag>_<suffix>.pgm`` for each selected block and image.

    ``images`` is a standardized N x 3 x 32 x 32 batch; ``tags`` name the
    images in file names (default img0, img1, ...).
    """
    blocks = spatial_blocks(store, spec)
    if not blocks:
        raise ValueError(f"attention={spec.attention!r} has no spatial attention maps to export")
    layers = list(blocks) if not layers else layers
    unknown = [l for l in layers if l not in blocks]
    if unknown:
        raise ValueError(f"unknown layer(s) {', '.join(unknown)}; available: {', '.join(blocks)}")
    tags = tags or [f"img{i}" for i in range(len(images))]
    trace: dict[str, Variable] = {}
    model_forward(images, store, spec, training=False, trace=trace)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for layer in layers:
        maps = spatial_maps(trace[layer], blocks[layer])
        for i, tag in enumerate(tags):
            for suffix in MAP_SUFFIXES:
                m = maps[suffix][i]
                gray = unit_to_gray(m) if suffix == "fused" else to_gray(m)
                path = out / f"{layer}_{tag}_{suffix}.pgm"
                write_pgm(path, gray)
                written.append(path)
    return written
