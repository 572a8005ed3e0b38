"""Input-gradient sensitivity maps (Grad and SmoothGrad).

The class score is the log-probability ``log p_c(x)``. Raw gradients have
shape ``(3, H, W)``; :func:`aggregate_channels` turns them into a 2-D map by
summing absolute channel values per pixel and dividing by the map maximum.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .data import quantize, write_png
from .errors import DimensionError

SMOOTHGRAD_SAMPLES = 100
SMOOTHGRAD_SIGMA_REL = 0.1
_CHUNK = 25


@dataclass
class SaliencyMap:
    values: np.ndarray
    provenance: dict = field(default_factory=dict)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def log_prob_input_gradient(model, batch: np.ndarray, classes) -> np.ndarray:
    """d log p_c / d x for every image of an NCHW batch (rows are independent)."""
    xt = ad.Tensor(batch, requires_grad=True)
    with ad.Tape() as tape:
        score = ad.sum_all(ad.pick(ad.log_softmax(model(xt)), classes))
    return ad.backward(tape, score)[xt]


def _check_class(model, c: int) -> None:
    k = getattr(model, "class_count", None)
    if c < 0 or (k is not None and c >= k):
        raise IndexError(f"class {c} outside [0, {k})")


def raw_grad(model, image: np.ndarray, c: int) -> np.ndarray:
    """Raw ``(3, H, W)`` gradient of ``log p_c`` at an ``(H, W, 3)`` image."""
    _check_class(model, c)
    batch = np.asarray(image, dtype=np.float64).transpose(2, 0, 1)[None]
    return log_prob_input_gradient(model, batch, [c])[0]


def raw_smoothgrad(model, image: np.ndarray, c: int, n: int = SMOOTHGRAD_SAMPLES,
                   sigma_rel: float = SMOOTHGRAD_SIGMA_REL, seed: int = 0) -> np.ndarray:
    """Mean raw gradient over ``n`` Gaussian-noised copies (noise is not clamped).

    The noise scale is ``sigma_rel * (max(x) - min(x))`` for this image. A
    zero scale returns :func:`raw_grad` unchanged.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if sigma_rel < 0:
        raise ValueError(f"sigma_rel must be >= 0, got {sigma_rel}")
    image = np.asarray(image, dtype=np.float64)
    sigma = sigma_rel * (image.max() - image.min())
    if sigma == 0:
        return raw_grad(model, image, c)
    _check_class(model, c)
    base = image.transpose(2, 0, 1)
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, sigma, size=(n,) + base.shape)
    total = np.zeros(base.shape)
    for start in range(0, n, _CHUNK):
        chunk = base[None] + noise[start : start + _CHUNK]
        grads = log_prob_input_gradient(model, chunk, [c] * len(chunk))
        for g in grads:  # fixed summation order
            total += g
    return total / n


def aggregate_channels(raw: np.ndarray) -> np.ndarray:
    """Sum of absolute channel values per pixel, scaled to max 1 (zero map stays zero)."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 3:
        raise DimensionError(f"raw gradient must be (C, H, W), got {raw.shape}")
    m = np.abs(raw).sum(axis=0)
    peak = m.max()
    return m / peak if peak > 0 else m


def grad_map(model, image: np.ndarray, c: int, model_id: str = "") -> SaliencyMap:
    return SaliencyMap(aggregate_channels(raw_grad(model, image, c)),
                       dict(model_id=model_id, method="grad", c=int(c), n=1, sigma=0.0))


def smoothgrad_map(model, image: np.ndarray, c: int, n: int = SMOOTHGRAD_SAMPLES,
                   sigma_rel: float = SMOOTHGRAD_SIGMA_REL, seed: int = 0, model_id: str = "") -> SaliencyMap:
    raw = raw_smoothgrad(model, image, c, n, sigma_rel, seed)
    return SaliencyMap(aggregate_channels(raw),
                       dict(model_id=model_id, method="smoothgrad", c=int(c), n=int(n), sigma=float(sigma_rel)))


def map_distance(a: SaliencyMap, b: SaliencyMap, metric: str = "mean_abs") -> float:
    """Mean absolute (or root-mean-square) pixel difference of two normalized maps."""
    va = a.values if isinstance(a, SaliencyMap) else np.asarray(a)
    vb = b.values if isinstance(b, SaliencyMap) else np.asarray(b)
    if va.shape != vb.shape:
        raise DimensionError(f"map shapes differ: {va.shape} vs {vb.shape}")
    diff = va - vb
    if metric == "mean_abs":
        return float(np.abs(diff).mean())
    if metric == "rms":
        return float(np.sqrt((diff**2).mean()))
    raise ValueError(f"unknown metric {metric!r}; use 'mean_abs' or 'rms'")


def render_map(m: SaliencyMap, path) -> None:
    """8-bit grayscale PNG with byte = round(255 * value)."""
    write_png(m.values if isinstance(m, SaliencyMap) else np.asarray(m), path)


def montage(image: np.ndarray, maps: list[SaliencyMap], gap: int = 2) -> np.ndarray:
    """Side-by-side RGB strip: the image followed by each map in gray."""
    h, w, _ = image.shape
    panels = [np.asarray(image, dtype=np.float64)]
    for m in maps:
        panels.append(np.repeat(m.values[:, :, None], 3, axis=2))
    spacer = np.ones((h, gap, 3))
    parts = []
    for i, p in enumerate(panels):
        if i:
            parts.append(spacer)
        parts.append(p)
    return np.concatenate(parts, axis=1)


def render_montage(image: np.ndarray, maps: list[SaliencyMap], path) -> None:
    write_png(montage(image, maps), path)


def quantized_map(m: SaliencyMap) -> np.ndarray:
    return quantize(m.values)
