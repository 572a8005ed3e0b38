"""FGSM and PGD adversaries under l-infinity and l2 budgets.

All budgets are in pixel units on the [0, 1] scale. Every iterate stays
inside both the epsilon-ball around the original batch and the [0, 1] box.
Attacks maximize the cross-entropy loss of the model; saliency maps use the
class log-probability instead and live in :mod:`shapebias.saliency`.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError

LINF = "linf"
L2 = "l2"

# relative slack under which an l2 perturbation counts as inside the ball;
# keeps projection idempotent despite rounding in the rescale
_L2_SLACK = 1e-12


@dataclass(frozen=True)
class AttackConfig:
    norm: str = LINF
    epsilon: float = 8 / 255
    step_size: float = 2 / 255
    iterations: int = 20
    random_start: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.norm not in (LINF, L2):
            raise ConfigurationError(f"norm must be {LINF!r} or {L2!r}, got {self.norm!r}")
        if self.epsilon < 0:
            raise ConfigurationError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.iterations < 0:
            raise ConfigurationError(f"iterations must be >= 0, got {self.iterations}")
        if self.iterations > 0 and self.step_size <= 0:
            raise ConfigurationError(f"step_size must be > 0 when iterating, got {self.step_size}")
        if not 0 <= self.seed < 2**64:
            raise ConfigurationError(f"seed must be an unsigned 64-bit integer, got {self.seed}")

    @classmethod
    def fgsm(cls, epsilon: float, seed: int = 0) -> "AttackConfig":
        return cls(norm=LINF, epsilon=epsilon, step_size=epsilon, iterations=1, random_start=False, seed=seed)

    @property
    def is_fgsm(self) -> bool:
        return self.norm == LINF and self.iterations == 1 and not self.random_start and self.step_size == self.epsilon

    def to_dict(self) -> dict:
        return asdict(self)


def loss_input_gradient(model, x: np.ndarray, y) -> np.ndarray:
    """Gradient of the mean cross-entropy loss with respect to the input batch."""
    xt = ad.Tensor(x, requires_grad=True)
    with ad.Tape() as tape:
        loss = ad.cross_entropy(ad.log_softmax(model(xt)), y)
    return ad.backward(tape, loss)[xt]


def batch_loss(model, x: np.ndarray, y) -> np.ndarray:
    """Per-example cross-entropy loss."""
    lp = ad.log_softmax(model(ad.Tensor(x))).data
    return -lp[np.arange(len(lp)), np.asarray(y)]


def _per_image_norm(a: np.ndarray) -> np.ndarray:
    return np.sqrt((a.reshape(len(a), -1) ** 2).sum(axis=1))


def project_linf(delta: np.ndarray, epsilon: float) -> np.ndarray:
    return np.clip(delta, -epsilon, epsilon)


def project_l2(delta: np.ndarray, epsilon: float) -> np.ndarray:
    """Rescale each image's perturbation onto the l2 ball if it lies outside."""
    norms = _per_image_norm(delta)
    outside = norms > epsilon * (1 + _L2_SLACK)
    if not outside.any():
        return delta.copy()
    out = delta.copy()
    factor = epsilon / norms[outside]
    out[outside] = delta[outside] * factor.reshape((-1,) + (1,) * (delta.ndim - 1))
    return out


def _element_rng(seed: int, stream: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream, index])


def random_start_delta(shape, cfg: AttackConfig, stream: int = 0) -> np.ndarray:
    """Initial perturbation drawn per batch element from its own generator."""
    delta = np.empty(shape)
    for i in range(shape[0]):
        rng = _element_rng(cfg.seed, stream, i)
        if cfg.norm == LINF:
            delta[i] = rng.uniform(-cfg.epsilon, cfg.epsilon, shape[1:])
        else:
            g = rng.standard_normal(shape[1:])
            norm = np.sqrt((g**2).sum())
            delta[i] = g / norm * cfg.epsilon * rng.random() if norm > 0 else 0.0
    return delta


def fgsm(model, x: np.ndarray, y, epsilon: float) -> np.ndarray:
    """One signed-gradient step of size ``epsilon``, clamped to [0, 1]."""
    if epsilon < 0:
        raise ConfigurationError(f"epsilon must be >= 0, got {epsilon}")
    g = loss_input_gradient(model, x, y)
    return np.clip(x + epsilon * np.sign(g), 0.0, 1.0)


def pgd(model, x: np.ndarray, y, cfg: AttackConfig, stream: int = 0,
        callback: Callable[[int, np.ndarray], None] | None = None,
        start: np.ndarray | None = None) -> np.ndarray:
    """Projected gradient ascent on the loss inside the ``cfg`` ball.

    ``stream`` selects an independent family of random starts (training
    passes the step counter). ``start`` overrides the initial iterate and
    must already lie in the ball. ``callback(t, x_t)`` sees every iterate,
    including the initial one as ``t = -1``.
    """
    x0 = np.asarray(x, dtype=np.float64)
    eps = cfg.epsilon
    xt = x0.copy()
    if start is not None:
        xt = np.array(start, dtype=np.float64)
    elif cfg.random_start:
        xt = np.clip(x0 + random_start_delta(x0.shape, cfg, stream), 0.0, 1.0)
    if callback and (start is not None or cfg.random_start):
        callback(-1, xt)
    for t in range(cfg.iterations):
        g = loss_input_gradient(model, xt, y)
        if cfg.norm == LINF:
            xt = xt + cfg.step_size * np.sign(g)
            xt = np.clip(xt, x0 - eps, x0 + eps)
        else:
            norms = _per_image_norm(g)
            safe = np.where(norms > 0, norms, 1.0).reshape((-1,) + (1,) * (g.ndim - 1))
            direction = np.where(norms.reshape(safe.shape) > 0, g / safe, 0.0)
            xt = x0 + project_l2(xt + cfg.step_size * direction - x0, eps)
        xt = np.clip(xt, 0.0, 1.0)
        if callback:
            callback(t, xt)
    return xt


def attack(model, x: np.ndarray, y, cfg: AttackConfig, stream: int = 0) -> np.ndarray:
    """Dispatch to :func:`fgsm` when the config is the FGSM special case."""
    if cfg.is_fgsm:
        return fgsm(model, x, y, cfg.epsilon)
    return pgd(model, x, y, cfg, stream=stream)
