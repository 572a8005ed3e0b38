"""Shape- and texture-dissociating image transforms.

* saturation pushes every channel value toward 0 or 1 and wipes out faint
  texture while keeping high-contrast contours;
* patch shuffling cuts the image into a k x k grid and permutes the tiles,
  keeping local texture and destroying global shape;
* Fourier filters keep the low (or high) spatial frequencies inside (or
  outside) a centered radial mask, or drop random modes.

Every transform maps an ``(H, W, 3)`` image in [0, 1] to another one. Random
transforms take an explicit seed; dataset-level generation derives the
per-image seed as ``seed ^ index`` so any single image can be regenerated.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .data import LabeledDataset, image_hash, quantize, write_image_dir
from .errors import ConfigurationError

SATURATION = "saturation"
PATCH_SHUFFLE = "patch_shuffle"
FOURIER = "fourier"
IDENTITY = "identity"

FOURIER_KINDS = ("low", "high", "random")


@dataclass(frozen=True)
class DistortionSpec:
    """One distortion. ``param`` is p for saturation, k for patch shuffle,
    the radius fraction for low/high Fourier filters and the drop probability
    for the random Fourier filter."""

    variant: str
    param: float = 0.0
    kind: str | None = None
    seed: int = 0

    def __post_init__(self):
        if self.variant == SATURATION:
            if not self.param > 0:
                raise ConfigurationError(f"saturation level p must be > 0 (or inf), got {self.param}")
        elif self.variant == PATCH_SHUFFLE:
            if int(self.param) != self.param or self.param < 2:
                raise ConfigurationError(f"patch-shuffle k must be an integer >= 2, got {self.param}")
        elif self.variant == FOURIER:
            if self.kind not in FOURIER_KINDS:
                raise ConfigurationError(f"fourier kind must be one of {FOURIER_KINDS}, got {self.kind!r}")
            if self.kind == "random" and not 0 <= self.param <= 1:
                raise ConfigurationError(f"random fourier drop probability must be in [0, 1], got {self.param}")
            if self.kind != "random" and not 0 < self.param <= 1:
                raise ConfigurationError(f"fourier radius fraction must be in (0, 1], got {self.param}")
        elif self.variant != IDENTITY:
            raise ConfigurationError(f"unknown distortion variant {self.variant!r}")

    @property
    def name(self) -> str:
        if self.variant == FOURIER:
            return f"fourier_{self.kind}"
        return self.variant

    @property
    def param_label(self) -> str:
        if self.variant == IDENTITY:
            return "-"
        if self.variant == PATCH_SHUFFLE:
            return str(int(self.param))
        return "inf" if math.isinf(self.param) else f"{self.param:g}"

    def with_seed(self, seed: int) -> "DistortionSpec":
        return DistortionSpec(self.variant, self.param, self.kind, seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        if isinstance(d["param"], float) and math.isinf(d["param"]):
            d["param"] = "inf"
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DistortionSpec":
        param = d.get("param", 0.0)
        return cls(d["variant"], float(param), d.get("kind"), int(d.get("seed", 0)))


def parse_distortion(text: str, seed: int = 0) -> DistortionSpec:
    """Parse the compact flag syntax: ``sat:<p>``, ``patch:<k>``,
    ``fourier:low:<rf>``, ``fourier:high:<rf>``, ``fourier:rand:<p>``,
    ``identity``."""
    parts = text.strip().lower().split(":")
    try:
        if parts == ["identity"]:
            return DistortionSpec(IDENTITY, seed=seed)
        if parts[0] == "sat" and len(parts) == 2:
            return DistortionSpec(SATURATION, float(parts[1]), seed=seed)
        if parts[0] == "patch" and len(parts) == 2:
            return DistortionSpec(PATCH_SHUFFLE, int(parts[1]), seed=seed)
        if parts[0] == "fourier" and len(parts) == 3:
            kind = {"low": "low", "high": "high", "rand": "random", "random": "random"}[parts[1]]
            return DistortionSpec(FOURIER, float(parts[2]), kind, seed=seed)
    except (KeyError, ValueError) as exc:
        raise ConfigurationError(f"cannot parse distortion {text!r}: {exc}") from exc
    raise ConfigurationError(
        f"cannot parse distortion {text!r}; expected sat:<p>, patch:<k>, fourier:low|high|rand:<v> or identity"
    )


# ---------------------------------------------------------------------------
# saturation


def saturate(x: np.ndarray, p: float) -> np.ndarray:
    """Per-value ``sign(2v-1) |2v-1|^(2/p) / 2 + 1/2``; ``p = inf`` binarizes."""
    if not p > 0:
        raise ConfigurationError(f"saturation level p must be > 0 (or inf), got {p}")
    u = 2.0 * np.asarray(x, dtype=np.float64) - 1.0
    if math.isinf(p):
        return np.sign(u) / 2.0 + 0.5
    return np.sign(u) * np.abs(u) ** (2.0 / p) / 2.0 + 0.5


# ---------------------------------------------------------------------------
# patch shuffling


def center_crop_divisible(x: np.ndarray, k: int) -> tuple[np.ndarray, tuple[int, int]]:
    """Crop centrally to the largest size divisible by ``k``; returns the crop offsets."""
    h, w = x.shape[:2]
    if k > min(h, w):
        raise ConfigurationError(f"patch grid k={k} exceeds image size {h}x{w}")
    nh, nw = h - h % k, w - w % k
    top, left = (h - nh) // 2, (w - nw) // 2
    return x[top : top + nh, left : left + nw], (top, left)


def shuffle_patches(x: np.ndarray, k: int, permutation) -> np.ndarray:
    """Rearrange a k x k grid of tiles: output slot ``i`` (row-major) receives
    input tile ``permutation[i]``. Dimensions must already be divisible."""
    h, w = x.shape[:2]
    if h % k or w % k:
        raise ConfigurationError(f"image {h}x{w} not divisible into a {k}x{k} grid")
    permutation = np.asarray(permutation)
    if sorted(permutation.tolist()) != list(range(k * k)):
        raise ConfigurationError(f"not a permutation of {k * k} tiles: {permutation.tolist()}")
    ph, pw = h // k, w // k
    tiles = x.reshape(k, ph, k, pw, *x.shape[2:]).swapaxes(1, 2).reshape(k * k, ph, pw, *x.shape[2:])
    out = tiles[permutation].reshape(k, k, ph, pw, *x.shape[2:]).swapaxes(1, 2)
    return out.reshape(h, w, *x.shape[2:])


def patch_permutation(k: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).permutation(k * k)


def patch_shuffle(x: np.ndarray, k: int, seed: int) -> np.ndarray:
    cropped, _ = center_crop_divisible(x, k)
    return shuffle_patches(cropped, k, patch_permutation(k, seed))


# ---------------------------------------------------------------------------
# Fourier filtering


def radial_low_mask(h: int, w: int, radius_frac: float) -> np.ndarray:
    """Unshifted-layout mask: 1 where the centered frequency radius is within
    ``radius_frac`` of the spectrum half-diagonal."""
    fy = np.fft.fftfreq(h) * h
    fx = np.fft.fftfreq(w) * w
    dist = np.sqrt(fy[:, None] ** 2 + fx[None, :] ** 2)
    half_diagonal = math.hypot(h / 2, w / 2)
    return (dist <= radius_frac * half_diagonal).astype(np.float64)


def random_mode_mask(h: int, w: int, drop_prob: float, seed: int) -> np.ndarray:
    """Drop each mode with probability ``drop_prob``; a mode and its conjugate
    share one draw so the filtered image stays real."""
    draws = np.random.default_rng(seed).random((h, w))
    iy = (-np.arange(h)) % h
    ix = (-np.arange(w)) % w
    conj = draws[iy][:, ix]
    lin = np.arange(h)[:, None] * w + np.arange(w)[None, :]
    lin_conj = iy[:, None] * w + ix[None, :]
    shared = np.where(lin <= lin_conj, draws, conj)
    return (shared >= drop_prob).astype(np.float64)


def fourier_mask(h: int, w: int, spec: DistortionSpec) -> np.ndarray:
    if spec.kind == "low":
        return radial_low_mask(h, w, spec.param)
    if spec.kind == "high":
        return 1.0 - radial_low_mask(h, w, spec.param)
    return random_mode_mask(h, w, spec.param, spec.seed)


def apply_spectral_mask(x: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Complex result of masking every channel's 2-D spectrum (no clamping)."""
    spectrum = np.fft.fft2(x, axes=(0, 1))
    return np.fft.ifft2(spectrum * mask[:, :, None], axes=(0, 1))


def fourier_filter(x: np.ndarray, spec: DistortionSpec, clamp: bool = True) -> np.ndarray:
    h, w = x.shape[:2]
    out = apply_spectral_mask(x, fourier_mask(h, w, spec)).real
    return np.clip(out, 0.0, 1.0) if clamp else out


# ---------------------------------------------------------------------------
# dispatch and datasets


def distort(x: np.ndarray, spec: DistortionSpec) -> np.ndarray:
    if spec.variant == IDENTITY:
        return np.array(x, dtype=np.float64)
    if spec.variant == SATURATION:
        return saturate(x, spec.param)
    if spec.variant == PATCH_SHUFFLE:
        return patch_shuffle(x, int(spec.param), spec.seed)
    return fourier_filter(x, spec)


def image_seed(seed: int, index: int) -> int:
    return int(seed) ^ int(index)


def distort_dataset(src: LabeledDataset, spec: DistortionSpec) -> LabeledDataset:
    """In-memory, index-aligned transformed copy of ``src``."""
    images = [distort(img, spec.with_seed(image_seed(spec.seed, i))) for i, img in enumerate(src.images)]
    stacked = np.stack(images) if images else src.images.copy()
    return LabeledDataset(stacked, src.labels.copy(), list(src.class_names))


def make_distorted_dataset(src: LabeledDataset, spec: DistortionSpec, out_dir) -> LabeledDataset:
    """Write the transformed set as PNGs plus ``labels.csv`` and ``manifest.json``.

    Returns the dataset exactly as stored (8-bit quantized).
    """
    out_dir = Path(out_dir)
    transformed = distort_dataset(src, spec)
    quantized = LabeledDataset(quantize(transformed.images).astype(np.float64) / 255.0,
                               transformed.labels, transformed.class_names)
    output_hashes = write_image_dir(quantized, out_dir)
    crop = None
    if spec.variant == PATCH_SHUFFLE and len(src):
        h, w = src.images.shape[1:3]
        _, offsets = center_crop_divisible(src.images[0], int(spec.param))
        k = int(spec.param)
        crop = {"top": offsets[0], "left": offsets[1], "height": h - h % k, "width": w - w % k}
    manifest = {
        "spec": spec.to_dict(),
        "name": spec.name,
        "param": spec.param_label,
        "master_seed": spec.seed,
        "per_image_seed": "master_seed XOR index",
        "count": len(src),
        "crop": crop,
        "source_hashes": [image_hash(img) for img in src.images],
        "output_hashes": output_hashes,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return quantized


def replay_manifest_entry(manifest: dict, src_image: np.ndarray, index: int) -> bool:
    """Regenerate one image from a manifest and compare against the stored hash."""
    if image_hash(src_image) != manifest["source_hashes"][index]:
        return False
    spec = DistortionSpec.from_dict(manifest["spec"])
    out = distort(src_image, spec.with_seed(image_seed(spec.seed, index)))
    return image_hash(out) == manifest["output_hashes"][index]
