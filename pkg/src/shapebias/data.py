"""Datasets, augmentation and image codecs.

Images are ``(H, W, 3)`` float64 arrays with values in ``[0, 1]``. A
:class:`LabeledDataset` stacks them into one ``(N, H, W, 3)`` array so that
batches can be sliced without copying per image.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .errors import ConfigurationError, DimensionError, FormatError

CIFAR10_CLASSES = [
    "airplane", "automobile", "bird", "cat", "deer",
    "dog", "frog", "horse", "ship", "truck",
]
CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILE = "test_batch.bin"


@dataclass
class LabeledDataset:
    images: np.ndarray
    labels: np.ndarray
    class_names: list[str] = field(default_factory=lambda: list(CIFAR10_CLASSES))

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[-1] != 3:
            raise DimensionError(f"images must be (N, H, W, 3), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DimensionError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise ConfigurationError(
                f"labels must lie in [0, {len(self.class_names)}), got [{self.labels.min()}, {self.labels.max()}]"
            )

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def class_count(self) -> int:
        return len(self.class_names)

    def subset(self, indices) -> "LabeledDataset":
        indices = np.asarray(indices)
        return LabeledDataset(self.images[indices], self.labels[indices], list(self.class_names))

    def head(self, n: int) -> "LabeledDataset":
        return self.subset(np.arange(min(n, len(self))))

    def batch(self, indices=None) -> np.ndarray:
        """NCHW view of the selected images (no augmentation)."""
        imgs = self.images if indices is None else self.images[indices]
        return to_nchw(imgs)


def to_nchw(images: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(images).transpose(0, 3, 1, 2))


def to_nhwc(batch: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(batch).transpose(0, 2, 3, 1))


def quantize(img: np.ndarray) -> np.ndarray:
    """Float [0,1] -> uint8 with round-half-up."""
    return np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def image_hash(img: np.ndarray) -> str:
    return hashlib.sha256(quantize(img).tobytes()).hexdigest()


# ---------------------------------------------------------------------------
# CIFAR-10 binary


def read_cifar_batch(path) -> tuple[np.ndarray, np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) % CIFAR_RECORD:
        raise FormatError(f"{path}: size {len(raw)} is not a multiple of the {CIFAR_RECORD}-byte record")
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        raise FormatError(f"{path}: label byte {labels.max()} outside 0..9")
    pixels = records[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return pixels.astype(np.float64) / 255.0, labels


def write_cifar_batch(path, images: np.ndarray, labels) -> None:
    """Inverse of :func:`read_cifar_batch` (32x32 RGB only)."""
    images = np.asarray(images)
    if images.shape[1:] != (32, 32, 3):
        raise DimensionError(f"CIFAR records hold 32x32x3 images, got {images.shape[1:]}")
    planar = quantize(images).transpose(0, 3, 1, 2).reshape(len(images), -1)
    records = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], planar], axis=1)
    Path(path).write_bytes(records.tobytes())


def load_cifar10_binary(directory) -> tuple[LabeledDataset, LabeledDataset]:
    directory = Path(directory)
    wanted = CIFAR_TRAIN_FILES + [CIFAR_TEST_FILE]
    missing = [name for name in wanted if not (directory / name).is_file()]
    if missing:
        raise FileNotFoundError(f"{directory}: missing CIFAR-10 batch files: {', '.join(missing)}")
    parts = [read_cifar_batch(directory / name) for name in CIFAR_TRAIN_FILES]
    train = LabeledDataset(np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]))
    test = LabeledDataset(*read_cifar_batch(directory / CIFAR_TEST_FILE))
    names_file = directory / "batches.meta.txt"
    if names_file.is_file():
        names = [line.strip() for line in names_file.read_text().splitlines() if line.strip()]
        if len(names) == 10:
            train.class_names = names
            test.class_names = list(names)
    return train, test


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentationSpec:
    pad_width: int = 4
    crop_size: tuple[int, int] | None = (32, 32)  # None keeps the input size
    horizontal_flip_prob: float = 0.5
    per_image_standardize: bool = False
    seed: int = 0

    def crop_for(self, height: int, width: int) -> tuple[int, int]:
        return (height, width) if self.crop_size is None else tuple(self.crop_size)

    def check(self, height: int, width: int) -> None:
        ch, cw = self.crop_for(height, width)
        if self.pad_width < 0:
            raise ConfigurationError(f"pad_width must be >= 0, got {self.pad_width}")
        if ch > height + 2 * self.pad_width or cw > width + 2 * self.pad_width:
            raise ConfigurationError(
                f"crop {ch}x{cw} does not fit in {height}x{width} padded by {self.pad_width}"
            )
        if not 0.0 <= self.horizontal_flip_prob <= 1.0:
            raise ConfigurationError(f"horizontal_flip_prob must be in [0, 1], got {self.horizontal_flip_prob}")


NO_AUGMENTATION = AugmentationSpec(pad_width=0, crop_size=None, horizontal_flip_prob=0.0)


def standardize(img: np.ndarray) -> np.ndarray:
    """Zero mean, unit variance; the deviation is floored at 1/sqrt(pixel count)."""
    std = max(img.std(), 1.0 / np.sqrt(img.size))
    return (img - img.mean()) / std


def augment(img: np.ndarray, spec: AugmentationSpec, draw: np.random.Generator | None = None,
            train: bool = True) -> np.ndarray:
    """Pad, crop, flip (and optionally standardize) one image; returns CHW.

    With ``train=False`` the crop is centered and no flip happens, so the
    result does not depend on ``draw``.
    """
    h, w, _ = img.shape
    spec.check(h, w)
    p = spec.pad_width
    ch, cw = spec.crop_for(h, w)
    padded = np.pad(img, ((p, p), (p, p), (0, 0))) if p else img
    if train:
        if draw is None:
            raise ConfigurationError("training-path augmentation needs a random generator")
        top = int(draw.integers(0, h + 2 * p - ch + 1))
        left = int(draw.integers(0, w + 2 * p - cw + 1))
        flip = draw.random() < spec.horizontal_flip_prob
    else:
        top, left, flip = (h + 2 * p - ch) // 2, (w + 2 * p - cw) // 2, False
    out = padded[top : top + ch, left : left + cw]
    if flip:
        out = out[:, ::-1]
    if spec.per_image_standardize:
        out = standardize(out)
    return np.ascontiguousarray(out.transpose(2, 0, 1))


def augment_batch(images: np.ndarray, spec: AugmentationSpec, draw: np.random.Generator | None,
                  train: bool = True) -> np.ndarray:
    return np.stack([augment(img, spec, draw, train) for img in images])


# ---------------------------------------------------------------------------
# image files


def read_png(path) -> np.ndarray:
    with PILImage.open(path) as im:
        if im.mode not in ("RGB", "L", "RGBA", "P"):
            raise FormatError(f"{path}: unsupported PNG mode {im.mode!r} (need 8-bit RGB or grayscale)")
        if im.mode == "L":
            arr = np.asarray(im, dtype=np.uint8)
            arr = np.repeat(arr[:, :, None], 3, axis=2)
        else:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return arr.astype(np.float64) / 255.0


def write_png(img: np.ndarray, path) -> None:
    img = np.asarray(img)
    if img.ndim == 2:
        PILImage.fromarray(quantize(img), mode="L").save(path)
    elif img.ndim == 3 and img.shape[2] == 3:
        PILImage.fromarray(quantize(img), mode="RGB").save(path)
    else:
        raise DimensionError(f"write_png expects (H, W) or (H, W, 3), got {img.shape}")


def write_ppm(img: np.ndarray, path) -> None:
    h, w, _ = img.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + quantize(img).tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PPM header")
        fields.append(raw[start:pos])
    pos += 1
    if fields[0] != b"P6":
        raise FormatError(f"{path}: only binary P6 PPM is supported, got {fields[0]!r}")
    w, h, maxval = (int(v) for v in fields[1:])
    if maxval != 255:
        raise FormatError(f"{path}: unsupported PPM maxval {maxval}")
    body = raw[pos : pos + w * h * 3]
    if len(body) != w * h * 3:
        raise FormatError(f"{path}: pixel data truncated")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).astype(np.float64) / 255.0


def write_labels_csv(path, labels) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "label"])
        for i, label in enumerate(labels):
            writer.writerow([i, int(label)])


def read_labels_csv(path) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["index", "label"]:
        raise FormatError(f"{path}: expected header 'index,label'")
    out = []
    for expected, row in enumerate(rows[1:]):
        if len(row) != 2 or int(row[0]) != expected:
            raise FormatError(f"{path}: row {expected + 1} is not '{expected},<label>'")
        out.append(int(row[1]))
    return np.asarray(out, dtype=np.int64)


def write_image_dir(ds: LabeledDataset, directory) -> list[str]:
    """Write ``{index:06}.png`` files plus ``labels.csv``; returns per-image hashes."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    hashes = []
    for i, img in enumerate(ds.images):
        write_png(img, directory / f"{i:06}.png")
        hashes.append(image_hash(img))
    write_labels_csv(directory / "labels.csv", ds.labels)
    return hashes


def load_image_dir(directory, class_names: list[str] | None = None) -> LabeledDataset:
    directory = Path(directory)
    labels = read_labels_csv(directory / "labels.csv")
    images = []
    for i in range(len(labels)):
        path = directory / f"{i:06}.png"
        if not path.is_file():
            raise FileNotFoundError(f"{path}: listed in labels.csv but missing")
        images.append(read_png(path))
    if class_names is None:
        k = max(10, int(labels.max()) + 1) if labels.size else 10
        class_names = list(CIFAR10_CLASSES) if k == 10 else [str(i) for i in range(k)]
    return LabeledDataset(np.stack(images) if images else np.zeros((0, 32, 32, 3)), labels, class_names)


# ---------------------------------------------------------------------------
# synthetic shape/texture corpus
#
# Every image is a flat-colored shape on a flat background, both overlaid
# with a faint periodic texture. The shape carries the label with
# probability ``shape_consistency`` (otherwise a random shape is drawn); the
# texture always carries the label. Base colors keep every channel at least
# 0.1 away from 1/2 so binarizing saturation erases the texture but keeps the
# shape/background contrast.

SHAPE_NAMES = ["disk", "square", "triangle", "nabla", "diamond", "plus", "ring", "hbar", "vbar", "xcross"]
TEXTURE_NAMES = ["rows2", "cols2", "checker1", "rows4", "cols4", "checker2", "rows2cols4", "rows4cols2", "rows3", "cols3"]
SYNTHETIC_CLASSES = [f"{s}+{t}" for s, t in zip(SHAPE_NAMES, TEXTURE_NAMES)]


def _shape_mask(kind: int, size: int, cy: float, cx: float, r: float, angle: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dy, dx = yy - cy, xx - cx
    ca, sa = np.cos(angle), np.sin(angle)
    u, v = ca * dx + sa * dy, -sa * dx + ca * dy
    name = SHAPE_NAMES[kind]
    if name == "disk":
        return u**2 + v**2 <= r**2
    if name == "square":
        return (np.abs(u) <= 0.8 * r) & (np.abs(v) <= 0.8 * r)
    if name in ("triangle", "nabla"):
        vv = v if name == "triangle" else -v
        return (vv <= 0.6 * r) & (vv >= -r + 2.0 * np.abs(u) * 0.85) & (np.abs(u) <= r)
    if name == "diamond":
        return np.abs(u) + np.abs(v) <= 1.1 * r
    if name == "plus":
        return ((np.abs(u) <= 0.3 * r) & (np.abs(v) <= r)) | ((np.abs(v) <= 0.3 * r) & (np.abs(u) <= r))
    if name == "ring":
        d2 = u**2 + v**2
        return (d2 <= r**2) & (d2 >= (0.55 * r) ** 2)
    if name == "hbar":
        return (np.abs(u) <= 1.1 * r) & (np.abs(v) <= 0.35 * r)
    if name == "vbar":
        return (np.abs(v) <= 1.1 * r) & (np.abs(u) <= 0.35 * r)
    # xcross
    a, b = (u + v) / np.sqrt(2), (u - v) / np.sqrt(2)
    return ((np.abs(a) <= 0.3 * r) & (np.abs(b) <= r)) | ((np.abs(b) <= 0.3 * r) & (np.abs(a) <= r))


def _texture(kind: int, size: int, oy: int, ox: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    y, x = yy + oy, xx + ox
    alt = lambda t: 1.0 - 2.0 * (t % 2)  # noqa: E731
    c4 = lambda t: 1.0 - 2.0 * ((t // 2) % 2)  # noqa: E731
    r3 = lambda t: np.where(t % 3 == 0, 1.0, -0.5)  # noqa: E731
    name = TEXTURE_NAMES[kind]
    return {
        "rows2": lambda: alt(y),
        "cols2": lambda: alt(x),
        "checker1": lambda: alt(x + y),
        "rows4": lambda: c4(y),
        "cols4": lambda: c4(x),
        "checker2": lambda: c4(x) * c4(y),
        "rows2cols4": lambda: alt(y) * c4(x),
        "rows4cols2": lambda: c4(y) * alt(x),
        "rows3": lambda: r3(y),
        "cols3": lambda: r3(x),
    }[name]().astype(np.float64)


def _base_color(rng: np.random.Generator) -> np.ndarray:
    high = rng.random(3) < 0.5
    return np.where(high, rng.uniform(0.62, 0.9, 3), rng.uniform(0.1, 0.38, 3))


def synthetic_image(rng: np.random.Generator, label: int, size: int = 32, texture_amplitude: float = 6 / 255,
                    noise_std: float = 0.01, shape_consistency: float = 1.0) -> np.ndarray:
    shape = label if rng.random() < shape_consistency else int(rng.integers(0, 10))
    bg = _base_color(rng)
    while True:
        fg = _base_color(rng)
        if np.any((fg > 0.5) != (bg > 0.5)):
            break
    r = rng.uniform(0.25, 0.36) * size
    cy, cx = rng.uniform(0.4, 0.6, 2) * size
    mask = _shape_mask(shape, size, cy, cx, r, rng.uniform(-0.25, 0.25))
    img = np.where(mask[:, :, None], fg, bg)
    oy, ox = (int(v) for v in rng.integers(0, 12, 2))
    img = img + texture_amplitude * _texture(label, size, oy, ox)[:, :, None]
    img = img + noise_std * rng.standard_normal(img.shape)
    return quantize(img).astype(np.float64) / 255.0


def make_synthetic_corpus(n: int, seed: int = 0, size: int = 32, **kwargs) -> LabeledDataset:
    """Balanced 10-class corpus; image ``i`` depends only on ``(seed, i)``."""
    labels = np.arange(n) % 10
    labels = np.random.default_rng([seed, 0xC1A55]).permutation(labels)
    images = np.stack([synthetic_image(np.random.default_rng([seed, i]), int(labels[i]), size, **kwargs)
                       for i in range(n)]) if n else np.zeros((0, size, size, 3))
    return LabeledDataset(images, labels, list(SYNTHETIC_CLASSES))
