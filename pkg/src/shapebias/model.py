"""Desk-scale residual classifier, initialization and checkpoint persistence.

The network ("MicroResNet") is a stem convolution followed by stages of
residual blocks. Each stage optionally widens the channel count with a 3x3
projection convolution, applies its residual blocks and halves the spatial
resolution with 2x2 max pooling. A global average pool and one dense layer
produce the logits. There is no normalization layer, so the forward pass is
a pure differentiable function of the input.

Pixels are shifted by ``-1/2`` before the stem. Without batch statistics the
network relies on initialization for stable early training: the dense head
and the second convolution of every residual branch start at zero, so each
block begins as the identity and the initial logits are exactly zero.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, DimensionError, LoadError

DEFAULT_STAGES = ((16, 2), (32, 2), (64, 2))

CHECKPOINT_MAGIC = b"SHBIAS\x00\x01"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetworkConfig:
    input_size: tuple[int, int, int] = (3, 32, 32)
    stages: tuple[tuple[int, int], ...] = DEFAULT_STAGES
    class_count: int = 10
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        object.__setattr__(self, "stages", tuple((int(c), int(b)) for c, b in self.stages))
        channels, height, width = self.input_size
        if channels != 3:
            raise ConfigurationError(f"input must have 3 channels, got {channels}")
        if not self.stages:
            raise ConfigurationError("at least one stage is required")
        if any(c < 1 or b < 0 for c, b in self.stages):
            raise ConfigurationError(f"stage entries must be (channels >= 1, blocks >= 0), got {self.stages}")
        factor = 2 ** len(self.stages)
        if height % factor or width % factor:
            raise ConfigurationError(
                f"input {height}x{width} not divisible by 2^{len(self.stages)} = {factor}; pooling infeasible"
            )
        if self.class_count < 2:
            raise ConfigurationError(f"class_count must be >= 2, got {self.class_count}")
        if not 0 <= self.seed < 2**64:
            raise ConfigurationError(f"seed must be an unsigned 64-bit integer, got {self.seed}")

    def to_dict(self) -> dict:
        return {"kind": "microresnet", **asdict(self)}


@dataclass(frozen=True)
class MLPConfig:
    """Plain multilayer perceptron; only used to exercise gradients."""

    input_size: tuple[int, int, int] = (3, 8, 8)
    hidden: tuple[int, ...] = (16,)
    class_count: int = 10
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        object.__setattr__(self, "hidden", tuple(int(v) for v in self.hidden))
        if self.class_count < 2:
            raise ConfigurationError(f"class_count must be >= 2, got {self.class_count}")

    def to_dict(self) -> dict:
        return {"kind": "mlp", **asdict(self)}


def config_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("kind", "microresnet")
    if kind == "microresnet":
        return NetworkConfig(
            input_size=tuple(d["input_size"]),
            stages=tuple(tuple(s) for s in d["stages"]),
            class_count=d["class_count"],
            seed=d["seed"],
        )
    if kind == "mlp":
        return MLPConfig(tuple(d["input_size"]), tuple(d["hidden"]), d["class_count"], d["seed"])
    raise ConfigurationError(f"unknown network kind {kind!r}")


def parameter_shapes(config) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every parameter; a pure function of the config."""
    shapes: dict[str, tuple[int, ...]] = {}
    if isinstance(config, MLPConfig):
        width = int(np.prod(config.input_size))
        for i, h in enumerate(config.hidden):
            shapes[f"fc{i}.weight"] = (width, h)
            shapes[f"fc{i}.bias"] = (h,)
            width = h
        shapes["head.weight"] = (width, config.class_count)
        shapes["head.bias"] = (config.class_count,)
        return shapes

    in_ch = config.input_size[0]
    first = config.stages[0][0]
    shapes["stem.kernel"] = (first, in_ch, 3, 3)
    shapes["stem.bias"] = (first,)
    ch = first
    for s, (width, blocks) in enumerate(config.stages):
        if width != ch:
            shapes[f"s{s}.proj.kernel"] = (width, ch, 3, 3)
            shapes[f"s{s}.proj.bias"] = (width,)
            ch = width
        for b in range(blocks):
            for conv in ("conv1", "conv2"):
                shapes[f"s{s}.b{b}.{conv}.kernel"] = (ch, ch, 3, 3)
                shapes[f"s{s}.b{b}.{conv}.bias"] = (ch,)
    shapes["head.weight"] = (ch, config.class_count)
    shapes["head.bias"] = (config.class_count,)
    return shapes


class Network:
    """A configuration plus named parameter tensors.

    Calling the network (``net(x)``) evaluates logits without tracking
    parameter gradients, which is what attacks and saliency need. Training
    goes through :func:`forward` with ``param_grad=True``.
    """

    def __init__(self, config, parameters: dict[str, Tensor]):
        self.config = config
        self.parameters = parameters

    def __call__(self, batch) -> Tensor:
        return forward(self, batch, param_grad=False)

    @property
    def class_count(self) -> int:
        return self.config.class_count

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters.values())

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.parameters.items()}

    def copy(self) -> "Network":
        return Network(self.config, {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.parameters.items()})


INPUT_SHIFT = -0.5


def _zero_init(config, name: str) -> bool:
    if name.endswith(".bias"):
        return True
    return isinstance(config, NetworkConfig) and (name == "head.weight" or name.endswith("conv2.kernel"))


def build_network(config) -> Network:
    """Initialize parameters from the config seed.

    Kernels and dense weights are He-scaled Gaussians drawn in parameter
    order; biases are zero. For the residual network the head and each
    branch's closing convolution are zero as well (draws are still consumed,
    so other parameters do not depend on this choice).
    """
    rng = np.random.default_rng(config.seed)
    params = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".bias"):
            data = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            data = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
            if _zero_init(config, name):
                data = np.zeros(shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return Network(config, params)


def _as_batch(net: Network, batch) -> Tensor:
    if not isinstance(batch, Tensor):
        batch = Tensor(batch)
    expected = net.config.input_size
    if batch.ndim != 4:
        raise DimensionError(f"batch must be 4-D NCHW, got shape {batch.shape}")
    for axis, (got, want) in enumerate(zip(batch.shape[1:], expected), start=1):
        if got != want:
            raise DimensionError(f"batch axis {axis} has size {got}, network expects {want}")
    return batch


def forward(net: Network, batch, param_grad: bool = True) -> Tensor:
    """Logits for an NCHW batch."""
    x = _as_batch(net, batch)
    cfg = net.config

    def p(name):
        t = net.parameters[name]
        return t if param_grad else Tensor(t.data)

    if isinstance(cfg, MLPConfig):
        h = ad.flatten(x)
        for i in range(len(cfg.hidden)):
            h = ad.relu(ad.dense(h, p(f"fc{i}.weight"), p(f"fc{i}.bias")))
        return ad.dense(h, p("head.weight"), p("head.bias"))

    h = ad.relu(ad.conv2d(ad.offset(x, INPUT_SHIFT), p("stem.kernel"), p("stem.bias"), 1, 1))
    for s, (_, blocks) in enumerate(cfg.stages):
        if f"s{s}.proj.kernel" in net.parameters:
            h = ad.relu(ad.conv2d(h, p(f"s{s}.proj.kernel"), p(f"s{s}.proj.bias"), 1, 1))
        for b in range(blocks):
            pre = f"s{s}.b{b}"
            r = ad.relu(ad.conv2d(h, p(f"{pre}.conv1.kernel"), p(f"{pre}.conv1.bias"), 1, 1))
            r = ad.conv2d(r, p(f"{pre}.conv2.kernel"), p(f"{pre}.conv2.bias"), 1, 1)
            h = ad.relu(ad.add(h, r))
        h = ad.max_pool2(h)
    h = ad.global_avg_pool(h)
    return ad.dense(h, p("head.weight"), p("head.bias"))


def class_probabilities(net: Network, batch) -> np.ndarray:
    return np.exp(ad.log_softmax(net(batch)).data)


def predict(net: Network, batch) -> np.ndarray:
    """Row argmax of the logits; ties go to the lowest class index."""
    return np.argmax(net(batch).data, axis=1)


# ---------------------------------------------------------------------------
# checkpoints
#
# layout (little-endian):
#   magic[8] | version u32 | config: u32 len + utf-8 JSON | meta: u32 len + utf-8 JSON
#   | count u32 | count x (name: u32 len + utf-8 | ndim u32 | dims u64[ndim] | f64[prod(dims)])


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def save_checkpoint(net: Network, path, metadata: dict | None = None) -> None:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(_pack_str(json.dumps(net.config.to_dict(), sort_keys=True)))
    buf.write(_pack_str(json.dumps(metadata or {}, sort_keys=True)))
    buf.write(struct.pack("<I", len(net.parameters)))
    for name, tensor in net.parameters.items():
        buf.write(_pack_str(name))
        buf.write(struct.pack("<I", tensor.ndim))
        buf.write(struct.pack(f"<{tensor.ndim}Q", *tensor.shape))
        buf.write(np.ascontiguousarray(tensor.data, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw = raw
        self.pos = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise LoadError(f"{self.path}: truncated while reading {what} at byte {self.pos}")
        chunk = self.raw[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def string(self, what: str) -> str:
        return self.take(self.u32(what), what).decode("utf-8")


def load_checkpoint(path) -> tuple[Network, dict]:
    """Restore a network and its metadata; raises LoadError on any mismatch."""
    r = _Reader(Path(path).read_bytes(), path)
    magic = r.take(len(CHECKPOINT_MAGIC), "magic")
    if magic != CHECKPOINT_MAGIC:
        raise LoadError(f"{path}: bad magic bytes {magic!r}; not a checkpoint")
    version = r.u32("version")
    if version != CHECKPOINT_VERSION:
        raise LoadError(f"{path}: checkpoint version {version}, this build reads {CHECKPOINT_VERSION}")
    try:
        config = config_from_dict(json.loads(r.string("config")))
        meta = json.loads(r.string("metadata"))
    except (ValueError, KeyError, TypeError, ConfigurationError) as exc:
        raise LoadError(f"{path}: unreadable config or metadata: {exc}") from exc
    expected = parameter_shapes(config)
    params = {}
    for _ in range(r.u32("parameter count")):
        name = r.string("parameter name")
        if name not in expected:
            raise LoadError(f"{path}: unknown parameter {name!r}")
        ndim = r.u32(f"{name} ndim")
        shape = struct.unpack(f"<{ndim}Q", r.take(8 * ndim, f"{name} shape"))
        if tuple(shape) != expected[name]:
            raise LoadError(f"{path}: parameter {name!r} has shape {tuple(shape)}, config implies {expected[name]}")
        count = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(r.take(8 * count, f"{name} data"), dtype="<f8").reshape(shape)
        params[name] = Tensor(data.astype(np.float64), requires_grad=True, name=name)
    missing = set(expected) - set(params)
    if missing:
        raise LoadError(f"{path}: missing parameters {sorted(missing)}")
    if r.pos != len(r.raw):
        raise LoadError(f"{path}: {len(r.raw) - r.pos} trailing bytes after last record")
    ordered = {name: params[name] for name in expected}
    return Network(config, ordered), meta
