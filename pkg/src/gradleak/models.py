"""Concrete networks and bit-exact checkpoint persistence.

Three architectures live here: a small conv feature extractor producing a
length-M representation per sample, the two-layer ReLU head whose first-layer
gradients leak those representations, and a U-net style generator used as a
deep image prior during inversion.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

CHECKPOINT_MAGIC = b"GLCK"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------------------
# checkpoint binary format


def save_checkpoint(descriptor: str, tensors: dict[str, np.ndarray]) -> bytes:
    """magic, u32 version, u32 desc len, desc, u32 count, then per tensor:
    u32 name len, name, u32 rank, u64 extents, little-endian f64 values."""
    out = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    desc = descriptor.encode("utf-8")
    out.append(struct.pack("<I", len(desc)))
    out.append(desc)
    out.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        nb = name.encode("utf-8")
        out.append(struct.pack("<I", len(nb)))
        out.append(nb)
        out.append(struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
        out.append(arr.astype("<f8").tobytes())
    return b"".join(out)


def load_checkpoint(blob: bytes) -> tuple[str, dict[str, np.ndarray]]:
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("truncated checkpoint")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic")
    version = struct.unpack("<I", take(4))[0]
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    dlen = struct.unpack("<I", take(4))[0]
    descriptor = bytes(take(dlen)).decode("utf-8")
    count = struct.unpack("<I", take(4))[0]
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        nlen = struct.unpack("<I", take(4))[0]
        name = bytes(take(nlen)).decode("utf-8")
        rank = struct.unpack("<I", take(4))[0]
        shape = struct.unpack(f"<{rank}Q", take(8 * rank)) if rank else ()
        n = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(take(8 * n), dtype="<f8").reshape(shape).copy()
        tensors[name] = arr
    if pos != len(view):
        raise CheckpointError("trailing bytes in checkpoint")
    return descriptor, tensors


def write_checkpoint(path, descriptor: str, tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(save_checkpoint(descriptor, tensors))


def read_checkpoint(path) -> tuple[str, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        return load_checkpoint(fh.read())


# ---------------------------------------------------------------------------
# feature extractor


@dataclass
class FeatureExtractorSpec:
    """Layer list for the conv feature extractor.

    Layers are tuples: ("conv", in_ch, out_ch, k, pad), ("relu",), ("pool",),
    ("flatten",), ("linear", in_dim, out_dim). The final layer output is the
    length-M representation of one sample.
    """

    input_shape: tuple[int, int, int]
    layers: list[tuple] = field(default_factory=list)
    ir_dim: int = 0

    def descriptor(self) -> str:
        parts = [f"fe:{self.input_shape[0]}x{self.input_shape[1]}x{self.input_shape[2]}"]
        for layer in self.layers:
            parts.append(",".join(str(v) for v in layer))
        return "|".join(parts)

    @staticmethod
    def from_descriptor(desc: str) -> "FeatureExtractorSpec":
        parts = desc.split("|")
        head = parts[0]
        if not head.startswith("fe:"):
            raise CheckpointError(f"not a feature-extractor descriptor: {desc!r}")
        shape = tuple(int(v) for v in head[3:].split("x"))
        layers: list[tuple] = []
        for part in parts[1:]:
            bits = part.split(",")
            kind = bits[0]
            if kind in ("relu", "pool", "flatten"):
                layers.append((kind,))
            elif kind == "conv":
                layers.append(("conv",) + tuple(int(v) for v in bits[1:5]))
            elif kind == "linear":
                layers.append(("linear", int(bits[1]), int(bits[2])))
            else:
                raise CheckpointError(f"unknown layer {kind!r}")
        spec = FeatureExtractorSpec(shape, layers)  # type: ignore[arg-type]
        spec.ir_dim = spec.layers[-1][2] if spec.layers and spec.layers[-1][0] == "linear" \
            else int(np.prod(shape))
        return spec


def default_extractor_spec(size: int = 32, in_ch: int = 3, ir_dim: int = 128) -> FeatureExtractorSpec:
    """conv(3->16) relu pool, conv(16->32) relu pool, flatten, linear -> M."""
    flat = 32 * (size // 4) * (size // 4)
    layers = [
        ("conv", in_ch, 16, 3, 1), ("relu",), ("pool",),
        ("conv", 16, 32, 3, 1), ("relu",), ("pool",),
        ("flatten",),
        ("linear", flat, ir_dim),
    ]
    return FeatureExtractorSpec((in_ch, size, size), layers, ir_dim)


class FeatureExtractor:
    def __init__(self, spec: FeatureExtractorSpec, params: dict[str, Tensor] | None = None,
                 rng: np.random.Generator | None = None):
        self.spec = spec
        if params is not None:
            self.params = params
        else:
            rng = rng or np.random.default_rng(0)
            self.params = {}
            for i, layer in enumerate(spec.layers):
                if layer[0] == "conv":
                    _, cin, cout, k, _pad = layer
                    scale = np.sqrt(2.0 / (cin * k * k))
                    self.params[f"conv{i}.w"] = Tensor(
                        rng.normal(0.0, scale, (cout, cin, k, k)), requires_grad=True)
                    self.params[f"conv{i}.b"] = Tensor(np.zeros(cout), requires_grad=True)
                elif layer[0] == "linear":
                    _, din, dout = layer
                    scale = np.sqrt(2.0 / din)
                    self.params[f"linear{i}.w"] = Tensor(
                        rng.normal(0.0, scale, (din, dout)), requires_grad=True)
                    self.params[f"linear{i}.b"] = Tensor(np.zeros(dout), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1:] != self.spec.input_shape:
            raise T.TensorError(
                f"input shape {x.shape[1:]} != spec {self.spec.input_shape}")
        h = x
        for i, layer in enumerate(self.spec.layers):
            kind = layer[0]
            if kind == "conv":
                h = T.conv2d(h, self.params[f"conv{i}.w"], padding=layer[4])
                h = T.add_bias(h, self.params[f"conv{i}.b"])
            elif kind == "relu":
                h = T.relu(h)
            elif kind == "pool":
                h = T.maxpool2x2(h)
            elif kind == "flatten":
                h = T.flatten(h)
            elif kind == "linear":
                h = T.add_bias(h @ self.params[f"linear{i}.w"], self.params[f"linear{i}.b"])
        return h

    def set_trainable(self, trainable: bool) -> None:
        for p in self.params.values():
            p.requires_grad = trainable

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def save(self, path) -> None:
        write_checkpoint(path, self.spec.descriptor(), self.state())

    @staticmethod
    def load(path) -> "FeatureExtractor":
        desc, tensors = read_checkpoint(path)
        spec = FeatureExtractorSpec.from_descriptor(desc)
        params = {k: Tensor(v, requires_grad=True) for k, v in tensors.items()}
        return FeatureExtractor(spec, params)


# ---------------------------------------------------------------------------
# classification heads


class LinearHead:
    """Plain linear classifier on top of the extractor, used for pretraining."""

    def __init__(self, ir_dim: int, n_classes: int, rng: np.random.Generator | None = None,
                 params: dict[str, Tensor] | None = None):
        self.ir_dim, self.n_classes = ir_dim, n_classes
        if params is not None:
            self.params = params
        else:
            rng = rng or np.random.default_rng(0)
            self.params = {
                "w": Tensor(rng.normal(0.0, np.sqrt(1.0 / ir_dim), (ir_dim, n_classes)),
                            requires_grad=True),
                "b": Tensor(np.zeros(n_classes), requires_grad=True),
            }

    def forward(self, y: Tensor) -> Tensor:
        return T.add_bias(y @ self.params["w"], self.params["b"])

    def descriptor(self) -> str:
        return f"linear_head:{self.ir_dim},{self.n_classes}"

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def save(self, path) -> None:
        write_checkpoint(path, self.descriptor(), self.state())

    @staticmethod
    def load(path) -> "LinearHead":
        desc, tensors = read_checkpoint(path)
        if not desc.startswith("linear_head:"):
            raise CheckpointError(f"not a linear-head checkpoint: {desc!r}")
        m, c = (int(v) for v in desc.split(":", 1)[1].split(","))
        params = {k: Tensor(v, requires_grad=True) for k, v in tensors.items()}
        return LinearHead(m, c, params=params)


class SpabHead:
    """linear -> ReLU -> linear, exactly the two-layer block of the attack.

    forward() returns (logits, Z, Z') with the pre-activation Z retained so
    the leakage oracle can read its gradient after backward.
    """

    def __init__(self, ir_dim: int, width: int, n_classes: int,
                 rng: np.random.Generator | None = None,
                 params: dict[str, Tensor] | None = None):
        self.ir_dim, self.width, self.n_classes = ir_dim, width, n_classes
        if params is not None:
            self.params = params
        else:
            rng = rng or np.random.default_rng(0)
            self.params = {
                "w": Tensor(rng.normal(0.0, np.sqrt(2.0 / ir_dim), (ir_dim, width)),
                            requires_grad=True),
                "b": Tensor(np.zeros(width), requires_grad=True),  # bias starts at zero
                "w2": Tensor(rng.normal(0.0, np.sqrt(2.0 / width), (width, n_classes)),
                             requires_grad=True),
                "b2": Tensor(np.zeros(n_classes), requires_grad=True),
            }

    def forward(self, y: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        if y.shape[1] != self.ir_dim:
            raise T.TensorError(f"head expects width {self.ir_dim}, got {y.shape[1]}")
        z = T.add_bias(y @ self.params["w"], self.params["b"])
        zp = T.relu(z)
        logits = T.add_bias(zp @ self.params["w2"], self.params["b2"])
        return logits, z, zp

    def descriptor(self) -> str:
        return f"spab:{self.ir_dim},{self.width},{self.n_classes}"

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def save(self, path) -> None:
        write_checkpoint(path, self.descriptor(), self.state())

    @staticmethod
    def load(path) -> "SpabHead":
        desc, tensors = read_checkpoint(path)
        if not desc.startswith("spab:"):
            raise CheckpointError(f"not a SpAB checkpoint: {desc!r}")
        m, n, c = (int(v) for v in desc[5:].split(","))
        params = {k: Tensor(v, requires_grad=True) for k, v in tensors.items()}
        return SpabHead(m, n, c, params=params)


# ---------------------------------------------------------------------------
# generator (deep image prior)


class Generator:
    """3-level encoder-decoder with nearest-neighbor upsampling, concat skip
    connections and a final sigmoid. Latent shape equals the image shape."""

    WIDTHS = (16, 32, 64)

    def __init__(self, image_shape: tuple[int, int, int],
                 rng: np.random.Generator | None = None,
                 params: dict[str, Tensor] | None = None):
        self.image_shape = image_shape
        c = image_shape[0]
        w1, w2, w3 = self.WIDTHS
        plan = [
            ("enc1", c, w1), ("enc2", w1, w2), ("mid", w2, w3),
            ("dec2", w3 + w2, w2), ("dec1", w2 + w1, w1), ("out", w1, c),
        ]
        if params is not None:
            self.params = params
        else:
            rng = rng or np.random.default_rng(0)
            self.params = {}
            for name, cin, cout in plan:
                scale = np.sqrt(2.0 / (cin * 9))
                self.params[f"{name}.w"] = Tensor(
                    rng.normal(0.0, scale, (cout, cin, 3, 3)), requires_grad=True)
                self.params[f"{name}.b"] = Tensor(np.zeros(cout), requires_grad=True)

    def _block(self, h: Tensor, name: str, activation: bool = True) -> Tensor:
        h = T.conv2d(h, self.params[f"{name}.w"], padding=1)
        h = T.add_bias(h, self.params[f"{name}.b"])
        return T.relu(h) if activation else h

    def forward(self, s: Tensor) -> Tensor:
        """Map a (C,H,W) latent to a (C,H,W) image in [0,1]."""
        if s.shape != self.image_shape:
            raise T.TensorError(f"latent shape {s.shape} != {self.image_shape}")
        h = T.reshape(s, (1,) + self.image_shape)
        e1 = self._block(h, "enc1")
        e2 = self._block(T.maxpool2x2(e1), "enc2")
        m = self._block(T.maxpool2x2(e2), "mid")
        d2 = self._block(T.concat_channels(T.upsample2x(m), e2), "dec2")
        d1 = self._block(T.concat_channels(T.upsample2x(d2), e1), "dec1")
        img = T.sigmoid(self._block(d1, "out", activation=False))
        return T.reshape(img, self.image_shape)

    def descriptor(self) -> str:
        c, h, w = self.image_shape
        return f"gen:{c}x{h}x{w}"

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def clone(self) -> "Generator":
        params = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()}
        return Generator(self.image_shape, params=params)

    def save(self, path) -> None:
        write_checkpoint(path, self.descriptor(), self.state())

    @staticmethod
    def load(path) -> "Generator":
        desc, tensors = read_checkpoint(path)
        if not desc.startswith("gen:"):
            raise CheckpointError(f"not a generator checkpoint: {desc!r}")
        shape = tuple(int(v) for v in desc[4:].split("x"))
        params = {k: Tensor(v, requires_grad=True) for k, v in tensors.items()}
        return Generator(shape, params=params)  # type: ignore[arg-type]


def forward_feature_extractor(fe: FeatureExtractor, images: np.ndarray) -> np.ndarray:
    """Plain-array convenience wrapper: (B,C,H,W) -> (B,M)."""
    return fe.forward(Tensor(images)).data
