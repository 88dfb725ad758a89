"""Small SiLU classifiers standing in for WideResNets, plus checkpoint I/O.

There is no batch normalization anywhere, so a model is a pure function of
its parameters and every example's logits are independent of its batch
companions. Weight averaging is then an exact average of everything that
defines the model.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import tensor as T
from .data import RngStream
from .errors import DimensionError, FormatError, ValidationError

CHECKPOINT_MAGIC = "robustaug-checkpoint"
CHECKPOINT_VERSION = 1

KINDS = ("linear", "mlp", "small_cnn")


@dataclass(frozen=True)
class ArchSpec:
    """Architecture description.

    ``widths`` means hidden sizes for ``mlp`` and (conv1 filters, conv2
    filters, dense units) for ``small_cnn``; ``linear`` ignores it.
    """

    kind: str
    input_shape: tuple = (3, 16, 16)
    num_classes: int = 2
    widths: tuple = ()
    activation: str = "silu"

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "widths", tuple(int(v) for v in self.widths))
        if self.kind not in KINDS:
            raise ValidationError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        if self.num_classes < 2:
            raise ValidationError("num_classes must be >= 2")
        if any(w <= 0 for w in self.widths) or any(d <= 0 for d in self.input_shape):
            raise ValidationError("widths and input extents must be positive")
        if self.activation != "silu":
            raise ValidationError("only the silu activation is supported")
        if self.kind == "small_cnn":
            if len(self.widths) != 3:
                raise ValidationError("small_cnn widths are (conv1, conv2, dense)")
            _, h, w = self.input_shape
            if h % 2 or w % 2:
                raise ValidationError("small_cnn needs even spatial extents")

    @classmethod
    def small_cnn(cls, input_shape=(3, 16, 16), num_classes=2, widths=(16, 32, 64)) -> "ArchSpec":
        return cls("small_cnn", tuple(input_shape), num_classes, tuple(widths))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        return cls(d["kind"], tuple(d["input_shape"]), int(d["num_classes"]), tuple(d.get("widths", ())),
                   d.get("activation", "silu"))


@dataclass
class ModelParams:
    """Named parameters in canonical order."""

    names: tuple
    values: list = field(default_factory=list)

    def __post_init__(self):
        self.names = tuple(self.names)
        if len(set(self.names)) != len(self.names):
            raise ValidationError("parameter names must be unique")
        if len(self.values) != len(self.names):
            raise ValidationError("one value per parameter name")
        self.values = [np.asarray(v, dtype=np.float64) for v in self.values]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[self.names.index(name)]

    def __iter__(self) -> Iterator[tuple]:
        return iter(zip(self.names, self.values))

    def __len__(self) -> int:
        return len(self.names)

    def copy(self) -> "ModelParams":
        return ModelParams(self.names, [v.copy() for v in self.values])

    def num_parameters(self) -> int:
        return int(sum(v.size for v in self.values))

    def same_layout(self, other: "ModelParams") -> bool:
        return self.names == other.names and all(a.shape == b.shape for a, b in zip(self.values, other.values))

    def tobytes(self) -> bytes:
        return b"".join(v.astype("<f8").tobytes() for v in self.values)


def _layer_shapes(spec: ArchSpec) -> list:
    C, H, W = spec.input_shape
    K = spec.num_classes
    if spec.kind == "linear":
        return [("fc.w", (C * H * W, K)), ("fc.b", (K,))]
    if spec.kind == "mlp":
        dims = [C * H * W, *spec.widths, K]
        shapes = []
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            shapes += [(f"fc{i}.w", (a, b)), (f"fc{i}.b", (b,))]
        return shapes
    c1, c2, d = spec.widths
    flat = c2 * (H // 2) * (W // 2)
    return [("conv1.w", (c1, C, 3, 3)), ("conv1.b", (c1,)),
            ("conv2.w", (c2, c1, 4, 4)), ("conv2.b", (c2,)),
            ("fc1.w", (flat, d)), ("fc1.b", (d,)),
            ("fc2.w", (d, K)), ("fc2.b", (K,))]


def init_model(spec: ArchSpec, seed: int) -> ModelParams:
    """He fan-in normal weights, zero biases; bit-identical for equal (spec, seed)."""
    stream = RngStream(seed, "init")
    names, values = [], []
    for i, (name, shape) in enumerate(_layer_shapes(spec)):
        names.append(name)
        if name.endswith(".b"):
            values.append(np.zeros(shape))
            continue
        fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
        rng = stream.generator(i)
        values.append(rng.standard_normal(shape) * np.sqrt(2.0 / fan_in))
    return ModelParams(names, values)


def bind(params: ModelParams, requires_grad: bool = False) -> dict:
    return {name: T.Tensor(v, requires_grad) for name, v in params}


def forward(spec: ArchSpec, p: dict, x: T.Tensor) -> T.Tensor:
    """Logits for already-bound parameters."""
    if x.shape[1:] != spec.input_shape:
        raise DimensionError(f"images {x.shape[1:]} do not match model input {spec.input_shape}")
    if spec.kind == "linear":
        return T.affine(T.flatten(x), p["fc.w"], p["fc.b"])
    if spec.kind == "mlp":
        h = T.flatten(x)
        n = len(spec.widths) + 1
        for i in range(n):
            h = T.affine(h, p[f"fc{i}.w"], p[f"fc{i}.b"])
            if i < n - 1:
                h = T.silu(h)
        return h
    h = T.silu(T.conv2d(x, p["conv1.w"], p["conv1.b"], stride=1, padding=1))
    h = T.silu(T.conv2d(h, p["conv2.w"], p["conv2.b"], stride=2, padding=1))
    h = T.silu(T.affine(T.flatten(h), p["fc1.w"], p["fc1.b"]))
    return T.affine(h, p["fc2.w"], p["fc2.b"])


def predict(params: ModelParams, spec: ArchSpec, images) -> T.Tensor:
    """f(x; theta). Differentiable in ``images`` when they are a Tensor requiring grad."""
    return forward(spec, bind(params), T.as_tensor(images))


class Classifier:
    """(spec, params) pair callable on image tensors; what attacks consume."""

    def __init__(self, spec: ArchSpec, params: ModelParams):
        self.spec = spec
        self.params = params
        self._bound = bind(params)

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    def __call__(self, x: T.Tensor) -> T.Tensor:
        return forward(self.spec, self._bound, x)

    def logits(self, images: np.ndarray) -> np.ndarray:
        return self(T.Tensor(images)).data

    def __getstate__(self):
        return {"spec": self.spec, "params": self.params}

    def __setstate__(self, state):
        self.__init__(state["spec"], state["params"])


class Ensemble:
    """Prediction-level average of member models.

    The returned "logits" are log(mean_m softmax(z_m)), so argmax matches
    averaging probabilities and attacks see a differentiable objective.
    """

    def __init__(self, members):
        if not members:
            raise ValidationError("an ensemble needs at least one model")
        ks = {m.num_classes for m in members}
        if len(ks) != 1:
            raise ValidationError(f"ensemble members disagree on class count: {sorted(ks)}")
        self.members = list(members)

    @property
    def num_classes(self) -> int:
        return self.members[0].num_classes

    def __call__(self, x: T.Tensor) -> T.Tensor:
        return T.log_mean_exp([T.log_softmax(m(x)) for m in self.members])

    def logits(self, images: np.ndarray) -> np.ndarray:
        return self(T.Tensor(images)).data


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, spec: ArchSpec, params: ModelParams, meta: dict | None = None) -> None:
    """Header line (JSON) then, per parameter: name, shape, little-endian float64 payload."""
    header = {"format": CHECKPOINT_MAGIC, "version": CHECKPOINT_VERSION, "spec": spec.to_dict(),
              "meta": meta or {}}
    chunks = [json.dumps(header, sort_keys=True).encode() + b"\n"]
    for name, value in params:
        raw = name.encode()
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<I", value.ndim) + struct.pack(f"<{value.ndim}I", *value.shape))
        chunks.append(np.ascontiguousarray(value, dtype="<f8").tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


def load_checkpoint(path) -> tuple:
    """Returns (spec, params, meta)."""
    blob = Path(path).read_bytes()
    nl = blob.find(b"\n")
    if nl < 0:
        raise FormatError(f"{path}: missing header line")
    try:
        header = json.loads(blob[:nl])
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: bad header: {exc}") from None
    if header.get("format") != CHECKPOINT_MAGIC or header.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: not a v{CHECKPOINT_VERSION} checkpoint")
    spec = ArchSpec.from_dict(header["spec"])
    pos, names, values = nl + 1, [], []
    try:
        while pos < len(blob):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            names.append(blob[pos:pos + n].decode())
            pos += n
            (ndim,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            count = int(np.prod(shape))
            if pos + 8 * count > len(blob):
                raise FormatError(f"{path}: truncated payload for {names[-1]}")
            values.append(np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64))
            pos += 8 * count
    except struct.error as exc:
        raise FormatError(f"{path}: truncated record: {exc}") from None
    params = ModelParams(names, values)
    expected = init_model(spec, 0)
    if not params.same_layout(expected):
        raise FormatError(f"{path}: parameter layout does not match {spec.kind}")
    return spec, params, header.get("meta", {})
