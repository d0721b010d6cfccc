"""Softmax models, full-batch training, transfer fine-tuning, artifact format.

Two architectures are supported: ``logreg`` (softmax regression) and
``mlp1`` (one tanh hidden layer). Weight tensors are kept in a dict in a
fixed declared order, which is also the on-wire order:

* logreg: ``W`` (C x d), ``b`` (C)
* mlp1:   ``W1`` (h x d), ``b1`` (h), ``W2`` (C x h), ``b2`` (C)
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import Diverged, EmptyTrainingSet, ModelFormatError, NumericalError, SpecMismatch

MODEL_MAGIC = b"PTMD"
MODEL_VERSION = 1
ARCH_CODES = {"logreg": 1, "mlp1": 2}
ARCH_NAMES = {v: k for k, v in ARCH_CODES.items()}
INIT_SCALE = 0.01

_META = struct.Struct(">QII")  # seed, epochs, samples_used (then lr, final_loss as <f8)
PROVENANCE_TAG = b"PROV"


@dataclass(frozen=True)
class ModelSpec:
    arch: str
    input_dim: int
    num_classes: int
    hidden: int = 0

    def __post_init__(self):
        if self.arch not in ARCH_CODES:
            raise SpecMismatch(f"unknown arch {self.arch!r}")
        if self.input_dim < 1 or self.num_classes < 1:
            raise SpecMismatch("input_dim and num_classes must be >= 1")
        if self.arch == "mlp1" and self.hidden < 1:
            raise SpecMismatch("mlp1 needs hidden >= 1")
        if self.arch == "logreg" and self.hidden != 0:
            raise SpecMismatch("logreg takes hidden = 0")

    def shapes(self) -> dict[str, tuple[int, ...]]:
        d, c, h = self.input_dim, self.num_classes, self.hidden
        if self.arch == "logreg":
            return {"W": (c, d), "b": (c,)}
        return {"W1": (h, d), "b1": (h,), "W2": (c, h), "b2": (c,)}

    def dims(self) -> tuple[int, ...]:
        if self.arch == "logreg":
            return (self.input_dim, self.num_classes)
        return (self.input_dim, self.hidden, self.num_classes)

    def to_dict(self) -> dict:
        return {"arch": self.arch, "input_dim": self.input_dim,
                "hidden": self.hidden, "num_classes": self.num_classes}


@dataclass(frozen=True)
class TrainMeta:
    seed: int = 0
    epochs: int = 0
    lr: float = 0.0
    samples_used: int = 0
    final_loss: float = float("nan")


@dataclass(frozen=True, eq=False)
class ModelArtifact:
    spec: ModelSpec
    weights: dict[str, np.ndarray]
    train_meta: TrainMeta = field(default_factory=TrainMeta)

    def __post_init__(self):
        shapes = self.spec.shapes()
        if list(self.weights) != list(shapes):
            raise SpecMismatch(f"weights {list(self.weights)} do not match {list(shapes)}")
        for name, shape in shapes.items():
            if self.weights[name].shape != shape:
                raise SpecMismatch(f"{name} has shape {self.weights[name].shape}, expected {shape}")
            if not np.all(np.isfinite(self.weights[name])):
                raise NumericalError(f"{name} has non-finite entries")

    def __eq__(self, other):
        return isinstance(other, ModelArtifact) and serialize_model(self) == serialize_model(other)

    def digest(self) -> bytes:
        return hashlib.sha256(serialize_model(self)).digest()


@dataclass(frozen=True, eq=False)
class PretrainedBase:
    artifact: ModelArtifact
    provenance: bytes  # sha256 of the corpus it was trained on

    @property
    def spec(self) -> ModelSpec:
        return self.artifact.spec

    @property
    def weights(self) -> dict[str, np.ndarray]:
        return self.artifact.weights


# --------------------------------------------------------------------------
# math

def init_weights(spec: ModelSpec, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    out = {}
    for name, shape in spec.shapes().items():
        if name.startswith("W"):
            out[name] = INIT_SCALE * rng.standard_normal(shape)
        else:
            out[name] = np.zeros(shape)
    return out


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def logits(spec: ModelSpec, weights: dict[str, np.ndarray], X: np.ndarray) -> np.ndarray:
    if spec.arch == "logreg":
        return X @ weights["W"].T + weights["b"]
    H = np.tanh(X @ weights["W1"].T + weights["b1"])
    return H @ weights["W2"].T + weights["b2"]


def loss_and_grad(spec: ModelSpec, weights: dict[str, np.ndarray], X: np.ndarray,
                  y: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
    """Mean softmax cross-entropy over the batch and its exact gradients."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise EmptyTrainingSet("batch must be a non-empty 2-D array")
    if X.shape[1] != spec.input_dim:
        raise SpecMismatch(f"batch has dim {X.shape[1]}, model expects {spec.input_dim}")
    if not np.all(np.isfinite(X)) or not all(np.all(np.isfinite(w)) for w in weights.values()):
        raise NumericalError("non-finite input")
    if y.min() < 0 or y.max() >= spec.num_classes:
        raise SpecMismatch("label outside [0, num_classes)")
    n = X.shape[0]
    if spec.arch == "logreg":
        Z = X @ weights["W"].T + weights["b"]
    else:
        A = X @ weights["W1"].T + weights["b1"]
        H = np.tanh(A)
        Z = H @ weights["W2"].T + weights["b2"]

    Zs = Z - Z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(Zs).sum(axis=1))
    loss = float(np.mean(logsum - Zs[np.arange(n), y]))

    dZ = np.exp(Zs - logsum[:, None])
    dZ[np.arange(n), y] -= 1.0
    dZ /= n
    if spec.arch == "logreg":
        return loss, {"W": dZ.T @ X, "b": dZ.sum(axis=0)}
    dA = (dZ @ weights["W2"]) * (1.0 - H * H)
    return loss, {"W1": dA.T @ X, "b1": dA.sum(axis=0), "W2": dZ.T @ H, "b2": dZ.sum(axis=0)}


def _gradient_descent(spec: ModelSpec, weights: dict[str, np.ndarray], X: np.ndarray, y: np.ndarray,
                      epochs: int, lr: float) -> tuple[dict[str, np.ndarray], list[float]]:
    w = {k: v.copy() for k, v in weights.items()}
    trace: list[float] = []
    for _ in range(epochs):
        loss, grads = loss_and_grad(spec, w, X, y)
        if not np.isfinite(loss):
            raise Diverged(f"loss became {loss}")
        trace.append(loss)
        for k in w:
            w[k] -= lr * grads[k]
        if not all(np.all(np.isfinite(v)) for v in w.values()):
            raise Diverged("weights became non-finite")
    return w, trace


def _final_loss(spec, w, X, y) -> float:
    loss, _ = loss_and_grad(spec, w, X, y)
    if not np.isfinite(loss):
        raise Diverged(f"loss became {loss}")
    return loss


def pretrain_base(store, spec: ModelSpec, epochs: int, lr: float, seed: int,
                  return_trace: bool = False):
    """Full-batch gradient descent on the whole corpus from a seeded init."""
    if len(store) == 0:
        raise EmptyTrainingSet("corpus is empty")
    if spec.input_dim != store.dim:
        raise SpecMismatch(f"spec input_dim {spec.input_dim} != corpus dim {store.dim}")
    if spec.num_classes < store.num_classes:
        raise SpecMismatch(f"spec has {spec.num_classes} classes, corpus needs {store.num_classes}")
    X, y = store.features, store.labels
    w, trace = _gradient_descent(spec, init_weights(spec, seed), X, y, epochs, lr)
    meta = TrainMeta(seed=seed, epochs=epochs, lr=lr, samples_used=len(store),
                     final_loss=_final_loss(spec, w, X, y))
    base = PretrainedBase(ModelArtifact(spec, w, meta), provenance=store.digest())
    return (base, trace) if return_trace else base


def fine_tune(base: PretrainedBase, X: np.ndarray, y: np.ndarray, epochs: int, lr: float,
              seed: int, spec: ModelSpec | None = None) -> ModelArtifact:
    """Start from the base weights and run full-batch descent on ``(X, y)``.

    ``spec`` is the requested device model; it must equal the base spec.
    ``seed`` is recorded for provenance (training itself is deterministic).
    """
    if spec is not None and spec != base.spec:
        raise SpecMismatch(f"requested {spec} but base is {base.spec}")
    spec = base.spec
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.shape[0] == 0:
        raise EmptyTrainingSet("no training samples")
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise SpecMismatch(f"training features have shape {X.shape}, model expects dim {spec.input_dim}")
    w, _ = _gradient_descent(spec, base.weights, X, y, epochs, lr)
    meta = TrainMeta(seed=seed, epochs=epochs, lr=lr, samples_used=int(X.shape[0]),
                     final_loss=_final_loss(spec, w, X, y))
    return ModelArtifact(spec, w, meta)


def predict(artifact: ModelArtifact, features: np.ndarray) -> np.ndarray:
    """Class probabilities for one sample (1-D input) or a batch (2-D input)."""
    X = np.asarray(features, dtype=np.float64)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] != artifact.spec.input_dim:
        raise SpecMismatch(f"input has dim {X.shape[1]}, model expects {artifact.spec.input_dim}")
    P = _softmax(logits(artifact.spec, artifact.weights, X))
    return P[0] if single else P


def accuracy(artifact: ModelArtifact, X: np.ndarray, y: np.ndarray) -> float:
    if len(y) == 0:
        return float("nan")
    return float(np.mean(np.argmax(predict(artifact, np.atleast_2d(X)), axis=1) == np.asarray(y)))


# --------------------------------------------------------------------------
# serialization
#
# "PTMD" | version u8 | arch u8 | dims u32 BE (d, C) or (d, h, C)
# | weights f64 LE in declared order
# | seed u64 BE | epochs u32 BE | samples_used u32 BE | lr f64 LE | final_loss f64 LE

def serialize_model(artifact: ModelArtifact) -> bytes:
    spec = artifact.spec
    out = [MODEL_MAGIC, bytes([MODEL_VERSION, ARCH_CODES[spec.arch]])]
    out += [struct.pack(">I", d) for d in spec.dims()]
    out += [artifact.weights[name].astype("<f8").tobytes() for name in spec.shapes()]
    m = artifact.train_meta
    out.append(_META.pack(m.seed, m.epochs, m.samples_used))
    out.append(struct.pack("<dd", m.lr, m.final_loss))
    return b"".join(out)


def _take(buf: bytes, off: int, n: int) -> bytes:
    if off + n > len(buf):
        raise ModelFormatError("model bytes truncated")
    return buf[off:off + n]


def deserialize_model(data: bytes, allow_trailing: bool = False) -> ModelArtifact:
    artifact, end = _deserialize(data)
    if end != len(data) and not allow_trailing:
        raise ModelFormatError(f"{len(data) - end} unexpected trailing bytes")
    return artifact


def _deserialize(data: bytes) -> tuple[ModelArtifact, int]:
    data = bytes(data)
    if _take(data, 0, 4) != MODEL_MAGIC:
        raise ModelFormatError("bad model magic")
    version, arch_code = _take(data, 4, 2)
    if version != MODEL_VERSION:
        raise ModelFormatError(f"unsupported model version {version}")
    if arch_code not in ARCH_NAMES:
        raise ModelFormatError(f"unknown arch code {arch_code}")
    arch = ARCH_NAMES[arch_code]
    ndims = 2 if arch == "logreg" else 3
    dims = struct.unpack(f">{ndims}I", _take(data, 6, 4 * ndims))
    off = 6 + 4 * ndims
    try:
        if arch == "logreg":
            spec = ModelSpec(arch, input_dim=dims[0], num_classes=dims[1])
        else:
            spec = ModelSpec(arch, input_dim=dims[0], hidden=dims[1], num_classes=dims[2])
    except SpecMismatch as exc:
        raise ModelFormatError(str(exc)) from None
    weights = {}
    for name, shape in spec.shapes().items():
        n = int(np.prod(shape))
        weights[name] = np.frombuffer(_take(data, off, 8 * n), dtype="<f8").astype(np.float64).reshape(shape)
        off += 8 * n
    seed, epochs, samples_used = _META.unpack(_take(data, off, _META.size))
    off += _META.size
    lr, final_loss = struct.unpack("<dd", _take(data, off, 16))
    off += 16
    try:
        artifact = ModelArtifact(spec, weights, TrainMeta(seed, epochs, lr, samples_used, final_loss))
    except (SpecMismatch, NumericalError) as exc:
        raise ModelFormatError(str(exc)) from None
    return artifact, off


def save_base(base: PretrainedBase, path: str | Path) -> None:
    """Base cache file: model bytes, then ``b"PROV"`` and the 32-byte corpus digest."""
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(serialize_model(base.artifact) + PROVENANCE_TAG + base.provenance)
    tmp.replace(path)


def load_base(path: str | Path) -> PretrainedBase:
    data = Path(path).read_bytes()
    artifact, off = _deserialize(data)
    tail = data[off:]
    if len(tail) != 36 or tail[:4] != PROVENANCE_TAG:
        raise ModelFormatError("base model file lacks provenance trailer")
    return PretrainedBase(artifact, provenance=tail[4:])

