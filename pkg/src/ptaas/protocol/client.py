"""Device procedure: sketch, privatize, seal, send, verify, deploy.

A round either deploys a new artifact or leaves the previously deployed one
untouched. Only the noised sketch, DP parameters, model spec and training
hyperparameters leave the device.
"""

from __future__ import annotations

import hashlib
import os
import secrets
import socket
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from ..envelope import (
    MODEL_RESPONSE,
    QUERY,
    REJECT,
    NonceCounter,
    b64decode,
    b64encode,
    canonical_serialize,
    digest,
    open_from_peer,
    parse_canonical,
    seal,
)
from ..errors import (
    DegenerateInput,
    EmptyInput,
    IntegrityFailure,
    MalformedFrame,
    ModelFormatError,
    Retryable,
    SchemaError,
)
from ..learn import ModelArtifact, ModelSpec, deserialize_model, predict
from ..privacy import PrivacyParams, privatize, projection_sensitivity
from ..sketch import Sketch, SketchParams, normalize, serialize_sketch, simhash_planes, simhash_sign, sketch_vector
from .trace import NULL_TRACE
from .transport import ConnectionClosed, DEFAULT_MAX_FRAME, recv_frame, send_frame


class Transport(Protocol):
    def roundtrip(self, frame: bytes) -> bytes: ...


class SocketTransport:
    """Persistent framed TCP connection; any I/O failure surfaces as Retryable."""

    def __init__(self, host: str, port: int, timeout: float = 60.0, max_frame: int = DEFAULT_MAX_FRAME):
        self.address = (host, port)
        self.timeout = timeout
        self.max_frame = max_frame
        self._sock: socket.socket | None = None

    def _connect(self) -> socket.socket:
        if self._sock is None:
            try:
                self._sock = socket.create_connection(self.address, timeout=self.timeout)
            except OSError as exc:
                raise Retryable(f"cannot connect to {self.address[0]}:{self.address[1]}: {exc}") from exc
        return self._sock

    def roundtrip(self, frame: bytes) -> bytes:
        sock = self._connect()
        try:
            send_frame(sock, frame)
            return recv_frame(sock, self.max_frame)
        except (OSError, ConnectionClosed, MalformedFrame) as exc:
            self.close()
            raise Retryable(f"transport failure: {exc or type(exc).__name__}") from exc

    def close(self) -> None:
        if self._sock is not None:
            try:
                self._sock.close()
            finally:
                self._sock = None


class LoopbackTransport:
    """Calls the cloud procedure in-process; used for tests and traces."""

    def __init__(self, state, trace=NULL_TRACE):
        from .server import cloud_execute

        self._execute = cloud_execute
        self.state = state
        self.trace = trace

    def roundtrip(self, frame: bytes) -> bytes:
        out = self._execute(self.state, frame, self.trace)
        if out is None:
            raise Retryable("server dropped the frame")
        return out


@dataclass
class UpdatePolicy:
    """When ``run_updates`` asks for another model."""

    max_rounds: int = 1
    min_interval: float = 0.0

    def require_model_update(self, rounds_done: int, last_round_at: float | None) -> bool:
        if rounds_done >= self.max_rounds:
            return False
        return last_round_at is None or time.monotonic() - last_round_at >= self.min_interval


@dataclass
class QueryConfig:
    num_classes: int
    sketch_kind: str = "simhash"
    mechanism: str = "randomized_response"
    placement: str = "post_hash"
    epsilon: float = 1.0
    delta: float = 0.0
    sensitivity: float | None = None  # None: derive from the projection planes
    arch: str = "logreg"
    hidden: int = 0
    k_retrieve: int = 50
    epochs: int = 200
    learning_rate: float = 1.0
    seed: int = 0
    label_hints: tuple[int, ...] = ()
    noise_seed: int | None = None  # None: fresh randomness every round


@dataclass
class RoundOutcome:
    status: str  # "deployed" | "rejected"
    model_digest: str | None = None
    train_loss: float | None = None
    samples_used: int | None = None
    epsilon_spent: float | None = None
    reject_code: str | None = None
    reject_detail: str | None = None


@dataclass
class ClientSession:
    device_id: bytes
    key: bytes
    params: SketchParams
    transport: Transport
    data_path: Path | None = None
    slot_path: Path | None = None
    policy: UpdatePolicy = field(default_factory=UpdatePolicy)
    nonces: NonceCounter = field(default_factory=NonceCounter)
    deployed: ModelArtifact | None = None
    epsilon_spent: float = 0.0
    trace: object = NULL_TRACE
    last_query: bytes | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.deployed is None and self.slot_path is not None and Path(self.slot_path).exists():
            self.deployed = deserialize_model(Path(self.slot_path).read_bytes())

    def predict(self, features) -> np.ndarray:
        if self.deployed is None:
            raise RuntimeError("no model deployed")
        return predict(self.deployed, normalize(features))


def load_device_data(path: str | Path) -> np.ndarray:
    """Rows of ``v1,...,vd`` (an optional leading ``label<TAB>`` is ignored), normalized."""
    rows = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        values = line.split("\t")[-1]
        rows.append(normalize([float(x) for x in values.split(",")]))
    if not rows:
        raise EmptyInput(f"no samples in {path}")
    return np.vstack(rows)


def device_summary_vector(X: np.ndarray) -> np.ndarray:
    """The single vector a device sketches: the normalized mean of its samples."""
    mean = np.mean(np.atleast_2d(X), axis=0)
    if not np.any(mean):
        raise DegenerateInput("device samples cancel out")
    return normalize(mean)


def hash_local(X: np.ndarray, params: SketchParams, cfg: QueryConfig) -> Sketch:
    """Sketch the device summary vector under the published parameters."""
    v = device_summary_vector(X)
    if cfg.sketch_kind == "simhash":
        return simhash_sign(v, params.b, params.simhash_seed,
                            keep_projections=cfg.placement == "pre_quantization")
    return sketch_vector(v, params, "minhash")


def add_noise(sketch: Sketch, X: np.ndarray, params: SketchParams, cfg: QueryConfig,
              noise_seed: int) -> tuple[Sketch, PrivacyParams]:
    sensitivity = cfg.sensitivity
    if sensitivity is None:
        if cfg.placement == "pre_quantization":
            planes = simhash_planes(params.b, X.shape[1], params.simhash_seed)
            norm = "l1" if cfg.mechanism == "laplace" else "l2"
            sensitivity = projection_sensitivity(planes, X.shape[0], norm)
        else:
            sensitivity = 1.0
    dp = PrivacyParams(cfg.mechanism, cfg.epsilon, cfg.delta, sensitivity)
    return privatize(sketch, dp, cfg.placement, noise_seed), dp


def query_message(noisy: Sketch, dp: PrivacyParams, cfg: QueryConfig, input_dim: int) -> dict:
    return {
        "sketch_kind": cfg.sketch_kind,
        "sketch": b64encode(serialize_sketch(noisy)),
        "dp": {"mechanism": dp.mechanism, "epsilon": dp.epsilon, "delta": dp.delta,
               "sensitivity": dp.sensitivity, "placement": cfg.placement},
        "metadata": {"task": "classify", "num_classes": cfg.num_classes, "label_hints": list(cfg.label_hints)},
        "model_spec": {"arch": cfg.arch, "input_dim": input_dim, "hidden": cfg.hidden,
                       "num_classes": cfg.num_classes},
        "train": {"k_retrieve": cfg.k_retrieve, "epochs": cfg.epochs,
                  "learning_rate": cfg.learning_rate, "seed": cfg.seed},
    }


def build_query(X: np.ndarray, params: SketchParams, cfg: QueryConfig, noise_seed: int) -> dict:
    """Sketch and privatize local data into a QUERY message (no raw features)."""
    noisy, dp = add_noise(hash_local(X, params, cfg), X, params, cfg, noise_seed)
    return query_message(noisy, dp, cfg, int(X.shape[1]))


def _round_noise_seed(cfg: QueryConfig, nonce: bytes) -> int:
    if cfg.noise_seed is None:
        return secrets.randbits(64)
    h = hashlib.sha256(cfg.noise_seed.to_bytes(8, "big") + nonce).digest()
    return int.from_bytes(h[:8], "big")


def deploy(session: ClientSession, artifact: ModelArtifact, model_bytes: bytes) -> None:
    if session.slot_path is not None:
        slot = Path(session.slot_path)
        tmp = slot.with_suffix(slot.suffix + ".tmp")
        tmp.write_bytes(model_bytes)
        os.replace(tmp, slot)
    session.deployed = artifact


def device_execute(session: ClientSession, cfg: QueryConfig, X: np.ndarray | None = None) -> RoundOutcome:
    """One full round. Raises Retryable (transport) or IntegrityFailure (bad
    response); in both cases the deployed model is unchanged."""
    emit = lambda ev: session.trace.emit("device", ev)  # noqa: E731

    if X is None:
        if session.data_path is None:
            raise EmptyInput("session has no local dataset")
        X = load_device_data(session.data_path)
    emit("collect_data")
    spec = ModelSpec(cfg.arch, int(X.shape[1]), cfg.num_classes, hidden=cfg.hidden)
    emit("create_model")

    nonce = session.nonces.next_nonce()
    sketch = hash_local(X, session.params, cfg)
    emit("hash_function")
    noisy, dp = add_noise(sketch, X, session.params, cfg, _round_noise_seed(cfg, nonce))
    emit("add_differential_privacy_noise")

    plaintext = canonical_serialize(query_message(noisy, dp, cfg, int(X.shape[1])), QUERY)
    frame = seal(plaintext, session.key, nonce, QUERY, session.device_id).to_bytes()
    session.last_query = plaintext
    emit("encrypt")
    emit("transmit_query")
    response = session.transport.roundtrip(frame)
    emit("receive_model")

    msg_type, body = open_from_peer(response, session.key, session.device_id, (MODEL_RESPONSE, REJECT))
    emit("check_integrity")

    try:
        if msg_type == REJECT:
            rej = parse_canonical(body, REJECT)
            return RoundOutcome("rejected", reject_code=rej["code"], reject_detail=rej["detail"])
        resp = parse_canonical(body, MODEL_RESPONSE)
        model_bytes = b64decode(resp["model"])
        if digest(model_bytes).hex() != resp["model_digest"]:
            raise IntegrityFailure("model digest mismatch")
        artifact = deserialize_model(model_bytes)
    except (SchemaError, ModelFormatError, ValueError) as exc:
        raise IntegrityFailure(f"response payload invalid: {exc}") from None
    if artifact.spec != spec:
        raise IntegrityFailure(f"server returned {artifact.spec}, requested {spec}")
    emit("decrypt")

    deploy(session, artifact, model_bytes)
    session.epsilon_spent = float(resp["epsilon_spent"])
    emit("deploy_to_inference_engine")
    return RoundOutcome(
        "deployed", model_digest=resp["model_digest"], train_loss=resp["metrics"]["train_loss"],
        samples_used=resp["metrics"]["samples_used"], epsilon_spent=session.epsilon_spent,
    )


def run_updates(session: ClientSession, cfg: QueryConfig, X: np.ndarray | None = None,
                sleep=time.sleep) -> list[RoundOutcome]:
    """Repeat rounds while the session's update policy asks for a new model.

    Stops early when the server refuses for budget reasons.
    """
    outcomes: list[RoundOutcome] = []
    last = None
    while len(outcomes) < session.policy.max_rounds:
        if last is not None:
            wait = session.policy.min_interval - (time.monotonic() - last)
            if wait > 0:
                sleep(wait)
        if not session.policy.require_model_update(len(outcomes), last):
            break
        out = device_execute(session, cfg, X)
        last = time.monotonic()
        outcomes.append(out)
        if out.reject_code == "BUDGET_EXHAUSTED":
            break
    return outcomes
