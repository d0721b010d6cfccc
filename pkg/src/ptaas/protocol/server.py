"""Cloud procedure: verify, charge, retrieve, fine-tune, seal the model.

Every received frame produces exactly one audit record. Failures after the
sender's key is known are answered with a sealed REJECT; frames that cannot
be attributed to a registered device are dropped.
"""

from __future__ import annotations

import json
import logging
import math
import select
import socket
import socketserver
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from .. import corpus as corpus_mod
from ..config import Limits, PretrainConfig, ServerConfig
from ..corpus import CorpusService, CorpusStore
from ..envelope import (
    MODEL_RESPONSE,
    QUERY,
    REJECT,
    KeyRegistry,
    NonceCounter,
    SealedEnvelope,
    b64decode,
    b64encode,
    canonical_serialize,
    digest,
    open_envelope,
    parse_canonical,
    seal,
)
from ..errors import (
    BudgetExhausted,
    IntegrityFailure,
    InvalidBudget,
    MalformedFrame,
    SchemaError,
    SpecMismatch,
    UnknownDevice,
    VerifyFailed,
)
from ..learn import ModelSpec, PretrainedBase, fine_tune, load_base, pretrain_base, save_base, serialize_model
from ..privacy import LedgerBook, PrivacyParams
from ..sketch import (
    MinHashSignature,
    Sketch,
    SketchParams,
    deserialize_sketch,
    serialized_length,
)
from .trace import NULL_TRACE
from .transport import ConnectionClosed, recv_frame, send_frame

log = logging.getLogger(__name__)

REPLAY_CAPACITY = 10_000
IDLE_POLL = 0.2
IO_TIMEOUT = 30.0


@dataclass(frozen=True)
class ValidatedQuery:
    plaintext: bytes
    message: dict
    sketch_bytes: bytes
    sketch: Sketch
    dp: PrivacyParams
    placement: str
    spec: ModelSpec
    label_hints: tuple[int, ...]
    k_retrieve: int
    epochs: int
    learning_rate: float
    seed: int


@dataclass
class QueryRecord:
    device_id: str | None
    timestamp: str
    outcome: str
    dp: dict | None = None
    k_retrieve: int | None = None
    epsilon_charged: float = 0.0
    reason: str = ""
    fields: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True, separators=(",", ":"))


class AuditLog:
    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path else None
        self.records: list[QueryRecord] = []
        self._lock = threading.Lock()

    def write(self, rec: QueryRecord) -> None:
        with self._lock:
            self.records.append(rec)
            if self.path is not None:
                with self.path.open("a") as fh:
                    fh.write(rec.to_json() + "\n")


class ReplayCache:
    """Bounded set of recently accepted ``(device_id, nonce)`` pairs."""

    def __init__(self, capacity: int = REPLAY_CAPACITY):
        self.capacity = capacity
        self._seen: OrderedDict[tuple[bytes, bytes], None] = OrderedDict()
        self._lock = threading.Lock()

    def check_and_add(self, device_id: bytes, nonce: bytes) -> bool:
        key = (device_id, nonce)
        with self._lock:
            if key in self._seen:
                return False
            self._seen[key] = None
            if len(self._seen) > self.capacity:
                self._seen.popitem(last=False)
            return True


def _field_paths(obj, prefix="") -> list[str]:
    if isinstance(obj, dict):
        out = []
        for k in sorted(obj):
            out += _field_paths(obj[k], f"{prefix}{k}.") or [f"{prefix}{k}"]
        return out
    return []


class ServerState:
    """Everything the cloud procedure reads or mutates."""

    def __init__(self, store: CorpusStore, registry: KeyRegistry, *, ledgers: LedgerBook | None = None,
                 limits: Limits | None = None, pretrain: PretrainConfig | None = None, base: PretrainedBase | None = None,
                 audit: AuditLog | None = None, epsilon_cap: float | None = None):
        self.corpus = CorpusService(store)
        self.registry = registry
        self.ledgers = ledgers or LedgerBook(epsilon_cap if epsilon_cap is not None else 8.0)
        self.limits = limits or Limits()
        self.pretrain = pretrain or PretrainConfig()
        self.audit = audit or AuditLog()
        self.replay = ReplayCache()
        self.nonces = NonceCounter(role="server")
        self._bases: dict[ModelSpec, PretrainedBase] = {}
        self._base_lock = threading.Lock()
        if base is not None:
            self._bases[base.spec] = base

    @property
    def store(self) -> CorpusStore:
        return self.corpus.store

    @property
    def params(self) -> SketchParams:
        return self.store.params

    @classmethod
    def from_config(cls, cfg: ServerConfig) -> "ServerState":
        if cfg.store_path is not None and Path(cfg.store_path).exists():
            store = corpus_mod.load(cfg.store_path)
            if store.params != cfg.sketch_params:
                raise ValueError("stored corpus was sketched with different parameters than the config publishes")
        else:
            store = corpus_mod.ingest(cfg.corpus_path, cfg.sketch_params)
            if cfg.store_path is not None:
                corpus_mod.persist(store, cfg.store_path)
        state = cls(store, KeyRegistry(cfg.registry_path),
                    ledgers=LedgerBook(cfg.epsilon_cap, cfg.ledger_path),
                    limits=cfg.limits, pretrain=cfg.pretrain, audit=AuditLog(cfg.audit_log_path))
        spec = state.default_spec()
        base = None
        if Path(cfg.base_model_path).exists():
            base = load_base(cfg.base_model_path)
            if base.provenance != store.digest() or base.spec != spec:
                log.info("cached base model is stale; retraining")
                base = None
        if base is None:
            base = state.base_for(spec)
            save_base(base, cfg.base_model_path)
        state._bases[spec] = base
        return state

    def default_spec(self) -> ModelSpec:
        p = self.pretrain
        return ModelSpec(p.arch, self.store.dim, self.store.num_classes, hidden=p.hidden if p.arch == "mlp1" else 0)

    def base_for(self, spec: ModelSpec) -> PretrainedBase:
        """Pretrained base for ``spec``, trained on the full corpus on first use."""
        with self._base_lock:
            base = self._bases.get(spec)
            if base is None:
                p = self.pretrain
                base = pretrain_base(self.store, spec, p.epochs, p.learning_rate, p.seed)
                self._bases[spec] = base
            return base


# --------------------------------------------------------------------------

def verify_query(plaintext: bytes, state: ServerState) -> ValidatedQuery:
    """Check a decrypted QUERY against the schema, published parameters and limits."""
    try:
        msg = parse_canonical(plaintext, QUERY)
    except SchemaError as exc:
        raise VerifyFailed("schema", str(exc)) from None
    store, params, limits = state.store, state.params, state.limits

    kind = msg["sketch_kind"]
    try:
        raw = b64decode(msg["sketch"])
        sketch = deserialize_sketch(raw)
    except ValueError as exc:
        raise VerifyFailed("sketch_params", f"undecodable sketch: {exc}") from None
    if sketch.kind != kind:
        raise VerifyFailed("sketch_params", f"sketch_kind {kind} but sketch is {sketch.kind}")
    want_len, want_seed = (params.k, params.minhash_seed) if kind == "minhash" else (params.b, params.simhash_seed)
    length = sketch.k if isinstance(sketch, MinHashSignature) else sketch.b
    if length != want_len or sketch.seed != want_seed or len(raw) != serialized_length(kind, want_len):
        raise VerifyFailed("sketch_params", f"{kind} length/seed differ from published parameters")

    dp = msg["dp"]
    try:
        privacy = PrivacyParams(dp["mechanism"], float(dp["epsilon"]), float(dp["delta"]), float(dp["sensitivity"]))
    except InvalidBudget as exc:
        raise VerifyFailed("dp_params", str(exc)) from None
    if not math.isfinite(privacy.epsilon):
        raise VerifyFailed("dp_params", "epsilon must be finite")
    rr = privacy.mechanism == "randomized_response"
    if rr != (dp["placement"] == "post_hash"):
        raise VerifyFailed("dp_params", f"{privacy.mechanism} cannot use placement {dp['placement']}")
    if dp["placement"] == "pre_quantization" and kind != "simhash":
        raise VerifyFailed("dp_params", "pre_quantization noise applies to simhash only")

    ms, meta = msg["model_spec"], msg["metadata"]
    try:
        spec = ModelSpec(ms["arch"], ms["input_dim"], ms["num_classes"], hidden=ms["hidden"])
    except SpecMismatch as exc:
        raise VerifyFailed("model_spec", str(exc)) from None
    if spec.input_dim != store.dim:
        raise VerifyFailed("model_spec", f"input_dim {spec.input_dim} != corpus dim {store.dim}")
    if spec.num_classes != store.num_classes or meta["num_classes"] != spec.num_classes:
        raise VerifyFailed("model_spec", f"num_classes must be {store.num_classes}")
    if spec.hidden > limits.max_hidden:
        raise VerifyFailed("limits", f"hidden {spec.hidden} > {limits.max_hidden}")
    if any(h >= spec.num_classes for h in meta["label_hints"]):
        raise VerifyFailed("model_spec", "label hint outside [0, num_classes)")

    tr = msg["train"]
    if tr["epochs"] > limits.max_epochs:
        raise VerifyFailed("limits", f"epochs {tr['epochs']} > {limits.max_epochs}")
    if tr["k_retrieve"] > limits.max_k_retrieve:
        raise VerifyFailed("limits", f"k_retrieve {tr['k_retrieve']} > {limits.max_k_retrieve}")
    if not limits.min_learning_rate <= tr["learning_rate"] <= limits.max_learning_rate:
        raise VerifyFailed("limits", f"learning_rate {tr['learning_rate']} outside configured range")

    return ValidatedQuery(
        plaintext=bytes(plaintext), message=msg, sketch_bytes=raw, sketch=sketch, dp=privacy,
        placement=dp["placement"], spec=spec, label_hints=tuple(meta["label_hints"]),
        k_retrieve=tr["k_retrieve"], epochs=tr["epochs"], learning_rate=float(tr["learning_rate"]),
        seed=tr["seed"],
    )


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _reject(state: ServerState, device_id: bytes, code: str, detail: str) -> bytes:
    body = canonical_serialize({"code": code, "detail": detail}, REJECT)
    key = state.registry.key_for(device_id)
    return seal(body, key, state.nonces.next_nonce(), REJECT, device_id).to_bytes()


def cloud_execute(state: ServerState, frame: bytes, trace=NULL_TRACE) -> bytes | None:
    """Handle one received frame; return the response frame, or None to drop."""
    emit = lambda ev: trace.emit("cloud", ev)  # noqa: E731
    emit("receive_query")
    rec = QueryRecord(device_id=None, timestamp=_now(), outcome="REJECTED:MALFORMED")
    try:
        try:
            env = SealedEnvelope.from_bytes(frame)
        except MalformedFrame as exc:
            rec.reason = str(exc)
            return None
        rec.device_id = env.device_id.hex()
        try:
            msg_type, plaintext = open_envelope(env, state.registry)
        except UnknownDevice as exc:
            rec.outcome, rec.reason = "REJECTED:UNKNOWN_DEVICE", str(exc)
            return None
        except IntegrityFailure as exc:
            rec.outcome, rec.reason = "REJECTED:VERIFY_FAILED", f"integrity: {exc}"
            return _reject(state, env.device_id, "VERIFY_FAILED", "integrity")

        try:
            if msg_type != QUERY:
                raise VerifyFailed("msg_type", "devices may only send QUERY frames")
            if not state.replay.check_and_add(env.device_id, env.nonce):
                raise VerifyFailed("replay", "nonce already seen")
            try:
                rec.fields = _field_paths(json.loads(plaintext))
            except ValueError:
                pass
            query = verify_query(plaintext, state)
        except VerifyFailed as exc:
            rec.outcome, rec.reason = "REJECTED:VERIFY_FAILED", str(exc)
            return _reject(state, env.device_id, "VERIFY_FAILED", exc.reason)
        emit("verify_query")
        rec.dp = dict(query.message["dp"])
        rec.k_retrieve = query.k_retrieve

        # unpack (anonymized data, device model) from the verified query
        sketch, spec = query.sketch, query.spec
        emit("decrypt")

        try:
            ledger = state.ledgers.charge(env.device_id, query.dp.epsilon, query.dp.mechanism)
        except BudgetExhausted as exc:
            rec.outcome, rec.reason = "REJECTED:BUDGET_EXHAUSTED", str(exc)
            return _reject(state, env.device_id, "BUDGET_EXHAUSTED", str(exc))
        rec.epsilon_charged = query.dp.epsilon

        result = state.store.search_topk(sketch, query.k_retrieve, label_hints=query.label_hints, use_index=True)
        emit("similarity_search")

        X, y = state.store.fetch_training_set(result)
        model = fine_tune(state.base_for(spec), X, y, query.epochs, query.learning_rate, query.seed, spec=spec)
        emit("transfer_learning")

        model_bytes = serialize_model(model)
        body = canonical_serialize({
            "model": b64encode(model_bytes),
            "model_digest": digest(model_bytes).hex(),
            "metrics": {"train_loss": model.train_meta.final_loss, "samples_used": model.train_meta.samples_used},
            "epsilon_spent": ledger.epsilon_spent,
        }, MODEL_RESPONSE)
        key = state.registry.key_for(env.device_id)
        out = seal(body, key, state.nonces.next_nonce(), MODEL_RESPONSE, env.device_id).to_bytes()
        emit("encrypt")
        rec.outcome = "SERVED"
        emit("transmit_model")
        return out
    except Exception as exc:  # a single request must never take the service down
        log.exception("internal error while serving query")
        rec.outcome, rec.reason = "REJECTED:INTERNAL", f"{type(exc).__name__}: {exc}"
        if rec.device_id is None:
            return None
        try:
            return _reject(state, bytes.fromhex(rec.device_id), "INTERNAL", type(exc).__name__)
        except Exception:
            return None
    finally:
        state.audit.write(rec)


# --------------------------------------------------------------------------
# network service

class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        server: ThreadedServer = self.server
        sock: socket.socket = self.request
        sock.settimeout(IO_TIMEOUT)
        while not server.stopping.is_set():
            # idle connections must not hold up shutdown
            readable, _, _ = select.select([sock], [], [], IDLE_POLL)
            if not readable:
                continue
            try:
                frame = recv_frame(sock, server.state.limits.max_frame_size)
            except ConnectionClosed:
                return
            except MalformedFrame as exc:
                server.state.audit.write(QueryRecord(None, _now(), "REJECTED:MALFORMED", reason=str(exc)))
                return
            except OSError:
                return
            out = cloud_execute(server.state, frame, server.trace)
            if out is None:
                return
            try:
                send_frame(sock, out)
            except OSError:
                return


class ThreadedServer(socketserver.ThreadingTCPServer):
    """One thread per connection; ``shutdown`` waits for in-flight rounds."""

    allow_reuse_address = True
    daemon_threads = False
    block_on_close = True

    def __init__(self, address: tuple[str, int], state: ServerState, trace=NULL_TRACE):
        self.state = state
        self.trace = trace
        self.stopping = threading.Event()
        super().__init__(address, _Handler)

    @property
    def address(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def start_background(self) -> threading.Thread:
        t = threading.Thread(target=self.serve_forever, name="ptaas-server", daemon=True)
        t.start()
        return t

    def stop(self) -> None:
        self.stopping.set()
        self.shutdown()
        self.server_close()
