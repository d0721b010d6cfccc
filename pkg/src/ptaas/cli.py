"""Command-line entry point: ``ptaas server | device | eval | synth``.

Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import signal
import sys
import threading
from pathlib import Path

import numpy as np

from . import __version__
from .config import load_config, parse_address
from .corpus import parse_corpus_lines, write_corpus_file
from .envelope import KeyRegistry, NonceCounter
from .errors import ConfigError, IngestError, IntegrityFailure, PTaaSError, Retryable
from .learn import deserialize_model
from .sketch import SketchParams, normalize

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2

DEVICE_FILE = "device.json"
SLOT_FILE = "model.ptmd"


class UsageError(Exception):
    pass


def _out(text: str) -> None:
    print(text, flush=True)


def _err(text: str) -> None:
    print(f"ptaas: {text}", file=sys.stderr, flush=True)


# --------------------------------------------------------------------------
# server

def cmd_server(args) -> int:
    from .protocol.server import ServerState, ThreadedServer

    cfg = load_config(args.config)
    if not Path(cfg.corpus_path).exists() and not (cfg.store_path and Path(cfg.store_path).exists()):
        raise ConfigError(f"corpus file {cfg.corpus_path} not found")
    try:
        state = ServerState.from_config(cfg)
    except (IngestError, ValueError) as exc:
        raise ConfigError(str(exc)) from None

    address = parse_address(args.listen) if args.listen else cfg.address
    server = ThreadedServer(address, state)
    stop = threading.Event()

    def on_signal(signum, frame):
        stop.set()

    previous = {s: signal.signal(s, on_signal) for s in (signal.SIGTERM, signal.SIGINT)}
    server.start_background()
    _out(f"listening on {server.address}")
    try:
        while not stop.wait(0.5):
            pass
    finally:
        # shutdown waits for in-flight rounds to finish
        server.stop()
        for s, h in previous.items():
            signal.signal(s, h)
    _out("stopped")
    return EXIT_OK


# --------------------------------------------------------------------------
# device

def _state_dir(args) -> Path:
    return Path(args.state)


def _load_device(state: Path) -> dict:
    path = state / DEVICE_FILE
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"{path} not found; run 'ptaas device provision' first") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _save_device(state: Path, dev: dict) -> None:
    path = state / DEVICE_FILE
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(dev, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


def cmd_device_provision(args) -> int:
    cfg = load_config(args.config)
    try:
        with open(cfg.corpus_path) as fh:
            X, y = parse_corpus_lines(fh)
    except FileNotFoundError:
        raise ConfigError(f"corpus file {cfg.corpus_path} not found") from None
    if len(y) == 0:
        raise ConfigError("corpus is empty")
    state = _state_dir(args)
    state.mkdir(parents=True, exist_ok=True)
    if (state / DEVICE_FILE).exists() and not args.force:
        raise UsageError(f"{state / DEVICE_FILE} exists; pass --force to replace it")
    rec = KeyRegistry(cfg.registry_path).register()
    salt = NonceCounter(role="device").salt
    host, port = parse_address(args.server) if args.server else cfg.address
    dev = {
        "device_id": rec.device_id.hex(),
        "key": rec.key.hex(),
        "server": f"{host}:{port}",
        "sketch_params": cfg.sketch_params.to_dict(),
        "num_classes": int(y.max()) + 1,
        "input_dim": int(X.shape[1]),
        "nonce_salt": salt.hex(),
        "nonce_counter": 0,
        "epsilon_spent": 0.0,
    }
    _save_device(state, dev)
    os.chmod(state / DEVICE_FILE, 0o600)
    _out(f"device_id {dev['device_id']}")
    return EXIT_OK


def cmd_device_query(args) -> int:
    from .protocol.client import ClientSession, QueryConfig, SocketTransport, device_execute, load_device_data

    state = _state_dir(args)
    dev = _load_device(state)
    X = load_device_data(args.data)
    if X.shape[1] != dev["input_dim"]:
        raise UsageError(f"data has dimension {X.shape[1]}, server corpus has {dev['input_dim']}")
    mechanism = args.mechanism
    placement = "post_hash" if mechanism == "randomized_response" else "pre_quantization"
    if mechanism != "randomized_response" and args.sketch == "minhash":
        raise UsageError("laplace/gaussian noise is applied to simhash projections; use --sketch simhash")
    delta = args.delta if args.delta is not None else (1e-5 if mechanism == "gaussian" else 0.0)
    qc = QueryConfig(
        num_classes=dev["num_classes"], sketch_kind=args.sketch, mechanism=mechanism, placement=placement,
        epsilon=args.epsilon, delta=delta, arch=args.arch, hidden=args.hidden, k_retrieve=args.k,
        epochs=args.epochs, learning_rate=args.lr, seed=args.seed,
        label_hints=tuple(args.label_hint or ()), noise_seed=args.noise_seed,
    )
    host, port = parse_address(dev["server"])
    nonces = NonceCounter(bytes.fromhex(dev["nonce_salt"]), start=dev["nonce_counter"])
    # advance the persisted counter before anything is sent so a crash never reuses a nonce
    dev["nonce_counter"] += 1
    _save_device(state, dev)
    transport = SocketTransport(host, port, timeout=args.timeout)
    session = ClientSession(
        device_id=bytes.fromhex(dev["device_id"]), key=bytes.fromhex(dev["key"]),
        params=SketchParams.from_dict(dev["sketch_params"]), transport=transport,
        slot_path=state / SLOT_FILE, nonces=nonces,
    )
    try:
        outcome = device_execute(session, qc, X)
    finally:
        transport.close()
    if outcome.status == "rejected":
        _out(f"{outcome.reject_code}: {outcome.reject_detail}")
        return EXIT_RUNTIME
    dev["epsilon_spent"] = outcome.epsilon_spent
    _save_device(state, dev)
    _out(f"model_digest {outcome.model_digest}")
    _out(f"train_loss {outcome.train_loss!r}")
    _out(f"samples_used {outcome.samples_used}")
    _out(f"epsilon_spent {outcome.epsilon_spent!r}")
    return EXIT_OK


def _deployed(state: Path):
    slot = state / SLOT_FILE
    if not slot.exists():
        raise PTaaSError(f"no model deployed in {state}")
    data = slot.read_bytes()
    return deserialize_model(data), data


def cmd_device_show_model(args) -> int:
    from .envelope import digest

    model, data = _deployed(_state_dir(args))
    meta = model.train_meta
    _out(f"arch {model.spec.arch}")
    _out(f"input_dim {model.spec.input_dim}")
    _out(f"hidden {model.spec.hidden}")
    _out(f"num_classes {model.spec.num_classes}")
    _out(f"model_digest {digest(data).hex()}")
    _out(f"epochs {meta.epochs}")
    _out(f"learning_rate {meta.lr!r}")
    _out(f"samples_used {meta.samples_used}")
    _out(f"train_loss {meta.final_loss!r}")
    return EXIT_OK


def _read_rows(path: str) -> np.ndarray:
    rows = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            rows.append([float(x) for x in line.split("\t")[-1].split(",")])
    if not rows:
        raise UsageError(f"no input rows in {path}")
    return np.array(rows, dtype=np.float64)


def cmd_device_predict(args) -> int:
    from .learn import predict

    model, _ = _deployed(_state_dir(args))
    X = _read_rows(args.input)
    if X.shape[1] != model.spec.input_dim:
        raise UsageError(f"input has dimension {X.shape[1]}, model expects {model.spec.input_dim}")
    P = predict(model, np.array([normalize(r) for r in X]))
    for row in P:
        _out(f"{int(np.argmax(row))}\t{','.join(f'{p:.6f}' for p in row)}")
    return EXIT_OK


# --------------------------------------------------------------------------
# evaluation and data

def cmd_eval(args) -> int:
    from .experiments import run

    report = run(args.experiment, args.seed, args.out, args.trials)
    _out(report.to_tsv().rstrip("\n"))
    if args.out:
        _out(f"# written {Path(args.out) / (report.name + '.tsv')}")
    return EXIT_OK


def cmd_synth(args) -> int:
    """Write a synthetic corpus, a device dataset and a server config."""
    from .config import PretrainConfig, ServerConfig
    from .synth import make_corpus

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    task, X, y, _ = make_corpus(args.n, args.dim, args.clusters, seed=args.seed)
    write_corpus_file(out / "corpus.tsv", X, y)
    rng = np.random.default_rng([args.seed, 7])
    Xd, yd, _ = task.sample(args.device_samples, rng, cluster=args.device_cluster % task.n_clusters)
    write_corpus_file(out / "device.tsv", Xd, yd)
    with open(out / "row.txt", "w") as fh:
        fh.write(",".join(repr(float(v)) for v in Xd[0]) + "\n")
    cfg = ServerConfig(
        corpus_path=Path("corpus.tsv"), base_model_path=Path("base.ptmd"), registry_path=Path("registry.txt"),
        ledger_path=Path("ledger.tsv"), audit_log_path=Path("audit.jsonl"), store_path=Path("corpus.ptcs"),
        listen=args.listen, pretrain=PretrainConfig(),
    )
    cfg.save(out / "server.json")
    _out(f"wrote {out / 'corpus.tsv'} ({len(y)} records), {out / 'device.tsv'}, {out / 'row.txt'}, "
         f"{out / 'server.json'}")
    return EXIT_OK


# --------------------------------------------------------------------------

def _positive_float(text: str) -> float:
    v = float(text)
    if not v > 0 or math.isnan(v):
        raise argparse.ArgumentTypeError("must be > 0")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ptaas", description="Privacy-enhanced training service: server, device and evaluation tools.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("server", help="run the training service")
    s.add_argument("--config", help="server config (JSON); $PTAAS_CONFIG overrides")
    s.add_argument("--listen", help="override the configured host:port")
    s.set_defaults(func=cmd_server)

    d = sub.add_parser("device", help="device-side commands")
    dsub = d.add_subparsers(dest="device_command", required=True)

    pv = dsub.add_parser("provision", help="create a device key and register it with the server")
    pv.add_argument("--config", help="server config (JSON); $PTAAS_CONFIG overrides")
    pv.add_argument("--state", default=".ptaas-device", help="device state directory")
    pv.add_argument("--server", help="address the device should contact (default: config listen)")
    pv.add_argument("--force", action="store_true", help="replace an existing device identity")
    pv.set_defaults(func=cmd_device_provision)

    q = dsub.add_parser("query", help="run one training round and deploy the returned model")
    q.add_argument("--state", default=".ptaas-device")
    q.add_argument("--data", required=True, help="local samples, one 'v1,...,vd' row per line")
    q.add_argument("--epsilon", type=_positive_float, required=True)
    q.add_argument("--delta", type=float, help="gaussian only (default 1e-5)")
    q.add_argument("--k", type=int, default=50, help="number of corpus records to retrieve")
    q.add_argument("--mechanism", choices=("randomized_response", "laplace", "gaussian"), default="gaussian")
    q.add_argument("--sketch", choices=("simhash", "minhash"), default="simhash")
    q.add_argument("--arch", choices=("logreg", "mlp1"), default="logreg")
    q.add_argument("--hidden", type=int, default=0)
    q.add_argument("--epochs", type=int, default=200)
    q.add_argument("--lr", type=float, default=1.0)
    q.add_argument("--seed", type=int, default=0, help="training seed")
    q.add_argument("--noise-seed", type=int, help="derive DP noise deterministically (testing only)")
    q.add_argument("--label-hint", type=int, action="append", help="restrict retrieval to this label (repeatable)")
    q.add_argument("--timeout", type=float, default=60.0)
    q.set_defaults(func=cmd_device_query)

    sm = dsub.add_parser("show-model", help="describe the deployed model")
    sm.add_argument("--state", default=".ptaas-device")
    sm.set_defaults(func=cmd_device_show_model)

    pr = dsub.add_parser("predict", help="run the deployed model locally (no network)")
    pr.add_argument("--state", default=".ptaas-device")
    pr.add_argument("--input", required=True, help="rows of 'v1,...,vd'")
    pr.set_defaults(func=cmd_device_predict)

    e = sub.add_parser("eval", help="run an evaluation experiment")
    e.add_argument("experiment", choices=("privacy-utility", "reconstruction", "retrieval-ablation"))
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", help="directory for the report table")
    e.add_argument("--trials", type=int, help="override the default trial count")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("synth", help="write a synthetic corpus, device data and server config")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n", type=int, default=400)
    g.add_argument("--dim", type=int, default=16)
    g.add_argument("--clusters", type=int, default=4)
    g.add_argument("--device-samples", type=int, default=50)
    g.add_argument("--device-cluster", type=int, default=0)
    g.add_argument("--listen", default="127.0.0.1:7878")
    g.set_defaults(func=cmd_synth)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        _err(str(exc))
        return EXIT_CONFIG
    except Retryable as exc:
        _err(f"server unreachable: {exc}")
        return EXIT_RUNTIME
    except IntegrityFailure as exc:
        _err(f"response rejected, deployed model unchanged: {exc}")
        return EXIT_RUNTIME
    except (PTaaSError, OSError, ValueError) as exc:
        _err(str(exc))
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
