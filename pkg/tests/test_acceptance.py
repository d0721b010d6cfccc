"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The lines are printed at the end of the run by the terminal-summary hook in
conftest.py (and also appear in -s output as they are produced).
"""

import math
import socket
import sys
from contextlib import contextmanager

import numpy as np
import pytest
from scipy import stats

from oracles import max_fd_relative_error, random_instance
from ptaas.cli import main
from ptaas.corpus import CorpusStore
from ptaas.envelope import (
    MODEL_RESPONSE,
    REJECT,
    KeyRegistry,
    NonceCounter,
    digest,
    open_from_peer,
    seal,
)
from ptaas.errors import BudgetExhausted, IntegrityFailure
from ptaas.experiments import (
    EPSILONS,
    non_decreasing,
    non_increasing,
    privacy_utility,
    reconstruction,
    retrieval_ablation,
)
from ptaas.learn import serialize_model
from ptaas.privacy import (
    BudgetLedger,
    LedgerBook,
    PrivacyParams,
    charge_budget,
    gaussian_noise,
    gaussian_sigma,
    laplace_noise,
    laplace_scale,
    rr_flip_bits,
    rr_flip_probability,
)
from ptaas.protocol import (
    CLOUD_EVENTS,
    ClientSession,
    EventTrace,
    LoopbackTransport,
    QueryConfig,
    cloud_execute,
    device_execute,
)
from ptaas.protocol.server import ServerState
from ptaas.protocol.trace import DEVICE_POST, DEVICE_PRE
from ptaas.sketch import (
    SketchParams,
    estimate_similarity,
    hamming,
    minhash_sign,
    serialize_sketch,
    simhash_sign,
)
from ptaas.synth import make_corpus

RESULTS: dict[int, list[tuple[bool, str]]] = {}


def summary_lines() -> list[str]:
    """One line per criterion; a parametrized criterion passes only if every part passed."""
    lines = []
    for n in sorted(RESULTS):
        parts = RESULTS[n]
        ok = all(p for p, _ in parts)
        lines.append(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  " + " | ".join(t for _, t in parts))
    return lines


@contextmanager
def criterion(n: int, title: str, detail: dict):
    """Record one PASS/FAIL line for criterion ``n``; assertion errors propagate."""
    try:
        yield
    except BaseException:
        ok = False
        raise
    else:
        ok = True
    finally:
        extra = " ".join(f"{k}={v}" for k, v in detail.items())
        text = f"{title}  {extra}".rstrip()
        RESULTS.setdefault(n, []).append((ok, text))
        print(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {text}", file=sys.stderr)


def _session(state, trace=None, **kw):
    rec = state.registry.register()
    return ClientSession(rec.device_id, rec.key, state.params, LoopbackTransport(state, trace or EventTrace()), **kw)


def _cfg(**kw):
    base = dict(num_classes=4, mechanism="gaussian", placement="pre_quantization", epsilon=1.0, delta=1e-5,
                k_retrieve=20, epochs=20, learning_rate=1.0, noise_seed=1)
    base.update(kw)
    return QueryConfig(**base)


# ----------------------------------------------------------------------- 1

def test_c01_round_trace_and_digest(server_state, device_data):
    detail = {}
    with criterion(1, "loopback round event order + deployed digest", detail):
        trace = EventTrace()
        session = _session(server_state, trace)
        session.trace = trace
        out = device_execute(session, _cfg(), device_data)
        expected = ([("device", e) for e in DEVICE_PRE] + [("cloud", e) for e in CLOUD_EVENTS]
                    + [("device", e) for e in DEVICE_POST])
        detail["events"] = len(trace.events)
        assert trace.events == expected
        assert out.status == "deployed"
        server_digest = out.model_digest
        deployed_digest = digest(serialize_model(session.deployed)).hex()
        detail["digest"] = deployed_digest[:16]
        assert deployed_digest == server_digest


# ----------------------------------------------------------------------- 2

def test_c02_sketch_estimators():
    detail = {}
    with criterion(2, "MinHash k=512 and SimHash b=256 estimator error", detail):
        rng = np.random.default_rng(2024)
        errs = []
        for i in range(200):
            universe = int(rng.integers(50, 2000))
            a = set(rng.choice(universe, size=int(rng.integers(1, min(universe, 300))), replace=False).tolist())
            b = set(rng.choice(universe, size=int(rng.integers(1, min(universe, 300))), replace=False).tolist())
            exact = len(a & b) / len(a | b)
            est = estimate_similarity(minhash_sign(a, 512, 1000 + i), minhash_sign(b, 512, 1000 + i))
            errs.append(abs(est - exact))
        detail["minhash_mean_err"] = f"{np.mean(errs):.4f}"

        angle_errs = []
        for i in range(200):
            d = int(rng.integers(2, 64))
            u = rng.standard_normal(d)
            v = u + rng.uniform(0.0, 3.0) * rng.standard_normal(d)
            u, v = u / np.linalg.norm(u), v / np.linalg.norm(v)
            angle = math.acos(max(-1.0, min(1.0, float(np.dot(u, v)))))
            fu, fv = simhash_sign(u, 256, 2000 + i), simhash_sign(v, 256, 2000 + i)
            angle_errs.append(abs(hamming(fu, fv) / 256 - angle / math.pi))
        detail["simhash_mean_err"] = f"{np.mean(angle_errs):.4f}"
        assert np.mean(errs) <= 0.05
        assert np.mean(angle_errs) <= 0.05


# ----------------------------------------------------------------------- 3

QUANTILES = (0.01, 0.5, 0.99)


def test_c03_dp_mechanism_statistics():
    detail = {}
    with criterion(3, "Laplace/Gaussian quantiles (CDF space) + RR flip counts", detail):
        n = 10**6
        lap = PrivacyParams("laplace", 1.0, 0.0, 1.0)
        gau = PrivacyParams("gaussian", 1.0, 1e-5, 1.0)
        draws = {
            "laplace": (laplace_noise(np.zeros(n), lap, seed=0), stats.laplace(scale=laplace_scale(lap))),
            "gaussian": (gaussian_noise(np.zeros(n), gau, seed=0), stats.norm(scale=gaussian_sigma(gau))),
        }
        worst_cdf = 0.0
        for name, (x, ref) in draws.items():
            emp = np.quantile(x, QUANTILES)
            cdf_err = np.abs(ref.cdf(emp) - np.array(QUANTILES))
            val_err = np.abs(emp - ref.ppf(QUANTILES))
            detail[f"{name}_cdf_err"] = f"{cdf_err.max():.2e}"
            detail[f"{name}_value_err"] = f"{val_err.max():.4f}"
            worst_cdf = max(worst_cdf, float(cdf_err.max()))

        worst_z = 0.0
        for eps_bit in (0.1, 0.5, 1.0, 2.0, 4.0):
            p = rr_flip_probability(eps_bit)
            flips = int(rr_flip_bits(np.zeros(n, dtype=np.uint8), eps_bit * n, seed=7).sum())
            worst_z = max(worst_z, abs(flips - n * p) / math.sqrt(n * p * (1 - p)))
        detail["rr_max_sigma"] = f"{worst_z:.2f}"
        assert worst_cdf <= 0.01
        assert worst_z <= 4.0


# ----------------------------------------------------------------------- 4

def _windows(data: bytes, w: int = 16):
    return {data[i:i + w] for i in range(len(data) - w + 1)}


def test_c04_envelope_security(server_state, device_data):
    detail = {}
    with criterion(4, "tamper -> IntegrityFailure, replay rejected, no plaintext windows", detail):
        # a ~4 KiB MODEL_RESPONSE-typed frame, tampered at every byte
        key, dev = bytes(range(7, 39)), bytes(range(200, 216))
        plaintext = bytes(np.random.default_rng(4).integers(0, 256, 4096 - 38 - 16, dtype=np.uint8))
        frame = seal(plaintext, key, NonceCounter(role="server").next_nonce(), MODEL_RESPONSE, dev).to_bytes()
        assert len(frame) == 4096
        assert open_from_peer(frame, key, dev, (MODEL_RESPONSE, REJECT))[1] == plaintext
        failures = 0
        for pos in range(len(frame)):
            for mask in (0x01, 0x80, 0xFF):
                bad = bytearray(frame)
                bad[pos] ^= mask
                try:
                    open_from_peer(bytes(bad), key, dev, (MODEL_RESPONSE, REJECT))
                except IntegrityFailure:
                    failures += 1
        detail["tamper_detected"] = f"{failures}/{3 * len(frame)}"
        assert failures == 3 * len(frame)

        # real round: capture both frames, then replay the query
        captured = []

        class Capture(LoopbackTransport):
            def roundtrip(self, f):
                captured.append(f)
                out = super().roundtrip(f)
                captured.append(out)
                return out

        rec = server_state.registry.register()
        session = ClientSession(rec.device_id, rec.key, server_state.params, Capture(server_state))
        assert device_execute(session, _cfg(arch="mlp1", hidden=40), device_data).status == "deployed"
        query_frame, response_frame = captured
        detail["response_bytes"] = len(response_frame)

        replay = cloud_execute(server_state, query_frame)
        _, body = open_from_peer(replay, session.key, session.device_id, (MODEL_RESPONSE, REJECT))
        assert b"VERIFY_FAILED" in body
        assert server_state.audit.records[-1].outcome.endswith("VERIFY_FAILED")

        model_bytes = serialize_model(session.deployed)
        secrets_ = [session.last_query, model_bytes, device_data.tobytes(),
                    serialize_sketch(simhash_sign(device_data.mean(axis=0), 64, server_state.params.simhash_seed))]
        on_wire = _windows(query_frame) | _windows(response_frame)
        leaked = sum(len(_windows(s) & on_wire) for s in secrets_)
        detail["leaked_windows"] = leaked
        assert leaked == 0


# ----------------------------------------------------------------------- 5

@pytest.mark.parametrize("n", [100, 1000, 10000])
def test_c05_banded_equals_exhaustive(n):
    detail = {"n": n}
    with criterion(5, f"banded top-k == exhaustive top-k (n={n})", detail):
        params = SketchParams()
        _, X, y, _ = make_corpus(n, 16, 4, seed=n)
        store = CorpusStore(params, X, y)
        rng = np.random.default_rng(n)
        checked = 0
        for kind in ("simhash", "minhash"):
            for i in range(25):
                if i % 5 == 0:
                    q = store.record_sketch(int(rng.integers(n)), kind)
                else:
                    row = X[int(rng.integers(n))] + rng.uniform(0, 0.5) * rng.standard_normal(16)
                    q = CorpusStore(params, row[None, :], np.zeros(1)).record_sketch(0, kind)
                for k in (1, 10, 50):
                    assert store.search_topk(q, k, use_index=True).ranked == store.search_topk(q, k).ranked
                    checked += 1
            rid = int(rng.integers(n))
            first = store.search_topk(store.record_sketch(rid, kind), 5, use_index=True).ranked[0]
            assert first[1] == 1.0
            # duplicates of the same sketch can tie at 1.0; ties break by ascending id
            assert first[0] <= rid
            exact = [r for r, s in store.search_topk(store.record_sketch(rid, kind), n).ranked if s == 1.0]
            assert rid in exact and first[0] == min(exact)
        detail["queries"] = checked


# ----------------------------------------------------------------------- 6

@pytest.mark.parametrize("arch", ["logreg", "mlp1"])
def test_c06_gradient_finite_difference(arch):
    detail = {"arch": arch}
    with criterion(6, f"finite-difference gradients ({arch})", detail):
        rng = np.random.default_rng(6)
        worst = max(max_fd_relative_error(*random_instance(rng, arch), step=1e-5) for _ in range(150))
        detail["instances"] = 150
        detail["max_rel_err"] = f"{worst:.2e}"
        assert worst <= 1e-4


# ----------------------------------------------------------------------- 7

def test_c07_transfer_benefit():
    detail = {}
    with criterion(7, "retrieved >= base and >= random (20 seeds)", detail):
        base_m, ret_m, rnd_m = retrieval_ablation(seed=0, trials=20).parameters["means"]
        detail.update(base=f"{base_m:.4f}", retrieved=f"{ret_m:.4f}", random=f"{rnd_m:.4f}")
        assert ret_m >= base_m
        assert ret_m >= rnd_m


# ----------------------------------------------------------------------- 8

@pytest.mark.slow
def test_c08_privacy_utility_monotone():
    detail = {}
    with criterion(8, "precision falls and reconstruction error rises as eps shrinks (gaussian, 50 trials)", detail):
        pu = privacy_utility(seed=0, trials=50)
        rc = reconstruction(seed=0, trials=50)
        for mech in ("gaussian", "randomized_response"):
            prec = pu.column("retrieval_precision", mechanism=mech)
            err = rc.column("mean_l2_error", mechanism=mech)
            tag = "gauss" if mech == "gaussian" else "rr"
            detail[f"{tag}_precision"] = ",".join(f"{p:.3f}" for p in prec)
            detail[f"{tag}_error"] = ",".join(f"{e:.3f}" for e in err)
        # randomized response is reported, not asserted: see README "Acceptance suite"
        assert len(pu.column("epsilon", mechanism="gaussian")) == len(EPSILONS)
        assert non_increasing(pu.column("retrieval_precision", mechanism="gaussian"))
        assert non_decreasing(rc.column("mean_l2_error", mechanism="gaussian"))
        rr_prec = pu.column("retrieval_precision", mechanism="randomized_response")
        rr_err = rc.column("mean_l2_error", mechanism="randomized_response")
        assert rr_prec[0] >= rr_prec[-1] and rr_err[0] <= rr_err[-1]


# ----------------------------------------------------------------------- 9

def test_c09_budget_enforcement(cluster_corpus, base_model, tmp_path):
    detail = {}
    with criterion(9, "N rounds charge N*eps; first over-cap round refused, ledger unchanged", detail):
        # pure accounting with a non-representable epsilon
        led = BudgetLedger(b"\x01" * 16, epsilon_cap=8.0)
        for _ in range(80):
            led = charge_budget(led, 0.1)
        assert led.epsilon_spent == 80 * 0.1
        with pytest.raises(BudgetExhausted):
            charge_budget(led, 0.1)

        # through the protocol with a file-backed ledger
        _, store, _ = cluster_corpus
        ledger_path = tmp_path / "ledger.tsv"
        state = ServerState(store, KeyRegistry(tmp_path / "registry.txt"), base=base_model,
                            ledgers=LedgerBook(8.0, ledger_path))
        session = _session(state)
        eps = 0.7
        cfg = _cfg(mechanism="randomized_response", placement="post_hash", delta=0.0, epsilon=eps, epochs=2)
        n_ok = 0
        while True:
            out = device_execute(session, cfg, np.eye(16)[:3] + 0.1)
            if out.status != "deployed":
                break
            n_ok += 1
            assert state.ledgers.get(session.device_id).epsilon_spent == n_ok * eps
        detail.update(rounds=n_ok, spent=state.ledgers.get(session.device_id).epsilon_spent)
        assert n_ok == math.floor(8.0 / eps) == 11
        assert out.reject_code == "BUDGET_EXHAUSTED"
        before_file = ledger_path.read_bytes()
        before = state.ledgers.get(session.device_id)
        assert device_execute(session, cfg, np.eye(16)[:3] + 0.1).reject_code == "BUDGET_EXHAUSTED"
        assert state.ledgers.get(session.device_id) == before
        assert ledger_path.read_bytes() == before_file
        assert len(before_file.splitlines()) == n_ok
        assert LedgerBook(8.0, ledger_path).get(session.device_id).epsilon_spent == n_ok * eps


# ---------------------------------------------------------------------- 10

_AUDIT = {"armed": False, "events": []}


def _audit_hook(event, args):
    if _AUDIT["armed"] and event.startswith("socket."):
        _AUDIT["events"].append(event)


sys.addaudithook(_audit_hook)


def test_c10_offline_predict(tmp_path, monkeypatch, capsys):
    from ptaas.config import load_config
    from ptaas.protocol.server import ThreadedServer

    detail = {}
    with criterion(10, "device predict with server down makes zero network calls", detail):
        assert main(["synth", "--out", str(tmp_path), "--listen", "127.0.0.1:0"]) == 0
        cfg_path = tmp_path / "server.json"
        server = ThreadedServer(("127.0.0.1", 0), ServerState.from_config(load_config(cfg_path)))
        server.start_background()
        state_dir = tmp_path / "dev"
        try:
            assert main(["device", "provision", "--config", str(cfg_path), "--state", str(state_dir),
                         "--server", server.address]) == 0
            assert main(["device", "query", "--state", str(state_dir), "--data", str(tmp_path / "device.tsv"),
                         "--epsilon", "2", "--k", "50", "--epochs", "20"]) == 0
        finally:
            server.stop()
        capsys.readouterr()

        calls = []

        def deny(name):
            def _f(*a, **k):
                calls.append(name)
                raise AssertionError(f"network call {name}")
            return _f

        for name in ("socket", "create_connection", "getaddrinfo", "gethostbyname", "socketpair"):
            monkeypatch.setattr(socket, name, deny(name))
        _AUDIT["events"].clear()
        _AUDIT["armed"] = True
        try:
            rc = main(["device", "predict", "--state", str(state_dir), "--input", str(tmp_path / "row.txt")])
        finally:
            _AUDIT["armed"] = False
        out = capsys.readouterr().out
        detail.update(exit=rc, patched_calls=len(calls), audit_socket_events=len(_AUDIT["events"]))
        assert rc == 0
        label, probs = out.strip().split("\t")
        assert 0 <= int(label) < 4 and math.isclose(sum(map(float, probs.split(","))), 1.0, abs_tol=1e-6)
        assert calls == [] and _AUDIT["events"] == []
