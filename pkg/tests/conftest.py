import sys

import numpy as np
import pytest

from ptaas.corpus import CorpusStore
from ptaas.envelope import KeyRegistry
from ptaas.learn import ModelSpec, pretrain_base
from ptaas.protocol.server import ServerState
from ptaas.sketch import SketchParams
from ptaas.synth import make_corpus


@pytest.fixture(scope="session")
def params():
    return SketchParams()


@pytest.fixture(scope="session")
def cluster_corpus(params):
    task, X, y, cids = make_corpus(400, 16, 4, seed=0)
    return task, CorpusStore(params, X, y), cids


@pytest.fixture(scope="session")
def base_model(cluster_corpus):
    _, store, _ = cluster_corpus
    return pretrain_base(store, ModelSpec("logreg", 16, 4), 300, 1.0, 0)


@pytest.fixture
def server_state(cluster_corpus, base_model, tmp_path):
    _, store, _ = cluster_corpus
    registry = KeyRegistry(tmp_path / "registry.txt")
    return ServerState(store, registry, base=base_model, epsilon_cap=8.0)


@pytest.fixture
def device_data(cluster_corpus):
    task, _, _ = cluster_corpus
    X, _, _ = task.sample(30, np.random.default_rng(99), cluster=1)
    return X / np.linalg.norm(X, axis=1, keepdims=True)


@pytest.fixture(autouse=True)
def _no_ambient_config(monkeypatch):
    monkeypatch.delenv("PTAAS_CONFIG", raising=False)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)
