import math
import struct
import subprocess
import sys

import numpy as np
import pytest

from ptaas.corpus import CorpusStore
from ptaas.errors import EmptyTrainingSet, ModelFormatError, NumericalError, SpecMismatch
from ptaas.learn import (
    ModelArtifact,
    ModelSpec,
    PretrainedBase,
    TrainMeta,
    accuracy,
    deserialize_model,
    fine_tune,
    init_weights,
    load_base,
    loss_and_grad,
    predict,
    pretrain_base,
    save_base,
    serialize_model,
)

from oracles import max_fd_relative_error, naive_loss, random_instance

SPECS = [ModelSpec("logreg", 5, 3), ModelSpec("mlp1", 5, 3, hidden=4)]


@pytest.mark.parametrize("c", [2, 3, 7])
def test_uniform_logits_loss_is_log_c(c):
    spec = ModelSpec("logreg", 3, c)
    w = {"W": np.zeros((c, 3)), "b": np.zeros(c)}
    loss, _ = loss_and_grad(spec, w, np.ones((4, 3)), np.arange(4) % c)
    assert loss == pytest.approx(math.log(c), abs=1e-15)


@pytest.mark.parametrize("arch", ["logreg", "mlp1"])
def test_gradients_match_finite_differences(arch):
    rng = np.random.default_rng(11)
    for _ in range(25):
        assert max_fd_relative_error(*random_instance(rng, arch)) <= 1e-4


@pytest.mark.parametrize("arch", ["logreg", "mlp1"])
def test_loss_matches_naive_oracle(arch):
    rng = np.random.default_rng(12)
    for _ in range(20):
        spec, w, X, y = random_instance(rng, arch)
        assert loss_and_grad(spec, w, X, y)[0] == pytest.approx(naive_loss(spec, w, X, y), rel=1e-12)


@pytest.mark.parametrize("spec", SPECS)
def test_duplicate_batch_invariance(spec):
    rng = np.random.default_rng(3)
    w = {k: rng.standard_normal(s) for k, s in spec.shapes().items()}
    X, y = rng.standard_normal((6, 5)), rng.integers(0, 3, 6)
    l1, g1 = loss_and_grad(spec, w, X, y)
    l2, g2 = loss_and_grad(spec, w, np.vstack([X, X]), np.concatenate([y, y]))
    assert l1 == pytest.approx(l2, rel=1e-14)
    for k in g1:
        np.testing.assert_allclose(g1[k], g2[k], rtol=1e-12, atol=1e-15)


def test_non_finite_input():
    spec = SPECS[0]
    w = init_weights(spec, 0)
    X = np.ones((2, 5))
    X[0, 0] = np.nan
    with pytest.raises(NumericalError):
        loss_and_grad(spec, w, X, np.zeros(2, int))


def _store(params, n=200, seed=0, labels=None):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, 5))
    X /= np.linalg.norm(X, axis=1, keepdims=True)
    y = labels if labels is not None else (X[:, 0] > 0).astype(int) + (X[:, 1] > 0).astype(int)
    return CorpusStore(params, X, y)


def test_epochs_zero_returns_init(params):
    store = _store(params)
    for spec in SPECS:
        base = pretrain_base(store, spec, 0, 0.1, 5)
        for k, v in init_weights(spec, 5).items():
            assert np.array_equal(base.weights[k], v)
        tuned = fine_tune(base, store.features[:10], store.labels[:10], 0, 0.1, 1)
        for k in base.weights:
            assert np.array_equal(tuned.weights[k], base.weights[k])


def test_init_scale_and_zero_bias():
    w = init_weights(ModelSpec("mlp1", 30, 4, hidden=20), 0)
    assert np.all(w["b1"] == 0) and np.all(w["b2"] == 0)
    assert 0.005 < w["W1"].std() < 0.015


def test_single_class_corpus(params):
    store = _store(params, labels=np.zeros(200, int))
    base = pretrain_base(store, ModelSpec("logreg", 5, 2), 200, 1.0, 0)
    assert predict(base.artifact, store.features)[:, 0].min() >= 0.99


def test_loss_non_increasing_on_clusters(cluster_corpus):
    _, store, _ = cluster_corpus
    for spec in (ModelSpec("logreg", 16, 4), ModelSpec("mlp1", 16, 4, hidden=8)):
        _, trace = pretrain_base(store, spec, 100, 0.1, 0, return_trace=True)
        assert all(b <= a for a, b in zip(trace, trace[1:]))


def test_pretrain_errors(params):
    empty = CorpusStore(params, np.zeros((0, 5)), np.zeros(0, int))
    with pytest.raises(EmptyTrainingSet):
        pretrain_base(empty, SPECS[0], 1, 0.1, 0)
    with pytest.raises(SpecMismatch):
        pretrain_base(_store(params), ModelSpec("logreg", 4, 3), 1, 0.1, 0)


def test_fine_tune_errors(base_model):
    with pytest.raises(EmptyTrainingSet):
        fine_tune(base_model, np.zeros((0, 16)), np.zeros(0, int), 5, 0.1, 0)
    with pytest.raises(SpecMismatch):
        fine_tune(base_model, np.ones((3, 5)), np.zeros(3, int), 5, 0.1, 0)
    with pytest.raises(SpecMismatch):
        fine_tune(base_model, np.ones((3, 16)), np.zeros(3, int), 5, 0.1, 0, spec=ModelSpec("logreg", 16, 5))


def test_fine_tune_deterministic(base_model, cluster_corpus):
    _, store, _ = cluster_corpus
    a = fine_tune(base_model, store.features[:30], store.labels[:30], 50, 0.5, 3)
    b = fine_tune(base_model, store.features[:30], store.labels[:30], 50, 0.5, 3)
    assert serialize_model(a) == serialize_model(b)
    assert a.train_meta.samples_used == 30 and a.train_meta.epochs == 50 and a.train_meta.lr == 0.5


def test_fine_tune_helps_target_cluster():
    from ptaas.experiments import retrieval_ablation
    report = retrieval_ablation(seed=100, trials=8)
    base_m, ret_m, _ = report.parameters["means"]
    assert ret_m >= base_m


def test_predict_probabilities(base_model):
    X = np.random.default_rng(0).standard_normal((50, 16))
    P = predict(base_model.artifact, X)
    assert np.all((P >= 0) & (P <= 1))
    np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-9)
    with pytest.raises(SpecMismatch):
        predict(base_model.artifact, np.ones(3))


def test_zero_weights_uniform():
    spec = ModelSpec("mlp1", 3, 4, hidden=2)
    art = ModelArtifact(spec, {k: np.zeros(s) for k, s in spec.shapes().items()})
    np.testing.assert_allclose(predict(art, np.ones(3)), 0.25, atol=1e-15)


def test_converged_logreg_separates(params):
    X = np.array([[1.0, 0.1], [0.9, -0.2], [-1.0, 0.3], [-0.8, -0.1]])
    X /= np.linalg.norm(X, axis=1, keepdims=True)
    store = CorpusStore(params, X, np.array([0, 0, 1, 1]))
    base = pretrain_base(store, ModelSpec("logreg", 2, 2), 500, 1.0, 0)
    assert np.argmax(predict(base.artifact, X), axis=1).tolist() == [0, 0, 1, 1]
    assert accuracy(base.artifact, X, store.labels) == 1.0


def test_hand_built_offsets():
    spec = ModelSpec("logreg", 1, 2)
    art = ModelArtifact(spec, {"W": np.array([[1.5], [-2.0]]), "b": np.array([0.25, -0.5])},
                        TrainMeta(seed=7, epochs=3, lr=0.125, samples_used=9, final_loss=0.5))
    data = serialize_model(art)
    # offsets worked out by hand from the documented layout
    assert len(data) == 78
    assert data[0:4] == b"PTMD"
    assert data[4] == 1 and data[5] == 1
    assert data[6:10] == b"\x00\x00\x00\x01" and data[10:14] == b"\x00\x00\x00\x02"
    assert data[14:22] == struct.pack("<d", 1.5) and data[22:30] == struct.pack("<d", -2.0)
    assert data[30:38] == struct.pack("<d", 0.25) and data[38:46] == struct.pack("<d", -0.5)
    assert data[46:54] == (7).to_bytes(8, "big")
    assert data[54:58] == (3).to_bytes(4, "big") and data[58:62] == (9).to_bytes(4, "big")
    assert data[62:70] == struct.pack("<d", 0.125) and data[70:78] == struct.pack("<d", 0.5)


@pytest.mark.parametrize("spec", SPECS)
def test_round_trip_bit_exact(spec):
    rng = np.random.default_rng(4)
    art = ModelArtifact(spec, {k: rng.standard_normal(s) for k, s in spec.shapes().items()},
                        TrainMeta(1, 2, 0.3, 4, 0.123456789))
    data = serialize_model(art)
    back = deserialize_model(data)
    assert serialize_model(back) == data
    assert back == art


def test_deserialize_errors():
    data = serialize_model(ModelArtifact(SPECS[0], init_weights(SPECS[0], 0)))
    for bad in (b"XXXX" + data[4:], data[:-1], data + b"\0", data[:4] + b"\x02" + data[5:],
                data[:5] + b"\x09" + data[6:], b""):
        with pytest.raises(ModelFormatError):
            deserialize_model(bad)


def test_digest_stable_across_processes(base_model):
    code = ("from ptaas.learn import *; import numpy as np;"
            "s=ModelSpec('logreg',2,2); print(ModelArtifact(s, init_weights(s, 42)).digest().hex())")
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True).stdout.strip()
    assert out == ModelArtifact(ModelSpec("logreg", 2, 2), init_weights(ModelSpec("logreg", 2, 2), 42)).digest().hex()


def test_base_cache_round_trip(tmp_path, base_model):
    path = tmp_path / "base.ptmd"
    save_base(base_model, path)
    loaded = load_base(path)
    assert loaded.provenance == base_model.provenance and loaded.artifact == base_model.artifact
    path.write_bytes(serialize_model(base_model.artifact))
    with pytest.raises(ModelFormatError):
        load_base(path)


def test_artifact_rejects_non_finite():
    w = init_weights(SPECS[0], 0)
    w["W"][0, 0] = np.inf
    with pytest.raises(NumericalError):
        ModelArtifact(SPECS[0], w)


def test_pretrained_base_exposes_spec(base_model):
    assert isinstance(base_model, PretrainedBase)
    assert base_model.spec == ModelSpec("logreg", 16, 4)
