"""Evaluation harness: privacy/utility sweep, reconstruction attack, retrieval ablation.

Every experiment is a pure function of its seed. Within a trial, all epsilon
settings reuse the same noise seed, so the sweep compares coupled draws.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import minimize

from .corpus import CorpusStore
from .learn import ModelSpec, accuracy, fine_tune, pretrain_base
from .privacy import PrivacyParams, privatize, projection_sensitivity
from .sketch import SketchParams, normalize, simhash_planes, simhash_sign
from .synth import make_corpus

EPSILONS = (math.inf, 8.0, 2.0, 0.5, 0.1)
EXPERIMENTS = ("privacy-utility", "reconstruction", "retrieval-ablation")


@dataclass
class ExperimentReport:
    name: str
    parameters: dict
    columns: list[str]
    rows: list[list] = field(default_factory=list)
    summary: str = ""

    def column(self, name: str, **where) -> list:
        i = self.columns.index(name)
        keys = {self.columns.index(k): v for k, v in where.items()}
        return [r[i] for r in self.rows if all(r[j] == v for j, v in keys.items())]

    def to_tsv(self) -> str:
        def fmt(x):
            if isinstance(x, float):
                return "inf" if math.isinf(x) else f"{x:.6f}"
            return str(x)

        lines = [f"# {self.name}"]
        lines += [f"# {k}={fmt(v) if not isinstance(v, (list, tuple)) else ','.join(fmt(e) for e in v)}"
                  for k, v in sorted(self.parameters.items())]
        lines.append("\t".join(self.columns))
        lines += ["\t".join(fmt(x) for x in row) for row in self.rows]
        lines.append(f"# summary: {self.summary}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir: str | Path) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / f"{self.name}.tsv"
        path.write_text(self.to_tsv())
        return path


def non_increasing(xs) -> bool:
    return all(a >= b for a, b in zip(xs, xs[1:]))


def non_decreasing(xs) -> bool:
    return all(a <= b for a, b in zip(xs, xs[1:]))


# --------------------------------------------------------------------------
# shared setting

@dataclass
class Setting:
    seed: int
    n_corpus: int = 400
    dim: int = 16
    n_clusters: int = 4
    spread: float = 0.2
    device_samples: int = 50
    k_retrieve: int = 20
    holdout: int = 200
    pretrain_epochs: int = 300
    finetune_epochs: int = 200
    learning_rate: float = 1.0
    params: SketchParams = field(default_factory=SketchParams)

    def build(self):
        task, X, y, cids = make_corpus(self.n_corpus, self.dim, self.n_clusters, seed=self.seed, spread=self.spread)
        store = CorpusStore(self.params, X, y)
        spec = ModelSpec("logreg", self.dim, task.num_classes)
        base = pretrain_base(store, spec, self.pretrain_epochs, self.learning_rate, self.seed)
        return task, store, cids, base

    def device_draw(self, task, trial: int):
        """Target cluster, the device's samples, and held-out test samples."""
        rng = np.random.default_rng([self.seed, 2, trial])
        target = trial % task.n_clusters
        Xd, _, _ = task.sample(self.device_samples, rng, cluster=target)
        Xt, yt, _ = task.sample(self.holdout, rng, cluster=target)
        Xd = np.array([normalize(r) for r in Xd])
        Xt = np.array([normalize(r) for r in Xt])
        return target, Xd, Xt, yt


def noisy_fingerprint(v: np.ndarray, params: SketchParams, mechanism: str, epsilon: float,
                      n_samples: int, noise_seed: int):
    fp = simhash_sign(v, params.b, params.simhash_seed, keep_projections=True)
    if math.isinf(epsilon):
        return fp
    if mechanism == "randomized_response":
        return privatize(fp, PrivacyParams(mechanism, epsilon), "post_hash", noise_seed)
    planes = simhash_planes(params.b, v.shape[0], params.simhash_seed)
    if mechanism == "gaussian":
        dp = PrivacyParams("gaussian", epsilon, 1e-5, projection_sensitivity(planes, n_samples, "l2"))
    else:
        dp = PrivacyParams("laplace", epsilon, 0.0, projection_sensitivity(planes, n_samples, "l1"))
    return privatize(fp, dp, "pre_quantization", noise_seed)


def reconstruct_simhash(bits: np.ndarray, planes: np.ndarray, beta: float = 5.0) -> np.ndarray:
    """Honest-but-curious reconstruction: the unit vector that best explains the bits.

    Maximizes the smoothed agreement ``mean_i log sigmoid(beta * s_i * <p_i, x>)``
    over the unit sphere (s_i = +-1 from the bits), starting from
    ``normalize(sum_i s_i p_i)``.
    """
    s = 2.0 * np.asarray(bits, dtype=np.float64) - 1.0
    z0 = s @ planes
    if not np.any(z0):
        z0 = np.ones(planes.shape[1])

    def objective(z):
        n = np.linalg.norm(z)
        x = z / n
        m = beta * s * (planes @ x)
        val = np.mean(np.logaddexp(0.0, -m))
        gx = (-beta * s / (1.0 + np.exp(m))) @ planes / len(s)
        return val, (gx - (gx @ x) * x) / n

    res = minimize(objective, normalize(z0), jac=True, method="L-BFGS-B")
    return normalize(res.x)


# --------------------------------------------------------------------------
# experiments

def privacy_utility(seed: int = 0, trials: int = 50, epsilons=EPSILONS,
                    mechanisms=("gaussian", "randomized_response"), setting: Setting | None = None) -> ExperimentReport:
    st = setting or Setting(seed)
    task, store, cids, base = st.build()
    acc = {(m, e): ([], []) for m in mechanisms for e in epsilons}
    for t in range(trials):
        target, Xd, Xt, yt = st.device_draw(task, t)
        v = normalize(Xd.mean(axis=0))
        for mech in mechanisms:
            for eps in epsilons:
                fp = noisy_fingerprint(v, st.params, mech, eps, st.device_samples, noise_seed=seed * 100003 + t)
                res = store.search_topk(fp, st.k_retrieve)
                Xr, yr = store.fetch_training_set(res)
                model = fine_tune(base, Xr, yr, st.finetune_epochs, st.learning_rate, seed)
                acc[(mech, eps)][0].append(float(np.mean(cids[res.record_ids] == target)))
                acc[(mech, eps)][1].append(accuracy(model, Xt, yt))
    report = ExperimentReport(
        "privacy-utility",
        {"seed": seed, "trials": trials, "epsilons": list(epsilons), "k_retrieve": st.k_retrieve,
         "b": st.params.b, "device_samples": st.device_samples},
        ["mechanism", "epsilon", "retrieval_precision", "finetune_accuracy"],
    )
    verdicts = []
    for mech in mechanisms:
        precs = []
        for eps in epsilons:
            p, a = acc[(mech, eps)]
            report.rows.append([mech, float(eps), float(np.mean(p)), float(np.mean(a))])
            precs.append(float(np.mean(p)))
        verdicts.append(f"{mech}_precision_monotone={'yes' if non_increasing(precs) else 'no'}")
    report.summary = " ".join(verdicts)
    return report


def reconstruction(seed: int = 0, trials: int = 50, epsilons=EPSILONS,
                   mechanisms=("gaussian", "randomized_response"), setting: Setting | None = None) -> ExperimentReport:
    st = setting or Setting(seed)
    task = make_corpus(st.n_corpus, st.dim, st.n_clusters, seed=seed, spread=st.spread)[0]
    planes = simhash_planes(st.params.b, st.dim, st.params.simhash_seed)
    errs = {(m, e): [] for m in mechanisms for e in epsilons}
    for t in range(trials):
        _, Xd, _, _ = st.device_draw(task, t)
        v = normalize(Xd.mean(axis=0))
        for mech in mechanisms:
            for eps in epsilons:
                fp = noisy_fingerprint(v, st.params, mech, eps, st.device_samples, noise_seed=seed * 100003 + t)
                errs[(mech, eps)].append(float(np.linalg.norm(reconstruct_simhash(fp.bits, planes) - v)))
    report = ExperimentReport(
        "reconstruction",
        {"seed": seed, "trials": trials, "epsilons": list(epsilons), "b": st.params.b,
         "device_samples": st.device_samples},
        ["mechanism", "epsilon", "mean_l2_error"],
    )
    verdicts = []
    for mech in mechanisms:
        means = [float(np.mean(errs[(mech, e)])) for e in epsilons]
        report.rows += [[mech, float(e), m] for e, m in zip(epsilons, means)]
        verdicts.append(f"{mech}_error_monotone={'yes' if non_decreasing(means) else 'no'}")
    report.summary = " ".join(verdicts)
    return report


def retrieval_ablation(seed: int = 0, trials: int = 20, setting_kw: dict | None = None) -> ExperimentReport:
    """Target-cluster accuracy of base-only vs retrieved vs random fine-tuning.

    Each trial uses its own corpus seed (``seed + trial``) and a noiseless query.
    """
    rows = []
    for t in range(trials):
        st = Setting(seed + t, **(setting_kw or {}))
        task, store, cids, base = st.build()
        target, Xd, Xt, yt = st.device_draw(task, t)
        fp = simhash_sign(normalize(Xd.mean(axis=0)), st.params.b, st.params.simhash_seed)
        res = store.search_topk(fp, st.k_retrieve)
        Xr, yr = store.fetch_training_set(res)
        rng = np.random.default_rng([seed + t, 3])
        idx = np.sort(rng.choice(len(store), size=len(res.ranked), replace=False))
        tuned = fine_tune(base, Xr, yr, st.finetune_epochs, st.learning_rate, seed + t)
        rand = fine_tune(base, store.features[idx], store.labels[idx], st.finetune_epochs, st.learning_rate, seed + t)
        rows.append([seed + t, target, accuracy(base.artifact, Xt, yt), accuracy(tuned, Xt, yt), accuracy(rand, Xt, yt)])
    report = ExperimentReport(
        "retrieval-ablation",
        {"seed": seed, "trials": trials},
        ["corpus_seed", "target_cluster", "base_accuracy", "retrieved_accuracy", "random_accuracy"],
        rows,
    )
    base_m, ret_m, rnd_m = (float(np.mean([r[i] for r in rows])) for i in (2, 3, 4))
    report.summary = f"mean_base={base_m:.6f} mean_retrieved={ret_m:.6f} mean_random={rnd_m:.6f}"
    report.parameters["means"] = [base_m, ret_m, rnd_m]
    return report


def run(name: str, seed: int = 0, out_dir: str | Path | None = None, trials: int | None = None) -> ExperimentReport:
    if name == "privacy-utility":
        report = privacy_utility(seed, trials or 50)
    elif name == "reconstruction":
        report = reconstruction(seed, trials or 50)
    elif name == "retrieval-ablation":
        report = retrieval_ablation(seed, trials or 20)
    else:
        raise ValueError(f"unknown experiment {name!r}; choose from {', '.join(EXPERIMENTS)}")
    if out_dir is not None:
        report.write(out_dir)
    return report
