"""Independent reference computations shared by unit and acceptance tests."""

import math

import numpy as np

from ptaas.learn import ModelSpec, loss_and_grad


def naive_loss(spec: ModelSpec, weights: dict, X: np.ndarray, y: np.ndarray) -> float:
    # per-sample loop, math.log/exp, no shared code with the vectorized engine
    total = 0.0
    for x, label in zip(X, y):
        if spec.arch == "logreg":
            z = [float(np.dot(weights["W"][c], x) + weights["b"][c]) for c in range(spec.num_classes)]
        else:
            h = [math.tanh(float(np.dot(weights["W1"][j], x) + weights["b1"][j])) for j in range(spec.hidden)]
            z = [float(np.dot(weights["W2"][c], h) + weights["b2"][c]) for c in range(spec.num_classes)]
        m = max(z)
        total += m + math.log(math.fsum(math.exp(v - m) for v in z)) - z[label]
    return total / len(y)


def random_instance(rng: np.random.Generator, arch: str):
    d = int(rng.integers(1, 7))
    c = int(rng.integers(2, 5))
    h = int(rng.integers(1, 6)) if arch == "mlp1" else 0
    spec = ModelSpec(arch, d, c, hidden=h)
    weights = {k: rng.standard_normal(s) for k, s in spec.shapes().items()}
    n = int(rng.integers(1, 9))
    X = rng.standard_normal((n, d))
    y = rng.integers(0, c, n)
    return spec, weights, X, y


def max_fd_relative_error(spec, weights, X, y, step=1e-5, floor=1e-6) -> float:
    """Worst relative error between analytic and central-difference gradients.

    Components whose magnitude is below ``floor`` on both sides are compared
    against ``floor`` (relative error is meaningless at zero).
    """
    _, grads = loss_and_grad(spec, weights, X, y)
    worst = 0.0
    for name, w in weights.items():
        flat = w.reshape(-1)
        g = grads[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = naive_loss(spec, weights, X, y)
            flat[i] = orig - step
            down = naive_loss(spec, weights, X, y)
            flat[i] = orig
            fd = (up - down) / (2 * step)
            worst = max(worst, abs(fd - g[i]) / max(abs(fd), abs(g[i]), floor))
    return worst
