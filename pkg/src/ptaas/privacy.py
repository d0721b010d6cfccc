"""Differential-privacy noise for sketches and a per-device budget ledger.

Two noise placements are supported:

* ``post_hash``: randomized response on the discrete sketch (bit flips for
  SimHash, slot replacement for MinHash), with the total epsilon split evenly
  across bits/slots by sequential composition.
* ``pre_quantization``: Laplace or Gaussian noise on the real-valued SimHash
  projections, which are then quantized to bits.

All samplers are seeded and draw their randomness before applying the
privacy scale, so sweeping epsilon under one seed yields coupled outputs.
"""

from __future__ import annotations

import dataclasses
import math
import threading
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import BudgetExhausted, InvalidBudget
from .sketch import (
    MERSENNE_61,
    MinHashSignature,
    SimHashFingerprint,
    Sketch,
    fingerprint_from_projections,
)

MECHANISMS = ("laplace", "gaussian", "randomized_response")
PLACEMENTS = ("post_hash", "pre_quantization")
DEFAULT_EPSILON_CAP = 8.0


@dataclass(frozen=True)
class PrivacyParams:
    mechanism: str
    epsilon: float
    delta: float = 0.0
    sensitivity: float = 1.0

    def __post_init__(self):
        if self.mechanism not in MECHANISMS:
            raise InvalidBudget(f"unknown mechanism {self.mechanism!r}")
        if not self.epsilon > 0:
            raise InvalidBudget(f"epsilon must be > 0, got {self.epsilon}")
        if not self.sensitivity > 0 or not math.isfinite(self.sensitivity):
            raise InvalidBudget(f"sensitivity must be finite and > 0, got {self.sensitivity}")
        if self.mechanism == "gaussian":
            if not 0 < self.delta < 1:
                raise InvalidBudget(f"gaussian needs 0 < delta < 1, got {self.delta}")
        elif self.delta != 0:
            raise InvalidBudget(f"{self.mechanism} takes delta = 0, got {self.delta}")


def _uniform_open(rng: np.random.Generator, n: int) -> np.ndarray:
    # strictly inside (0, 1): k/2^53 + 2^-54
    return (rng.integers(0, 1 << 53, size=n, dtype=np.int64) + 0.5) / float(1 << 53)


def laplace_scale(params: PrivacyParams) -> float:
    return params.sensitivity / params.epsilon


def gaussian_sigma(params: PrivacyParams) -> float:
    """Classic Gaussian-mechanism calibration ``sens * sqrt(2 ln(1.25/delta)) / eps``."""
    return params.sensitivity * math.sqrt(2.0 * math.log(1.25 / params.delta)) / params.epsilon


def laplace_noise(values: Sequence[float], params: PrivacyParams, seed: int) -> np.ndarray:
    """Add Laplace(sensitivity/epsilon) noise via inverse-CDF sampling."""
    if params.mechanism != "laplace":
        raise InvalidBudget("laplace_noise requires mechanism='laplace'")
    x = np.asarray(values, dtype=np.float64)
    u = _uniform_open(np.random.default_rng(seed), x.size).reshape(x.shape)
    # F^-1(u) = b ln(2u) for u < 1/2, -b ln(2(1-u)) otherwise
    std = np.where(u < 0.5, np.log(2.0 * u), -np.log(2.0 * (1.0 - u)))
    return x + laplace_scale(params) * std


def gaussian_noise(values: Sequence[float], params: PrivacyParams, seed: int) -> np.ndarray:
    if params.mechanism != "gaussian":
        raise InvalidBudget("gaussian_noise requires mechanism='gaussian'")
    x = np.asarray(values, dtype=np.float64)
    z = np.random.default_rng(seed).standard_normal(x.shape)
    return x + gaussian_sigma(params) * z


def rr_flip_probability(epsilon_per_item: float) -> float:
    """Flip probability ``1 / (1 + e^eps)``; 0 for infinite epsilon."""
    if epsilon_per_item > 700:
        return 0.0
    return 1.0 / (1.0 + math.exp(epsilon_per_item))


def rr_flip_bits(bits: Sequence[int], epsilon: float, seed: int) -> np.ndarray:
    """Randomized response on a bit vector with per-bit budget ``epsilon/len``."""
    if not epsilon > 0:
        raise InvalidBudget(f"epsilon must be > 0, got {epsilon}")
    arr = np.asarray(bits, dtype=np.uint8)
    if arr.size == 0:
        raise ValueError("bit sequence must be non-empty")
    p = rr_flip_probability(epsilon / arr.size)
    u = np.random.default_rng(seed).random(arr.size)
    return np.where(u < p, 1 - arr, arr).astype(np.uint8)


def minhash_slot_rr(sig: MinHashSignature, epsilon: float, seed: int) -> MinHashSignature:
    """Replace each slot by a fresh uniform hash value w.p. ``1/(1+e^(eps/k))``."""
    if not epsilon > 0:
        raise InvalidBudget(f"epsilon must be > 0, got {epsilon}")
    p = rr_flip_probability(epsilon / sig.k)
    rng = np.random.default_rng(seed)
    u = rng.random(sig.k)
    fresh = rng.integers(0, MERSENNE_61, size=sig.k, dtype=np.uint64)
    return MinHashSignature(values=np.where(u < p, fresh, sig.values).astype(np.uint64), seed=sig.seed)


def projection_sensitivity(planes: np.ndarray, n_samples: int = 1, norm: str = "l2") -> float:
    """Sensitivity of the projections of a mean of ``n_samples`` unit vectors.

    Swapping one sample moves the mean by at most ``2/n`` in L2, so the
    projections move by at most ``2/n * ||P||_2`` (L2) or
    ``2/n * sum_i ||p_i||`` (L1).
    """
    scale = 2.0 / max(1, n_samples)
    if norm == "l2":
        return scale * float(np.linalg.norm(planes, ord=2))
    if norm == "l1":
        return scale * float(np.linalg.norm(planes, axis=1).sum())
    raise ValueError(f"unknown norm {norm!r}")


def privatize(sketch: Sketch, params: PrivacyParams, placement: str, seed: int) -> Sketch:
    """Apply the DP mechanism to a sketch; the result has the same kind and length.

    ``pre_quantization`` needs a SimHash fingerprint carrying its projections.
    """
    if placement == "post_hash":
        if params.mechanism != "randomized_response":
            raise InvalidBudget("post_hash placement uses randomized_response")
        if isinstance(sketch, SimHashFingerprint):
            return SimHashFingerprint(bits=rr_flip_bits(sketch.bits, params.epsilon, seed), seed=sketch.seed)
        return minhash_slot_rr(sketch, params.epsilon, seed)
    if placement == "pre_quantization":
        if not isinstance(sketch, SimHashFingerprint) or sketch.projections is None:
            raise InvalidBudget("pre_quantization needs a SimHash fingerprint with projections")
        if params.mechanism == "laplace":
            noisy = laplace_noise(sketch.projections, params, seed)
        elif params.mechanism == "gaussian":
            noisy = gaussian_noise(sketch.projections, params, seed)
        else:
            raise InvalidBudget("pre_quantization uses laplace or gaussian")
        return fingerprint_from_projections(noisy, sketch.seed)
    raise InvalidBudget(f"unknown placement {placement!r}")


# --------------------------------------------------------------------------
# budget accounting

@dataclass(frozen=True)
class LedgerEntry:
    timestamp: datetime
    epsilon: float
    mechanism: str


@dataclass(frozen=True)
class BudgetLedger:
    """Cumulative epsilon spend of one device under sequential composition."""

    device_id: bytes
    epsilon_cap: float = DEFAULT_EPSILON_CAP
    entries: tuple[LedgerEntry, ...] = ()

    @property
    def epsilon_spent(self) -> float:
        return math.fsum(e.epsilon for e in self.entries)

    @property
    def remaining(self) -> float:
        return self.epsilon_cap - self.epsilon_spent


def charge_budget(ledger: BudgetLedger, epsilon: float, mechanism: str = "randomized_response",
                  timestamp: datetime | None = None) -> BudgetLedger:
    """Return a new ledger with ``epsilon`` charged, or raise BudgetExhausted.

    The input ledger is never modified.
    """
    if not (epsilon > 0 and math.isfinite(epsilon)):
        raise InvalidBudget(f"charge must be finite and > 0, got {epsilon}")
    spent = ledger.epsilon_spent
    if math.fsum([spent, epsilon]) > ledger.epsilon_cap:
        raise BudgetExhausted(spent, epsilon, ledger.epsilon_cap)
    entry = LedgerEntry(timestamp or datetime.now(timezone.utc), float(epsilon), mechanism)
    return dataclasses.replace(ledger, entries=ledger.entries + (entry,))


class LedgerBook:
    """Server-side ledgers keyed by device id, optionally backed by a file.

    The file holds one tab-separated line per successful charge:
    ``device_id_hex  iso8601_timestamp  epsilon  mechanism``.
    Check-then-charge is atomic per device.
    """

    def __init__(self, epsilon_cap: float = DEFAULT_EPSILON_CAP, path: str | Path | None = None):
        self.epsilon_cap = epsilon_cap
        self.path = Path(path) if path else None
        self._ledgers: dict[bytes, BudgetLedger] = {}
        self._locks: dict[bytes, threading.Lock] = {}
        self._meta_lock = threading.Lock()
        self._file_lock = threading.Lock()
        if self.path is not None and self.path.exists():
            self._load()

    def _load(self):
        for lineno, line in enumerate(self.path.read_text().splitlines(), 1):
            if not line.strip():
                continue
            try:
                dev_hex, ts, eps, mech = line.split("\t")
                dev = bytes.fromhex(dev_hex)
                entry = LedgerEntry(datetime.fromisoformat(ts), float(eps), mech)
            except ValueError as exc:
                raise ValueError(f"ledger line {lineno}: {exc}") from exc
            led = self._ledgers.get(dev) or BudgetLedger(dev, self.epsilon_cap)
            self._ledgers[dev] = dataclasses.replace(led, entries=led.entries + (entry,))

    def _lock_for(self, device_id: bytes) -> threading.Lock:
        with self._meta_lock:
            return self._locks.setdefault(device_id, threading.Lock())

    def get(self, device_id: bytes) -> BudgetLedger:
        return self._ledgers.get(device_id) or BudgetLedger(device_id, self.epsilon_cap)

    def charge(self, device_id: bytes, epsilon: float, mechanism: str) -> BudgetLedger:
        with self._lock_for(device_id):
            updated = charge_budget(self.get(device_id), epsilon, mechanism)
            if self.path is not None:
                e = updated.entries[-1]
                with self._file_lock, self.path.open("a") as fh:
                    fh.write(f"{device_id.hex()}\t{e.timestamp.isoformat()}\t{e.epsilon!r}\t{e.mechanism}\n")
            self._ledgers[device_id] = updated
            return updated
