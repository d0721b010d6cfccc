"""Server-side corpus: ingestion, precomputed sketches, top-k retrieval, storage."""

from __future__ import annotations

import hashlib
import math
import struct
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    CorruptIndex,
    DegenerateInput,
    EmptyCorpus,
    IncompatibleSketches,
    IngestError,
    StoreCorrupt,
    StoreVersionError,
)
from .sketch import (
    MinHashSignature,
    SimHashFingerprint,
    Sketch,
    SketchParams,
    normalize,
    sketch_vector,
)

STORE_MAGIC = b"PTCS"
STORE_VERSION = 1
_PARAMS = struct.Struct(">IIIQQIIQ")  # d, k, b, minhash_seed, simhash_seed, vocab, levels, n
_RECORD_HEAD = struct.Struct(">QI")  # record_id, label


@dataclass(frozen=True)
class RetrievalResult:
    ranked: tuple[tuple[int, float], ...]
    query_kind: str

    @property
    def record_ids(self) -> list[int]:
        return [rid for rid, _ in self.ranked]

    def to_bytes(self) -> bytes:
        out = [self.query_kind.encode(), struct.pack(">I", len(self.ranked))]
        out += [struct.pack(">Qd", rid, score) for rid, score in self.ranked]
        return b"".join(out)


class CorpusStore:
    """Immutable set of records with sketches under one published parameter set."""

    def __init__(self, params: SketchParams, features: np.ndarray, labels: np.ndarray,
                 record_ids: np.ndarray | None = None, minhash: np.ndarray | None = None,
                 simhash: np.ndarray | None = None):
        self.params = params
        self.features = np.ascontiguousarray(features, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.int64)
        n = self.features.shape[0]
        self.record_ids = (np.arange(n, dtype=np.uint64) if record_ids is None
                           else np.asarray(record_ids, dtype=np.uint64))
        if minhash is None or simhash is None:
            minhash, simhash = self._sketch_all()
        self.minhash = minhash
        self.simhash = simhash
        self._row_of = {int(r): i for i, r in enumerate(self.record_ids)}
        self._indexes: dict[tuple[str, int], BandIndex] = {}
        self._index_lock = threading.Lock()
        for arr in (self.features, self.labels, self.record_ids, self.minhash, self.simhash):
            arr.setflags(write=False)

    def _sketch_all(self) -> tuple[np.ndarray, np.ndarray]:
        n = self.features.shape[0]
        mh = np.zeros((n, self.params.k), dtype=np.uint64)
        sh = np.zeros((n, self.params.b), dtype=np.uint8)
        for i, row in enumerate(self.features):
            mh[i] = sketch_vector(row, self.params, "minhash").values
            sh[i] = sketch_vector(row, self.params, "simhash").bits
        return mh, sh

    def __len__(self) -> int:
        return int(self.features.shape[0])

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0

    def digest(self) -> bytes:
        return hashlib.sha256(persist_bytes(self)).digest()

    def record_sketch(self, record_id: int, kind: str) -> Sketch:
        row = self._row(record_id)
        if kind == "minhash":
            return MinHashSignature(values=self.minhash[row].copy(), seed=self.params.minhash_seed)
        return SimHashFingerprint(bits=self.simhash[row].copy(), seed=self.params.simhash_seed)

    def _row(self, record_id: int) -> int:
        try:
            return self._row_of[int(record_id)]
        except KeyError:
            raise CorruptIndex(f"record {record_id} not in store") from None

    # ----------------------------------------------------------------- search

    def _matrix_for(self, query: Sketch) -> tuple[np.ndarray, np.ndarray, str]:
        p = self.params
        if isinstance(query, MinHashSignature):
            if query.k != p.k or query.seed != p.minhash_seed:
                raise IncompatibleSketches(f"minhash query (k={query.k}) does not match published k={p.k}/seed")
            return self.minhash, query.values, "minhash"
        if isinstance(query, SimHashFingerprint):
            if query.b != p.b or query.seed != p.simhash_seed:
                raise IncompatibleSketches(f"simhash query (b={query.b}) does not match published b={p.b}/seed")
            return self.simhash, query.bits, "simhash"
        raise IncompatibleSketches(f"unsupported sketch type {type(query).__name__}")

    def match_counts(self, query: Sketch, rows: np.ndarray | None = None) -> np.ndarray:
        """Number of agreeing slots/bits between the query and each row."""
        mat, q, _ = self._matrix_for(query)
        if rows is not None:
            mat = mat[rows]
        return np.count_nonzero(mat == q, axis=1)

    def _rank(self, rows: np.ndarray, matches: np.ndarray, length: int, k: int, kind: str) -> RetrievalResult:
        ids = self.record_ids[rows]
        order = np.lexsort((ids, -matches))[:k]
        ranked = tuple((int(ids[i]), int(matches[i]) / length) for i in order)
        return RetrievalResult(ranked=ranked, query_kind=kind)

    def search_topk(self, query_sketch: Sketch, k_retrieve: int, label_hints: Iterable[int] | None = None,
                    use_index: bool = False, bands: int | None = None) -> RetrievalResult:
        """Top-k records by estimated similarity, ties broken by ascending record id.

        ``label_hints`` restricts candidates to those labels (hard filter). With
        ``use_index`` an LSH banding prefilter is consulted first; the result is
        identical to the exhaustive scan because records outside every matching
        band can score at most ``(L - bands)/L`` and the scan falls back to
        exhaustive when that bound could reach into the top k.
        """
        if len(self) == 0:
            raise EmptyCorpus("corpus is empty")
        if k_retrieve < 1:
            raise ValueError("k_retrieve must be >= 1")
        mat, _, kind = self._matrix_for(query_sketch)
        length = mat.shape[1]
        allowed = np.arange(len(self))
        if label_hints:
            allowed = np.flatnonzero(np.isin(self.labels, sorted(set(label_hints))))
            if allowed.size == 0:
                return RetrievalResult(ranked=(), query_kind=kind)
        k = min(k_retrieve, allowed.size)

        if use_index:
            index = self.band_index(kind, bands or default_bands(length))
            cand = np.intersect1d(index.candidates(query_sketch), allowed, assume_unique=False)
            if cand.size:
                matches = self.match_counts(query_sketch, cand)
                bound = length - index.bands
                if np.count_nonzero(matches > bound) >= k:
                    return self._rank(cand, matches, length, k, kind)
        matches = self.match_counts(query_sketch, allowed)
        return self._rank(allowed, matches, length, k, kind)

    def band_index(self, kind: str, bands: int) -> "BandIndex":
        with self._index_lock:
            key = (kind, bands)
            if key not in self._indexes:
                mat = self.minhash if kind == "minhash" else self.simhash
                self._indexes[key] = BandIndex(mat, bands)
            return self._indexes[key]

    def fetch_training_set(self, result: RetrievalResult) -> tuple[np.ndarray, np.ndarray]:
        """Features and labels of the retrieved records, in ranking order."""
        rows = [self._row(rid) for rid in result.record_ids]
        if not rows:
            return np.zeros((0, self.dim)), np.zeros(0, dtype=np.int64)
        return self.features[rows].copy(), self.labels[rows].copy()


def default_bands(length: int) -> int:
    """Largest band count with 4-row bands that divides ``length`` (at least 1)."""
    for rows in (4, 2, 1):
        if length % rows == 0:
            return length // rows
    return length


class BandIndex:
    """LSH banding over a sketch matrix: a row is a candidate if any band matches."""

    def __init__(self, matrix: np.ndarray, bands: int):
        length = matrix.shape[1]
        if bands < 1 or length % bands:
            raise ValueError(f"bands={bands} must divide sketch length {length}")
        self.bands = bands
        self.rows = length // bands
        self.tables: list[dict[bytes, list[int]]] = []
        for band in range(bands):
            table: dict[bytes, list[int]] = {}
            chunk = np.ascontiguousarray(matrix[:, band * self.rows:(band + 1) * self.rows])
            for i, key in enumerate(chunk):
                table.setdefault(key.tobytes(), []).append(i)
            self.tables.append(table)

    def candidates(self, query: Sketch) -> np.ndarray:
        q = query.values if isinstance(query, MinHashSignature) else query.bits
        q = np.ascontiguousarray(q.astype(np.uint64 if isinstance(query, MinHashSignature) else np.uint8))
        found: set[int] = set()
        for band, table in enumerate(self.tables):
            found.update(table.get(q[band * self.rows:(band + 1) * self.rows].tobytes(), ()))
        return np.array(sorted(found), dtype=np.int64)


# ------------------------------------------------------------------- ingest

def parse_corpus_lines(lines: Iterable[str]) -> tuple[np.ndarray, np.ndarray]:
    """Parse ``label<TAB>v1,...,vd`` lines into raw (unnormalized) features."""
    feats: list[np.ndarray] = []
    labels: list[int] = []
    dim = None
    for lineno, line in enumerate(lines, 1):
        line = line.rstrip("\n")
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise IngestError("expected 'label<TAB>v1,...,vd'", lineno)
        try:
            label = int(parts[0])
            vec = np.array([float(x) for x in parts[1].split(",")], dtype=np.float64)
        except ValueError as exc:
            raise IngestError(str(exc), lineno) from None
        if label < 0:
            raise IngestError("label must be non-negative", lineno)
        if dim is None:
            dim = vec.shape[0]
        elif vec.shape[0] != dim:
            raise IngestError(f"dimension {vec.shape[0]} differs from {dim}", lineno)
        try:
            feats.append(normalize(vec))
        except DegenerateInput as exc:
            raise IngestError(str(exc), lineno) from None
        labels.append(label)
    if not feats:
        return np.zeros((0, 0)), np.zeros(0, dtype=np.int64)
    return np.vstack(feats), np.array(labels, dtype=np.int64)


def ingest(path: str | Path, params: SketchParams | None = None) -> CorpusStore:
    with open(path) as fh:
        feats, labels = parse_corpus_lines(fh)
    return CorpusStore(params or SketchParams(), feats, labels)


def write_corpus_file(path: str | Path, features: np.ndarray, labels: Sequence[int]) -> None:
    with open(path, "w") as fh:
        for row, label in zip(features, labels):
            fh.write(f"{int(label)}\t{','.join(repr(float(x)) for x in row)}\n")


class CorpusService:
    """Holds the current store; ingest swaps it atomically for searchers."""

    def __init__(self, store: CorpusStore | None = None):
        self._store = store

    @property
    def store(self) -> CorpusStore:
        store = self._store
        if store is None:
            raise EmptyCorpus("no corpus loaded")
        return store

    def ingest(self, path: str | Path, params: SketchParams | None = None) -> int:
        store = ingest(path, params)
        self._store = store
        return len(store)


# ------------------------------------------------------------------ storage

def persist_bytes(store: CorpusStore) -> bytes:
    p = store.params
    d = store.dim if len(store) else 0
    out = [STORE_MAGIC, bytes([STORE_VERSION]),
           _PARAMS.pack(d, p.k, p.b, p.minhash_seed, p.simhash_seed, p.vocab, p.levels, len(store))]
    for i in range(len(store)):
        out.append(_RECORD_HEAD.pack(int(store.record_ids[i]), int(store.labels[i])))
        out.append(store.features[i].astype("<f8").tobytes())
        out.append(store.minhash[i].astype(">u8").tobytes())
        out.append(np.packbits(store.simhash[i], bitorder="big").tobytes())
    body = b"".join(out)
    return body + hashlib.sha256(body).digest()


def persist(store: CorpusStore, path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(persist_bytes(store))
    tmp.replace(path)


def load_bytes(data: bytes) -> CorpusStore:
    if len(data) < 5 or data[:4] != STORE_MAGIC:
        raise StoreVersionError("not a corpus store (bad magic)")
    if data[4] != STORE_VERSION:
        raise StoreVersionError(f"unsupported store version {data[4]}")
    if len(data) < 5 + _PARAMS.size + 32:
        raise StoreCorrupt("store truncated in parameter block")
    d, k, b, mh_seed, sh_seed, vocab, levels, n = _PARAMS.unpack_from(data, 5)
    rec_len = _RECORD_HEAD.size + 8 * d + 8 * k + math.ceil(b / 8)
    expected = 5 + _PARAMS.size + n * rec_len + 32
    if len(data) != expected:
        raise StoreCorrupt(f"store has {len(data)} bytes, expected {expected}")
    body, trailer = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != trailer:
        raise StoreCorrupt("store checksum mismatch")
    params = SketchParams(k=k, b=b, minhash_seed=mh_seed, simhash_seed=sh_seed, vocab=vocab, levels=levels)
    ids = np.zeros(n, dtype=np.uint64)
    labels = np.zeros(n, dtype=np.int64)
    feats = np.zeros((n, d))
    mh = np.zeros((n, k), dtype=np.uint64)
    sh = np.zeros((n, b), dtype=np.uint8)
    off = 5 + _PARAMS.size
    for i in range(n):
        ids[i], labels[i] = _RECORD_HEAD.unpack_from(data, off)
        off += _RECORD_HEAD.size
        feats[i] = np.frombuffer(data, dtype="<f8", count=d, offset=off)
        off += 8 * d
        mh[i] = np.frombuffer(data, dtype=">u8", count=k, offset=off)
        off += 8 * k
        nb = math.ceil(b / 8)
        sh[i] = np.unpackbits(np.frombuffer(data, dtype=np.uint8, count=nb, offset=off), bitorder="big")[:b]
        off += nb
    return CorpusStore(params, feats, labels, record_ids=ids, minhash=mh, simhash=sh)


def load(path: str | Path) -> CorpusStore:
    return load_bytes(Path(path).read_bytes())
