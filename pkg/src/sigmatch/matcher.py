"""One-shot template database and exhaustive cosine-distance matching.

DB file layout (little-endian)::

    b"TMDB" | u32 version | u32 d | u64 count | count x (u16 id_len | id bytes | d x f32)
"""
import math
import struct
import threading
import time
from dataclasses import dataclass

import numpy as np

from ._io import Reader, atomic_write
from .errors import DimensionError, DuplicateError, FormatError

DB_MAGIC = b"TMDB"
DB_VERSION = 1
MAX_DISTANCE = 2.0
# float32 storage of unit vectors perturbs the cosine of identical vectors by
# O(1e-15); distances this close to 0 (or 2) are reported as exactly 0 (or 2)
EXACT_MATCH_TOL = 1e-12
_QUERY_CHUNK = 256


def _as_vector(sig, d=None, what="signature"):
    v = np.asarray(sig, dtype=np.float64)
    if v.ndim != 1:
        raise DimensionError(f"{what} must be a vector, got shape {v.shape}")
    if d is not None and v.shape[0] != d:
        raise DimensionError(f"{what} has dimension {v.shape[0]}, expected {d}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{what} contains NaN or Inf")
    return v


def cosine_distance(a, b) -> float:
    """1 - cos(a, b), in [0, 2]."""
    a = _as_vector(a, what="a")
    b = _as_vector(b, a.shape[0], what="b")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine distance is undefined for a zero vector")
    return float(_to_distance(np.dot(a, b) / (na * nb)))


@dataclass(frozen=True)
class MatchResult:
    accepted: bool
    identity: str | None
    distance: float
    nearest: str | None = None
    distances: np.ndarray | None = None

    @property
    def best_distance(self) -> float:
        return self.distance


@dataclass
class BatchMatch:
    results: list
    total_seconds: float
    n_templates: int

    @property
    def per_query_seconds(self) -> float:
        return self.total_seconds / len(self.results) if self.results else 0.0

    def __len__(self):
        return len(self.results)

    def __iter__(self):
        return iter(self.results)

    def __getitem__(self, i):
        return self.results[i]


class TemplateDB:
    """Ordered identity -> unit-norm signature map, one signature per identity.

    Enrollment order is kept and decides ties in matching. Readers work on a
    snapshot of ``(ids, matrix)`` so a concurrent enroll is either fully
    visible or not at all.
    """

    def __init__(self, dimension: int):
        if dimension < 1:
            raise ValueError("dimension must be positive")
        self.dimension = int(dimension)
        self._lock = threading.Lock()
        self._ids = []
        self._pos = {}
        self._f32 = np.zeros((0, self.dimension), dtype=np.float32)
        self._f64 = np.zeros((0, self.dimension))
        self._inv_norm = np.zeros(0)

    def __len__(self):
        return len(self._ids)

    def __contains__(self, identity):
        return identity in self._pos

    def __getitem__(self, identity) -> np.ndarray:
        ids, f32, _, _ = self.snapshot()
        return f32[self._pos[identity]].copy()

    @property
    def identities(self) -> list:
        return list(self._ids)

    def entries(self) -> list:
        ids, f32, _, _ = self.snapshot()
        return [(i, f32[k].copy()) for k, i in enumerate(ids)]

    def snapshot(self):
        with self._lock:
            n = len(self._ids)
            return tuple(self._ids[:n]), self._f32[:n], self._f64[:n], self._inv_norm[:n]

    def _grow(self, extra):
        n = len(self._ids)
        cap = self._f32.shape[0]
        if n + extra <= cap:
            return
        new_cap = max(16, 2 * cap, n + extra)
        for name in ("_f32", "_f64"):
            old = getattr(self, name)
            arr = np.zeros((new_cap, self.dimension), dtype=old.dtype)
            arr[:n] = old[:n]
            setattr(self, name, arr)
        inv = np.zeros(new_cap)
        inv[:n] = self._inv_norm[:n]
        self._inv_norm = inv

    def _store(self, identity, unit32):
        n = len(self._ids)
        self._f32[n] = unit32
        row = unit32.astype(np.float64)
        inv = 1.0 / math.sqrt(float(np.dot(row, row)))
        self._inv_norm[n] = inv
        # float64 copy rescaled to exact unit norm; matching is a plain dot product
        self._f64[n] = row * inv
        self._pos[identity] = n
        self._ids.append(identity)

    def enroll(self, identity, sig) -> "TemplateDB":
        identity = str(identity)
        v = _as_vector(sig, self.dimension)
        norm = np.linalg.norm(v)
        if norm == 0:
            raise ValueError("cannot enroll a zero signature")
        with self._lock:
            if identity in self._pos:
                raise DuplicateError(f"identity {identity!r} is already enrolled")
            self._grow(1)
            self._store(identity, (v / norm).astype(np.float32))
        return self

    def enroll_many(self, identities, signatures) -> "TemplateDB":
        S = np.asarray(signatures, dtype=np.float64)
        ids = [str(i) for i in identities]
        if S.ndim != 2 or S.shape[1] != self.dimension or S.shape[0] != len(ids):
            raise DimensionError(f"signatures of shape {S.shape} do not fit {len(ids)} x {self.dimension}")
        if not np.all(np.isfinite(S)):
            raise ValueError("signatures contain NaN or Inf")
        norms = np.linalg.norm(S, axis=1)
        if np.any(norms == 0):
            raise ValueError("cannot enroll a zero signature")
        with self._lock:
            seen = set(self._pos)
            for i in ids:
                if i in seen:
                    raise DuplicateError(f"identity {i!r} is already enrolled")
                seen.add(i)
            self._grow(len(ids))
            unit = (S / norms[:, None]).astype(np.float32)
            for i, row in zip(ids, unit):
                self._store(i, row)
        return self

    def nearest(self, queries, snap=None):
        """Index and distance of the closest template for each query row.

        Queries must already be validated; empty databases give index -1 and
        distance +inf.
        """
        Q = np.asarray(queries, dtype=np.float64)
        ids, _, T, _ = snap if snap is not None else self.snapshot()
        m = Q.shape[0]
        if not ids:
            return np.full(m, -1), np.full(m, np.inf), ids
        qn = Q / np.sqrt(np.einsum("ij,ij->i", Q, Q))[:, None]
        best = np.empty(m, dtype=np.int64)
        dist = np.empty(m)
        for s in range(0, m, _QUERY_CHUNK):
            sim = qn[s:s + _QUERY_CHUNK] @ T.T
            k = np.argmax(sim, axis=1)
            d = _to_distance(sim[np.arange(k.size), k])
            # distances are clipped, so several templates can share the winning
            # value; the earliest enrolled one must win
            for r in np.flatnonzero(d == 0.0):
                k[r] = np.argmax(_to_distance(sim[r]) == 0.0)
            k[d == MAX_DISTANCE] = 0
            best[s:s + _QUERY_CHUNK] = k
            dist[s:s + _QUERY_CHUNK] = d
        return best, dist, ids

    def distance_matrix(self, queries, snap=None) -> np.ndarray:
        """Full ``(queries, templates)`` cosine-distance matrix."""
        Q = _validate_queries(queries, self.dimension)
        _, _, T, _ = snap if snap is not None else self.snapshot()
        return _to_distance((Q / np.linalg.norm(Q, axis=1, keepdims=True)) @ T.T)


def _to_distance(sim):
    d = np.array(1.0 - np.asarray(sim, dtype=np.float64))
    np.clip(d, 0.0, MAX_DISTANCE, out=d)
    d[d < EXACT_MATCH_TOL] = 0.0
    d[d > MAX_DISTANCE - EXACT_MATCH_TOL] = MAX_DISTANCE
    return d


def _validate_queries(queries, d):
    Q = np.asarray(queries, dtype=np.float64)
    if Q.ndim == 1:
        Q = Q[None, :]
    if Q.ndim != 2 or Q.shape[1] != d:
        raise DimensionError(f"queries of shape {Q.shape} do not have dimension {d}")
    if not np.all(np.isfinite(Q)):
        raise ValueError("query contains NaN or Inf")
    if not np.all(np.any(Q, axis=1)):
        raise ValueError("cannot match a zero query")
    return Q


def _decide(ids, k, dist, threshold, row=None):
    if k < 0:
        return MatchResult(False, None, math.inf, None, row)
    nearest = ids[k]
    if dist <= threshold:
        return MatchResult(True, nearest, float(dist), nearest, row)
    return MatchResult(False, None, float(dist), nearest, row)


def enroll(db: TemplateDB, identity, sig) -> TemplateDB:
    return db.enroll(identity, sig)


def match(db: TemplateDB, query, threshold: float) -> MatchResult:
    """Nearest template by cosine distance; accepted when within ``threshold``."""
    Q = _validate_queries(_as_vector(query, db.dimension, "query"), db.dimension)
    k, dist, ids = db.nearest(Q)
    return _decide(ids, int(k[0]), float(dist[0]), threshold)


def match_batch(db: TemplateDB, queries, threshold: float, keep_distances: bool = False) -> BatchMatch:
    """Vectorized ``match`` over query rows, with wall-clock timing."""
    Q = _validate_queries(queries, db.dimension)
    start = time.perf_counter()
    snap = db.snapshot()
    ids = snap[0]
    if keep_distances and ids:
        D = db.distance_matrix(Q, snap)
        k = np.argmin(D, axis=1)
        dist = D[np.arange(Q.shape[0]), k]
        results = [_decide(ids, int(k[i]), float(dist[i]), threshold, D[i]) for i in range(Q.shape[0])]
    else:
        k, dist, ids = db.nearest(Q, snap)
        results = [_decide(ids, ki, di, threshold) for ki, di in zip(k.tolist(), dist.tolist())]
    elapsed = time.perf_counter() - start
    return BatchMatch(results, elapsed, len(ids))


def save_db(db: TemplateDB, path) -> None:
    ids, f32, _, _ = db.snapshot()
    with atomic_write(path, "wb") as fh:
        fh.write(DB_MAGIC)
        fh.write(struct.pack("<IIQ", DB_VERSION, db.dimension, len(ids)))
        for identity, row in zip(ids, f32):
            raw = identity.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise FormatError(f"identity too long ({len(raw)} bytes)")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(np.ascontiguousarray(row, dtype="<f4").tobytes())


def load_db(path) -> TemplateDB:
    with open(path, "rb") as fh:
        data = fh.read()
    r = Reader(data, what=str(path))
    if r.take(4) != DB_MAGIC:
        raise FormatError(f"{path}: not a template database (bad magic)")
    version = r.u32()
    if version != DB_VERSION:
        raise FormatError(f"{path}: unsupported database version {version}")
    d = r.u32()
    count = r.u64()
    if d < 1:
        raise FormatError(f"{path}: dimension must be positive")
    db = TemplateDB(d)
    db._grow(count)
    for i in range(count):
        n = r.u16()
        try:
            identity = r.take(n).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"{path}: entry {i} identity is not UTF-8") from None
        row = np.frombuffer(r.take(4 * d), dtype="<f4").astype(np.float32)
        if identity in db or not np.all(np.isfinite(row)) or not np.any(row):
            raise FormatError(f"{path}: entry {i} ({identity!r}) is duplicate, zero or non-finite")
        # stored rows are used verbatim so the round trip is bit-exact
        db._store(identity, row)
    if not r.at_end():
        raise FormatError(f"{path}: {len(data) - r.pos} trailing bytes")
    return db
