"""Class-balanced batch composition and triplet/quadruplet selection."""
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import DimensionError, MiningError
from .losses import DEFAULT_ALPHA, TripletMargin


class Triplet(NamedTuple):
    anchor: int
    positive: int
    negative: int


class Quadruplet(NamedTuple):
    anchor: int
    positive: int
    negative: int
    negative2: int


@dataclass(frozen=True)
class MiningConfig:
    negatives_per_anchor: int = 5
    positives_per_anchor: int = 1
    margin: float = DEFAULT_ALPHA
    offline_chunks: int = 10

    def __post_init__(self):
        if isinstance(self.margin, TripletMargin):
            object.__setattr__(self, "margin", float(self.margin.alpha))
        TripletMargin(self.margin)
        for name in ("negatives_per_anchor", "positives_per_anchor", "offline_chunks"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class BatchPlan:
    indices: tuple
    class_counts: dict

    def __len__(self):
        return len(self.indices)


def pairwise_sq_dists(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    gram = X @ X.T
    sq = np.diag(gram).copy()
    D = sq[:, None] + sq[None, :] - 2 * gram
    np.maximum(D, 0, out=D)
    np.fill_diagonal(D, 0)
    return D


def compose_batch(ds, batch_size: int, per_class: int = 2, rng_seed: int = 0) -> BatchPlan:
    """Pick ceil(batch_size / per_class) random classes and up to ``per_class``
    random examples from each."""
    if batch_size < 1 or per_class < 1:
        raise ValueError("batch_size and per_class must be positive")
    if batch_size > len(ds):
        raise ValueError(f"batch_size {batch_size} exceeds dataset size {len(ds)}")
    if not any(len(m) >= 2 for m in ds.class_index.values()):
        raise MiningError("no class has two or more examples; no positive pairs are possible")
    rng = np.random.default_rng(rng_seed)
    classes = sorted(ds.class_index)
    n_take = min(math.ceil(batch_size / per_class), len(classes))
    chosen = [classes[i] for i in rng.permutation(len(classes))[:n_take].tolist()]
    indices, counts = [], {}
    for c in chosen:
        members = np.asarray(ds.class_index[c])
        k = min(per_class, members.size)
        picked = rng.choice(members, size=k, replace=False)
        indices.extend(int(i) for i in picked)
        counts[c] = k
    return BatchPlan(tuple(indices), counts)


def epoch_plans(ds, batch_size: int, per_class: int = 2, seed: int = 0) -> list:
    """Batches covering every example once.

    Each class's shuffled examples are cut into groups of ``per_class``; pass k
    packs the k-th group of every class into batches, so a class appears at
    most once per batch.
    """
    if batch_size < 2 or per_class < 1:
        raise ValueError("batch_size must be at least 2 and per_class positive")
    rng = np.random.default_rng(seed)
    classes = sorted(ds.class_index)
    groups = {}
    for c in classes:
        members = np.asarray(ds.class_index[c])[rng.permutation(len(ds.class_index[c]))]
        groups[c] = [members[i:i + per_class] for i in range(0, members.size, per_class)]
    capacity = max(1, math.ceil(batch_size / per_class))
    plans = []
    n_passes = max(len(g) for g in groups.values())
    for k in range(n_passes):
        present = [c for c in classes if len(groups[c]) > k]
        order = [present[i] for i in rng.permutation(len(present)).tolist()]
        cut = [order[i:i + capacity] for i in range(0, len(order), capacity)]
        if len(cut) > 1 and len(cut[-1]) < capacity // 2:
            cut[-2].extend(cut.pop())
        for chunk in cut:
            indices, counts = [], {}
            for c in chunk:
                g = groups[c][k]
                indices.extend(int(i) for i in g)
                counts[c] = len(g)
            if len(indices) >= 2:
                plans.append(BatchPlan(tuple(indices), counts))
    return plans


def _semi_hard(D, labels, cfg: MiningConfig) -> list:
    B = labels.shape[0]
    alpha = float(cfg.margin)
    same = labels[:, None] == labels[None, :]
    out = []
    for a in range(B):
        pos = np.flatnonzero(same[a])
        pos = pos[pos != a]
        negs = np.flatnonzero(~same[a])
        if pos.size == 0 or negs.size == 0:
            continue
        if pos.size > cfg.positives_per_anchor:
            # keep the farthest positives; stable sort keeps lower index on ties
            keep = np.argsort(-D[a, pos], kind="stable")[: cfg.positives_per_anchor]
            pos = np.sort(pos[keep])
        dn = D[a, negs]
        for p in pos.tolist():
            d_ap = D[a, p]
            loss = d_ap - dn + alpha
            ok = (dn >= d_ap) & (loss > 0)
            if not ok.any():
                continue
            cand, cand_loss = negs[ok], loss[ok]
            best = np.argsort(-cand_loss, kind="stable")[: cfg.negatives_per_anchor]
            out.extend(Triplet(a, p, int(n)) for n in cand[best].tolist())
    return out


def mine_semi_hard(signatures, labels, cfg: MiningConfig = MiningConfig()) -> list:
    """Online semi-hard triplet selection.

    For every ordered anchor/positive pair (limited to the
    ``positives_per_anchor`` farthest positives of each anchor), negatives
    with ``d(a, n) >= d(a, p)`` and a positive triplet loss are ranked by loss
    and the top ``negatives_per_anchor`` are kept. Ties go to the lower index.
    Output is ordered by anchor, then positive, then decreasing loss.
    """
    labels = np.asarray(labels)
    X = np.asarray(signatures, dtype=np.float64)
    if X.shape[0] != labels.shape[0]:
        raise DimensionError(f"{X.shape[0]} signatures but {labels.shape[0]} labels")
    if X.shape[0] < 2:
        return []
    return _semi_hard(pairwise_sq_dists(X), labels, cfg)


def mine_quadruplets(signatures, labels, cfg: MiningConfig = MiningConfig()) -> list:
    """Extend each semi-hard triplet with a second negative from a third class.

    ``negative2`` is the point closest to ``negative`` among those with
    ``d(n, n2) >= d(a, p)``, i.e. the one maximizing the second hinge term
    without crossing into the hard regime. Triplets with no such point are
    dropped.
    """
    labels = np.asarray(labels)
    X = np.asarray(signatures, dtype=np.float64)
    if X.shape[0] != labels.shape[0]:
        raise DimensionError(f"{X.shape[0]} signatures but {labels.shape[0]} labels")
    if np.unique(labels).size < 3:
        raise MiningError("quadruplet mining needs at least three classes in the batch")
    D = pairwise_sq_dists(X)
    out = []
    for a, p, n in _semi_hard(D, labels, cfg):
        cand = np.flatnonzero((labels != labels[a]) & (labels != labels[n]))
        d = D[n, cand]
        ok = d >= D[a, p]
        if not ok.any():
            continue
        n2 = cand[ok][np.argmin(d[ok])]
        out.append(Quadruplet(a, p, n, int(n2)))
    return out


def offline_chunks(ds, n_chunks: int, seed: int = 0) -> list:
    """Random partition of the classes into ``n_chunks`` groups; each chunk is
    the sorted list of example indices belonging to its classes."""
    classes = np.array(sorted(ds.class_index))
    perm = np.random.default_rng(seed).permutation(classes.size)
    chunks = []
    for part in np.array_split(classes[perm], n_chunks):
        members = sorted(i for c in part.tolist() for i in ds.class_index[c])
        chunks.append(members)
    return chunks


def mine_offline(ds, external_features, cfg: MiningConfig = MiningConfig(), seed: int = 0,
                 workers: int = 1) -> list:
    """Semi-hard mining over the whole dataset using an external feature space,
    chunk by chunk. Returned triplets index into ``ds``; chunk order is fixed so
    the result does not depend on ``workers``."""
    F = np.asarray(external_features, dtype=np.float64)
    if F.ndim != 2 or F.shape[0] != len(ds):
        raise DimensionError(f"external features have {F.shape[0]} rows, dataset has {len(ds)}")
    chunks = [c for c in offline_chunks(ds, cfg.offline_chunks, seed) if c]

    def run(members):
        idx = np.asarray(members)
        local = mine_semi_hard(F[idx], ds.labels[idx], cfg)
        return [Triplet(int(idx[a]), int(idx[p]), int(idx[n])) for a, p, n in local]

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, chunks))
    else:
        results = [run(c) for c in chunks]
    return [t for part in results for t in part]
