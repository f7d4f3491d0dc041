"""Verification metrics on embeddings: centroids, FAR-constrained thresholds,
TPR at a FAR bound, ROC AUC and nearest-centroid identification."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .csvio import write_csv
from .errors import ConfigError, InsufficientDataError
from .rng import Stream
from .synthetic import Group


class PairingRule(str, enum.Enum):
    ALL_PAIRS = "all_pairs"
    SAME_GROUP_ONLY = "same_group_only"


@dataclass(frozen=True)
class LabeledEmbedding:
    identity: int
    group: Group
    e: np.ndarray = field(compare=False)


@dataclass(frozen=True, eq=False)
class EmbeddingTable:
    """Columnar form of a sequence of :class:`LabeledEmbedding`."""

    e: np.ndarray  # (n, k)
    identity: np.ndarray  # (n,)
    group: np.ndarray  # (n,) group codes 0/1

    def __post_init__(self):
        if not np.all(np.isfinite(self.e)):
            raise ValueError("embeddings must be finite")

    @classmethod
    def from_records(cls, records: Sequence[LabeledEmbedding]) -> EmbeddingTable:
        return cls(np.array([np.atleast_1d(r.e) for r in records], dtype=float),
                   np.array([r.identity for r in records], dtype=np.int64),
                   np.array([Group(r.group).code for r in records], dtype=np.int8))

    def __len__(self):
        return len(self.identity)


def _as_table(embeddings) -> EmbeddingTable:
    if isinstance(embeddings, EmbeddingTable):
        return embeddings
    return EmbeddingTable.from_records(list(embeddings))


@dataclass(frozen=True, eq=False)
class PairScores:
    genuine_distances: np.ndarray
    impostor_distances: np.ndarray
    rule: PairingRule = PairingRule.ALL_PAIRS
    # group codes of both members, shape (n, 2); optional
    genuine_groups: np.ndarray | None = None
    impostor_groups: np.ndarray | None = None

    def __post_init__(self):
        for name in ("genuine_distances", "impostor_distances"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if np.any(arr < 0):
                raise ValueError(f"{name} must be nonnegative")
            object.__setattr__(self, name, arr)

    def for_group(self, group: Group) -> PairScores:
        """Pairs with at least one member in ``group``."""
        if self.genuine_groups is None or self.impostor_groups is None:
            raise ValueError("pair scores carry no group labels")
        c = Group(group).code
        gm = np.any(self.genuine_groups == c, axis=1)
        im = np.any(self.impostor_groups == c, axis=1)
        return PairScores(self.genuine_distances[gm], self.impostor_distances[im], self.rule,
                          self.genuine_groups[gm], self.impostor_groups[im])


@dataclass(frozen=True)
class MatchThresholdReport:
    tau: float
    z: float
    achieved_far: float


def centroid(embeddings, identity: int) -> np.ndarray:
    t = _as_table(embeddings)
    mask = t.identity == identity
    if not mask.any():
        raise KeyError(f"unknown identity {identity}")
    return t.e[mask].mean(axis=0)


def centroids(embeddings) -> dict[int, np.ndarray]:
    """Centroid of every identity, keyed in ascending identity order."""
    t = _as_table(embeddings)
    ids, inv = np.unique(t.identity, return_inverse=True)
    sums = np.zeros((len(ids), t.e.shape[1]))
    np.add.at(sums, inv, t.e)
    counts = np.bincount(inv, minlength=len(ids))
    means = sums / counts[:, None]
    return {int(i): means[j] for j, i in enumerate(ids)}


def far_threshold(scores: PairScores, z: float) -> MatchThresholdReport:
    """Largest tau (among impostor distances plus a sentinel above them) with
    ``mean(impostor < tau) < z``."""
    imp = np.sort(scores.impostor_distances)
    if imp.size == 0:
        raise InsufficientDataError("far_threshold needs at least one impostor distance")
    if not 0 < z <= 1:
        raise ConfigError(f"FAR bound z must lie in (0, 1], got {z}")
    n = imp.size
    sentinel = imp[-1] + max(1.0, abs(imp[-1]))
    candidates = np.append(np.unique(imp), sentinel)
    far = np.searchsorted(imp, candidates, side="left") / n
    ok = np.flatnonzero(far < z)
    # ok is never empty: the smallest candidate has FAR 0
    best = ok[-1]
    return MatchThresholdReport(float(candidates[best]), float(z), float(far[best]))


def tpr_at_far(scores: PairScores, z: float) -> tuple[float, MatchThresholdReport]:
    if scores.genuine_distances.size == 0:
        raise InsufficientDataError("tpr_at_far needs at least one genuine distance")
    report = far_threshold(scores, z)
    return float(np.mean(scores.genuine_distances < report.tau)), report


def roc_auc(scores: PairScores) -> float:
    """P(genuine < impostor) + P(tie)/2, via midranks."""
    g, i = scores.genuine_distances, scores.impostor_distances
    if g.size == 0 or i.size == 0:
        raise InsufficientDataError("roc_auc needs genuine and impostor distances")
    both = np.concatenate([g, i])
    order = np.argsort(both, kind="mergesort")
    sorted_vals = both[order]
    # midranks for ties
    _, first, counts = np.unique(sorted_vals, return_index=True, return_counts=True)
    mid = first + (counts + 1) / 2.0
    ranks = np.empty_like(both)
    ranks[order] = np.repeat(mid, counts)
    # rank-sum of impostors: impostor larger than genuine counts toward AUC
    r_imp = ranks[g.size:].sum()
    u = r_imp - i.size * (i.size + 1) / 2.0
    return float(u / (g.size * i.size))


def nearest_centroid_classify(e, centroids_map: Mapping[int, np.ndarray]) -> int:
    """Identity of the closest centroid; equidistant candidates resolve to the smallest identity."""
    if not centroids_map:
        raise ConfigError("no centroids to classify against")
    ids = np.array(sorted(centroids_map))
    c = np.array([centroids_map[i] for i in ids])
    dist = np.linalg.norm(c - np.asarray(e, dtype=float), axis=1)
    return int(ids[np.argmin(dist)])


def _pair_index_arrays(n: int):
    return np.triu_indices(n, k=1)


def build_pairs(embeddings, rule: PairingRule | str = PairingRule.ALL_PAIRS, cap: int | None = None,
                seed: int = 0) -> PairScores:
    """Genuine (same identity) and impostor (different identity) distance sets.

    With ``same_group_only`` impostor pairs are restricted to two members of
    the same group. ``cap`` bounds each set by seeded uniform subsampling
    without replacement; a cap at or above the population is a no-op.
    """
    rule = PairingRule(rule)
    t = _as_table(embeddings)
    if len(np.unique(t.identity)) < 2:
        raise InsufficientDataError("build_pairs needs at least 2 identities")
    stream = Stream(seed).child("build_pairs", rule.value)
    n = len(t)

    # genuine pairs: enumerate within each identity
    order = np.argsort(t.identity, kind="stable")
    ids_sorted = t.identity[order]
    bounds = np.flatnonzero(np.diff(ids_sorted)) + 1
    gi, gj = [], []
    for block in np.split(order, bounds):
        if len(block) > 1:
            a, b = np.triu_indices(len(block), k=1)
            gi.append(block[a]); gj.append(block[b])
    gi = np.concatenate(gi) if gi else np.zeros(0, dtype=np.int64)
    gj = np.concatenate(gj) if gj else np.zeros(0, dtype=np.int64)
    if cap is not None and gi.size > cap:
        keep = np.sort(stream.child("genuine").generator().choice(gi.size, size=cap, replace=False))
        gi, gj = gi[keep], gj[keep]

    def eligible(i, j):
        ok = t.identity[i] != t.identity[j]
        if rule is PairingRule.SAME_GROUP_ONLY:
            ok &= t.group[i] == t.group[j]
        return ok

    n_all = n * (n - 1) // 2
    if cap is None or n_all <= 4 * cap or n <= 2048:
        ii, jj = _pair_index_arrays(n)
        m = eligible(ii, jj)
        ii, jj = ii[m], jj[m]
        if cap is not None and ii.size > cap:
            keep = np.sort(stream.child("impostor").generator().choice(ii.size, size=cap, replace=False))
            ii, jj = ii[keep], jj[keep]
    else:
        # rejection sampling of distinct unordered pairs
        gen = stream.child("impostor").generator()
        seen: set[tuple[int, int]] = set()
        out_i, out_j = [], []
        tries = 0
        while len(seen) < cap:
            batch = max(2 * (cap - len(seen)), 64)
            a = gen.integers(0, n, size=batch)
            b = gen.integers(0, n, size=batch)
            for x, y in zip(a.tolist(), b.tolist()):
                if x == y:
                    continue
                x, y = (x, y) if x < y else (y, x)
                if (x, y) in seen or not eligible(x, y):
                    continue
                seen.add((x, y)); out_i.append(x); out_j.append(y)
                if len(seen) == cap:
                    break
            tries += batch
            if tries > 1000 * cap:
                break
        ii = np.array(out_i, dtype=np.int64)
        jj = np.array(out_j, dtype=np.int64)
        srt = np.lexsort((jj, ii))
        ii, jj = ii[srt], jj[srt]

    dist = lambda i, j: np.linalg.norm(t.e[i] - t.e[j], axis=1) if i.size else np.zeros(0)
    return PairScores(dist(gi, gj), dist(ii, jj), rule,
                      np.stack([t.group[gi], t.group[gj]], axis=1),
                      np.stack([t.group[ii], t.group[jj]], axis=1))


@dataclass(frozen=True)
class MatchingRow:
    group: str
    z: float
    tau: float
    far: float
    tpr: float
    auc: float
    n_genuine: int
    n_impostor: int
    pairing_rule: str


MATCHING_HEADER = ["group", "z", "tau", "far", "tpr", "auc", "n_genuine", "n_impostor", "pairing_rule"]


def matching_report(scores: PairScores, zs: Sequence[float],
                    groups: Sequence[str] = ("all", "a", "b")) -> list[MatchingRow]:
    """One row per (group, z). Groups with no genuine or impostor pairs are skipped."""
    rows = []
    for g in groups:
        sub = scores if g == "all" else scores.for_group(Group(g))
        if sub.genuine_distances.size == 0 or sub.impostor_distances.size == 0:
            continue
        auc = roc_auc(sub)
        for z in zs:
            tpr, rep = tpr_at_far(sub, z)
            rows.append(MatchingRow(g, float(z), rep.tau, rep.achieved_far, tpr, auc,
                                    int(sub.genuine_distances.size), int(sub.impostor_distances.size),
                                    scores.rule.value))
    return rows


def write_matching_csv(path: str | Path, rows: Sequence[MatchingRow]) -> Path:
    return write_csv(path, MATCHING_HEADER,
                     ([r.group, r.z, r.tau, r.far, r.tpr, r.auc, r.n_genuine, r.n_impostor, r.pairing_rule]
                      for r in rows))
