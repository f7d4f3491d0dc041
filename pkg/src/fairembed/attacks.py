"""Evasion attacks on differentiable embedders.

Both perturbation budget and embedding distance are l2. The untargeted attack
pushes an image away from its own identity centroid inside an epsilon-ball;
the targeted attack looks for the smallest perturbation that makes the
multi-class hinge non-positive for a chosen target centroid.
"""
from __future__ import annotations

import enum
import math
from concurrent.futures import Executor
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .csvio import write_csv
from .errors import ConfigError, InsufficientDataError, NumericError
from .rng import Stream
from .synthetic import GROUPS, Group, SyntheticDataset

AUDIT_TOL = 1e-6


class HingeVariant(str, enum.Enum):
    MAX_AS_WRITTEN = "max_as_written"
    MIN_VARIANT = "min_variant"


class PairScenario(str, enum.Enum):
    SAME_GROUP = "same_group"
    DIFFERENT_GROUP = "different_group"


class AttackMode(str, enum.Enum):
    TARGETED = "targeted"
    UNTARGETED = "untargeted"


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 10.0
    step_size: float = 0.05
    max_iters: int = 200
    kappa: float = 0.0
    penalty_init: float = 1.0
    penalty_bsearch_steps: int = 6
    max_penalty_doublings: int = 12
    hinge_variant: HingeVariant = HingeVariant.MAX_AS_WRITTEN
    seed: int = 0
    debug: bool = False

    def __post_init__(self):
        object.__setattr__(self, "hinge_variant", HingeVariant(self.hinge_variant))
        checks = [("epsilon", self.epsilon >= 0), ("step_size", self.step_size > 0),
                  ("max_iters", self.max_iters >= 1), ("kappa", self.kappa >= 0),
                  ("penalty_init", self.penalty_init > 0),
                  ("penalty_bsearch_steps", self.penalty_bsearch_steps >= 0),
                  ("max_penalty_doublings", self.max_penalty_doublings >= 0)]
        for name, ok in checks:
            if not ok:
                raise ConfigError(f"attack.{name}: invalid value {getattr(self, name)!r}")

    def replace(self, **changes) -> AttackConfig:
        fields = {k: getattr(self, k) for k in self.__dataclass_fields__}
        fields.update(changes)
        return AttackConfig(**fields)


@dataclass(frozen=True, eq=False)
class PerturbationResult:
    delta: np.ndarray
    norm: float
    success: bool
    dist_to_source_centroid: float
    dist_to_target_centroid: float | None
    iterations_used: int
    source_group: Group
    source_identity: int
    target_identity: int | None = None
    hinge: float | None = None
    scenario: str = ""
    epsilon: float = 0.0
    kappa: float = 0.0
    flipped_group: bool | None = None


def _centroid_arrays(centroids: Mapping[int, np.ndarray], target: int):
    if target not in centroids:
        raise KeyError(f"target identity {target} has no centroid")
    others = [np.asarray(c, dtype=float) for i, c in sorted(centroids.items()) if i != target]
    if not others:
        raise ConfigError("targeted attack needs at least one non-target centroid")
    return np.asarray(centroids[target], dtype=float), np.array(others)


def hinge_loss_G(e, target_centroid, other_centroids, kappa: float,
                 variant: HingeVariant | str = HingeVariant.MAX_AS_WRITTEN) -> float:
    """``max(0, kappa + |e - c_t| - ref)`` with ``ref`` the max (as written) or min
    distance to the non-target centroids."""
    others = np.atleast_2d(np.asarray(other_centroids, dtype=float))
    if others.shape[0] == 0:
        raise ConfigError("hinge needs at least one non-target centroid")
    e = np.asarray(e, dtype=float)
    d_t = float(np.linalg.norm(e - np.asarray(target_centroid, dtype=float)))
    d_o = np.linalg.norm(others - e, axis=1)
    ref = d_o.max() if HingeVariant(variant) is HingeVariant.MAX_AS_WRITTEN else d_o.min()
    return max(0.0, kappa + d_t - float(ref))


def _hinge_raw_and_grad(embedder, x, c_t, others, kappa, variant):
    """Unclipped hinge value and its input gradient (subgradient at ties/kinks)."""
    e = embedder.embed(x)
    diff_t = e - c_t
    d_t = float(np.linalg.norm(diff_t))
    d_o = np.linalg.norm(others - e, axis=1)
    j = int(np.argmax(d_o) if variant is HingeVariant.MAX_AS_WRITTEN else np.argmin(d_o))
    raw = kappa + d_t - float(d_o[j])
    u = np.zeros_like(e)
    if d_t > 0:
        u += diff_t / d_t
    if d_o[j] > 0:
        u -= (e - others[j]) / d_o[j]
    return raw, embedder.vjp(x, u), e


def _project_ball(delta, eps):
    n = float(np.linalg.norm(delta))
    return delta if n <= eps else delta * (eps / n)


def untargeted_pgd(embedder, x, source_centroid, config: AttackConfig, *, source_group: Group = Group.A,
                   source_identity: int = -1) -> PerturbationResult:
    """Normalized-gradient ascent on ``|psi(x + delta) - c_source|`` inside the epsilon-ball.

    Returns the best iterate seen. If the gradient vanishes (e.g. the image
    sits exactly on its centroid) a seeded random direction is used.
    """
    x = np.asarray(x, dtype=float)
    c = np.asarray(source_centroid, dtype=float)
    eps = config.epsilon
    dist = lambda dl: float(np.linalg.norm(embedder.embed(x + dl) - c))
    delta = np.zeros_like(x)
    best_delta, best = delta, dist(delta)
    iters = 0
    if eps > 0:
        stream = Stream(config.seed).child("pgd")
        for it in range(config.max_iters):
            e = embedder.embed(x + delta)
            diff = e - c
            n = float(np.linalg.norm(diff))
            if n > 0:
                g = embedder.vjp(x + delta, diff / n)
            else:
                g = stream.child(it).normals(x.shape)
            if not np.all(np.isfinite(g)):
                raise NumericError(f"untargeted PGD: non-finite gradient at iteration {it}")
            gn = float(np.linalg.norm(g))
            if gn == 0:
                g = stream.child("flat", it).normals(x.shape)
                gn = float(np.linalg.norm(g))
            delta = _project_ball(delta + config.step_size * g / gn, eps)
            if config.debug and np.linalg.norm(delta) > eps * (1 + 1e-12) + 1e-15:
                raise AssertionError("PGD iterate left the epsilon-ball")
            iters = it + 1
            val = dist(delta)
            if val > best:
                best, best_delta = val, delta
    return PerturbationResult(best_delta, float(np.linalg.norm(best_delta)), False, best, None, iters,
                              Group(source_group), int(source_identity), epsilon=eps, kappa=config.kappa)


def _descend(embedder, x, c_t, others, kappa, variant, penalty, config, start):
    """Adam on ``|delta|^2 + penalty * max(0, G)``; returns the smallest feasible iterate."""
    eps = config.epsilon
    delta = start.copy()
    m = np.zeros_like(delta)
    v = np.zeros_like(delta)
    b1, b2, tiny = 0.9, 0.999, 1e-12
    best = None
    last_it = 0
    for it in range(1, config.max_iters + 1):
        raw, g_h, _ = _hinge_raw_and_grad(embedder, x + delta, c_t, others, kappa, variant)
        if not math.isfinite(raw) or not np.all(np.isfinite(g_h)):
            raise NumericError(f"targeted CW: non-finite loss at iteration {it}")
        norm = float(np.linalg.norm(delta))
        if raw <= 0 and (best is None or norm < best[1]):
            best = (delta.copy(), norm)
        grad = 2.0 * delta + (penalty * g_h if raw > 0 else 0.0)
        m = b1 * m + (1 - b1) * grad
        v = b2 * v + (1 - b2) * grad * grad
        mh = m / (1 - b1 ** it)
        vh = v / (1 - b2 ** it)
        delta = _project_ball(delta - config.step_size * mh / (np.sqrt(vh) + tiny), eps)
        last_it = it
    raw, _, _ = _hinge_raw_and_grad(embedder, x + delta, c_t, others, kappa, variant)
    norm = float(np.linalg.norm(delta))
    if raw <= 0 and (best is None or norm < best[1]):
        best = (delta.copy(), norm)
    return best, delta, last_it


def _shrink(embedder, x, c_t, others, kappa, variant, delta, steps: int = 60):
    """Bisect the scale s in [0, 1] for the smallest feasible ``s * delta``."""
    lo, hi = 0.0, 1.0
    feasible = lambda s: _hinge_raw_and_grad(embedder, x + s * delta, c_t, others, kappa, variant)[0] <= 0
    if feasible(0.0):
        return np.zeros_like(delta)
    for _ in range(steps):
        mid = 0.5 * (lo + hi)
        if feasible(mid):
            hi = mid
        else:
            lo = mid
    return hi * delta


def targeted_cw(embedder, x, target_identity: int, centroids: Mapping[int, np.ndarray],
                config: AttackConfig, *, source_centroid=None, source_group: Group = Group.A,
                source_identity: int = -1) -> PerturbationResult:
    """Minimum-norm targeted perturbation under a penalty on the hinge G.

    Outer loop: the penalty starts at ``penalty_init`` and doubles until a
    feasible perturbation is found, then ``penalty_bsearch_steps`` rounds of
    bisection look for a smaller one. Each feasible candidate is shrunk
    radially to the hinge boundary.
    """
    x = np.asarray(x, dtype=float)
    c_t, others = _centroid_arrays(centroids, target_identity)
    kappa, variant, eps = config.kappa, config.hinge_variant, config.epsilon
    zero = np.zeros_like(x)
    raw0, _, _ = _hinge_raw_and_grad(embedder, x, c_t, others, kappa, variant)
    best_delta, best_norm, total_iters = None, math.inf, 0
    attempt = zero
    if raw0 <= 0:
        best_delta, best_norm = zero, 0.0
    elif eps > 0:
        def attempt_at(penalty):
            nonlocal best_delta, best_norm, total_iters, attempt
            found, last, used = _descend(embedder, x, c_t, others, kappa, variant, penalty, config, zero)
            total_iters += used
            if found is None:
                attempt = last
                return False
            cand = _shrink(embedder, x, c_t, others, kappa, variant, found[0])
            cn = float(np.linalg.norm(cand))
            if cn < best_norm:
                best_delta, best_norm = cand, cn
            return True

        lo, hi, penalty = 0.0, None, config.penalty_init
        for _ in range(config.max_penalty_doublings + 1):
            if attempt_at(penalty):
                hi = penalty
                break
            lo, penalty = penalty, 2.0 * penalty
        if hi is not None:
            for _ in range(config.penalty_bsearch_steps):
                penalty = 0.5 * (lo + hi) if lo > 0 else 0.5 * hi
                if attempt_at(penalty):
                    hi = penalty
                else:
                    lo = penalty
    success = best_delta is not None
    delta = best_delta if success else attempt
    e = embedder.embed(x + delta)
    d_t = float(np.linalg.norm(e - c_t))
    d_s = float(np.linalg.norm(e - np.asarray(source_centroid))) if source_centroid is not None else math.nan
    h = hinge_loss_G(e, c_t, others, kappa, variant)
    return PerturbationResult(delta, float(np.linalg.norm(delta)), success, d_s, d_t, total_iters,
                              Group(source_group), int(source_identity), int(target_identity), h,
                              epsilon=eps, kappa=kappa)


def audit_targeted(result: PerturbationResult, embedder, x, centroids, config: AttackConfig) -> bool:
    """Recompute G and the norm from scratch; True iff a claimed success holds up."""
    if not result.success:
        return True
    c_t, others = _centroid_arrays(centroids, result.target_identity)
    e = embedder.embed(np.asarray(x, dtype=float) + result.delta)
    g = hinge_loss_G(e, c_t, others, config.kappa, config.hinge_variant)
    return g <= AUDIT_TOL and float(np.linalg.norm(result.delta)) <= config.epsilon + 1e-9


def success_curve(results: Sequence[PerturbationResult], taus: Sequence[float],
                  mode: AttackMode | str) -> list[tuple[str, float, float, int]]:
    """Rows of ``(group, tau, success_rate, n)`` for each source group present and for ``all``.

    Targeted success at tau: distance to the target centroid strictly below
    tau. Untargeted success: distance to the source centroid at least tau.
    """
    mode = AttackMode(mode)
    if not results:
        raise InsufficientDataError("success_curve needs at least one result")
    if mode is AttackMode.TARGETED and any(r.dist_to_target_centroid is None for r in results):
        raise ConfigError("targeted success curve needs results with target distances")
    if mode is AttackMode.TARGETED:
        dist = np.array([r.dist_to_target_centroid for r in results], dtype=float)
    else:
        dist = np.array([r.dist_to_source_centroid for r in results], dtype=float)
    groups = np.array([Group(r.source_group).value for r in results])
    rows = []
    for g in ["all"] + [gr.value for gr in GROUPS if np.any(groups == gr.value)]:
        sel = dist if g == "all" else dist[groups == g]
        for tau in taus:
            hit = sel < tau if mode is AttackMode.TARGETED else sel >= tau
            rows.append((g, float(tau), float(np.mean(hit)), int(sel.size)))
    return rows


@dataclass(frozen=True)
class AttackPair:
    source_image: int  # row in dataset.x
    target_identity: int  # global identity label


def pair_sampler(dataset: SyntheticDataset, scenario: PairScenario | str, n_sources: int,
                 n_targets_per_source: int, seed: int = 0) -> list[AttackPair]:
    """Source images drawn uniformly; each gets distinct target identities from
    its own group (``same_group``) or the other group (``different_group``)."""
    scenario = PairScenario(scenario)
    stream = Stream(seed).child("pair_sampler", scenario.value)
    gen = stream.generator()
    labels_by_group = {g.code: np.flatnonzero(dataset.identity_group == g.code) for g in GROUPS}
    image_groups = dataset.image_group
    eligible = []
    for g in GROUPS:
        pool_group = g.code if scenario is PairScenario.SAME_GROUP else g.other.code
        pool = len(labels_by_group[pool_group]) - (1 if scenario is PairScenario.SAME_GROUP else 0)
        if pool >= n_targets_per_source:
            eligible.append(np.flatnonzero(image_groups == g.code))
    if not eligible:
        raise InsufficientDataError(f"not enough identities for {n_targets_per_source} "
                                    f"{scenario.value} targets per source")
    eligible = np.sort(np.concatenate(eligible))
    sources = gen.choice(eligible, size=n_sources, replace=n_sources > len(eligible))
    pairs = []
    for s in sources:
        s = int(s)
        g = int(image_groups[s])
        own = int(dataset.image_label[s])
        pool_group = g if scenario is PairScenario.SAME_GROUP else 1 - g
        pool = labels_by_group[pool_group]
        pool = pool[pool != own]
        for t in gen.choice(pool, size=n_targets_per_source, replace=False):
            pairs.append(AttackPair(s, int(t)))
    return pairs


RESULTS_HEADER = ["source_group", "source_identity", "target_identity", "scenario", "epsilon", "kappa",
                  "norm", "success", "dist_source", "dist_target", "iters"]


def write_results_csv(path: str | Path, results: Sequence[PerturbationResult]) -> Path:
    return write_csv(path, RESULTS_HEADER,
                     ([r.source_group.value, r.source_identity, r.target_identity, r.scenario, r.epsilon,
                       r.kappa, r.norm, r.success, r.dist_to_source_centroid, r.dist_to_target_centroid,
                       r.iterations_used] for r in results))


def run_targeted(embedder, dataset: SyntheticDataset, pairs: Sequence[AttackPair],
                 centroids: Mapping[int, np.ndarray], config: AttackConfig, scenario: str = "",
                 executor: Executor | None = None) -> list[PerturbationResult]:
    """Attack every pair; per-pair seeds derive from the master seed and pair index."""

    def one(args):
        idx, pair = args
        lab = int(dataset.image_label[pair.source_image])
        cfg = config.replace(seed=_sub_seed(config.seed, "pair", idx))
        r = targeted_cw(embedder, dataset.x[pair.source_image], pair.target_identity, centroids, cfg,
                        source_centroid=centroids[lab], source_group=dataset.group_of_label(lab),
                        source_identity=lab)
        return _with(r, scenario=scenario, epsilon=config.epsilon, kappa=config.kappa)

    jobs = list(enumerate(pairs))
    return [one(j) for j in jobs] if executor is None else list(executor.map(one, jobs))


def run_untargeted(embedder, dataset: SyntheticDataset, sources: Sequence[int],
                   centroids: Mapping[int, np.ndarray], config: AttackConfig,
                   executor: Executor | None = None) -> list[PerturbationResult]:
    def one(args):
        idx, s = args
        lab = int(dataset.image_label[s])
        cfg = config.replace(seed=_sub_seed(config.seed, "source", idx))
        r = untargeted_pgd(embedder, dataset.x[s], centroids[lab], cfg,
                           source_group=dataset.group_of_label(lab), source_identity=lab)
        return _with(r, scenario="untargeted")

    jobs = list(enumerate(sources))
    return [one(j) for j in jobs] if executor is None else list(executor.map(one, jobs))


def _sub_seed(seed: int, *keys) -> int:
    return int(Stream(seed).child(*keys).generator().integers(0, 2 ** 63 - 1))


def _with(r: PerturbationResult, **changes) -> PerturbationResult:
    fields = {k: getattr(r, k) for k in r.__dataclass_fields__}
    fields.update(changes)
    return PerturbationResult(**fields)
