"""Closed-form perturbation bounds for the 1-D PCA likelihood comparison and
a grid-scan oracle that audits them.

Notation: ``a = psi(x)``, ``b = psi`` applied to the unit direction from x
towards ``mu_b`` (linear part only), ``p = psi(mu_b)``. Moving along that
direction by ``eta`` gives the embedded point ``a + eta * b``.

Two closed forms are available:

* ``printed`` evaluates the closed-form endpoint expressions verbatim,
  including the differing sign in front of the square-root term.
* ``derived`` is the exact root pair of
  ``(v + p)^2 - gamma (v - p)^2 = 0`` with ``v = a + eta b``.
"""
from __future__ import annotations

import enum
import math
from concurrent.futures import Executor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .csvio import write_csv
from .errors import ConfigError, SingularConfigurationError
from .linalg import PcaEmbedder, pca_from_covariance
from .rng import Stream
from .synthetic import Group, HierarchicalGaussianParams, group_log_likelihood, pushforward


class BoundForm(str, enum.Enum):
    PRINTED = "printed"
    DERIVED = "derived"


@dataclass(frozen=True)
class BoundInputs:
    a: float
    b: float
    gamma: float
    psi_mu_b: float

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise SingularConfigurationError(f"bound needs gamma in (0, 1), got {self.gamma}")
        if self.b == 0:
            raise SingularConfigurationError("bound needs b != 0")

    def negated(self) -> BoundInputs:
        return BoundInputs(-self.a, -self.b, self.gamma, -self.psi_mu_b)


@dataclass(frozen=True)
class EtaInterval:
    lower: float
    upper: float

    @property
    def empty(self) -> bool:
        return not self.lower <= self.upper

    def contains(self, eta: float) -> bool:
        return self.lower <= eta <= self.upper


def _printed_endpoint(inp: BoundInputs, sqrt_sign: float) -> float:
    a, b, g, p = inp.a, inp.b, inp.gamma, inp.psi_mu_b
    root = math.sqrt(a * a * g / (b * b * (g - 1.0) ** 2))
    return (sqrt_sign * 2.0 * b * (g - 1.0) * root + a * g + a + p * (1.0 - g)) / (b * (g - 1.0))


def _derived_roots(inp: BoundInputs) -> tuple[float, float]:
    a, b, g, p = inp.a, inp.b, inp.gamma, inp.psi_mu_b
    s = math.sqrt(g)
    den = b * (g - 1.0)
    r1 = (-2.0 * p * s + p * (1.0 + g) + a * (1.0 - g)) / den
    r2 = (2.0 * p * s + p * (1.0 + g) + a * (1.0 - g)) / den
    return min(r1, r2), max(r1, r2)


def eta_interval(inputs: BoundInputs, form: BoundForm | str = BoundForm.PRINTED) -> EtaInterval:
    """Interval of eta solving the sufficient likelihood-ratio inequality.

    ``printed``: lower uses ``+2b(1-gamma)`` and upper ``+2b(gamma-1)`` in front
    of the square root; the two values are ordered before returning.
    """
    if BoundForm(form) is BoundForm.DERIVED:
        return EtaInterval(*_derived_roots(inputs))
    lo = _printed_endpoint(inputs, -1.0)  # 2b(1-g) = -2b(g-1)
    hi = _printed_endpoint(inputs, +1.0)
    return EtaInterval(min(lo, hi), max(lo, hi))


def epsilon_infeasibility_bound(inputs: BoundInputs, form: BoundForm | str = BoundForm.PRINTED) -> float:
    """Budget below which moving x towards group b cannot flip the 1-D comparison.

    ``printed`` is ``max(0, upper-endpoint expression)`` verbatim.
    ``derived`` is the upper root when ``eta = 0`` satisfies the inequality,
    else 0.
    """
    if BoundForm(form) is BoundForm.DERIVED:
        lo, hi = _derived_roots(inputs)
        return max(0.0, hi) if lo <= 0.0 <= hi else 0.0
    return max(0.0, _printed_endpoint(inputs, +1.0))


def log_ratio_bound(inputs: BoundInputs, eta) -> np.ndarray:
    """Log of the right-hand side of the sufficient inequality at ``eta``;
    roots of the inequality are zeros of this function."""
    v = inputs.a + np.asarray(eta, dtype=float) * inputs.b
    p = inputs.psi_mu_b
    return 0.5 * (inputs.gamma * (v - p) ** 2 - (v + p) ** 2)


def solve_inequality_roots(inputs: BoundInputs) -> tuple[float, float] | None:
    """Numeric roots of the sufficient inequality's quadratic via the companion matrix,
    each polished with a few Newton steps. None when the roots are complex."""
    a, b, g, p = inputs.a, inputs.b, inputs.gamma, inputs.psi_mu_b
    coeffs = [b * b * (1.0 - g), 2.0 * b * ((a + p) - g * (a - p)), (a + p) ** 2 - g * (a - p) ** 2]
    roots = np.roots(coeffs)
    if np.any(np.abs(roots.imag) > 1e-12 * np.maximum(1.0, np.abs(roots.real))):
        return None
    out = []
    for r in np.sort(roots.real):
        for _ in range(4):
            f = np.polyval(coeffs, r)
            df = np.polyval(np.polyder(coeffs), r)
            if df == 0:
                break
            r = r - f / df
        out.append(float(r))
    return out[0], out[1]


def bound_inputs_from(x, params: HierarchicalGaussianParams, embedder: PcaEmbedder) -> BoundInputs:
    x = np.asarray(x, dtype=float)
    mu_b = params.mean(Group.B)
    gap = mu_b - x
    n = float(np.linalg.norm(gap))
    if n == 0:
        raise SingularConfigurationError("x coincides with mu_b; direction undefined")
    if embedder.k != 1:
        raise ConfigError("bounds are defined for a 1-D embedder")
    q = embedder.components[:, 0]
    return BoundInputs(float(embedder.embed(x)[0]), float(q @ gap / n), params.gamma,
                       float(embedder.embed(mu_b)[0]))


def _check_oracle_preconditions(params, embedder, image_noise):
    if params.gamma > 1:
        raise ConfigError("likelihood oracle assumes gamma <= 1")
    kw = dict(image_noise=image_noise)
    pa = embedder.embed(params.mean(Group.A))
    pb = embedder.embed(params.mean(Group.B))
    if not (group_log_likelihood(pa, params, Group.A, embedder, **kw)
            > group_log_likelihood(pa, params, Group.B, embedder, **kw)):
        raise ConfigError("density ordering p_a[mu_a] > p_b[mu_a] fails for these params")
    if not (group_log_likelihood(pb, params, Group.B, embedder, **kw)
            > group_log_likelihood(pb, params, Group.A, embedder, **kw)):
        raise ConfigError("density ordering p_b[mu_b] > p_a[mu_b] fails for these params")


def likelihood_ratio_oracle(x, params: HierarchicalGaussianParams, embedder: PcaEmbedder,
                            max_eta: float, resolution: float = 1e-3, *, image_noise: bool = False,
                            with_prior: bool = False) -> float | None:
    """Smallest grid eta in ``[0, max_eta]`` where the group-b density of
    ``psi(x + eta * u)`` strictly exceeds group a (u: unit vector x -> mu_b)."""
    if resolution <= 0:
        raise ConfigError("resolution must be positive")
    inp_x = np.asarray(x, dtype=float)
    gap = params.mean(Group.B) - inp_x
    n = float(np.linalg.norm(gap))
    if n == 0:
        raise SingularConfigurationError("x coincides with mu_b; direction undefined")
    _check_oracle_preconditions(params, embedder, image_noise)
    q = embedder.components[:, 0]
    a = float(embedder.embed(inp_x)[0])
    b = float(q @ gap / n)
    etas = np.arange(0, int(math.floor(max_eta / resolution + 1e-9)) + 1) * resolution
    v = a + etas * b
    ll = {}
    for g in (Group.A, Group.B):
        mean, cov = pushforward(params, g, embedder, image_noise)
        var = float(cov[0, 0])
        ll[g] = -0.5 * (math.log(2 * math.pi * var) + (v - mean[0]) ** 2 / var)
        if with_prior:
            ll[g] = ll[g] + math.log(params.prior(g))
    hit = np.flatnonzero(ll[Group.B] > ll[Group.A])
    return float(etas[hit[0]]) if hit.size else None


@dataclass(frozen=True)
class AuditConfig:
    params: HierarchicalGaussianParams
    x: np.ndarray = field(compare=False)


@dataclass(frozen=True)
class AuditRow:
    config_id: int
    gamma: float
    a: float
    b: float
    psi_mu_b: float
    bound: float
    oracle_crossing: float | None
    slack: float | None
    violation: bool
    root_residual: float | None  # max |log-ratio| at the eta_interval endpoints


@dataclass
class AuditReport:
    form: BoundForm
    resolution: float
    rows: list[AuditRow]

    @property
    def violations(self) -> int:
        return sum(r.violation for r in self.rows)

    @property
    def max_root_residual(self) -> float:
        vals = [r.root_residual for r in self.rows if r.root_residual is not None]
        return max(vals) if vals else 0.0

    def slack_summary(self) -> dict[str, float]:
        s = np.array([r.slack for r in self.rows if r.slack is not None], dtype=float)
        if s.size == 0:
            return {}
        return {"n": float(s.size), "min": float(s.min()), "mean": float(s.mean()),
                "median": float(np.median(s)), "max": float(s.max())}

    def to_csv(self, path: str | Path) -> Path:
        header = ["config_id", "gamma", "a", "b", "psi_mu_b", "bound", "oracle_crossing", "slack", "violation"]
        return write_csv(path, header, ([r.config_id, r.gamma, r.a, r.b, r.psi_mu_b, r.bound,
                                         r.oracle_crossing, r.slack, r.violation] for r in self.rows))


def audit_embedder(params: HierarchicalGaussianParams) -> PcaEmbedder:
    """1-D PCA of the population image covariance, centered at the population mean."""
    return pca_from_covariance(params.population_covariance(), 1, params.population_mean())


def audit_configurations(n: int, seed: int, gamma_range=(0.1, 0.9), d_range=(2, 6),
                         beta: float = 1e-3, max_tries: int = 1000) -> list[AuditConfig]:
    """Random 1-D audit configurations.

    ``mu_a = e_1``, the first diagonal entry of ``Sigma_b`` is ``1/gamma`` (unit
    group-a variance along the leading component) and the remaining entries
    are small enough that the leading component stays ``e_1``. ``x`` is an
    image of a group-a identity that the 1-D comparison still assigns to a.
    """
    stream = Stream(seed).child("audit_configurations")
    out = []
    for i in range(n):
        sub = stream.child(i)
        u = sub.child("shape").uniform(3)
        gamma = gamma_range[0] + (gamma_range[1] - gamma_range[0]) * u[0]
        d = int(d_range[0] + math.floor(u[1] * (d_range[1] - d_range[0] + 1)))
        rest = 0.05 + 0.25 * sub.child("rest").uniform(d - 1)
        mu = np.zeros(d); mu[0] = 1.0
        params = HierarchicalGaussianParams(d=d, gamma=gamma, beta=beta, alpha=0.5, mu_a=mu,
                                            sigma_b_diag=np.concatenate([[1.0 / gamma], rest]),
                                            n_identities_a=1, n_identities_b=1, m=1, seed=seed)
        emb = audit_embedder(params)
        for t in range(max_tries):
            z = sub.child("x", t).normals((2, d))
            x = params.mean(Group.A) + np.sqrt(params.sigma_diag(Group.A)) * z[0] + math.sqrt(beta) * z[1]
            v = emb.embed(x)
            kw = dict(image_noise=False)
            if group_log_likelihood(v, params, Group.A, emb, **kw) >= \
                    group_log_likelihood(v, params, Group.B, emb, **kw):
                break
        else:
            raise ConfigError(f"configuration {i}: could not draw a group-a image")
        out.append(AuditConfig(params, x))
    return out


def audit_bound(configs: Sequence[AuditConfig], resolution: float = 1e-3, max_eta: float = 20.0,
                form: BoundForm | str = BoundForm.PRINTED, executor: Executor | None = None) -> AuditReport:
    """Compare the closed-form bound against the oracle crossing on every configuration.

    A violation is an oracle crossing more than one grid step below the bound;
    no crossing within ``max_eta`` is not a violation.
    """
    form = BoundForm(form)

    def one(item):
        i, cfg = item
        emb = audit_embedder(cfg.params)
        inp = bound_inputs_from(cfg.x, cfg.params, emb)
        bound = epsilon_infeasibility_bound(inp, form)
        cross = likelihood_ratio_oracle(cfg.x, cfg.params, emb, max_eta, resolution)
        slack = None if cross is None else cross - bound
        violation = cross is not None and cross < bound - resolution
        iv = eta_interval(inp, form)
        resid = float(np.max(np.abs(log_ratio_bound(inp, [iv.lower, iv.upper]))))
        return AuditRow(i, inp.gamma, inp.a, inp.b, inp.psi_mu_b, bound, cross, slack, violation, resid)

    items = list(enumerate(configs))
    rows = [one(it) for it in items] if executor is None else list(executor.map(one, items))
    return AuditReport(form, resolution, rows)
