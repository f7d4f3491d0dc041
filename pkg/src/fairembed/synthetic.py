"""Two-group hierarchical Gaussian model of identities and images.

Identities of group ``g`` are drawn from ``N(mu_g, Sigma_g)`` with
``mu_b = -mu_a`` and ``Sigma_a = gamma * Sigma_b`` (both diagonal); every
identity then emits exactly ``m`` images from ``N(nu, beta * I)``.
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
from .errors import ConfigError, DegenerateCovarianceError
from .rng import Stream

TIE_TOL = 1e-12


class Group(str, enum.Enum):
    A = "a"
    B = "b"

    @property
    def other(self) -> Group:
        return Group.B if self is Group.A else Group.A

    @property
    def code(self) -> int:
        return 0 if self is Group.A else 1


GROUPS = (Group.A, Group.B)


@dataclass(frozen=True)
class HierarchicalGaussianParams:
    d: int
    gamma: float
    beta: float
    alpha: float
    mu_a: tuple[float, ...]
    sigma_b_diag: tuple[float, ...]
    n_identities_a: int
    n_identities_b: int
    m: int
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mu_a", tuple(float(v) for v in self.mu_a))
        object.__setattr__(self, "sigma_b_diag", tuple(float(v) for v in self.sigma_b_diag))
        errors = []
        if not (isinstance(self.d, (int, np.integer)) and self.d >= 1):
            errors.append(("d", "must be a positive integer"))
        if len(self.mu_a) != self.d:
            errors.append(("mu_a", f"length {len(self.mu_a)} != d={self.d}"))
        elif abs(math.sqrt(math.fsum(v * v for v in self.mu_a)) - 1.0) > 1e-12:
            errors.append(("mu_a", "must have unit l2 norm"))
        if len(self.sigma_b_diag) != self.d:
            errors.append(("sigma_b_diag", f"length {len(self.sigma_b_diag)} != d={self.d}"))
        elif not all(v > 0 and math.isfinite(v) for v in self.sigma_b_diag):
            errors.append(("sigma_b_diag", "entries must be positive"))
        if not (self.gamma > 0 and math.isfinite(self.gamma)):
            errors.append(("gamma", f"must be positive, got {self.gamma}"))
        if not (self.beta > 0 and math.isfinite(self.beta)):
            errors.append(("beta", f"must be positive, got {self.beta}"))
        if not 0 < self.alpha < 1:
            errors.append(("alpha", f"must lie in (0, 1), got {self.alpha}"))
        for name in ("n_identities_a", "n_identities_b"):
            if getattr(self, name) < 0:
                errors.append((name, "must be nonnegative"))
        if self.n_identities_a + self.n_identities_b < 1:
            errors.append(("n_identities_a", "at least one identity is required"))
        if self.m < 1:
            errors.append(("m", "must be >= 1"))
        if not 0 <= self.seed < 2**64:
            errors.append(("seed", "must be a 64-bit unsigned integer"))
        if errors:
            field_name, msg = errors[0]
            raise ConfigError(f"model.{field_name}: {msg}")

    def mean(self, group: Group) -> np.ndarray:
        mu = np.asarray(self.mu_a)
        return mu if Group(group) is Group.A else -mu

    def sigma_diag(self, group: Group) -> np.ndarray:
        s = np.asarray(self.sigma_b_diag)
        return self.gamma * s if Group(group) is Group.A else s

    def n_identities(self, group: Group) -> int:
        return self.n_identities_a if Group(group) is Group.A else self.n_identities_b

    def prior(self, group: Group) -> float:
        return self.alpha if Group(group) is Group.A else 1.0 - self.alpha

    def population_covariance(self) -> np.ndarray:
        """Covariance of a single image drawn from the mixture ``alpha D_a + (1-alpha) D_b``."""
        a = self.alpha
        mu = np.asarray(self.mu_a)
        spread = 4.0 * a * (1.0 - a) * np.outer(mu, mu)
        diag = a * self.sigma_diag(Group.A) + (1 - a) * self.sigma_diag(Group.B) + self.beta
        return spread + np.diag(diag)

    def population_mean(self) -> np.ndarray:
        return (2.0 * self.alpha - 1.0) * np.asarray(self.mu_a)

    def replace(self, **changes) -> HierarchicalGaussianParams:
        fields = {k: getattr(self, k) for k in self.__dataclass_fields__}
        fields.update(changes)
        return HierarchicalGaussianParams(**fields)


@dataclass(frozen=True)
class IdentityRecord:
    group: Group
    identity_index: int
    nu: np.ndarray = field(compare=False)


@dataclass(frozen=True)
class ImageSample:
    group: Group
    identity_index: int
    image_index: int
    x: np.ndarray = field(compare=False)


@dataclass(frozen=True, eq=False)
class SyntheticDataset:
    """Columnar store of identities and images.

    ``image_label`` indexes rows of ``nu`` and is the global identity label
    used by the matching and attack modules.
    """

    params: HierarchicalGaussianParams
    identity_group: np.ndarray  # (n_id,) of 0/1 group codes
    identity_index: np.ndarray  # (n_id,) index within group
    nu: np.ndarray  # (n_id, d)
    image_label: np.ndarray  # (n_img,) row into nu
    image_index: np.ndarray  # (n_img,) in [0, m)
    x: np.ndarray  # (n_img, d)

    def __post_init__(self):
        for arr in (self.identity_group, self.identity_index, self.nu,
                    self.image_label, self.image_index, self.x):
            arr.setflags(write=False)

    @property
    def n_identities(self) -> int:
        return len(self.nu)

    @property
    def n_images(self) -> int:
        return len(self.x)

    @property
    def image_group(self) -> np.ndarray:
        return self.identity_group[self.image_label]

    def group_of_label(self, label: int) -> Group:
        return GROUPS[int(self.identity_group[label])]

    def images_of(self, group: Group) -> np.ndarray:
        return self.x[self.image_group == Group(group).code]

    def identities(self) -> list[IdentityRecord]:
        return [IdentityRecord(GROUPS[g], int(i), nu)
                for g, i, nu in zip(self.identity_group, self.identity_index, self.nu)]

    def images(self) -> list[ImageSample]:
        return [ImageSample(GROUPS[self.identity_group[lab]], int(self.identity_index[lab]), int(j), x)
                for lab, j, x in zip(self.image_label, self.image_index, self.x)]

    def to_csv(self, path: str | Path) -> Path:
        d = self.params.d
        header = ["group", "identity", "image"] + [f"x_{i}" for i in range(d)]
        groups = self.image_group
        rows = ([GROUPS[g].value, int(self.identity_index[lab]), int(j), *xs]
                for g, lab, j, xs in zip(groups, self.image_label, self.image_index, self.x.tolist()))
        return write_csv(path, header, rows)


def _map(executor: Executor | None, fn, items):
    if executor is None:
        return [fn(it) for it in items]
    return list(executor.map(fn, items))


def sample_identities(params: HierarchicalGaussianParams, stream: Stream | None = None,
                      executor: Executor | None = None) -> list[IdentityRecord]:
    """Draw ``nu ~ N(mu_g, Sigma_g)`` for every identity, group a first."""
    stream = Stream(params.seed) if stream is None else stream
    jobs = [(g, i) for g in GROUPS for i in range(params.n_identities(g))]

    def draw(job):
        g, i = job
        z = stream.child("identity", g.code, i).normals(params.d)
        return IdentityRecord(g, i, params.mean(g) + np.sqrt(params.sigma_diag(g)) * z)

    return _map(executor, draw, jobs)


def sample_images(identities: Sequence[IdentityRecord], params: HierarchicalGaussianParams,
                  stream: Stream | None = None, executor: Executor | None = None) -> SyntheticDataset:
    """Draw exactly ``m`` images ``x ~ N(nu, beta I)`` per identity."""
    if len(identities) == 0:
        raise ConfigError("sample_images needs at least one identity")
    stream = Stream(params.seed) if stream is None else stream
    m, d = params.m, params.d
    sd = math.sqrt(params.beta)

    def draw(rec: IdentityRecord):
        z = stream.child("image", rec.group.code, rec.identity_index).normals((m, d))
        return rec.nu + sd * z

    blocks = _map(executor, draw, identities)
    n_id = len(identities)
    return SyntheticDataset(
        params=params,
        identity_group=np.array([r.group.code for r in identities], dtype=np.int8),
        identity_index=np.array([r.identity_index for r in identities], dtype=np.int64),
        nu=np.array([r.nu for r in identities], dtype=float).reshape(n_id, d),
        image_label=np.repeat(np.arange(n_id, dtype=np.int64), m),
        image_index=np.tile(np.arange(m, dtype=np.int64), n_id),
        x=np.concatenate(blocks, axis=0),
    )


def sample_dataset(params: HierarchicalGaussianParams, stream: Stream | None = None,
                   executor: Executor | None = None) -> SyntheticDataset:
    stream = Stream(params.seed) if stream is None else stream
    return sample_images(sample_identities(params, stream, executor), params, stream, executor)


def pushforward(params: HierarchicalGaussianParams, group: Group, basis=None,
                image_noise: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance of group ``g`` images seen through an affine ``basis``."""
    group = Group(group)
    var = params.sigma_diag(group) + (params.beta if image_noise else 0.0)
    mu = params.mean(group)
    if basis is None:
        return mu, np.diag(var)
    comps = basis.components  # (d, k)
    return np.atleast_1d(basis.embed(mu)), comps.T @ (var[:, None] * comps)


def group_log_likelihood(v, params: HierarchicalGaussianParams, group: Group, basis=None, *,
                         image_noise: bool = True, with_prior: bool = False) -> float:
    """Log density of the (projected) group distribution at ``v``.

    ``basis`` is anything with ``components`` (d x p) and ``embed``, such as a
    fitted PCA embedder, or None for the raw space. Set ``image_noise=False``
    to use the identity-level covariance only.
    """
    mean, cov = pushforward(params, group, basis, image_noise)
    v = np.atleast_1d(np.asarray(v, dtype=float))
    if v.shape != mean.shape:
        raise ValueError(f"point has shape {v.shape}, projected space has {mean.shape}")
    if not np.all(np.diag(cov) > 0):
        raise DegenerateCovarianceError(f"pushed-forward covariance of group {Group(group).value} "
                                        "has a non-positive diagonal")
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise DegenerateCovarianceError("pushed-forward covariance is singular") from exc
    r = np.linalg.solve(chol, v - mean)
    p = len(mean)
    ll = -0.5 * (p * math.log(2 * math.pi) + float(r @ r)) - float(np.sum(np.log(np.diag(chol))))
    if with_prior:
        ll += math.log(params.prior(group))
    return ll


def group_margin(v, params, basis=None, *, image_noise: bool = True, with_prior: bool = True) -> float:
    """``log p_a(v) - log p_b(v)``; positive means group a is preferred."""
    kw = dict(image_noise=image_noise, with_prior=with_prior)
    return (group_log_likelihood(v, params, Group.A, basis, **kw)
            - group_log_likelihood(v, params, Group.B, basis, **kw))


def classify_group(v, params, basis=None, *, image_noise: bool = True, with_prior: bool = True) -> Group:
    """Most likely group of ``v``; ties within 1e-12 resolve to group a."""
    margin = group_margin(v, params, basis, image_noise=image_noise, with_prior=with_prior)
    return Group.A if margin > -TIE_TOL else Group.B


def is_tie(v, params, basis=None, **kw) -> bool:
    return abs(group_margin(v, params, basis, **kw)) < TIE_TOL
