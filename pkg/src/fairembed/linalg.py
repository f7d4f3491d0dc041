"""Dense symmetric eigensolver, PCA embedding and the projection-error measures
built on it."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .csvio import read_csv, write_csv
from .errors import ConfigError, ConvergenceError, InsufficientDataError
from .synthetic import Group, HierarchicalGaussianParams, SyntheticDataset

SYMMETRY_TOL = 1e-10
JACOBI_TOL = 1e-12
MAX_SWEEPS = 100


class ProjectionMode(str, enum.Enum):
    AS_WRITTEN = "as_written"
    ORTHOGONAL = "orthogonal"


@dataclass(frozen=True, eq=False)
class SymEigen:
    eigenvalues: np.ndarray  # descending
    eigenvectors: np.ndarray  # columns paired with eigenvalues

    def reconstruct(self) -> np.ndarray:
        q = self.eigenvectors
        return (q * self.eigenvalues) @ q.T


def sample_covariance(images) -> tuple[np.ndarray, np.ndarray]:
    """Unbiased (N-1) covariance about the sample mean; returns ``(cov, mean)``."""
    x = np.asarray(images, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2:
        raise InsufficientDataError("sample covariance needs at least 2 samples")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (x.shape[0] - 1)
    # symmetric by construction, not just up to rounding
    cov = np.triu(cov) + np.triu(cov, 1).T
    return cov, mean


def canonicalize_signs(vectors: np.ndarray) -> np.ndarray:
    """Flip each column so its largest-magnitude entry is positive."""
    v = np.array(vectors, dtype=float, copy=True)
    if v.size == 0:
        return v
    idx = np.argmax(np.abs(v), axis=0)
    signs = np.sign(v[idx, np.arange(v.shape[1])])
    signs[signs == 0] = 1.0
    return v * signs


def sym_eig(matrix, tol: float = JACOBI_TOL, max_sweeps: int = MAX_SWEEPS) -> SymEigen:
    """Cyclic Jacobi eigendecomposition of a symmetric matrix.

    Sweeps until every off-diagonal magnitude is below ``tol`` times the
    Frobenius norm. Eigenpairs come back sorted by descending eigenvalue
    (stable, so tied eigenvalues keep sweep order) with canonical signs.
    """
    a = np.array(matrix, dtype=float, copy=True)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    asym = np.max(np.abs(a - a.T)) if a.size else 0.0
    if asym > SYMMETRY_TOL * max(1.0, np.max(np.abs(a), initial=0.0)):
        raise ValueError(f"matrix is not symmetric (max asymmetry {asym:.3g})")
    a = 0.5 * (a + a.T)
    n = a.shape[0]
    v = np.eye(n)
    fro = np.linalg.norm(a)
    threshold = tol * fro
    converged = fro == 0.0 or n < 2
    for _ in range(max_sweeps):
        if converged:
            break
        off = np.abs(a - np.diag(np.diag(a)))
        if off.max() < threshold:
            converged = True
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                col_p, col_q = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p, row_q = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    if not converged:
        off = np.abs(a - np.diag(np.diag(a))).max()
        if off >= threshold:
            raise ConvergenceError(f"Jacobi did not converge in {max_sweeps} sweeps", residual=float(off))
    w = np.diag(a).copy()
    order = np.argsort(-w, kind="stable")
    return SymEigen(w[order], canonicalize_signs(v[:, order]))


@dataclass(frozen=True, eq=False)
class PcaEmbedder:
    """``psi(x) = Q_k^T (x - mean)``."""

    mean: np.ndarray
    components: np.ndarray  # (d, k), orthonormal columns
    eigenvalues: np.ndarray | None = None

    @property
    def k(self) -> int:
        return self.components.shape[1]

    @property
    def input_dim(self) -> int:
        return self.components.shape[0]

    @property
    def output_dim(self) -> int:
        return self.k

    def embed(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.input_dim:
            raise ValueError(f"input has dimension {x.shape[-1]}, embedder expects {self.input_dim}")
        return (x - self.mean) @ self.components

    def vjp(self, x, u) -> np.ndarray:
        """Gradient of ``<psi(x), u>`` with respect to x (independent of x)."""
        return pca_jacobian_transpose_apply(self, u)

    def to_csv(self, path: str | Path) -> Path:
        d = self.input_dim
        rows = [["mean", *self.mean.tolist()]]
        rows += [[f"component_{i}", *self.components[:, i].tolist()] for i in range(self.k)]
        return write_csv(path, ["row"] + [f"c_{j}" for j in range(d)], rows)

    @classmethod
    def from_csv(cls, path: str | Path) -> PcaEmbedder:
        _, rows = read_csv(path)
        mean = np.array([float(v) for v in rows[0][1:]])
        comps = np.array([[float(v) for v in r[1:]] for r in rows[1:]]).T
        return cls(mean, comps.reshape(len(mean), len(rows) - 1))


def pca_from_covariance(cov, k: int, mean=None) -> PcaEmbedder:
    cov = np.asarray(cov, dtype=float)
    d = cov.shape[0]
    if not 1 <= k <= d:
        raise ConfigError(f"PCA needs 1 <= k <= d, got k={k}, d={d}")
    eig = sym_eig(cov)
    mean = np.zeros(d) if mean is None else np.asarray(mean, dtype=float)
    return PcaEmbedder(mean, eig.eigenvectors[:, :k].copy(), eig.eigenvalues[:k].copy())


def fit_pca(data, k: int) -> PcaEmbedder:
    """Fit a k-component PCA on centered data (a dataset or an (N, d) array)."""
    x = data.x if isinstance(data, SyntheticDataset) else np.asarray(data, dtype=float)
    if x.ndim != 2:
        raise ValueError("fit_pca expects an (N, d) array of samples")
    if not 1 <= k <= x.shape[1]:
        raise ConfigError(f"PCA needs 1 <= k <= d, got k={k}, d={x.shape[1]}")
    cov, mean = sample_covariance(x)
    return pca_from_covariance(cov, k, mean)


def pca_embed(embedder: PcaEmbedder, x) -> np.ndarray:
    return embedder.embed(x)


def pca_jacobian_transpose_apply(embedder: PcaEmbedder, u) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if u.shape[-1] != embedder.k:
        raise ValueError(f"cotangent has dimension {u.shape[-1]}, embedder has k={embedder.k}")
    return u @ embedder.components.T


def relative_projection_distance(x, eig: SymEigen, params: HierarchicalGaussianParams,
                                 group: Group, k: int,
                                 mode: ProjectionMode | str = ProjectionMode.AS_WRITTEN):
    """Error of the k leading eigenvectors at reconstructing ``x``, normalized by
    the trace of the group's identity covariance.

    ``as_written`` scales each projection coefficient by ``1/(|q_i| |x|)``;
    ``orthogonal`` is the plain orthogonal projection. Accepts one point or
    an (N, d) batch.
    """
    mode = ProjectionMode(mode)
    x = np.asarray(x, dtype=float)
    q = eig.eigenvectors
    d = q.shape[0]
    if not 0 <= k <= d:
        raise ConfigError(f"need 0 <= k <= d, got k={k}")
    single = x.ndim == 1
    xs = np.atleast_2d(x)
    qk = q[:, :k]
    coef = xs @ qk
    if mode is ProjectionMode.AS_WRITTEN:
        norms = np.linalg.norm(xs, axis=1)
        if np.any(norms == 0):
            raise ValueError("as_written relative projection distance is undefined at x = 0")
        coef = coef / (np.linalg.norm(qk, axis=0)[None, :] * norms[:, None])
    resid = np.linalg.norm(xs - coef @ qk.T, axis=1)
    out = resid / float(np.sum(params.sigma_diag(group)))
    return float(out[0]) if single else out


def covariance_contribution(params: HierarchicalGaussianParams, group: Group, k: int) -> float:
    """``beta`` plus the first k diagonal entries of the group's identity covariance."""
    if not 0 <= k <= params.d:
        raise ConfigError(f"need 0 <= k <= d, got k={k}")
    return params.beta + float(np.sum(params.sigma_diag(group)[:k]))
