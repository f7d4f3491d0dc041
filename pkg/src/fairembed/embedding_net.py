"""Small tanh MLP embedder trained with triplet loss, and an empirical
local-Lipschitz estimator usable with any embedder."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .csvio import read_csv, write_csv
from .errors import ConfigError, InsufficientDataError, NumericError
from .rng import Stream
from .synthetic import SyntheticDataset


class Embedder(Protocol):
    """Anything the attacks can differentiate through."""

    input_dim: int
    output_dim: int

    def embed(self, x) -> np.ndarray: ...

    def vjp(self, x, u) -> np.ndarray: ...


@dataclass(frozen=True, eq=False)
class MlpEmbedder:
    weights: tuple[np.ndarray, ...]  # weights[l] has shape (out, in)
    biases: tuple[np.ndarray, ...]

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(np.asarray(w, dtype=float) for w in self.weights))
        object.__setattr__(self, "biases", tuple(np.asarray(b, dtype=float) for b in self.biases))
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ConfigError("an MLP needs one bias per weight matrix and at least one layer")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ConfigError(f"layer {l}: weight {w.shape} and bias {b.shape} do not conform")
            if l and w.shape[1] != self.weights[l - 1].shape[0]:
                raise ConfigError(f"layer {l} input {w.shape[1]} != previous output {self.weights[l - 1].shape[0]}")

    @property
    def layer_dims(self) -> tuple[int, ...]:
        return (self.weights[0].shape[1],) + tuple(w.shape[0] for w in self.weights)

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def output_dim(self) -> int:
        return self.layer_dims[-1]

    def check_finite(self):
        if not all(np.all(np.isfinite(p)) for p in self.weights + self.biases):
            raise NumericError("MLP has non-finite parameters")

    def _forward(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.input_dim:
            raise ValueError(f"input has dimension {x.shape[-1]}, network expects {self.input_dim}")
        acts = [x]
        h = x
        last = len(self.weights) - 1
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.T + b
            if l < last:
                h = np.tanh(h)
            acts.append(h)
        return acts

    def embed(self, x) -> np.ndarray:
        return self._forward(x)[-1]

    def _backward(self, acts, upstream):
        """Backpropagate ``upstream`` (same leading shape as the output)."""
        g = np.asarray(upstream, dtype=float)
        grads_w, grads_b = [], []
        for l in range(len(self.weights) - 1, -1, -1):
            if l < len(self.weights) - 1:
                g = g * (1.0 - acts[l + 1] ** 2)
            inp = acts[l]
            g2 = g.reshape(-1, g.shape[-1])
            grads_w.append(g2.T @ inp.reshape(-1, inp.shape[-1]))
            grads_b.append(g2.sum(axis=0))
            g = g @ self.weights[l]
        return g, grads_w[::-1], grads_b[::-1]

    def vjp(self, x, u) -> np.ndarray:
        return self._backward(self._forward(x), u)[0]

    def grad(self, x, upstream):
        """``(d/dx, [d/dW_l], [d/db_l])`` of ``<psi(x), upstream>``; batches sum over rows."""
        return self._backward(self._forward(x), upstream)

    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def flat_params(self) -> np.ndarray:
        return np.concatenate([p.ravel() for wb in zip(self.weights, self.biases) for p in wb])

    def with_flat_params(self, theta) -> MlpEmbedder:
        theta = np.asarray(theta, dtype=float)
        ws, bs, pos = [], [], 0
        for w, b in zip(self.weights, self.biases):
            ws.append(theta[pos:pos + w.size].reshape(w.shape)); pos += w.size
            bs.append(theta[pos:pos + b.size].copy()); pos += b.size
        return MlpEmbedder(tuple(ws), tuple(bs))

    def to_csv(self, path: str | Path) -> Path:
        width = max(self.layer_dims) + 3
        rows = []
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            pad = lambda r: r + [""] * (width - len(r))
            rows.append(pad(["dims", l, w.shape[1], w.shape[0]]))
            rows += [pad(["weight", l, i, *row]) for i, row in enumerate(w.tolist())]
            rows.append(pad(["bias", l, 0, *b.tolist()]))
        return write_csv(path, ["kind", "layer", "row"] + [f"v_{j}" for j in range(width - 3)], rows)

    @classmethod
    def from_csv(cls, path: str | Path) -> MlpEmbedder:
        _, rows = read_csv(path)
        ws, bs = [], []
        for row in rows:
            kind, vals = row[0], [float(v) for v in row[3:] if v != ""]
            if kind == "dims":
                ws.append([])
            elif kind == "weight":
                ws[-1].append(vals)
            elif kind == "bias":
                bs.append(np.array(vals))
        return cls(tuple(np.array(w) for w in ws), tuple(bs))


def mlp_forward(net: MlpEmbedder, x) -> np.ndarray:
    net.check_finite()
    return net.embed(x)


def mlp_grad(net: MlpEmbedder, x, upstream):
    """Input gradient and parameter gradients ``(dW list, db list)`` of ``<psi(x), upstream>``."""
    net.check_finite()
    gx, gw, gb = net.grad(x, upstream)
    return gx, (gw, gb)


def init_mlp(layer_dims: Sequence[int], stream: Stream) -> MlpEmbedder:
    """Uniform init in +-1/sqrt(fan_in), one substream per layer."""
    dims = [int(v) for v in layer_dims]
    if len(dims) < 2 or min(dims) < 1:
        raise ConfigError(f"layer_dims must list at least input and output sizes, got {dims}")
    ws, bs = [], []
    for l, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        bound = 1.0 / math.sqrt(fan_in)
        u = stream.child("layer", l).uniform(fan_out * fan_in + fan_out)
        params = bound * (2.0 * u - 1.0)
        ws.append(params[: fan_out * fan_in].reshape(fan_out, fan_in))
        bs.append(params[fan_out * fan_in:])
    return MlpEmbedder(tuple(ws), tuple(bs))


def _triplet_batch(net: MlpEmbedder, anchors, positives, negatives, margin: float):
    """Mean triplet loss over a batch and its parameter gradients."""
    n = len(anchors)
    x = np.concatenate([anchors, positives, negatives], axis=0)
    acts = net._forward(x)
    fa, fp, fn = np.split(acts[-1], 3)
    d_ap = np.sum((fa - fp) ** 2, axis=1)
    d_an = np.sum((fa - fn) ** 2, axis=1)
    raw = d_ap - d_an + margin
    active = raw > 0  # zero subgradient at the kink
    losses = np.where(active, raw, 0.0)
    w = active[:, None] / n
    up_a = 2.0 * (fn - fp) * w
    up_p = -2.0 * (fa - fp) * w
    up_n = 2.0 * (fa - fn) * w
    _, gw, gb = net._backward(acts, np.concatenate([up_a, up_p, up_n], axis=0))
    return float(losses.mean()), gw, gb


def triplet_loss(net: MlpEmbedder, anchor, positive, negative, margin: float):
    """``max(0, |f(a)-f(p)|^2 - |f(a)-f(n)|^2 + margin)`` and its parameter gradients."""
    if margin < 0:
        raise ConfigError("triplet margin must be nonnegative")
    a, p, n = (np.atleast_2d(np.asarray(v, dtype=float)) for v in (anchor, positive, negative))
    loss, gw, gb = _triplet_batch(net, a, p, n, margin)
    return loss, (gw, gb)


@dataclass
class TripletBatch:
    anchor: np.ndarray
    positive: np.ndarray
    negative: np.ndarray


def sample_triplets(labels: np.ndarray, n: int, stream: Stream) -> TripletBatch:
    """Uniform random valid triplets of image indices (no hard mining)."""
    gen = stream.generator()
    order = np.argsort(labels, kind="stable")
    sorted_labels = labels[order]
    starts = np.searchsorted(sorted_labels, sorted_labels, side="left")
    ends = np.searchsorted(sorted_labels, sorted_labels, side="right")
    anchor = gen.integers(0, len(labels), size=n)
    pos_a = np.empty(n, dtype=np.int64)
    inv = np.empty_like(order)
    inv[order] = np.arange(len(order))
    for t, a in enumerate(anchor):
        r = inv[a]
        lo, hi = starts[r], ends[r]
        if hi - lo > 1:
            j = lo + gen.integers(0, hi - lo - 1)
            j += j >= r
        else:
            j = r
        pos_a[t] = order[j]
    negative = np.empty(n, dtype=np.int64)
    for t, a in enumerate(anchor):
        while True:
            c = gen.integers(0, len(labels))
            if labels[c] != labels[a]:
                negative[t] = c
                break
    return TripletBatch(anchor, pos_a, negative)


def train_triplets(dataset: SyntheticDataset, layer_dims: Sequence[int], margin: float = 0.2,
                   step_size: float = 0.05, epochs: int = 20, batch_size: int = 64,
                   seed: int = 0) -> tuple[MlpEmbedder, list[float]]:
    """Plain SGD on the mean triplet loss.

    Returns the trained net and the per-epoch mean loss. An epoch is
    ``ceil(n_images / batch_size)`` batches of freshly sampled triplets.
    """
    if dataset.n_identities < 2:
        raise InsufficientDataError("triplet training needs at least 2 identities")
    if layer_dims[0] != dataset.params.d:
        raise ConfigError(f"first layer width {layer_dims[0]} != data dimension {dataset.params.d}")
    stream = Stream(seed).child("train_triplets")
    net = init_mlp(layer_dims, stream.child("init"))
    labels = dataset.image_label
    steps = math.ceil(dataset.n_images / batch_size)
    history = []
    for epoch in range(epochs):
        total = 0.0
        for step in range(steps):
            tb = sample_triplets(labels, batch_size, stream.child("batch", epoch, step))
            with np.errstate(over="ignore", invalid="ignore"):  # divergence is reported below
                loss, gw, gb = _triplet_batch(net, dataset.x[tb.anchor], dataset.x[tb.positive],
                                              dataset.x[tb.negative], margin)
            if not math.isfinite(loss):
                raise NumericError(f"triplet training diverged at epoch {epoch}, step {step} (loss={loss})")
            with np.errstate(over="ignore", invalid="ignore"):
                net = MlpEmbedder(tuple(w - step_size * g for w, g in zip(net.weights, gw)),
                                  tuple(b - step_size * g for b, g in zip(net.biases, gb)))
            total += loss
        history.append(total / steps)
    net.check_finite()
    return net, history


def empirical_local_lipschitz(embedder: Embedder, x, radius: float, n_samples: int = 32,
                              seed: int = 0, n_directions: int = 8) -> float:
    """Largest observed ``|J(x')^T u|`` over points x' in the radius-ball and random unit u.

    A lower estimate of the local Lipschitz constant that is exact for
    linear maps with k = 1 or isometric rows (e.g. PCA).
    """
    if radius <= 0:
        raise ConfigError("radius must be positive")
    x = np.asarray(x, dtype=float)
    d, k = x.shape[-1], embedder.output_dim
    stream = Stream(seed).child("lipschitz")
    best = 0.0
    for s in range(n_samples):
        sub = stream.child(s)
        if s == 0:
            xp = x
        else:
            z = sub.child("dir").normals(d)
            r = radius * sub.child("rad").uniform(1)[0] ** (1.0 / d)
            xp = x + r * z / np.linalg.norm(z)
        u = sub.child("u").normals((n_directions, k))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        for ui in u:
            best = max(best, float(np.linalg.norm(embedder.vjp(xp, ui))))
    return best
