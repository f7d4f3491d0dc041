"""Scenario configuration: a TOML file with flat sections, strict keys and
documented defaults."""
from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib
import tomli_w

from .attacks import AttackConfig, HingeVariant, PairScenario
from .bounds import BoundForm
from .errors import ConfigError, FairEmbedError
from .linalg import ProjectionMode
from .matching import PairingRule
from .synthetic import HierarchicalGaussianParams


class Scenario(str, enum.Enum):
    PROJECTION_DISTANCE = "projection_distance"
    BOUND_AUDIT = "bound_audit"
    ATTACK_SWEEP = "attack_sweep"
    MATCHING_REPORT = "matching_report"
    STATS_REPORT = "stats_report"
    FULL_PIPELINE = "full_pipeline"


class EmbedderKind(str, enum.Enum):
    PCA = "pca"
    MLP = "mlp"


def _opt(default, doc: str, elem=None, choices=None):
    """A config field; tuples are written as TOML arrays."""
    if isinstance(default, tuple):
        return field(default=default, metadata={"doc": doc, "elem": elem, "choices": choices})
    return field(default=default, metadata={"doc": doc, "choices": choices})


_SCENARIOS = tuple(s.value for s in Scenario)


@dataclass(frozen=True)
class RunSection:
    scenario: str = _opt("full_pipeline", "scenario to run", choices=_SCENARIOS)
    seed: int = _opt(0, "master seed; every stage derives its own stream from it")
    out: str = _opt("fairembed_out", "output directory")


@dataclass(frozen=True)
class ModelSection:
    d: int = _opt(20, "input dimension")
    gamma: float = _opt(0.01, "Sigma_a = gamma * Sigma_b")
    beta: float = _opt(0.01, "image noise variance")
    alpha: float = _opt(0.5, "prior weight of group a (likelihood only)")
    mu_a: tuple = _opt((), "unit mean of group a; [] = ones(d)/sqrt(d)", elem=float)
    sigma_b_diag: tuple = _opt((), "diagonal of Sigma_b; [] = profile below divided by gamma", elem=float)
    sigma_a_scale: float = _opt(0.3, "default profile: Sigma_a[i] = scale * decay**i")
    sigma_a_decay: float = _opt(0.8, "default profile decay")
    n_identities_a: int = _opt(500, "identities in group a")
    n_identities_b: int = _opt(500, "identities in group b")
    m: int = _opt(10, "images per identity")

    def sigma_a_diag(self) -> np.ndarray:
        """Group-a identity variances; held fixed when gamma is swept."""
        if self.sigma_b_diag:
            return self.gamma * np.asarray(self.sigma_b_diag, dtype=float)
        return self.sigma_a_scale * self.sigma_a_decay ** np.arange(self.d)

    def params(self, seed: int, gamma: float | None = None) -> HierarchicalGaussianParams:
        """Model parameters; a different ``gamma`` rescales Sigma_b with Sigma_a fixed."""
        g = self.gamma if gamma is None else gamma
        if not g > 0:
            raise ConfigError(f"model.gamma: must be positive, got {g}")
        mu = np.asarray(self.mu_a, dtype=float) if self.mu_a else np.ones(self.d) / math.sqrt(self.d)
        if self.sigma_b_diag and gamma is None:
            sb = np.asarray(self.sigma_b_diag, dtype=float)
        else:
            sb = self.sigma_a_diag() / g
        return HierarchicalGaussianParams(d=self.d, gamma=g, beta=self.beta, alpha=self.alpha, mu_a=mu,
                                          sigma_b_diag=sb, n_identities_a=self.n_identities_a,
                                          n_identities_b=self.n_identities_b, m=self.m, seed=seed)


@dataclass(frozen=True)
class EmbedderSection:
    kind: str = _opt("pca", "pca or mlp", choices=tuple(e.value for e in EmbedderKind))
    k: int = _opt(3, "embedding dimension")
    hidden: tuple = _opt((16,), "mlp hidden layer widths", elem=int)
    margin: float = _opt(0.2, "mlp triplet margin")
    epochs: int = _opt(10, "mlp training epochs")
    step_size: float = _opt(0.05, "mlp SGD step size")
    batch_size: int = _opt(64, "mlp triplets per step")


@dataclass(frozen=True)
class ProjectionSection:
    gammas: tuple = _opt((1.0, 0.01), "gamma values swept (one ECDF file each)", elem=float)
    mode: str = _opt("as_written", "relative projection distance variant",
                     choices=tuple(m.value for m in ProjectionMode))


@dataclass(frozen=True)
class BoundsSection:
    n_configs: int = _opt(100, "random 1-D configurations audited")
    resolution: float = _opt(1e-3, "oracle grid step in eta")
    max_eta: float = _opt(20.0, "oracle scan range")
    gamma_min: float = _opt(0.1, "smallest gamma drawn")
    gamma_max: float = _opt(0.9, "largest gamma drawn")
    d_min: int = _opt(2, "smallest dimension drawn")
    d_max: int = _opt(6, "largest dimension drawn")
    beta: float = _opt(1e-3, "image noise of audit configurations")
    form: str = _opt("printed", "closed form audited: printed or derived",
                     choices=tuple(f.value for f in BoundForm))


@dataclass(frozen=True)
class AttackSection:
    epsilon: float = _opt(50.0, "targeted l2 budget")
    step_size: float = _opt(0.25, "targeted Adam step size")
    max_iters: int = _opt(200, "iterations per penalty value")
    kappas: tuple = _opt((0.0, 5.0, 10.0), "hinge margins (one result file each)", elem=float)
    penalty_init: float = _opt(1.0, "first penalty weight")
    penalty_bsearch_steps: int = _opt(4, "bisection rounds after the first success")
    max_penalty_doublings: int = _opt(12, "penalty doublings before giving up")
    hinge_variant: str = _opt("max_as_written", "reference distance over other identities",
                              choices=tuple(h.value for h in HingeVariant))
    scenarios: tuple = _opt(("same_group", "different_group"), "pairing scenarios", elem=str,
                            choices=tuple(s.value for s in PairScenario))
    n_sources: int = _opt(50, "source images per scenario")
    n_targets_per_source: int = _opt(2, "targets per source image")
    untargeted_epsilons: tuple = _opt((0.1, 0.5, 1.0, 2.0, 5.0), "untargeted budget sweep", elem=float)
    untargeted_step_size: float = _opt(0.05, "untargeted ascent step")
    untargeted_max_iters: int = _opt(100, "untargeted iterations")
    n_untargeted_sources: int = _opt(200, "source images for the untargeted sweep")
    z: float = _opt(0.05, "FAR bound fixing the success threshold tau")
    n_taus: int = _opt(41, "grid points of the success curves")

    def attack_config(self, seed: int, kappa: float = 0.0) -> AttackConfig:
        return AttackConfig(epsilon=self.epsilon, step_size=self.step_size, max_iters=self.max_iters,
                            kappa=kappa, penalty_init=self.penalty_init,
                            penalty_bsearch_steps=self.penalty_bsearch_steps,
                            max_penalty_doublings=self.max_penalty_doublings,
                            hinge_variant=self.hinge_variant, seed=seed)

    def untargeted_config(self, seed: int, epsilon: float) -> AttackConfig:
        return AttackConfig(epsilon=epsilon, step_size=self.untargeted_step_size,
                            max_iters=self.untargeted_max_iters, seed=seed)


@dataclass(frozen=True)
class MatchingSection:
    zs: tuple = _opt((0.001, 0.05), "FAR bounds reported", elem=float)
    pairing_rules: tuple = _opt(("all_pairs", "same_group_only"), "impostor pairing rules", elem=str,
                                choices=tuple(r.value for r in PairingRule))
    cap: int = _opt(200000, "max pairs per set (0 = all)")


@dataclass(frozen=True)
class StatsSection:
    null_reps: int = _opt(2000, "repetitions of the null-calibration check")
    null_sample_size: int = _opt(20, "observations per sample in the null check")


SECTIONS = {"run": RunSection, "model": ModelSection, "embedder": EmbedderSection,
            "projection": ProjectionSection, "bounds": BoundsSection, "attack": AttackSection,
            "matching": MatchingSection, "stats": StatsSection}


@dataclass(frozen=True)
class ScenarioConfig:
    run: RunSection = field(default_factory=RunSection)
    model: ModelSection = field(default_factory=ModelSection)
    embedder: EmbedderSection = field(default_factory=EmbedderSection)
    projection: ProjectionSection = field(default_factory=ProjectionSection)
    bounds: BoundsSection = field(default_factory=BoundsSection)
    attack: AttackSection = field(default_factory=AttackSection)
    matching: MatchingSection = field(default_factory=MatchingSection)
    stats: StatsSection = field(default_factory=StatsSection)

    @property
    def scenario(self) -> Scenario:
        return Scenario(self.run.scenario)

    @property
    def seed(self) -> int:
        return self.run.seed

    def replace(self, section: str, **changes) -> ScenarioConfig:
        sec = dataclasses.replace(getattr(self, section), **changes)
        return dataclasses.replace(self, **{section: sec})

    def to_dict(self) -> dict:
        return {name: {f.name: (list(v) if isinstance(v := getattr(getattr(self, name), f.name), tuple) else v)
                       for f in dataclasses.fields(cls)}
                for name, cls in SECTIONS.items()}

    def digest(self) -> str:
        """SHA-256 of the canonical (key-sorted) JSON form."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


# --- parsing -----------------------------------------------------------------

def _coerce(path: str, value, default, meta):
    choices = meta.get("choices")
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, tuple):
        elem = meta["elem"]
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected an array, got {value!r}")
        items = [_coerce(f"{path}[{i}]", v, elem(), {"choices": choices}) for i, v in enumerate(value)]
        return tuple(items)
    else:  # pragma: no cover
        raise TypeError(default)
    if not ok:
        raise ConfigError(f"{path}: expected {type(default).__name__}, got {value!r}")
    if choices and value not in choices:
        raise ConfigError(f"{path}: {value!r} is not one of {', '.join(choices)}")
    return value


def from_dict(data: dict) -> ScenarioConfig:
    sections = {}
    for name, body in data.items():
        if name not in SECTIONS:
            raise ConfigError(f"unknown section [{name}]")
        if not isinstance(body, dict):
            raise ConfigError(f"{name}: expected a table")
        cls = SECTIONS[name]
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, value in body.items():
            if key not in fields:
                raise ConfigError(f"unknown key {name}.{key}")
            f = fields[key]
            kwargs[key] = _coerce(f"{name}.{key}", value, f.default, f.metadata)
        sections[name] = cls(**kwargs)
    cfg = ScenarioConfig(**sections)
    validate(cfg)
    return cfg


def parse_config_text(text: str) -> ScenarioConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config parse error: {exc}") from exc
    return from_dict(data)


def parse_config(path: str | Path) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    return parse_config_text(text)


def validate(cfg: ScenarioConfig) -> None:
    """Invariant checks that the per-field types cannot express."""
    if cfg.run.seed < 0 or cfg.run.seed >= 2 ** 64:
        raise ConfigError("run.seed: must be an unsigned 64-bit integer")
    m = cfg.model
    try:
        cfg.model.params(0)
    except FairEmbedError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"model: {exc}") from exc
    if m.sigma_a_scale <= 0 or m.sigma_a_decay <= 0:
        raise ConfigError("model.sigma_a_scale / model.sigma_a_decay: must be positive")
    e = cfg.embedder
    if not 1 <= e.k <= m.d:
        raise ConfigError(f"embedder.k: need 1 <= k <= d = {m.d}, got {e.k}")
    if any(h < 1 for h in e.hidden):
        raise ConfigError("embedder.hidden: widths must be positive")
    for name in ("epochs", "batch_size"):
        if getattr(e, name) < 1:
            raise ConfigError(f"embedder.{name}: must be positive")
    if e.margin < 0 or e.step_size <= 0:
        raise ConfigError("embedder.margin must be >= 0 and embedder.step_size > 0")
    sweeps = {"projection.gammas": cfg.projection.gammas, "attack.kappas": cfg.attack.kappas,
              "attack.scenarios": cfg.attack.scenarios, "attack.untargeted_epsilons": cfg.attack.untargeted_epsilons,
              "matching.zs": cfg.matching.zs, "matching.pairing_rules": cfg.matching.pairing_rules}
    for path, values in sweeps.items():
        if not values:
            raise ConfigError(f"{path}: sweep list must be nonempty")
    for i, g in enumerate(cfg.projection.gammas):
        if not g > 0:
            raise ConfigError(f"projection.gammas[{i}]: must be positive, got {g}")
    b = cfg.bounds
    if not 0 < b.gamma_min <= b.gamma_max < 1:
        raise ConfigError("bounds.gamma_min/gamma_max: need 0 < gamma_min <= gamma_max < 1")
    if not 1 <= b.d_min <= b.d_max:
        raise ConfigError("bounds.d_min/d_max: need 1 <= d_min <= d_max")
    if b.n_configs < 1 or b.resolution <= 0 or b.max_eta <= 0 or b.beta <= 0:
        raise ConfigError("bounds: n_configs, resolution, max_eta and beta must be positive")
    a = cfg.attack
    a.attack_config(0)
    for i, k in enumerate(a.kappas):
        if k < 0:
            raise ConfigError(f"attack.kappas[{i}]: must be nonnegative")
    for i, eps in enumerate(a.untargeted_epsilons):
        if eps < 0:
            raise ConfigError(f"attack.untargeted_epsilons[{i}]: must be nonnegative")
    if a.untargeted_step_size <= 0 or a.untargeted_max_iters < 1:
        raise ConfigError("attack.untargeted_step_size and attack.untargeted_max_iters must be positive")
    for name in ("n_sources", "n_targets_per_source", "n_untargeted_sources"):
        if getattr(a, name) < 1:
            raise ConfigError(f"attack.{name}: must be positive")
    if a.n_taus < 2:
        raise ConfigError("attack.n_taus: need at least 2 grid points")
    for i, z in enumerate((a.z,) + cfg.matching.zs):
        if not 0 < z <= 1:
            path = "attack.z" if i == 0 else f"matching.zs[{i - 1}]"
            raise ConfigError(f"{path}: FAR bound must lie in (0, 1], got {z}")
    if cfg.matching.cap < 0:
        raise ConfigError("matching.cap: must be >= 0")
    if cfg.stats.null_reps < 1 or cfg.stats.null_sample_size < 2:
        raise ConfigError("stats: null_reps >= 1 and null_sample_size >= 2 required")


# --- printing ----------------------------------------------------------------

def _toml_value(value) -> str:
    if isinstance(value, list):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    return tomli_w.dumps({"v": value}).strip()[len("v = "):]


def render_config(cfg: ScenarioConfig | None = None) -> str:
    """TOML text of ``cfg`` (default config if omitted), one commented line per key."""
    cfg = ScenarioConfig() if cfg is None else cfg
    data = cfg.to_dict()
    lines = []
    for name, cls in SECTIONS.items():
        lines.append(f"[{name}]")
        for f in dataclasses.fields(cls):
            lines.append(f"{f.name} = {_toml_value(data[name][f.name])}  # {f.metadata['doc']}")
        lines.append("")
    return "\n".join(lines)
