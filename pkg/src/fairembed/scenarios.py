"""Named experiments: each writes CSV reports plus a JSON run manifest."""
from __future__ import annotations

import hashlib
import json
import platform
import time
from concurrent.futures import Executor, ThreadPoolExecutor
from dataclasses import asdict, dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from . import __version__
from .attacks import (AttackMode, PairScenario, _with, audit_targeted, pair_sampler, run_targeted,
                      run_untargeted, success_curve, write_results_csv)
from .bounds import BoundForm, audit_bound, audit_configurations
from .config import EmbedderKind, Scenario, ScenarioConfig
from .csvio import write_csv
from .embedding_net import train_triplets
from .errors import InsufficientDataError, NumericError
from .linalg import (PcaEmbedder, covariance_contribution, fit_pca, relative_projection_distance,
                     sample_covariance, sym_eig)
from .matching import EmbeddingTable, build_pairs, centroids, far_threshold, matching_report, write_matching_csv
from .rng import Stream
from .stats import TEST_HEADER, TestResult, alexander_govern_test, welch_t_test
from .synthetic import GROUPS, Group, classify_group, sample_dataset


def stage_seed(master: int, stage: str) -> int:
    """Seed of a named stage; independent of which other stages run."""
    return int(Stream(master).child("stage", stage).generator().integers(0, 2 ** 63 - 1))


@dataclass(frozen=True)
class RunManifest:
    scenario: str
    config_digest: str
    seed: int
    versions: dict
    files: tuple  # (relative path, sha256, bytes)
    wall_clock_seconds: float

    def to_json(self) -> str:
        body = asdict(self)
        body["files"] = [{"path": p, "sha256": h, "bytes": n} for p, h, n in self.files]
        return json.dumps(body, indent=2, sort_keys=True) + "\n"

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(self.to_json(), encoding="utf-8", newline="\n")
        return path


def _versions() -> dict:
    return {"fairembed": __version__, "numpy": np.__version__, "python": platform.python_version()}


def _tag(v: float) -> str:
    return f"{v:g}"


class _Run:
    """Lazily built inputs shared by the stages of one run."""

    def __init__(self, cfg: ScenarioConfig, out: Path, executor: Executor | None):
        self.cfg, self.out, self.executor = cfg, out, executor
        self.files: list[Path] = []

    def seed(self, stage: str) -> int:
        return stage_seed(self.cfg.seed, stage)

    def write(self, name: str, header, rows) -> Path:
        path = write_csv(self.out / name, header, rows)
        self.files.append(path)
        return path

    def keep(self, path: Path) -> Path:
        self.files.append(path)
        return path

    @cached_property
    def params(self):
        return self.cfg.model.params(self.seed("dataset"))

    @cached_property
    def dataset(self):
        return sample_dataset(self.params, executor=self.executor)

    @cached_property
    def embedder(self):
        e = self.cfg.embedder
        if EmbedderKind(e.kind) is EmbedderKind.PCA:
            emb = fit_pca(self.dataset, e.k)
        else:
            dims = (self.cfg.model.d, *e.hidden, e.k)
            emb, _ = train_triplets(self.dataset, dims, margin=e.margin, step_size=e.step_size,
                                    epochs=e.epochs, batch_size=e.batch_size, seed=self.seed("embedder"))
        self.keep(emb.to_csv(self.out / "embedder.csv"))
        return emb

    @cached_property
    def table(self) -> EmbeddingTable:
        ds = self.dataset
        return EmbeddingTable(self.embedder.embed(ds.x), ds.image_label, ds.image_group)

    @cached_property
    def centroids(self):
        return centroids(self.table)

    def pairs(self, rule: str):
        cap = self.cfg.matching.cap or None
        return build_pairs(self.table, rule, cap=cap, seed=self.seed("matching"))

    @cached_property
    def projection_samples(self) -> dict:
        """gamma -> (dataset, {group: relative distances}) for the projection sweep."""
        out = {}
        mode = self.cfg.projection.mode
        k = self.cfg.embedder.k
        for gamma in self.cfg.projection.gammas:
            params = self.cfg.model.params(self.seed("projection_distance"), gamma=gamma)
            ds = sample_dataset(params, executor=self.executor)
            cov, _ = sample_covariance(ds.x)
            eig = sym_eig(cov)
            dist = {g: relative_projection_distance(ds.images_of(g), eig, params, g, k, mode)
                    for g in GROUPS if params.n_identities(g) > 0}
            out[gamma] = (ds, dist)
        return out


# --- stages ------------------------------------------------------------------

def _projection_distance(run: _Run):
    k = run.cfg.embedder.k
    summary = []
    for gamma, (ds, dist) in run.projection_samples.items():
        rows = []
        for g, values in dist.items():
            sel = np.flatnonzero(ds.image_group == g.code)
            order = np.argsort(values, kind="stable")
            n = len(values)
            for rank, j in enumerate(order, start=1):
                i = sel[j]
                rows.append([g.value, int(ds.identity_index[ds.image_label[i]]), int(ds.image_index[i]),
                             float(values[j]), rank / n])
            summary.append([gamma, g.value, n, float(values.mean()), float(values.std(ddof=1)) if n > 1 else 0.0,
                            float(np.median(values)), covariance_contribution(ds.params, g, k),
                            run.cfg.projection.mode])
        run.write(f"projection_ecdf_gamma_{_tag(gamma)}.csv",
                  ["group", "identity", "image", "relative_distance", "ecdf"], rows)
    run.write("projection_summary.csv",
              ["gamma", "group", "n", "mean", "std", "median", "covariance_contribution", "mode"], summary)


def _bound_audit(run: _Run):
    b = run.cfg.bounds
    configs = audit_configurations(b.n_configs, run.seed("bound_audit"), (b.gamma_min, b.gamma_max),
                                   (b.d_min, b.d_max), beta=b.beta)
    reports = {form: audit_bound(configs, b.resolution, b.max_eta, form, run.executor) for form in BoundForm}
    main = reports[BoundForm(b.form)]
    run.keep(main.to_csv(run.out / "bound_audit.csv"))
    rows = []
    for form, rep in reports.items():
        s = rep.slack_summary()
        rows.append([form.value, len(rep.rows), rep.violations, rep.max_root_residual,
                     s.get("n", 0), s.get("min"), s.get("mean"), s.get("median"), s.get("max")])
    run.write("bound_audit_summary.csv", ["form", "n_configs", "violations", "max_root_residual", "n_crossings",
                                          "slack_min", "slack_mean", "slack_median", "slack_max"], rows)


def _matching_report(run: _Run):
    rows = []
    for rule in run.cfg.matching.pairing_rules:
        rows += matching_report(run.pairs(rule), run.cfg.matching.zs)
    run.keep(write_matching_csv(run.out / "matching_report.csv", rows))


def _safe_test(fn, *samples) -> tuple[TestResult | None, str]:
    """Run a test; undefined cases (too few points, zero variance) become empty rows."""
    try:
        return fn(*samples), "ok"
    except (InsufficientDataError, NumericError) as exc:
        return None, f"undefined: {exc}"


def _test_row(prefix: list, hypothesis: str, result: TestResult | None, status: str, n_per_group=()):
    if result is None:
        body = ["", "", "", "", "", len(n_per_group), ";".join(str(n) for n in n_per_group)]
    else:
        body = result.row()
    return prefix + [hypothesis, status] + body


def _norm_summary(norms: np.ndarray) -> list:
    if norms.size == 0:
        return [0] + [None] * 7
    q = np.quantile(norms, [0.25, 0.5, 0.75])
    return [int(norms.size), float(norms.mean()), float(norms.std(ddof=1)) if norms.size > 1 else 0.0,
            float(norms.min()), float(q[0]), float(q[1]), float(q[2]), float(norms.max())]


def targeted_sweep(run: _Run) -> dict:
    """kappa -> scenario -> results; also writes the per-kappa result files."""
    a = run.cfg.attack
    ds, emb, cents = run.dataset, run.embedder, run.centroids
    pairs = {sc: pair_sampler(ds, sc, a.n_sources, a.n_targets_per_source, seed=run.seed(f"attack_pairs_{sc}"))
             for sc in a.scenarios}
    out = {}
    for kappa in a.kappas:
        cfg = a.attack_config(run.seed("targeted"), kappa)
        per = {}
        for sc in a.scenarios:
            res = run_targeted(emb, ds, pairs[sc], cents, cfg, sc, run.executor)
            bad = [i for i, (p, r) in enumerate(zip(pairs[sc], res))
                   if not audit_targeted(r, emb, ds.x[p.source_image], cents, cfg)]
            if bad:
                raise NumericError(f"targeted attack (kappa={kappa}, {sc}): {len(bad)} claimed successes "
                                   f"fail re-verification, first at pair {bad[0]}")
            per[sc] = res
        out[kappa] = per
        run.keep(write_results_csv(run.out / f"attack_targeted_kappa_{_tag(kappa)}.csv",
                                   [r for sc in a.scenarios for r in per[sc]]))
    return out


def _attack_sweep(run: _Run):
    a = run.cfg.attack
    tau = far_threshold(run.pairs("all_pairs"), a.z).tau
    taus = np.linspace(0.0, 2.0 * tau, a.n_taus)
    targeted = targeted_sweep(run)

    curve_rows, norm_rows, test_rows = [], [], []
    for kappa, per in targeted.items():
        cells = {}
        for sc, res in per.items():
            for g, t, rate, n in success_curve(res, taus, AttackMode.TARGETED):
                curve_rows.append([kappa, sc, g, t, rate, n])
            for g in ("all",) + tuple(gr.value for gr in GROUPS):
                norms = np.array([r.norm for r in res if r.success and (g == "all" or r.source_group.value == g)])
                n_all = sum(1 for r in res if g == "all" or r.source_group.value == g)
                if n_all == 0:
                    continue
                norm_rows.append([kappa, sc, g, n_all] + _norm_summary(norms))
                cells[(sc, g)] = norms
        diff, same = PairScenario.DIFFERENT_GROUP.value, PairScenario.SAME_GROUP.value
        for g in ("all",) + tuple(gr.value for gr in GROUPS):
            if (diff, g) in cells and (same, g) in cells:
                x, y = cells[(diff, g)], cells[(same, g)]
                r, status = _safe_test(welch_t_test, x, y)
                test_rows.append(_test_row([kappa, g], "mean |delta| equal for different- and same-group targets",
                                           r, status, (x.size, y.size)))
        keys = [key for key in sorted(cells) if key[1] != "all"]
        if len(keys) >= 2:
            samples = [cells[key] for key in keys]
            r, status = _safe_test(alexander_govern_test, samples)
            test_rows.append(_test_row([kappa, "+".join(f"{sc}:{g}" for sc, g in keys)],
                                       "mean |delta| equal across scenario x source group", r, status,
                                       tuple(s.size for s in samples)))
    run.write("attack_success_targeted.csv", ["kappa", "scenario", "group", "tau", "success_rate", "n"], curve_rows)
    run.write("attack_norms.csv", ["kappa", "scenario", "group", "n_attacks", "n_success", "mean", "std", "min",
                                   "q25", "median", "q75", "max"], norm_rows)
    run.write("attack_tests.csv", ["kappa", "group", "null_hypothesis", "status"] + TEST_HEADER, test_rows)
    _untargeted(run, tau, taus)


def untargeted_sweep(run: _Run, tau: float) -> dict:
    """epsilon -> results with success judged at ``tau`` and group flips marked."""
    a = run.cfg.attack
    ds, emb = run.dataset, run.embedder
    n = min(a.n_untargeted_sources, ds.n_images)
    gen = Stream(run.seed("untargeted_sources")).generator()
    sources = np.sort(gen.choice(ds.n_images, size=n, replace=False))
    pca = isinstance(emb, PcaEmbedder)
    clean = [classify_group(emb.embed(ds.x[s]), ds.params, emb) for s in sources] if pca else None
    out = {}
    for eps in a.untargeted_epsilons:
        res = run_untargeted(emb, ds, sources, run.centroids, a.untargeted_config(run.seed("untargeted"), eps),
                             run.executor)
        marked = []
        for i, (s, r) in enumerate(zip(sources, res)):
            flipped = None
            if pca:
                flipped = classify_group(emb.embed(ds.x[s] + r.delta), ds.params, emb) != clean[i]
            marked.append(_with(r, success=r.dist_to_source_centroid >= tau, flipped_group=flipped))
        out[eps] = marked
    return out


def _untargeted(run: _Run, tau: float, taus):
    sweep = untargeted_sweep(run, tau)
    run.keep(write_results_csv(run.out / "attack_untargeted.csv", [r for res in sweep.values() for r in res]))
    curve, retention = [], []
    for eps, res in sweep.items():
        for g, t, rate, n in success_curve(res, taus, AttackMode.UNTARGETED):
            curve.append([eps, g, t, rate, n])
        for g in ("all",) + tuple(gr.value for gr in GROUPS):
            sel = [r for r in res if g == "all" or r.source_group.value == g]
            if not sel:
                continue
            succ = [r for r in sel if r.success]
            flips = [r for r in succ if r.flipped_group]
            known = all(r.flipped_group is not None for r in sel)
            frac = (len(flips) / len(succ) if succ else 0.0) if known else None
            retention.append([eps, g, tau, len(sel), len(succ), len(flips) if known else None, frac])
    run.write("attack_success_untargeted.csv", ["epsilon", "group", "tau", "success_rate", "n"], curve)
    run.write("attack_retention.csv", ["epsilon", "group", "tau", "n", "n_success", "n_flipped",
                                       "flip_fraction"], retention)


def _stats_report(run: _Run):
    rows = []
    samples = run.projection_samples
    for gamma, (_, dist) in samples.items():
        if Group.A in dist and Group.B in dist:
            for alt, hyp in (("two-sided", "mean relative distance equal in groups a and b"),
                             ("greater", "mean relative distance of group a not above group b")):
                r, status = _safe_test(lambda x, y: welch_t_test(x, y, alt), dist[Group.A], dist[Group.B])
                rows.append(_test_row([gamma, "a_vs_b"], hyp, r, status, (dist[Group.A].size, dist[Group.B].size)))
    for g in GROUPS:
        group_samples = [dist[g] for _, dist in samples.values() if g in dist]
        if len(group_samples) >= 2:
            r, status = _safe_test(alexander_govern_test, group_samples)
            rows.append(_test_row(["all", f"{g.value}_across_gamma"],
                                  f"mean relative distance of group {g.value} equal across gamma",
                                  r, status, tuple(s.size for s in group_samples)))
    run.write("stats_tests.csv", ["gamma", "comparison", "null_hypothesis", "status"] + TEST_HEADER, rows)

    # calibration: Welch p-values under a true null should be uniform
    st = run.cfg.stats
    stream = Stream(run.seed("stats_null"))
    p = np.empty(st.null_reps)
    for i in range(st.null_reps):
        z = stream.child(i).normals((2, st.null_sample_size))
        p[i] = welch_t_test(z[0], z[1]).p_value
    ks = null_ks_distance(p)
    run.write("stats_null_calibration.csv", ["test_name", "reps", "sample_size", "ks_distance", "mean_p",
                                             "frac_below_0.05"],
              [["welch", st.null_reps, st.null_sample_size, ks, float(p.mean()), float(np.mean(p < 0.05))]])


def null_ks_distance(p) -> float:
    """Kolmogorov-Smirnov distance between the empirical CDF of ``p`` and U(0, 1)."""
    p = np.sort(np.asarray(p, dtype=float))
    n = p.size
    i = np.arange(1, n + 1)
    return float(max(np.max(i / n - p), np.max(p - (i - 1) / n)))


STAGES = {
    Scenario.PROJECTION_DISTANCE: [_projection_distance],
    Scenario.BOUND_AUDIT: [_bound_audit],
    Scenario.ATTACK_SWEEP: [_attack_sweep],
    Scenario.MATCHING_REPORT: [_matching_report],
    Scenario.STATS_REPORT: [_stats_report],
    Scenario.FULL_PIPELINE: [_projection_distance, _bound_audit, _matching_report, _attack_sweep, _stats_report],
}


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run_scenario(cfg: ScenarioConfig, threads: int = 1, out: str | Path | None = None) -> RunManifest:
    """Run ``cfg.run.scenario`` and write its CSV files and ``manifest.json`` under the output directory."""
    start = time.perf_counter()
    out_dir = Path(cfg.run.out if out is None else out)
    out_dir.mkdir(parents=True, exist_ok=True)
    executor = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        run = _Run(cfg, out_dir, executor)
        for stage in STAGES[cfg.scenario]:
            stage(run)
    finally:
        if executor is not None:
            executor.shutdown()
    files = []
    for p in sorted(set(run.files)):
        files.append((p.relative_to(out_dir).as_posix(), _sha256(p), p.stat().st_size))
    manifest = RunManifest(cfg.scenario.value, cfg.digest(), cfg.seed, _versions(), tuple(files),
                           time.perf_counter() - start)
    manifest.write(out_dir / "manifest.json")
    return manifest
