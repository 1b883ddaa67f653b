"""Simulation laboratory: finite populations, two-stage samples, metrics.

Each replicate creates a finite population from the two-level model,
defines the model groups as the sampling clusters, fits a stratified
two-stage sample with all five estimators (naive ML, pairwise, and three
stagewise weight scalings), subtracts the population-truth parameters
(the ML fit to the whole population), and scores median bias and scaled
median absolute deviation, both x100.

Sampling is simple random at both stages; the within-cluster sample size
is either fixed or split 2-vs-6 by an optional informative rule keyed to
the cluster's realized effects.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .design import SurveyDesign, pair_probability_srs, validate_design
from .data import build_model_frame
from .formula import parse_formula
from .inference import sandwich_beta
from .pairwise import (
    FitError,
    FitOptions,
    FitResult,
    enumerate_pairs,
    fit_pairwise_from_pairs,
    pairwise_diagnostics,
)
from .reference import WeightScaling, cluster_stats, fit_ml, _fit_profiled, scale_weights

ESTIMATORS = ("ml", "pairwise", "stagewise-unscaled",
              "stagewise-cluster-size", "stagewise-gk")

_X_DISTS = ("normal", "mixture", "cluster")
_SPLIT_RULES = ("none", "var_eps", "abs_b", "sign_b")


@dataclass(frozen=True)
class SimScenario:
    """Configuration of one simulation study (see module docstring).

    ``V`` is the relative random-effect covariance (the model is
    b ~ N(0, sigma2 * V)) for (intercept, z-slope); the true variance
    components are ``sigma2 * V``.
    """

    name: str = "custom"
    n_strata: int = 10
    stratum_size: int = 1000
    cluster_size: int = 10
    clusters_sampled: int = 10
    rule: str = "split26"              # "split26" or "fixed"
    fixed_n: int = 3
    split_by: str = "none"             # none | var_eps | abs_b | sign_b
    x_dist: str = "normal"
    beta: tuple[float, float, float] = (1.0, 1.0, 1.0)
    V: tuple[tuple[float, float], tuple[float, float]] = \
        ((0.4, 0.08), (0.08, 0.2))
    sigma2: float = 2.5
    independent_re: bool = False
    cluster_size_target: str = "sample"
    replicates: int = 500
    seed: int = 1

    def __post_init__(self):
        if self.stratum_size % self.cluster_size:
            raise ValueError("stratum_size must be divisible by "
                             "cluster_size")
        if self.clusters_sampled > self.clusters_per_stratum:
            raise ValueError("cannot sample more clusters than exist")
        if self.rule == "fixed" and self.fixed_n > self.cluster_size:
            raise ValueError("cannot sample more observations than the "
                             "cluster holds")
        if self.rule == "split26" and self.cluster_size < 6:
            raise ValueError("2-or-6 sampling needs clusters of size >= 6")
        if self.x_dist not in _X_DISTS:
            raise ValueError(f"unknown x_dist {self.x_dist!r}")
        if self.split_by not in _SPLIT_RULES:
            raise ValueError(f"unknown split rule {self.split_by!r}")

    @property
    def clusters_per_stratum(self) -> int:
        return self.stratum_size // self.cluster_size

    @property
    def n_clusters(self) -> int:
        return self.n_strata * self.clusters_per_stratum

    @property
    def formula_text(self) -> str:
        if self.independent_re:
            return "y ~ x + z + (1 | cluster) + (0 + z | cluster)"
        return "y ~ x + z + (1 + z | cluster)"

    def parameter_names(self) -> list[str]:
        return ["(Intercept)", "x", "z", "var[(Intercept)]", "var[z]",
                "sigma2"]


@dataclass
class Population:
    """One realized finite population plus its cluster-level effects."""

    table: dict[str, np.ndarray]
    stratum_of_cluster: np.ndarray
    b0: np.ndarray
    bz: np.ndarray
    var_eps: np.ndarray
    truth: FitResult


def _psd_factor(V: np.ndarray) -> np.ndarray:
    """Lower-triangular-ish factor of a PSD matrix (handles rank deficiency)."""
    try:
        return np.linalg.cholesky(V)
    except np.linalg.LinAlgError:
        w, Q = np.linalg.eigh(V)
        return Q @ np.diag(np.sqrt(np.clip(w, 0.0, None)))


def _draw_x(scenario: SimScenario, cluster: np.ndarray, n: int,
            rng: np.random.Generator) -> np.ndarray:
    if scenario.x_dist == "normal":
        return rng.standard_normal(n)
    if scenario.x_dist == "mixture":
        scales = np.array([1.0, 2.0, 3.0])[rng.integers(0, 3, size=n)]
        return rng.standard_normal(n) * scales
    # cluster-correlated: iid N(0,1) plus a cluster-specific N(0,1)
    shared = rng.standard_normal(scenario.n_clusters)
    return rng.standard_normal(n) + shared[cluster]


def generate_population(scenario: SimScenario,
                        rng: np.random.Generator) -> Population:
    """Simulate a finite population and fit the population truth.

    The truth is defined as the (naive) ML fit of the model to the whole
    population, so the metrics measure design effects rather than
    finite-population noise.
    """
    C = scenario.n_clusters
    m = scenario.cluster_size
    n = C * m
    cluster = np.repeat(np.arange(C), m)
    stratum_of_cluster = np.repeat(np.arange(scenario.n_strata),
                                   scenario.clusters_per_stratum)

    F = _psd_factor(scenario.sigma2 * np.asarray(scenario.V, dtype=float))
    b = rng.standard_normal((C, 2)) @ F.T
    x = _draw_x(scenario, cluster, n, rng)
    z = rng.gamma(2.0, 1.0, size=n)
    eps = rng.normal(0.0, np.sqrt(scenario.sigma2), size=n)
    b0, b1, b2 = scenario.beta
    y = b0 + b1 * x + b2 * z + b[cluster, 0] + b[cluster, 1] * z + eps

    table = {"y": y, "x": x, "z": z, "cluster": cluster}
    var_eps = eps.reshape(C, m).var(axis=1, ddof=1)

    Vrel = np.asarray(scenario.V, dtype=float)
    frame = build_model_frame(table, parse_formula(scenario.formula_text))
    theta0 = frame.structure.collapse(_psd_factor(
        Vrel * np.eye(2) if scenario.independent_re else Vrel))
    truth = fit_ml(table, scenario.formula_text,
                   options=FitOptions(theta0=theta0))
    return Population(table=table, stratum_of_cluster=stratum_of_cluster,
                      b0=b[:, 0], bz=b[:, 1], var_eps=var_eps, truth=truth)


def _within_sizes(scenario: SimScenario, pop: Population,
                  sampled: np.ndarray,
                  rng: np.random.Generator) -> np.ndarray:
    if scenario.rule == "fixed":
        return np.full(sampled.size, scenario.fixed_n, dtype=int)
    if scenario.split_by == "none":
        return np.where(rng.integers(0, 2, size=sampled.size) == 0, 2, 6)
    if scenario.split_by == "var_eps":
        cut = np.median(pop.var_eps)
        return np.where(pop.var_eps[sampled] < cut, 2, 6)
    if scenario.split_by == "abs_b":
        cut = np.median(np.abs(pop.bz))
        return np.where(np.abs(pop.bz[sampled]) < cut, 2, 6)
    # sign_b: two observations where the z-slope effect is negative
    return np.where(pop.bz[sampled] < 0, 2, 6)


def draw_sample(pop: Population, scenario: SimScenario,
                rng: np.random.Generator):
    """Stratified two-stage SRS from the population.

    Returns:
        (table, design): sampled columns and a SurveyDesign carrying the
        exact SRS probabilities at both stages and the exact pair
        probabilities.
    """
    cps = scenario.clusters_per_stratum
    m = scenario.cluster_size
    p1 = scenario.clusters_sampled / cps

    chosen = []
    for h in range(scenario.n_strata):
        ids = h * cps + rng.choice(cps, scenario.clusters_sampled,
                                   replace=False)
        chosen.append(np.sort(ids))
    sampled = np.concatenate(chosen)
    sizes = _within_sizes(scenario, pop, sampled, rng)

    rows, p2, ppair = [], [], []
    for c, n_i in zip(sampled, sizes):
        within = np.sort(rng.choice(m, n_i, replace=False))
        rows.append(c * m + within)
        p2.append(np.full(n_i, n_i / m))
        ppair.append(np.full(n_i, pair_probability_srs(n_i, m)))
    rows = np.concatenate(rows)
    table = {k: v[rows] for k, v in pop.table.items()}
    cl = pop.table["cluster"][rows]
    design = SurveyDesign(
        stratum=pop.stratum_of_cluster[cl],
        psu=cl,
        group=cl,
        p_stage1=np.full(rows.size, p1),
        p_stage2=np.concatenate(p2),
        p_pair=np.concatenate(ppair),
        pop_cluster_size=np.full(rows.size, float(m)),
    )
    return table, design


@dataclass
class MetricsTable:
    """Bias x100 (median) and SE x100 (scaled MAD) per estimator/parameter."""

    estimators: list[str]
    parameters: list[str]
    bias100: np.ndarray       # (E, P)
    se100: np.ndarray         # (E, P)
    n_used: dict[str, int]
    n_failed: dict[str, int]

    def to_text(self) -> str:
        width = max(len(p) for p in self.parameters) + 2
        head = " " * 24 + "".join(f"{p:>{width}}" for p in self.parameters)
        lines = [head]
        for e, est in enumerate(self.estimators):
            lines.append(f"{est} (n={self.n_used[est]})")
            lines.append("  Bias x100          "
                         + "".join(f"{v:>{width}.1f}"
                                   for v in self.bias100[e]))
            lines.append("  SE x100            "
                         + "".join(f"{v:>{width}.1f}"
                                   for v in self.se100[e]))
        return "\n".join(lines)

    def rows(self):
        for e, est in enumerate(self.estimators):
            for p, par in enumerate(self.parameters):
                yield (est, par, "bias100", float(self.bias100[e, p]))
                yield (est, par, "se100", float(self.se100[e, p]))


def scaled_mad(x: np.ndarray, axis=0) -> np.ndarray:
    """1.4826 * median absolute deviation from the median."""
    med = np.median(x, axis=axis, keepdims=True)
    return 1.4826 * np.median(np.abs(x - med), axis=axis)


@dataclass
class StudyResult:
    scenario: SimScenario
    metrics: MetricsTable
    truth: np.ndarray                      # (R, P)
    estimates: dict[str, np.ndarray]       # est -> (R, P), NaN when failed
    pairwise_se: np.ndarray                # (R, p) sandwich SEs for beta
    diagnostics: dict[str, np.ndarray] = field(default_factory=dict)
    elapsed: float = 0.0

    def errors(self, est: str) -> np.ndarray:
        return self.estimates[est] - self.truth


def _params_of(fit: FitResult, names: list[str]) -> np.ndarray:
    d = fit.parameters()
    return np.array([d[n] for n in names])


def run_study(scenario: SimScenario,
              collect_diagnostics: bool = False) -> StudyResult:
    """Run the full study: replicate, fit all five estimators, score.

    Replicates use independent substreams of the scenario seed, so the
    result is reproducible and independent of execution order.  Failed
    fits are recorded as NaN rows and excluded from the metrics.
    """
    t0 = time.time()
    names = scenario.parameter_names()
    P = len(names)
    R = scenario.replicates
    truth = np.empty((R, P))
    estimates = {e: np.full((R, P), np.nan) for e in ESTIMATORS}
    pairwise_se = np.full((R, 3), np.nan)
    diag_score = np.full(R, np.nan)
    diag_fd = np.full(R, np.nan)
    diag_conv = {e: np.zeros(R, dtype=bool) for e in ESTIMATORS}

    streams = np.random.SeedSequence(scenario.seed).spawn(R)
    formula = parse_formula(scenario.formula_text)
    scalings = {
        "stagewise-unscaled": WeightScaling("unscaled"),
        "stagewise-cluster-size": WeightScaling(
            "cluster-size", target=scenario.cluster_size_target),
        "stagewise-gk": WeightScaling("gk"),
    }

    for r in range(R):
        rng = np.random.default_rng(streams[r])
        pop = generate_population(scenario, rng)
        truth[r] = _params_of(pop.truth, names)
        table, design = draw_sample(pop, scenario, rng)
        frame = build_model_frame(table, formula)
        checked = validate_design(design)

        # naive ML (also the starting value for the weighted estimators)
        ml = None
        try:
            ml = fit_ml(table, formula,
                        options=FitOptions(theta0=pop.truth.theta.free))
            if ml.converged:
                estimates["ml"][r] = _params_of(ml, names)
                diag_conv["ml"][r] = True
        except FitError:
            pass
        theta0 = ml.theta.free if ml is not None \
            else pop.truth.theta.free

        try:
            pairs = enumerate_pairs(frame, checked)
            pw = fit_pairwise_from_pairs(
                pairs, frame.structure, theta0,
                beta_names=frame.x_names, vc_names=frame.vc_names(),
                n_obs=frame.n, n_groups=checked.n_groups)
            if pw.converged:
                estimates["pairwise"][r] = _params_of(pw, names)
                diag_conv["pairwise"][r] = True
                pairwise_se[r] = sandwich_beta(pw, pairs).se
                if collect_diagnostics:
                    dg = pairwise_diagnostics(pw, pairs)
                    diag_score[r] = dg["score_max_abs"]
                    diag_fd[r] = dg["fd_min_slope"]
        except FitError:
            pass

        for label, scaling in scalings.items():
            try:
                w1, w_cond = scale_weights(checked, scaling)
                stats = cluster_stats(frame.y, frame.X, frame.Z,
                                      checked.group_rows,
                                      w_cond=w_cond, c_cluster=w1)
                sw = _fit_profiled(stats, frame, label,
                                   FitOptions(theta0=theta0),
                                   n_obs=frame.n)
                if sw.converged:
                    estimates[label][r] = _params_of(sw, names)
                    diag_conv[label][r] = True
            except FitError:
                pass

    bias100 = np.empty((len(ESTIMATORS), P))
    se100 = np.empty((len(ESTIMATORS), P))
    n_used, n_failed = {}, {}
    for e, est in enumerate(ESTIMATORS):
        err = estimates[est] - truth
        ok = ~np.isnan(err[:, 0])
        n_used[est] = int(np.sum(ok))
        n_failed[est] = R - n_used[est]
        if n_used[est] >= 2:
            bias100[e] = 100.0 * np.median(err[ok], axis=0)
            se100[e] = 100.0 * scaled_mad(err[ok], axis=0)
        else:
            bias100[e] = np.nan
            se100[e] = np.nan

    metrics = MetricsTable(
        estimators=list(ESTIMATORS), parameters=names,
        bias100=bias100, se100=se100,
        n_used=n_used, n_failed=n_failed,
    )
    diagnostics = {}
    if collect_diagnostics:
        diagnostics = {"pairwise_score_max": diag_score,
                       "pairwise_fd_min": diag_fd}
    return StudyResult(
        scenario=scenario, metrics=metrics, truth=truth,
        estimates=estimates, pairwise_se=pairwise_se,
        diagnostics=diagnostics, elapsed=time.time() - t0,
    )


def preset(name: str, replicates: int | None = None,
           seed: int | None = None) -> SimScenario:
    """Desk-scale scenario presets mirroring the published table layouts.

    The true parameter values behind the published tables are not
    recoverable; these defaults reproduce the qualitative design effects
    at desk scale.
    """
    # var_b0 = 1.0, var_bz = 0.5, cov = 0.2 on sigma2 = 2.5
    base = dict(V=((0.4, 0.08), (0.08, 0.2)), sigma2=2.5)
    small = dict(V=((0.1, 0.02), (0.02, 0.05)), sigma2=2.5)
    # informative-sampling presets: var_bz sized so the naive z-slope
    # bias lands mid-window, more strata so finite-sample variance
    # biases sit well under the pairwise-unbiasedness tolerance
    info = dict(V=((0.5, 0.05), (0.05, 0.0533)), sigma2=3.0, n_strata=60)
    table = {
        "table1": dict(x_dist="mixture", **base),
        "table2": dict(x_dist="normal", clusters_sampled=20, **base),
        "table3": dict(x_dist="normal", **small),
        "table4": dict(x_dist="cluster", **small),
        "table5": dict(x_dist="cluster", **base),
        "table6": dict(x_dist="normal", cluster_size=5,
                       clusters_sampled=20, rule="fixed", fixed_n=3,
                       independent_re=True,
                       V=((0.125, 0.0), (0.0, 0.02)), sigma2=2.0),
        "table7": dict(x_dist="normal", split_by="var_eps", **info),
        "table8": dict(x_dist="normal", split_by="abs_b", **info),
        "table9": dict(x_dist="normal", split_by="sign_b", **info),
    }
    if name not in table:
        raise ValueError(f"unknown preset {name!r}")
    scen = SimScenario(name=name, **table[name])
    if replicates is not None:
        scen = replace(scen, replicates=replicates)
    if seed is not None:
        scen = replace(scen, seed=seed)
    return scen
