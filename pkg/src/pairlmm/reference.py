"""Reference estimators: naive ML and stagewise pseudolikelihood.

Both profile beta and sigma2 analytically and minimize the resulting
deviance over theta, reusing the box minimizer.  The per-cluster pieces
are built from weighted sufficient statistics so each deviance
evaluation costs O(q^2 (p + q)) per cluster regardless of cluster size:
with A_i = I + L' S_zz,i L (S_zz,i = Z' D_w Z within cluster i),

    log|Xi_i| = log|A_i|          (determinant lemma)
    r' Xi_i^-1 r = S_rr - s_zr' L A_i^-1 L' s_zr   (Woodbury)

and the same identities hold for the integrated weighted cluster
loglikelihood of the stagewise estimator, whose latent-effect integral
is Gaussian and available in closed form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import ModelFrame, build_model_frame
from .design import CheckedDesign, SurveyDesign, rows_by_code, validate_design
from .formula import ModelFormula, parse_formula
from .kernels import GroupData, ThetaParam, ThetaStructure
from .pairwise import (
    DegenerateFitError,
    FitError,
    FitOptions,
    FitResult,
    _default_theta0,
    _minimize_theta,
    _solve_normal,
)

_SCALING_VARIANTS = ("unscaled", "cluster-size", "gk")


@dataclass(frozen=True)
class WeightScaling:
    """Weight-rescaling rule for the stagewise pseudolikelihood.

    ``variant`` is one of ``unscaled``, ``cluster-size`` or ``gk``.  The
    cluster-size variant rescales stage-2 weights to sum to the cluster
    size: the population size by default, the sample size with
    ``target="sample"`` (the scaling used by common software
    implementations; the two differ in general, see README).
    """

    variant: str = "unscaled"
    target: str = "population"

    def __post_init__(self):
        if self.variant not in _SCALING_VARIANTS:
            raise ValueError(f"unknown scaling variant {self.variant!r}")
        if self.target not in ("population", "sample"):
            raise ValueError(f"unknown scaling target {self.target!r}")


def scale_weights(checked: CheckedDesign, scaling: WeightScaling):
    """Per-group stage-1 weights and per-observation conditional weights.

    The gk variant sets the conditional weights to one and scales each
    stage-1 weight by the average conditional weight of the cluster's
    observations: over all N_i cluster members when the population
    cluster size is known (the weight total estimates N_i, so the
    average is N-hat_i / N_i, exactly one under within-cluster SRS),
    otherwise over the sampled members.

    Returns:
        (w1, w_cond): arrays of shape (n_groups,) and (n_obs,).
    """
    w1 = 1.0 / checked.p1_group
    w_cond = 1.0 / checked.p2
    if scaling.variant == "unscaled":
        return w1, w_cond
    if scaling.variant == "gk":
        w1 = w1.copy()
        out = np.ones_like(w_cond)
        for g, rows in enumerate(checked.group_rows):
            total = float(np.sum(w_cond[rows]))
            if checked.pop_size_group is not None:
                w1[g] *= total / float(checked.pop_size_group[g])
            else:
                w1[g] *= total / rows.size
        return w1, out
    # cluster-size
    out = w_cond.copy()
    for g, rows in enumerate(checked.group_rows):
        if scaling.target == "population":
            if checked.pop_size_group is None:
                raise FitError(
                    "cluster-size scaling with a population target needs "
                    "the population cluster sizes")
            target = float(checked.pop_size_group[g])
        else:
            target = float(rows.size)
        out[rows] *= target / float(np.sum(w_cond[rows]))
    return w1, out


def cluster_loglik_weighted(group: GroupData, beta: np.ndarray,
                            theta: ThetaParam, sigma2: float,
                            w_cond: np.ndarray) -> float:
    """Integrated weighted loglikelihood of one cluster.

    This is log of the integral over the cluster's random effect b of
    exp(sum_j w_j log phi(y_j; x_j beta + z_j b, sigma2)) against the
    N(0, sigma2 V) density; the exponent is quadratic in b, so the
    integral is Gaussian and evaluates in closed form (module docstring).
    """
    if sigma2 <= 0:
        raise ValueError("sigma2 must be positive")
    w = np.asarray(w_cond, dtype=float)
    if w.shape != (group.m,):
        raise ValueError("w_cond must have one entry per observation")
    L = theta.L
    r = group.Y - group.X @ beta
    Zw = group.Z * w[:, None]
    A = np.eye(theta.q) + L.T @ (group.Z.T @ Zw) @ L
    s = L.T @ (Zw.T @ r)          # L' Z' D_w r
    cA = np.linalg.cholesky(A)
    half = np.linalg.solve(cA, s)
    quad = float(np.sum(w * r * r) - half @ half)
    W = float(np.sum(w))
    logdet = 2.0 * float(np.sum(np.log(np.diag(cA))))
    return -0.5 * (W * np.log(2.0 * np.pi * sigma2) + logdet
                   + quad / sigma2)


@dataclass
class ClusterStats:
    """Stacked weighted sufficient statistics for all clusters."""

    S_zz: np.ndarray   # (G, q, q)
    S_zx: np.ndarray   # (G, q, p)
    S_zy: np.ndarray   # (G, q)
    S_xx: np.ndarray   # (G, p, p)
    S_xy: np.ndarray   # (G, p)
    S_yy: np.ndarray   # (G,)
    W: np.ndarray      # (G,) sum of conditional weights
    c: np.ndarray      # (G,) cluster weights

    @property
    def n_groups(self) -> int:
        return self.W.shape[0]

    @property
    def n_eff(self) -> float:
        return float(self.c @ self.W)


def cluster_stats(y, X, Z, group_rows, w_cond=None,
                  c_cluster=None) -> ClusterStats:
    """Weighted per-cluster cross-products, batched by cluster size."""
    G = len(group_rows)
    p, q = X.shape[1], Z.shape[1]
    st = ClusterStats(
        S_zz=np.empty((G, q, q)), S_zx=np.empty((G, q, p)),
        S_zy=np.empty((G, q)), S_xx=np.empty((G, p, p)),
        S_xy=np.empty((G, p)), S_yy=np.empty(G), W=np.empty(G),
        c=np.ones(G) if c_cluster is None else
        np.asarray(c_cluster, dtype=float),
    )
    sizes = np.array([r.size for r in group_rows])
    for m in np.unique(sizes):
        gs = np.flatnonzero(sizes == m)
        rows = np.stack([group_rows[g] for g in gs])   # (Gs, m)
        Xb, Zb, yb = X[rows], Z[rows], y[rows]
        wb = np.ones((gs.size, m)) if w_cond is None else w_cond[rows]
        Zw = Zb * wb[:, :, None]
        st.S_zz[gs] = np.matmul(Zb.transpose(0, 2, 1), Zw)
        st.S_zx[gs] = np.matmul(Zw.transpose(0, 2, 1), Xb)
        st.S_zy[gs] = np.einsum("gma,gm->ga", Zw, yb)
        st.S_xx[gs] = np.matmul(Xb.transpose(0, 2, 1),
                                Xb * wb[:, :, None])
        st.S_xy[gs] = np.einsum("gmp,gm->gp", Xb, yb * wb)
        st.S_yy[gs] = np.einsum("gm,gm->g", yb, yb * wb)
        st.W[gs] = wb.sum(axis=1)
    return st


class ProfiledObjective:
    """Profile deviance over theta for ML / stagewise estimators."""

    def __init__(self, stats: ClusterStats, structure: ThetaStructure,
                 names: list[str] | None = None):
        self.stats = stats
        self.structure = structure
        self.names = names
        self.n_evals = 0
        self.last_beta: np.ndarray | None = None
        self.last_sigma2: float = np.nan

    def __call__(self, free: np.ndarray) -> float:
        st = self.stats
        L = self.structure.expand(free)
        A = np.eye(self.structure.q) + np.matmul(L.T @ st.S_zz, L)
        chol = np.linalg.cholesky(A)
        logdet = 2.0 * np.sum(np.log(
            np.diagonal(chol, axis1=1, axis2=2)), axis=1)
        # stack [Z'X | Z'y] so the per-cluster solve happens once
        C = np.concatenate([L.T @ st.S_zx,
                            (st.S_zy @ L)[..., None]], axis=2)
        AinvC = np.linalg.solve(A, C)
        cross = np.matmul(C.transpose(0, 2, 1), AinvC)
        G_xx = st.S_xx - cross[:, :-1, :-1]
        G_xy = st.S_xy - cross[:, :-1, -1]
        G_yy = st.S_yy - cross[:, -1, -1]

        A_tot = np.einsum("g,gpq->pq", st.c, G_xx)
        rhs = st.c @ G_xy
        beta = _solve_normal(A_tot, rhs, self.names)
        quad = G_yy - 2.0 * (G_xy @ beta) + (G_xx @ beta) @ beta
        sigma2 = float(st.c @ quad) / st.n_eff

        self.n_evals += 1
        self.last_beta = beta
        self.last_sigma2 = sigma2
        if sigma2 <= 0.0:
            raise DegenerateFitError(
                "profiled residual variance is zero (perfect fit)")
        return float(st.n_eff * np.log(2.0 * np.pi * sigma2)
                     + st.c @ logdet)


def _fit_profiled(stats: ClusterStats, frame: ModelFrame, method: str,
                  options: FitOptions, n_obs: int) -> FitResult:
    structure = frame.structure
    theta0 = options.theta0 if options.theta0 is not None \
        else _ml_default_theta0(structure)
    objective = ProfiledObjective(stats, structure, frame.x_names)
    result = _minimize_theta(objective, structure,
                             np.asarray(theta0, dtype=float), options)
    dev = objective(result.x)
    theta = ThetaParam.from_free(structure, result.x)
    return FitResult(
        method=method,
        beta=objective.last_beta.copy(),
        beta_names=frame.x_names,
        sigma2=objective.last_sigma2,
        theta=theta,
        vc_names=frame.vc_names(),
        deviance=dev,
        converged=result.converged,
        evaluations=result.evaluations + 1,
        boundary=theta.boundary(),
        n_obs=n_obs,
        n_groups=stats.n_groups,
    )


def _ml_default_theta0(structure: ThetaStructure) -> np.ndarray:
    free = np.zeros(structure.n_free)
    for pos, (i, j) in enumerate(structure.free_index_pairs()):
        if i == j:
            free[pos] = 1.0
    return free


def group_rows_from_column(values: np.ndarray) -> list[np.ndarray]:
    keys, inv = np.unique(np.asarray(values), return_inverse=True)
    return rows_by_code(inv, len(keys))


def fit_ml(table, formula: ModelFormula | str,
           options: FitOptions | None = None) -> FitResult:
    """Unweighted (naive) maximum-likelihood fit of the mixed model.

    Ignores the sampling design entirely; appropriate on its own only
    under ignorable sampling, and used as the starting value and the
    efficiency benchmark for the weighted estimators.
    """
    options = options or FitOptions()
    if isinstance(formula, str):
        formula = parse_formula(formula)
    frame = build_model_frame(table, formula)
    rows = group_rows_from_column(table[frame.grouping_factor])
    if len(rows) < 2:
        raise FitError("maximum likelihood needs at least 2 groups")
    stats = cluster_stats(frame.y, frame.X, frame.Z, rows)
    fit = _fit_profiled(stats, frame, "ml", options, n_obs=frame.n)
    return fit


def fit_stagewise(table, design: SurveyDesign,
                  formula: ModelFormula | str,
                  scaling: WeightScaling | str = "unscaled",
                  options: FitOptions | None = None) -> FitResult:
    """Stagewise pseudolikelihood fit with the given weight scaling.

    Maximizes sum_i w1_i * (integrated weighted cluster loglikelihood)
    over (beta, sigma2, theta), with beta and sigma2 profiled out.  Point
    estimation only; its variance estimation is not provided here.
    """
    options = options or FitOptions()
    if isinstance(formula, str):
        formula = parse_formula(formula)
    if isinstance(scaling, str):
        scaling = WeightScaling(variant=scaling)
    frame = build_model_frame(table, formula)
    checked = validate_design(design)
    _check_group_agreement(table, frame, checked, design)
    w1, w_cond = scale_weights(checked, scaling)
    stats = cluster_stats(frame.y, frame.X, frame.Z, checked.group_rows,
                          w_cond=w_cond, c_cluster=w1)
    if options.theta0 is None:
        try:
            ml = fit_ml(table, formula, options=FitOptions(
                rho_begin=options.rho_begin, rho_end=options.rho_end))
            options = FitOptions(**{**options.__dict__,
                                    "theta0": ml.theta.free})
        except FitError:
            options = FitOptions(**{**options.__dict__,
                                    "theta0": _default_theta0(
                                        frame.structure)})
    fit = _fit_profiled(stats, frame, f"stagewise-{scaling.variant}",
                        options, n_obs=frame.n)
    return fit


def _check_group_agreement(table, frame: ModelFrame,
                           checked: CheckedDesign, design) -> None:
    """Model grouping factor must induce the same partition as the design."""
    col = np.asarray(table[frame.grouping_factor])
    _, model_codes = np.unique(col, return_inverse=True)
    _, design_codes = np.unique(np.asarray(design.group),
                                return_inverse=True)
    if not np.array_equal(model_codes, design_codes):
        raise FitError(
            f"grouping factor {frame.grouping_factor!r} does not match "
            "the design's group column")
