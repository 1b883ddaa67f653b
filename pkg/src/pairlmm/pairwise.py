"""Design-weighted pairwise composite likelihood estimation.

Within-group pairs of observations are stacked into flat arrays once,
after which every profile-deviance evaluation is a handful of batched
closed-form 2x2 operations:

    beta_theta   = GLS over the stacked pair rows, pair-block weighted
    sigma2_theta = sum_w r' Xi^-1 r / (2 * hatN)
    dev(theta)   = 2 * hatN * log(2 pi sigma2_theta) + sum_w log|Xi|

with hatN the sum of the pair weights 1/pi_pair.  The variance parameter
theta is then minimized by the bound-constrained optimizer in
:mod:`pairlmm.boxmin`.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import qr

from . import boxmin
from .data import ModelFrame, build_model_frame
from .design import CheckedDesign, SurveyDesign, validate_design
from .formula import ModelFormula, parse_formula
from .kernels import ThetaParam, ThetaStructure, batched_pair_terms, theta_to_V


class FitError(RuntimeError):
    """Estimation could not be completed."""


class DegenerateFitError(FitError):
    """The profiled residual variance collapsed to zero (perfect fit)."""


class CollinearityError(FitError):
    """Rank-deficient fixed-effect design in the weighted normal matrix."""


@dataclass
class PairSet:
    """Stacked within-group pairs with their design weights.

    ``w`` is the point-estimation weight 1/pi_pair per pair (both rows of
    a pair share it); ``w_var`` is the variability weight
    (1/pi_1) / (pi_j|i * pi_k|i) used in the sandwich J-hat.
    """

    Y: np.ndarray              # (n_pairs, 2)
    X: np.ndarray              # (n_pairs, 2, p)
    Z: np.ndarray              # (n_pairs, 2, q)
    w: np.ndarray              # (n_pairs,)
    w_var: np.ndarray          # (n_pairs,)
    p1: np.ndarray             # (n_pairs,) stage-1 probability of the group
    group_of_pair: np.ndarray  # (n_pairs,) group code
    psu_of_pair: np.ndarray    # (n_pairs,) psu code
    stratum_of_psu: np.ndarray  # (n_psu,) stratum code per psu
    pair_rows: np.ndarray      # (n_pairs, 2) original row indices
    singletons_dropped: int = 0

    def __post_init__(self):
        if np.any(self.w <= 0) or not np.all(np.isfinite(self.w)):
            raise FitError("pair weights must be positive and finite")

    @property
    def n_pairs(self) -> int:
        return self.w.shape[0]

    @property
    def hat_n(self) -> float:
        return float(np.sum(self.w))

    @property
    def p(self) -> int:
        return self.X.shape[2]

    @property
    def q(self) -> int:
        return self.Z.shape[2]

    def scaled(self, c: float) -> "PairSet":
        """A copy with every weight multiplied by ``c > 0``."""
        if c <= 0:
            raise ValueError("weight scale must be positive")
        return replace(self, w=self.w * c, w_var=self.w_var * c)

    def reweighted(self, psu_multiplier: np.ndarray) -> "PairSet":
        """A copy with each pair's weights scaled by its PSU multiplier."""
        m = np.asarray(psu_multiplier, dtype=float)[self.psu_of_pair]
        keep = m > 0
        return replace(
            self,
            Y=self.Y[keep], X=self.X[keep], Z=self.Z[keep],
            w=self.w[keep] * m[keep], w_var=self.w_var[keep] * m[keep],
            p1=self.p1[keep],
            group_of_pair=self.group_of_pair[keep],
            psu_of_pair=self.psu_of_pair[keep],
            pair_rows=self.pair_rows[keep],
        )


def enumerate_pairs(frame: ModelFrame, checked: CheckedDesign) -> PairSet:
    """Enumerate all within-group pairs (j < k) with their weights.

    Groups of size one contribute no pairs and are tallied in
    ``singletons_dropped``.  Pair order is fixed by (group, j, k) so that
    accumulation order, and hence floating-point results, are
    reproducible run to run.
    """
    Y2, X2, Z2, w, wv, p1l, gidx, uidx, rows = [], [], [], [], [], [], [], [], []
    singletons = 0
    for g, grows in enumerate(checked.group_rows):
        m = grows.size
        if m < 2:
            singletons += 1
            continue
        probs = checked.pair_prob[g]
        if probs is None:
            raise FitError(
                f"missing pair probabilities for group "
                f"{checked.group_keys[g]!r}")
        pi1 = checked.p1_group[g]
        p2 = checked.p2[grows]
        jj, kk = np.triu_indices(m, k=1)
        Y2.append(np.stack([_take(frame.y, grows[jj]),
                            _take(frame.y, grows[kk])], axis=1))
        X2.append(np.stack([frame.X[grows[jj]], frame.X[grows[kk]]], axis=1))
        Z2.append(np.stack([frame.Z[grows[jj]], frame.Z[grows[kk]]], axis=1))
        pp = probs[jj, kk]
        w.append(1.0 / (pi1 * pp))
        wv.append(1.0 / (pi1 * p2[jj] * p2[kk]))
        p1l.append(np.full(jj.size, pi1))
        gidx.append(np.full(jj.size, g))
        uidx.append(np.full(jj.size, checked.psu_of_group[g]))
        rows.append(np.stack([grows[jj], grows[kk]], axis=1))
    if not Y2:
        raise FitError("no pairs available: every group has a single "
                       "observation")
    return PairSet(
        Y=np.concatenate(Y2), X=np.concatenate(X2), Z=np.concatenate(Z2),
        w=np.concatenate(w), w_var=np.concatenate(wv),
        p1=np.concatenate(p1l),
        group_of_pair=np.concatenate(gidx),
        psu_of_pair=np.concatenate(uidx),
        stratum_of_psu=checked.stratum_of_psu.copy(),
        pair_rows=np.concatenate(rows),
        singletons_dropped=singletons,
    )


def _take(y: np.ndarray, idx: np.ndarray) -> np.ndarray:
    return y[idx]


@dataclass
class PairKernelPieces:
    """Batched 2x2 kernel terms at a fixed theta."""

    a: np.ndarray
    b: np.ndarray
    d: np.ndarray
    det: np.ndarray
    logdet: np.ndarray

    def apply_inverse(self, R: np.ndarray) -> np.ndarray:
        """Xi^-1 @ R for stacked pair 2-row blocks R of shape (n, 2, ...)."""
        a = self.a[:, None] if R.ndim == 3 else self.a
        b = self.b[:, None] if R.ndim == 3 else self.b
        d = self.d[:, None] if R.ndim == 3 else self.d
        det = self.det[:, None] if R.ndim == 3 else self.det
        top = (d * R[:, 0] - b * R[:, 1]) / det
        bot = (-b * R[:, 0] + a * R[:, 1]) / det
        return np.stack([top, bot], axis=1)

    def quad_form(self, r: np.ndarray) -> np.ndarray:
        """r' Xi^-1 r for stacked residual 2-vectors r of shape (n, 2)."""
        return (self.d * r[:, 0] ** 2 - 2.0 * self.b * r[:, 0] * r[:, 1]
                + self.a * r[:, 1] ** 2) / self.det


def pair_pieces(pairs: PairSet, L: np.ndarray) -> PairKernelPieces:
    a, b, d, det, logdet = batched_pair_terms(L, pairs.Z)
    return PairKernelPieces(a=a, b=b, d=d, det=det, logdet=logdet)


def _solve_normal(A: np.ndarray, rhs: np.ndarray,
                  names: list[str] | None) -> np.ndarray:
    """Solve the GLS normal equations with one refinement step.

    On rank deficiency, a pivoted QR of the normal matrix identifies the
    collinear columns for the error message.
    """
    try:
        c = np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        _, R, piv = qr(A, pivoting=True)
        diag = np.abs(np.diag(R))
        bad = piv[diag <= diag.max() * 1e-10]
        labels = [names[i] if names else str(i) for i in sorted(bad)]
        raise CollinearityError(
            "weighted normal matrix is rank deficient; collinear "
            f"columns: {labels}") from None
    beta = _cho_solve(c, rhs)
    beta += _cho_solve(c, rhs - A @ beta)  # one step of refinement
    return beta


def _cho_solve(c: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    z = np.linalg.solve(c, rhs)
    return np.linalg.solve(c.T, z)


def gls_beta(pairs: PairSet, theta: ThetaParam,
             names: list[str] | None = None) -> np.ndarray:
    """Profile GLS estimate of beta at a fixed theta."""
    pieces = pair_pieces(pairs, theta.L)
    return _gls_beta_pieces(pairs, pieces, names)


def _gls_beta_pieces(pairs, pieces, names=None):
    XiX = pieces.apply_inverse(pairs.X)          # (n, 2, p)
    XiY = pieces.apply_inverse(pairs.Y)          # (n, 2)
    wX = pairs.w[:, None, None] * pairs.X
    A = np.einsum("nia,nib->ab", wX, XiX)
    rhs = np.einsum("nia,ni->a", wX, XiY)
    return _solve_normal(A, rhs, names)


def profile_sigma2(pairs: PairSet, theta: ThetaParam,
                   beta: np.ndarray) -> float:
    """Profiled residual variance at (theta, beta)."""
    pieces = pair_pieces(pairs, theta.L)
    return _profile_sigma2_pieces(pairs, pieces, beta)


def _profile_sigma2_pieces(pairs, pieces, beta) -> float:
    r = pairs.Y - pairs.X @ beta
    quad = pieces.quad_form(r)
    return float(np.sum(pairs.w * quad) / (2.0 * pairs.hat_n))


def profile_deviance(pairs: PairSet, theta: ThetaParam) -> float:
    """Profile pairwise deviance d(theta); see module docstring."""
    return PairwiseObjective(pairs, theta.structure)(theta.free)


class PairwiseObjective:
    """Callable profile deviance over the free theta parameters.

    Caches the profiled (beta, sigma2) of the latest evaluation and
    counts evaluations and pair touches (each evaluation touches every
    pair exactly once).
    """

    def __init__(self, pairs: PairSet, structure: ThetaStructure,
                 names: list[str] | None = None):
        self.pairs = pairs
        self.structure = structure
        self.names = names
        self.n_evals = 0
        self.last_pairs_touched = 0
        self.last_beta: np.ndarray | None = None
        self.last_sigma2: float = np.nan

    def __call__(self, free: np.ndarray) -> float:
        L = self.structure.expand(free)
        pieces = pair_pieces(self.pairs, L)
        beta = _gls_beta_pieces(self.pairs, pieces, self.names)
        sigma2 = _profile_sigma2_pieces(self.pairs, pieces, beta)
        self.n_evals += 1
        self.last_pairs_touched = self.pairs.n_pairs
        self.last_beta = beta
        self.last_sigma2 = sigma2
        if sigma2 <= 0.0:
            raise DegenerateFitError(
                "profiled residual variance is zero (perfect fit)")
        return float(2.0 * self.pairs.hat_n * np.log(2.0 * np.pi * sigma2)
                     + np.sum(self.pairs.w * pieces.logdet))


@dataclass
class FitOptions:
    """Knobs shared by all fit drivers.

    ``rho_begin`` deliberately overrides the generic boxmin default with
    a value matched to the scale of the variance-parameter box.
    ``weight_scale`` multiplies every pair weight (a diagnostic knob:
    estimates are invariant to it).
    """

    rho_begin: float = 0.5
    rho_end: float = 1e-6
    max_evals: int | None = None
    theta0: np.ndarray | None = None
    restart: bool = True
    weight_scale: float = 1.0


@dataclass
class FitResult:
    """Point estimates and diagnostics from one estimator run."""

    method: str
    beta: np.ndarray
    beta_names: list[str]
    sigma2: float
    theta: ThetaParam
    vc_names: list[str]
    deviance: float
    converged: bool
    evaluations: int
    boundary: bool
    n_obs: int
    n_groups: int
    n_pairs: int | None = None
    hat_n_pairs: float | None = None
    singletons_dropped: int = 0

    @property
    def V(self) -> np.ndarray:
        """Estimated random-effect covariance sigma2 * V(theta)."""
        return self.sigma2 * theta_to_V(self.theta)

    @property
    def vc_values(self) -> np.ndarray:
        """Free variance components of V (order matches ``vc_names``)."""
        V = self.V
        return np.array([V[i, j]
                         for i, j in self.theta.structure.free_index_pairs()])

    def parameters(self) -> dict[str, float]:
        out = {n: float(v) for n, v in zip(self.beta_names, self.beta)}
        for n, v in zip(self.vc_names, self.vc_values):
            out[n] = float(v)
        out["sigma2"] = float(self.sigma2)
        return out


def _minimize_theta(objective, structure: ThetaStructure,
                    theta0: np.ndarray, options: FitOptions):
    lower, upper = structure.bounds()
    theta0 = np.clip(theta0, lower, upper)
    problem = boxmin.BoxProblem(
        objective=objective,
        lower=lower, upper=upper, start=theta0,
        rho_begin=options.rho_begin, rho_end=options.rho_end,
        max_evals=options.max_evals,
    )
    result = boxmin.minimize(problem)
    if (not result.converged) and options.restart:
        # one restart from a perturbed start; variance fits are sometimes
        # sensitive near the boundary of the parameter space
        bumped = theta0.copy()
        for pos, (i, j) in enumerate(structure.free_index_pairs()):
            if i == j:
                bumped[pos] += 0.1
        problem = boxmin.BoxProblem(
            objective=objective,
            lower=lower, upper=upper,
            start=np.clip(bumped, lower, upper),
            rho_begin=options.rho_begin, rho_end=options.rho_end,
            max_evals=options.max_evals,
        )
        retry = boxmin.minimize(problem)
        if retry.value < result.value or retry.converged:
            retry.evaluations += result.evaluations
            result = retry
    return result


def fit_pairwise_from_pairs(pairs: PairSet, structure: ThetaStructure,
                            theta0: np.ndarray,
                            options: FitOptions | None = None,
                            beta_names: list[str] | None = None,
                            vc_names: list[str] | None = None,
                            n_obs: int = 0, n_groups: int = 0) -> FitResult:
    """Minimize the profile pairwise deviance from a prepared PairSet."""
    options = options or FitOptions()
    if options.weight_scale != 1.0:
        pairs = pairs.scaled(options.weight_scale)
    objective = PairwiseObjective(pairs, structure, beta_names)
    result = _minimize_theta(objective, structure, theta0, options)
    dev = objective(result.x)  # refresh cache at the optimum
    theta = ThetaParam.from_free(structure, result.x)
    return FitResult(
        method="pairwise",
        beta=objective.last_beta.copy(),
        beta_names=list(beta_names or []),
        sigma2=objective.last_sigma2,
        theta=theta,
        vc_names=list(vc_names or []),
        deviance=dev,
        converged=result.converged,
        evaluations=result.evaluations + 1,
        boundary=theta.boundary(),
        n_obs=n_obs,
        n_groups=n_groups,
        n_pairs=pairs.n_pairs,
        hat_n_pairs=pairs.hat_n,
        singletons_dropped=pairs.singletons_dropped,
    )


def fit_pairwise(table, design: SurveyDesign,
                 formula: ModelFormula | str,
                 options: FitOptions | None = None) -> FitResult:
    """Design-weighted pairwise composite likelihood fit.

    The starting value for theta comes from an unweighted (naive)
    maximum-likelihood fit; if that fails, from a small positive diagonal.

    Args:
        table: mapping column name -> 1-D array.
        design: survey design metadata (validated here).
        formula: model formula (string or parsed).
        options: optimizer and weighting knobs.

    Returns:
        FitResult for the pairwise estimator.
    """
    from .reference import fit_ml  # cycle: reference builds on this module

    from .reference import _check_group_agreement

    options = options or FitOptions()
    if isinstance(formula, str):
        formula = parse_formula(formula)
    frame = build_model_frame(table, formula)
    checked = validate_design(design)
    _check_group_agreement(table, frame, checked, design)
    pairs = enumerate_pairs(frame, checked)

    if options.theta0 is not None:
        theta0 = np.asarray(options.theta0, dtype=float)
    else:
        try:
            ml = fit_ml(table, formula, options=FitOptions(
                rho_begin=options.rho_begin, rho_end=options.rho_end))
            theta0 = ml.theta.free
        except FitError:
            theta0 = _default_theta0(frame.structure)
    return fit_pairwise_from_pairs(
        pairs, frame.structure, theta0, options,
        beta_names=frame.x_names, vc_names=frame.vc_names(),
        n_obs=frame.n, n_groups=checked.n_groups,
    )


def _default_theta0(structure: ThetaStructure) -> np.ndarray:
    free = np.zeros(structure.n_free)
    for pos, (i, j) in enumerate(structure.free_index_pairs()):
        if i == j:
            free[pos] = 0.1
    return free


def pairwise_diagnostics(fit: FitResult, pairs: PairSet,
                         h: float = 1e-4) -> dict[str, float]:
    """Estimating-equation root and first-order optimality at the fit.

    Returns:
        ``score_max_abs``: max |sum of weighted beta-scores| (zero at the
        exact GLS solution); ``fd_min_slope``: smallest one-sided finite
        difference of the profile deviance at theta-hat along feasible
        coordinate directions (non-negative at a box-constrained
        minimum, up to curvature of order h).
    """
    pieces = pair_pieces(pairs, fit.theta.L)
    r = pairs.Y - pairs.X @ fit.beta
    Xir = pieces.apply_inverse(r)
    U = np.einsum("nia,ni->na", pairs.X, Xir) / fit.sigma2
    score = (pairs.w[:, None] * U).sum(axis=0)

    objective = PairwiseObjective(pairs, fit.theta.structure)
    free = fit.theta.free
    lower, upper = fit.theta.structure.bounds()
    f0 = objective(free)
    slopes = []
    for i in range(free.size):
        for sgn in (1.0, -1.0):
            x = free.copy()
            x[i] += sgn * h
            if x[i] < lower[i] or x[i] > upper[i]:
                continue
            slopes.append((objective(x) - f0) / h)
    return {
        "score_max_abs": float(np.max(np.abs(score))),
        "fd_min_slope": float(min(slopes)) if slopes else np.inf,
    }
