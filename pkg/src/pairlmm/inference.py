"""Variance estimation: sandwich for beta, resampling for the rest.

The sandwich treats weighted score totals for first-stage units within
each stratum as with-replacement draws:

    H = sum of weighted pair informations  (1/sigma2) X' Xi^-1 X
    J = sum_h n_h/(n_h-1) sum_{l in h} (total score of PSU l)^x2
    var(beta) = H^-1 J H^-1

Uncertainty in the variance parameters comes from a rescaling bootstrap
(n_h - 1 PSUs drawn with replacement per stratum, weights multiplied by
count * n_h/(n_h-1)), refitting the profile deviance per replicate.
Rubin's rules combine fits across plausible values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .pairwise import (
    FitError,
    FitOptions,
    FitResult,
    PairSet,
    fit_pairwise_from_pairs,
    pair_pieces,
)


class VarianceError(FitError):
    """Variance estimation is not possible for this design."""


@dataclass
class SandwichPieces:
    """Sensitivity/variability matrices and the variance of beta."""

    H_hat: np.ndarray
    J_hat: np.ndarray
    var_beta: np.ndarray
    df: int

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.maximum(np.diag(self.var_beta), 0.0))


def pair_scores_beta(fit: FitResult, pairs: PairSet) -> np.ndarray:
    """Score of every pair loglikelihood in beta, (n_pairs, p).

    U = (1/sigma2) X' Xi^-1 (Y - X beta) evaluated at the fit.
    """
    pieces = pair_pieces(pairs, fit.theta.L)
    r = pairs.Y - pairs.X @ fit.beta
    Xir = pieces.apply_inverse(r)
    return np.einsum("nia,ni->na", pairs.X, Xir) / fit.sigma2


def pair_score_beta(fit: FitResult, pairs: PairSet, index: int) -> np.ndarray:
    """Score of a single pair (see :func:`pair_scores_beta`)."""
    return pair_scores_beta(fit, pairs)[index]


def sandwich_beta(fit: FitResult, pairs: PairSet,
                  h_weights: str = "pair",
                  j_weights: str = "pair") -> SandwichPieces:
    """Design-based sandwich variance of the fixed effects.

    Args:
        fit: converged pairwise fit.
        pairs: the PairSet the fit was computed from.
        h_weights: weighting inside H-hat: ``"pair"`` (default) uses the
            same 1/pi_pair weights as point estimation, so H is the
            derivative of the score actually solved; ``"product"`` uses
            the product of unconditional second-order marginals
            1/(pi_ij pi_ik) instead.
        j_weights: weighting of the pair scores inside the PSU totals of
            J-hat: ``"pair"`` (default) matches the estimating equation
            (1/pi_pair); ``"product"`` uses the product of conditional
            marginals 1/(pi_i pi_j|i pi_k|i), a with-replacement
            approximation that understates J when within-group sampling
            fractions are far from independent.

    Raises:
        VarianceError: if any stratum has a single PSU.
    """
    pieces = pair_pieces(pairs, fit.theta.L)
    if h_weights == "pair":
        wH = pairs.w
    elif h_weights == "product":
        wH = pairs.w_var / pairs.p1
    else:
        raise ValueError(f"unknown h_weights {h_weights!r}")

    XiX = pieces.apply_inverse(pairs.X)
    H = np.einsum("nia,nib->ab", wH[:, None, None] * pairs.X, XiX) \
        / fit.sigma2
    H = 0.5 * (H + H.T)

    if j_weights == "pair":
        wJ = pairs.w
    elif j_weights == "product":
        wJ = pairs.w_var
    else:
        raise ValueError(f"unknown j_weights {j_weights!r}")
    U = pair_scores_beta(fit, pairs)
    wU = wJ[:, None] * U
    n_psu = pairs.stratum_of_psu.shape[0]
    p = pairs.p
    totals = np.zeros((n_psu, p))
    np.add.at(totals, pairs.psu_of_pair, wU)

    n_strata = int(pairs.stratum_of_psu.max()) + 1
    n_h = np.bincount(pairs.stratum_of_psu, minlength=n_strata)
    if np.any(n_h == 1):
        bad = np.flatnonzero(n_h == 1)
        raise VarianceError(
            f"strata with a single PSU: {bad.tolist()} (no "
            "with-replacement contrast available)")
    J = np.zeros((p, p))
    for h in range(n_strata):
        sel = pairs.stratum_of_psu == h
        T = totals[sel]
        J += n_h[h] / (n_h[h] - 1.0) * (T.T @ T)
    J = 0.5 * (J + J.T)

    Hinv = np.linalg.inv(H)
    var = Hinv @ J @ Hinv
    var = 0.5 * (var + var.T)
    return SandwichPieces(H_hat=H, J_hat=J, var_beta=var,
                          df=int(n_psu - n_strata))


@dataclass
class ReplicateSet:
    """Bootstrap replicate estimates and the implied standard errors."""

    R: int
    beta: np.ndarray        # (R_ok, p)
    sigma2: np.ndarray      # (R_ok,)
    theta: np.ndarray       # (R_ok, n_free)
    vc: np.ndarray          # (R_ok, n_free) variance components sigma2*V
    multipliers: np.ndarray  # (R_ok, n_psu)
    n_failed: int

    def se(self) -> dict[str, np.ndarray]:
        return {
            "beta": np.std(self.beta, axis=0, ddof=1),
            "sigma2": float(np.std(self.sigma2, ddof=1)),
            "vc": np.std(self.vc, axis=0, ddof=1),
            "theta": np.std(self.theta, axis=0, ddof=1),
        }


def _replicate_multipliers(stratum_of_psu: np.ndarray,
                           rng: np.random.Generator) -> np.ndarray:
    """Rao-Wu rescaling multipliers: count * n_h/(n_h-1) from n_h-1 draws."""
    n_psu = stratum_of_psu.shape[0]
    mult = np.zeros(n_psu)
    n_strata = int(stratum_of_psu.max()) + 1
    for h in range(n_strata):
        members = np.flatnonzero(stratum_of_psu == h)
        n_h = members.size
        if n_h < 2:
            raise VarianceError(
                f"stratum {h} has a single PSU; cannot bootstrap")
        draws = rng.integers(0, n_h, size=n_h - 1)
        counts = np.bincount(draws, minlength=n_h)
        mult[members] = counts * (n_h / (n_h - 1.0))
    return mult


def bootstrap_fit(fit: FitResult, pairs: PairSet, replicates: int,
                  seed: int, options: FitOptions | None = None,
                  max_failure_rate: float = 0.10) -> ReplicateSet:
    """Rescaling bootstrap of the pairwise fit.

    Each replicate resamples n_h - 1 PSUs with replacement within every
    stratum, rescales the pair weights by the PSU multipliers, and
    refits theta (and with it sigma2 and beta) starting from the
    original estimate.  Replicates get independent substreams of the
    seeded generator, so results do not depend on evaluation order.

    Raises:
        FitError: if more than ``max_failure_rate`` of replicates fail.
    """
    if replicates < 2:
        raise ValueError("need at least 2 bootstrap replicates")
    base = options or FitOptions()
    opts = FitOptions(**{**base.__dict__,
                         "rho_begin": min(base.rho_begin, 0.2),
                         "theta0": None, "restart": False})
    streams = np.random.SeedSequence(seed).spawn(replicates)
    beta, sigma2, theta, vc, mults = [], [], [], [], []
    failed = 0
    for r in range(replicates):
        rng = np.random.default_rng(streams[r])
        mult = _replicate_multipliers(pairs.stratum_of_psu, rng)
        try:
            rep_pairs = pairs.reweighted(mult)
            rep = fit_pairwise_from_pairs(
                rep_pairs, fit.theta.structure, fit.theta.free, opts,
                beta_names=fit.beta_names, vc_names=fit.vc_names)
        except FitError:
            failed += 1
            continue
        beta.append(rep.beta)
        sigma2.append(rep.sigma2)
        theta.append(rep.theta.free)
        vc.append(rep.vc_values)
        mults.append(mult)
    if failed > max_failure_rate * replicates:
        raise FitError(
            f"bootstrap failed in {failed}/{replicates} replicates")
    return ReplicateSet(
        R=replicates,
        beta=np.asarray(beta),
        sigma2=np.asarray(sigma2),
        theta=np.asarray(theta),
        vc=np.asarray(vc),
        multipliers=np.asarray(mults),
        n_failed=failed,
    )


@dataclass
class CombinedResult:
    """Rubin-combined estimates across plausible-value fits."""

    names: list[str]
    estimate: np.ndarray
    se: np.ndarray
    df: np.ndarray
    within: np.ndarray
    between: np.ndarray
    m: int


def rubin_combine(estimates: np.ndarray, variances: np.ndarray,
                  names: list[str] | None = None) -> CombinedResult:
    """Combine M fits on multiply-imputed data by Rubin's rules.

    Args:
        estimates: (M, P) point estimates.
        variances: (M, P) squared standard errors.

    Returns:
        CombinedResult with total variance T = W + (1 + 1/M) B and
        degrees of freedom (M-1) (1 + W / ((1+1/M) B))^2; df is +inf
        where the between-imputation variance is zero.
    """
    est = np.atleast_2d(np.asarray(estimates, dtype=float))
    var = np.atleast_2d(np.asarray(variances, dtype=float))
    if est.shape != var.shape:
        raise ValueError("estimates and variances must have equal shape")
    M, P = est.shape
    if M < 2:
        raise ValueError("Rubin combining needs M >= 2 fits")
    point = est.mean(axis=0)
    W = var.mean(axis=0)
    B = est.var(axis=0, ddof=1)
    T = W + (1.0 + 1.0 / M) * B
    with np.errstate(divide="ignore"):
        ratio = np.where(B > 0, W / ((1.0 + 1.0 / M) * B), np.inf)
    df = (M - 1.0) * (1.0 + ratio) ** 2
    return CombinedResult(
        names=list(names) if names is not None else
        [f"p{i}" for i in range(P)],
        estimate=point,
        se=np.sqrt(T),
        df=df,
        within=W,
        between=B,
        m=M,
    )
