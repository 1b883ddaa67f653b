"""Survey-design representation and pairwise sampling probabilities.

A two-stage design is described per observation: stratum, first-stage
unit (PSU), model group (equal to or nested in the PSU), the group's
first-stage selection probability, and the conditional inclusion
probability of each observation given its group.  Point estimation needs
the conditional probability that a *pair* of observations in the same
group is jointly sampled; this module computes it exactly under
simple random sampling and otherwise by Hajek's approximation from the
marginal probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

#: Lower clamp for approximated pair probabilities; keeps weights finite
#: when the approximation degenerates for extreme marginals.
PAIR_PROB_FLOOR = 1e-12


class DesignError(ValueError):
    """Invalid survey-design metadata."""


def pair_probability_srs(n: int, N: int) -> float:
    """Joint inclusion probability of a pair under without-replacement SRS.

    Args:
        n: sample size within the group (must be >= 2 to form pairs).
        N: population size of the group.

    Returns:
        n (n - 1) / (N (N - 1)).
    """
    if n < 2:
        raise DesignError(f"no pairs available from a sample of size {n}")
    if n > N:
        raise DesignError(f"sample size {n} exceeds population size {N}")
    return n * (n - 1) / (N * (N - 1))


def hajek_pair_approx(pi: np.ndarray, sampled: np.ndarray) -> np.ndarray:
    """Approximate joint inclusion probabilities from marginal ones.

    Uses pi_jk ~= pi_j pi_k [1 - (1-pi_j)(1-pi_k)/D] with
    D = sum over sampled units of (1 - pi_k), the unbiased estimate of
    sum_k pi_k (1 - pi_k).  When D = 0 every unit is a certainty unit and
    the exact product pi_j pi_k = 1 is returned.

    Args:
        pi: marginal inclusion probabilities for all units in the group.
        sampled: boolean inclusion flags, same length as ``pi``.

    Returns:
        (s, s) symmetric array over the sampled units (in their original
        order) with the approximated pair probabilities off the diagonal,
        clamped into (PAIR_PROB_FLOOR, min(pi_j, pi_k)].  The diagonal
        holds the marginal probabilities.
    """
    pi = np.asarray(pi, dtype=float)
    sampled = np.asarray(sampled, dtype=bool)
    if pi.shape != sampled.shape:
        raise DesignError("pi and sampled must have the same length")
    if np.any(pi <= 0) or np.any(pi > 1):
        raise DesignError("marginal probabilities must be in (0, 1]")
    ps = pi[sampled]
    s = ps.size
    if s < 2:
        raise DesignError("need at least 2 sampled units to form pairs")
    denom = float(np.sum(1.0 - ps))
    outer = np.outer(ps, ps)
    if denom > 0.0:
        resid = np.outer(1.0 - ps, 1.0 - ps) / denom
        out = outer * (1.0 - resid)
    else:
        out = outer  # census: exact
    cap = np.minimum.outer(ps, ps)
    out = np.clip(out, PAIR_PROB_FLOOR, cap)
    np.fill_diagonal(out, ps)
    return out


@dataclass
class SurveyDesign:
    """Per-observation design metadata (see module docstring).

    ``p_pair`` and ``pop_cluster_size``, when given, must be constant
    within each group; ``p_pair`` is the common conditional probability of
    every within-group pair (as under SRS).
    """

    stratum: np.ndarray
    psu: np.ndarray
    group: np.ndarray
    p_stage1: np.ndarray
    p_stage2: np.ndarray
    p_pair: np.ndarray | None = None
    pop_cluster_size: np.ndarray | None = None

    def __post_init__(self):
        self.stratum = np.asarray(self.stratum)
        self.psu = np.asarray(self.psu)
        self.group = np.asarray(self.group)
        self.p_stage1 = np.asarray(self.p_stage1, dtype=float)
        self.p_stage2 = np.asarray(self.p_stage2, dtype=float)
        if self.p_pair is not None:
            self.p_pair = np.asarray(self.p_pair, dtype=float)
        if self.pop_cluster_size is not None:
            self.pop_cluster_size = np.asarray(self.pop_cluster_size,
                                               dtype=float)
        n = self.group.shape[0]
        for name in ("stratum", "psu", "p_stage1", "p_stage2"):
            if getattr(self, name).shape[0] != n:
                raise DesignError(f"design column {name!r} has wrong length")

    @property
    def n_obs(self) -> int:
        return self.group.shape[0]


@dataclass
class CheckedDesign:
    """Validated design with per-group pair probabilities filled in."""

    group_keys: list
    group_rows: list[np.ndarray]        # row indices per group
    psu_of_group: np.ndarray            # psu code per group
    stratum_of_psu: np.ndarray          # stratum code per psu
    psu_keys: list
    stratum_keys: list
    p1_group: np.ndarray                # first-stage probability per group
    p2: np.ndarray                      # conditional probability per obs
    pair_prob: list[np.ndarray | None]  # per group: (m, m) conditional probs
    provenance: dict[str, int] = field(default_factory=dict)
    pop_size_group: np.ndarray | None = None

    @property
    def n_groups(self) -> int:
        return len(self.group_keys)

    @property
    def n_psus(self) -> int:
        return len(self.psu_keys)

    @property
    def n_strata(self) -> int:
        return len(self.stratum_keys)

    def psus_per_stratum(self) -> np.ndarray:
        return np.bincount(self.stratum_of_psu,
                           minlength=self.n_strata)


def rows_by_code(codes: np.ndarray, n_codes: int) -> list[np.ndarray]:
    """Row indices per code value, in original row order, O(n log n)."""
    order = np.argsort(codes, kind="stable")
    bounds = np.searchsorted(codes[order], np.arange(n_codes + 1))
    return [order[bounds[g]:bounds[g + 1]] for g in range(n_codes)]


def _constant_within(values: np.ndarray, rows: np.ndarray, what: str,
                     key) -> float:
    v = values[rows]
    if np.ptp(v) > 1e-12 * max(1.0, abs(float(v[0]))):
        raise DesignError(f"{what} is not constant within group {key!r}")
    return float(v[0])


def validate_design(design: SurveyDesign) -> CheckedDesign:
    """Check nesting invariants and fill conditional pair probabilities.

    Each group gets its (m, m) matrix of conditional pair probabilities:
    from the supplied ``p_pair`` column when present, else the exact SRS
    formula when the stage-2 probabilities within the group are constant
    and consistent with an integer population size, else Hajek's
    approximation.  The chosen path is tallied in ``provenance``.
    """
    if np.any(design.p_stage1 <= 0) or np.any(design.p_stage1 > 1):
        raise DesignError("stage-1 probabilities must be in (0, 1]")
    if np.any(design.p_stage2 <= 0) or np.any(design.p_stage2 > 1):
        raise DesignError("stage-2 probabilities must be in (0, 1]")

    group_keys, group_inv = np.unique(design.group, return_inverse=True)
    psu_keys, psu_inv = np.unique(design.psu, return_inverse=True)
    stratum_keys, stratum_inv = np.unique(design.stratum,
                                          return_inverse=True)

    n_groups = len(group_keys)
    group_rows = rows_by_code(group_inv, n_groups)

    # nesting: group -> unique PSU, PSU -> unique stratum
    psu_of_group = np.empty(n_groups, dtype=int)
    for g, rows in enumerate(group_rows):
        psus = np.unique(psu_inv[rows])
        if psus.size != 1:
            raise DesignError(
                f"group {group_keys[g]!r} spans {psus.size} PSUs")
        psu_of_group[g] = psus[0]
    stratum_of_psu = np.empty(len(psu_keys), dtype=int)
    for u, rows in enumerate(rows_by_code(psu_inv, len(psu_keys))):
        strata = np.unique(stratum_inv[rows])
        if strata.size != 1:
            raise DesignError(
                f"PSU {psu_keys[u]!r} spans {strata.size} strata")
        stratum_of_psu[u] = strata[0]

    p1_group = np.empty(n_groups)
    pop_size = None
    if design.pop_cluster_size is not None:
        pop_size = np.empty(n_groups)

    provenance = {"supplied": 0, "srs_exact": 0, "hajek": 0, "singleton": 0}
    pair_prob: list[np.ndarray | None] = []
    for g, rows in enumerate(group_rows):
        key = group_keys[g]
        p1_group[g] = _constant_within(design.p_stage1, rows,
                                       "stage-1 probability", key)
        if pop_size is not None:
            pop_size[g] = _constant_within(design.pop_cluster_size, rows,
                                           "population cluster size", key)
        m = rows.size
        p2 = design.p_stage2[rows]
        if m < 2:
            pair_prob.append(None)
            provenance["singleton"] += 1
            continue
        if design.p_pair is not None:
            pp = _constant_within(design.p_pair, rows,
                                  "pair probability", key)
            if pp <= 0 or pp > min(p2) + 1e-12:
                raise DesignError(
                    f"pair probability out of range in group {key!r}: "
                    f"{pp} vs min marginal {min(p2)}")
            mat = np.full((m, m), pp)
            np.fill_diagonal(mat, p2)
            pair_prob.append(mat)
            provenance["supplied"] += 1
            continue
        # equal stage-2 probabilities consistent with SRS of an integer
        # population -> exact formula; otherwise Hajek.
        equal = np.ptp(p2) <= 1e-12
        N_implied = None
        if equal:
            if pop_size is not None:
                N_implied = pop_size[g]
                if abs(p2[0] - m / N_implied) > 1e-9:
                    N_implied = None
            else:
                cand = m / p2[0]
                if abs(cand - round(cand)) < 1e-6:
                    N_implied = round(cand)
        if N_implied is not None and N_implied >= m:
            pp = pair_probability_srs(m, int(round(N_implied)))
            mat = np.full((m, m), pp)
            np.fill_diagonal(mat, p2)
            pair_prob.append(mat)
            provenance["srs_exact"] += 1
        else:
            pair_prob.append(hajek_pair_approx(p2, np.ones(m, dtype=bool)))
            provenance["hajek"] += 1

    return CheckedDesign(
        group_keys=list(group_keys),
        group_rows=group_rows,
        psu_of_group=psu_of_group,
        stratum_of_psu=stratum_of_psu,
        psu_keys=list(psu_keys),
        stratum_keys=list(stratum_keys),
        p1_group=p1_group,
        p2=design.p_stage2.copy(),
        pair_prob=pair_prob,
        provenance=provenance,
        pop_size_group=pop_size,
    )
