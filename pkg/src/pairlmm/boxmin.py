"""Bound-constrained derivative-free minimization.

A deterministic quadratic-interpolation trust-region method: the
objective is sampled at the start point plus two points per coordinate
(2d+1 evaluations), a quadratic model is fit by least squares to the
points near the current best, and the model is minimized over the box
intersected with an infinity-norm trust region.  The sampling scale rho
shrinks tenfold whenever the model is stationary at the current
resolution, and the search stops when rho reaches ``rho_end``.

No randomized components: the same problem always produces the same
iterate sequence, and every evaluated point lies inside the box.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

_MAX_CONSECUTIVE_NONFINITE = 25


class BoxminError(RuntimeError):
    """Unrecoverable optimizer failure (carries recent evaluation trace)."""


@dataclass
class BoxProblem:
    """A box-constrained minimization problem for :func:`minimize`.

    ``rho_begin`` defaults to 0.2x the smallest box width, ``rho_end``
    to 1e-6 and ``max_evals`` to 500 per dimension.
    """

    objective: Callable[[np.ndarray], float]
    lower: np.ndarray
    upper: np.ndarray
    start: np.ndarray
    rho_begin: float | None = None
    rho_end: float = 1e-6
    max_evals: int | None = None

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=float)
        self.upper = np.asarray(self.upper, dtype=float)
        self.start = np.asarray(self.start, dtype=float)
        d = self.dim
        if self.lower.shape != (d,) or self.upper.shape != (d,):
            raise ValueError("bounds must match the dimension of start")
        if np.any(self.upper <= self.lower):
            raise ValueError("need upper > lower in every coordinate")
        if np.any(self.start < self.lower - 1e-12) \
                or np.any(self.start > self.upper + 1e-12):
            raise ValueError("start must lie inside the box")
        if self.rho_begin is None:
            self.rho_begin = 0.2 * float(np.min(self.upper - self.lower))
        if self.max_evals is None:
            self.max_evals = 500 * d
        if not self.rho_end < self.rho_begin:
            raise ValueError("rho_end must be smaller than rho_begin")
        if self.max_evals < 2 * d + 1:
            raise ValueError("max_evals must be at least 2d+1")

    @property
    def dim(self) -> int:
        return self.start.shape[0]


@dataclass
class MinimizeResult:
    x: np.ndarray
    value: float
    evaluations: int
    converged: bool
    message: str = ""


@dataclass
class _State:
    problem: BoxProblem
    points: list[np.ndarray] = field(default_factory=list)
    values: list[float] = field(default_factory=list)
    n_evals: int = 0
    consecutive_bad: int = 0

    def evaluate(self, x: np.ndarray) -> float:
        x = np.clip(x, self.problem.lower, self.problem.upper)
        f = float(self.problem.objective(x))
        self.n_evals += 1
        if not np.isfinite(f):
            self.consecutive_bad += 1
            if self.consecutive_bad >= _MAX_CONSECUTIVE_NONFINITE:
                trace = "; ".join(
                    f"f({np.array2string(p, precision=4)})={v:.4g}"
                    for p, v in zip(self.points[-5:], self.values[-5:]))
                raise BoxminError(
                    "objective persistently non-finite; recent trace: "
                    + trace)
            f = np.inf
        else:
            self.consecutive_bad = 0
        self.points.append(x.copy())
        self.values.append(f)
        return f


def _initial_offsets(x0, lower, upper, rho):
    """Two sample points per coordinate, respecting the box.

    Near a bound the pair (+rho, +2rho) or (-rho, -2rho) replaces the
    symmetric pair so all points stay feasible.
    """
    d = x0.shape[0]
    offsets = []
    for i in range(d):
        room_up = upper[i] - x0[i]
        room_dn = x0[i] - lower[i]
        if room_up >= rho and room_dn >= rho:
            offsets.append((i, rho))
            offsets.append((i, -rho))
        elif room_up >= room_dn:
            h = min(rho, room_up)
            offsets.append((i, h))
            offsets.append((i, min(2 * h, room_up)))
        else:
            h = min(rho, room_dn)
            offsets.append((i, -h))
            offsets.append((i, -min(2 * h, room_dn)))
    return offsets


def _fit_quadratic(points, values, center, scale):
    """Least-squares quadratic model in scaled coordinates.

    Returns (g, H) for m(s) = f(center) + g.s + 0.5 s'Hs with
    s = (x - center)/scale.  Uses the minimum-norm solution, so the model
    is well-defined (if rough) even with few points.
    """
    d = center.shape[0]
    S = (np.asarray(points) - center) / scale
    n = S.shape[0]
    cols = [np.ones(n)]
    cols.extend(S[:, i] for i in range(d))
    for i in range(d):
        for j in range(i, d):
            cols.append(S[:, i] * S[:, j])
    A = np.column_stack(cols)
    coef, *_ = np.linalg.lstsq(A, np.asarray(values), rcond=None)
    g = coef[1:d + 1]
    H = np.zeros((d, d))
    k = d + 1
    for i in range(d):
        for j in range(i, d):
            if i == j:
                H[i, i] = 2.0 * coef[k]
            else:
                H[i, j] = H[j, i] = coef[k]
            k += 1
    return g, H


def _solve_box_quadratic(g, H, lo, up, sweeps=80):
    """Minimize g.s + 0.5 s'Hs over the box [lo, up] (scaled coords).

    Cyclic coordinate descent with exact per-coordinate minimization;
    non-convex coordinates are resolved at the better box endpoint.
    Deterministic and exact enough for a trust-region candidate.
    H @ s is maintained incrementally, so a sweep is O(d^2).
    """
    d = g.shape[0]
    s = np.zeros(d)
    Hs = np.zeros(d)
    g_l, lo_l, up_l = g.tolist(), lo.tolist(), up.tolist()
    hdiag = np.diag(H).tolist()
    for _ in range(sweeps):
        biggest = 0.0
        for i in range(d):
            si = s[i]
            hii = hdiag[i]
            rest = g_l[i] + Hs[i] - hii * si
            if hii > 1e-14:
                new = -rest / hii
                if new < lo_l[i]:
                    new = lo_l[i]
                elif new > up_l[i]:
                    new = up_l[i]
            else:
                f_lo = rest * lo_l[i] + 0.5 * hii * lo_l[i] * lo_l[i]
                f_up = rest * up_l[i] + 0.5 * hii * up_l[i] * up_l[i]
                new = lo_l[i] if f_lo <= f_up else up_l[i]
            step = new - si
            if step != 0.0:
                Hs += H[:, i] * step
                s[i] = new
                if abs(step) > biggest:
                    biggest = abs(step)
        if biggest < 1e-13:
            break
    pred = -(g @ s + 0.5 * (s @ Hs))
    return s, pred


def _stale_coordinate(points, best, rho, lower, upper):
    """First coordinate lacking a nearby sample offset; None if all fresh."""
    pts = np.asarray(points)
    near = pts[np.max(np.abs(pts - best), axis=1) <= 2.0 * rho]
    for i in range(best.shape[0]):
        if near.size and np.any(np.abs(near[:, i] - best[i]) >= 0.3 * rho):
            continue
        step = rho if upper[i] - best[i] >= best[i] - lower[i] else -rho
        x = best.copy()
        x[i] = np.clip(best[i] + step, lower[i], upper[i])
        if abs(x[i] - best[i]) < 0.05 * rho:  # no room either way
            continue
        return x
    return None


def minimize(problem: BoxProblem) -> MinimizeResult:
    """Minimize a black-box objective over a box (see module docstring).

    Returns:
        MinimizeResult with the best point found, its value, the number
        of objective evaluations, and ``converged=True`` when the
        sampling radius reached ``rho_end`` before the evaluation budget
        ran out.
    """
    lo, up = problem.lower, problem.upper
    d = problem.dim
    state = _State(problem)

    x0 = np.clip(problem.start, lo, up)
    f0 = state.evaluate(x0)
    if not np.isfinite(f0):
        raise BoxminError("objective is non-finite at the start point")
    best_x, best_f = state.points[0], f0

    rho = float(problem.rho_begin)
    delta = rho
    delta_max = float(np.max(up - lo))

    for i, h in _initial_offsets(x0, lo, up, rho):
        if state.n_evals >= problem.max_evals:
            break
        x = x0.copy()
        x[i] += h
        f = state.evaluate(x)
        if f < best_f:
            best_x, best_f = state.points[-1], f

    converged = False
    consec_fail = 0
    message = "evaluation budget exhausted"
    while state.n_evals < problem.max_evals:
        scale = max(delta, rho)
        pts = np.asarray(state.points)
        dist = np.max(np.abs(pts - best_x), axis=1)
        radius = 1.5 * scale
        sel = dist <= radius
        while np.count_nonzero(sel) < d + 2 and radius < 4 * delta_max:
            radius *= 2.0
            sel = dist <= radius
        idx = np.flatnonzero(sel)
        # closest points first, capped to keep the fit local
        cap = (d + 1) * (d + 2) // 2 + d
        if idx.size > cap:
            order = np.argsort(dist[idx], kind="stable")
            idx = idx[order[:cap]]
        g, H = _fit_quadratic(pts[idx], np.asarray(state.values)[idx],
                              best_x, scale)

        slo = np.maximum((lo - best_x) / scale, -delta / scale)
        sup = np.minimum((up - best_x) / scale, delta / scale)
        s, pred = _solve_box_quadratic(g, H, slo, sup)
        cand = np.clip(best_x + scale * s, lo, up)
        step = float(np.max(np.abs(cand - best_x)))

        if pred <= 1e-14 * max(1.0, abs(best_f)) or step < 0.1 * rho:
            gp = _stale_coordinate(state.points, best_x, rho, lo, up)
            if gp is not None and state.n_evals < problem.max_evals:
                f = state.evaluate(gp)
                if f < best_f:
                    best_x, best_f = state.points[-1], f
                continue
            if rho <= problem.rho_end:
                converged = True
                message = "trust radius reached rho_end"
                break
            rho = max(0.1 * rho, problem.rho_end)
            delta = max(0.5 * delta, rho)
            continue

        f_cand = state.evaluate(cand)
        ratio = (best_f - f_cand) / pred if np.isfinite(f_cand) else -np.inf
        if f_cand < best_f:
            best_x, best_f = state.points[-1], f_cand
        if ratio >= 0.1:
            consec_fail = 0
            if ratio >= 0.7 and step >= 0.9 * delta:
                delta = min(2.0 * delta, delta_max)
        else:
            consec_fail += 1
            if delta > 1.001 * rho:
                delta = max(0.5 * delta, rho)
            elif consec_fail >= 2:
                # repeated failures at the sampling resolution: refresh
                # the local geometry, and once fresh drop to a finer rho
                gp = _stale_coordinate(state.points, best_x, rho, lo, up)
                if gp is not None and state.n_evals < problem.max_evals:
                    f = state.evaluate(gp)
                    if f < best_f:
                        best_x, best_f = state.points[-1], f
                elif rho <= problem.rho_end:
                    converged = True
                    message = "trust radius reached rho_end"
                    break
                else:
                    rho = max(0.1 * rho, problem.rho_end)
                    delta = rho
                    consec_fail = 0
    return MinimizeResult(
        x=best_x.copy(),
        value=best_f,
        evaluations=state.n_evals,
        converged=converged,
        message=message,
    )
