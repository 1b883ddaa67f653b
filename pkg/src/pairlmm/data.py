"""Build model matrices and per-group data from a column table.

A "table" is a plain mapping from column name to a 1-D numpy array; the
CLI produces one from CSV, the simulation lab produces one directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .design import CheckedDesign
from .formula import ModelFormula
from .kernels import GroupData, ThetaStructure


class ModelFrameError(ValueError):
    """The table does not support the requested model."""


@dataclass
class ModelFrame:
    """Response, fixed and random design matrices, and naming metadata."""

    y: np.ndarray            # (n,)
    X: np.ndarray            # (n, p)
    Z: np.ndarray            # (n, q)
    x_names: list[str]
    z_names: list[str]
    structure: ThetaStructure
    grouping_factor: str

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def q(self) -> int:
        return self.Z.shape[1]

    def vc_names(self) -> list[str]:
        """Names for the free variance components, matching theta order."""
        out = []
        for i, j in self.structure.free_index_pairs():
            if i == j:
                out.append(f"var[{self.z_names[i]}]")
            else:
                out.append(f"cov[{self.z_names[i]},{self.z_names[j]}]")
        return out


def _column(table, name: str) -> np.ndarray:
    if name not in table:
        raise ModelFrameError(f"column {name!r} not found in data")
    return np.asarray(table[name], dtype=float)


def build_model_frame(table, formula: ModelFormula) -> ModelFrame:
    """Assemble y, X, Z and the theta block structure from the table.

    All random-effect groups must share a single grouping factor; each
    group contributes one independent block of random effects.
    """
    if not formula.re_groups:
        raise ModelFrameError(
            "model has no random-effect group; a grouping factor is "
            "required for a mixed-model fit")
    factors = formula.grouping_factors
    if len(factors) != 1:
        raise ModelFrameError(
            f"exactly one grouping factor is supported, got {factors}")

    y = _column(table, formula.response)
    n = y.shape[0]

    x_cols, x_names = [], []
    if formula.fixed_intercept:
        x_cols.append(np.ones(n))
        x_names.append("(Intercept)")
    for t in formula.fixed_terms:
        x_cols.append(_column(table, t))
        x_names.append(t)
    if not x_cols:
        raise ModelFrameError("model has no fixed effects")
    X = np.column_stack(x_cols)

    z_cols, z_names, blocks = [], [], []
    for g in formula.re_groups:
        size = 0
        if g.intercept:
            z_cols.append(np.ones(n))
            z_names.append("(Intercept)")
            size += 1
        for t in g.terms:
            z_cols.append(_column(table, t))
            z_names.append(t)
            size += 1
        blocks.append(size)
    Z = np.column_stack(z_cols)

    return ModelFrame(
        y=y, X=X, Z=Z,
        x_names=x_names, z_names=z_names,
        structure=ThetaStructure(blocks=tuple(blocks)),
        grouping_factor=factors[0],
    )


def build_groups(frame: ModelFrame,
                 checked: CheckedDesign) -> list[GroupData]:
    """Slice the model frame into per-group blocks in design order."""
    groups = []
    for g, rows in enumerate(checked.group_rows):
        groups.append(GroupData(
            key=checked.group_keys[g],
            Y=frame.y[rows],
            X=frame.X[rows],
            Z=frame.Z[rows],
            pi_1=float(checked.p1_group[g]),
            pi_cond=checked.p2[rows],
        ))
    return groups
