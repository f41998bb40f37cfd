"""Robust variance machinery shared by every estimator.

All estimators expose per-subject estimating-function contributions; the
asymptotic variance is the usual sandwich ``Q^{-1} Sigma Q^{-1}`` scaled so
that ``SE = sqrt(diag / N)``. Two refinements are pure post-processing on
retained per-subject pieces:

* stacking replaces each subject's mean-model score with the version
  corrected for the estimated centering parameters, using the analytic
  cross-derivative of the criterion in the centering coefficients;
* leverage correction is the Mancl–DeRouen small-sample fix: per-subject
  residuals are premultiplied by ``(I - H_j)^{-1}`` before the meat is
  rebuilt.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .errors import (
    SingularBread,
    SingularLeverage,
    SingularThetaBread,
)

COND_LIMIT = 1e12


@dataclass(frozen=True)
class SandwichParts:
    """Everything needed to rebuild a sandwich without refitting.

    ``bread`` is the per-subject-averaged derivative of the estimating
    function (positive-definite Gram for least-squares criteria); ``meat``
    averages per-subject score outer products. ``model_matrix``/``weights``/
    ``residuals`` are retained per subject for the leverage correction.
    """

    bread: np.ndarray              # (dim, dim)
    meat: np.ndarray               # (dim, dim)
    subject_scores: np.ndarray     # (N, dim)
    model_matrix: np.ndarray | None = None   # (N, T_use, dim)
    weights: np.ndarray | None = None        # (N, T_use)
    residuals: np.ndarray | None = None      # (N, T_use)

    @property
    def n_subjects(self) -> int:
        return self.subject_scores.shape[0]

    @property
    def dim(self) -> int:
        return self.bread.shape[0]


@dataclass(frozen=True)
class StackedParts:
    """Centering-parameter pieces for the stacked variance.

    Layout convention: the centering coefficients flatten C-order over
    (moderator component, auxiliary column), matching
    ``CenteringModel.score_meta``.
    """

    u_theta_scores: np.ndarray     # (N, q * p_z)
    cross_derivative: np.ndarray   # (dim, q * p_z)
    theta_bread: np.ndarray        # (q * p_z, q * p_z)


def _solve_spd(mat: np.ndarray, rhs: np.ndarray, exc, what: str) -> np.ndarray:
    cond = np.linalg.cond(mat) if mat.size else np.inf
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise exc(f"{what}: condition number {cond:.3g} exceeds {COND_LIMIT:.0e}")
    return np.linalg.solve(mat, rhs)


def _symmetrize(mat: np.ndarray) -> np.ndarray:
    return (mat + mat.T) / 2.0


def plain_sandwich(parts: SandwichParts) -> np.ndarray:
    """Full-parameter ``Q^{-1} Sigma Q^{-1}``; ``SE = sqrt(diag/N)`` downstream."""
    inv_meat = _solve_spd(parts.bread, parts.meat, SingularBread, "sandwich bread")
    return _symmetrize(inv_meat @ np.linalg.solve(parts.bread, np.eye(parts.dim)).T)


def corrected_scores(parts: SandwichParts, sp: StackedParts) -> np.ndarray:
    """Per-subject mean-model scores corrected for estimated centering."""
    adj = _solve_spd(sp.theta_bread, sp.u_theta_scores.T,
                     SingularThetaBread, "centering bread")   # (m, N)
    return parts.subject_scores - (sp.cross_derivative @ adj).T


def stacked_sandwich(parts: SandwichParts, sp: StackedParts) -> np.ndarray:
    """Sandwich with meat rebuilt from centering-corrected scores."""
    scores = corrected_scores(parts, sp)
    meat = _symmetrize(scores.T @ scores / parts.n_subjects)
    return plain_sandwich(SandwichParts(bread=parts.bread, meat=meat,
                                        subject_scores=scores))


def leverage_adjusted_scores(parts: SandwichParts) -> np.ndarray:
    """Mancl–DeRouen scores: residuals premultiplied by ``(I - H_j)^{-1}``.

    ``H_j = D_j (sum_j D_j' W_j D_j)^{-1} D_j' W_j`` per subject.
    """
    if parts.model_matrix is None or parts.weights is None or parts.residuals is None:
        raise SingularLeverage("per-subject model matrices were not retained")
    n = parts.n_subjects
    # bread is (1/N) sum_j D_j' W_j D_j, so (sum ...)^{-1} = bread^{-1} / N
    binv = _solve_spd(parts.bread, np.eye(parts.dim), SingularBread, "sandwich bread") / n
    d = parts.model_matrix                      # (N, T, k)
    dw = d * parts.weights[:, :, None]          # W_j D_j rows
    h = np.einsum("ntk,kl,nsl->nts", d, binv, dw)
    m = np.eye(h.shape[1])[None, :, :] - h
    conds = np.linalg.cond(m)
    if not np.all(np.isfinite(conds)) or conds.max() > COND_LIMIT:
        j = int(np.argmax(np.where(np.isfinite(conds), conds, np.inf)))
        raise SingularLeverage(f"(I - H) nearly singular for subject index {j}")
    adj_resid = np.linalg.solve(m, parts.residuals[:, :, None])[:, :, 0]
    return np.einsum("ntk,nt->nk", dw, adj_resid)


def small_sample_correct(parts: SandwichParts) -> np.ndarray:
    """Corrected meat matrix from leverage-adjusted per-subject scores."""
    scores = leverage_adjusted_scores(parts)
    return _symmetrize(scores.T @ scores / parts.n_subjects)


def stacked_small_sample(parts: SandwichParts, sp: StackedParts | None) -> np.ndarray:
    """Leverage-corrected meat, additionally centering-corrected when stacked."""
    scores = leverage_adjusted_scores(parts)
    if sp is not None:
        adj = _solve_spd(sp.theta_bread, sp.u_theta_scores.T,
                         SingularThetaBread, "centering bread")
        scores = scores - (sp.cross_derivative @ adj).T
    meat = _symmetrize(scores.T @ scores / parts.n_subjects)
    return plain_sandwich(SandwichParts(bread=parts.bread, meat=meat,
                                        subject_scores=scores))


def confidence_intervals(estimates: np.ndarray, se: np.ndarray, level: float,
                         small_sample: bool, n_subjects: int, dim: int):
    """Two-sided intervals and p-values; t reference when small_sample is set."""
    if not 0.0 < level < 1.0:
        raise ValueError(f"ci level must lie in (0,1), got {level}")
    estimates = np.asarray(estimates, dtype=float)
    se = np.asarray(se, dtype=float)
    if small_sample:
        df = max(n_subjects - dim, 1)
        crit = stats.t.ppf(0.5 + level / 2.0, df)
        with np.errstate(divide="ignore", invalid="ignore"):
            zval = np.where(se > 0, estimates / se, np.inf * np.sign(estimates))
        pval = 2.0 * stats.t.sf(np.abs(zval), df)
    else:
        crit = stats.norm.ppf(0.5 + level / 2.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            zval = np.where(se > 0, estimates / se, np.inf * np.sign(estimates))
        pval = 2.0 * stats.norm.sf(np.abs(zval))
    pval = np.where(estimates == 0.0, 1.0, pval)
    return estimates - crit * se, estimates + crit * se, pval
