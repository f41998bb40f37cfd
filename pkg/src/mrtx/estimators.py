"""Estimators for time-varying treatment effects in sequentially randomized panels.

Every continuous-outcome criterion reduces to one weighted normal-equations
engine (:func:`wls_solve`); the methods differ only in how the design blocks
are assembled:

* per-decision-point fits (``unadjusted_per_time``, ``wcls_per_time``,
  ``lin_per_time``) regress the proximal outcome on the treatment centered at
  the true randomization probability, optionally with mean-centered controls
  and their treatment interactions;
* ``wcls`` pools decision points with likelihood-ratio weights and centers
  treatment at the weight numerator;
* ``a2wcls`` augments the pooled criterion with centered-auxiliary
  interactions, and ``a2wcls_lagged`` adds linear working models for the
  intermediate decision points of a lagged outcome;
* binary outcomes use a log-relative-risk estimating equation solved by
  damped Newton (``emee``), with an alternating centering loop for the
  auxiliary-adjusted variant (``a2emee``).

Robust variance always comes from retained per-subject scores; see
:mod:`mrtx.variance`.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .centering import CenteringModel, centering_from_rows, fit_centering, naive_centerings
from .data import MrtDataset, design_blocks
from .errors import (
    DegenerateAuxiliary,
    DimensionMismatch,
    LagHorizonExceeded,
    NonConvergence,
    OscillationDetected,
    SingularGram,
    SingularJacobian,
)
from .variance import (
    SandwichParts,
    StackedParts,
    confidence_intervals,
    plain_sandwich,
    stacked_sandwich,
    stacked_small_sample,
)

COND_LIMIT = 1e12

METHODS = ("unadjusted_per_time", "wcls_per_time", "lin_per_time",
           "wcls", "a2wcls", "a2wcls_lagged", "emee", "a2emee")
VARIANCE_MODES = ("plain_sandwich", "stacked", "stacked_small_sample")
CENTERING_KINDS = ("orthogonal", "global_mean", "time_specific_mean")
_BINARY = ("emee", "a2emee")


@dataclass(frozen=True)
class EstimatorConfig:
    """Choice of criterion, lag, variance mode, and solver controls."""

    method: str = "wcls"
    lag: int = 1
    variance_mode: str = "plain_sandwich"
    ci_level: float = 0.95
    max_iter: int = 100
    tol: float = 1e-10
    centering_kind: str = "orthogonal"

    def __post_init__(self):
        if self.method not in METHODS:
            raise DimensionMismatch(f"unknown method {self.method!r}")
        if self.variance_mode not in VARIANCE_MODES:
            raise DimensionMismatch(f"unknown variance mode {self.variance_mode!r}")
        if self.centering_kind not in CENTERING_KINDS:
            raise DimensionMismatch(f"unknown centering kind {self.centering_kind!r}")
        if self.method == "a2wcls_lagged" and self.lag < 2:
            raise DimensionMismatch("a2wcls_lagged requires lag >= 2")
        if self.method in ("a2wcls", "emee", "a2emee") and self.lag != 1:
            raise DimensionMismatch(f"{self.method} is a proximal method (lag = 1)")
        if self.method in _BINARY and self.variance_mode != "plain_sandwich":
            raise DimensionMismatch("binary methods support plain_sandwich variance only")
        if not 0.0 < self.ci_level < 1.0:
            raise DimensionMismatch("ci_level must lie in (0,1)")


@dataclass(frozen=True)
class LaggedNuisanceModel:
    """Coefficients of the intermediate-decision working models for a lagged fit."""

    alpha_u1: tuple[float, ...]
    alpha_u2: tuple[np.ndarray, ...]
    alpha_03: np.ndarray


@dataclass
class FitResult:
    """Point estimates plus retained variance machinery for one fit."""

    method: str
    param_names: tuple[str, ...]
    estimates: np.ndarray
    alpha: np.ndarray
    beta0: np.ndarray
    beta1: np.ndarray
    beta0_names: tuple[str, ...]
    beta1_names: tuple[str, ...]
    vcov: np.ndarray
    vcov_beta0: np.ndarray
    se: np.ndarray
    ci_lo: np.ndarray
    ci_hi: np.ndarray
    p_value: np.ndarray
    se_all: np.ndarray
    ci_lo_all: np.ndarray
    ci_hi_all: np.ndarray
    p_value_all: np.ndarray
    per_subject_scores: np.ndarray
    bread: np.ndarray
    converged: bool
    n_iter: int
    n_subjects: int
    variance_mode: str
    ci_level: float
    beta0_idx: np.ndarray = field(repr=False, default=None)
    beta1_idx: np.ndarray = field(repr=False, default=None)
    lagged_nuisance: LaggedNuisanceModel | None = None
    ee_norm_trace: tuple[float, ...] = ()
    parts: SandwichParts = field(repr=False, default=None)
    stacked_parts: StackedParts | None = field(repr=False, default=None)

    def report_text(self) -> str:
        lines = [f"method: {self.method}",
                 f"n_subjects: {self.n_subjects}",
                 f"variance: {self.variance_mode}",
                 f"ci_level: {repr(self.ci_level)}",
                 f"converged: {self.converged}",
                 f"n_iter: {self.n_iter}",
                 "",
                 f"{'coefficient':<24}{'estimate':>16}{'se':>14}"
                 f"{'ci_lo':>14}{'ci_hi':>14}{'p':>12}"]
        for i, name in enumerate(self.param_names):
            lines.append(f"{name:<24}{self.estimates[i]:>16.8f}{self.se_all[i]:>14.6f}"
                         f"{self.ci_lo_all[i]:>14.6f}{self.ci_hi_all[i]:>14.6f}"
                         f"{self.p_value_all[i]:>12.4g}")
        return "\n".join(lines) + "\n"

    def coefficient_rows(self) -> list[dict]:
        rows = []
        for i, name in enumerate(self.param_names):
            block = "beta0" if i in set(np.atleast_1d(self.beta0_idx)) else (
                "beta1" if i in set(np.atleast_1d(self.beta1_idx)) else "alpha")
            rows.append({"name": name, "block": block,
                         "estimate": float(self.estimates[i]),
                         "se": float(self.se_all[i]),
                         "ci_lo": float(self.ci_lo_all[i]),
                         "ci_hi": float(self.ci_hi_all[i]),
                         "p_value": float(self.p_value_all[i])})
        return rows


def wls_solve(X: np.ndarray, y: np.ndarray, w: np.ndarray,
              n_units: int) -> tuple[np.ndarray, np.ndarray]:
    """Minimize ``sum w (y - X b)^2``; returns coefficients and the averaged Gram.

    The bread is ``(1/n_units) X' W X``, the per-unit averaged derivative of
    the estimating function.
    """
    Xw = X * w[:, None]
    gram = (Xw.T @ X) / n_units
    cond = np.linalg.cond(gram) if gram.size else np.inf
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise SingularGram(f"weighted Gram condition number {cond:.3g} exceeds {COND_LIMIT:.0e}")
    beta = np.linalg.solve(gram, (Xw.T @ y) / n_units)
    return beta, gram


def _apply_variance(estimates, parts, sp, mode, ci_level, n, names,
                    beta0_idx, beta1_idx):
    if mode == "plain_sandwich" or (mode == "stacked" and sp is None):
        vcov = plain_sandwich(parts)
    elif mode == "stacked":
        vcov = stacked_sandwich(parts, sp)
    else:
        vcov = stacked_small_sample(parts, sp)
    dim = parts.dim
    se_all = np.sqrt(np.clip(np.diag(vcov), 0.0, None) / n)
    small = mode == "stacked_small_sample"
    lo, hi, p = confidence_intervals(estimates, se_all, ci_level, small, n, dim)
    return vcov, se_all, lo, hi, p


def _assemble(method, ds_n, names, estimates, beta0_idx, beta1_idx, parts, sp,
              config, converged=True, n_iter=0, lagged=None, trace=()):
    names = tuple(names)
    beta0_idx = np.asarray(beta0_idx, dtype=int)
    beta1_idx = np.asarray(beta1_idx, dtype=int)
    vcov, se_all, lo, hi, p = _apply_variance(
        estimates, parts, sp, config.variance_mode, config.ci_level, ds_n,
        names, beta0_idx, beta1_idx)
    alpha_idx = np.array([i for i in range(len(names))
                          if i not in set(beta0_idx) | set(beta1_idx)], dtype=int)
    return FitResult(
        method=method,
        param_names=names,
        estimates=estimates,
        alpha=estimates[alpha_idx],
        beta0=estimates[beta0_idx],
        beta1=estimates[beta1_idx],
        beta0_names=tuple(names[i] for i in beta0_idx),
        beta1_names=tuple(names[i] for i in beta1_idx),
        vcov=vcov,
        vcov_beta0=vcov[np.ix_(beta0_idx, beta0_idx)],
        se=se_all[beta0_idx],
        ci_lo=lo[beta0_idx],
        ci_hi=hi[beta0_idx],
        p_value=p[beta0_idx],
        se_all=se_all,
        ci_lo_all=lo,
        ci_hi_all=hi,
        p_value_all=p,
        per_subject_scores=parts.subject_scores,
        bread=parts.bread,
        converged=converged,
        n_iter=n_iter,
        n_subjects=ds_n,
        variance_mode=config.variance_mode,
        ci_level=config.ci_level,
        beta0_idx=beta0_idx,
        beta1_idx=beta1_idx,
        lagged_nuisance=lagged,
        ee_norm_trace=tuple(trace),
        parts=parts,
        stacked_parts=sp,
    )


def with_variance_mode(fit: FitResult, mode: str, ci_level: float | None = None) -> FitResult:
    """Recompute vcov/SE/CI from retained per-subject pieces, without refitting."""
    level = fit.ci_level if ci_level is None else ci_level
    vcov, se_all, lo, hi, p = _apply_variance(
        fit.estimates, fit.parts, fit.stacked_parts, mode, level,
        fit.n_subjects, fit.param_names, fit.beta0_idx, fit.beta1_idx)
    b0, b1 = fit.beta0_idx, fit.beta1_idx
    return replace(fit, vcov=vcov, vcov_beta0=vcov[np.ix_(b0, b0)],
                   se=se_all[b0], ci_lo=lo[b0], ci_hi=hi[b0], p_value=p[b0],
                   se_all=se_all, ci_lo_all=lo, ci_hi_all=hi, p_value_all=p,
                   variance_mode=mode, ci_level=level)


# ---------------------------------------------------------------------------
# shared least-squares plumbing


def _ls_parts(X_use, y_use, w_use, beta, n, t_use):
    resid = y_use - X_use @ beta
    k = X_use.shape[1]
    D = X_use.reshape(n, t_use, k)
    W = w_use.reshape(n, t_use)
    R = resid.reshape(n, t_use)
    scores = np.einsum("ntk,nt->nk", D, W * R)
    meat = scores.T @ scores / n
    bread = (X_use * w_use[:, None]).T @ X_use / n
    return SandwichParts(bread=bread, meat=(meat + meat.T) / 2, subject_scores=scores,
                         model_matrix=D, weights=W, residuals=R)


def _pooled_design(ds: MrtDataset, cm: CenteringModel | None, lagged: bool):
    """Design blocks, names and index slices for the pooled criteria."""
    blocks = design_blocks(ds)
    mask = ds.usable_mask
    ca = blocks.centered_a
    cols, names = [], []

    lag_info = None
    if lagged:
        if ds.horizon < ds.lag:
            raise LagHorizonExceeded(
                f"lag {ds.lag} exceeds panel horizon {ds.horizon}")
        alpha1_slices = []
        for u in range(1, ds.lag):
            a_u = ds.shifted(ds.a.astype(float), u)
            p_u = ds.shifted(ds.p, u)
            z_u = ds.shifted(ds.z, u)
            ca_u = a_u - p_u
            start = len(names)
            cols.append(ca_u[:, None])
            names.append(f"alpha_l{u}:1")
            for i, zn in enumerate(ds.z_names or [f"z{i}" for i in range(ds.p_z)]):
                cols.append((ca_u * z_u[:, i])[:, None])
                names.append(f"alpha_l{u}:{zn}")
            alpha1_slices.append((start, len(names)))
        start = len(names)
        cols.append(ds.f)
        names.extend(f"alpha_0:{n}" for n in ds.f_names)
        lag_info = (alpha1_slices, (start, len(names)))
    else:
        if ds.d < 1:
            raise DimensionMismatch("criterion requires at least one control column")
        cols.append(ds.g)
        names.extend(f"alpha:{n}" for n in ds.g_names)

    beta0_start = len(names)
    cols.append(ca[:, None] * ds.f)
    names.extend(f"beta0:{n}" for n in ds.f_names)
    beta0_idx = np.arange(beta0_start, len(names))

    beta1_idx = np.arange(0)
    zc = None
    if cm is not None:
        if ds.p_z < 1:
            raise DimensionMismatch("auxiliary adjustment requires auxiliary columns")
        zc = ds.z - cm.mu_rows(ds)
        wnorm = np.sqrt(np.mean((np.sqrt(blocks.weight_w)[:, None] * zc)[mask] ** 2, axis=0))
        scale = 1.0 + np.sqrt(np.mean(ds.z[mask] ** 2, axis=0))
        bad = wnorm < 1e-9 * scale
        if bad.any():
            i = int(np.argmax(bad))
            zn = (ds.z_names or [f"z{i}"])[i]
            raise DegenerateAuxiliary(
                f"centered auxiliary column {zn!r} has numerically zero weighted norm")
        beta1_start = len(names)
        cols.append(ca[:, None] * zc)
        names.extend(f"beta1:{n}" for n in (ds.z_names or [f"z{i}" for i in range(ds.p_z)]))
        beta1_idx = np.arange(beta1_start, len(names))

    X = np.column_stack([c if c.ndim == 2 else c[:, None] for c in cols])
    return X, names, beta0_idx, beta1_idx, blocks, mask, lag_info


def _stacked_for(ds, cm, X_use, wca_use, f_use, beta1_hat, n):
    """Analytic centering-parameter pieces for the stacked variance.

    Cross-derivative column for centering coefficient (k, i) is
    ``beta1_i * P_N[sum_t w (a - ptilde) x f_k]``; the residual's own
    derivative term vanishes by the target-block normal equations.
    """
    mhat = (X_use * wca_use[:, None]).T @ f_use / n        # (dim, q)
    p_z = beta1_hat.shape[0]
    cross = (mhat[:, :, None] * beta1_hat[None, None, :]).reshape(X_use.shape[1], -1)
    theta_bread = -np.kron(cm.gram, np.eye(p_z))
    return StackedParts(u_theta_scores=cm.score_meta, cross_derivative=cross,
                        theta_bread=theta_bread)


def _fit_pooled(ds: MrtDataset, config: EstimatorConfig,
                cm: CenteringModel | None, lagged: bool) -> FitResult:
    X, names, b0_idx, b1_idx, blocks, mask, lag_info = _pooled_design(
        ds, cm, lagged)
    w = blocks.weight_w
    X_use, y_use, w_use = X[mask], ds.y[mask], w[mask]
    beta, _ = wls_solve(X_use, y_use, w_use, ds.n_subjects)
    parts = _ls_parts(X_use, y_use, w_use, beta, ds.n_subjects, ds.n_usable)

    sp = None
    if cm is not None and cm.orthogonal:
        wca = (w * blocks.centered_a)[mask]
        sp = _stacked_for(ds, cm, X_use, wca, ds.f[mask], beta[b1_idx],
                          ds.n_subjects)
    if cm is not None and not cm.orthogonal and config.variance_mode != "plain_sandwich":
        raise DimensionMismatch(
            "stacked variance requires an orthogonality-fitted centering model")

    lagged_model = None
    if lagged and lag_info is not None:
        alpha1_slices, (a0s, a0e) = lag_info
        lagged_model = LaggedNuisanceModel(
            alpha_u1=tuple(float(beta[s]) for s, _ in alpha1_slices),
            alpha_u2=tuple(beta[s + 1: e] for s, e in alpha1_slices),
            alpha_03=beta[a0s:a0e],
        )
    method = config.method
    return _assemble(method, ds.n_subjects, names, beta, b0_idx, b1_idx,
                     parts, sp, config, lagged=lagged_model)


def _resolve_centering(ds: MrtDataset, cm: CenteringModel | None,
                       config: EstimatorConfig) -> CenteringModel:
    if cm is not None:
        return cm
    if config.centering_kind == "orthogonal":
        return fit_centering(ds)
    mu = naive_centerings(ds, config.centering_kind)
    return centering_from_rows(ds, mu, config.centering_kind)


# ---------------------------------------------------------------------------
# public continuous-outcome fits


def fit_wcls(ds: MrtDataset, config: EstimatorConfig | None = None) -> FitResult:
    """Pooled weighted-and-centered least squares for the lag-``ds.lag`` effect."""
    config = config or EstimatorConfig(method="wcls", lag=ds.lag)
    return _fit_pooled(ds, replace(config, method="wcls"), cm=None, lagged=False)


def fit_a2wcls(ds: MrtDataset, cm: CenteringModel | None = None,
               config: EstimatorConfig | None = None) -> FitResult:
    """Auxiliary-adjusted pooled criterion for the proximal effect."""
    config = config or EstimatorConfig(method="a2wcls")
    config = replace(config, method="a2wcls")
    cm = _resolve_centering(ds, cm, config)
    return _fit_pooled(ds, config, cm=cm, lagged=False)


def fit_a2wcls_lagged(ds: MrtDataset, cm: CenteringModel | None = None,
                      config: EstimatorConfig | None = None) -> FitResult:
    """Lagged-outcome criterion with intermediate-decision working models.

    For each intermediate decision point ``t+u`` the working model
    contributes a centered-treatment block ``(A_{t+u} - p_{t+u})`` with
    intercept and auxiliary-slope columns; the time-``t`` centering term is
    spanned by the moderator features. Auxiliary adjustment and variance
    handling match :func:`fit_a2wcls`.
    """
    if ds.lag < 2:
        raise DimensionMismatch("a2wcls_lagged requires a dataset with lag >= 2")
    if ds.horizon < ds.lag:
        raise LagHorizonExceeded(f"lag {ds.lag} exceeds panel horizon {ds.horizon}")
    config = config or EstimatorConfig(method="a2wcls_lagged", lag=ds.lag)
    config = replace(config, method="a2wcls_lagged", lag=ds.lag)
    cm = _resolve_centering(ds, cm, config)
    return _fit_pooled(ds, config, cm=cm, lagged=True)


def _per_time_rows(ds: MrtDataset, t: int):
    if ds.lag != 1:
        raise DimensionMismatch("per-time estimators address the proximal outcome (lag 1)")
    sel = ds.t == t
    if not sel.any():
        raise DimensionMismatch(f"decision index t={t} not present")
    return sel


def _centered_controls(g: np.ndarray):
    """Cross-subject mean-centered controls; zero-variance columns drop out."""
    if g.shape[1] == 0:
        return g, np.arange(0)
    centered = g - g.mean(axis=0)
    scale = 1.0 + np.abs(g).mean(axis=0)
    keep = np.where(centered.std(axis=0) > 1e-12 * scale)[0]
    return centered[:, keep], keep


def _fit_per_time(ds: MrtDataset, t: int, config: EstimatorConfig,
                  with_controls: bool, with_interactions: bool,
                  method: str) -> FitResult:
    sel = _per_time_rows(ds, t)
    y = ds.y[sel]
    ca = (ds.a.astype(float) - ds.p)[sel]          # centered at the true p_t
    n = y.shape[0]
    cols = [np.ones((n, 1))]
    names = ["alpha:1"]
    b1_idx = np.arange(0)
    kept_names: tuple[str, ...] = ()
    if with_controls:
        gt, keep = _centered_controls(ds.g[sel][:, [i for i, nm in enumerate(ds.g_names)
                                                    if nm != "1"]])
        kept_names = tuple(nm for nm in ds.g_names if nm != "1")
        kept_names = tuple(kept_names[i] for i in keep)
        cols.append(gt)
        names.extend(f"alpha:{nm}~t{t}" for nm in kept_names)
    b0_pos = sum(c.shape[1] for c in cols)
    cols.append(ca[:, None])
    names.append("beta0:1")
    if with_interactions and with_controls:
        start = sum(c.shape[1] for c in cols)
        cols.append(ca[:, None] * cols[1])
        names.extend(f"beta1:{nm}~t{t}" for nm in kept_names)
        b1_idx = np.arange(start, start + cols[-1].shape[1])
    X = np.column_stack(cols)
    w = np.ones(n)
    beta, _ = wls_solve(X, y, w, n)
    parts = _ls_parts(X, y, w, beta, n, 1)
    return _assemble(method, n, names, beta, np.array([b0_pos]), b1_idx,
                     parts, None, config)


def fit_unadjusted_per_time(ds: MrtDataset, t: int,
                            config: EstimatorConfig | None = None) -> FitResult:
    """Proximal effect at decision ``t`` from outcome and treatment alone."""
    config = config or EstimatorConfig(method="unadjusted_per_time")
    return _fit_per_time(ds, t, config, False, False, "unadjusted_per_time")


def fit_wcls_per_time(ds: MrtDataset, t: int,
                      config: EstimatorConfig | None = None) -> FitResult:
    """Adds mean-centered controls to the per-time criterion."""
    config = config or EstimatorConfig(method="wcls_per_time")
    return _fit_per_time(ds, t, config, True, False, "wcls_per_time")


def fit_lin_per_time(ds: MrtDataset, t: int,
                     config: EstimatorConfig | None = None) -> FitResult:
    """Adds centered controls and their treatment interactions."""
    config = config or EstimatorConfig(method="lin_per_time")
    return _fit_per_time(ds, t, config, True, True, "lin_per_time")


# ---------------------------------------------------------------------------
# closed-form asymptotic gaps for the per-time comparisons


def closed_form_gaps(p: float, alpha1, beta1, sigma_g) -> dict[str, float]:
    """Asymptotic comparison terms for the three per-time estimators.

    ``gap_wcls_vs_u`` is the difference of meat terms (control-adjusted minus
    unadjusted); divide by ``(p(1-p))^2`` for the variance-scale difference.
    ``gap_lin_vs_u`` and ``gap_lin_vs_wcls`` are variance-scale reductions,
    both guaranteed nonnegative.
    """
    if not 0.0 < p < 1.0:
        raise ValueError(f"p must lie in (0,1), got {p}")
    alpha1 = np.atleast_1d(np.asarray(alpha1, dtype=float))
    beta1 = np.atleast_1d(np.asarray(beta1, dtype=float))
    sigma = np.atleast_2d(np.asarray(sigma_g, dtype=float))
    if sigma.shape[0] != sigma.shape[1] or sigma.shape[0] != alpha1.shape[0] \
            or beta1.shape[0] != alpha1.shape[0]:
        raise ValueError("alpha1, beta1, sigma_g dimensions are inconsistent")
    if not np.allclose(sigma, sigma.T, atol=1e-10):
        raise ValueError("sigma_g must be symmetric")
    if np.linalg.eigvalsh(sigma).min() < -1e-10 * max(1.0, np.trace(sigma)):
        raise ValueError("sigma_g must be positive semi-definite")
    pq = p * (1.0 - p)
    gap_wcls_vs_u = -pq * float(alpha1 @ sigma @ (alpha1 + 2.0 * (1.0 - 2.0 * p) * beta1))
    comb = alpha1 + (1.0 - 2.0 * p) * beta1
    gap_lin_vs_u = float(comb @ sigma @ comb) / pq + float(beta1 @ sigma @ beta1)
    gap_lin_vs_wcls = (1.0 - 3.0 * p + 3.0 * p * p) / pq * float(beta1 @ sigma @ beta1)
    return {"gap_wcls_vs_u": gap_wcls_vs_u,
            "gap_lin_vs_u": gap_lin_vs_u,
            "gap_lin_vs_wcls": gap_lin_vs_wcls}


# ---------------------------------------------------------------------------
# binary outcomes: log-relative-risk estimating equations


def _emee_system(ds: MrtDataset, feat: np.ndarray, w: np.ndarray,
                 ca: np.ndarray, mask: np.ndarray):
    g = ds.g[mask]
    f_x = feat[mask]
    a = ds.a.astype(float)[mask]
    y = ds.y[mask]
    w_u = w[mask]
    ca_u = ca[mask]
    X = np.column_stack([g, ca_u[:, None] * f_x])
    n = ds.n_subjects
    t_use = ds.n_usable

    def ee_and_jac(params, want_jac=True):
        k_g = g.shape[1]
        alpha, betab = params[:k_g], params[k_g:]
        lin_b = f_x @ betab
        blip = np.exp(-a * lin_b)
        mean = np.exp(g @ alpha + a * lin_b)
        r = w_u * blip * (y - mean)
        u = X.T @ r / n
        if not want_jac:
            return u, None
        # d(blip * resid)/dalpha = -blip*mean*g ; d/dbeta = -a*blip*y*f
        da = -(w_u * blip * mean)[:, None] * g
        db = -(w_u * a * blip * y)[:, None] * f_x
        jac = X.T @ np.column_stack([da, db]) / n
        return u, jac

    def subject_scores(params):
        k_g = g.shape[1]
        alpha, betab = params[:k_g], params[k_g:]
        lin_b = f_x @ betab
        blip = np.exp(-a * lin_b)
        mean = np.exp(g @ alpha + a * lin_b)
        r = w_u * blip * (y - mean)
        per_row = X * r[:, None]
        return per_row.reshape(n, t_use, -1).sum(axis=1)

    return ee_and_jac, subject_scores, X, (g.shape[1], f_x.shape[1])


def _newton(ee_and_jac, init: np.ndarray, max_iter: int, tol: float):
    params = init.copy()
    u, _ = ee_and_jac(params, want_jac=False)
    norm = float(np.abs(u).max())
    trace = [norm]
    for it in range(1, max_iter + 1):
        if norm <= tol:
            return params, it - 1, trace, True
        u, jac = ee_and_jac(params)
        cond = np.linalg.cond(jac)
        if not np.isfinite(cond) or cond > COND_LIMIT:
            raise SingularJacobian(f"Jacobian condition number {cond:.3g}")
        step = np.linalg.solve(jac, u)
        scale = 1.0
        for _ in range(40):
            cand = params - scale * step
            u_new, _ = ee_and_jac(cand, want_jac=False)
            norm_new = float(np.abs(u_new).max())
            if norm_new < norm:
                break
            scale *= 0.5
        else:
            raise NonConvergence("step halving failed to reduce the estimating "
                                 f"equation norm ({norm:.3g})", n_iter=it)
        params, norm = cand, norm_new
        trace.append(norm)
    if norm <= tol:
        return params, max_iter, trace, True
    raise NonConvergence(f"Newton failed to converge in {max_iter} iterations "
                         f"(final norm {norm:.3g})", n_iter=max_iter)


def _check_binary(ds: MrtDataset):
    y = ds.y[ds.usable_mask]
    if not np.isin(y, (0.0, 1.0)).all():
        raise DimensionMismatch("binary methods require outcomes in {0,1}")
    if y.mean() <= 0.0:
        raise DimensionMismatch("binary outcome is identically zero")


def _binary_fit(ds: MrtDataset, config: EstimatorConfig, feat: np.ndarray,
                feat_names: list[str], b0_count: int, init: np.ndarray | None,
                method: str):
    blocks = design_blocks(ds)
    mask = ds.usable_mask
    ee_and_jac, subject_scores, X, (k_g, k_f) = _emee_system(
        ds, feat, blocks.weight_w, blocks.centered_a, mask)
    if init is None:
        init = np.zeros(k_g + k_f)
        if "1" in ds.g_names:
            init[list(ds.g_names).index("1")] = np.log(max(ds.y[mask].mean(), 1e-8))
    params, n_iter, trace, ok = _newton(ee_and_jac, init,
                                        config.max_iter, max(config.tol, 1e-12))
    scores = subject_scores(params)
    _, jac = ee_and_jac(params)
    bread = -jac                      # positive-orientation derivative
    meat = scores.T @ scores / ds.n_subjects
    parts = SandwichParts(bread=bread, meat=(meat + meat.T) / 2,
                          subject_scores=scores)
    names = [f"alpha:{n}" for n in ds.g_names] + feat_names
    b0_idx = np.arange(k_g, k_g + b0_count)
    b1_idx = np.arange(k_g + b0_count, k_g + k_f)
    return _assemble(method, ds.n_subjects, names, params, b0_idx, b1_idx,
                     parts, None, config, converged=ok, n_iter=n_iter,
                     trace=trace), params


def fit_emee(ds: MrtDataset, config: EstimatorConfig | None = None) -> FitResult:
    """Log-relative-risk excursion effect for binary outcomes (damped Newton)."""
    config = config or EstimatorConfig(method="emee")
    config = replace(config, method="emee")
    _check_binary(ds)
    names = [f"beta0:{n}" for n in ds.f_names]
    fit, _ = _binary_fit(ds, config, ds.f, names, ds.q, None, "emee")
    return fit


def fit_a2emee(ds: MrtDataset, cm: CenteringModel | None = None,
               config: EstimatorConfig | None = None) -> FitResult:
    """Auxiliary-adjusted binary fit via an alternating centering loop.

    The centering coefficients solve, per auxiliary column, the first-order
    (in the auxiliary slope) version of the binary orthogonality condition,
    which is linear given the current effect coefficients; the effect and
    nuisance coefficients are then re-solved by Newton with the centered
    auxiliary interaction included. Iterates to a joint fixed point.
    """
    config = config or EstimatorConfig(method="a2emee")
    config = replace(config, method="a2emee")
    _check_binary(ds)
    if ds.p_z < 1:
        raise DimensionMismatch("a2emee requires auxiliary columns")
    blocks = design_blocks(ds)
    mask = ds.usable_mask
    a = ds.a.astype(float)
    w_az = (blocks.weight_w * a * blocks.centered_a * ds.y)[mask]
    f_use, z_use = ds.f[mask], ds.z[mask]

    def solve_theta(beta0):
        blip = np.exp(-f_use @ beta0)
        wv = w_az * blip
        gram = (f_use * wv[:, None]).T @ f_use / ds.n_subjects
        cond = np.linalg.cond(gram)
        if not np.isfinite(cond) or cond > COND_LIMIT:
            raise SingularGram("binary centering system is rank deficient")
        rhs = (f_use * wv[:, None]).T @ z_use / ds.n_subjects
        return np.linalg.solve(gram, rhs)

    base = fit_emee(ds, replace(config, method="emee"))
    theta = fit_centering(ds).theta
    params = np.concatenate([base.estimates, np.zeros(ds.p_z)])
    names = [f"beta0:{n}" for n in ds.f_names] + \
            [f"beta1:{n}" for n in (ds.z_names or [f"z{i}" for i in range(ds.p_z)])]
    history: list[np.ndarray] = []
    trace: list[float] = []
    fit = None
    for outer in range(1, config.max_iter + 1):
        zc = ds.z - ds.f @ theta
        feat = np.column_stack([ds.f, zc])
        fit, params = _binary_fit(ds, config, feat, names, ds.q, params,
                                  "a2emee")
        trace.extend(fit.ee_norm_trace[-1:])
        state = np.concatenate([params, theta.reshape(-1)])
        if history:
            delta = float(np.abs(state - history[-1]).max())
            if delta < max(config.tol, 1e-10):
                fit.converged = True
                fit.n_iter = outer
                fit.ee_norm_trace = tuple(trace)
                return fit
            for back in (2, 3, 4):
                if len(history) >= back and \
                        float(np.abs(state - history[-back]).max()) < max(config.tol, 1e-10):
                    raise OscillationDetected(
                        f"parameter cycle of length {back} detected", n_iter=outer)
        history.append(state)
        if len(history) > 8:
            history.pop(0)
        theta = solve_theta(params[len(ds.g_names):len(ds.g_names) + ds.q])
    raise NonConvergence(
        f"alternating centering loop failed to converge in {config.max_iter} passes",
        n_iter=config.max_iter)


# ---------------------------------------------------------------------------
# dispatcher


def fit(ds: MrtDataset, config: EstimatorConfig,
        cm: CenteringModel | None = None, t: int | None = None) -> FitResult:
    """Run the configured estimator on ``ds`` (``t`` for per-time methods)."""
    if config.lag != ds.lag:
        raise DimensionMismatch(
            f"config lag {config.lag} does not match dataset lag {ds.lag}")
    if config.method.endswith("per_time"):
        if t is None:
            raise DimensionMismatch("per-time methods need a decision index t")
        return {"unadjusted_per_time": fit_unadjusted_per_time,
                "wcls_per_time": fit_wcls_per_time,
                "lin_per_time": fit_lin_per_time}[config.method](ds, t, config)
    if config.method == "wcls":
        return fit_wcls(ds, config)
    if config.method == "a2wcls":
        return fit_a2wcls(ds, cm, config)
    if config.method == "a2wcls_lagged":
        return fit_a2wcls_lagged(ds, cm, config)
    if config.method == "emee":
        return fit_emee(ds, config)
    return fit_a2emee(ds, cm, config)
