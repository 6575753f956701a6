"""Approximate T/F inference with closed-form Satterthwaite degrees of
freedom.

For a contrast row L the statistic divides L beta_hat by the plug-in
standard error sqrt(S^2), S^2 = sigma2 L (X'V^{-1}X)^{-1} L'.  The
degrees of freedom come from moment matching,

    df = 2 (S^2)^2 / Var(S^2),

with Var(S^2) approximated by the delta method: the exact closed-form
gradient of S^2 in the variance parameters, sandwiched around their
asymptotic covariance (the inverse expected information of the fitting
criterion -- the restricted one under ReML).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import special

from .errors import NumericalError, SpecificationError
from .kernels import duplication_matrix, vec
from .likelihood import ParamState, variance_information
from .model import ProductForms, VInverseProducts

__all__ = [
    "Contrast",
    "TestReport",
    "t_statistic",
    "f_statistic",
    "s2_gradient",
    "satterthwaite_df_t",
    "satterthwaite_df_f",
    "combine_f_row_dfs",
    "p_value",
    "contrast_report",
]


@dataclass(frozen=True)
class Contrast:
    """A (c x p) contrast matrix; rows must be linearly independent for
    F-tests, and c = 1 for T-tests."""

    matrix: np.ndarray
    name: str = ""

    def __post_init__(self):
        object.__setattr__(
            self, "matrix", np.atleast_2d(np.asarray(self.matrix, dtype=float))
        )
        if self.matrix.size == 0 or not np.any(self.matrix):
            raise SpecificationError("contrast must be nonzero")

    @property
    def rank(self) -> int:
        return int(np.linalg.matrix_rank(self.matrix))


@dataclass
class TestReport:
    name: str
    kind: str  # "t" or "f"
    statistic: float
    df: float
    p_value: float
    s2: float
    var_s2: float
    numerator_rank: int = 1


def _as_row(contrast) -> np.ndarray:
    mat = contrast.matrix if isinstance(contrast, Contrast) else np.atleast_2d(contrast)
    if mat.shape[0] != 1:
        raise SpecificationError("T-statistics need a single contrast row")
    return np.asarray(mat, dtype=float)


def _vstate(fit, pf) -> VInverseProducts:
    return VInverseProducts(pf, fit.params.d_matrices())


def t_statistic(fit, contrast, pf: ProductForms, vp=None) -> float:
    """Approximate T-statistic L beta_hat / sqrt(S^2)."""
    row = _as_row(contrast)[0]
    vp = vp or _vstate(fit, pf)
    s2 = float(fit.sigma2 * row @ vp.xtvix_solve(row))
    if s2 <= 0 or not np.isfinite(s2):
        raise NumericalError(f"non-positive contrast variance {s2!r}")
    return float(row @ fit.beta / np.sqrt(s2))


def f_statistic(fit, contrast, pf: ProductForms, vp=None) -> float:
    """Approximate F-statistic beta'L'[L Var(beta) L']^{-1} L beta / rank."""
    mat = contrast.matrix if isinstance(contrast, Contrast) else np.atleast_2d(contrast)
    vp = vp or _vstate(fit, pf)
    cov = fit.sigma2 * np.linalg.inv(vp.xtvix)
    middle = mat @ cov @ mat.T
    lb = mat @ fit.beta
    r = np.linalg.matrix_rank(mat)
    return float(lb @ np.linalg.solve(middle, lb) / r)


def s2_gradient(fit, contrast, pf: ProductForms, shared_constraint=None, vp=None):
    """Closed-form gradient of S^2 in the variance parameters.

    Coordinates are (sigma2, vech(D_1), ..., vech(D_r)); with
    ``shared_constraint`` C the block part is re-expressed as C times the
    stacked vec-level gradient (constrained covariance variant).

    dS^2/dsigma2     = L (X'V^{-1}X)^{-1} L'
    dS^2/dvech(D_k)  = sigma2 D_qk' sum_j b_(k,j) (x) b_(k,j),
    with b_(k,j) the (k, j) rows of Z'V^{-1}X (X'V^{-1}X)^{-1} L'.
    """
    row = _as_row(contrast)[0]
    vp = vp or _vstate(fit, pf)
    fs = pf.structure
    b_full = vp.ztvix @ vp.xtvix_solve(row)  # (q,)
    d_sigma2 = float(row @ vp.xtvix_solve(row))
    vec_parts = []
    for k in range(fs.n_factors):
        bk = fs.split_levels(b_full, k)  # (l_k, q_k)
        outer = bk.T @ bk  # sum_j b b'
        vec_parts.append(fit.sigma2 * vec(outer))
    if shared_constraint is not None:
        if vec_parts:
            block = shared_constraint @ np.concatenate(vec_parts)
        else:
            block = np.zeros(shared_constraint.shape[0])
        return np.concatenate([[d_sigma2], block])
    half_parts = [
        duplication_matrix(fs.q_counts[k]).T @ vp_
        for k, vp_ in enumerate(vec_parts)
    ]
    return np.concatenate([[d_sigma2]] + half_parts) if half_parts else np.array(
        [d_sigma2]
    )


def satterthwaite_df_t(
    fit, contrast, pf: ProductForms, shared_constraint=None, vp=None
) -> TestReport:
    """Direct Satterthwaite degrees of freedom for a single-row contrast.

    ML-based variance estimates are accepted with a warning (the
    resulting degrees of freedom are biased downward); ReML is the
    intended criterion.
    """
    if fit.criterion != "ReML":
        warnings.warn(
            "Satterthwaite degrees of freedom from an ML fit are "
            "underestimated; prefer ReML",
            UserWarning,
            stacklevel=2,
        )
    row = _as_row(contrast)
    vp = vp or _vstate(fit, pf)
    stat = t_statistic(fit, row, pf, vp=vp)
    s2 = float(fit.sigma2 * row[0] @ vp.xtvix_solve(row[0]))
    grad = s2_gradient(fit, row, pf, shared_constraint=shared_constraint, vp=vp)
    if shared_constraint is not None:
        info = variance_information(
            fit.params, pf, fit.criterion, shared_conjugator=shared_constraint, vp=vp
        )
    else:
        info = variance_information(fit.params, pf, fit.criterion, vp=vp)
    var_s2 = float(grad @ np.linalg.solve(info, grad))
    if var_s2 <= 0 or not np.isfinite(var_s2):
        raise NumericalError(f"non-positive Var(S^2) estimate {var_s2!r}")
    df = 2.0 * s2**2 / var_s2
    name = contrast.name if isinstance(contrast, Contrast) else ""
    return TestReport(
        name=name,
        kind="t",
        statistic=stat,
        df=df,
        p_value=p_value(stat, df, "t"),
        s2=s2,
        var_s2=var_s2,
    )


def satterthwaite_df_f(
    fit, contrast, pf: ProductForms, shared_constraint=None
) -> TestReport:
    """Satterthwaite denominator degrees of freedom for an F contrast.

    The contrast variance is eigendecomposed into independent directions;
    each direction gets a T-style estimate v_i, combined by rank r:
    r = 1 reduces to the T path, r = 2 returns exactly 2, and r > 2 uses
    2 s / (s - r) with s = sum v_i / (v_i - 2) (terms with v_i near 2 are
    floored at 2 + 1e-6).
    """
    mat = contrast.matrix if isinstance(contrast, Contrast) else np.atleast_2d(contrast)
    name = contrast.name if isinstance(contrast, Contrast) else ""
    r = int(np.linalg.matrix_rank(mat))
    if r != mat.shape[0]:
        raise SpecificationError("F contrasts need linearly independent rows")
    vp = _vstate(fit, pf)
    stat = f_statistic(fit, mat, pf, vp=vp)
    if r == 1:
        t_rep = satterthwaite_df_t(fit, mat, pf, shared_constraint, vp=vp)
        return TestReport(
            name=name,
            kind="f",
            statistic=stat,
            df=t_rep.df,
            p_value=p_value(stat, t_rep.df, "f", numerator=1),
            s2=t_rep.s2,
            var_s2=t_rep.var_s2,
            numerator_rank=1,
        )
    cov = fit.sigma2 * np.linalg.inv(vp.xtvix)
    middle = mat @ cov @ mat.T
    _, eigvec = np.linalg.eigh(middle)
    ltilde = eigvec.T @ mat
    if r == 2:
        df = 2.0
    else:
        per_row = [
            satterthwaite_df_t(fit, ltilde[i : i + 1], pf, shared_constraint, vp=vp).df
            for i in range(r)
        ]
        df = combine_f_row_dfs(per_row)
    return TestReport(
        name=name,
        kind="f",
        statistic=stat,
        df=df,
        p_value=p_value(stat, df, "f", numerator=r),
        s2=float(np.trace(middle)),
        var_s2=np.nan,
        numerator_rank=r,
    )


def combine_f_row_dfs(row_dfs) -> float:
    """Combine per-direction T degrees of freedom into the F denominator.

    Applies the expectation-matching rule for rank > 2: with
    s = sum v_i / (v_i - 2), df = 2 s / (s - r).  Rows at or below 2 are
    floored at 2 + 1e-6 before the ratio so one degenerate direction
    cannot poison the sum.
    """
    floor = 2.0 + 1e-6
    r = len(row_dfs)
    s = sum(max(v, floor) / (max(v, floor) - 2.0) for v in row_dfs)
    return float(2.0 * s / (s - r))


def p_value(statistic, df, kind="t", numerator=1) -> float:
    """Two-sided t or upper-tail F probability via the regularized
    incomplete beta function."""
    if df <= 0:
        raise SpecificationError("degrees of freedom must be positive")
    if kind == "t":
        x = df / (df + float(statistic) ** 2)
        return float(special.betainc(df / 2.0, 0.5, x))
    if kind == "f":
        f = max(float(statistic), 0.0)
        x = df / (df + numerator * f)
        return float(special.betainc(df / 2.0, numerator / 2.0, x))
    raise SpecificationError(f"unknown statistic kind {kind!r}")


def contrast_report(fit, contrast, pf: ProductForms, shared_constraint=None) -> TestReport:
    """Dispatch on contrast rank: single rows get T-tests, larger ones F."""
    mat = contrast.matrix if isinstance(contrast, Contrast) else np.atleast_2d(contrast)
    if mat.shape[0] == 1:
        return satterthwaite_df_t(fit, contrast, pf, shared_constraint)
    return satterthwaite_df_f(fit, contrast, pf, shared_constraint)
