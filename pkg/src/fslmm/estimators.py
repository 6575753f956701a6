"""Fisher-scoring estimation of the crossed-factor mixed model.

Five update schemes share one damped iteration driver:

* ``FS``    joint update of [beta, sigma2, vech(D_k)] with the half-
            representation information matrix
* ``FFS``   joint update of [beta, sigma2, vec(D_k)] with the invertible
            full-representation scaling matrix (pseudo-inverse equivalent)
* ``SFS``   GLS updates for beta and sigma2, then per-factor scoring steps
            on vech(D_k)
* ``FSFS``  as SFS but stepping vec(D_k) with the full-representation
            scaling blocks
* ``CSFS``  as SFS but stepping vech(L_k) of the Cholesky factor, which
            keeps every D_k non-negative definite by construction

The step size starts at 1 each iteration and halves until the criterion
stops decreasing (floor 2^-30); FS/FFS/SFS/FSFS additionally project each
updated D_k onto the PSD cone.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConvergenceWarning,
    DegenerateDataError,
    LmmError,
    NumericalError,
    NumericalWarning,
    SpecificationError,
)
from .kernels import (
    duplication_matrix,
    kron_block_sum,
    project_psd,
    pseudo_inverse,
    symmetrize_columns,
    unvec,
    vec,
    vech,
)
from .likelihood import (
    ParamState,
    chol_jacobian,
    criterion_value,
    fisher_info,
    gradient_matrices,
    score,
)
from .model import ModelData, ProductForms, VInverseProducts, product_forms

__all__ = [
    "FitConfig",
    "FitResult",
    "METHODS",
    "initial_values",
    "gls_updates",
    "fit",
    "ffs_equivalence_check",
]

METHODS = ("FS", "FFS", "SFS", "FSFS", "CSFS")
_METHOD_REP = {
    "FS": "half",
    "FFS": "full",
    "SFS": "half",
    "FSFS": "full",
    "CSFS": "cholesky",
}
ALPHA_FLOOR = 2.0**-30


@dataclass
class FitConfig:
    method: str = "FS"
    criterion: str = "ML"
    tol: float = 1e-6
    max_iter: int = 200

    def __post_init__(self):
        if self.method not in METHODS:
            raise SpecificationError(f"unknown method {self.method!r}")
        if self.criterion not in ("ML", "ReML"):
            raise SpecificationError(f"unknown criterion {self.criterion!r}")
        if self.tol <= 0 or self.max_iter < 1:
            raise SpecificationError("tol must be > 0 and max_iter >= 1")


@dataclass
class FitResult:
    """Converged (or best-effort) parameters in the half representation."""

    params: ParamState
    loglik: float
    criterion: str
    method: str
    iterations: int
    converged: bool
    trace: list[tuple[float, float]]
    se_beta: np.ndarray
    extra: dict = field(default_factory=dict)

    @property
    def beta(self) -> np.ndarray:
        return self.params.beta

    @property
    def sigma2(self) -> float:
        return self.params.sigma2

    def d_matrices(self) -> list[np.ndarray]:
        return self.params.d_matrices()


def _as_product_forms(data) -> ProductForms:
    if isinstance(data, ProductForms):
        return data
    if isinstance(data, ModelData):
        return product_forms(data)
    raise SpecificationError("expected ModelData or ProductForms")


# ---------------------------------------------------------------------------
# Initial values
# ---------------------------------------------------------------------------


def initial_values(pf: ProductForms) -> ParamState:
    """OLS starting point plus the identity-weighted least-squares guess for
    each covariance block, symmetrized and projected onto the PSD cone."""
    n, p = pf.n, pf.p
    fs = pf.structure
    if p:
        beta0 = np.linalg.solve(pf.xtx, pf.xty)
    else:
        beta0 = np.zeros(0)
    ete = pf.yty - 2.0 * float(beta0 @ pf.xty) + float(beta0 @ pf.xtx @ beta0)
    sigma2_0 = ete / n
    if sigma2_0 <= 1e-12 * max(1.0, pf.yty / n):
        raise DegenerateDataError("residual variance is zero at the OLS start")
    h = pf.ytz - pf.xtz.T @ beta0  # Z'e0
    blocks = []
    for k in range(fs.n_factors):
        q, l = fs.q_counts[k], fs.level_counts[k]
        u_diag = np.concatenate(
            [pf.ztz[fs.level_slice(k, j), fs.level_slice(k, j)] for j in range(l)],
            axis=0,
        )
        gram = kron_block_sum(u_diag, u_diag, (q, q))
        hk = fs.split_levels(h, k)
        rhs_mat = hk.T @ hk / sigma2_0 - fs.diag_block_sum(pf.ztz, k)
        d0 = None
        try:
            sol = np.linalg.solve(gram, vec(rhs_mat))
            if np.all(np.isfinite(sol)):
                d0 = unvec(sol, q, q)
        except np.linalg.LinAlgError:
            pass
        if d0 is None:
            warnings.warn(
                f"identity-weighted start for factor {k} is singular; "
                "starting from a zero block",
                NumericalWarning,
                stacklevel=2,
            )
            d0 = np.zeros((q, q))
        blocks.append(vech(project_psd(d0)))
    return ParamState(rep="half", beta=beta0, sigma2=float(sigma2_0), blocks=blocks)


def gls_updates(pf: ProductForms, theta: ParamState, criterion: str = "ML", vp=None):
    """Generalized least squares coordinate updates for (beta, sigma2).

    The variance update divides by n under ML and by n - p under ReML
    (the root of the restricted score in the sigma2 coordinate).
    """
    vp = vp or VInverseProducts(pf, theta.d_matrices())
    beta = vp.gls_beta() if pf.p else np.zeros(0)
    denom = pf.n - pf.p if criterion == "ReML" else pf.n
    sigma2 = vp.etvie(beta) / denom
    return beta, float(sigma2)


# ---------------------------------------------------------------------------
# Iteration driver
# ---------------------------------------------------------------------------


def _safe_value(pf, theta, criterion):
    try:
        return criterion_value(pf, theta, criterion)
    except (LmmError, np.linalg.LinAlgError):
        return -np.inf


def _solve_direction(mat, rhs, label):
    try:
        out = np.linalg.solve(mat, rhs)
        if np.all(np.isfinite(out)):
            return out
    except np.linalg.LinAlgError:
        pass
    warnings.warn(
        f"singular {label}; falling back to its pseudo-inverse",
        NumericalWarning,
        stacklevel=3,
    )
    return pseudo_inverse(mat) @ rhs


def run_scoring_loop(theta0, make_step, value_fn, tol, max_iter):
    """Damped scoring iterations with per-iteration step-halving.

    ``make_step(theta)`` prepares one iteration and returns a callable
    ``step(alpha) -> candidate | None``; candidates failing validity or
    decreasing the criterion by more than ``tol`` trigger halving.  Returns
    (theta, value, iterations, converged, trace).
    """
    l_cur = value_fn(theta0)
    if not np.isfinite(l_cur):
        raise NumericalError("criterion is not finite at the starting values")
    theta = theta0
    trace: list[tuple[float, float]] = []
    converged = False
    for _ in range(max_iter):
        step = make_step(theta)
        alpha = 1.0
        accepted = None
        hit_floor = False
        while True:
            cand = step(alpha)
            l_cand = value_fn(cand) if cand is not None else -np.inf
            if l_cand >= l_cur - tol:
                accepted = cand
                break
            alpha *= 0.5
            if alpha < ALPHA_FLOOR:
                hit_floor = True
                if np.isfinite(l_cand):
                    accepted = cand
                break
        if accepted is None:
            break
        delta = l_cand - l_cur
        theta, l_cur = accepted, l_cand
        trace.append((l_cur, alpha))
        if hit_floor:
            break
        if abs(delta) < tol:
            converged = True
            break
    return theta, l_cur, len(trace), converged, trace


# ---------------------------------------------------------------------------
# Method-specific steps
# ---------------------------------------------------------------------------


def _project_state(theta: ParamState) -> ParamState:
    """PSD-project every decoded covariance block, re-encoding in place."""
    if theta.rep == "cholesky":
        return theta
    blocks = []
    for d in theta.d_matrices():
        d_proj = project_psd(d)
        blocks.append(vech(d_proj) if theta.rep == "half" else vec(d_proj))
    return ParamState(
        rep=theta.rep, beta=theta.beta, sigma2=theta.sigma2, blocks=blocks
    )


def _joint_step_factory(pf, criterion, rep):
    flag = "fisher_half" if rep == "half" else "F_full"

    def make_step(theta):
        vp = VInverseProducts(pf, theta.d_matrices())
        sv = score(theta, pf, criterion, vp=vp)
        info = fisher_info(theta, pf, flag, vp=vp)
        direction = _solve_direction(info.matrix, sv.pack(), f"{flag} matrix")
        base = theta.pack()
        p, q_sizes = theta.p, theta.q_sizes()

        def step(alpha):
            cand = ParamState.unpack(base + alpha * direction, rep, p, q_sizes)
            if cand.sigma2 <= 0:
                return None
            return _project_state(cand)

        return step

    return make_step


def _simplified_step_factory(pf, criterion, rep):
    fs = pf.structure

    def make_step(theta):
        vp = VInverseProducts(pf, theta.d_matrices())
        beta, sigma2 = gls_updates(pf, theta, criterion, vp=vp)
        if sigma2 <= 0:
            # Defensive: GLS variance is positive for valid states.
            beta, sigma2 = theta.beta, theta.sigma2
        mats = gradient_matrices(vp, beta, sigma2, criterion)
        directions = []
        for k in range(fs.n_factors):
            q = fs.q_counts[k]
            grid = vp.ztviz[fs.factor_slice(k), fs.factor_slice(k)]
            f_block = 0.5 * kron_block_sum(grid, grid, (q, q))
            if rep == "half":
                dup = duplication_matrix(q)
                g = 0.5 * dup.T @ vec(mats[k])
                i_block = dup.T @ f_block @ dup
                directions.append(
                    _solve_direction(i_block, g, f"factor {k} information block")
                )
            elif rep == "full":
                g = 0.5 * vec(mats[k])
                directions.append(
                    _solve_direction(f_block, g, f"factor {k} scaling block")
                )
            else:
                lam = theta.chol_factors()[k]
                jac = chol_jacobian(lam)
                dup = duplication_matrix(q)
                g = jac @ (0.5 * vech(mats[k]))
                i_block = jac @ (dup.T @ f_block @ dup) @ jac.T
                directions.append(
                    _solve_direction(i_block, g, f"factor {k} Cholesky block")
                )

        def step(alpha):
            blocks = [
                b + alpha * d for b, d in zip(theta.blocks, directions)
            ]
            cand = ParamState(rep=rep, beta=beta, sigma2=sigma2, blocks=blocks)
            return _project_state(cand)

        return step

    return make_step


def fit(data, config: FitConfig | None = None, structure=None) -> FitResult:
    """Estimate the model by the configured Fisher-scoring variant.

    ``structure`` (per-factor covariance structures or a shared-parameter
    structure) switches to the constrained optimizer; see
    :mod:`fslmm.constraints`.
    """
    cfg = config or FitConfig()
    pf = _as_product_forms(data)
    if structure is not None:
        from .constraints import fit_constrained

        return fit_constrained(pf, cfg, structure)
    rep = _METHOD_REP[cfg.method]
    theta0 = initial_values(pf).convert(rep)
    if cfg.method in ("FS", "FFS"):
        make_step = _joint_step_factory(pf, cfg.criterion, rep)
    else:
        make_step = _simplified_step_factory(pf, cfg.criterion, rep)
    theta, loglik, iters, converged, trace = run_scoring_loop(
        theta0,
        make_step,
        lambda th: _safe_value(pf, th, cfg.criterion),
        cfg.tol,
        cfg.max_iter,
    )
    if not converged:
        warnings.warn(
            f"{cfg.method} did not converge in {iters} iterations",
            ConvergenceWarning,
            stacklevel=2,
        )
    return _finalize(pf, theta, loglik, cfg, iters, converged, trace)


def _finalize(pf, theta, loglik, cfg, iters, converged, trace, extra=None):
    half = theta.convert("half")
    vp = VInverseProducts(pf, half.d_matrices())
    # Exact profile step: given the final blocks, (beta, sigma2) have
    # closed-form maximizers, so report those (never decreases the
    # criterion; removes scoring-step roundoff from the linear part).
    try:
        beta, sigma2 = gls_updates(pf, half, cfg.criterion, vp=vp)
        polished = ParamState(
            rep="half", beta=beta, sigma2=sigma2, blocks=half.blocks
        )
        value = criterion_value(pf, polished, cfg.criterion, vp=vp)
        if np.isfinite(value) and value >= loglik:
            half, loglik = polished, value
    except (NumericalError, np.linalg.LinAlgError):
        pass
    if pf.p:
        cov_beta = half.sigma2 * np.linalg.inv(vp.xtvix)
        se_beta = np.sqrt(np.diag(cov_beta))
    else:
        se_beta = np.zeros(0)
    return FitResult(
        params=half,
        loglik=float(loglik),
        criterion=cfg.criterion,
        method=cfg.method,
        iterations=iters,
        converged=converged,
        trace=trace,
        se_beta=se_beta,
        extra=extra or {},
    )


# ---------------------------------------------------------------------------
# Diagnostics
# ---------------------------------------------------------------------------


def ffs_equivalence_check(theta: ParamState, pf: ProductForms, per_factor=False):
    """Relative gap between the invertible-scaling update and the
    pseudo-inverse information update in the full representation.

    Both solve the same scoring step when the gradient blocks are
    symmetric, so the gap should sit at the numerical noise floor.
    """
    theta = theta if theta.rep == "full" else theta.convert("full")
    vp = VInverseProducts(pf, theta.d_matrices())
    sv = score(theta, pf, "ML", vp=vp)
    if per_factor:
        fs = pf.structure
        gaps = []
        for k in range(fs.n_factors):
            q = fs.q_counts[k]
            grid = vp.ztviz[fs.factor_slice(k), fs.factor_slice(k)]
            f_block = 0.5 * kron_block_sum(grid, grid, (q, q))
            i_block = symmetrize_columns(f_block, q)
            g = sv.blocks[k]
            u1 = np.linalg.solve(f_block, g)
            u2 = pseudo_inverse(i_block) @ g
            gaps.append(float(np.linalg.norm(u1 - u2) / np.linalg.norm(u1)))
        return gaps
    f_mat = fisher_info(theta, pf, "F_full", vp=vp).matrix
    i_mat = fisher_info(theta, pf, "fisher_full", vp=vp).matrix
    g = sv.pack()
    u1 = np.linalg.solve(f_mat, g)
    u2 = pseudo_inverse(i_mat) @ g
    return float(np.linalg.norm(u1 - u2) / np.linalg.norm(u1))
