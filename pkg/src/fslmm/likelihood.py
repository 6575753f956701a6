"""Log-likelihoods, score vectors and expected-information matrices for the
crossed-factor mixed model under three covariance parameterizations.

Parameter layout is always [beta, sigma2, block_1, ..., block_r] where the
per-factor block coordinates depend on the representation:

* ``half``      vech(D_k)                 (the unique covariance entries)
* ``full``      vec(D_k)                  (all entries treated as free)
* ``cholesky``  vech(L_k), D_k = L_k L_k' (lower-triangular factor)

All level sums are evaluated through reshapes of the q-dimensional
cross products (no per-level loops), and all V-dependent quantities go
through the q x q Woodbury state of :class:`~fslmm.model.VInverseProducts`.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import NumericalError, SpecificationError
from .kernels import (
    commutation_matrix,
    duplication_matrix,
    elimination_matrix,
    kron_block_sum,
    symmetrize_columns,
    unvec,
    unvech,
    unvech_lower,
    vec,
    vech,
)
from .model import ProductForms, VInverseProducts

__all__ = [
    "ParamState",
    "ScoreVector",
    "InfoMatrix",
    "log_likelihood",
    "reml_log_likelihood",
    "criterion_value",
    "score",
    "fisher_info",
    "chol_jacobian",
    "variance_information",
]

REPRESENTATIONS = ("half", "full", "cholesky")
CRITERIA = ("ML", "ReML")


def _q_from_block(rep: str, length: int) -> int:
    if rep == "full":
        q = int(np.sqrt(length) + 0.5)
        if q * q != length:
            raise SpecificationError(f"block length {length} is not square")
        return q
    q = int((np.sqrt(8 * length + 1) - 1) / 2 + 0.5)
    if q * (q + 1) // 2 != length:
        raise SpecificationError(f"block length {length} is not triangular")
    return q


def block_width(rep: str, q: int) -> int:
    return q * q if rep == "full" else q * (q + 1) // 2


@dataclass
class ParamState:
    """One point in parameter space under a chosen representation."""

    rep: str
    beta: np.ndarray
    sigma2: float
    blocks: list[np.ndarray]

    def __post_init__(self):
        if self.rep not in REPRESENTATIONS:
            raise SpecificationError(f"unknown representation {self.rep!r}")
        self.beta = np.asarray(self.beta, dtype=float)
        self.blocks = [np.asarray(b, dtype=float).ravel() for b in self.blocks]

    @property
    def p(self) -> int:
        return self.beta.shape[0]

    def q_sizes(self) -> tuple[int, ...]:
        return tuple(_q_from_block(self.rep, b.size) for b in self.blocks)

    def d_matrices(self) -> list[np.ndarray]:
        """Decode the blocks to covariance matrices D_k.

        Full-representation blocks are reshaped without symmetrization so
        that off-diagonal coordinates stay independent (this is what makes
        the partial-derivative score finite-difference checkable).
        """
        out = []
        for b in self.blocks:
            q = _q_from_block(self.rep, b.size)
            if self.rep == "half":
                out.append(unvech(b))
            elif self.rep == "full":
                out.append(unvec(b, q, q))
            else:
                lam = unvech_lower(b)
                out.append(lam @ lam.T)
        return out

    def chol_factors(self) -> list[np.ndarray]:
        if self.rep != "cholesky":
            raise SpecificationError("chol_factors requires the cholesky rep")
        return [unvech_lower(b) for b in self.blocks]

    def convert(self, rep: str) -> "ParamState":
        """Re-express in another representation (cholesky needs PSD blocks)."""
        if rep == self.rep:
            return replace(self, blocks=[b.copy() for b in self.blocks])
        mats = self.d_matrices()
        if rep == "half":
            blocks = [vech(0.5 * (m + m.T)) for m in mats]
        elif rep == "full":
            blocks = [vec(m) for m in mats]
        elif rep == "cholesky":
            blocks = [vech(_safe_cholesky(0.5 * (m + m.T))) for m in mats]
        else:
            raise SpecificationError(f"unknown representation {rep!r}")
        return ParamState(rep=rep, beta=self.beta.copy(), sigma2=self.sigma2, blocks=blocks)

    def pack(self) -> np.ndarray:
        return np.concatenate([self.beta, [self.sigma2]] + list(self.blocks))

    @classmethod
    def unpack(cls, vector, rep, p, q_sizes) -> "ParamState":
        vector = np.asarray(vector, dtype=float)
        beta = vector[:p]
        sigma2 = float(vector[p])
        blocks, off = [], p + 1
        for q in q_sizes:
            w = block_width(rep, q)
            blocks.append(vector[off : off + w])
            off += w
        return cls(rep=rep, beta=beta, sigma2=sigma2, blocks=blocks)


def _safe_cholesky(d, floor=1e-6):
    """Lower Cholesky factor of a PSD matrix, with zero pivots floored.

    The factor of a singular block is not unique; flooring tiny diagonal
    entries keeps later Cholesky-space updates well defined.
    """
    q = d.shape[0]
    try:
        lam = np.linalg.cholesky(d + 1e-14 * np.eye(q))
    except np.linalg.LinAlgError:
        w, u = np.linalg.eigh(0.5 * (d + d.T))
        d_psd = (u * np.maximum(w, 0.0)) @ u.T
        lam = np.linalg.cholesky(d_psd + floor**2 * np.eye(q))
    small = np.abs(np.diag(lam)) < floor
    if np.any(small):
        lam = lam + np.diag(np.where(small, floor, 0.0))
    return lam


@dataclass
class ScoreVector:
    """Gradient of the chosen criterion in the ParamState layout."""

    rep: str
    beta: np.ndarray
    sigma2: float
    blocks: list[np.ndarray]

    def pack(self) -> np.ndarray:
        return np.concatenate([self.beta, [self.sigma2]] + list(self.blocks))


@dataclass
class InfoMatrix:
    """Expected information (or the related full-representation scaling
    matrix) over the [beta, sigma2, blocks] coordinate layout."""

    matrix: np.ndarray
    flag: str  # fisher_half | fisher_full | F_full | fisher_chol
    p: int
    widths: tuple[int, ...]

    @property
    def beta_slice(self) -> slice:
        return slice(0, self.p)

    @property
    def sigma2_index(self) -> int:
        return self.p

    def block_slice(self, k: int) -> slice:
        off = self.p + 1 + int(sum(self.widths[:k]))
        return slice(off, off + self.widths[k])

    def variance_submatrix(self) -> np.ndarray:
        """The (sigma2, blocks) sub-block, the asymptotic covariance inverse
        of the variance parameters."""
        return self.matrix[self.p :, self.p :]


# ---------------------------------------------------------------------------
# Likelihood values
# ---------------------------------------------------------------------------


def _vstate(pf: ProductForms, theta: ParamState) -> VInverseProducts:
    return VInverseProducts(pf, theta.d_matrices())


def log_likelihood(pf: ProductForms, theta: ParamState, vp=None) -> float:
    """Marginal log-likelihood (additive constants dropped)."""
    if theta.sigma2 <= 0:
        raise NumericalError("sigma2 must be positive")
    vp = vp or _vstate(pf, theta)
    quad = vp.etvie(theta.beta)
    return -0.5 * (
        pf.n * np.log(theta.sigma2) + quad / theta.sigma2 + vp.logdet_v
    )


def reml_log_likelihood(pf: ProductForms, theta: ParamState, vp=None) -> float:
    """Restricted log-likelihood (additive constants dropped)."""
    vp = vp or _vstate(pf, theta)
    base = log_likelihood(pf, theta, vp=vp)
    if pf.p == 0:
        return base
    sign, logdet = np.linalg.slogdet(vp.xtvix)
    if sign <= 0 or not np.isfinite(logdet):
        raise NumericalError("X'V^{-1}X is singular")
    return base - 0.5 * (-pf.p * np.log(theta.sigma2) + logdet)


def criterion_value(pf: ProductForms, theta: ParamState, criterion: str, vp=None) -> float:
    if criterion == "ML":
        return log_likelihood(pf, theta, vp=vp)
    if criterion == "ReML":
        return reml_log_likelihood(pf, theta, vp=vp)
    raise SpecificationError(f"unknown criterion {criterion!r}")


# ---------------------------------------------------------------------------
# Score vectors
# ---------------------------------------------------------------------------


def _reml_level_correction(vp: VInverseProducts, k: int) -> np.ndarray:
    """sum_j Z_(k,j)'V^{-1}X (X'V^{-1}X)^{-1} X'V^{-1}Z_(k,j)."""
    fs = vp.pf.structure
    half = np.linalg.solve(vp.xtvix_chol(), vp.ztvix.T)  # (p, q)
    l, q = fs.level_counts[k], fs.q_counts[k]
    part = half[:, fs.factor_slice(k)].reshape(vp.pf.p, l, q)
    return np.einsum("pja,pjb->ab", part, part)


def gradient_matrices(
    vp: VInverseProducts, beta, sigma2, criterion="ML"
) -> list[np.ndarray]:
    """Per-factor symmetric matrices M_k with dl/dvec(D_k) = vec(M_k)/2.

    M_k = sum_j Z_(k,j)'V^{-1}[(ee'/sigma2) - V]V^{-1}Z_(k,j), plus the
    residual-projection term under ReML.
    """
    fs = vp.pf.structure
    g = vp.ztvie(beta)
    zz = vp.ztviz
    out = []
    for k in range(fs.n_factors):
        gk = fs.split_levels(g, k)  # (l_k, q_k)
        m = gk.T @ gk / sigma2 - fs.diag_block_sum(zz, k)
        if criterion == "ReML":
            m = m + _reml_level_correction(vp, k)
        out.append(m)
    return out


def score(
    theta: ParamState, pf: ProductForms, criterion: str = "ML", vp=None
) -> ScoreVector:
    """Score vector of the chosen criterion in theta's representation."""
    if criterion not in CRITERIA:
        raise SpecificationError(f"unknown criterion {criterion!r}")
    vp = vp or _vstate(pf, theta)
    sigma2 = theta.sigma2
    d_beta = (vp.xtviy - vp.xtvix @ theta.beta) / sigma2
    d_sigma2 = -0.5 * pf.n / sigma2 + 0.5 * vp.etvie(theta.beta) / sigma2**2
    if criterion == "ReML":
        d_sigma2 += 0.5 * pf.p / sigma2
    mats = gradient_matrices(vp, theta.beta, sigma2, criterion)
    blocks = []
    if theta.rep == "half":
        for m in mats:
            q = m.shape[0]
            blocks.append(0.5 * duplication_matrix(q).T @ vec(m))
    elif theta.rep == "full":
        blocks = [0.5 * vec(m) for m in mats]
    else:
        for m, lam in zip(mats, theta.chol_factors()):
            jac = chol_jacobian(lam)
            blocks.append(jac @ (0.5 * vech(m)))
    return ScoreVector(
        rep=theta.rep, beta=d_beta, sigma2=float(d_sigma2), blocks=blocks
    )


def chol_jacobian(lam: np.ndarray) -> np.ndarray:
    """Derivative map between vech(L) and vech(D) coordinates, D = L L'.

    The matrix L_q (L' (x) I)(I + K_qq) D_q maps the half-vectorized
    partial gradient (lower triangle of the matrix partial derivative) to
    the total gradient with respect to vech(L); it is likewise the factor
    that conjugates half-representation information blocks into
    Cholesky-representation ones.
    """
    lam = np.asarray(lam, dtype=float)
    q = lam.shape[0]
    if lam.shape != (q, q) or np.any(np.triu(lam, 1) != 0):
        raise SpecificationError("chol_jacobian expects a lower-triangular matrix")
    middle = np.kron(lam.T, np.eye(q)) @ (
        np.eye(q * q) + commutation_matrix(q, q)
    )
    return elimination_matrix(q) @ middle @ duplication_matrix(q)


# ---------------------------------------------------------------------------
# Expected information
# ---------------------------------------------------------------------------

FIM_FLAGS = ("fisher_half", "fisher_full", "F_full", "fisher_chol")


def _level_block_grid(mat, fs, k1, k2):
    return mat[fs.factor_slice(k1), fs.factor_slice(k2)]


def _variance_pieces(core: np.ndarray, fs):
    """(S_k sums, pairwise Kronecker-square sums) of a q x q core matrix."""
    r = fs.n_factors
    s_list = [fs.diag_block_sum(core, k) for k in range(r)]
    ks = {}
    for k1 in range(r):
        for k2 in range(k1, r):
            grid = _level_block_grid(core, fs, k1, k2)
            ks[(k1, k2)] = kron_block_sum(
                grid, grid, (fs.q_counts[k1], fs.q_counts[k2])
            )
    return s_list, ks


def fisher_info(
    theta: ParamState, pf: ProductForms, flag: str = "fisher_half", vp=None
) -> InfoMatrix:
    """Expected information over [beta, sigma2, blocks].

    ``fisher_half``/``fisher_full``/``fisher_chol`` are the information
    matrices of the matching representations; ``F_full`` is the invertible
    full-representation scaling matrix whose blocks omit the symmetrizer
    (it is not the Fisher information, but induces an equivalent update
    through the pseudo-inverse identity).

    ML and ReML estimates share this matrix: the two criteria have the
    same asymptotic information, so no ReML variant is assembled here.
    """
    if flag not in FIM_FLAGS:
        raise SpecificationError(f"unknown flag {flag!r}")
    vp = vp or _vstate(pf, theta)
    fs = pf.structure
    sigma2 = theta.sigma2
    q_sizes = theta.q_sizes()
    rep = {"fisher_half": "half", "fisher_full": "full", "F_full": "full"}.get(
        flag, "cholesky"
    )
    widths = tuple(block_width(rep, q) for q in q_sizes)
    p = pf.p
    total = p + 1 + sum(widths)
    out = np.zeros((total, total))
    out[:p, :p] = vp.xtvix / sigma2
    out[p, p] = 0.5 * pf.n / sigma2**2

    s_list, ks = _variance_pieces(vp.ztviz, fs)
    jacs = (
        [chol_jacobian(lam) for lam in theta.chol_factors()]
        if flag == "fisher_chol"
        else None
    )

    offsets = np.concatenate([[p + 1], p + 1 + np.cumsum(widths)])
    for k in range(fs.n_factors):
        row = 0.5 / sigma2 * vec(s_list[k])
        q = q_sizes[k]
        if flag == "fisher_half":
            row = duplication_matrix(q).T @ row
        elif flag == "fisher_chol":
            row = jacs[k] @ (duplication_matrix(q).T @ row)
        sl = slice(offsets[k], offsets[k + 1])
        out[p, sl] = row
        out[sl, p] = row
    for (k1, k2), block in ks.items():
        q1, q2 = q_sizes[k1], q_sizes[k2]
        b = 0.5 * block
        if flag == "fisher_half":
            b = duplication_matrix(q1).T @ b @ duplication_matrix(q2)
        elif flag == "fisher_full":
            b = symmetrize_columns(b, q2)
        elif flag == "fisher_chol":
            b = (
                jacs[k1]
                @ (duplication_matrix(q1).T @ b @ duplication_matrix(q2))
                @ jacs[k2].T
            )
        sl1 = slice(offsets[k1], offsets[k1 + 1])
        sl2 = slice(offsets[k2], offsets[k2 + 1])
        out[sl1, sl2] = b
        if k1 != k2:
            if flag == "fisher_full":
                # off-diagonal transpose carries its own symmetrizer side
                bt = symmetrize_columns(0.5 * ks[(k1, k2)].T, q1)
                out[sl2, sl1] = bt
            else:
                out[sl2, sl1] = b.T
    return InfoMatrix(matrix=out, flag=flag, p=p, widths=widths)


def variance_information(
    theta: ParamState,
    pf: ProductForms,
    criterion: str = "ML",
    conjugators: list[np.ndarray] | None = None,
    shared_conjugator: np.ndarray | None = None,
    vp=None,
) -> np.ndarray:
    """Expected information of the variance parameters (sigma2, blocks).

    Under ML this is the variance sub-block of the standard information.
    Under ReML the residual-projected core Z'PZ and the degrees-of-freedom
    count n - p replace Z'V^{-1}Z and n, giving the information of the
    restricted likelihood (exactly (n-p)/(2 sigma^4) in the no-random-
    effects limit).

    ``conjugators`` (per-factor) or ``shared_conjugator`` re-express the
    block coordinates: each maps vec(D_k) gradients to the constrained or
    half coordinates (rows = target parameters, cols = vec entries).  By
    default the half-representation duplication transpose is used.
    """
    vp = vp or _vstate(pf, theta)
    fs = pf.structure
    sigma2 = theta.sigma2
    q_sizes = theta.q_sizes()
    if criterion == "ReML":
        core = vp.ztpz()
        dof = pf.n - pf.p
    else:
        core = vp.ztviz
        dof = pf.n
    s_list, ks = _variance_pieces(core, fs)
    r = fs.n_factors

    if shared_conjugator is None and conjugators is None:
        conjugators = [duplication_matrix(q).T for q in q_sizes]

    # Assemble at vec-block level, then conjugate.
    sizes = [q * q for q in q_sizes]
    voff = np.concatenate([[1], 1 + np.cumsum(sizes)])
    vdim = 1 + int(sum(sizes))
    vmat = np.zeros((vdim, vdim))
    vmat[0, 0] = 0.5 * dof / sigma2**2
    for k in range(r):
        row = 0.5 / sigma2 * vec(s_list[k])
        vmat[0, voff[k] : voff[k + 1]] = row
        vmat[voff[k] : voff[k + 1], 0] = row
    for (k1, k2), block in ks.items():
        vmat[voff[k1] : voff[k1 + 1], voff[k2] : voff[k2 + 1]] = 0.5 * block
        if k1 != k2:
            vmat[voff[k2] : voff[k2 + 1], voff[k1] : voff[k1 + 1]] = 0.5 * block.T

    if shared_conjugator is not None:
        t_full = np.zeros((1 + shared_conjugator.shape[0], vdim))
        t_full[0, 0] = 1.0
        t_full[1:, 1:] = shared_conjugator
    else:
        widths = [t.shape[0] for t in conjugators]
        t_full = np.zeros((1 + int(sum(widths)), vdim))
        t_full[0, 0] = 1.0
        row = 1
        for k, t in enumerate(conjugators):
            t_full[row : row + t.shape[0], voff[k] : voff[k + 1]] = t
            row += t.shape[0]
    return t_full @ vmat @ t_full.T
