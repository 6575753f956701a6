"""Crossed-factor mixed-model data structures and product-form algebra.

The estimation layer never touches the raw n-row designs: everything is
expressed through the six cross-products X'X, X'Y, X'Z, Y'Y, Y'Z, Z'Z and
the q x q solve (I_q + D U)^{-1}, so per-iteration cost is independent of
the number of observations.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateDataError, NumericalError, SpecificationError

__all__ = [
    "FactorStructure",
    "ModelData",
    "ProductForms",
    "ModelSpec",
    "RandomTerm",
    "build_design",
    "product_forms",
    "assemble_D",
    "VInverseProducts",
    "vinv_quad",
]


@dataclass(frozen=True)
class FactorStructure:
    """Random-effects layout: per-factor effect counts, level counts, and
    (optionally) the observation-to-level assignment used to build Z.

    Z columns are ordered factor-major, then level, then effect, so the
    columns for level j of factor k form one contiguous block.
    """

    q_counts: tuple[int, ...]
    level_counts: tuple[int, ...]
    levels: tuple[np.ndarray, ...] | None = None
    level_labels: tuple[tuple, ...] | None = None

    def __post_init__(self):
        if len(self.q_counts) != len(self.level_counts):
            raise SpecificationError("q_counts and level_counts length mismatch")
        if any(q < 1 for q in self.q_counts) or any(
            l < 1 for l in self.level_counts
        ):
            raise SpecificationError("factor dimensions must be positive")

    @property
    def n_factors(self) -> int:
        return len(self.q_counts)

    @property
    def q_total(self) -> int:
        return int(
            sum(q * l for q, l in zip(self.q_counts, self.level_counts))
        )

    def factor_offset(self, k: int) -> int:
        return int(
            sum(
                q * l
                for q, l in zip(self.q_counts[:k], self.level_counts[:k])
            )
        )

    def factor_slice(self, k: int) -> slice:
        off = self.factor_offset(k)
        return slice(off, off + self.q_counts[k] * self.level_counts[k])

    def level_slice(self, k: int, j: int) -> slice:
        if not 0 <= j < self.level_counts[k]:
            raise IndexError(f"level {j} out of range for factor {k}")
        off = self.factor_offset(k) + j * self.q_counts[k]
        return slice(off, off + self.q_counts[k])

    def split_levels(self, arr: np.ndarray, k: int) -> np.ndarray:
        """View the factor-k rows of a (q, ...) array as (l_k, q_k, ...)."""
        part = arr[self.factor_slice(k)]
        return part.reshape((self.level_counts[k], self.q_counts[k]) + part.shape[1:])

    def diag_block_sum(self, mat: np.ndarray, k: int) -> np.ndarray:
        """Sum of the level-diagonal (q_k, q_k) blocks of a (q, q) matrix."""
        l, q = self.level_counts[k], self.q_counts[k]
        sub = mat[self.factor_slice(k), self.factor_slice(k)]
        return np.einsum("jajb->ab", sub.reshape(l, q, l, q))


@dataclass(frozen=True)
class ModelData:
    """Response, fixed design, and factor-partitioned random design."""

    y: np.ndarray
    x: np.ndarray
    z: np.ndarray
    structure: FactorStructure

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    def validate(self) -> None:
        """Check ingestion invariants: shapes, X rank, Z block supports."""
        n = self.n
        if self.x.shape[0] != n or self.z.shape[0] != n:
            raise SpecificationError("X/Z row counts do not match Y")
        if self.z.shape[1] != self.structure.q_total:
            raise SpecificationError("Z column count does not match structure")
        _check_full_rank(self.x)
        fs = self.structure
        for k in range(fs.n_factors):
            support = self.z[:, fs.factor_slice(k)] != 0
            per_level = support.reshape(n, fs.level_counts[k], fs.q_counts[k]).any(
                axis=2
            )
            if np.any(per_level.sum(axis=1) > 1):
                raise SpecificationError(
                    f"factor {k}: overlapping level supports in Z"
                )


def _check_full_rank(x: np.ndarray) -> None:
    if x.shape[1] == 0:
        return
    s = np.linalg.svd(x, compute_uv=False)
    rank = int(np.sum(s > 1e-8 * s[0]))
    if rank < x.shape[1]:
        raise DegenerateDataError(
            f"fixed design is rank deficient (rank {rank} < {x.shape[1]} columns)"
        )


@dataclass
class ProductForms:
    """The six n-free cross products plus the shapes needed downstream."""

    xtx: np.ndarray
    xty: np.ndarray
    xtz: np.ndarray
    yty: float
    ytz: np.ndarray
    ztz: np.ndarray
    n: int
    structure: FactorStructure
    _ztz_sqrt: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def p(self) -> int:
        return self.xtx.shape[0]

    @property
    def q(self) -> int:
        return self.ztz.shape[0]

    def ztz_sqrt(self) -> np.ndarray:
        """Symmetric square root of Z'Z (cached; used to certify that
        I + Z D Z' stays positive definite without touching n x n space)."""
        if self._ztz_sqrt is None:
            w, u = np.linalg.eigh(self.ztz)
            self._ztz_sqrt = (u * np.sqrt(np.maximum(w, 0.0))) @ u.T
        return self._ztz_sqrt


def product_forms(data: ModelData) -> ProductForms:
    """Compute X'X, X'Y, X'Z, Y'Y, Y'Z, Z'Z; the raw designs can be dropped
    afterwards for estimation purposes."""
    x, y, z = data.x, data.y, data.z
    return ProductForms(
        xtx=x.T @ x,
        xty=x.T @ y,
        xtz=x.T @ z,
        yty=float(y @ y),
        ytz=y @ z,
        ztz=z.T @ z,
        n=data.n,
        structure=data.structure,
    )


def assemble_D(d_blocks, structure: FactorStructure) -> np.ndarray:
    """Dense q x q covariance: direct sum over factors of I_{l_k} (x) D_k."""
    q = structure.q_total
    out = np.zeros((q, q))
    for k, d_k in enumerate(d_blocks):
        d_k = np.asarray(d_k, dtype=float)
        if d_k.shape != (structure.q_counts[k],) * 2:
            raise SpecificationError(
                f"block {k} has shape {d_k.shape}, expected "
                f"({structure.q_counts[k]}, {structure.q_counts[k]})"
            )
        for j in range(structure.level_counts[k]):
            sl = structure.level_slice(k, j)
            out[sl, sl] = d_k
    return out


# ---------------------------------------------------------------------------
# V^{-1} cross products through the q x q Woodbury solve
# ---------------------------------------------------------------------------


class VInverseProducts:
    """All V^{-1}-weighted cross products for V = I_n + Z D Z'.

    Built on W = (I_q + D U)^{-1} D with U = Z'Z, which gives
    V^{-1} = I_n - Z W Z', hence for stored designs a, b:
        a' V^{-1} b = a'b - (Z'a)' W (Z'b).
    Only the q x q system (I_q + D U) is ever factorized; log|V| comes from
    the same matrix via Sylvester's identity log|V| = log|I_q + D U|.
    """

    def __init__(self, pf: ProductForms, d_blocks, check_pd: bool = True):
        self.pf = pf
        self.d = assemble_D(d_blocks, pf.structure)
        if check_pd and pf.q:
            # |I + DU| > 0 alone misses indefinite V with paired negative
            # eigenvalues; certify through the congruent symmetric form.
            s = pf.ztz_sqrt()
            sym = s @ (0.5 * (self.d + self.d.T)) @ s
            try:
                np.linalg.cholesky(np.eye(pf.q) + sym + 1e-14 * np.eye(pf.q))
            except np.linalg.LinAlgError:
                raise NumericalError(
                    "I + Z D Z' is not positive definite for these blocks"
                ) from None
        a = np.eye(pf.q) + self.d @ pf.ztz
        sign, logabs = np.linalg.slogdet(a)
        if not np.isfinite(logabs) or sign <= 0:
            raise NumericalError(
                "I + DU is singular or non-positive "
                f"(cond ~ {np.linalg.cond(a):.3e})"
            )
        try:
            self.w = np.linalg.solve(a, self.d)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(
                f"I + DU solve failed (cond ~ {np.linalg.cond(a):.3e})"
            ) from exc
        self.logdet_v = float(logabs)
        self._cache: dict[str, np.ndarray] = {}

    def _get(self, key, builder):
        if key not in self._cache:
            self._cache[key] = builder()
        return self._cache[key]

    @property
    def ztviz(self) -> np.ndarray:
        u = self.pf.ztz
        return self._get("ztviz", lambda: u - u @ self.w @ u)

    @property
    def ztvix(self) -> np.ndarray:
        zx = self.pf.xtz.T
        return self._get("ztvix", lambda: zx - self.pf.ztz @ self.w @ zx)

    @property
    def ztviy(self) -> np.ndarray:
        zy = self.pf.ytz
        return self._get("ztviy", lambda: zy - self.pf.ztz @ self.w @ zy)

    @property
    def xtvix(self) -> np.ndarray:
        r = self.pf.xtz
        return self._get("xtvix", lambda: self.pf.xtx - r @ self.w @ r.T)

    @property
    def xtviy(self) -> np.ndarray:
        return self._get(
            "xtviy", lambda: self.pf.xty - self.pf.xtz @ self.w @ self.pf.ytz
        )

    @property
    def ytviy(self) -> float:
        t = self.pf.ytz
        return float(self.pf.yty - t @ self.w @ t)

    def xtvix_chol(self) -> np.ndarray:
        """Lower Cholesky factor of X'V^{-1}X (cached)."""

        def build():
            try:
                return np.linalg.cholesky(self.xtvix)
            except np.linalg.LinAlgError as exc:
                raise NumericalError("X'V^{-1}X is not positive definite") from exc

        return self._get("xtvix_chol", build)

    def xtvix_solve(self, rhs: np.ndarray) -> np.ndarray:
        """Solve (X'V^{-1}X) u = rhs via the cached Cholesky factor."""
        c = self.xtvix_chol()
        u = np.linalg.solve(c, rhs)
        return np.linalg.solve(c.T, u)

    def gls_beta(self) -> np.ndarray:
        return self.xtvix_solve(self.xtviy)

    def ztvie(self, beta: np.ndarray) -> np.ndarray:
        """Z'V^{-1}(Y - X beta)."""
        return self.ztviy - self.ztvix @ beta

    def etvie(self, beta: np.ndarray) -> float:
        """(Y - X beta)'V^{-1}(Y - X beta)."""
        val = (
            self.ytviy
            - 2.0 * float(beta @ self.xtviy)
            + float(beta @ self.xtvix @ beta)
        )
        return val

    def ztpz(self) -> np.ndarray:
        """Z'PZ with P = V^{-1} - V^{-1}X(X'V^{-1}X)^{-1}X'V^{-1}."""

        def build():
            a = self.ztvix
            half = np.linalg.solve(self.xtvix_chol(), a.T)
            return self.ztviz - half.T @ half

        return self._get("ztpz", build)


def vinv_quad(pf, d_blocks, kind, *, beta=None, lhs=None, rhs=None):
    """Functional access to the V^{-1} cross products.

    ``kind`` names the quantity (``ztviz``, ``ztvix``, ``xtvix``, ``xtviy``,
    ``ytviy``, ``ztvie``); ``lhs``/``rhs`` optionally select (factor, level)
    column blocks of the Z-sided dimensions.
    """
    vp = VInverseProducts(pf, d_blocks)
    if kind == "ztvie":
        if beta is None:
            raise SpecificationError("ztvie requires beta")
        out = vp.ztvie(np.asarray(beta, dtype=float))
    elif kind in ("ztviz", "ztvix", "xtvix", "xtviy", "ytviy"):
        out = getattr(vp, kind)
    else:
        raise SpecificationError(f"unknown quantity {kind!r}")
    fs = pf.structure
    if lhs is not None:
        out = out[fs.level_slice(*lhs)]
    if rhs is not None:
        out = out[:, fs.level_slice(*rhs)]
    return out


# ---------------------------------------------------------------------------
# Design construction from tabular data
# ---------------------------------------------------------------------------


@dataclass
class RandomTerm:
    """One random-effects term: a grouping factor and its covariates."""

    factor: str
    covariates: list[str] = field(default_factory=list)
    intercept: bool = True
    structure: str = "unstructured"

    @property
    def q(self) -> int:
        return len(self.covariates) + (1 if self.intercept else 0)


@dataclass
class ModelSpec:
    """Column-level description of a mixed model over a table."""

    response: str
    fixed: list[str] = field(default_factory=list)
    intercept: bool = True
    random: list[RandomTerm] = field(default_factory=list)
    criterion: str = "ML"
    method: str = "FS"
    tol: float = 1e-6
    max_iter: int = 200
    contrasts: dict[str, list[float]] = field(default_factory=dict)

    def fixed_names(self) -> list[str]:
        return (["(intercept)"] if self.intercept else []) + list(self.fixed)


def _numeric_column(table, name):
    try:
        col = table[name]
    except KeyError:
        raise SpecificationError(f"unknown column {name!r}") from None
    try:
        return np.asarray([float(v) for v in col])
    except (TypeError, ValueError) as exc:
        raise SpecificationError(f"column {name!r} is not numeric: {exc}") from None


def build_design(table, spec: ModelSpec) -> ModelData:
    """Assemble Y, X, Z from a column table (dict of equal-length lists).

    Factor levels are indexed densely by first appearance.  For each random
    term, observation i contributes its covariate values to the columns of
    block (k, level_of(i)); all other columns of that factor block are
    structurally zero on row i.
    """
    y = _numeric_column(table, spec.response)
    n = y.shape[0]

    x_cols = []
    if spec.intercept:
        x_cols.append(np.ones(n))
    for name in spec.fixed:
        x_cols.append(_numeric_column(table, name))
    x = np.column_stack(x_cols) if x_cols else np.empty((n, 0))
    _check_full_rank(x)

    q_counts, level_counts, level_arrays, label_sets = [], [], [], []
    z_blocks = []
    for term in spec.random:
        if term.q < 1:
            raise SpecificationError(
                f"random term for {term.factor!r} has no effects"
            )
        try:
            raw = table[term.factor]
        except KeyError:
            raise SpecificationError(
                f"unknown factor column {term.factor!r}"
            ) from None
        labels: list = []
        index: dict = {}
        lev = np.empty(n, dtype=np.int64)
        for i, val in enumerate(raw):
            if val not in index:
                index[val] = len(labels)
                labels.append(val)
            lev[i] = index[val]
        l_k = len(labels)
        if l_k == 1:
            warnings.warn(
                f"factor {term.factor!r} has a single level; its variance "
                "is confounded with the residual",
                UserWarning,
                stacklevel=2,
            )
        cov = [np.ones(n)] if term.intercept else []
        cov += [_numeric_column(table, c) for c in term.covariates]
        values = np.column_stack(cov)  # (n, q_k)
        q_k = values.shape[1]
        block = np.zeros((n, l_k * q_k))
        cols = lev[:, None] * q_k + np.arange(q_k)[None, :]
        np.put_along_axis(block, cols, values, axis=1)
        z_blocks.append(block)
        q_counts.append(q_k)
        level_counts.append(l_k)
        level_arrays.append(lev)
        label_sets.append(tuple(labels))

    z = np.hstack(z_blocks) if z_blocks else np.empty((n, 0))
    fs = FactorStructure(
        q_counts=tuple(q_counts),
        level_counts=tuple(level_counts),
        levels=tuple(level_arrays) if level_arrays else None,
        level_labels=tuple(label_sets) if label_sets else None,
    )
    data = ModelData(y=y, x=x, z=z, structure=fs)
    data.validate()
    return data
