"""Dense linear-algebra kernels: vec/vech maps, the classical structure
matrices relating them, block Kronecker sums, and PSD projection.

Conventions (all vectors column-major):

* duplication ``D_k``:   vec(S) = D_k @ vech(S) for symmetric S
* elimination ``L_k``:   vech(A) = L_k @ vec(A) for any square A
* commutation ``K_mn``:  vec(A) = K_mn @ vec(A') for an (m, n) matrix A
* symmetrizer ``N_k`` = (I + K_kk) / 2

Commutation/symmetrizer products are applied as index permutations; the
dense matrices built here are small, used for information-matrix assembly
and as test oracles.  All functions are pure and cacheable.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .errors import NumericalError

__all__ = [
    "vec",
    "unvec",
    "vech",
    "unvech",
    "unvech_lower",
    "vech_indices",
    "duplication_matrix",
    "elimination_matrix",
    "commutation_indices",
    "commutation_matrix",
    "symmetrizer_matrix",
    "symmetrize_columns",
    "vec_m",
    "kron_block_sum",
    "project_psd",
    "pseudo_inverse",
]


def vec(a):
    """Stack the columns of a matrix into one vector."""
    a = np.asarray(a)
    return a.reshape(-1, order="F")


def unvec(v, rows, cols=None):
    """Inverse of :func:`vec` for a ``rows x cols`` matrix."""
    v = np.asarray(v)
    if cols is None:
        cols = v.size // rows
    return v.reshape((rows, cols), order="F")


@lru_cache(maxsize=None)
def vech_indices(k):
    """Row/column indices of the lower triangle in column-major order."""
    cols = np.concatenate([np.full(k - j, j) for j in range(k)])
    rows = np.concatenate([np.arange(j, k) for j in range(k)])
    rows.flags.writeable = False
    cols.flags.writeable = False
    return rows, cols


def vech(a):
    """Stack the on-and-below-diagonal elements column by column."""
    a = np.asarray(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"vech needs a square matrix, got shape {a.shape}")
    rows, cols = vech_indices(a.shape[0])
    return a[rows, cols]


def _dim_from_vech(length):
    k = int((np.sqrt(8 * length + 1) - 1) / 2 + 0.5)
    if k * (k + 1) // 2 != length:
        raise ValueError(f"length {length} is not a triangular number")
    return k


def unvech(v):
    """Rebuild the symmetric matrix whose half-vectorization is ``v``."""
    v = np.asarray(v)
    k = _dim_from_vech(v.size)
    rows, cols = vech_indices(k)
    out = np.zeros((k, k), dtype=v.dtype)
    out[rows, cols] = v
    out[cols, rows] = v
    return out


def unvech_lower(v):
    """Rebuild the lower-triangular matrix whose half-vectorization is ``v``."""
    v = np.asarray(v)
    k = _dim_from_vech(v.size)
    rows, cols = vech_indices(k)
    out = np.zeros((k, k), dtype=v.dtype)
    out[rows, cols] = v
    return out


@lru_cache(maxsize=None)
def duplication_matrix(k):
    """The (k^2, k(k+1)/2) matrix with vec(S) = D_k vech(S) for symmetric S."""
    rows, cols = vech_indices(k)
    out = np.zeros((k * k, k * (k + 1) // 2))
    for pos, (i, j) in enumerate(zip(rows, cols)):
        out[i + j * k, pos] = 1.0
        out[j + i * k, pos] = 1.0
    out.flags.writeable = False
    return out


@lru_cache(maxsize=None)
def elimination_matrix(k):
    """The (k(k+1)/2, k^2) 0-1 matrix with vech(A) = L_k vec(A)."""
    rows, cols = vech_indices(k)
    out = np.zeros((k * (k + 1) // 2, k * k))
    for pos, (i, j) in enumerate(zip(rows, cols)):
        out[pos, i + j * k] = 1.0
    out.flags.writeable = False
    return out


@lru_cache(maxsize=None)
def commutation_indices(m, n):
    """Gather indices ``g`` with (K_mn v)[r] = v[g[r]].

    Stored-permutation form of the commutation matrix: applying ``g`` to
    vec(A') yields vec(A) for any (m, n) matrix A.
    """
    r = np.arange(m * n)
    i, j = r % m, r // m
    g = j + i * n
    g.flags.writeable = False
    return g


def commutation_matrix(m, n):
    """Dense K_mn (test-oracle form of :func:`commutation_indices`)."""
    g = commutation_indices(m, n)
    out = np.zeros((m * n, m * n))
    out[np.arange(m * n), g] = 1.0
    return out


@lru_cache(maxsize=None)
def symmetrizer_matrix(k):
    """Dense N_k = (I + K_kk)/2; N_k vec(A) = vec(A + A')/2."""
    out = (np.eye(k * k) + commutation_matrix(k, k)) / 2.0
    out.flags.writeable = False
    return out


def symmetrize_columns(mat, k):
    """Right-multiply by N_k using the stored permutation: M @ N_k."""
    g = commutation_indices(k, k)
    # K_kk is symmetric and involutory, so column gathering uses g directly.
    return 0.5 * (mat + mat[:, g])


def vec_m(mat, m):
    """Restack the width-``m`` column blocks of ``mat`` vertically.

    Realizes sum_i A_i B_i' = vec_m(A')' vec_m(B') for identically
    partitioned horizontal block rows.
    """
    mat = np.asarray(mat)
    r, c = mat.shape
    if c % m != 0:
        raise ValueError(f"column count {c} not divisible by block width {m}")
    nblocks = c // m
    return mat.reshape(r, nblocks, m).transpose(1, 0, 2).reshape(nblocks * r, m)


def _tilde(mat, n1, n2):
    """Rows are vec(M_ij)' over the (n1, n2)-blocked partition, i outer."""
    c1, c2 = mat.shape[0] // n1, mat.shape[1] // n2
    return (
        mat.reshape(c1, n1, c2, n2).transpose(0, 2, 3, 1).reshape(c1 * c2, n1 * n2)
    )


@lru_cache(maxsize=None)
def _kron_mix_indices(n1, n2):
    """Gather indices for the permutation I_{n2} (x) K_{n1,n2} (x) I_{n1}."""
    g_mid = commutation_indices(n1, n2)
    ia = np.arange(n2)[:, None, None]
    ib = g_mid[None, :, None]
    ic = np.arange(n1)[None, None, :]
    g = (ia * (n1 * n2 * n1) + ib * n1 + ic).reshape(-1)
    g.flags.writeable = False
    return g


def kron_block_sum(g_mat, h_mat, block_shape):
    """Sum of blockwise Kronecker products sum_ij G_ij (x) H_ij.

    ``g_mat`` and ``h_mat`` must be identically partitioned into blocks of
    ``block_shape`` = (n1, n2).  Evaluated through the row-vectorized block
    transform and a stored index permutation, so no Kronecker product or
    permutation matrix is ever materialized.
    """
    g_mat = np.asarray(g_mat, dtype=float)
    h_mat = np.asarray(h_mat, dtype=float)
    n1, n2 = block_shape
    if g_mat.shape != h_mat.shape:
        raise ValueError(f"partition mismatch: {g_mat.shape} vs {h_mat.shape}")
    if g_mat.shape[0] % n1 or g_mat.shape[1] % n2:
        raise ValueError(
            f"shape {g_mat.shape} not partitionable into {block_shape} blocks"
        )
    gt = _tilde(g_mat, n1, n2)
    ht = _tilde(h_mat, n1, n2)
    v = vec(ht.T @ gt)[_kron_mix_indices(n1, n2)]
    return unvec(v, n1 * n1, n2 * n2)


def project_psd(s, sym_tol=1e-10):
    """Nearest-by-eigenvalue-clamp non-negative definite matrix.

    Inputs asymmetric beyond ``sym_tol`` (max absolute mismatch) are
    symmetrized as (S + S')/2 before the eigendecomposition.
    """
    s = np.asarray(s, dtype=float)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ValueError(f"need a square matrix, got shape {s.shape}")
    # Symmetrize regardless (eigh reads one triangle); sym_tol documents the
    # contract for callers feeding near-symmetric inputs.
    s = 0.5 * (s + s.T)
    try:
        w, u = np.linalg.eigh(s)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - numpy rarely fails
        raise NumericalError(f"eigendecomposition failed: {exc}") from exc
    return (u * np.maximum(w, 0.0)) @ u.T


def pseudo_inverse(a):
    """Moore-Penrose inverse (SVD-based)."""
    return np.linalg.pinv(np.asarray(a, dtype=float))
