"""Constrained covariance structures and the twin-study ACE model.

A structured covariance block is a differentiable map from a short
parameter vector to vec(D_k); its Jacobian (the "constraint matrix",
rows = parameters, columns = vec entries) conjugates full-representation
scores and information matrices into the constrained coordinates:

    score_con   = C_k @ (dl/dvec(D_k))
    info_con    = C_k1 @ I_full @ C_k2'

The shared-parameter variant stacks one C across all factors; the ACE
model is the canonical example, with vec(D_k) = ta^2 vec(Ka_k) +
tc^2 vec(Kc_k) built from per-family-type kinship and shared-environment
matrices.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConvergenceWarning,
    NumericalError,
    PedigreeError,
    SpecificationError,
)
from .kernels import duplication_matrix, unvec, vec, vech
from .likelihood import ParamState, gradient_matrices, variance_information
from .model import FactorStructure, ProductForms, VInverseProducts
from .estimators import (
    FitConfig,
    FitResult,
    _finalize,
    _solve_direction,
    gls_updates,
    initial_values,
    run_scoring_loop,
)

__all__ = [
    "STRUCTURE_KINDS",
    "CovStructure",
    "ConstrainedState",
    "constraint_matrix",
    "constrained_score_fim",
    "fit_constrained",
    "Family",
    "kinship_matrices",
    "canonical_member_order",
    "AceStructure",
    "AceLayout",
    "build_ace_layout",
    "ace_constraint",
    "ace_fit",
    "ace_fit_generic",
]

STRUCTURE_KINDS = (
    "unstructured",
    "diagonal",
    "variance_components",
    "toeplitz",
    "compound_symmetry",
    "ar1",
)


@dataclass(frozen=True)
class CovStructure:
    """A named covariance constraint for one q_k x q_k block.

    Parameter counts: unstructured q(q+1)/2, diagonal 1 (scaled identity),
    variance_components q, toeplitz q (one per band |i-j|, the natural
    any-q extension of the band pattern), compound_symmetry 1 (unit
    diagonal), ar1 1 (unit diagonal, geometric off-diagonal decay).
    """

    kind: str
    dim: int

    def __post_init__(self):
        if self.kind not in STRUCTURE_KINDS:
            raise SpecificationError(f"unknown covariance structure {self.kind!r}")
        if self.dim < 1:
            raise SpecificationError("block dimension must be positive")
        if self.kind in ("compound_symmetry", "ar1") and self.dim < 2:
            raise SpecificationError(
                f"{self.kind} needs dimension >= 2, got {self.dim}"
            )

    @property
    def n_params(self) -> int:
        q = self.dim
        return {
            "unstructured": q * (q + 1) // 2,
            "diagonal": 1,
            "variance_components": q,
            "toeplitz": q,
            "compound_symmetry": 1,
            "ar1": 1,
        }[self.kind]

    def decode(self, params) -> np.ndarray:
        params = np.asarray(params, dtype=float)
        if params.shape != (self.n_params,):
            raise SpecificationError(
                f"{self.kind} expects {self.n_params} parameters"
            )
        q = self.dim
        idx = np.arange(q)
        band = np.abs(idx[:, None] - idx[None, :])
        if self.kind == "unstructured":
            from .kernels import unvech

            return unvech(params)
        if self.kind == "diagonal":
            return params[0] * np.eye(q)
        if self.kind == "variance_components":
            return np.diag(params)
        if self.kind == "toeplitz":
            return params[band]
        if self.kind == "compound_symmetry":
            out = np.full((q, q), params[0])
            np.fill_diagonal(out, 1.0)
            return out
        # ar1
        out = params[0] ** band.astype(float)
        np.fill_diagonal(out, 1.0)
        return out

    def encode_from(self, d: np.ndarray) -> np.ndarray:
        """Project a generic block onto this structure for starting values."""
        d = np.asarray(d, dtype=float)
        q = self.dim
        idx = np.arange(q)
        band = np.abs(idx[:, None] - idx[None, :])
        lo, hi = self.param_bounds()
        if self.kind == "unstructured":
            return vech(d)
        if self.kind == "diagonal":
            raw = np.array([np.trace(d) / q])
        elif self.kind == "variance_components":
            raw = np.diag(d).copy()
        elif self.kind == "toeplitz":
            raw = np.array([d[band == b].mean() for b in range(q)])
        else:  # correlation-style single parameter
            raw = np.array([d[band == 1].mean()])
        return np.clip(raw, lo, hi)

    def constraint_matrix(self, params) -> np.ndarray:
        """Jacobian of the decode map, rows indexed by the parameters."""
        params = np.asarray(params, dtype=float)
        q = self.dim
        idx = np.arange(q)
        band = np.abs(idx[:, None] - idx[None, :])
        if self.kind == "unstructured":
            return duplication_matrix(q).T
        if self.kind == "diagonal":
            return vec(np.eye(q))[None, :]
        if self.kind == "variance_components":
            rows = [vec(np.diag((idx == i).astype(float))) for i in range(q)]
            return np.vstack(rows)
        if self.kind == "toeplitz":
            rows = [vec((band == b).astype(float)) for b in range(q)]
            return np.vstack(rows)
        if self.kind == "compound_symmetry":
            pattern = (band >= 1).astype(float)
            return vec(pattern)[None, :]
        # ar1: d/drho of rho^|i-j| off the diagonal
        rho = params[0]
        with np.errstate(divide="ignore", invalid="ignore"):
            deriv = band * np.where(band >= 1, rho ** (band - 1.0), 0.0)
        np.fill_diagonal(deriv, 0.0)
        return vec(deriv)[None, :]

    def param_bounds(self):
        """Box keeping decode(params) inside (or on) the PSD cone."""
        eps = 1e-6
        q = self.dim
        if self.kind in ("diagonal", "variance_components"):
            return 0.0, np.inf
        if self.kind == "compound_symmetry":
            return -1.0 / (q - 1) + eps, 1.0 - eps
        if self.kind == "ar1":
            return -1.0 + eps, 1.0 - eps
        return -np.inf, np.inf


def constraint_matrix(structure: CovStructure, params) -> np.ndarray:
    return structure.constraint_matrix(params)


# ---------------------------------------------------------------------------
# Constrained state, score and information
# ---------------------------------------------------------------------------


@dataclass
class ConstrainedState:
    """Parameters [beta, sigma2, vecu-blocks or shared rho]."""

    beta: np.ndarray
    sigma2: float
    params: list[np.ndarray]
    structures: list[CovStructure] | None = None
    shared: "AceStructure | None" = None

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=float)
        self.params = [np.asarray(p, dtype=float).ravel() for p in self.params]
        if (self.structures is None) == (self.shared is None):
            raise SpecificationError(
                "exactly one of structures/shared must be given"
            )

    def d_matrices(self) -> list[np.ndarray]:
        if self.shared is not None:
            return self.shared.decode(self.params[0])
        return [s.decode(p) for s, p in zip(self.structures, self.params)]

    def to_half(self) -> ParamState:
        return ParamState(
            rep="half",
            beta=self.beta,
            sigma2=self.sigma2,
            blocks=[vech(d) for d in self.d_matrices()],
        )


def constrained_score_fim(
    state: ConstrainedState, pf: ProductForms, criterion: str = "ML", vp=None
):
    """Score and expected information over [beta, sigma2, constrained params].

    The full-representation gradient and information blocks are conjugated
    by the constraint Jacobians; the symmetrizer factor of the full
    information is absorbed because every constraint row is the vec of a
    symmetric pattern.
    """
    vp = vp or VInverseProducts(pf, state.d_matrices())
    fs = pf.structure
    sigma2 = state.sigma2
    n, p = pf.n, pf.p
    d_beta = (vp.xtviy - vp.xtvix @ state.beta) / sigma2
    d_sigma2 = -0.5 * n / sigma2 + 0.5 * vp.etvie(state.beta) / sigma2**2
    if criterion == "ReML":
        d_sigma2 += 0.5 * p / sigma2
    mats = gradient_matrices(vp, state.beta, sigma2, criterion)

    if state.shared is not None:
        c = state.shared.constraint(state.params[0])
        grad_stack = np.concatenate([0.5 * vec(m) for m in mats])
        block_grads = [c @ grad_stack]
        conj = dict(shared_conjugator=c)
        widths = [c.shape[0]]
    else:
        cs = [
            s.constraint_matrix(pk)
            for s, pk in zip(state.structures, state.params)
        ]
        block_grads = [c @ (0.5 * vec(m)) for c, m in zip(cs, mats)]
        conj = dict(conjugators=cs)
        widths = [c.shape[0] for c in cs]

    theta_half = state.to_half()
    var_info = variance_information(theta_half, pf, "ML", vp=vp, **conj)
    total = p + 1 + int(sum(widths))
    info = np.zeros((total, total))
    info[:p, :p] = vp.xtvix / sigma2
    info[p:, p:] = var_info
    score_vec = np.concatenate([d_beta, [d_sigma2]] + block_grads)
    return score_vec, info


# ---------------------------------------------------------------------------
# Constrained fitting (GLS + per-block scoring updates)
# ---------------------------------------------------------------------------


def _normalize_structures(structure, fs: FactorStructure):
    if isinstance(structure, AceStructure):
        return None, structure
    if isinstance(structure, CovStructure):
        structure = [structure]
    structures = []
    for k, s in enumerate(structure):
        if s is None:
            s = CovStructure("unstructured", fs.q_counts[k])
        if s.dim != fs.q_counts[k]:
            raise SpecificationError(
                f"structure {k} has dim {s.dim}, factor has q={fs.q_counts[k]}"
            )
        structures.append(s)
    if len(structures) != fs.n_factors:
        raise SpecificationError("one structure per factor required")
    return structures, None


def fit_constrained(pf: ProductForms, cfg: FitConfig, structure) -> FitResult:
    """Constrained estimation: GLS for (beta, sigma2), scoring steps on the
    structure parameters, proposals box-clipped to each structure's PSD
    interval."""
    structures, shared = _normalize_structures(structure, pf.structure)
    if shared is not None:
        return ace_fit_generic(pf, shared, cfg)
    theta0 = initial_values(pf)
    d0 = theta0.d_matrices()
    params0 = [s.encode_from(d) for s, d in zip(structures, d0)]
    state0 = ConstrainedState(
        beta=theta0.beta,
        sigma2=theta0.sigma2,
        params=params0,
        structures=structures,
    )

    def value(state):
        try:
            from .likelihood import criterion_value

            return criterion_value(pf, state.to_half(), cfg.criterion)
        except (NumericalError, SpecificationError, np.linalg.LinAlgError):
            return -np.inf

    def make_step(state):
        vp = VInverseProducts(pf, state.d_matrices())
        beta, sigma2 = gls_updates(pf, state, cfg.criterion, vp=vp)
        mid = ConstrainedState(
            beta=beta,
            sigma2=sigma2,
            params=[p.copy() for p in state.params],
            structures=structures,
        )
        sv, info = constrained_score_fim(mid, pf, cfg.criterion, vp=vp)
        p = pf.p
        directions = []
        off = p + 1
        for k, s in enumerate(structures):
            w = s.n_params
            blk = info[off : off + w, off : off + w]
            g = sv[off : off + w]
            directions.append(
                _solve_direction(blk, g, f"constrained block {k}")
            )
            off += w

        def step(alpha):
            new_params = []
            for s, pk, d in zip(structures, mid.params, directions):
                lo, hi = s.param_bounds()
                new_params.append(np.clip(pk + alpha * d, lo, hi))
            return ConstrainedState(
                beta=beta, sigma2=sigma2, params=new_params, structures=structures
            )

        return step

    state, loglik, iters, converged, trace = run_scoring_loop(
        state0, make_step, value, cfg.tol, cfg.max_iter
    )
    if not converged:
        warnings.warn(
            f"constrained fit did not converge in {iters} iterations",
            ConvergenceWarning,
            stacklevel=2,
        )
    extra = {
        "structures": [s.kind for s in structures],
        "structure_params": [p.tolist() for p in state.params],
    }
    return _finalize(pf, state.to_half(), loglik, cfg, iters, converged, trace, extra)


# ---------------------------------------------------------------------------
# Kinship machinery for the ACE model
# ---------------------------------------------------------------------------

GENETIC_SHARE = {
    "MZ": 1.0,
    "DZ": 0.5,
    "full": 0.5,
    "half": 0.25,
    "unrelated": 0.0,
}
# Canonical member ordering: twins first, then full, half, unrelated.
_REL_RANK = {"MZ": 0, "DZ": 1, "full": 2, "half": 3, "unrelated": 4}


@dataclass
class Family:
    """One family unit: members plus pairwise relationship/rearing labels.

    ``relationships`` maps unordered member pairs to labels in
    {MZ, DZ, full, half, unrelated}; missing pairs default to unrelated.
    ``reared_together`` likewise defaults to True (families share a common
    environment unless stated otherwise).
    """

    fid: object
    members: list
    relationships: dict = field(default_factory=dict)
    reared_apart: set = field(default_factory=set)

    def label(self, a, b) -> str:
        if (a, b) in self.relationships and (b, a) in self.relationships:
            if self.relationships[(a, b)] != self.relationships[(b, a)]:
                raise PedigreeError(
                    f"family {self.fid}: asymmetric declaration for {a!r},{b!r}"
                )
        return self.relationships.get(
            (a, b), self.relationships.get((b, a), "unrelated")
        )

    def reared_together(self, a, b) -> bool:
        return not (
            (a, b) in self.reared_apart or (b, a) in self.reared_apart
        )


def _validate_family(family: Family) -> None:
    members = family.members
    for a, b in family.relationships:
        if a not in members or b not in members:
            raise PedigreeError(
                f"family {family.fid}: relationship references unknown member"
            )
        if a == b:
            raise PedigreeError(
                f"family {family.fid}: self-relationship for {a!r}"
            )
        family.label(a, b)  # raises on asymmetric declarations
    # MZ labels must be transitively consistent.
    for a in members:
        twins = [b for b in members if b != a and family.label(a, b) == "MZ"]
        for b in twins:
            for c in twins:
                if b != c and family.label(b, c) != "MZ":
                    raise PedigreeError(
                        f"family {family.fid}: MZ label not transitive "
                        f"({a!r}, {b!r}, {c!r})"
                    )


def canonical_member_order(family: Family) -> list:
    """Twins first, then full siblings, half siblings, unrelated members;
    stable within each category so equal structures share kinship matrices."""
    def rank(m):
        labels = [
            family.label(m, other) for other in family.members if other != m
        ]
        return min((_REL_RANK[l] for l in labels), default=_REL_RANK["unrelated"])

    return sorted(family.members, key=lambda m: (rank(m), family.members.index(m)))


def kinship_matrices(family: Family) -> tuple[np.ndarray, np.ndarray]:
    """Additive-genetic and common-environment matrices for one family.

    Genetic shares: 1 on the diagonal and for MZ twins, 1/2 for DZ twins
    and full siblings, 1/4 for half siblings, 0 otherwise.  The
    environment matrix is 1 where two members were reared together.
    Members follow the canonical ordering.
    """
    _validate_family(family)
    order = canonical_member_order(family)
    q = len(order)
    ka = np.eye(q)
    kc = np.eye(q)
    for i in range(q):
        for j in range(i + 1, q):
            lab = family.label(order[i], order[j])
            if lab not in GENETIC_SHARE:
                raise PedigreeError(
                    f"family {family.fid}: unknown relationship {lab!r}"
                )
            ka[i, j] = ka[j, i] = GENETIC_SHARE[lab]
            together = family.reared_together(order[i], order[j])
            kc[i, j] = kc[j, i] = 1.0 if together else 0.0
    return ka, kc


# ---------------------------------------------------------------------------
# ACE model: shared-parameter structure and the efficient fitting path
# ---------------------------------------------------------------------------


@dataclass
class AceStructure:
    """Shared two-parameter map tau = (ta, tc) -> blocks ta^2 Ka_k + tc^2 Kc_k."""

    kinships: list[tuple[np.ndarray, np.ndarray]]

    def decode(self, tau) -> list[np.ndarray]:
        ta, tc = float(tau[0]), float(tau[1])
        return [ta**2 * ka + tc**2 * kc for ka, kc in self.kinships]

    def constraint(self, tau) -> np.ndarray:
        return ace_constraint(tau, self.kinships)

    @property
    def q_counts(self) -> tuple[int, ...]:
        return tuple(ka.shape[0] for ka, _ in self.kinships)


def ace_constraint(tau, kinships) -> np.ndarray:
    """Jacobian of the stacked map [vec(D_1); ...; vec(D_r)] in tau.

    Equals (1_(1,r) (x) diag(2 ta, 2 tc)) applied to the direct sum of the
    per-type rows [vec(Ka_k)'; vec(Kc_k)'].
    """
    ta, tc = float(tau[0]), float(tau[1])
    cols = []
    for ka, kc in kinships:
        cols.append(np.vstack([2.0 * ta * vec(ka), 2.0 * tc * vec(kc)]))
    return np.hstack(cols)


@dataclass
class AceLayout:
    """Observation grouping for the ACE design (Z is the identity after
    reordering rows family-type-major)."""

    structure: FactorStructure
    kinships: list[tuple[np.ndarray, np.ndarray]]
    row_order: np.ndarray  # original-row index for each canonical position
    type_keys: list

    @property
    def n(self) -> int:
        return self.row_order.shape[0]


def build_ace_layout(families: list[Family], obs_family: list, obs_member: list) -> AceLayout:
    """Group observations into family-structure types.

    Families with byte-identical canonical kinship pairs form one factor;
    each family is a level; members are the block coordinates.  Returns
    the canonical row permutation making Z the identity.
    """
    by_fid = {f.fid: f for f in families}
    row_of = {}
    for idx, (fid, member) in enumerate(zip(obs_family, obs_member)):
        key = (fid, member)
        if key in row_of:
            raise PedigreeError(f"duplicate observation for {key!r}")
        row_of[key] = idx
    types: dict[bytes, dict] = {}
    for f in families:
        ka, kc = kinship_matrices(f)
        order = canonical_member_order(f)
        for m in order:
            if (f.fid, m) not in row_of:
                raise PedigreeError(
                    f"family {f.fid}: member {m!r} has no observation"
                )
        key = (ka.tobytes(), kc.tobytes())
        entry = types.setdefault(key, {"ka": ka, "kc": kc, "rows": []})
        entry["rows"].append([row_of[(f.fid, m)] for m in order])
    seen = set(by_fid)
    for fid in obs_family:
        if fid not in seen:
            raise PedigreeError(f"observation references unknown family {fid!r}")
    ordered = sorted(types.items(), key=lambda kv: (-len(kv[1]["ka"]), kv[0]))
    kinships, q_counts, level_counts, row_chunks, keys = [], [], [], [], []
    for key, entry in ordered:
        kinships.append((entry["ka"], entry["kc"]))
        q_counts.append(entry["ka"].shape[0])
        level_counts.append(len(entry["rows"]))
        row_chunks.extend(entry["rows"])
        keys.append(key)
    row_order = np.array([r for chunk in row_chunks for r in chunk], dtype=np.int64)
    fs = FactorStructure(
        q_counts=tuple(q_counts), level_counts=tuple(level_counts)
    )
    return AceLayout(
        structure=fs, kinships=kinships, row_order=row_order, type_keys=keys
    )


class _AceWorkspace:
    """Type-level cross products for the identity-Z design.

    With V = I + D block-diagonal by family, everything reduces to the
    per-type solves inv(I + D_k) plus fixed Kronecker-sum matrices
    sum_j X_(k,j)' (x) X_(k,j)' precomputed once.
    """

    def __init__(self, x: np.ndarray, y: np.ndarray, layout: AceLayout):
        fs = layout.structure
        self.layout = layout
        self.n, self.p = x.shape
        self.x_groups = []  # (l_k, q_k, p)
        self.y_groups = []  # (l_k, q_k)
        self.xx_kron = []  # (p^2, q_k^2)
        self.xy_kron = []  # (p, q_k^2)
        self.yy_kron = []  # (q_k^2,)
        off = 0
        for k in range(fs.n_factors):
            l, q = fs.level_counts[k], fs.q_counts[k]
            xg = x[off : off + l * q].reshape(l, q, self.p)
            yg = y[off : off + l * q].reshape(l, q)
            self.x_groups.append(xg)
            self.y_groups.append(yg)
            # Pairings assume a symmetric middle factor (inv(I + D_k)).
            self.xx_kron.append(
                np.einsum("jap,jbr->prab", xg, xg).reshape(self.p**2, q * q)
            )
            self.xy_kron.append(
                np.einsum("ja,jbp->pab", yg, xg).reshape(self.p, q * q)
            )
            self.yy_kron.append(np.einsum("ja,jb->ab", yg, yg).reshape(q * q))
            off += l * q

    def solve_state(self, d_blocks):
        """Per-type inv(I + D_k) plus the assembled GLS pieces."""
        fs = self.layout.structure
        vi_blocks, logdet = [], 0.0
        p = self.p
        xtvix = np.zeros((p, p))
        xtviy = np.zeros(p)
        ytviy = 0.0
        for k, d_k in enumerate(d_blocks):
            q = fs.q_counts[k]
            dbar = np.eye(q) + d_k
            try:
                cf = np.linalg.cholesky(dbar)
            except np.linalg.LinAlgError as exc:
                raise NumericalError("I + D_k not positive definite") from exc
            vi = np.linalg.inv(dbar)
            vi_blocks.append(vi)
            logdet += 2.0 * fs.level_counts[k] * float(
                np.log(np.diag(cf)).sum()
            )
            vvec = vec(vi)
            xtvix += unvec(self.xx_kron[k] @ vvec, p, p)
            xtviy += self.xy_kron[k] @ vvec
            ytviy += float(self.yy_kron[k] @ vvec)
        return vi_blocks, logdet, xtvix, xtviy, ytviy


def _ace_restricted_loglik(ws, state, cache):
    vi_blocks, logdet, xtvix, xtviy, ytviy = cache
    beta, sigma2 = state["beta"], state["sigma2"]
    n, p = ws.n, ws.p
    if sigma2 <= 0:
        return -np.inf
    quad = ytviy - 2.0 * float(beta @ xtviy) + float(beta @ xtvix @ beta)
    sign, ld_x = np.linalg.slogdet(xtvix)
    if sign <= 0:
        return -np.inf
    return -0.5 * (
        n * np.log(sigma2) + quad / sigma2 + logdet
    ) - 0.5 * (-p * np.log(sigma2) + ld_x)


def _ace_start_points():
    # Near-zero coordinates start at 1e-4, not 0, so the Hadamard-masked
    # information stays invertible.
    eps = 1e-4
    return [
        np.array([eps, 0.7]),
        np.array([0.7, eps]),
        np.array([0.7, 0.7]),
    ]


def _pick_restart(results):
    """Best converged restart by criterion then start index; if none
    converged, the best-effort restart is returned flagged."""
    converged = [r for r in results if r is not None and r[3]]
    pool = converged or [r for r in results if r is not None]
    if not pool:
        raise NumericalError("ACE estimation failed in all restarts")
    best = max(pool, key=lambda r: r[1])
    if not converged:
        warnings.warn(
            "no ACE restart converged; reporting the best attempt",
            ConvergenceWarning,
            stacklevel=3,
        )
    return best


def ace_fit(x, y, layout: AceLayout, cfg: FitConfig | None = None) -> FitResult:
    """Restricted-likelihood scoring for tau = (ta, tc) with GLS updates.

    Uses the identity-Z layout: per-type solves of I + D_k and the
    precomputed type-level Kronecker sums replace every n x n (and q x q)
    operation.  Runs the three-restart schedule (ta near zero, tc near
    zero, both free) and returns the best restricted criterion value; if
    no restart converges the best attempt is returned with
    ``converged=False``.

    ``x`` and ``y`` are in original row order; the layout's canonical
    permutation is applied internally.
    """
    cfg = cfg or FitConfig(criterion="ReML")
    x = np.asarray(x, dtype=float)[layout.row_order]
    y = np.asarray(y, dtype=float)[layout.row_order]
    shared = AceStructure(layout.kinships)
    ws = _AceWorkspace(x, y, layout)
    fs = layout.structure
    n, p = ws.n, ws.p
    kin_rows = [
        np.vstack([vec(ka), vec(kc)]) for ka, kc in shared.kinships
    ]  # (2, q_k^2) per type

    beta_ols = np.linalg.lstsq(x, y, rcond=None)[0]
    e0 = y - x @ beta_ols
    sigma2_ols = float(e0 @ e0) / n

    results = []
    restarts = []
    for tau0 in _ace_start_points():
        state0 = {
            "tau": tau0,
            "beta": beta_ols.copy(),
            "sigma2": sigma2_ols / (1 + tau0 @ tau0),
        }

        def value(state):
            try:
                cache = ws.solve_state(shared.decode(state["tau"]))
            except NumericalError:
                return -np.inf
            return _ace_restricted_loglik(ws, state, cache)

        def make_step(state):
            d_blocks = shared.decode(state["tau"])
            cache = ws.solve_state(d_blocks)
            vi_blocks, logdet, xtvix, xtviy, ytviy = cache
            beta = np.linalg.solve(xtvix, xtviy)
            quad = (
                ytviy - 2.0 * float(beta @ xtviy) + float(beta @ xtvix @ beta)
            )
            sigma2 = quad / (n - p)
            e = y - x @ beta
            g_inv = np.linalg.inv(xtvix)
            tau = state["tau"]
            g_tau = np.zeros(2)
            i_tau = np.zeros((2, 2))
            off = 0
            for k, d_k in enumerate(d_blocks):
                l, q = fs.level_counts[k], fs.q_counts[k]
                vi = vi_blocks[k]
                ek = e[off : off + l * q].reshape(l, q).T  # (q_k, l_k)
                xgx = unvec(ws.xx_kron[k].T @ vec(g_inv), q, q)
                core = ek @ ek.T / sigma2 - l * (np.eye(q) + d_k) + xgx
                grad_mat = 0.5 * vi @ core @ vi
                g_tau += 2.0 * tau * (kin_rows[k] @ vec(grad_mat))
                # K_k F_k K_k' entries via <Ka, Vi Kb Vi> traces (the
                # Kronecker square never materializes).
                f_entries = np.empty((2, 2))
                mats = [shared.kinships[k][0], shared.kinships[k][1]]
                for a in range(2):
                    for b in range(2):
                        f_entries[a, b] = 0.5 * l * float(
                            np.sum(mats[a] * (vi @ mats[b] @ vi))
                        )
                i_tau += 4.0 * np.outer(tau, tau) * f_entries
                off += l * q

            direction = _solve_direction(i_tau, g_tau, "ACE tau information")

            def step(alpha):
                return {
                    "tau": np.abs(tau + alpha * direction),
                    "beta": beta,
                    "sigma2": sigma2,
                }

            return step

        try:
            state, loglik, iters, converged, trace = run_scoring_loop(
                state0, make_step, value, cfg.tol, cfg.max_iter
            )
        except NumericalError:
            restarts.append(
                {"start": tau0.tolist(), "converged": False, "loglik": None}
            )
            results.append(None)
            continue
        restarts.append(
            {
                "start": tau0.tolist(),
                "converged": converged,
                "loglik": float(loglik),
                "iterations": iters,
            }
        )
        results.append((state, loglik, iters, converged, trace))
    state, loglik, iters, converged, trace = _pick_restart(results)
    tau = state["tau"]
    d_blocks = shared.decode(tau)
    cache = ws.solve_state(d_blocks)
    # Exact profile step at the final tau (mirrors the generic finalizer).
    _, _, xtvix_f, xtviy_f, ytviy_f = cache
    beta_f = np.linalg.solve(xtvix_f, xtviy_f)
    quad_f = (
        ytviy_f - 2.0 * float(beta_f @ xtviy_f) + float(beta_f @ xtvix_f @ beta_f)
    )
    polished = {"tau": tau, "beta": beta_f, "sigma2": quad_f / (n - p)}
    value_f = _ace_restricted_loglik(ws, polished, cache)
    if np.isfinite(value_f) and value_f >= loglik:
        state, loglik = polished, value_f
    half = ParamState(
        rep="half",
        beta=state["beta"],
        sigma2=state["sigma2"],
        blocks=[vech(d) for d in d_blocks],
    )
    cov_beta = state["sigma2"] * np.linalg.inv(cache[2])
    extra = {
        "tau": tau.tolist(),
        "sigma2_a": float(tau[0] ** 2 * state["sigma2"]),
        "sigma2_c": float(tau[1] ** 2 * state["sigma2"]),
        "sigma2_e": float(state["sigma2"]),
        "restarts": restarts,
    }
    return FitResult(
        params=half,
        loglik=float(loglik),
        criterion="ReML",
        method="ACE",
        iterations=iters,
        converged=converged,
        trace=trace,
        se_beta=np.sqrt(np.diag(cov_beta)),
        extra=extra,
    )


def ace_fit_generic(
    pf: ProductForms, shared: AceStructure, cfg: FitConfig | None = None
) -> FitResult:
    """ACE estimation through the generic constrained machinery.

    Works on plain product forms (Z explicit, q = n), so every tau step
    pays the q x q solve; this is the reference path the efficient
    implementation is checked against.
    """
    from .likelihood import criterion_value

    cfg = cfg or FitConfig(criterion="ReML")
    beta_ols = np.linalg.solve(pf.xtx, pf.xty)
    sigma2_ols = (
        pf.yty - 2 * float(beta_ols @ pf.xty) + float(beta_ols @ pf.xtx @ beta_ols)
    ) / pf.n

    results = []
    restarts = []
    for tau0 in _ace_start_points():
        state0 = ConstrainedState(
            beta=beta_ols.copy(),
            sigma2=sigma2_ols / (1 + tau0 @ tau0),
            params=[tau0.copy()],
            shared=shared,
        )

        def value(state):
            try:
                return criterion_value(pf, state.to_half(), "ReML")
            except (NumericalError, np.linalg.LinAlgError):
                return -np.inf

        def make_step(state):
            vp = VInverseProducts(pf, state.d_matrices())
            beta, sigma2 = gls_updates(pf, state, "ReML", vp=vp)
            mid = ConstrainedState(
                beta=beta, sigma2=sigma2, params=[state.params[0].copy()], shared=shared
            )
            sv, info = constrained_score_fim(mid, pf, "ReML", vp=vp)
            p = pf.p
            g = sv[p + 1 :]
            blk = info[p + 1 :, p + 1 :]
            direction = _solve_direction(blk, g, "ACE tau information")

            def step(alpha):
                return ConstrainedState(
                    beta=beta,
                    sigma2=sigma2,
                    params=[np.abs(mid.params[0] + alpha * direction)],
                    shared=shared,
                )

            return step

        try:
            state, loglik, iters, converged, trace = run_scoring_loop(
                state0, make_step, value, cfg.tol, cfg.max_iter
            )
        except NumericalError:
            restarts.append({"start": tau0.tolist(), "converged": False})
            results.append(None)
            continue
        restarts.append(
            {"start": tau0.tolist(), "converged": converged, "loglik": float(loglik)}
        )
        results.append((state, loglik, iters, converged, trace))
    state, loglik, iters, converged, trace = _pick_restart(results)
    tau = state.params[0]
    extra = {
        "tau": tau.tolist(),
        "sigma2_a": float(tau[0] ** 2 * state.sigma2),
        "sigma2_c": float(tau[1] ** 2 * state.sigma2),
        "sigma2_e": float(state.sigma2),
        "restarts": restarts,
    }
    cfg_out = FitConfig(method="FS", criterion="ReML", tol=cfg.tol, max_iter=cfg.max_iter)
    res = _finalize(pf, state.to_half(), loglik, cfg_out, iters, converged, trace, extra)
    res.method = "ACE"
    return res
