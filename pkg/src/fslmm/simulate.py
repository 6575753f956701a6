"""Simulation harness: the three reference design settings, data
generation, cross-method comparison metrics, and the moment-matching
degrees-of-freedom baseline.

True parameter values are repository configuration (documented PSD blocks
with a mix of zero and nonzero off-diagonal entries), not published
values.  MAE and MRD are likewise repo definitions:

    MAE(a, b) = mean |a - b|
    MRD(a, b) = mean 2|a - b| / (|a| + |b| + 1e-12)

Sampling uses the counter-based Philox generator so fixed seeds give
bit-reproducible streams.
"""

from __future__ import annotations

import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import SpecificationError
from .estimators import FitConfig, fit
from .inference import satterthwaite_df_t
from .model import FactorStructure, ModelData, ProductForms, product_forms

__all__ = [
    "SimSetting",
    "setting",
    "SETTING_LABELS",
    "generate",
    "compare_methods",
    "df_baseline",
    "direct_sw_estimates",
]

SETTING_LABELS = ("S1", "S2", "S3")

_TRUE_BETA = np.array([2.0, 0.8, -0.5, 0.3])
_TRUE_SIGMA2 = 1.0
# PSD by construction; off-diagonals mix zeros and nonzeros.
_TRUE_D = {
    2: np.array([[1.0, 0.4], [0.4, 0.5]]),
    3: np.array([[1.0, 0.3, 0.0], [0.3, 0.75, 0.0], [0.0, 0.0, 0.5]]),
    4: np.array(
        [
            [1.0, 0.25, 0.0, 0.0],
            [0.25, 0.8, 0.2, 0.0],
            [0.0, 0.2, 0.6, 0.0],
            [0.0, 0.0, 0.0, 0.4],
        ]
    ),
}

_SHAPES = {
    # label -> (q per factor, paper-scale levels, desk-scale levels, desk n)
    "S1": ((2,), (50,), (10,), 200),
    "S2": ((3, 2), (100, 50), (30, 15), 300),
    "S3": ((4, 3, 2), (100, 50, 10), (30, 15, 6), 400),
}


@dataclass(frozen=True)
class SimSetting:
    """One simulation design: shapes plus the generating parameters."""

    label: str
    q_counts: tuple[int, ...]
    level_counts: tuple[int, ...]
    n: int
    beta: np.ndarray
    sigma2: float
    d_blocks: tuple[np.ndarray, ...]

    @property
    def p(self) -> int:
        return self.beta.shape[0]


def setting(label: str, scale: str = "desk") -> SimSetting:
    """Reference settings: S1 (one factor), S2 (two crossed), S3 (three
    crossed), at ``desk`` or ``paper`` scale (n = 1000, paper levels)."""
    if label not in _SHAPES:
        raise SpecificationError(f"unknown setting {label!r}")
    q, l_paper, l_desk, n_desk = _SHAPES[label]
    if scale == "paper":
        levels, n = l_paper, 1000
    elif scale == "desk":
        levels, n = l_desk, n_desk
    else:
        raise SpecificationError(f"unknown scale {scale!r}")
    return SimSetting(
        label=label,
        q_counts=q,
        level_counts=levels,
        n=n,
        beta=_TRUE_BETA.copy(),
        sigma2=_TRUE_SIGMA2,
        d_blocks=tuple(_TRUE_D[qk].copy() for qk in q),
    )


def _rng(seed) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


def _sample_block_effects(rng, sigma2, d_blocks, level_counts):
    parts = []
    for d_k, l_k in zip(d_blocks, level_counts):
        q_k = d_k.shape[0]
        w, u = np.linalg.eigh(sigma2 * d_k)
        root = u * np.sqrt(np.maximum(w, 0.0))
        parts.append((root @ rng.normal(size=(q_k, l_k))).T.reshape(-1))
    return np.concatenate(parts) if parts else np.zeros(0)


def generate(sim: SimSetting, seed) -> ModelData:
    """Simulate one dataset: intercept-first designs with standard-normal
    covariates, uniform level assignment (empty levels redrawn), random
    effects N(0, sigma2 D) and noise N(0, sigma2 I)."""
    rng = _rng(seed)
    n = sim.n
    x = np.column_stack([np.ones(n), rng.normal(size=(n, sim.p - 1))])
    levels = []
    for l_k in sim.level_counts:
        lev = rng.integers(0, l_k, size=n)
        while np.unique(lev).size < l_k:
            lev = rng.integers(0, l_k, size=n)
        levels.append(lev)
    z_blocks = []
    for q_k, l_k, lev in zip(sim.q_counts, sim.level_counts, levels):
        values = np.column_stack([np.ones(n), rng.normal(size=(n, q_k - 1))])
        block = np.zeros((n, l_k * q_k))
        cols = lev[:, None] * q_k + np.arange(q_k)[None, :]
        np.put_along_axis(block, cols, values, axis=1)
        z_blocks.append(block)
    z = np.hstack(z_blocks) if z_blocks else np.empty((n, 0))
    b = _sample_block_effects(rng, sim.sigma2, sim.d_blocks, sim.level_counts)
    eps = rng.normal(scale=np.sqrt(sim.sigma2), size=n)
    y = x @ sim.beta + z @ b + eps
    fs = FactorStructure(
        q_counts=sim.q_counts,
        level_counts=sim.level_counts,
        levels=tuple(levels),
    )
    return ModelData(y=y, x=x, z=z, structure=fs)


# ---------------------------------------------------------------------------
# Cross-method comparison
# ---------------------------------------------------------------------------


def mae(a, b) -> float:
    a, b = np.asarray(a, float).ravel(), np.asarray(b, float).ravel()
    return float(np.mean(np.abs(a - b)))


def mrd(a, b) -> float:
    a, b = np.asarray(a, float).ravel(), np.asarray(b, float).ravel()
    return float(np.mean(2.0 * np.abs(a - b) / (np.abs(a) + np.abs(b) + 1e-12)))


def _sigma2d_vector(result) -> np.ndarray:
    return np.concatenate(
        [result.sigma2 * d.ravel() for d in result.d_matrices()]
    )


@dataclass
class ComparisonTable:
    """Per-method summaries and pairwise agreement metrics."""

    setting: str
    criterion: str
    n_reps: int
    methods: tuple[str, ...]
    mean_iterations: dict = field(default_factory=dict)
    mean_seconds: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)
    pairwise: dict = field(default_factory=dict)  # (m1, m2) -> metrics
    versus_truth: dict = field(default_factory=dict)

    def as_document(self) -> dict:
        """JSON-ready form; excludes wall-clock timings so documents are
        reproducible bit-for-bit under a fixed seed."""
        return {
            "setting": self.setting,
            "criterion": self.criterion,
            "n_reps": self.n_reps,
            "methods": list(self.methods),
            "mean_iterations": self.mean_iterations,
            "failures": self.failures,
            "pairwise": {
                f"{a}|{b}": m for (a, b), m in sorted(self.pairwise.items())
            },
            "versus_truth": self.versus_truth,
            "metric_definitions": {
                "MAE": "mean absolute difference over entries",
                "MRD": "mean of 2|a-b|/(|a|+|b|+1e-12) over entries",
            },
        }


def compare_methods(
    sim: SimSetting,
    n_reps: int,
    methods=("FS", "FFS", "SFS", "FSFS"),
    criterion: str = "ML",
    seed: int = 0,
    tol: float = 1e-6,
    max_iter: int = 200,
    jobs: int = 1,
) -> ComparisonTable:
    """Fit every replicate with every method and tabulate agreement.

    A replicate/method "failure" is a non-converged fit or a final
    criterion more than 1e-3 below the best method on that replicate;
    failures are flagged and excluded from the pairwise metrics.
    """
    methods = tuple(methods)
    seeds = np.random.SeedSequence(seed).spawn(n_reps)

    def run_one(rep):
        data = generate(sim, seeds[rep])
        pf = product_forms(data)
        out = {}
        for m in methods:
            t0 = time.perf_counter()
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    res = fit(
                        pf,
                        FitConfig(
                            method=m, criterion=criterion, tol=tol, max_iter=max_iter
                        ),
                    )
                elapsed = time.perf_counter() - t0
                out[m] = dict(
                    ok=True,
                    converged=res.converged,
                    loglik=res.loglik,
                    iterations=res.iterations,
                    seconds=elapsed,
                    beta=res.beta,
                    sigma2d=_sigma2d_vector(res),
                )
            except Exception as exc:  # recorded, never fatal
                out[m] = dict(ok=False, error=repr(exc), seconds=0.0)
        return out

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            reps = list(pool.map(run_one, range(n_reps)))
    else:
        reps = [run_one(i) for i in range(n_reps)]

    table = ComparisonTable(
        setting=sim.label, criterion=criterion, n_reps=n_reps, methods=methods
    )
    for m in methods:
        oks = [r[m] for r in reps if r[m].get("ok")]
        best = [
            max(
                r[mm]["loglik"]
                for mm in methods
                if r[mm].get("ok") and r[mm]["converged"]
            )
            for r in reps
            if any(r[mm].get("ok") and r[mm]["converged"] for mm in methods)
        ]
        fails = 0
        for r in reps:
            entry = r[m]
            best_l = max(
                (
                    r[mm]["loglik"]
                    for mm in methods
                    if r[mm].get("ok") and r[mm]["converged"]
                ),
                default=np.nan,
            )
            if (
                not entry.get("ok")
                or not entry["converged"]
                or (np.isfinite(best_l) and entry["loglik"] < best_l - 1e-3)
            ):
                fails += 1
        table.failures[m] = fails
        table.mean_iterations[m] = float(
            np.mean([e["iterations"] for e in oks])
        ) if oks else np.nan
        table.mean_seconds[m] = float(np.mean([e["seconds"] for e in oks])) if oks else np.nan

    def ok_pair(r, m1, m2):
        return (
            r[m1].get("ok")
            and r[m2].get("ok")
            and r[m1]["converged"]
            and r[m2]["converged"]
        )

    for i, m1 in enumerate(methods):
        for m2 in methods[i:]:
            shared = [r for r in reps if ok_pair(r, m1, m2)]
            if not shared:
                continue
            table.pairwise[(m1, m2)] = {
                "mae_beta": float(
                    np.mean([mae(r[m1]["beta"], r[m2]["beta"]) for r in shared])
                ),
                "mrd_beta": float(
                    np.mean([mrd(r[m1]["beta"], r[m2]["beta"]) for r in shared])
                ),
                "mae_sigma2d": float(
                    np.mean(
                        [mae(r[m1]["sigma2d"], r[m2]["sigma2d"]) for r in shared]
                    )
                ),
                "mrd_sigma2d": float(
                    np.mean(
                        [mrd(r[m1]["sigma2d"], r[m2]["sigma2d"]) for r in shared]
                    )
                ),
                "max_abs_loglik_gap": float(
                    max(abs(r[m1]["loglik"] - r[m2]["loglik"]) for r in shared)
                ),
                "n_shared": len(shared),
            }
    truth_sigma2d = np.concatenate(
        [sim.sigma2 * d.ravel() for d in sim.d_blocks]
    )
    for m in methods:
        oks = [r[m] for r in reps if r[m].get("ok") and r[m]["converged"]]
        if not oks:
            continue
        table.versus_truth[m] = {
            "mae_beta": float(np.mean([mae(e["beta"], sim.beta) for e in oks])),
            "mae_sigma2d": float(
                np.mean([mae(e["sigma2d"], truth_sigma2d) for e in oks])
            ),
        }
    return table


# ---------------------------------------------------------------------------
# Degrees-of-freedom baseline (moment matching over refits)
# ---------------------------------------------------------------------------


def _refit_pf_batch(data: ModelData, sim, n_sims, seed):
    """Product forms with fixed X, Z and freshly simulated responses.

    X- and Z-side products are computed once; only the Y-dependent pieces
    vary across simulations (one batched matmul for all of them).
    """
    rng = _rng(seed)
    x, z, fs = data.x, data.z, data.structure
    n = data.n
    b_draws = np.column_stack(
        [
            _sample_block_effects(rng, sim.sigma2, sim.d_blocks, fs.level_counts)
            for _ in range(n_sims)
        ]
    ) if fs.n_factors else np.zeros((0, n_sims))
    eps = rng.normal(scale=np.sqrt(sim.sigma2), size=(n, n_sims))
    ybatch = (x @ sim.beta)[:, None] + (z @ b_draws if fs.n_factors else 0.0) + eps
    xty_all = x.T @ ybatch
    ytz_all = (ybatch.T @ z) if z.size else np.zeros((n_sims, 0))
    yty_all = np.einsum("ij,ij->j", ybatch, ybatch)
    base = product_forms(data)
    for s in range(n_sims):
        yield ProductForms(
            xtx=base.xtx,
            xty=xty_all[:, s],
            xtz=base.xtz,
            yty=float(yty_all[s]),
            ytz=ytz_all[s],
            ztz=base.ztz,
            n=n,
            structure=fs,
            _ztz_sqrt=base.ztz_sqrt(),
        )


def _s2_of_fit(res, row, pf):
    from .model import VInverseProducts

    vp = VInverseProducts(pf, res.params.d_matrices(), check_pd=False)
    return float(res.sigma2 * row @ vp.xtvix_solve(row))


def df_baseline(
    data: ModelData,
    sim: SimSetting,
    contrast,
    n_sims: int = 1000,
    seed: int = 0,
    method: str = "FSFS",
) -> dict:
    """Moment-matching truth for the degrees of freedom of one contrast.

    Holding X and Z fixed, responses are redrawn n_sims times and refitted
    under ReML; the empirical variance of S^2 gives a single denominator
    and the averaged numerators 2 (S^2)^2 give the truth estimate
    v = mean(2 S^4) / Var(S^2).  Deterministic for a fixed seed.
    """
    row = np.asarray(contrast, dtype=float).ravel()
    cfg = FitConfig(method=method, criterion="ReML")
    s2_values = []
    failures = 0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for pf in _refit_pf_batch(data, sim, n_sims, seed):
            try:
                res = fit(pf, cfg)
                if not res.converged:
                    failures += 1
                    continue
                s2_values.append(_s2_of_fit(res, row, pf))
            except Exception:
                failures += 1
    s2_values = np.asarray(s2_values)
    var_s2 = float(np.var(s2_values, ddof=1))
    numerators = 2.0 * s2_values**2
    return {
        "df_truth": float(np.mean(numerators) / var_s2),
        "var_s2": var_s2,
        "mean_s2": float(np.mean(s2_values)),
        "n_effective": int(s2_values.size),
        "failures": failures,
    }


def direct_sw_estimates(
    data: ModelData,
    sim: SimSetting,
    contrast,
    n_sims: int = 200,
    seed: int = 1,
    method: str = "FSFS",
) -> dict:
    """Distribution of the closed-form direct Satterthwaite estimate over
    fresh simulations from the same fixed design."""
    row = np.asarray(contrast, dtype=float).ravel()
    cfg = FitConfig(method=method, criterion="ReML")
    dfs = []
    failures = 0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for pf in _refit_pf_batch(data, sim, n_sims, seed):
            try:
                res = fit(pf, cfg)
                if not res.converged:
                    failures += 1
                    continue
                dfs.append(satterthwaite_df_t(res, row, pf).df)
            except Exception:
                failures += 1
    dfs = np.asarray(dfs)
    return {
        "mean_df": float(np.mean(dfs)),
        "sd_df": float(np.std(dfs, ddof=1)),
        "n_effective": int(dfs.size),
        "failures": failures,
    }
