"""Constraint-machinery tests: structure catalogs, constrained scores and
information, kinship construction, and the ACE fitting paths."""

import numpy as np
import numpy.testing as npt
import pytest
from scipy import optimize

import oracles
from conftest import random_model

from fslmm.constraints import (
    AceStructure,
    ConstrainedState,
    CovStructure,
    Family,
    ace_constraint,
    ace_fit,
    ace_fit_generic,
    build_ace_layout,
    canonical_member_order,
    constrained_score_fim,
    fit_constrained,
    kinship_matrices,
)
from fslmm.datasets import twin_study_table
from fslmm.errors import PedigreeError, SpecificationError
from fslmm.estimators import FitConfig, fit
from fslmm.kernels import duplication_matrix, vec, vech
from fslmm.likelihood import ParamState, score
from fslmm.model import (
    FactorStructure,
    ModelData,
    ModelSpec,
    RandomTerm,
    build_design,
    product_forms,
)

ALL_KINDS = (
    "unstructured",
    "diagonal",
    "variance_components",
    "toeplitz",
    "compound_symmetry",
    "ar1",
)


def mid_params(struct, rng):
    """Interior parameter draw for a structure (inside its PSD box)."""
    lo, hi = struct.param_bounds()
    lo = max(lo, -0.6)
    hi = min(hi, 0.9)
    if struct.kind in ("diagonal", "variance_components"):
        return rng.uniform(0.3, 1.2, size=struct.n_params)
    if struct.kind == "toeplitz":
        p = rng.uniform(-0.15, 0.15, size=struct.n_params)
        p[0] = rng.uniform(0.8, 1.4)
        return p
    if struct.kind == "unstructured":
        a = rng.normal(size=(struct.dim, struct.dim)) * 0.4
        return vech(a @ a.T + 0.5 * np.eye(struct.dim))
    return rng.uniform(lo * 0.5, hi * 0.5, size=struct.n_params)


class TestConstraintCatalog:
    def test_diagonal_row(self):
        c = CovStructure("diagonal", 3).constraint_matrix(np.array([0.7]))
        npt.assert_array_equal(c, [[1, 0, 0, 0, 1, 0, 0, 0, 1]])

    def test_ar1_row(self):
        d1 = 0.35
        c = CovStructure("ar1", 3).constraint_matrix(np.array([d1]))
        expected = [[0, 1, 2 * d1, 1, 0, 1, 2 * d1, 1, 0]]
        npt.assert_allclose(c, expected)

    def test_variance_components_rows(self):
        c = CovStructure("variance_components", 3).constraint_matrix(
            np.array([1.0, 2.0, 3.0])
        )
        expected = np.zeros((3, 9))
        expected[0, 0] = expected[1, 4] = expected[2, 8] = 1.0
        npt.assert_array_equal(c, expected)

    def test_toeplitz_rows(self):
        c = CovStructure("toeplitz", 3).constraint_matrix(np.zeros(3))
        expected = np.array(
            [
                [1, 0, 0, 0, 1, 0, 0, 0, 1],
                [0, 1, 0, 1, 0, 1, 0, 1, 0],
                [0, 0, 1, 0, 0, 0, 1, 0, 0],
            ],
            dtype=float,
        )
        npt.assert_array_equal(c, expected)

    def test_compound_symmetry_row(self):
        c = CovStructure("compound_symmetry", 3).constraint_matrix(np.array([0.2]))
        npt.assert_array_equal(c, [[0, 1, 1, 1, 0, 1, 1, 1, 0]])

    @pytest.mark.parametrize("kind", ALL_KINDS)
    @pytest.mark.parametrize("dim", [2, 3, 4])
    def test_jacobian_matches_finite_differences(self, rng, kind, dim):
        struct = CovStructure(kind, dim)
        params = mid_params(struct, rng)
        jac_fd = oracles.fd_jacobian(
            lambda p: vec(struct.decode(p)), params
        )  # rows = vec entries, cols = params
        npt.assert_allclose(
            struct.constraint_matrix(params), jac_fd.T, rtol=1e-6, atol=1e-6
        )

    @pytest.mark.parametrize("kind", ALL_KINDS)
    def test_decode_encode_identity(self, rng, kind):
        struct = CovStructure(kind, 3)
        params = mid_params(struct, rng)
        back = struct.encode_from(struct.decode(params))
        npt.assert_allclose(back, params, rtol=1e-10, atol=1e-12)

    def test_decode_symmetric(self, rng):
        for kind in ALL_KINDS:
            struct = CovStructure(kind, 4)
            d = struct.decode(mid_params(struct, rng))
            npt.assert_allclose(d, d.T, atol=1e-14)

    def test_unsupported_combination(self):
        with pytest.raises(SpecificationError):
            CovStructure("ar1", 1)
        with pytest.raises(SpecificationError):
            CovStructure("spherical", 3)


class TestConstrainedScoreFim:
    def test_unstructured_reproduces_half_score(self, small_model):
        data, pf, d_blocks, beta, sigma2 = small_model
        structures = [
            CovStructure("unstructured", q) for q in data.structure.q_counts
        ]
        state = ConstrainedState(
            beta=beta,
            sigma2=sigma2,
            params=[vech(d) for d in d_blocks],
            structures=structures,
        )
        sv, info = constrained_score_fim(state, pf, "ML")
        half = score(
            ParamState(
                rep="half",
                beta=beta,
                sigma2=sigma2,
                blocks=[vech(d) for d in d_blocks],
            ),
            pf,
            "ML",
        )
        npt.assert_allclose(sv, half.pack(), rtol=1e-12)
        from fslmm.likelihood import fisher_info

        full_info = fisher_info(
            ParamState(
                rep="half",
                beta=beta,
                sigma2=sigma2,
                blocks=[vech(d) for d in d_blocks],
            ),
            pf,
            "fisher_half",
        ).matrix
        npt.assert_allclose(info, full_info, rtol=1e-10, atol=1e-12)

    def test_diagonal_score_is_diagonal_sum(self, rng):
        data, d_blocks, beta, sigma2 = random_model(
            rng, n=40, q_counts=(3,), level_counts=(5,)
        )
        pf = product_forms(data)
        struct = CovStructure("diagonal", 3)
        state = ConstrainedState(
            beta=beta,
            sigma2=sigma2,
            params=[np.array([0.5])],
            structures=[struct],
        )
        sv, _ = constrained_score_fim(state, pf, "ML")
        full = score(
            ParamState(
                rep="full",
                beta=beta,
                sigma2=sigma2,
                blocks=[vec(0.5 * np.eye(3))],
            ),
            pf,
            "ML",
        )
        grad_mat = full.blocks[0].reshape(3, 3, order="F")
        assert sv[-1] == pytest.approx(np.trace(grad_mat), rel=1e-10)

    @pytest.mark.parametrize("kind", ["diagonal", "toeplitz", "compound_symmetry", "ar1"])
    @pytest.mark.parametrize("criterion", ["ML", "ReML"])
    def test_score_matches_finite_differences(self, rng, kind, criterion):
        data, _, beta, sigma2 = random_model(
            rng, n=50, p=2, q_counts=(3,), level_counts=(6,)
        )
        pf = product_forms(data)
        struct = CovStructure(kind, 3)
        params = mid_params(struct, rng)
        state = ConstrainedState(
            beta=beta, sigma2=sigma2, params=[params], structures=[struct]
        )
        sv, _ = constrained_score_fim(state, pf, criterion)
        fun = (
            oracles.reml_loglik_dense if criterion == "ReML" else oracles.loglik_dense
        )

        def value(packed):
            b, s2, pk = packed[:2], packed[2], packed[3:]
            d = oracles.assemble_d_dense([struct.decode(pk)], data.structure)
            return fun(data.x, data.y, data.z, b, s2, d)

        packed = np.concatenate([beta, [sigma2], params])
        fd = oracles.fd_gradient(value, packed)
        npt.assert_allclose(sv, fd, rtol=1e-5, atol=1e-7)

    def test_mixed_structures_score_matches_fd(self, rng):
        # AR(1) on the first factor, compound symmetry on the second.
        data, _, beta, sigma2 = random_model(
            rng, n=60, p=2, q_counts=(3, 2), level_counts=(6, 4)
        )
        pf = product_forms(data)
        structures = [CovStructure("ar1", 3), CovStructure("compound_symmetry", 2)]
        params = [np.array([0.3]), np.array([0.25])]
        state = ConstrainedState(
            beta=beta, sigma2=sigma2, params=params, structures=structures
        )
        sv, info = constrained_score_fim(state, pf, "ML")

        def value(packed):
            b, s2 = packed[:2], packed[2]
            pks = [packed[3:4], packed[4:5]]
            d = oracles.assemble_d_dense(
                [s.decode(pk) for s, pk in zip(structures, pks)], data.structure
            )
            return oracles.loglik_dense(data.x, data.y, data.z, b, s2, d)

        packed = np.concatenate([beta, [sigma2]] + params)
        fd = oracles.fd_gradient(value, packed)
        npt.assert_allclose(sv, fd, rtol=1e-5, atol=1e-7)
        # Conjugation preserves PSD-ness of the information matrix.
        assert np.linalg.eigvalsh(info).min() >= -1e-8

    def test_constrained_fim_is_conjugated_full_fim(self, rng):
        data, _, beta, sigma2 = random_model(
            rng, n=40, p=2, q_counts=(2,), level_counts=(5,)
        )
        pf = product_forms(data)
        struct = CovStructure("toeplitz", 2)
        params = np.array([0.9, 0.2])
        state = ConstrainedState(
            beta=beta, sigma2=sigma2, params=[params], structures=[struct]
        )
        _, info = constrained_score_fim(state, pf, "ML")
        from fslmm.likelihood import fisher_info

        theta_full = ParamState(
            rep="full",
            beta=beta,
            sigma2=sigma2,
            blocks=[vec(struct.decode(params))],
        )
        full = fisher_info(theta_full, pf, "fisher_full").matrix
        c = struct.constraint_matrix(params)
        t = np.zeros((2 + c.shape[0], full.shape[0]))
        t[0, 0] = t[1, 1] = 1.0
        t[2:, 3:] = c
        # beta block occupies the first p=2 coords in both layouts
        t2 = np.zeros((data.p + 1 + c.shape[0], full.shape[0]))
        t2[: data.p, : data.p] = np.eye(data.p)
        t2[data.p, data.p] = 1.0
        t2[data.p + 1 :, data.p + 1 :] = c
        npt.assert_allclose(t2 @ full @ t2.T, info, rtol=1e-9, atol=1e-10)


class TestConstrainedFit:
    def test_fits_and_beats_unstructured_start(self, rng):
        data, _, beta, sigma2 = random_model(
            rng, n=200, p=2, q_counts=(3,), level_counts=(10,)
        )
        res = fit(
            data,
            FitConfig(method="FS"),
            structure=[CovStructure("compound_symmetry", 3)],
        )
        assert res.converged
        d_hat = res.d_matrices()[0]
        npt.assert_allclose(np.diag(d_hat), 1.0, atol=1e-12)
        offdiag = d_hat[np.triu_indices(3, 1)]
        assert np.allclose(offdiag, offdiag[0])

    def test_constrained_stationarity(self, rng):
        data, _, beta, sigma2 = random_model(
            rng, n=150, p=2, q_counts=(2,), level_counts=(8,)
        )
        pf = product_forms(data)
        res = fit(pf, FitConfig(method="FS"), structure=[CovStructure("diagonal", 2)])
        params = np.array(res.extra["structure_params"][0])
        if params[0] > 1e-6:  # interior solution
            state = ConstrainedState(
                beta=res.beta,
                sigma2=res.sigma2,
                params=[params],
                structures=[CovStructure("diagonal", 2)],
            )
            sv, _ = constrained_score_fim(state, pf, "ML")
            assert np.linalg.norm(sv) < 1e-3 * (1 + abs(res.loglik))


class TestKinship:
    def test_mz_pair(self):
        fam = Family(fid=1, members=["a", "b"], relationships={("a", "b"): "MZ"})
        ka, kc = kinship_matrices(fam)
        npt.assert_array_equal(ka, [[1, 1], [1, 1]])
        npt.assert_array_equal(kc, [[1, 1], [1, 1]])

    def test_twin_half_sib_family(self):
        fam = Family(
            fid=2,
            members=["t1", "t2", "h"],
            relationships={
                ("t1", "t2"): "DZ",
                ("t1", "h"): "half",
                ("t2", "h"): "half",
            },
        )
        ka, _ = kinship_matrices(fam)
        npt.assert_array_equal(ka, [[1, 0.5, 0.25], [0.5, 1, 0.25], [0.25, 0.25, 1]])

    def test_all_unrelated(self):
        fam = Family(
            fid=3,
            members=["x", "y"],
            relationships={},
            reared_apart={("x", "y")},
        )
        ka, kc = kinship_matrices(fam)
        npt.assert_array_equal(ka, np.eye(2))
        npt.assert_array_equal(kc, np.eye(2))

    def test_asymmetric_declaration_rejected(self):
        fam = Family(
            fid=4,
            members=["a", "b"],
            relationships={("a", "b"): "MZ", ("b", "a"): "unrelated"},
        )
        with pytest.raises(PedigreeError):
            kinship_matrices(fam)

    def test_mz_transitivity_enforced(self):
        fam = Family(
            fid=5,
            members=["a", "b", "c"],
            relationships={("a", "b"): "MZ", ("a", "c"): "MZ", ("b", "c"): "full"},
        )
        with pytest.raises(PedigreeError):
            kinship_matrices(fam)

    def test_canonical_order_twins_first(self):
        fam = Family(
            fid=6,
            members=["sib", "t1", "t2"],
            relationships={
                ("t1", "t2"): "MZ",
                ("sib", "t1"): "full",
                ("sib", "t2"): "full",
            },
        )
        assert canonical_member_order(fam) == ["t1", "t2", "sib"]


class TestAceConstraint:
    def test_single_unit_kinships(self):
        c = ace_constraint(
            np.array([0.4, 0.9]), [(np.eye(1), np.eye(1))]
        )
        npt.assert_allclose(c, [[0.8], [1.8]])

    def test_zero_ta_zeroes_first_row(self):
        fam = Family(fid=1, members=["a", "b"], relationships={("a", "b"): "MZ"})
        kin = [kinship_matrices(fam)]
        c = ace_constraint(np.array([0.0, 0.5]), kin)
        npt.assert_array_equal(c[0], 0.0)
        assert np.any(c[1] != 0)

    def test_matches_fd_jacobian(self, rng):
        fams = [
            Family(fid=1, members=["a", "b"], relationships={("a", "b"): "MZ"}),
            Family(
                fid=2,
                members=["a", "b", "c"],
                relationships={("a", "b"): "DZ", ("a", "c"): "half", ("b", "c"): "half"},
            ),
        ]
        kin = [kinship_matrices(f) for f in fams]
        struct = AceStructure(kin)
        tau = np.array([0.6, 0.4])

        def stacked(t):
            return np.concatenate([vec(d) for d in struct.decode(t)])

        jac_fd = oracles.fd_jacobian(stacked, tau)
        npt.assert_allclose(ace_constraint(tau, kin), jac_fd.T, rtol=1e-6, atol=1e-8)


def ace_model_data(table, families):
    """Explicit (identity-Z) model data for the generic reference path."""
    layout = build_ace_layout(families, table["family"], table["member"])
    x = np.column_stack(
        [np.ones(len(table["y"])), np.array(table["age"]), np.array(table["psqi"])]
    )
    y = np.array(table["y"])
    xc = x[layout.row_order]
    yc = y[layout.row_order]
    data = ModelData(
        y=yc, x=xc, z=np.eye(len(yc)), structure=layout.structure
    )
    return data, layout, x, y


class TestAceFit:
    def test_unrelated_singletons_recover_residual_variance(self, rng):
        from fslmm.datasets import twin_study_table

        table, families = twin_study_table(
            seed=3, counts=(0, 0, 0, 0, 60), variance_components=(20.0, 10.0, 30.0)
        )
        # With singleton-only pedigrees the a/c split is unidentified, but
        # the total variance matches the sample residual variance.
        layout = build_ace_layout(families, table["family"], table["member"])
        x = np.column_stack(
            [np.ones(len(table["y"])), np.array(table["age"]), np.array(table["psqi"])]
        )
        y = np.array(table["y"])
        res = ace_fit(x, y, layout)
        total = res.extra["sigma2_a"] + res.extra["sigma2_c"] + res.extra["sigma2_e"]
        resid = y - x @ np.linalg.lstsq(x, y, rcond=None)[0]
        sample = resid @ resid / (len(y) - 3)
        assert total == pytest.approx(sample, rel=0.2)

    def test_recovers_generative_components(self):
        table, families = twin_study_table(
            seed=11, counts=(40, 40, 25, 25, 40),
            variance_components=(50.0, 27.0, 33.0),
        )
        layout = build_ace_layout(families, table["family"], table["member"])
        x = np.column_stack(
            [np.ones(len(table["y"])), np.array(table["age"]), np.array(table["psqi"])]
        )
        y = np.array(table["y"])
        res = ace_fit(x, y, layout)
        assert res.converged
        total_true = 110.0
        total_hat = (
            res.extra["sigma2_a"] + res.extra["sigma2_c"] + res.extra["sigma2_e"]
        )
        assert total_hat == pytest.approx(total_true, rel=0.35)

    def test_efficient_matches_generic_path(self):
        table, families = twin_study_table(seed=7, counts=(10, 10, 6, 6, 10))
        data, layout, x, y = ace_model_data(table, families)
        pf = product_forms(data)
        shared = AceStructure(layout.kinships)

        # Score and information agree at an arbitrary tau.
        tau = np.array([0.5, 0.4])
        beta = np.linalg.lstsq(data.x, data.y, rcond=None)[0]
        state = ConstrainedState(
            beta=beta, sigma2=30.0, params=[tau], shared=shared
        )
        sv, info = constrained_score_fim(state, pf, "ReML")
        # Efficient-path equivalents assembled from type-level pieces.
        from fslmm.constraints import _AceWorkspace
        from fslmm.estimators import gls_updates

        ws = _AceWorkspace(data.x, data.y, layout)
        d_blocks = shared.decode(tau)
        vi_blocks, logdet, xtvix, xtviy, ytviy = ws.solve_state(d_blocks)
        npt.assert_allclose(xtvix, np.linalg.inv(np.linalg.inv(xtvix)), rtol=1e-8)
        e = data.y - data.x @ beta
        g_inv = np.linalg.inv(xtvix)
        g_tau = np.zeros(2)
        i_tau = np.zeros((2, 2))
        off = 0
        fs = layout.structure
        from fslmm.kernels import unvec

        for k, d_k in enumerate(d_blocks):
            l, q = fs.level_counts[k], fs.q_counts[k]
            vi = vi_blocks[k]
            ek = e[off : off + l * q].reshape(l, q).T
            xgx = unvec(ws.xx_kron[k].T @ vec(g_inv), q, q)
            core = ek @ ek.T / 30.0 - l * (np.eye(q) + d_k) + xgx
            grad_mat = 0.5 * vi @ core @ vi
            kin_rows = np.vstack([vec(layout.kinships[k][0]), vec(layout.kinships[k][1])])
            g_tau += 2.0 * tau * (kin_rows @ vec(grad_mat))
            mats = [layout.kinships[k][0], layout.kinships[k][1]]
            f_entries = np.empty((2, 2))
            for a in range(2):
                for b in range(2):
                    f_entries[a, b] = 0.5 * l * float(
                        np.sum(mats[a] * (vi @ mats[b] @ vi))
                    )
            i_tau += 4.0 * np.outer(tau, tau) * f_entries
            off += l * q
        p = data.p
        npt.assert_allclose(g_tau, sv[p + 1 :], rtol=1e-8, atol=1e-10)
        npt.assert_allclose(i_tau, info[p + 1 :, p + 1 :], rtol=1e-8, atol=1e-10)

        # Full fits agree too.
        res_eff = ace_fit(x, y, layout)
        res_gen = ace_fit_generic(pf, shared)
        assert res_eff.loglik == pytest.approx(res_gen.loglik, abs=1e-6)
        npt.assert_allclose(res_eff.beta, res_gen.beta, rtol=1e-6)
        npt.assert_allclose(
            res_eff.extra["tau"], res_gen.extra["tau"], rtol=1e-4, atol=1e-6
        )

    def test_restricted_loglik_near_derivative_free_oracle(self):
        table, families = twin_study_table(seed=19, counts=(15, 15, 8, 8, 15))
        data, layout, x, y = ace_model_data(table, families)
        res = ace_fit(x, y, layout)
        pf = product_forms(data)
        shared = AceStructure(layout.kinships)
        from fslmm.likelihood import criterion_value

        def neg_restricted(tau):
            tau = np.abs(tau)
            state = ConstrainedState(
                beta=res.beta, sigma2=1.0, params=[tau], shared=shared
            )
            try:
                from fslmm.estimators import gls_updates

                beta, sigma2 = gls_updates(pf, state, "ReML")
                st = ConstrainedState(
                    beta=beta, sigma2=sigma2, params=[tau], shared=shared
                )
                return -criterion_value(pf, st.to_half(), "ReML")
            except Exception:
                return 1e10

        start = np.array(res.extra["tau"]) * 1.1 + 0.05
        out = optimize.minimize(
            neg_restricted, start, method="Powell", options={"xtol": 1e-10}
        )
        assert res.loglik >= -out.fun - 1e-3

    def test_layout_rejects_unknown_family(self):
        table, families = twin_study_table(seed=2, counts=(2, 0, 0, 0, 2))
        with pytest.raises(PedigreeError):
            build_ace_layout(families, ["nope"] * len(table["y"]), table["member"])
