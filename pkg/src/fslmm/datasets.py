"""Deterministic synthetic datasets for examples and end-to-end tests."""

from __future__ import annotations

import numpy as np

from .constraints import Family

__all__ = ["crossed_scores_table", "twin_study_table"]


def crossed_scores_table(seed: int = 0, n: int = 234, n_students: int = 122, n_teachers: int = 12):
    """Test scores with crossed student/teacher random intercepts.

    Mirrors a longitudinal school-testing layout: each score belongs to
    one student and one teacher, students sit 1-3 exams under different
    teachers, and the year of schooling is the fixed covariate.
    """
    rng = np.random.default_rng(np.random.Philox(seed))
    student_effect = rng.normal(scale=6.0, size=n_students)
    teacher_effect = rng.normal(scale=3.0, size=n_teachers)
    students = np.repeat(np.arange(n_students), 2)[:n]
    if students.size < n:
        students = np.concatenate(
            [students, rng.integers(0, n_students, size=n - students.size)]
        )
    teachers = rng.integers(0, n_teachers, size=n)
    year = rng.integers(1, 4, size=n).astype(float)
    score = (
        480.0
        + 12.0 * year
        + student_effect[students]
        + teacher_effect[teachers]
        + rng.normal(scale=8.0, size=n)
    )
    return {
        "score": score.tolist(),
        "year": year.tolist(),
        "student": [f"s{i:03d}" for i in students],
        "teacher": [f"t{i:02d}" for i in teachers],
    }


_TWIN_FAMILY_TYPES = [
    # (label, members, pairwise relationships)
    ("mz_pair", ["a", "b"], {("a", "b"): "MZ"}),
    ("dz_pair", ["a", "b"], {("a", "b"): "DZ"}),
    ("mz_plus_sib", ["a", "b", "c"], {("a", "b"): "MZ", ("a", "c"): "full", ("b", "c"): "full"}),
    (
        "dz_plus_half",
        ["a", "b", "c"],
        {("a", "b"): "DZ", ("a", "c"): "half", ("b", "c"): "half"},
    ),
    ("singleton", ["a"], {}),
]


def twin_study_families(counts=(20, 20, 12, 12, 30)):
    """Family units spanning five structure types (twins, siblings,
    half-siblings, singletons), all reared together."""
    families = []
    fid = 0
    for (label, members, rels), count in zip(_TWIN_FAMILY_TYPES, counts):
        for _ in range(count):
            families.append(
                Family(
                    fid=f"{label}_{fid:03d}",
                    members=list(members),
                    relationships=dict(rels),
                )
            )
            fid += 1
    return families


def twin_study_table(
    seed: int = 0,
    counts=(20, 20, 12, 12, 30),
    variance_components=(50.0, 27.0, 33.0),
    beta=(118.0, 0.35, -0.30),
):
    """Synthetic twin-study observations with known ACE components.

    Returns (table, families).  The response decomposes into additive-
    genetic, shared-environment, and residual parts with the requested
    variances; fixed covariates are an age-like and a score-like column.
    """
    from .constraints import canonical_member_order, kinship_matrices

    rng = np.random.default_rng(np.random.Philox(seed))
    sigma2_a, sigma2_c, sigma2_e = variance_components
    families = twin_study_families(counts)
    rows = {"y": [], "age": [], "psqi": [], "family": [], "member": []}
    for fam in families:
        order = canonical_member_order(fam)
        ka, kc = kinship_matrices(fam)
        cov = sigma2_a * ka + sigma2_c * kc
        gamma = np.linalg.cholesky(cov + 1e-10 * np.eye(len(order))) @ rng.normal(
            size=len(order)
        )
        for i, member in enumerate(order):
            age = float(rng.integers(22, 36))
            psqi = float(rng.integers(0, 15))
            y = (
                beta[0]
                + beta[1] * age
                + beta[2] * psqi
                + gamma[i]
                + rng.normal(scale=np.sqrt(sigma2_e))
            )
            rows["y"].append(float(y))
            rows["age"].append(age)
            rows["psqi"].append(psqi)
            rows["family"].append(fam.fid)
            rows["member"].append(member)
    return rows, families
