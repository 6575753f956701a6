"""Shared fixtures and model generators for the test suite."""

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from fslmm.model import FactorStructure, ModelData, product_forms


def random_structure(rng, r=None, max_q=3, max_l=8):
    """A random factor layout with at least two levels per factor."""
    if r is None:
        r = int(rng.integers(1, 4))
    q = tuple(int(rng.integers(1, max_q + 1)) for _ in range(r))
    l = tuple(int(rng.integers(3, max_l + 1)) for _ in range(r))
    return q, l


def random_model(
    rng,
    n=60,
    p=3,
    r=None,
    q_counts=None,
    level_counts=None,
    d_scale=0.6,
    strict_pd=True,
):
    """Simulate a dense crossed-design model with known PSD blocks.

    Returns (data, d_blocks, beta, sigma2) where the data were generated
    from those parameters.
    """
    if q_counts is None or level_counts is None:
        q_counts, level_counts = random_structure(rng, r=r)
    levels = []
    for l_k in level_counts:
        while True:
            lev = rng.integers(0, l_k, size=n)
            if np.unique(lev).size == l_k:
                break
        levels.append(lev)
    x = np.column_stack([np.ones(n), rng.normal(size=(n, p - 1))])
    z_blocks = []
    for q_k, l_k, lev in zip(q_counts, level_counts, levels):
        values = np.column_stack([np.ones(n), rng.normal(size=(n, q_k - 1))])
        block = np.zeros((n, l_k * q_k))
        cols = lev[:, None] * q_k + np.arange(q_k)[None, :]
        np.put_along_axis(block, cols, values, axis=1)
        z_blocks.append(block)
    z = np.hstack(z_blocks)
    fs = FactorStructure(
        q_counts=tuple(q_counts),
        level_counts=tuple(level_counts),
        levels=tuple(levels),
    )
    d_blocks = []
    for q_k in q_counts:
        a = rng.normal(size=(q_k, q_k)) * d_scale
        d_k = a @ a.T
        if strict_pd:
            d_k += 0.3 * np.eye(q_k)
        d_blocks.append(d_k)
    beta = rng.normal(size=p)
    sigma2 = float(rng.uniform(0.5, 1.5))
    b_parts = []
    for q_k, l_k, d_k in zip(q_counts, level_counts, d_blocks):
        chol = np.linalg.cholesky(sigma2 * d_k + 1e-12 * np.eye(q_k))
        for _ in range(l_k):
            b_parts.append(chol @ rng.normal(size=q_k))
    b = np.concatenate(b_parts)
    y = x @ beta + z @ b + rng.normal(scale=np.sqrt(sigma2), size=n)
    data = ModelData(y=y, x=x, z=z, structure=fs)
    return data, d_blocks, beta, sigma2


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


@pytest.fixture
def small_model(rng):
    data, d_blocks, beta, sigma2 = random_model(
        rng, n=50, p=3, q_counts=(2, 1), level_counts=(5, 4)
    )
    return data, product_forms(data), d_blocks, beta, sigma2
