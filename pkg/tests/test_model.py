import math

import numpy as np
import pytest

from docclean.background import fit_background
from docclean.model import (ModelParams, cell_log_likes, gaussian_log_density, log_prior,
                            sample_dataset, sample_patch, shift_index, window_indices)
from oracles import bg_log_density_scalar, gauss_log_scalar, random_instance


def test_gaussian_at_mean():
    phi = np.array([0.1, 0.3])
    v = gaussian_log_density(np.array([1.0, 2.0]), np.array([1.0, 2.0]), phi)
    assert v == pytest.approx(-0.5 * np.log(2 * np.pi * phi).sum(), abs=1e-12)


def test_cell_log_likes_scalar_reference():
    params, bg, Y = random_instance(7, C=2, D=(5, 4), P=(3, 3), F=2)
    for x in [(0, 0), (3, 2), (4, 3)]:
        ll = cell_log_likes(params, bg, Y[0], 1, x)
        for i1 in range(3):
            for i2 in range(3):
                d = shift_index((i1, i2), x, (5, 4))
                y = Y[0][d]
                assert ll[i1, i2, 0] == pytest.approx(
                    gauss_log_scalar(y, params.W[1, i1, i2], params.phi[1, i1, i2]), abs=1e-12)
                assert ll[i1, i2, 1] == pytest.approx(bg_log_density_scalar(bg, y), abs=1e-12)


def test_cyclic_shift_wraps():
    params, bg, Y = random_instance(1, D=(4, 4))
    np.testing.assert_array_equal(cell_log_likes(params, bg, Y[0], 0, (4, 4)),
                                  cell_log_likes(params, bg, Y[0], 0, (0, 0)))
    r, c = window_indices((2, 2), (3, 3), (4, 4))
    assert r.tolist() == [[3, 3], [0, 0]] and c.tolist() == [[3, 0], [3, 0]]


def test_log_prior_values():
    C = 5
    p = ModelParams(pi=np.full(C, 0.2), W=np.zeros((C, 2, 2, 1)), phi=np.ones((C, 2, 2, 1)),
                    alpha=np.full((C, 2, 2), 0.5), patch_dims=(50, 50))
    for c in range(C):
        assert log_prior(p, c, (3, 4)) == pytest.approx(math.log(0.2) - math.log(2500), abs=1e-14)
    total = sum(math.exp(log_prior(p, c)) * 2500 for c in range(C))
    assert total == pytest.approx(1.0, abs=1e-12)


def test_params_validation():
    ok = dict(pi=np.array([0.5, 0.5]), W=np.zeros((2, 2, 2, 1)), phi=np.ones((2, 2, 2, 1)),
              alpha=np.full((2, 2, 2), 0.5), patch_dims=(3, 3))
    ModelParams(**ok)
    for bad in [dict(pi=np.array([0.6, 0.6])), dict(alpha=np.full((2, 2, 2), 1.5)),
                dict(patch_dims=(1, 3)), dict(phi=np.ones((2, 2, 1, 1))),
                dict(W=np.full((2, 2, 2, 1), np.nan))]:
        with pytest.raises(ValueError):
            ModelParams(**{**ok, **bad})
    p = ModelParams(**{**ok, "phi": np.zeros((2, 2, 2, 1))})
    assert p.phi.min() == p.var_floor
    with pytest.raises(ValueError):
        p.W[0, 0, 0, 0] = 1.0


def test_sample_zero_mask_is_background():
    params, bg, _ = random_instance(0)
    params = params.replace(alpha=np.zeros_like(params.alpha))
    data, states = sample_dataset(params, bg, 400, seed=3)
    assert all(not s.m.any() for s in states)
    vals = data.reshape(-1)
    cdf = np.cumsum(bg.densities[0] * np.diff(bg.edges[0]))
    emp = np.searchsorted(np.sort(vals), bg.edges[0][1:], side="right") / vals.size
    assert np.abs(emp - cdf).max() < 0.03


def test_sample_full_mask_reproduces_means():
    rng = np.random.default_rng(0)
    W = rng.random((1, 4, 4, 3))
    params = ModelParams(pi=np.ones(1), W=W, phi=np.full(W.shape, 1e-12),
                         alpha=np.ones((1, 4, 4)), patch_dims=(4, 4), var_floor=1e-14)
    bg = fit_background(rng.random((10, 4, 4, 3)))
    Y, s = sample_patch(params, bg, 1, x=(0, 0))
    np.testing.assert_allclose(Y, W[0], atol=1e-5)
    assert s.m.all()


def test_sample_needs_background():
    params, _, _ = random_instance(0)
    with pytest.raises(RuntimeError):
        sample_patch(params, None, 0)


def test_sample_reproducible():
    params, bg, _ = random_instance(2)
    a, _ = sample_dataset(params, bg, 5, seed=11)
    b, _ = sample_dataset(params, bg, 5, seed=11)
    np.testing.assert_array_equal(a, b)
