from dataclasses import replace

import numpy as np
import pytest

from josa.deform import (
    DeformationField,
    VelocityField,
    compose,
    integrate,
    random_velocity,
    to_physical,
    warp,
)
from josa.model import (
    TERMS,
    Atlas,
    DegenerateChannelError,
    EmptyBatchError,
    Hyperparams,
    SubjectRecord,
    augment,
    centrality_loss,
    data_loss,
    reg_loss,
    standardize,
    total_loss,
    verify_marginal_likelihood,
)
from josa.sphere_grid import ShapeMismatchError, area_weights, make_grid, weighted_norm_sq
from josa.synth import SynthConfig, make_atlas, sample_subject

from .fixtures import *  # noqa


def subjects_like(atlas, n=2):
    return [
        SubjectRecord(f"s{i}", atlas.geom.copy(), atlas.grid, atlas.func.copy())
        for i in range(n)
    ]


def test_hyperparams_defaults():
    hp = Hyperparams()
    assert (hp.lambda_j, hp.lambda_g, hp.lambda_f) == (0.1, 0.2, 0.2)
    assert (hp.w_func, hp.w_geom) == (0.7, 0.3)
    assert (hp.sigma_aug_deform, hp.sigma_noise_geom, hp.sigma_noise_func) == (4.0, 1.0, 6.0)
    with pytest.raises(ValueError):
        Hyperparams(w_func=0.5)
    with pytest.raises(ValueError):
        Hyperparams(lambda_j=-1.0)


def test_standardize():
    x = np.array([[1.0, 2.0], [3.0, 4.0]])
    out = standardize(x)
    np.testing.assert_allclose(out, (x - 2.5) / np.std(x))
    with pytest.raises(DegenerateChannelError):
        standardize(np.ones((4, 8)))


def test_standardize_statistics(rng):
    out = standardize(rng.gamma(2.0, size=(16, 32, 3)))
    for ch in range(3):
        assert abs(np.median(out[..., ch])) < 1e-9
        assert out[..., ch].std() == pytest.approx(1.0, abs=1e-9)


def test_atlas_rejects_bad_shapes(grid):
    with pytest.raises(ShapeMismatchError):
        Atlas(np.zeros((4, 4)), np.zeros(grid.shape), grid)
    with pytest.raises(ValueError):
        Atlas(np.full(grid.shape, np.inf), np.zeros(grid.shape), grid)


def test_data_loss_trivial_cases(atlas, weights):
    identity = DeformationField.identity(atlas.grid)
    assert data_loss(atlas.geom, atlas.geom, identity, identity, weights) == 0.0
    zero = np.zeros_like(atlas.geom)
    assert data_loss(atlas.geom, zero, identity, identity, weights) == pytest.approx(
        weighted_norm_sq(atlas.geom, weights)
    )


def test_data_loss_lowest_at_true_fields():
    cfg = SynthConfig(grid=make_grid(64, 128), seed=2)
    atlas = make_atlas(cfg)
    weights = area_weights(atlas.grid)
    identity = DeformationField.identity(atlas.grid)
    for seed in range(3):
        record, truth = sample_subject(atlas, cfg, [5, seed])
        phi_j = integrate(truth.v_j)
        phi_g = integrate(truth.v_g)
        at_truth = data_loss(record.geom, atlas.geom, phi_g, phi_j, weights)
        at_identity = data_loss(record.geom, atlas.geom, identity, identity, weights)
        noise_energy = cfg.geom_noise ** 2 * atlas.geom.shape[-1] * weights.w.sum()
        assert at_truth < at_identity
        assert 0.5 * noise_energy < at_truth < 1.2 * noise_energy


def test_atlas_space_residual_has_no_polar_excess():
    cfg = SynthConfig(grid=make_grid(64, 128), seed=2)
    atlas = make_atlas(cfg)
    weights = area_weights(atlas.grid)
    noise_energy = cfg.geom_noise ** 2 * atlas.geom.shape[-1] * weights.w.sum()
    for seed in range(3):
        record, truth = sample_subject(atlas, cfg, [5, seed])
        phi_j = integrate(truth.v_j)
        phi_g = integrate(truth.v_g)
        psi_inv = compose(phi_j.inverse(), phi_g.inverse())
        residual = warp(record.geom, psi_inv) - atlas.geom
        assert weighted_norm_sq(residual, weights) < 1.2 * noise_energy
        per_row = np.mean(residual ** 2, axis=(1, 2))
        typical = np.median(per_row)
        assert per_row[:3].max() < 4 * typical
        assert per_row[-3:].max() < 4 * typical


def test_reg_loss(grid, weights, rng):
    hp = Hyperparams()
    zero = np.zeros(grid.shape + (2,))
    assert reg_loss(zero, zero, zero, hp, weights) == 0
    constant = np.full(grid.shape + (2,), 1.3)
    assert reg_loss(constant, constant, constant, hp, weights) == pytest.approx(0, abs=1e-20)

    u = rng.standard_normal(grid.shape + (2,))
    once = reg_loss(u, zero, zero, hp, weights)
    assert reg_loss(2 * u, zero, zero, hp, weights) == pytest.approx(4 * once)
    assert reg_loss(u + 5.0, zero, zero, hp, weights) == pytest.approx(once)


def test_centrality_loss(grid, weights, rng):
    u = rng.standard_normal(grid.shape + (2,))
    assert centrality_loss([u, -u], 0.01, weights) == 0
    assert centrality_loss([u], 0.5, weights) == pytest.approx(0.5 * weighted_norm_sq(u, weights))
    assert centrality_loss([u + 1.0], 0.5, weights) != pytest.approx(
        centrality_loss([u], 0.5, weights)
    )
    with pytest.raises(EmptyBatchError):
        centrality_loss([], 0.01, weights)


def test_centrality_loss_matches_loop(grid, weights, rng):
    fields = [rng.standard_normal(grid.shape + (2,)) for _ in range(3)]
    expected = 0.0
    for i in range(grid.height):
        for j in range(grid.width):
            for c in range(2):
                mean = sum(f[i, j, c] for f in fields) / 3
                expected += weights.w[i, j] * mean ** 2
    assert centrality_loss(fields, 1.0, weights) == pytest.approx(expected, rel=1e-12)


def test_total_loss_zero_at_atlas(atlas):
    loss = total_loss(subjects_like(atlas), atlas, Hyperparams())
    assert loss.total == 0.0
    assert set(loss.terms) == set(TERMS)


def test_total_loss_breakdown_sums(atlas, rng):
    batch = subjects_like(atlas, 3)
    for record in batch:
        record.geom += 0.1 * rng.standard_normal(record.geom.shape)
        record.v_j = random_velocity(atlas.grid, rng, 1.0, 3.0)
        record.v_g = random_velocity(atlas.grid, rng, 0.3, 3.0)
    loss = total_loss(batch, atlas, Hyperparams())
    assert loss.total >= 0
    assert sum(loss.terms.values()) == pytest.approx(loss.total, abs=1e-10)


def test_total_loss_without_func(atlas, rng):
    record = subjects_like(atlas, 1)[0]
    record.geom += 0.2 * rng.standard_normal(record.geom.shape)
    record.v_j = random_velocity(atlas.grid, rng, 1.0, 3.0)
    with_func = total_loss([record], atlas, Hyperparams())
    without = total_loss([replace(record, func=None)], atlas, Hyperparams())
    assert without.terms["func"] == 0.0
    assert np.isfinite(without.total)
    assert without.terms["geom"] == with_func.terms["geom"]


def test_total_loss_empty_batch(atlas):
    with pytest.raises(EmptyBatchError):
        total_loss([], atlas, Hyperparams())


def test_augment_is_deterministic(atlas):
    record = subjects_like(atlas, 1)[0]
    hp = Hyperparams(sigma_aug_deform=2.0, aug_smooth_px=3.0)
    a = augment(record, 11, hp)
    b = augment(record, 11, hp)
    np.testing.assert_array_equal(a.geom, b.geom)
    np.testing.assert_array_equal(a.func, b.func)
    assert not np.array_equal(a.geom, record.geom)


def test_augment_without_noise_or_deformation(atlas):
    record = subjects_like(atlas, 1)[0]
    hp = Hyperparams(sigma_aug_deform=0.0, sigma_noise_geom=0.0, sigma_noise_func=0.0)
    out = augment(record, 3, hp)
    np.testing.assert_array_equal(out.geom, record.geom)
    np.testing.assert_array_equal(out.func, record.func)


def test_augment_displacement_scale():
    grid = make_grid(128, 256)
    weights = area_weights(grid)
    hp = Hyperparams()
    v = random_velocity(
        grid, np.random.default_rng(0), hp.sigma_aug_deform, hp.aug_smooth_px, physical=True
    )
    u = to_physical(integrate(v).u, grid)
    rms = np.sqrt(np.sum(weights.w[..., None] * u ** 2) / (2 * weights.w.sum()))
    assert rms == pytest.approx(4.0, rel=0.1)


@pytest.mark.parametrize("sigma", [0.5, 1.0])
def test_marginal_likelihood_variance(sigma):
    report = verify_marginal_likelihood(sigma, 10000, 0)
    assert report.expected_variance == pytest.approx(2 * sigma ** 2)
    assert report.relative_error < 0.05


def test_marginal_likelihood_with_joint_field():
    grid = make_grid(4, 8)
    v = np.zeros(grid.shape + (2,))
    v[..., 1] = 0.4
    phi_j = integrate(VelocityField(v, grid))
    assert verify_marginal_likelihood(1.0, 10000, 1, grid, phi_j).relative_error < 0.05


def test_marginal_likelihood_preconditions():
    with pytest.raises(ValueError):
        verify_marginal_likelihood(0.0, 10000, 0)
    with pytest.raises(ValueError):
        verify_marginal_likelihood(1.0, 10, 0)


@slow
def test_marginal_likelihood_converges():
    report = verify_marginal_likelihood(1.0, 1000000, 2)
    assert report.relative_error < 0.005

