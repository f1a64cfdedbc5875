import numpy as np
import pytest

from josa.deform import (
    DeformationField,
    Flow,
    NonFiniteError,
    VelocityField,
    compose,
    compose_adjoint,
    integrate,
    invert,
    jacobian_negative_fraction,
    longitude_scale,
    random_velocity,
    smooth_on_sphere,
    spatial_gradient,
    spatial_gradient_adjoint,
    to_physical,
    warp,
    warp_adjoint,
)
from josa.sphere_grid import ShapeMismatchError, area_weights, make_grid

from .fixtures import *  # noqa


def smooth_velocity(grid, seed, max_norm=2.0, sigma=8.0):
    noise = np.random.default_rng(seed).standard_normal(grid.shape + (2,))
    v = smooth_on_sphere(noise, sigma, vector=True)
    v *= max_norm / np.abs(v).max()
    return VelocityField(v, grid)


def constant_field(grid, rows=0.0, cols=0.0):
    u = np.zeros(grid.shape + (2,))
    u[..., 0] = rows
    u[..., 1] = cols
    return DeformationField(u, grid)


def test_integrate_zero_is_identity(grid):
    phi = integrate(VelocityField.zeros(grid))
    assert np.all(phi.u == 0)
    np.testing.assert_array_equal(invert(VelocityField.zeros(grid)).u, phi.u)


def test_integrate_constant_longitude_velocity(grid):
    v = np.zeros(grid.shape + (2,))
    v[..., 1] = 0.3
    phi = integrate(VelocityField(v, grid))
    np.testing.assert_allclose(phi.u[..., 1], 0.3, atol=1e-12)
    np.testing.assert_allclose(phi.u[..., 0], 0.0, atol=1e-12)
    np.testing.assert_allclose(invert(VelocityField(v, grid)).u[..., 1], -0.3, atol=1e-12)


def test_integrate_rejects_non_finite(grid):
    v = np.zeros(grid.shape + (2,))
    v[2, 3, 0] = np.nan
    with pytest.raises(NonFiniteError):
        integrate(VelocityField(v, grid))
    with pytest.raises(ValueError):
        Flow(VelocityField.zeros(grid), steps=0)


def test_inverse_consistency():
    grid = make_grid(64, 128)
    v = smooth_velocity(grid, 0, max_norm=2.0)
    residual = compose(integrate(v), invert(v))
    assert residual.max_displacement() < 0.1
    residual = compose(invert(v), integrate(v))
    assert residual.max_displacement() < 0.1


@pytest.mark.parametrize("seed", [10, 11, 12])
def test_inverse_consistency_near_poles(seed):
    grid = make_grid(64, 128)
    v = smooth_velocity(grid, seed, max_norm=2.0)
    residual = np.linalg.norm(compose(integrate(v), invert(v)).u, axis=-1)
    assert residual[:4].max() < 0.1
    assert residual[-4:].max() < 0.1


def test_double_inverse_matches_forward():
    grid = make_grid(64, 128)
    v = smooth_velocity(grid, 1)
    twice = invert(-v)
    assert np.abs(twice.u - integrate(v).u).max() < 0.05


def test_step_convergence():
    grid = make_grid(64, 128)
    v = smooth_velocity(grid, 2, max_norm=1.0, sigma=12.0)
    assert np.abs(integrate(v, 7).u - integrate(v, 9).u).max() < 1e-3


def test_warp_identity_exact(atlas, grid):
    identity = DeformationField.identity(grid)
    np.testing.assert_array_equal(warp(atlas.geom, identity), atlas.geom)


def test_warp_integer_longitude_shift(grid, rng):
    image = rng.standard_normal(grid.shape)
    shifted = warp(image, constant_field(grid, cols=3))
    np.testing.assert_allclose(shifted, np.roll(image, -3, axis=1))


def test_warp_bilinear_midpoint():
    grid = make_grid(4, 8)
    image = np.zeros(grid.shape)
    image[0, 0], image[0, 1], image[1, 0], image[1, 1] = 0, 1, 2, 3
    out = warp(image, constant_field(grid, rows=0.5, cols=0.5))
    assert out[0, 0] == pytest.approx(1.5)


def test_warp_across_pole_shifts_half_turn(grid, rng):
    image = rng.standard_normal(grid.shape)
    out = warp(image, constant_field(grid, rows=-1))
    half = grid.width // 2
    np.testing.assert_allclose(out[0], np.roll(image[0], -half))
    out = warp(image, constant_field(grid, rows=1))
    np.testing.assert_allclose(out[-1], np.roll(image[-1], -half))


def test_warp_shape_mismatch(grid):
    with pytest.raises(ShapeMismatchError):
        warp(np.zeros((3, 3)), DeformationField.identity(grid))


def test_compose_identity_laws(grid):
    phi = integrate(smooth_velocity(grid, 3, max_norm=1.0, sigma=3.0))
    identity = DeformationField.identity(grid)
    np.testing.assert_allclose(compose(identity, phi).u, phi.u)
    np.testing.assert_allclose(compose(phi, identity).u, phi.u)


def test_compose_constant_shifts(grid):
    out = compose(constant_field(grid, cols=1.25), constant_field(grid, cols=0.5))
    np.testing.assert_allclose(out.u[..., 1], 1.75)


def test_compose_matches_sequential_warps():
    grid = make_grid(64, 128)
    a = integrate(smooth_velocity(grid, 4, max_norm=2.0))
    b = integrate(smooth_velocity(grid, 5, max_norm=2.0))
    theta = grid.theta[:, None]
    phi = grid.phi[None, :]
    image = np.cos(2 * theta) + np.sin(theta) * np.cos(phi)
    composed = warp(image, compose(a, b))
    sequential = warp(warp(image, a), b)
    assert np.abs(composed - sequential).max() < 1e-2


def test_compose_across_pole_negates_row_component(grid, rng):
    outer = DeformationField(0.3 * rng.standard_normal(grid.shape + (2,)), grid)
    half = grid.width // 2
    out = compose(outer, constant_field(grid, rows=-1)).u
    np.testing.assert_allclose(out[0, :, 0], -1 - np.roll(outer.u[0, :, 0], -half))
    np.testing.assert_allclose(out[0, :, 1], np.roll(outer.u[0, :, 1], -half))
    out = compose(outer, constant_field(grid, rows=1)).u
    np.testing.assert_allclose(out[-1, :, 0], 1 - np.roll(outer.u[-1, :, 0], -half))
    np.testing.assert_allclose(out[:-1, :, 0], 1 + outer.u[1:, :, 0])
    np.testing.assert_allclose(out[:-1, :, 1], outer.u[1:, :, 1])


@pytest.mark.parametrize("rows", [-0.7, 0.6])
def test_compose_adjoint_dot_product_across_pole(grid, rng, rows):
    outer = DeformationField(rng.standard_normal(grid.shape + (2,)), grid)
    inner = constant_field(grid, rows=rows, cols=0.4)
    grad_u = rng.standard_normal(grid.shape + (2,))
    grad_outer, _ = compose_adjoint(outer, inner, grad_u)
    sampled = compose(outer, inner).u - inner.u
    assert np.sum(sampled * grad_u) == pytest.approx(
        np.sum(outer.u * grad_outer), rel=1e-10
    )


def test_compose_grid_mismatch(grid, small_grid):
    with pytest.raises(ShapeMismatchError):
        compose(DeformationField.identity(grid), DeformationField.identity(small_grid))


def test_spatial_gradient_constant_and_ramp(grid):
    assert np.all(spatial_gradient(np.full(grid.shape, 2.5)) == 0)
    ramp = np.tile(0.7 * np.arange(grid.width, dtype=float), (grid.height, 1))
    g = spatial_gradient(ramp)
    np.testing.assert_allclose(g[:, 1:-1, 1], 0.7)
    np.testing.assert_allclose(g[..., 0], 0.0)


def test_spatial_gradient_matches_loop(grid, rng):
    f = rng.standard_normal(grid.shape)
    h, w = grid.shape
    expected = np.zeros(grid.shape + (2,))
    for i in range(h):
        for j in range(w):
            if i == 0:
                expected[i, j, 0] = f[1, j] - f[0, j]
            elif i == h - 1:
                expected[i, j, 0] = f[h - 1, j] - f[h - 2, j]
            else:
                expected[i, j, 0] = (f[i + 1, j] - f[i - 1, j]) / 2
            expected[i, j, 1] = (f[i, (j + 1) % w] - f[i, (j - 1) % w]) / 2
    np.testing.assert_array_equal(spatial_gradient(f), expected)


def test_spatial_gradient_adjoint_dot_product(grid, rng):
    f = rng.standard_normal(grid.shape + (2,))
    g = rng.standard_normal(grid.shape + (2, 2))
    lhs = np.sum(spatial_gradient(f) * g)
    rhs = np.sum(f * spatial_gradient_adjoint(g))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_warp_adjoint_image_dot_product(grid, rng):
    image = rng.standard_normal(grid.shape + (2,))
    grad_out = rng.standard_normal(grid.shape + (2,))
    phi = integrate(smooth_velocity(grid, 6, max_norm=1.5, sigma=3.0))
    grad_image, _ = warp_adjoint(image, phi, grad_out)
    assert np.sum(warp(image, phi) * grad_out) == pytest.approx(
        np.sum(image * grad_image), rel=1e-10
    )


def test_flow_backward_matches_finite_differences(small_grid):
    rng = np.random.default_rng(5)
    v = rng.uniform(0.15, 0.35, small_grid.shape + (2,))
    weight = rng.standard_normal(small_grid.shape + (2,))

    def loss(values):
        return np.sum(weight * integrate(VelocityField(values, small_grid)).u)

    analytic = Flow(VelocityField(v, small_grid)).backward(weight)
    h = 1e-5
    for index in [(0, 0, 0), (3, 5, 1), (7, 15, 0), (4, 9, 1)]:
        plus = v.copy()
        minus = v.copy()
        plus[index] += h
        minus[index] -= h
        fd = (loss(plus) - loss(minus)) / (2 * h)
        assert analytic[index] == pytest.approx(fd, rel=1e-4, abs=1e-7)


def test_flow_backward_matches_finite_differences_across_pole(small_grid):
    rng = np.random.default_rng(6)
    v = np.empty(small_grid.shape + (2,))
    v[..., 0] = rng.uniform(-0.35, -0.15, small_grid.shape)
    v[..., 1] = rng.uniform(0.15, 0.35, small_grid.shape)
    weight = rng.standard_normal(small_grid.shape + (2,))

    def loss(values):
        return np.sum(weight * integrate(VelocityField(values, small_grid)).u)

    analytic = Flow(VelocityField(v, small_grid)).backward(weight)
    h = 1e-5
    for index in [(0, 0, 0), (0, 3, 1), (0, 11, 0), (1, 6, 0)]:
        plus = v.copy()
        minus = v.copy()
        plus[index] += h
        minus[index] -= h
        fd = (loss(plus) - loss(minus)) / (2 * h)
        assert analytic[index] == pytest.approx(fd, rel=1e-4, abs=1e-7)


def test_jacobian_identity_and_rotation(grid):
    assert jacobian_negative_fraction(DeformationField.identity(grid)) == 0.0
    phi = integrate(smooth_velocity(grid, 7, max_norm=4.0, sigma=2.0))
    rotated = DeformationField(np.roll(phi.u, 5, axis=1), grid)
    assert jacobian_negative_fraction(rotated) == jacobian_negative_fraction(phi)


def test_jacobian_detects_fold(grid):
    u = np.zeros(grid.shape + (2,))
    u[:, 5, 1] = 3.0
    u[:, 7, 1] = -3.0
    assert jacobian_negative_fraction(DeformationField(u, grid)) > 0


def test_random_velocity_calibrated_rms(grid):
    weights = area_weights(grid)
    v = random_velocity(grid, np.random.default_rng(0), 1.5, 3.0)
    u = integrate(v).u
    rms = np.sqrt(np.sum(weights.w[..., None] * u ** 2) / (2 * weights.w.sum()))
    assert rms == pytest.approx(1.5, rel=0.05)
    assert np.all(random_velocity(grid, np.random.default_rng(0), 0.0, 3.0).v == 0)


def test_smooth_on_sphere_vector_reverses_across_poles():
    grid = make_grid(32, 64)
    field = np.ones(grid.shape + (2,))
    out = smooth_on_sphere(field, 2.0, vector=True)
    np.testing.assert_allclose(out[..., 1], 1.0)
    np.testing.assert_allclose(out[grid.height // 2, :, 0], 1.0, atol=1e-6)
    assert np.all(np.abs(out[0, :, 0]) < 0.5)
    assert np.all(np.abs(out[-1, :, 0]) < 0.5)
    np.testing.assert_allclose(smooth_on_sphere(np.full(grid.shape, 2.0), 3.0), 2.0)


def test_smooth_on_sphere_is_continuous_across_poles(rng):
    grid = make_grid(32, 64)
    out = smooth_on_sphere(rng.standard_normal(grid.shape), 3.0)
    half = grid.width // 2
    # Row 0 and its antipodal meridian are neighbours across the pole.
    across = np.abs(out[0] - np.roll(out[0], -half)).mean()
    along = np.abs(out[0] - out[1]).mean()
    assert across < 2 * along


def test_random_velocity_physical_stretches_longitude():
    grid = make_grid(64, 128)
    flat = random_velocity(grid, np.random.default_rng(3), 2.0, 4.0)
    physical = random_velocity(grid, np.random.default_rng(3), 2.0, 4.0, physical=True)
    # Both draws share their noise; they differ by a global factor and by
    # the 1/sin(θ) stretch of the longitude component.
    k = np.sum(physical.v[..., 0] * flat.v[..., 0]) / np.sum(flat.v[..., 0] ** 2)
    np.testing.assert_allclose(physical.v[..., 0], k * flat.v[..., 0], rtol=1e-10)
    scale = longitude_scale(grid)[:, None]
    np.testing.assert_allclose(
        physical.v[..., 1] * scale, k * flat.v[..., 1], rtol=1e-10, atol=1e-12
    )


def test_random_velocity_physical_displacement_per_row():
    grid = make_grid(64, 128)
    weights = area_weights(grid)
    v = random_velocity(grid, np.random.default_rng(4), 2.0, 4.0, physical=True)
    u = integrate(v).u
    phys = to_physical(u, grid)
    rms = np.sqrt(np.sum(weights.w[..., None] * phys ** 2) / (2 * weights.w.sum()))
    assert rms == pytest.approx(2.0, rel=0.1)

    def band_rms(component, rows):
        return np.sqrt(np.mean(component[rows] ** 2))

    polar = np.r_[0:6, grid.height - 6 : grid.height]
    equator = np.arange(grid.height // 2 - 6, grid.height // 2 + 6)
    # On the grid, longitude steps grow toward the poles...
    assert band_rms(u[..., 1], polar) > 2 * band_rms(u[..., 1], equator)
    # ...while the physical displacement stays of the same order.
    ratio = band_rms(phys[..., 1], polar) / band_rms(phys[..., 1], equator)
    assert 0.4 < ratio < 2.5
