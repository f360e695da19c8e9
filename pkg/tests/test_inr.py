import numpy as np
import pytest

from tissue_manifold import inr
from tissue_manifold.errors import ConfigurationError, InputError, NumericError
from tissue_manifold.normalization import NormStats

from conftest import random_model, with_zero_head


def naive_energy(model, u):
    """Straight-line re-implementation of the composition, one point at a time."""
    p, w0 = model.params, model.meta.omega0
    z = 2.0 * np.pi * (p.B @ u)
    h = np.concatenate([np.sin(z), np.cos(z)])
    for W, b in zip(p.Ws, p.bs):
        h = np.sin(w0 * (W @ h + b))
    return float(p.head_W[0] @ h + p.head_b[0])


# ---------------------------------------------------------------- encoding

def test_encode_origin():
    B = np.random.default_rng(0).normal(size=(7, 3))
    np.testing.assert_array_equal(inr.encode(np.zeros(3), B), [0.0] * 7 + [1.0] * 7)


def test_encode_half_period():
    np.testing.assert_allclose(inr.encode(np.array([1.0]), np.array([[0.5]])), [0.0, -1.0],
                               atol=1e-15)


def test_encode_lattice_periodicity():
    rng = np.random.default_rng(1)
    B = rng.normal(size=(3, 3))
    k = np.array([2.0, -1.0, 3.0])
    v = np.linalg.solve(B, k)           # B v is an integer vector
    u = rng.normal(size=3)
    np.testing.assert_allclose(inr.encode(u + v, B), inr.encode(u, B), atol=1e-12)


def test_encode_dimension_mismatch():
    with pytest.raises(ConfigurationError):
        inr.encode(np.zeros(4), np.zeros((3, 5)))


# ------------------------------------------------------------------ energy

def test_zero_head_gives_bias(small_model, rng):
    model = with_zero_head(small_model, bias=0.75)
    assert inr.energy(model, rng.normal(size=5)) == 0.75
    np.testing.assert_array_equal(inr.score(model, rng.normal(size=(4, 5))), 0.0)
    assert inr.laplacian(model, rng.normal(size=5)) == 0.0


def test_energy_deterministic(small_model, rng):
    u = rng.normal(size=5)
    assert inr.energy(small_model, u) == inr.energy(small_model, u)


def test_energy_matches_naive_forward(rng):
    for seed in range(5):
        model = random_model(seed, omega0=1.7)
        for u in rng.normal(size=(10, 5)):
            assert inr.energy(model, u) == pytest.approx(naive_energy(model, u), rel=1e-13,
                                                         abs=1e-14)


def test_activations_bounded(small_model, rng):
    for h in inr.activations(small_model, 10.0 * rng.normal(size=(200, 5))):
        assert np.all(np.abs(h) <= 1.0)


def test_nonfinite_input_rejected(small_model):
    u = np.zeros((3, 5))
    u[1, 2] = np.nan
    with pytest.raises(InputError, match="row 1"):
        inr.energy(small_model, u)


def test_wrong_dimension_rejected(small_model):
    with pytest.raises(ConfigurationError):
        inr.energy(small_model, np.zeros(4))


# ------------------------------------------------------------- derivatives

def test_score_matches_central_differences(rng):
    h = 1e-5
    for seed in range(10):
        model = random_model(seed)
        u = rng.normal(size=5)
        s = inr.score(model, u)
        fd = np.array([(inr.energy(model, u + h * e) - inr.energy(model, u - h * e)) / (2 * h)
                       for e in np.eye(5)])
        assert np.linalg.norm(s + fd) / np.linalg.norm(fd) < 1e-6


def test_directional_derivative(rng):
    h = 1e-5
    model = random_model(3)
    for _ in range(10):
        u, v = rng.normal(size=5), rng.normal(size=5)
        fd = (inr.energy(model, u + h * v) - inr.energy(model, u - h * v)) / (2 * h)
        exact = -inr.score(model, u) @ v
        assert abs(exact - fd) / abs(fd) < 1e-6


def test_laplacian_is_sum_of_axis_second_derivatives(rng):
    h = 1e-4
    model = random_model(4)
    u = rng.normal(size=5)
    E0 = inr.energy(model, u)
    per_axis = []
    for e in np.eye(5):
        exact = inr.second_derivative(model, u, e)
        fd = (inr.energy(model, u + h * e) - 2 * E0 + inr.energy(model, u - h * e)) / h**2
        assert abs(exact - fd) <= 1e-5 * max(abs(fd), 1e-3)
        per_axis.append(exact)
    assert inr.laplacian(model, u) == pytest.approx(sum(per_axis), rel=1e-14)


def test_raw_coordinates_apply_chain_rule(rng):
    norm = NormStats(np.array([1.0, -2.0, 0.5, 3.0, 0.0]), np.array([2.0, 0.5, 1.0, 4.0, 3.0]))
    model = random_model(5).with_meta(norm=norm)
    x = rng.normal(size=5) * 2 + 1
    u = norm.apply(x)
    assert inr.energy(model, x, raw=True) == inr.energy(model, u)
    h = 1e-5
    fd = np.array([(inr.energy(model, x + h * e, raw=True)
                    - inr.energy(model, x - h * e, raw=True)) / (2 * h) for e in np.eye(5)])
    np.testing.assert_allclose(-inr.score(model, x, raw=True), fd, rtol=1e-6)
    E0 = inr.energy(model, x, raw=True)
    h2 = 1e-4
    lap_fd = sum((inr.energy(model, x + h2 * e, raw=True) - 2 * E0
                  + inr.energy(model, x - h2 * e, raw=True)) / h2**2 for e in np.eye(5))
    assert inr.laplacian(model, x, raw=True) == pytest.approx(lap_fd, rel=1e-4)


# ------------------------------------------------------------------- batch

def test_batch_of_one_is_bitwise_single(small_model, rng):
    u = rng.normal(size=5)
    ev = inr.energy_batch(small_model, u[None], energy=True, score=True, laplacian=True)
    assert ev.energy[0] == inr.energy(small_model, u)
    np.testing.assert_array_equal(ev.score[0], inr.score(small_model, u))
    assert ev.laplacian[0] == inr.laplacian(small_model, u)


def test_batch_equals_loop_bitwise(small_model, rng):
    U = rng.normal(size=(700, 5))   # spans more than one evaluation block
    ev = inr.energy_batch(small_model, U, energy=True, score=True, laplacian=True)
    loop_E = np.array([inr.energy(small_model, u) for u in U])
    loop_S = np.array([inr.score(small_model, u) for u in U])
    loop_L = np.array([inr.laplacian(small_model, u) for u in U[:50]])
    np.testing.assert_array_equal(ev.energy, loop_E)
    np.testing.assert_array_equal(ev.score, loop_S)
    np.testing.assert_array_equal(ev.laplacian[:50], loop_L)


def test_batch_permutation_equivariance(small_model, rng):
    U = rng.normal(size=(300, 5))
    perm = rng.permutation(300)
    a = inr.energy_batch(small_model, U, score=True, laplacian=True)
    b = inr.energy_batch(small_model, U[perm], score=True, laplacian=True)
    np.testing.assert_array_equal(a.energy[perm], b.energy)
    np.testing.assert_array_equal(a.score[perm], b.score)
    np.testing.assert_array_equal(a.laplacian[perm], b.laplacian)


# --------------------------------------------------------------------- DSM

def test_constant_model_loss_oracle():
    # E||eps||^2 / sigma^4 = d sigma^2 / sigma^4 = d / sigma^2 = 500
    model = with_zero_head(inr.init_model(m=8, widths=(8,), seed=0))
    rng = np.random.default_rng(7)
    noise = rng.normal(0.0, 0.1, size=(100_000, 5))
    loss = inr.dsm_loss(model, np.zeros_like(noise), noise, 0.1)
    assert loss == pytest.approx(500.0, rel=0.02)


def test_loss_nonnegative_and_duplication_invariant(small_model, rng):
    clean, noise = rng.normal(size=(1, 5)), 0.1 * rng.normal(size=(1, 5))
    single = inr.dsm_loss(small_model, clean, noise, 0.1)
    assert single >= 0
    dup = inr.dsm_loss(small_model, np.repeat(clean, 4, 0), np.repeat(noise, 4, 0), 0.1)
    assert dup == pytest.approx(single, rel=1e-14)


def test_dsm_rejects_bad_inputs(small_model):
    with pytest.raises(ConfigurationError):
        inr.dsm_loss(small_model, np.zeros((2, 5)), np.zeros((2, 5)), 0.0)
    with pytest.raises(ConfigurationError):
        inr.dsm_loss(small_model, np.zeros((2, 5)), np.zeros((3, 5)), 0.1)


def test_dsm_reports_offending_row(small_model):
    noise = np.zeros((3, 5))
    noise[2, 0] = np.inf
    with pytest.raises(NumericError) as err:
        inr.dsm_loss(small_model, np.zeros((3, 5)), noise, 0.1)
    assert err.value.row == 2


def _param_fd_check(model, clean, noise, sigma, idx, h=1e-6):
    theta = model.params.flat()
    shapes = model.params.shapes()
    grad = inr.loss_param_gradient(model, clean, noise, sigma)
    errs = []
    for i in idx:
        tp, tm = theta.copy(), theta.copy()
        tp[i] += h
        tm[i] -= h
        lp = inr.dsm_loss(model.with_params(inr.Params.from_flat(tp, shapes)), clean, noise, sigma)
        lm = inr.dsm_loss(model.with_params(inr.Params.from_flat(tm, shapes)), clean, noise, sigma)
        fd = (lp - lm) / (2 * h)
        errs.append(abs(grad[i] - fd) / max(abs(fd), 1e-6))
    return max(errs)


def test_parameter_gradient_matches_finite_differences(rng):
    model = random_model(0, d=2, m=4, widths=(8,), freq_std=1.0, head_scale=0.5)
    clean = rng.normal(size=(16, 2))
    noise = 0.3 * rng.normal(size=(16, 2))
    idx = rng.choice(model.params.size, size=50, replace=False)
    assert _param_fd_check(model, clean, noise, 0.3, idx) < 1e-4


def test_parameter_gradient_covers_every_block(rng):
    model = random_model(1, d=2, m=3, widths=(4, 4), head_scale=0.5)
    clean, noise = rng.normal(size=(8, 2)), 0.2 * rng.normal(size=(8, 2))
    # first and last index of every parameter block
    idx, offset = [], 0
    for shape in model.params.shapes():
        size = int(np.prod(shape))
        idx += [offset, offset + size - 1]
        offset += size
    assert _param_fd_check(model, clean, noise, 0.2, idx) < 1e-4


def test_parameter_gradient_mean_properties(small_model, rng):
    clean, noise = rng.normal(size=(2, 5)), 0.1 * rng.normal(size=(2, 5))
    g2 = inr.loss_param_gradient(small_model, clean, noise, 0.1)
    g_a = inr.loss_param_gradient(small_model, clean[:1], noise[:1], 0.1)
    g_b = inr.loss_param_gradient(small_model, clean[1:], noise[1:], 0.1)
    np.testing.assert_allclose(g2, 0.5 * (g_a + g_b), rtol=1e-10, atol=1e-12)
    gd = inr.loss_param_gradient(small_model, np.repeat(clean, 2, 0), np.repeat(noise, 2, 0), 0.1)
    np.testing.assert_allclose(gd, g2, rtol=1e-12, atol=1e-14)


def test_flat_round_trip(small_model):
    p = small_model.params
    q = inr.Params.from_flat(p.flat(), p.shapes())
    for a, b in zip(p.arrays(), q.arrays()):
        np.testing.assert_array_equal(a, b)
    assert p.size == p.flat().size
