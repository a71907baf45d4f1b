import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone

from conftest import linear_model, tiny_model
from xpose.attack import (
    VARIANTS,
    AttackConfig,
    TransferAttack,
    _gather,
    _GradientOracle,
    _l1_normalize,
    _momentum_loop,
    _scatter,
    craft,
    diversity_indices,
    ensemble_gradient,
    gaussian_kernel,
    initial_momentum,
    smooth_gradient,
)
from xpose.bench import success_rate
from xpose.exceptions import NumericError
from xpose.graph import backward_to_input

# independent evaluation of exp(-(i^2 + j^2) / (2 sigma^2)), sigma = 7/3,
# normalised; one quadrant starting at the centre
KERNEL7_QUADRANT = [
    [0.03867731355, 0.03528353697, 0.02678672091, 0.01692382856],
    [0.03528353697, 0.03218755045, 0.02443629535, 0.0154388316],
    [0.02678672091, 0.02443629535, 0.0185516612, 0.01172092451],
    [0.01692382856, 0.0154388316, 0.01172092451, 0.007405270605],
]


def two_class_linear(seed=0, shape=(4, 4, 1)):
    d = int(np.prod(shape))
    w = np.random.default_rng(seed).normal(size=(d, 2))
    model = linear_model(w, shape=shape)
    weight = dict(model.named_parameters())["fc.weight"]
    direction = (weight[:, 1] - weight[:, 0]).reshape(shape)
    return model, direction


def batch(seed=0, n=3, shape=(4, 4, 1)):
    return np.random.default_rng(seed).uniform(0.2, 0.8, (n, *shape)).astype(np.float32)


def oracle_for(model, labels, cfg, seed=0):
    return _GradientOracle([model], labels, cfg, np.random.default_rng(seed))


def test_paper_defaults():
    cfg = AttackConfig()
    assert cfg.epsilon == 16 / 255 and cfg.iters == 10 and cfg.momentum == 1.0
    assert (cfg.diversity_prob, cfg.kernel_size, cfg.n_copies) == (0.5, 7, 5)
    assert (cfg.n_samples, cfg.balance, cfg.neighborhood) == (20, 0.5, 3.0)
    assert (cfg.pre_iters, cfg.global_factor) == (5, 10)
    assert cfg.alpha == pytest.approx(1.6 / 255)
    cifar = AttackConfig(epsilon=4 / 255, iters=10)
    assert cifar.alpha * 255 == pytest.approx(0.4)


def test_config_validation():
    with pytest.raises(ValueError):
        AttackConfig(variant="FGSM")
    with pytest.raises(ValueError):
        AttackConfig(kernel_size=4)
    with pytest.raises(ValueError):
        AttackConfig(epsilon=1.5)
    with pytest.raises(ValueError):
        gaussian_kernel(6)
    assert AttackConfig(variant="IFGSM").effective_momentum == 0.0


def test_linear_single_step_matches_analytic_update():
    model, d = two_class_linear()
    x = batch()
    y = np.zeros(3, dtype=int)
    cfg = AttackConfig(variant="IFGSM", epsilon=0.1, iters=1)
    expected = np.clip(x + np.float32(0.1) * np.sign(d), 0, 1)
    assert craft(model, x, y, cfg).tobytes() == expected.tobytes()


def test_zero_budget_returns_clean_images():
    model, _ = two_class_linear()
    x = batch()
    for v in VARIANTS:
        out = craft(model, x, np.zeros(3, int), AttackConfig(variant=v, epsilon=0, n_samples=2))
        assert out.tobytes() == x.tobytes(), v


def test_constant_gradient_walks_a_straight_ray():
    model, d = two_class_linear(1)
    x = batch(1)
    eps = 0.05
    cfg = AttackConfig(epsilon=eps, iters=10, step_size=eps / 3)
    expected = np.clip(x + np.float32(eps) * np.sign(d), 0, 1)
    assert craft(model, x, np.zeros(3, int), cfg).tobytes() == expected.tobytes()


def test_ray_is_linear_before_the_ball_clips():
    model, d = two_class_linear(2)
    x = batch(2)
    cfg = AttackConfig(epsilon=0.2, iters=3, step_size=0.01)
    out = craft(model, x, np.zeros(3, int), cfg)
    np.testing.assert_allclose(out - x, 0.03 * np.sign(d) * np.ones_like(x), atol=1e-6)


def test_zero_gradient_is_left_unchanged_by_normalisation():
    g = np.zeros((2, 3, 3, 1), np.float32)
    g[1, 0, 0, 0] = 4
    out = _l1_normalize(g)
    assert not out[0].any() and out[1, 0, 0, 0] == 1


def test_non_finite_gradient_names_iteration():
    model = tiny_model()
    model.set_parameter("fc.weight", np.full_like(dict(model.named_parameters())["fc.weight"], np.nan))
    with pytest.raises(NumericError, match="iteration 0"):
        craft(model, np.full((1, 8, 8, 2), 0.5, np.float32), np.array([0]), AttackConfig())


def test_dim_with_p_zero_is_plain_gradient():
    model = tiny_model()
    x = batch(0, 2, (8, 8, 2))
    y = np.array([0, 1])
    g = oracle_for(model, y, AttackConfig(variant="DIM", diversity_prob=0))(x)
    assert g.tobytes() == backward_to_input(model, x, y).tobytes()


def test_dim_draws_stay_in_range_for_s32():
    rng = np.random.default_rng(0)
    seen = set()
    for _ in range(500):
        rows, cols, r = diversity_indices((32, 32), rng)
        seen.add(r)
        assert rows.shape == (32,) and cols.shape == (32,)
        assert rows.max() < 32 and cols.max() < 32
    assert seen == {32, 33, 34, 35, 36}
    x = np.random.default_rng(1).uniform(size=(2, 32, 32, 3)).astype(np.float32)
    assert _gather(x, rows, cols).shape == x.shape


def test_dim_identity_draw_reproduces_input():
    x = np.random.default_rng(1).uniform(size=(1, 16, 16, 1)).astype(np.float32)
    ident = np.arange(16)
    assert _gather(x, ident, ident).tobytes() == x.tobytes()


def test_dim_scatter_is_adjoint_of_gather():
    rng = np.random.default_rng(2)
    rows, cols, _ = diversity_indices((20, 20), rng)
    x = rng.normal(size=(2, 20, 20, 3))
    g = rng.normal(size=(2, 20, 20, 3))
    lhs = (_gather(x, rows, cols) * g).sum()
    rhs = (x * _scatter(g, rows, cols, x.shape)).sum()
    assert lhs == pytest.approx(rhs)


def test_dim_seed_determinism():
    model = tiny_model()
    x = batch(3, 4, (8, 8, 2))
    y = np.array([0, 1, 2, 0])
    cfg = AttackConfig(variant="DIM", diversity_prob=1.0)
    a, b = craft(model, x, y, cfg), craft(model, x, y, cfg)
    assert a.tobytes() == b.tobytes()
    assert craft(model, x, y, cfg.replace(seed=1)).tobytes() != a.tobytes()


def test_gaussian_kernel_properties_and_values():
    k = gaussian_kernel(7)
    assert k.sum() == pytest.approx(1.0)
    np.testing.assert_allclose(k, k.T)
    np.testing.assert_allclose(k, k[::-1, ::-1])
    assert k[3, 3] == k.max()
    np.testing.assert_allclose(k[3:, 3:], KERNEL7_QUADRANT, rtol=1e-9)
    assert gaussian_kernel(1).tolist() == [[1.0]]


def test_tim_k1_leaves_gradient_unchanged():
    g = np.random.default_rng(0).normal(size=(2, 6, 6, 3)).astype(np.float32)
    assert smooth_gradient(g, 1).tobytes() == g.tobytes()


def test_tim_smoothing_matches_direct_convolution():
    g = np.random.default_rng(0).normal(size=(1, 9, 9, 2))
    k = gaussian_kernel(5)
    out = smooth_gradient(g, 5)
    padded = np.pad(g, ((0, 0), (2, 2), (2, 2), (0, 0)))
    for i, j, c in [(0, 0, 0), (4, 4, 1), (8, 3, 0)]:
        window = padded[0, i : i + 5, j : j + 5, c]
        assert out[0, i, j, c] == pytest.approx((window * k[::-1, ::-1]).sum())


def test_sim_single_copy_is_plain_gradient():
    model = tiny_model()
    x = batch(0, 2, (8, 8, 2))
    y = np.array([0, 1])
    g = oracle_for(model, y, AttackConfig(variant="SIM", n_copies=1))(x)
    assert g.tobytes() == backward_to_input(model, x, y).tobytes()


def test_sim_on_linear_model_keeps_the_sign_pattern():
    model, _ = two_class_linear()
    x = batch()
    y = np.array([0, 1, 0])
    sim = oracle_for(model, y, AttackConfig(variant="SIM"))(x)
    plain = backward_to_input(model, x, y)
    assert np.array_equal(np.sign(sim), np.sign(plain))


def test_sim_matches_brute_force_copies():
    model = tiny_model(1).astype(np.float64)
    x = batch(1, 2, (8, 8, 2)).astype(np.float64)
    y = np.array([2, 0])
    got = oracle_for(model, y, AttackConfig(variant="SIM", n_copies=5))(x)
    # d/dx L(x / 2^i) = 2^-i * grad L evaluated at the scaled copy
    expected = sum(backward_to_input(model, x / 2**i, y) / 2**i for i in range(5)) / 5
    np.testing.assert_allclose(got, expected, rtol=1e-12)


def test_pgn_collapse_is_plain_gradient():
    model = tiny_model()
    x = batch(0, 2, (8, 8, 2))
    y = np.array([0, 1])
    cfg = AttackConfig(variant="PGN", balance=0, n_samples=1, neighborhood=0)
    assert oracle_for(model, y, cfg)(x).tobytes() == backward_to_input(model, x, y).tobytes()


def test_pgn_matches_brute_force_accumulation():
    model = tiny_model(2).astype(np.float64)
    x = batch(2, 2, (8, 8, 2)).astype(np.float64)
    y = np.array([1, 2])
    cfg = AttackConfig(variant="PGN", epsilon=8 / 255)
    got = oracle_for(model, y, cfg, seed=9)(x)
    rng = np.random.default_rng(9)
    bound = 3.0 * 8 / 255
    total = 0
    for _ in range(20):
        near = x + rng.uniform(-bound, bound, x.shape)
        g1 = backward_to_input(model, near, y)
        ahead = near - cfg.alpha * g1 / np.abs(g1).sum(axis=(1, 2, 3), keepdims=True)
        total = total + 0.5 * g1 + 0.5 * backward_to_input(model, ahead, y)
    np.testing.assert_allclose(got, total / 20, rtol=1e-9, atol=1e-12)


def test_pgn_seed_determinism():
    model = tiny_model()
    x = batch(4, 2, (8, 8, 2))
    y = np.array([0, 2])
    cfg = AttackConfig(variant="PGN", n_samples=3, iters=3)
    assert craft(model, x, y, cfg).tobytes() == craft(model, x, y, cfg).tobytes()


def test_gi_without_preconvergence_is_mifgsm():
    model = tiny_model()
    x = batch(0, 2, (8, 8, 2))
    y = np.array([0, 1])
    a = craft(model, x, y, AttackConfig(variant="GIFGSM", pre_iters=0))
    assert a.tobytes() == craft(model, x, y, AttackConfig()).tobytes()


def test_gi_momentum_on_linear_model():
    model, d = two_class_linear(3)
    x = batch(3)
    y = np.zeros(3, dtype=int)
    cfg = AttackConfig(variant="GIFGSM", pre_iters=10, iters=10, global_factor=1)
    g0 = initial_momentum(oracle_for(model, y, cfg.replace(variant="MIFGSM")), x, cfg)
    _, g_main = _momentum_loop(oracle_for(model, y, cfg.replace(variant="MIFGSM")), x, np.zeros_like(x), 10, cfg.alpha, cfg, "attack")
    np.testing.assert_allclose(g0, g_main, rtol=1e-6)
    unit = np.sign(d) * np.abs(d) / np.abs(d).sum()
    np.testing.assert_allclose(g0, 10 * np.broadcast_to(unit, x.shape), rtol=1e-4)


def test_gi_respects_the_budget():
    model = tiny_model()
    x = batch(5, 3, (8, 8, 2))
    cfg = AttackConfig(variant="GIFGSM", epsilon=4 / 255)
    out = craft(model, x, np.array([0, 1, 2]), cfg)
    assert np.abs(out - x).max() <= 4 / 255 + 1e-6


def test_ensemble_of_one_and_of_twins():
    model = tiny_model(1)
    x = batch(1, 2, (8, 8, 2))
    y = np.array([1, 0])
    single = backward_to_input(model, x, y)
    assert ensemble_gradient([model], x, y).tobytes() == single.tobytes()
    np.testing.assert_allclose(ensemble_gradient([model, model.copy()], x, y), single, rtol=1e-5, atol=1e-9)


def test_two_linear_models_use_the_mean_weights():
    rng = np.random.default_rng(0)
    w1, w2 = rng.normal(size=(16, 3)), rng.normal(size=(16, 3))
    m1, m2 = linear_model(w1).astype(np.float64), linear_model(w2).astype(np.float64)
    mean = linear_model((w1 + w2) / 2).astype(np.float64)
    mean.set_parameter("fc.weight", (dict(m1.named_parameters())["fc.weight"] + dict(m2.named_parameters())["fc.weight"]) / 2)
    x = batch(0, 2).astype(np.float64)
    y = np.array([0, 2])
    np.testing.assert_allclose(ensemble_gradient([m1, m2], x, y), backward_to_input(mean, x, y), rtol=1e-10)


def test_ensemble_members_must_share_input_spec():
    with pytest.raises(ValueError):
        ensemble_gradient([tiny_model(), tiny_model(size=12)], batch(0, 1, (8, 8, 2)), np.array([0]))


def test_ifgsm_potency_is_monotone_in_budget(quick_model, shapes_data):
    x, y = shapes_data.X_test[:64], shapes_data.y_test[:64]
    rates = [success_rate(quick_model, craft(quick_model, x, y, AttackConfig(variant="IFGSM", epsilon=e / 255)), y) for e in (2, 4, 8, 16)]
    assert rates == sorted(rates)
    assert rates[-1] > rates[0]


def test_transfer_attack_estimator(quick_model, shapes_data):
    x, y = shapes_data.X_test[:8], shapes_data.y_test[:8]
    est = TransferAttack(source=quick_model, variant="TIM", epsilon=4 / 255)
    assert clone(est).get_params()["variant"] == "TIM"
    out = est.fit_transform(x, y)
    cfg = AttackConfig(variant="TIM", epsilon=4 / 255)
    assert out.tobytes() == craft(quick_model, x, y, cfg).tobytes()
    with pytest.raises(ValueError):
        est.transform(x)


@settings(max_examples=30, deadline=None)
@given(
    variant=st.sampled_from(VARIANTS),
    eps=st.sampled_from([2, 4, 8, 16]),
    seed=st.integers(0, 1000),
    ensemble=st.booleans(),
)
def test_epsilon_ball_and_range(variant, eps, seed, ensemble):
    models = [tiny_model(seed % 5), tiny_model(seed % 5 + 1)] if ensemble else tiny_model(seed % 5)
    rng = np.random.default_rng(seed)
    x = rng.choice([0.0, 1.0, 0.5], size=(3, 8, 8, 2)).astype(np.float32)
    y = rng.integers(0, 3, 3)
    cfg = AttackConfig(variant=variant, epsilon=eps / 255, iters=3, n_samples=2, n_copies=2, seed=seed)
    out = craft(models, x, y, cfg)
    assert out.dtype == np.float32 and out.shape == x.shape
    assert np.abs(out - x).max() <= eps / 255 + 1e-6
    assert out.min() >= 0 and out.max() <= 1
