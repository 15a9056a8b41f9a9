import numpy as np
import pytest

from mixunlearn import tensor as T
from mixunlearn.losses import (
    ConfigError,
    LossConfig,
    contrastive_value,
    loss_gen,
    loss_mix,
    loss_real,
    loss_unlearn,
    sharpen,
    sim_loss,
    target_distribution,
)
from mixunlearn.models import MLPClassifier, mlp_arch
from mixunlearn.tensor import Tensor

from helpers import check_grads


def rand_dists(rng, n, k):
    return rng.dirichlet(np.ones(k), size=n)


# --------------------------------------------------------------- sharpen


def test_sharpen_uniform_fixed_point():
    q = np.full(5, 0.2)
    for t in (0.1, 0.3, 1.0):
        assert np.allclose(sharpen(q, t), q, atol=1e-15)


def test_sharpen_onehot_fixed_point():
    q = np.array([0.0, 1.0, 0.0])
    for t in (0.05, 0.5, 1.0):
        assert np.array_equal(sharpen(q, t), q)


def test_sharpen_hand_value():
    got = sharpen(np.array([0.8, 0.2]), 0.5)
    assert got[0] == pytest.approx(0.64 / 0.68, abs=1e-12)
    assert got[1] == pytest.approx(0.04 / 0.68, abs=1e-12)


def test_sharpen_zeros_stay_zero_and_errors():
    out = sharpen(np.array([0.0, 0.3, 0.7]), 0.5)
    assert out[0] == 0.0 and out.sum() == pytest.approx(1.0)
    with pytest.raises(ValueError):
        sharpen(np.zeros(3), 0.5)
    with pytest.raises(ValueError):
        sharpen(np.array([0.5, 0.5]), 0.0)
    with pytest.raises(ValueError):
        sharpen(np.array([-0.1, 1.1]), 0.5)


def test_sharpen_preserves_argmax_and_batches():
    rng = np.random.default_rng(0)
    q = rand_dists(rng, 1000, 6)
    out = sharpen(q, 0.3)
    assert np.array_equal(out.argmax(axis=-1), q.argmax(axis=-1))
    assert np.allclose(out.sum(axis=-1), 1.0, atol=1e-12)


def test_sharpen_t_one_is_identity():
    rng = np.random.default_rng(1)
    q = rand_dists(rng, 10, 4)
    assert np.allclose(sharpen(q, 1.0), q, atol=1e-12)


# ----------------------------------------------------- target distribution


def test_target_aware_onehot():
    model = MLPClassifier(mlp_arch(3, [4], 4), seed=0)
    cfg = LossConfig(label_mode="aware")
    out = target_distribution(model, np.zeros((1, 3)), np.array([2]), cfg)
    assert np.array_equal(out, [[0.0, 0.0, 1.0, 0.0]])


def test_target_aware_needs_labels():
    model = MLPClassifier(mlp_arch(3, [4], 4), seed=0)
    with pytest.raises(ConfigError):
        target_distribution(model, np.zeros((1, 3)), None, LossConfig(label_mode="aware"))


def test_target_agnostic_uniform_stays_uniform():
    model = MLPClassifier(mlp_arch(3, [4], 4), seed=0)
    model.weights[-1].data[:] = 0.0
    model.biases[-1].data[:] = 0.0
    out = target_distribution(model, np.zeros((2, 3)), None, LossConfig(label_mode="agnostic"))
    assert np.allclose(out, 0.25, atol=1e-12)


def test_target_agnostic_matches_sharpen_oracle():
    # model rigged to output (0.8, 0.2); expected value recomputed from the
    # sharpening definition directly (q**(1/T) normalized), T = 0.3
    model = MLPClassifier(mlp_arch(2, [2], 2), seed=0)
    model.weights[-1].data[:] = 0.0
    model.biases[-1].data[:] = np.log([0.8, 0.2])
    x = np.zeros((1, 2))
    out = target_distribution(model, x, None, LossConfig(label_mode="agnostic", sharpen_t=0.3))
    a, b = 0.8 ** (1 / 0.3), 0.2 ** (1 / 0.3)
    assert out[0, 0] == pytest.approx(a / (a + b), abs=1e-9)
    assert out[0, 1] == pytest.approx(b / (a + b), abs=1e-9)


def test_target_sharpen_disabled_returns_raw_probs():
    model = MLPClassifier(mlp_arch(2, [2], 2), seed=0)
    model.weights[-1].data[:] = 0.0
    model.biases[-1].data[:] = np.log([0.8, 0.2])
    cfg = LossConfig(label_mode="agnostic", sharpen_enabled=False)
    out = target_distribution(model, np.zeros((1, 2)), None, cfg)
    assert np.allclose(out, [[0.8, 0.2]], atol=1e-12)


# ---------------------------------------------------------------- sim loss


def test_sim_loss_endpoints():
    v = np.array([0.3, 0.7])
    assert sim_loss(Tensor(v), v).item() == pytest.approx(0.0, abs=1e-9)
    assert sim_loss(Tensor([1.0, 0.0]), np.array([0.0, 1.0])).item() == pytest.approx(1.0, abs=1e-12)
    assert sim_loss(Tensor([1.0, -1.0]), np.array([-1.0, 1.0])).item() == pytest.approx(2.0, abs=1e-9)


# ------------------------------------------------------- contrastive losses


def _sim(a, b):
    return 1.0 - np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b))


def test_batch_one_closed_forms():
    rng = np.random.default_rng(2)
    cfg = LossConfig(tau_gen=0.37, tau_mix=4.2, tau_real=2.5)
    for _ in range(25):
        probs = rand_dists(rng, 1, 5)
        p_i, p_j = rand_dists(rng, 1, 5), rand_dists(rng, 1, 5)
        lam = rng.uniform(0.05, 0.95, size=1)
        s_j = _sim(probs[0], p_j[0])
        s_i = _sim(probs[0], p_i[0])
        want_mix = (1 - lam[0]) * s_j - lam[0] * s_i / cfg.tau_mix
        want_gen = -((1 - lam[0]) * s_j - lam[0] * s_i / cfg.tau_gen)
        assert loss_mix(Tensor(probs), p_i, p_j, lam, cfg).item() == pytest.approx(want_mix, abs=1e-10)
        assert loss_gen(Tensor(probs), p_i, p_j, lam, cfg).item() == pytest.approx(want_gen, abs=1e-10)
        out_i, out_j = rand_dists(rng, 1, 5), rand_dists(rng, 1, 5)
        got = loss_real(Tensor(out_i), Tensor(out_j), p_i, p_j, cfg).item()
        want = _sim(out_j[0], p_j[0]) - _sim(out_i[0], p_i[0]) / cfg.tau_real
        assert got == pytest.approx(want, abs=1e-10)


def test_sign_duality():
    rng = np.random.default_rng(3)
    for _ in range(50):
        n = rng.integers(1, 9)
        cfg = LossConfig(tau_gen=3.3, tau_mix=3.3)
        probs = rand_dists(rng, n, 4)
        p_i, p_j = rand_dists(rng, n, 4), rand_dists(rng, n, 4)
        lam = rng.uniform(0.01, 0.99, size=n)
        lg = loss_gen(Tensor(probs), p_i, p_j, lam, cfg).item()
        lm = loss_mix(Tensor(probs), p_i, p_j, lam, cfg).item()
        assert lg == pytest.approx(-lm, abs=1e-12)


def test_lambda_zero_collapses_to_log_batch_size():
    rng = np.random.default_rng(4)
    n = 6
    cfg = LossConfig()
    probs = rand_dists(rng, n, 4)
    p_i, p_j = rand_dists(rng, n, 4), rand_dists(rng, n, 4)
    lam = np.zeros(n)
    sims_j = np.array([_sim(probs[k], p_j[k]) for k in range(n)])
    want = -(sims_j.sum() - n * np.log(n))  # per pair: -Sim_j + log n
    assert loss_gen(Tensor(probs), p_i, p_j, lam, cfg).item() == pytest.approx(want, abs=1e-10)


def test_loss_real_antiparallel_endpoint():
    cfg = LossConfig(tau_real=2.5)
    p_i = np.array([[1.0, -1.0]])  # target antiparallel to the model output
    out_i = np.array([[-1.0, 1.0]])
    p_j = np.array([[0.6, 0.4]])
    out_j = p_j.copy()
    got = loss_real(Tensor(out_i), Tensor(out_j), p_i, p_j, cfg).item()
    assert got == pytest.approx(0.0 - 2.0 / cfg.tau_real, abs=1e-9)


def test_losses_finite_on_random_inputs():
    rng = np.random.default_rng(5)
    cfg = LossConfig()
    for _ in range(20):
        n = rng.integers(1, 12)
        probs = rand_dists(rng, n, 7)
        p_i, p_j = rand_dists(rng, n, 7), rand_dists(rng, n, 7)
        lam = rng.uniform(0, 1, size=n)
        for fn in (loss_gen, loss_mix):
            assert np.isfinite(fn(Tensor(probs), p_i, p_j, lam, cfg).item())
        assert np.isfinite(loss_real(Tensor(probs), Tensor(probs), p_i, p_j, cfg).item())


def test_empty_batch_rejected():
    cfg = LossConfig()
    empty = np.zeros((0, 4))
    with pytest.raises(ValueError):
        loss_mix(Tensor(empty), empty, empty, np.zeros(0), cfg)
    with pytest.raises(ValueError):
        loss_real(Tensor(empty), Tensor(empty), empty, empty, cfg)


def test_loss_unlearn_arithmetic():
    assert loss_unlearn(Tensor(2.0), Tensor(3.0), 1.0).item() == pytest.approx(5.0)
    assert loss_unlearn(Tensor(2.0), Tensor(3.0), 0.0).item() == pytest.approx(2.0)
    with pytest.raises(ConfigError):
        loss_unlearn(Tensor(1.0), Tensor(1.0), -0.5)


def test_loss_unlearn_gradient_is_weighted_sum():
    rng = np.random.default_rng(6)
    model = MLPClassifier(mlp_arch(4, [6], 3), seed=0)
    x_i, x_j = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    x_m = rng.normal(size=(3, 4))
    p_i, p_j = rand_dists(rng, 3, 3), rand_dists(rng, 3, 3)
    lam = rng.uniform(0.1, 0.9, 3)
    cfg = LossConfig()
    omega = 1.7

    def grads_of(builder):
        for p in model.params:
            p.grad = None
        builder().backward()
        return [None if p.grad is None else p.grad.copy() for p in model.params]

    g_mix = grads_of(lambda: loss_mix(model.forward(x_m), p_i, p_j, lam, cfg))
    g_real = grads_of(lambda: loss_real(model.forward(x_i), model.forward(x_j), p_i, p_j, cfg))
    g_total = grads_of(
        lambda: loss_unlearn(
            loss_mix(model.forward(x_m), p_i, p_j, lam, cfg),
            loss_real(model.forward(x_i), model.forward(x_j), p_i, p_j, cfg),
            omega,
        )
    )
    for gm, gr, gt in zip(g_mix, g_real, g_total):
        assert np.allclose(gt, gm + omega * gr, atol=1e-12)


def test_loss_gradients_match_finite_differences_smoke():
    rng = np.random.default_rng(8)
    model = MLPClassifier(mlp_arch(4, [6], 3), seed=1)
    x_m = rng.normal(size=(3, 4))
    p_i, p_j = rand_dists(rng, 3, 3), rand_dists(rng, 3, 3)
    lam = rng.uniform(0.1, 0.9, 3)
    cfg = LossConfig()
    check_grads(lambda: loss_mix(model.forward(x_m), p_i, p_j, lam, cfg), model.params)


def test_contrastive_value_matches_tensor_path():
    rng = np.random.default_rng(9)
    n = 5
    probs = rand_dists(rng, n, 4)
    p_i, p_j = rand_dists(rng, n, 4), rand_dists(rng, n, 4)
    lam = rng.uniform(0.1, 0.9, n)
    cfg = LossConfig(tau_gen=0.8)
    sims_j = np.array([_sim(probs[k], p_j[k]) for k in range(n)])
    sims_i = np.array([_sim(probs[k], p_i[k]) for k in range(n)])
    via_value = contrastive_value(sims_j, sims_i, lam, cfg.tau_gen, sign=-1.0)
    via_tensor = loss_gen(Tensor(probs), p_i, p_j, lam, cfg).item()
    assert via_value == pytest.approx(via_tensor, abs=1e-9)


def test_config_validation():
    for bad in (
        LossConfig(tau_gen=0.0),
        LossConfig(tau_mix=-1.0),
        LossConfig(tau_real=0.0),
        LossConfig(omega=-0.1),
        LossConfig(sharpen_t=0.0),
        LossConfig(sharpen_t=1.5),
        LossConfig(label_mode="psychic"),
    ):
        with pytest.raises(ConfigError):
            bad.validate()
