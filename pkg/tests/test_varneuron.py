"""Variational units: KL oracles, control law, AR prior, bank wiring."""
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import erf, expit

from varlm.tensor import RngStream, Tensor
from varlm.varneuron import (
    ControlState, LatentDistributionPair, UnitBank, ar_loss, control_penalty,
    homeostat_update, kl_diag_gauss, latent_energy, sample_latent,
)

RNG = np.random.default_rng(4)


def pair_from(mu_q, sigma_q, mu_p, sigma_p):
    return LatentDistributionPair(*(Tensor(np.asarray(a, dtype=float))
                                    for a in (mu_q, sigma_q, mu_p, sigma_p)))


def kl_reference(mq, sq, mp, sp):
    """Closed-form diagonal-Gaussian KL, summed over the last axis."""
    return 0.5 * (2 * np.log(sp / sq) + (sq**2 + (mq - mp)**2) / sp**2 - 1).sum(-1)


# ------------------------------------------------------------------------- KL

def test_kl_standard_cases():
    assert kl_diag_gauss(pair_from([0.0], [1.0], [0.0], [1.0])).item() == pytest.approx(0.0, abs=1e-15)
    # unit mean shift at unit variance costs exactly 1/2 nat
    assert kl_diag_gauss(pair_from([1.0], [1.0], [0.0], [1.0])).item() == pytest.approx(0.5, abs=1e-12)


def test_kl_matches_closed_form():
    mq, mp = RNG.standard_normal((2, 40, 6)) * 2
    sq, sp = np.exp(RNG.standard_normal((2, 40, 6)))
    got = kl_diag_gauss(pair_from(mq, sq, mp, sp)).data
    assert np.allclose(got, kl_reference(mq, sq, mp, sp), atol=1e-10, rtol=0)


def test_kl_identical_pair_is_zero():
    m = RNG.standard_normal((30, 4))
    s = np.exp(RNG.standard_normal((30, 4)))
    assert np.abs(kl_diag_gauss(pair_from(m, s, m, s)).data).max() < 1e-12


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6))
def test_kl_nonnegative_property(seed):
    r = np.random.default_rng(seed)
    mq, mp = r.standard_normal((2, 16, 3)) * 5
    sq, sp = np.exp(r.standard_normal((2, 16, 3)) * 2)
    assert kl_diag_gauss(pair_from(mq, sq, mp, sp)).data.min() >= -1e-12


def test_kl_gradient_vs_fd():
    mq0 = RNG.standard_normal(5)
    sq0, sp0 = np.exp(RNG.standard_normal((2, 5)) * 0.3)
    mp0 = RNG.standard_normal(5)

    def loss(arr):
        return kl_diag_gauss(pair_from(arr, sq0, mp0, sp0)).item()

    t = Tensor(mq0, requires_grad=True)
    kl_diag_gauss(LatentDistributionPair(t, Tensor(sq0), Tensor(mp0), Tensor(sp0))).backward()
    for i in range(5):
        e = np.zeros(5)
        e[i] = 1e-6
        num = (loss(mq0 + e) - loss(mq0 - e)) / 2e-6
        assert t.grad[i] == pytest.approx(num, rel=1e-6, abs=1e-9)


# --------------------------------------------------------------- latent energy

def test_latent_energy_values():
    assert latent_energy(Tensor(np.array([3.0, 4.0]))).item() == pytest.approx(12.5)
    assert latent_energy(Tensor(np.zeros((4, 7)))).data == pytest.approx(np.zeros(4))
    x = RNG.standard_normal((3, 5, 8))
    assert np.allclose(latent_energy(Tensor(x)).data, (x**2).mean(-1))


# --------------------------------------------------------------------- control

def test_control_penalty_zero_inside_band():
    st_ = ControlState(mu2_target=0.15, band_halfwidth=0.10, gain=2.0)
    mu2 = Tensor(np.array([0.05, 0.10, 0.15, 0.25]))
    assert control_penalty(mu2, st_).item() == 0.0
    assert st_.inside_band_fraction == 1.0


def test_control_penalty_hinge_values():
    st_ = ControlState(mu2_target=0.15, band_halfwidth=0.10, gain=3.0)
    # 0.30 is 0.05 above the upper edge, 0.01 is 0.04 below the lower edge
    val = control_penalty(Tensor(np.array([0.30, 0.01])), st_).item()
    assert val == pytest.approx(3.0 * (0.05**2 + 0.04**2) / 2, rel=1e-12)
    assert st_.frac_too_high == 0.5 and st_.frac_too_low == 0.5


def test_control_fractions_sum_to_one():
    st_ = ControlState()
    for _ in range(5):
        control_penalty(Tensor(RNG.uniform(0, 0.5, size=(6, 9))), st_)
    total = st_.inside_band_fraction + st_.frac_too_low + st_.frac_too_high
    assert total == pytest.approx(1.0, abs=1e-9)


def test_control_penalty_gradient():
    st_ = ControlState(gain=1.7)
    x0 = RNG.uniform(0, 0.5, size=8)

    def loss(arr):
        return control_penalty(Tensor(arr), ControlState(gain=1.7)).item()

    t = Tensor(x0, requires_grad=True)
    control_penalty(t, st_).backward()
    for i in range(8):
        e = np.zeros(8)
        e[i] = 1e-7
        num = (loss(x0 + e) - loss(x0 - e)) / 2e-7
        assert t.grad[i] == pytest.approx(num, rel=1e-5, abs=1e-10)


def test_control_disabled_returns_zero_but_tracks():
    st_ = ControlState(enabled=False)
    out = control_penalty(Tensor(np.full(10, 0.9)), st_)
    assert out.item() == 0.0
    assert st_.frac_too_high == 1.0


def test_homeostat_doubles_at_log2_eta():
    st_ = ControlState(mu2_target=0.2, eta=math.log(2.0), gain=1.0)
    homeostat_update(st_, window_mean=0.4)   # mean = 2 * target
    assert st_.gain == pytest.approx(2.0, rel=1e-12)


def test_homeostat_direction_and_clamp():
    st_ = ControlState(mu2_target=0.15, eta=0.05, gain=1.0)
    homeostat_update(st_, window_mean=0.05)
    assert st_.gain < 1.0
    st_.gain = 9.99
    for _ in range(200):
        homeostat_update(st_, window_mean=10.0)
    assert st_.gain == pytest.approx(st_.gain_max)
    st_.gain = st_.gain_min * 1.01
    for _ in range(200):
        homeostat_update(st_, window_mean=0.0)
    assert st_.gain == pytest.approx(st_.gain_min)


def test_homeostat_uses_window_accumulator_and_resets():
    st_ = ControlState(mu2_target=0.1, eta=1.0, gain=1.0)
    st_.observe(np.array([0.1, 0.3]))   # window mean 0.2 -> gain *= e
    homeostat_update(st_)
    assert st_.gain == pytest.approx(math.e, rel=1e-12)
    assert st_.window_mean() is None


# -------------------------------------------------------------------- sampling

def test_sample_latent_mean_path():
    p = pair_from(RNG.standard_normal((3, 4)), np.full((3, 4), 0.5),
                  np.zeros((3, 4)), np.ones((3, 4)))
    z = sample_latent(p, None)
    assert np.array_equal(z.data, p.mu_q.data)


def test_sample_latent_reparameterization():
    mu = RNG.standard_normal((5, 3))
    sg = np.exp(RNG.standard_normal((5, 3)))
    p = pair_from(mu, sg, np.zeros_like(mu), np.ones_like(mu))
    z = sample_latent(p, RngStream(77)).data
    eps = RngStream(77).normal((5, 3))
    assert np.allclose(z, mu + sg * eps, atol=1e-15)


# -------------------------------------------------------------------- AR prior

def test_ar_prior_step_gate_limits():
    bank = UnitBank(d_in=3, d_z=2, d_out=3, n_units=2, rng=RngStream(0), ar_memory=True)
    prev = Tensor(RNG.standard_normal((2, 1, 2)))
    z = Tensor(RNG.standard_normal((2, 1, 2)))
    bank.gate_raw.data[:] = 40.0    # gate -> 1: identity on the previous mean
    out = bank.ar_prior_step(prev, z).data
    assert np.allclose(out, prev.data, atol=1e-12)
    bank.gate_raw.data[:] = -40.0   # gate -> 0: pure input map
    out = bank.ar_prior_step(prev, z).data
    want = np.einsum("uij,ujk->uik", z.data, bank.W_ar.data)
    assert np.allclose(out, want, atol=1e-12)


def test_ar_loss_values():
    mu_q = Tensor(RNG.standard_normal((2, 5, 3)))
    assert ar_loss(mu_q, mu_q).item() == pytest.approx(0.0, abs=1e-15)
    delta = 0.37
    shifted = Tensor(mu_q.data + delta)
    assert ar_loss(shifted, mu_q).item() == pytest.approx(delta**2, rel=1e-12)
    with pytest.raises(ValueError):
        ar_loss(Tensor(np.zeros((2, 5, 3))), Tensor(np.zeros((2, 4, 3))))
    assert ar_loss(Tensor(np.zeros((2, 1, 3))), Tensor(np.zeros((2, 1, 3)))).item() == 0.0


def test_ar_loss_gradient_only_reaches_prior_side():
    mu_p = Tensor(RNG.standard_normal((1, 4, 2)), requires_grad=True)
    mu_q = Tensor(RNG.standard_normal((1, 4, 2)), requires_grad=True)
    ar_loss(mu_p, mu_q).backward()
    assert mu_p.grad is not None
    assert mu_q.grad is None


# ------------------------------------------------------------------- unit bank

def softplus_np(x):
    return np.logaddexp(0.0, x)


def gelu_np(x):
    return x * 0.5 * (1.0 + erf(x / math.sqrt(2.0)))


def test_bank_shapes_and_sigma_floor():
    bank = UnitBank(d_in=6, d_z=3, d_out=5, n_units=4, rng=RngStream(1))
    u = Tensor(RNG.standard_normal((7, 6)))
    res = bank.forward(u, rng=RngStream(2))
    assert res.activations.shape == (7, 20)
    assert res.mu2.shape == (4, 7)
    assert res.kl_mean.shape == ()
    assert res.kl_mean.item() >= 0.0
    assert res.pair.sigma_q.data.min() >= bank.sigma_min
    assert res.pair.sigma_p.data.min() >= bank.sigma_min
    assert res.ar is None
    assert res.stats.kl_per_dim.shape == (4, 3)


def test_bank_fresh_prior_is_standard_softplus_bias():
    bank = UnitBank(d_in=4, d_z=2, d_out=4, n_units=3, rng=RngStream(5))
    res = bank.forward(Tensor(RNG.standard_normal((5, 4))), rng=None)
    # zero memory and zero prior bias: mu_p = 0, sigma_p = softplus(0) + sigma_min
    assert np.abs(res.pair.mu_p.data).max() == 0.0
    assert res.pair.sigma_p.data == pytest.approx(
        np.full((3, 5, 2), math.log(2.0) + bank.sigma_min), abs=1e-12)


def test_bank_mean_path_consumes_no_draws():
    bank = UnitBank(d_in=4, d_z=2, d_out=3, n_units=2, rng=RngStream(5))
    res = bank.forward(Tensor(RNG.standard_normal((6, 4))), rng=None)
    assert np.array_equal(res.pair.mu_q.data, res.pair.mu_q.data)
    r = RngStream(9)
    bank.forward(Tensor(RNG.standard_normal((6, 4))), rng=None)
    assert r.draws == 0


def test_bank_forward_matches_numpy_replay():
    """Independent numpy replay of the static bank, including sampling."""
    bank = UnitBank(d_in=5, d_z=3, d_out=4, n_units=2, rng=RngStream(31))
    x = RNG.standard_normal((6, 5))
    res = bank.forward(Tensor(x), rng=RngStream(99))

    eps = RngStream(99).normal((2, 6, 3))
    raw_q = np.einsum("ti,uio->uto", x, bank.W_qx.data) + bank.b_q.data
    mu_q, sq = raw_q[..., :3], softplus_np(raw_q[..., 3:]) + bank.sigma_min
    z = mu_q + sq * eps
    y = gelu_np(np.einsum("utj,ujo->uto", z, bank.W_dec.data) + bank.b_dec.data)
    flat = y.transpose(1, 0, 2).reshape(6, 8)
    assert np.allclose(res.activations.data, flat, atol=1e-12)
    sp = softplus_np(bank.b_p.data[..., 3:]) + bank.sigma_min
    kl = kl_reference(mu_q, sq, np.zeros_like(mu_q), np.broadcast_to(sp, mu_q.shape))
    assert res.kl_mean.item() == pytest.approx(kl.mean(), rel=1e-12)
    assert np.allclose(res.mu2.data, (mu_q**2).mean(-1), atol=1e-14)


def test_bank_ar_forward_matches_numpy_replay():
    """Step-by-step replay of the AR recurrence and its losses."""
    bank = UnitBank(d_in=4, d_z=2, d_out=3, n_units=3, rng=RngStream(8), ar_memory=True)
    # nudge the AR params off their neutral init so the recurrence does something
    bank.gate_raw.data[:] = 0.3
    bank.W_ar.data[:] = RNG.standard_normal(bank.W_ar.shape) * 0.5
    x = RNG.standard_normal((5, 4))
    res = bank.forward(Tensor(x), rng=RngStream(12))

    r = RngStream(12)
    state = np.zeros((3, 1, 2))
    gate = expit(bank.gate_raw.data)
    mu_qs, mu_ps, zs = [], [], []
    for t in range(5):
        raw = np.einsum("i,uio->uo", x[t], bank.W_qx.data)[:, None, :] + bank.b_q.data \
            + np.einsum("utj,ujo->uto", state, bank.W_qh.data)
        mu_q, sq = raw[..., :2], softplus_np(raw[..., 2:]) + bank.sigma_min
        z = mu_q + sq * r.normal((3, 1, 2))
        mu_qs.append(mu_q)
        mu_ps.append(state)
        zs.append(z)
        state = gate * state + (1 - gate) * np.einsum("utj,ujk->utk", z, bank.W_ar.data)
    mu_q = np.concatenate(mu_qs, axis=1)
    mu_p = np.concatenate(mu_ps, axis=1)
    assert np.allclose(res.pair.mu_q.data, mu_q, atol=1e-12)
    assert np.allclose(res.pair.mu_p.data, mu_p, atol=1e-12)
    want_ar = ((mu_p[:, 1:] - mu_q[:, 1:])**2).mean()
    assert res.ar.item() == pytest.approx(want_ar, rel=1e-10)


def test_bank_gradients_vs_fd_static():
    """Full-bank finite-difference check, AR memory off (no detach sites)."""
    bank = UnitBank(d_in=3, d_z=2, d_out=3, n_units=2, rng=RngStream(3))
    x = RNG.standard_normal((4, 3))
    w = RNG.standard_normal((4, 6))
    cs = ControlState(mu2_target=0.15, band_halfwidth=0.0, gain=1.0)  # always active

    def run(rng_seed=55):
        res = bank.forward(Tensor(x), rng=RngStream(rng_seed))
        pen = control_penalty(res.mu2, ControlState(mu2_target=0.15, band_halfwidth=0.0))
        return (res.activations * Tensor(w)).sum() + res.kl_mean + pen

    loss = run()
    loss.backward()
    for name, p in bank.parameters():
        g = p.grad
        assert g is not None, name
        flat = p.data.ravel()
        for i in RNG.choice(flat.size, size=min(flat.size, 4), replace=False):
            keep = flat[i]
            flat[i] = keep + 1e-5
            up = run().item()
            flat[i] = keep - 1e-5
            dn = run().item()
            flat[i] = keep
            num = (up - dn) / 2e-5
            assert g.ravel()[i] == pytest.approx(num, rel=2e-4, abs=1e-7), name


def test_bank_ar_param_gradients_vs_fd():
    """FD check for the AR parameters with the posterior memory coupling zeroed.

    With W_qh = 0 the sampled latents are independent of the AR state, so the
    stop-gradients in the recurrence are inactive and central differences are
    exact for gate_raw and W_ar.
    """
    bank = UnitBank(d_in=3, d_z=2, d_out=3, n_units=2, rng=RngStream(21), ar_memory=True)
    bank.W_qh.data[:] = 0.0
    bank.gate_raw.data[:] = 0.2
    bank.W_ar.data[:] = RNG.standard_normal(bank.W_ar.shape) * 0.4
    x = RNG.standard_normal((5, 3))

    def run():
        res = bank.forward(Tensor(x), rng=RngStream(14))
        return res.kl_mean + res.ar * 0.7

    run().backward()
    for name in ("gate_raw", "W_ar"):
        p = getattr(bank, name)
        g = p.grad
        assert g is not None, name
        flat = p.data.ravel()
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + 1e-5
            up = run().item()
            flat[i] = keep - 1e-5
            dn = run().item()
            flat[i] = keep
            num = (up - dn) / 2e-5
            assert g.ravel()[i] == pytest.approx(num, rel=2e-4, abs=1e-8), name


def test_bank_param_count_and_registry():
    bank = UnitBank(d_in=4, d_z=2, d_out=5, n_units=3, rng=RngStream(2))
    names = [n for n, _ in bank.parameters()]
    assert names == ["W_qx", "b_q", "W_p", "b_p", "W_dec", "b_dec"]
    want = 3 * (4 * 4 + 4 + 2 * 4 + 4 + 2 * 5 + 5)
    assert bank.param_count() == want
    ar = UnitBank(d_in=4, d_z=2, d_out=5, n_units=3, rng=RngStream(2), ar_memory=True)
    assert ar.param_count() == want + 3 * (2 * 4 + 2 + 2 * 2)


def test_bank_rejects_bad_config():
    with pytest.raises(ValueError):
        UnitBank(d_in=0, d_z=2, d_out=2, n_units=1, rng=RngStream(0))
    with pytest.raises(ValueError):
        UnitBank(d_in=2, d_z=2, d_out=2, n_units=1, rng=RngStream(0), ar_sigma=True)
