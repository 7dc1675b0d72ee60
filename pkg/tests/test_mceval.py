"""MC prediction metrics against brute-force and hand-computed oracles."""
import json
import math

import numpy as np
import pytest

from varlm.data import make_windows, synthetic_corpus, training_arrays
from varlm.mceval import (
    McPrediction, MetricsReport, conditional_variance_mc, cvar_nll, ece,
    epistemic_ratio, evaluate, latent_usage, mc_forward, merge_bank_stats,
    mutual_information, nll_mc, top1_flip_rate, top1_variance_mc,
)
from varlm.model import Model, ModelConfig
from varlm.objective import TrainSettings, Trainer
from varlm.tensor import RngStream
from varlm.varneuron import BankStats

RNG = np.random.default_rng(90)


def random_pred(m=4, n=20, v=6, seed=0):
    r = np.random.default_rng(seed)
    logits = r.standard_normal((m, n, v)) * 2
    e = np.exp(logits - logits.max(-1, keepdims=True))
    probs = e / e.sum(-1, keepdims=True)
    return McPrediction(probs=probs, targets=r.integers(0, v, size=n))


def onehot_pred(rows, targets):
    """(1, N, V) McPrediction with the given deterministic rows."""
    probs = np.asarray(rows, dtype=float)[None]
    return McPrediction(probs=probs, targets=np.asarray(targets))


def tiny_cfg(**kw):
    base = dict(vocab_size=258, d_model=8, n_layers=2, n_heads=2, d_z=2,
                n_units=4, window_length=16)
    base.update(kw)
    return ModelConfig(**base)


# ---------------------------------------------------------------- McPrediction

def test_mcprediction_mean_is_sample_mean():
    p = random_pred(m=5)
    assert np.abs(p.mean_probs - p.probs.mean(0)).max() < 1e-9
    assert np.abs(p.probs.sum(-1) - 1).max() < 1e-6


def test_mcprediction_validation():
    with pytest.raises(ValueError):
        McPrediction(probs=np.ones((3, 4)), targets=np.zeros(4, dtype=int))
    with pytest.raises(ValueError):
        McPrediction(probs=np.ones((2, 4, 3)) / 3, targets=np.zeros(5, dtype=int))


# ---------------------------------------------------------------------- nll_mc

def test_nll_certain_and_uniform():
    eye = np.eye(4)
    assert nll_mc(onehot_pred(eye, [0, 1, 2, 3])) == pytest.approx(0.0, abs=1e-9)
    uni = np.full((6, 5), 0.2)
    assert nll_mc(onehot_pred(uni, [0, 4, 2, 1, 3, 0])) == pytest.approx(math.log(5), abs=1e-12)


def test_nll_direct_oracle():
    p = random_pred(seed=3)
    want = -np.log(p.mean_probs[np.arange(20), p.targets]).mean()
    assert nll_mc(p) == pytest.approx(want, rel=1e-12)


# ------------------------------------------------------------------------- ece

def test_ece_perfectly_confident():
    eye = np.eye(3)[[0, 1, 2, 0]]
    assert ece(onehot_pred(eye, [0, 1, 2, 0])) == pytest.approx(0.0, abs=1e-12)
    assert ece(onehot_pred(eye, [1, 2, 0, 1])) == pytest.approx(1.0, abs=1e-12)


def test_ece_two_bin_hand_oracle():
    rows = [[0.62, 0.20, 0.18]] * 3 + [[0.90, 0.06, 0.04]] * 2
    targets = [0, 0, 1, 0, 2]   # bin(0.62): 2/3 correct; bin(0.90): 1/2 correct
    want = 3 / 5 * abs(2 / 3 - 0.62) + 2 / 5 * abs(1 / 2 - 0.90)
    assert ece(onehot_pred(rows, targets)) == pytest.approx(want, rel=1e-12)


def test_ece_bounds_and_calibrated_fixture():
    p = random_pred(seed=5)
    assert 0.0 <= ece(p) <= 1.0
    # synthetically perfect calibration: conf c with exactly c fraction correct
    rows = [[0.75, 0.25, 0.0]] * 4
    targets = [0, 0, 0, 1]      # bin acc 3/4 = conf 0.75
    assert ece(onehot_pred(rows, targets)) < 1e-9


# ---------------------------------------------------------- mutual information

def test_mi_identical_samples_zero():
    base = random_pred(m=1, seed=7).probs[0]
    p = McPrediction(probs=np.stack([base] * 8), targets=np.zeros(20, dtype=int))
    assert mutual_information(p) == 0.0


def test_mi_maximal_two_sample_disagreement():
    probs = np.zeros((2, 1, 2))
    probs[0, 0, 0] = 1.0
    probs[1, 0, 1] = 1.0
    p = McPrediction(probs=probs, targets=np.array([0]))
    assert mutual_information(p) == pytest.approx(math.log(2), rel=1e-12)


def test_mi_entropy_decomposition_oracle():
    p = random_pred(m=6, seed=8)

    def h(x):
        return -(x * np.log(x)).sum(-1)

    want = (h(p.mean_probs) - h(p.probs).mean(0)).clip(0).mean()
    assert mutual_information(p) == pytest.approx(want, rel=1e-10)


def test_mi_bounded_by_predictive_entropy():
    for seed in range(5):
        p = random_pred(m=5, n=30, seed=seed)
        h_bar = -(p.mean_probs * np.log(p.mean_probs)).sum(-1).mean()
        mi = mutual_information(p)
        assert 0.0 <= mi <= h_bar + 1e-12


# -------------------------------------------------------- conditional variance

def test_condvar_deterministic_zero():
    base = random_pred(m=1, seed=9).probs[0]
    p = McPrediction(probs=np.stack([base] * 8), targets=np.zeros(20, dtype=int))
    assert conditional_variance_mc(p) == 0.0


def test_condvar_two_onehot_quarter():
    probs = np.zeros((2, 1, 2))
    probs[0, 0, 0] = 1.0
    probs[1, 0, 1] = 1.0
    p = McPrediction(probs=probs, targets=np.array([0]))
    assert conditional_variance_mc(p) == pytest.approx(0.25, abs=1e-15)


def test_condvar_direct_oracle():
    p = random_pred(m=7, seed=11)
    mean = p.probs.mean(0)
    want = ((p.probs - mean) ** 2).mean(0).mean()
    assert conditional_variance_mc(p) == pytest.approx(want, rel=1e-12)


def test_top1_variance_oracle():
    p = random_pred(m=5, seed=12)
    top = p.mean_probs.argmax(1)
    vals = p.probs[:, np.arange(20), top]
    want = vals.var(axis=0).mean()
    assert top1_variance_mc(p) == pytest.approx(want, rel=1e-12)


# -------------------------------------------------------------- top1 flip rate

def test_flip_rate_counting():
    base = np.tile(np.eye(4)[0], (3, 10, 1))        # all samples pick class 0
    flip = base.copy()
    flip[1, [2, 5, 7]] = np.eye(4)[1]               # 3 tokens flip in sample 1
    assert top1_flip_rate(McPrediction(probs=base, targets=np.zeros(10, int))) == 0.0
    got = top1_flip_rate(McPrediction(probs=flip, targets=np.zeros(10, int)))
    assert got == pytest.approx(0.3, abs=1e-15)


def test_flip_rate_tie_break_lowest_id():
    probs = np.full((2, 1, 3), 1 / 3)               # exact ties everywhere
    p = McPrediction(probs=probs, targets=np.array([0]))
    assert top1_flip_rate(p) == 0.0                 # all argmax -> class 0


# -------------------------------------------------------------------- cvar_nll

def test_cvar_full_tail_equals_nll():
    p = random_pred(seed=13)
    assert cvar_nll(p, alpha=1.0) == pytest.approx(nll_mc(p), abs=0)


def test_cvar_hand_fixture():
    # per-token NLLs exactly [1, 2, 3, 4] nats on a 2-class problem
    nlls = np.array([1.0, 2.0, 3.0, 4.0])
    pt = np.exp(-nlls)
    rows = np.stack([pt, 1 - pt], axis=1)
    p = onehot_pred(rows, [0, 0, 0, 0])
    assert cvar_nll(p, alpha=0.5) == pytest.approx(3.5, rel=1e-12)
    assert cvar_nll(p, alpha=0.25) == pytest.approx(4.0, rel=1e-12)
    uni = onehot_pred(np.full((5, 4), 0.25), [0] * 5)
    assert cvar_nll(uni, alpha=0.3) == pytest.approx(math.log(4), rel=1e-12)
    with pytest.raises(ValueError):
        cvar_nll(p, alpha=0.0)
    with pytest.raises(ValueError):
        cvar_nll(p, alpha=1.5)


# ------------------------------------------------------------- epistemic ratio

def test_epistemic_ratio_limits():
    base = random_pred(m=1, seed=14).probs[0]
    same = McPrediction(probs=np.stack([base] * 4), targets=np.zeros(20, int))
    assert epistemic_ratio(same) == 0.0
    probs = np.zeros((2, 1, 2))
    probs[0, 0, 0] = 1.0
    probs[1, 0, 1] = 1.0
    fully = McPrediction(probs=probs, targets=np.array([0]))
    assert epistemic_ratio(fully) == pytest.approx(100.0, rel=1e-9)
    certain = onehot_pred(np.eye(3), [0, 1, 2])
    assert epistemic_ratio(certain) == 0.0          # zero entropy denominator


def test_epistemic_ratio_direct_oracle():
    p = random_pred(m=5, seed=15)
    h_bar = -(p.mean_probs * np.log(p.mean_probs)).sum(-1).mean()
    assert epistemic_ratio(p) == pytest.approx(100 * mutual_information(p) / h_bar,
                                               rel=1e-10)


# ------------------------------------------------------ permutation invariance

def test_metrics_invariant_under_sample_permutation():
    p = random_pred(m=6, seed=16)
    perm = np.random.default_rng(1).permutation(6)
    q = McPrediction(probs=p.probs[perm], targets=p.targets)
    for fn in (nll_mc, ece, mutual_information, conditional_variance_mc,
               top1_flip_rate, epistemic_ratio):
        assert fn(p) == pytest.approx(fn(q), rel=1e-12)


# ---------------------------------------------------------------- latent usage

def make_stats(kl_per_dim, sigma=0.5, n_tokens=10):
    kl_per_dim = np.asarray(kl_per_dim, dtype=float)
    kl_per_unit = kl_per_dim.sum(axis=1)
    return {"n_tokens": n_tokens, "kl_mean": float(kl_per_unit.mean()),
            "kl_per_unit": kl_per_unit, "kl_per_dim": kl_per_dim,
            "mu2_mean": 0.1, "mu2_std": 0.0, "sigma_mean": sigma}


def test_latent_usage_all_dead_and_all_active():
    dead = latent_usage([make_stats(np.zeros((4, 3)))])
    assert dead["active_unit_fraction"] == 0.0
    assert dead["effective_active_dims"] == 0
    live = latent_usage([make_stats(np.ones((4, 3)))])
    assert live["active_unit_fraction"] == 1.0
    assert live["effective_active_dims"] == 12
    assert live["per_layer_active_fraction"] == [1.0]


def test_latent_usage_mixed_counting_oracle():
    l0 = make_stats([[0.5, 0.0], [0.0, 0.0]], sigma=0.4, n_tokens=30)   # 1 of 4 dims
    l1 = make_stats([[2e-3, 2e-3], [0.0, 5e-4]], sigma=0.8, n_tokens=10)  # 2 of 4
    out = latent_usage([l0, l1])
    assert out["effective_active_dims"] == 3
    assert out["per_layer_active_fraction"] == [0.25, 0.5]
    # units active: l0 unit0 (0.5), l1 unit0 (4e-3); l1 unit1 total 5e-4 -> dead
    assert out["active_unit_fraction"] == pytest.approx(2 / 4)
    assert out["sigma_mean"] == pytest.approx((0.4 * 30 + 0.8 * 10) / 40)


def test_merge_bank_stats_token_weighting():
    a = BankStats(n_tokens=10, kl_mean=1.0, kl_per_unit=np.array([1.0]),
                  kl_per_dim=np.array([[1.0]]), mu2_mean=0.2, mu2_sq_mean=0.05,
                  mu2_per_unit=np.array([0.2]), sigma_q_mean=0.5)
    b = BankStats(n_tokens=30, kl_mean=2.0, kl_per_unit=np.array([2.0]),
                  kl_per_dim=np.array([[2.0]]), mu2_mean=0.4, mu2_sq_mean=0.2,
                  mu2_per_unit=np.array([0.4]), sigma_q_mean=0.9)
    out = merge_bank_stats([a, b])
    assert out["kl_mean"] == pytest.approx(1.75)
    assert out["sigma_mean"] == pytest.approx(0.8)
    assert out["mu2_mean"] == pytest.approx(0.35)
    var = (0.05 * 10 + 0.2 * 30) / 40 - 0.35 ** 2
    assert out["mu2_std"] == pytest.approx(math.sqrt(var))


# ------------------------------------------------------------------ mc_forward

def test_mc_forward_deterministic_model_identical_samples():
    model = Model(tiny_cfg(ffn_mode="deterministic"), RngStream(1))
    w = RNG.integers(0, 258, size=9)
    pred = mc_forward(model, w, m_samples=8, rng=RngStream(5))
    for m in range(1, 8):
        assert pred.probs[m].tobytes() == pred.probs[0].tobytes()


def test_mc_forward_m1_mean_equals_sample():
    model = Model(tiny_cfg(), RngStream(2))
    w = RNG.integers(0, 258, size=9)
    pred = mc_forward(model, w, m_samples=1, rng=RngStream(5))
    assert np.array_equal(pred.mean_probs, pred.probs[0])


def test_mc_forward_seed_reproducible_bitwise():
    model = Model(tiny_cfg(), RngStream(3))
    w = RNG.integers(0, 258, size=9)
    a = mc_forward(model, w, m_samples=4, rng=RngStream(6))
    b = mc_forward(model, w, m_samples=4, rng=RngStream(6))
    assert a.mean_probs.tobytes() == b.mean_probs.tobytes()
    c = mc_forward(model, w, m_samples=4, rng=RngStream(7))
    assert not np.array_equal(a.mean_probs, c.mean_probs)
    with pytest.raises(ValueError):
        mc_forward(model, w, m_samples=0, rng=RngStream(0))


def test_mc_forward_respects_loss_mask():
    from varlm.data import TokenWindow
    model = Model(tiny_cfg(ffn_mode="deterministic"), RngStream(4))
    stream = RNG.integers(0, 258, size=9)
    mask = np.array([0, 0, 0, 0, 1, 1, 1, 1, 1], dtype=float)
    pred = mc_forward(model, TokenWindow(stream=stream, origin=0, loss_mask=mask),
                      m_samples=2, rng=RngStream(0))
    assert pred.n_tokens == 5
    assert np.array_equal(pred.targets, stream[1:][mask[1:].astype(bool)])


# -------------------------------------------------------------------- evaluate

def val_windows(n_docs=6, t_len=12, seed=0):
    ws, _ = make_windows(synthetic_corpus(n_docs, seed=seed), t_len=t_len)
    return ws


def test_evaluate_untrained_near_uniform():
    model = Model(tiny_cfg(), RngStream(8))
    rep = evaluate(model, val_windows(), m_samples=4, rng=RngStream(1))
    assert rep.final_validation["ce"] == pytest.approx(math.log(258), abs=0.1)
    assert rep.final_validation["ppl"] == pytest.approx(
        math.exp(rep.final_validation["ce"]), rel=1e-9)
    assert rep.meta["finite_ok"] is True
    assert rep.meta["skipped_batches"] == 0
    assert 0.0 <= rep.final_validation["acc"] <= 1.0
    assert len(rep.internal["layers"]) == 2
    assert "active_latent_fraction" in rep.internal["layers"][0]


def test_evaluate_deterministic_model_degenerate_uncertainty():
    model = Model(tiny_cfg(ffn_mode="deterministic"), RngStream(9))
    rep = evaluate(model, val_windows(), m_samples=8, rng=RngStream(2))
    assert rep.extended["mutual_information"] == 0.0
    assert rep.extended["conditional_variance_mc"] == 0.0
    assert rep.extended["top1_flip_rate_mc"] == 0.0
    assert rep.extended["effective_active_dims"] == 0
    assert rep.internal["layers"] == []


def test_evaluate_memorized_example():
    # one short window, deterministic mode, enough steps to pin it down
    cfg = tiny_cfg(ffn_mode="deterministic", d_model=16, n_layers=1,
                   window_length=24, vocab_size=258)
    model = Model(cfg, RngStream(10))
    ws = val_windows(n_docs=1, t_len=20)[:1]
    streams, masks = training_arrays(ws)
    tr = Trainer(model, TrainSettings(lr=3e-3, batch_size=1), RngStream(11))
    tr.train(streams, masks=masks, steps=300)
    rep = evaluate(model, ws, m_samples=2, rng=RngStream(3))
    assert rep.final_validation["ce"] < 0.3
    assert rep.final_validation["acc"] > 0.9


def test_evaluate_bitwise_reproducible():
    model = Model(tiny_cfg(), RngStream(12))
    a = evaluate(model, val_windows(), m_samples=4, rng=RngStream(4))
    b = evaluate(model, val_windows(), m_samples=4, rng=RngStream(4))
    assert a.to_json() == b.to_json()


def test_evaluate_empty_raises():
    model = Model(tiny_cfg(), RngStream(13))
    with pytest.raises(ValueError):
        evaluate(model, [], m_samples=2, rng=RngStream(0))


def test_evaluate_top1_variance_flag():
    model = Model(tiny_cfg(), RngStream(14))
    rep = evaluate(model, val_windows(n_docs=2), m_samples=3, rng=RngStream(5),
                   report_top1_variance=True)
    assert "conditional_variance_top1_mc" in rep.extended
    base = evaluate(model, val_windows(n_docs=2), m_samples=3, rng=RngStream(5))
    assert "conditional_variance_top1_mc" not in base.extended


# --------------------------------------------------------------------- report

def test_report_json_roundtrip_and_csv():
    model = Model(tiny_cfg(), RngStream(15))
    rep = evaluate(model, val_windows(n_docs=3), m_samples=2, rng=RngStream(6),
                   selected_epoch=4)
    back = MetricsReport.from_json(rep.to_json())
    assert back.final_validation == rep.final_validation
    assert back.extended == rep.extended
    assert back.meta["selected_epoch"] == 4
    csv_text = rep.to_csv()
    header = csv_text.splitlines()[0].split(",")
    for name in ("ce", "ppl", "acc", "nll", "ece", "mutual_information",
                 "conditional_variance_mc", "top1_flip_rate_mc", "cvar_nll"):
        assert name in header
    d = json.loads(rep.to_json())
    assert set(d) == {"final_validation", "extended", "internal", "meta"}
