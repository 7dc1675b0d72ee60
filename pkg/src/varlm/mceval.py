"""Monte Carlo predictive evaluation and the extended validation metrics.

Extended metrics come from M stochastic forward passes per window: the
per-token predictive distribution is the arithmetic mean p_bar of the M
softmax outputs, and disagreement across the samples carries the epistemic
signal (mutual information, conditional variance, top-1 flips). Final
validation ce/ppl use the sampling-noise-free posterior-mean forward; acc is
the p_bar argmax accuracy. A deterministic model produces M bitwise-identical
samples, so every disagreement metric is exactly zero for it.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .model import Model
from .tensor import RngStream, no_grad
from .varneuron import ACTIVE_KL_THRESHOLD, BankStats

_TINY = 1e-300          # floor inside logs; softmax can underflow to exact 0


@dataclass
class McPrediction:
    """M sampled probability vectors per token plus their mean.

    probs has shape (M, N, V); mean_probs (N, V) is the arithmetic mean over
    the sample axis; targets (N,) holds the true next-token ids.
    """

    probs: np.ndarray
    targets: np.ndarray
    mean_probs: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.probs.ndim != 3:
            raise ValueError(f"probs must be (M, N, V), got {self.probs.shape}")
        if self.targets.shape != (self.probs.shape[1],):
            raise ValueError("targets length must match the token axis")
        # anchored mean: exact when all samples are bitwise identical, so a
        # deterministic model yields p_bar == p_m and zero disagreement metrics
        self.mean_probs = self.probs[0] + (self.probs - self.probs[0]).mean(axis=0)

    @property
    def m(self) -> int:
        return self.probs.shape[0]

    @property
    def n_tokens(self) -> int:
        return self.probs.shape[1]


def _softmax(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def mc_forward(model: Model, window, m_samples: int, rng: RngStream) -> McPrediction:
    """M independent stochastic forwards over one window, softmaxed.

    ``window`` is a TokenWindow or a raw stream of length T+1. Masked
    positions (loss_mask) are excluded from the evaluated tokens. Each sample
    draws from a fresh child stream, so results are reproducible given the
    parent seed and invariant to evaluation order.
    """
    if m_samples < 1:
        raise ValueError("m_samples must be >= 1")
    stream = getattr(window, "stream", window)
    mask = getattr(window, "loss_mask", None)
    inputs, targets = stream[:-1], stream[1:]
    sel = slice(None) if mask is None else mask[1:].astype(bool)
    sample_probs = []
    with no_grad():
        for m in range(m_samples):
            sample_rng = rng.child("mc", m) if model.cfg.ffn_mode == "variational" else None
            logits = model.forward(inputs, rng=sample_rng).logits.data
            sample_probs.append(_softmax(logits)[sel])
    return McPrediction(probs=np.stack(sample_probs), targets=np.asarray(targets)[sel])


# ------------------------------------------------------------------ metrics

def _token_nll(p: np.ndarray, targets: np.ndarray) -> np.ndarray:
    return -np.log(np.maximum(p[np.arange(len(targets)), targets], _TINY))


def nll_mc(pred: McPrediction) -> float:
    """Mean over tokens of -log p_bar[target], nats per token."""
    return float(_token_nll(pred.mean_probs, pred.targets).mean())


def ece(pred: McPrediction, n_bins: int = 15) -> float:
    """Expected calibration error: top-label confidence, equal-width bins."""
    conf = pred.mean_probs.max(axis=1)
    correct = (pred.mean_probs.argmax(axis=1) == pred.targets).astype(float)
    bins = np.minimum((conf * n_bins).astype(int), n_bins - 1)
    n = len(conf)
    total = 0.0
    for b in range(n_bins):
        in_bin = bins == b
        nb = int(in_bin.sum())
        if nb == 0:
            continue
        total += nb / n * abs(correct[in_bin].mean() - conf[in_bin].mean())
    return float(total)


def _entropy(p: np.ndarray) -> np.ndarray:
    """Shannon entropy along the last axis, with 0 log 0 = 0."""
    return -np.where(p > 0, p * np.log(np.maximum(p, _TINY)), 0.0).sum(axis=-1)


def mutual_information(pred: McPrediction) -> float:
    """BALD decomposition: H(p_bar) - mean_m H(p_m), clamped at >= 0."""
    h_samples = _entropy(pred.probs)                 # (M, N)
    # anchored mean (see McPrediction): exact zero MI for identical samples
    mean_h = h_samples[0] + (h_samples - h_samples[0]).mean(axis=0)
    mi = _entropy(pred.mean_probs) - mean_h
    return float(np.maximum(mi, 0.0).mean())


def conditional_variance_mc(pred: McPrediction) -> float:
    """Mean over tokens and vocab of the across-sample population variance.

    Deviations are taken against the anchored mean so identical samples give
    an exact zero.
    """
    dev = pred.probs - pred.mean_probs
    return float((dev * dev).mean(axis=0).mean())


def top1_variance_mc(pred: McPrediction) -> float:
    """Across-sample variance of the p_bar-top-1 class probability only."""
    top = pred.mean_probs.argmax(axis=1)
    per_sample = pred.probs[:, np.arange(pred.n_tokens), top]
    mean = per_sample[0] + (per_sample - per_sample[0]).mean(axis=0)
    dev = per_sample - mean
    return float((dev * dev).mean(axis=0).mean())


def top1_flip_rate(pred: McPrediction) -> float:
    """Fraction of tokens whose M sample argmaxes do not all coincide."""
    tops = pred.probs.argmax(axis=2)          # ties -> lowest class id
    return float((tops != tops[0]).any(axis=0).mean())


def cvar_nll(pred: McPrediction, alpha: float = 0.05) -> float:
    """Mean of the worst ceil(alpha * N) per-token NLLs from p_bar."""
    if not 0 < alpha <= 1:
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    nll = _token_nll(pred.mean_probs, pred.targets)
    k = math.ceil(alpha * len(nll))
    if k >= len(nll):
        return float(nll.mean())    # full tail: keep bitwise identity with nll_mc
    return float(np.sort(nll)[-k:].mean())


def epistemic_ratio(pred: McPrediction) -> float:
    """Mean MI over mean predictive entropy, in percent; 0 for zero entropy."""
    denom = float(_entropy(pred.mean_probs).mean())
    if denom == 0.0:
        return 0.0
    return 100.0 * mutual_information(pred) / denom


# ------------------------------------------------------------- latent usage

def merge_bank_stats(per_window: list[BankStats]) -> dict:
    """Token-weighted aggregation of one layer's stats across windows."""
    if not per_window:
        raise ValueError("no stats to merge")
    n = sum(s.n_tokens for s in per_window)
    wsum = lambda get: sum(get(s) * s.n_tokens for s in per_window) / n
    mu2_mean = wsum(lambda s: s.mu2_mean)
    mu2_sq = wsum(lambda s: s.mu2_sq_mean)
    return {
        "n_tokens": n,
        "kl_mean": wsum(lambda s: s.kl_mean),
        "kl_per_unit": wsum(lambda s: s.kl_per_unit),
        "kl_per_dim": wsum(lambda s: s.kl_per_dim),
        "mu2_mean": mu2_mean,
        "mu2_std": math.sqrt(max(mu2_sq - mu2_mean ** 2, 0.0)),
        "sigma_mean": wsum(lambda s: s.sigma_q_mean),
    }


def latent_usage(layer_stats: list[dict]) -> dict:
    """Activity summary from per-layer aggregated KL statistics.

    A unit (or latent dimension) is active when its mean KL exceeds 1e-3
    nats. effective_active_dims counts active dimensions over all layers.
    """
    total_units = active_units = total_dims = active_dims = 0
    sigma_num = sigma_den = 0.0
    per_layer = []
    for st in layer_stats:
        upl = len(st["kl_per_unit"])
        aupl = int((st["kl_per_unit"] > ACTIVE_KL_THRESHOLD).sum())
        dpl = st["kl_per_dim"].size
        adpl = int((st["kl_per_dim"] > ACTIVE_KL_THRESHOLD).sum())
        total_units += upl
        active_units += aupl
        total_dims += dpl
        active_dims += adpl
        sigma_num += st["sigma_mean"] * st["n_tokens"]
        sigma_den += st["n_tokens"]
        per_layer.append(adpl / dpl)
    return {
        "sigma_mean": sigma_num / sigma_den if sigma_den else 0.0,
        "active_unit_fraction": active_units / total_units if total_units else 0.0,
        "effective_active_dims": active_dims,
        "per_layer_active_fraction": per_layer,
    }


# ------------------------------------------------------------------- report

@dataclass
class MetricsReport:
    final_validation: dict
    extended: dict
    internal: dict
    meta: dict

    def flat(self) -> dict:
        """One flat row of scalar fields, for tabular export."""
        row = {}
        row.update(self.final_validation)
        row.update(self.extended)
        for i, layer in enumerate(self.internal.get("layers", [])):
            for k, v in layer.items():
                row[f"layer{i}_{k}"] = v
        for k, v in self.meta.items():
            if isinstance(v, (int, float, bool, str)) or v is None:
                row[k] = v
        return row

    def to_json(self, indent: int = 2) -> str:
        return json.dumps({"final_validation": self.final_validation,
                           "extended": self.extended,
                           "internal": self.internal,
                           "meta": self.meta}, indent=indent)

    def to_csv(self) -> str:
        row = self.flat()
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=list(row))
        writer.writeheader()
        writer.writerow(row)
        return buf.getvalue()

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        d = json.loads(text)
        return cls(final_validation=d["final_validation"], extended=d["extended"],
                   internal=d["internal"], meta=d["meta"])


def evaluate(model: Model, windows: list, m_samples: int = 8,
             rng: RngStream | None = None, beta: float = 1e-2,
             cvar_alpha: float = 0.05, ece_bins: int = 15,
             report_top1_variance: bool = False,
             skipped_batches: int = 0, selected_epoch: int | None = None) -> MetricsReport:
    """Full validation pass: final metrics, extended MC metrics, diagnostics.

    ce/ppl come from the posterior-mean forward (no sampling noise); the
    reported loss adds beta times the mean-forward KL. Extended metrics pool
    per-token MC predictions over all windows. Internal diagnostics aggregate
    the mean-forward latent statistics token-weighted across windows.
    """
    if not windows:
        raise ValueError("empty validation set")
    rng = rng if rng is not None else RngStream(0)
    variational = model.cfg.ffn_mode == "variational"

    preds = []
    nll_tokens = []
    layer_stats: list[list[BankStats]] = [[] for _ in range(model.cfg.n_layers)]
    layer_weights = None
    with no_grad():
        for w_idx, window in enumerate(windows):
            stream = getattr(window, "stream", window)
            mask = getattr(window, "loss_mask", None)
            sel = slice(None) if mask is None else mask[1:].astype(bool)
            fr = model.forward(stream[:-1], rng=None)
            probs = _softmax(fr.logits.data)[sel]
            targets = np.asarray(stream[1:])[sel]
            nll_tokens.append(_token_nll(probs, targets))
            layer_weights = fr.layer_weights
            for i, st in enumerate(fr.stats):
                layer_stats[i].append(st)
            preds.append(mc_forward(model, window, m_samples, rng.child("win", w_idx)))

    pred = McPrediction(probs=np.concatenate([p.probs for p in preds], axis=1),
                        targets=np.concatenate([p.targets for p in preds]))
    nll_all = np.concatenate(nll_tokens)
    ce = float(nll_all.mean())
    acc = float((pred.mean_probs.argmax(axis=1) == pred.targets).mean())

    layers = []
    kl_total = 0.0
    usage_inputs = []
    for i in range(model.cfg.n_layers):
        if not variational or not layer_stats[i]:
            continue
        agg = merge_bank_stats(layer_stats[i])
        kl_total += agg["kl_mean"]
        usage_inputs.append(agg)
        entry = {"kl": agg["kl_mean"], "mu2": agg["mu2_mean"], "mu2_std": agg["mu2_std"],
                 "sigma_mean": agg["sigma_mean"],
                 "weight": float(layer_weights[i])}
        if model.control:
            entry.update(model.control[i].snapshot())
        layers.append(entry)

    extended = {
        "nll": nll_mc(pred),
        "ece": ece(pred, n_bins=ece_bins),
        "mutual_information": mutual_information(pred),
        "conditional_variance_mc": conditional_variance_mc(pred),
        "top1_flip_rate_mc": top1_flip_rate(pred),
        "cvar_nll": cvar_nll(pred, alpha=cvar_alpha),
        "epistemic_ratio": epistemic_ratio(pred),
    }
    if report_top1_variance:
        extended["conditional_variance_top1_mc"] = top1_variance_mc(pred)
    if variational and usage_inputs:
        usage = latent_usage(usage_inputs)
        extended["sigma_mean"] = usage["sigma_mean"]
        extended["active_unit_fraction"] = usage["active_unit_fraction"]
        extended["effective_active_dims"] = usage["effective_active_dims"]
        per_layer_active = usage["per_layer_active_fraction"]
        for i, frac in enumerate(per_layer_active):
            layers[i]["active_latent_fraction"] = frac
    else:
        extended.update({"sigma_mean": 0.0, "active_unit_fraction": 0.0,
                         "effective_active_dims": 0})

    final = {"loss": ce + beta * kl_total, "ce": ce, "ppl": math.exp(ce), "acc": acc}
    values = list(final.values()) + [v for v in extended.values()
                                     if isinstance(v, (int, float))]
    finite_ok = all(math.isfinite(float(v)) for v in values)
    meta = {"finite_ok": finite_ok, "skipped_batches": skipped_batches,
            "selected_epoch": selected_epoch, "m_samples": m_samples,
            "n_tokens": int(pred.n_tokens), "ffn_mode": model.cfg.ffn_mode}
    return MetricsReport(final_validation=final, extended=extended,
                         internal={"layers": layers,
                                   "layer_weights": [float(x) for x in layer_weights]},
                         meta=meta)
