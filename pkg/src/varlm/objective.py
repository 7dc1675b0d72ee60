"""Training loss composition and the optimizer loop.

The global objective is

    L = L_lm + beta_eff * L_kl + L_control + alpha_ar * L_ar

where L_kl sums per-layer KL means, L_control sums the per-layer band
penalties (with their homeostatic gains), and beta_eff follows a linear
warmup. With the auxiliary deep-layer patch enabled, the deepest block's KL
enters with an extra 2x multiplier and its control penalty with 4x.

Batches whose loss or gradients go non-finite are skipped and counted, never
silently propagated. One structured record per step is appended to the
training log when a logger is attached.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import Model, ForwardResult
from .tensor import NumericGuardError, RngStream, Tensor, cross_entropy, zero_grads
from .varneuron import control_penalty, homeostat_update

AUX_KL_MULT = 2.0
AUX_CONTROL_MULT = 4.0


@dataclass
class ObjectiveWeights:
    beta: float = 1e-2
    alpha_ar: float = 1.0

    def __post_init__(self):
        for name in ("beta", "alpha_ar"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


@dataclass
class LossBreakdown:
    lm: float = float("nan")
    kl: float = 0.0
    control: float = 0.0
    ar: float = 0.0
    total: float = float("nan")
    skipped: bool = False

    def as_dict(self) -> dict:
        return {"lm": self.lm, "kl": self.kl, "control": self.control,
                "ar": self.ar, "total": self.total, "skipped": self.skipped}


def compose_loss(lm, kl, control, ar, weights: ObjectiveWeights,
                 beta_eff: float | None = None) -> tuple[Tensor | None, LossBreakdown]:
    """Weighted sum of the loss terms; returns (total tensor, breakdown).

    Inputs may be Tensors or plain floats (floats are treated as constants).
    A non-finite term yields (None, breakdown with skipped=True) instead of
    poisoning the update.
    """
    beta = weights.beta if beta_eff is None else beta_eff
    terms = {"lm": lm, "kl": kl, "control": control, "ar": ar}
    vals = {}
    for name, t in terms.items():
        v = t.item() if isinstance(t, Tensor) else float(t)
        if not math.isfinite(v):
            return None, LossBreakdown(skipped=True)
        vals[name] = v

    def as_tensor(x):
        return x if isinstance(x, Tensor) else Tensor(float(x))

    total = as_tensor(lm) + beta * as_tensor(kl) + as_tensor(control) \
        + weights.alpha_ar * as_tensor(ar)
    bd = LossBreakdown(lm=vals["lm"], kl=vals["kl"], control=vals["control"],
                       ar=vals["ar"], total=total.item(), skipped=False)
    return total, bd


def kl_warmup(step: int, beta: float, warmup_steps: int) -> float:
    """Linear ramp: beta * min(1, step / warmup_steps); no warmup when 0."""
    if warmup_steps <= 0:
        return beta
    return beta * min(1.0, step / warmup_steps)


def select_best(metric_history: list[float], mode: str = "min") -> int:
    """1-based epoch index of the best metric value (earliest on ties)."""
    if not metric_history:
        raise ValueError("empty metric history")
    arr = np.asarray(metric_history, dtype=float)
    idx = int(np.argmin(arr)) if mode == "min" else int(np.argmax(arr))
    return idx + 1


class Adam:
    """Adam with global gradient-norm clipping.

    step() applies one update from the .grad fields and returns the pre-clip
    global norm, or None when any gradient is non-finite (update skipped,
    counter incremented).
    """

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, clip_norm: float = 1.0):
        self.params = [(n, p) for n, p in params]
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.clip_norm = clip_norm
        self.m = [np.zeros_like(p.data) for _, p in self.params]
        self.v = [np.zeros_like(p.data) for _, p in self.params]
        self.t = 0
        self.skipped = 0

    def step(self) -> float | None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data)
                 for _, p in self.params]
        sq = sum(float((g * g).sum()) for g in grads)
        if not math.isfinite(sq):
            self.skipped += 1
            return None
        gnorm = math.sqrt(sq)
        scale = 1.0
        if self.clip_norm is not None and gnorm > self.clip_norm > 0:
            scale = self.clip_norm / gnorm
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for (name, p), m, v, g in zip(self.params, self.m, self.v, grads):
            g = g * scale
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p.data = p.data - self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)
        return gnorm


@dataclass
class TrainSettings:
    lr: float = 3e-3
    batch_size: int = 8
    beta: float = 1e-2
    alpha_ar: float = 1.0
    clip_norm: float = 1.0
    warmup_steps: int = 0
    window_steps: int = 20     # homeostat monitoring window, in steps
    diag_every: int = 50


class Trainer:
    """Single-owner training loop over token windows.

    Steps draw shuffled batches; the homeostatic gains update every
    ``window_steps`` steps from the control statistics accumulated in
    between. ``log_fn`` (one dict per step) feeds the structured log.
    """

    def __init__(self, model: Model, settings: TrainSettings, rng: RngStream,
                 log_fn=None, diag_fn=None):
        self.model = model
        self.s = settings
        self.rng = rng
        self.weights = ObjectiveWeights(beta=settings.beta, alpha_ar=settings.alpha_ar)
        self.opt = Adam(model.parameters(), lr=settings.lr, clip_norm=settings.clip_norm)
        self.step_idx = 0
        self.epoch = 0
        self.skipped = 0
        self.log_fn = log_fn
        self.diag_fn = diag_fn
        self._aux = model.cfg.layer_aux_enabled and model.cfg.ffn_mode == "variational"

    def _window_loss(self, tokens: np.ndarray, mask: np.ndarray | None,
                     rng: RngStream | None):
        """Per-window terms: (lm, kl, control, ar) Tensors and ForwardResult."""
        fr = self.model.forward(tokens[:-1], rng=rng)
        w = None if mask is None else mask[1:]
        lm = cross_entropy(fr.logits, tokens[1:], weights=w)
        kl = Tensor(0.0)
        control = Tensor(0.0)
        ar = Tensor(0.0)
        n_layers = len(fr.kl_layers)
        for i in range(n_layers):
            deepest = i == n_layers - 1
            klw = AUX_KL_MULT if (self._aux and deepest) else 1.0
            cw = AUX_CONTROL_MULT if (self._aux and deepest) else 1.0
            kl = kl + klw * fr.kl_layers[i]
            pen = control_penalty(fr.mu2_layers[i], self.model.control[i])
            control = control + cw * pen
            if fr.ar_layers[i] is not None:
                ar = ar + fr.ar_layers[i]
        return lm, kl, control, ar, fr

    def train_step(self, batch: list) -> LossBreakdown:
        """One optimizer update from a list of (tokens, mask) windows."""
        beta_eff = kl_warmup(self.step_idx, self.weights.beta, self.s.warmup_steps)
        params = self.model.parameters()
        zero_grads(params)
        last_fr = None
        try:
            terms = None
            for j, (tokens, mask) in enumerate(batch):
                rng = self.rng.child("step", self.step_idx, "win", j) \
                    if self.model.cfg.ffn_mode == "variational" else None
                *parts, last_fr = self._window_loss(tokens, mask, rng)
                terms = parts if terms is None else [a + b for a, b in zip(terms, parts)]
            inv = 1.0 / len(batch)
            lm, kl, control, ar = (t * inv for t in terms)
            total, bd = compose_loss(lm, kl, control, ar, self.weights, beta_eff=beta_eff)
            if total is None:
                raise NumericGuardError("non-finite loss term")
            total.backward()
            gnorm = self.opt.step()
            if gnorm is None:
                bd = LossBreakdown(skipped=True)
                self.skipped += 1
        except NumericGuardError:
            bd = LossBreakdown(skipped=True)
            self.skipped += 1
            gnorm = None

        if self.log_fn is not None:
            rec = {"step": self.step_idx, "lr": self.s.lr, "beta_eff": beta_eff,
                   "grad_norm": gnorm}
            rec.update(bd.as_dict())
            self.log_fn(rec)
        if (self.diag_fn is not None and last_fr is not None and not bd.skipped
                and self.step_idx % self.s.diag_every == 0):
            self.diag_fn(self.step_idx, last_fr.stats,
                         [cs.snapshot() for cs in self.model.control])
        self.step_idx += 1
        if self.step_idx % self.s.window_steps == 0:
            for cs in self.model.control:
                homeostat_update(cs)
        return bd

    def _batches(self, n: int, epoch_key: int):
        order = self.rng.child("order", epoch_key).permutation(n)
        bs = self.s.batch_size
        for i in range(0, n, bs):
            yield order[i:i + bs]

    def train(self, windows: list, masks: list | None = None,
              steps: int | None = None, epochs: int | None = None) -> list[LossBreakdown]:
        """Run for a step budget or whole epochs; returns per-step breakdowns."""
        if (steps is None) == (epochs is None):
            raise ValueError("pass exactly one of steps / epochs")
        masks = masks if masks is not None else [None] * len(windows)
        if len(masks) != len(windows):
            raise ValueError("windows and masks length mismatch")
        history = []
        done = 0
        while True:
            for idx in self._batches(len(windows), self.epoch):
                batch = [(windows[i], masks[i]) for i in idx]
                history.append(self.train_step(batch))
                if steps is not None and len(history) >= steps:
                    return history
            self.epoch += 1
            done += 1
            if epochs is not None and done >= epochs:
                return history
