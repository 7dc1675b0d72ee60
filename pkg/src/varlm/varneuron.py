"""Local variational units.

Each unit owns a posterior head (input + memory -> mu_q, sigma_q), a prior
head (memory -> mu_p, sigma_p), a decoder (latent -> activation), and an
optional autoregressive prior whose mean evolves from the previous latent
sample. Units are grouped into a bank that shares one block-level input;
bank parameters are stacked along a leading unit axis so the whole bank
evaluates with batched matmuls.

Latent energy (mean squared posterior mean per dimension) is the control
variable: a squared hinge penalizes it outside [target - band, target + band]
and a multiplicative homeostat adjusts the penalty gain between monitoring
windows.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import RngStream, Tensor, concat

# a latent dimension (or unit) counts as active when its mean KL is above this
ACTIVE_KL_THRESHOLD = 1e-3


@dataclass
class LatentDistributionPair:
    """Diagonal-Gaussian posterior and prior parameters, trailing axis d_z."""

    mu_q: Tensor
    sigma_q: Tensor
    mu_p: Tensor
    sigma_p: Tensor


def kl_diag_gauss(pair: LatentDistributionPair) -> Tensor:
    """KL(q || p) between diagonal Gaussians, summed over the latent axis.

    0.5 * sum_j [ log(sp_j^2 / sq_j^2) + (sq_j^2 + (mq_j - mp_j)^2) / sp_j^2 - 1 ]
    Returns one value per leading batch element; always >= 0.
    """
    return kl_diag_gauss_per_dim(pair).sum(axis=-1)


def kl_diag_gauss_per_dim(pair: LatentDistributionPair) -> Tensor:
    var_q = pair.sigma_q * pair.sigma_q
    var_p = pair.sigma_p * pair.sigma_p
    delta = pair.mu_q - pair.mu_p
    return ((var_p / var_q).log() + (var_q + delta * delta) / var_p - 1.0) * 0.5


def latent_energy(mu_q: Tensor) -> Tensor:
    """Mean squared posterior mean over the latent axis (one value per element)."""
    return (mu_q * mu_q).mean(axis=-1)


def sample_latent(pair: LatentDistributionPair, rng: RngStream | None) -> Tensor:
    """Reparameterized draw z = mu_q + sigma_q * eps.

    ``rng=None`` gives the mean path (eps = 0, no draw consumed), used for
    sampling-noise-free evaluation.
    """
    if rng is None:
        return pair.mu_q
    eps = Tensor(rng.normal(pair.mu_q.shape))
    return pair.mu_q + pair.sigma_q * eps


@dataclass
class ControlState:
    """Latent-energy target, band, homeostatic gain, and window statistics.

    ``observe`` accumulates raw band counts per monitoring window;
    ``homeostat_update`` applies the multiplicative gain law at window
    boundaries and resets the accumulators.
    """

    mu2_target: float = 0.15
    band_halfwidth: float = 0.10
    gain: float = 1.0
    eta: float = 0.05
    gain_min: float = 1e-3
    gain_max: float = 10.0
    enabled: bool = True
    # last completed window statistics
    inside_band_fraction: float = 0.0
    frac_too_low: float = 0.0
    frac_too_high: float = 0.0
    target_gap: float = 0.0
    # window accumulators
    _n: int = 0
    _n_low: int = 0
    _n_high: int = 0
    _sum: float = 0.0

    @property
    def band_low(self) -> float:
        return self.mu2_target - self.band_halfwidth

    @property
    def band_high(self) -> float:
        return self.mu2_target + self.band_halfwidth

    def observe(self, mu2: np.ndarray) -> None:
        mu2 = np.asarray(mu2)
        self._n += mu2.size
        self._n_low += int((mu2 < self.band_low).sum())
        self._n_high += int((mu2 > self.band_high).sum())
        self._sum += float(mu2.sum())
        self._refresh_stats()

    def _refresh_stats(self) -> None:
        if self._n == 0:
            return
        self.frac_too_low = self._n_low / self._n
        self.frac_too_high = self._n_high / self._n
        self.inside_band_fraction = (self._n - self._n_low - self._n_high) / self._n
        self.target_gap = abs(self._sum / self._n - self.mu2_target)

    def window_mean(self) -> float | None:
        return self._sum / self._n if self._n else None

    def reset_window(self) -> None:
        self._n = self._n_low = self._n_high = 0
        self._sum = 0.0

    def snapshot(self) -> dict:
        return {
            "gain": self.gain,
            "inside_band_fraction": self.inside_band_fraction,
            "frac_too_low": self.frac_too_low,
            "frac_too_high": self.frac_too_high,
            "target_gap": self.target_gap,
        }


def control_penalty(mu2: Tensor, state: ControlState) -> Tensor:
    """Squared-hinge band penalty on latent energy; updates window statistics.

    loss = gain * mean(relu(mu2 - band_high)^2 + relu(band_low - mu2)^2),
    zero everywhere inside the band.
    """
    state.observe(mu2.data)
    if not state.enabled:
        return Tensor(0.0)
    over = (mu2 - state.band_high).relu()
    under = (state.band_low - mu2).relu()
    return (over * over + under * under).mean() * state.gain


def homeostat_update(state: ControlState, window_mean: float | None = None) -> ControlState:
    """Multiplicative gain update from a completed monitoring window.

    gain <- clamp(gain * exp(eta * (mean - target) / target), gain_min, gain_max);
    the gain rises while energy sits above target and falls below it. Resets
    the window accumulators.
    """
    if window_mean is None:
        window_mean = state.window_mean()
    if window_mean is not None and state.mu2_target > 0:
        signed_gap = window_mean - state.mu2_target
        state.gain = float(np.clip(
            state.gain * math.exp(state.eta * signed_gap / state.mu2_target),
            state.gain_min, state.gain_max))
    state.reset_window()
    return state


def ar_loss(mu_p_seq: Tensor, mu_q_seq: Tensor) -> Tensor:
    """MSE between the AR prior mean and the detached posterior mean, t >= 1.

    Trains the prior to track the posterior trajectory without dragging the
    posterior toward the prior (the KL already couples them); gradient
    reaches the AR parameters only.
    """
    if mu_p_seq.shape != mu_q_seq.shape:
        raise ValueError(f"sequence shapes disagree: {mu_p_seq.shape} vs {mu_q_seq.shape}")
    t_axis = mu_p_seq.ndim - 2
    if mu_p_seq.shape[t_axis] < 2:
        return Tensor(0.0)
    sel = (slice(None),) * t_axis + (slice(1, None),)
    diff = mu_p_seq[sel] - mu_q_seq[sel].detach()
    return (diff * diff).mean()


@dataclass
class BankStats:
    """Numpy snapshot of one bank evaluation, for diagnostics."""

    n_tokens: int
    kl_mean: float
    kl_per_unit: np.ndarray   # (U,) mean nats per unit
    kl_per_dim: np.ndarray    # (U, d_z) mean nats per latent dimension
    mu2_mean: float
    mu2_sq_mean: float
    mu2_per_unit: np.ndarray  # (U,)
    sigma_q_mean: float


@dataclass
class BankResult:
    activations: Tensor        # (T, n_units * d_out)
    kl_mean: Tensor            # scalar, mean over units and positions
    mu2: Tensor                # (U, T) latent energies, live
    pair: LatentDistributionPair
    ar: Tensor | None
    stats: BankStats


class UnitBank:
    """A bank of ``n_units`` variational units reading one shared input."""

    def __init__(self, d_in: int, d_z: int, d_out: int, n_units: int,
                 rng: RngStream, sigma_min: float = 1e-4,
                 ar_memory: bool = False, ar_sigma: bool = False,
                 init_std: float = 0.02):
        if min(d_in, d_z, d_out, n_units) < 1:
            raise ValueError("bank dimensions must be >= 1")
        if ar_sigma and not ar_memory:
            raise ValueError("ar_sigma requires ar_memory")
        self.d_in, self.d_z, self.d_out, self.n_units = d_in, d_z, d_out, n_units
        self.sigma_min = sigma_min
        self.ar_memory = ar_memory
        self.ar_sigma = ar_sigma
        u, dz = n_units, d_z
        std = init_std

        def p(arr):
            return Tensor(arr, requires_grad=True)

        self.W_qx = p(rng.normal((u, d_in, 2 * dz)) * std)
        self.b_q = p(np.zeros((u, 1, 2 * dz)))
        self.W_p = p(rng.normal((u, dz, 2 * dz)) * std)
        self.b_p = p(np.zeros((u, 1, 2 * dz)))
        self.W_dec = p(rng.normal((u, dz, d_out)) * std)
        self.b_dec = p(np.zeros((u, 1, d_out)))
        if ar_memory:
            self.W_qh = p(rng.normal((u, dz, 2 * dz)) * std)
            self.gate_raw = p(np.zeros((u, 1, dz)))
            self.W_ar = p(rng.normal((u, dz, dz)) * std)
        if ar_sigma:
            self.gate_sigma_raw = p(np.zeros((u, 1, dz)))
            self.W_ar_sigma = p(rng.normal((u, dz, dz)) * std)

    def parameters(self) -> list[tuple[str, Tensor]]:
        names = ["W_qx", "b_q", "W_p", "b_p", "W_dec", "b_dec"]
        if self.ar_memory:
            names += ["W_qh", "gate_raw", "W_ar"]
        if self.ar_sigma:
            names += ["gate_sigma_raw", "W_ar_sigma"]
        return [(n, getattr(self, n)) for n in names]

    def _split_heads(self, raw: Tensor) -> tuple[Tensor, Tensor]:
        dz = self.d_z
        mu = raw[..., :dz]
        sigma = raw[..., dz:].softplus() + self.sigma_min
        return mu, sigma

    def infer_posterior(self, x: Tensor, h: Tensor | None = None) -> tuple[Tensor, Tensor]:
        """Posterior (mu_q, sigma_q) from input x (N, d_in) and memory h.

        Returns (U, N, d_z) pairs; sigma_q >= sigma_min.
        """
        if x.shape[-1] != self.d_in:
            raise ValueError(f"posterior input width {x.shape[-1]} != {self.d_in}")
        raw = x.reshape((1,) + x.shape) @ self.W_qx + self.b_q
        if h is not None:
            if h.shape[-1] != self.d_z:
                raise ValueError(f"memory width {h.shape[-1]} != d_z {self.d_z}")
            raw = raw + h @ self.W_qh
        return self._split_heads(raw)

    def infer_prior(self, h: Tensor) -> tuple[Tensor, Tensor]:
        """Prior (mu_p, sigma_p) from memory h (U, N, d_z)."""
        if h.shape[-1] != self.d_z:
            raise ValueError(f"memory width {h.shape[-1]} != d_z {self.d_z}")
        raw = h @ self.W_p + self.b_p
        return self._split_heads(raw)

    def decode(self, z: Tensor) -> Tensor:
        """Decoder activation y = gelu(z W_dec + b_dec), shape (U, N, d_out)."""
        if z.shape[-1] != self.d_z:
            raise ValueError(f"latent width {z.shape[-1]} != d_z {self.d_z}")
        return (z @ self.W_dec + self.b_dec).gelu()

    def ar_prior_step(self, mu_p_prev: Tensor, z_prev: Tensor) -> Tensor:
        """One AR update: mu_p = gate * mu_p_prev + (1 - gate) * (z_prev W_ar).

        gate = sigmoid(gate_raw) per dimension; at gate -> 1 this is the
        identity on mu_p_prev for any z_prev.
        """
        if not self.ar_memory:
            raise RuntimeError("ar_prior_step on a bank without ar_memory")
        if mu_p_prev.shape[-1] != self.d_z or z_prev.shape[-1] != self.d_z:
            raise ValueError("ar_prior_step vectors must have width d_z")
        gate = self.gate_raw.sigmoid()
        return gate * mu_p_prev + (1.0 - gate) * (z_prev @ self.W_ar)

    # -- full bank evaluation --------------------------------------------------

    def forward(self, u: Tensor, rng: RngStream | None = None) -> BankResult:
        """Evaluate the bank on a window of positions u (T, d_in).

        With ``rng`` the latent is sampled (one fresh eps per unit/position);
        without it the mean path z = mu_q is used. When the AR memory is on,
        positions are processed sequentially: the memory at position t is the
        AR prior mean built from the previous latent sample, detached so that
        AR-loss gradients stay on the AR parameters.
        """
        if self.ar_memory:
            return self._forward_ar(u, rng)
        mu_q, sigma_q = self.infer_posterior(u)
        zeros_h = Tensor(np.zeros((self.n_units, u.shape[0], self.d_z)))
        mu_p, sigma_p = self.infer_prior(zeros_h)
        pair = LatentDistributionPair(mu_q, sigma_q, mu_p, sigma_p)
        z = sample_latent(pair, rng)
        return self._finish(u.shape[0], pair, z, ar=None)

    def _forward_ar(self, u: Tensor, rng: RngStream | None) -> BankResult:
        t_len = u.shape[0]
        mu_q_steps, sigma_q_steps, sigma_p_steps, z_steps, state_steps = [], [], [], [], []
        state = Tensor(np.zeros((self.n_units, 1, self.d_z)))  # mu_p at t, zero at start
        sigma_state = Tensor(np.zeros((self.n_units, 1, self.d_z))) if self.ar_sigma else None
        for t in range(t_len):
            x_t = u[t:t + 1]
            mu_q, sigma_q = self.infer_posterior(x_t, h=state)
            if self.ar_sigma:
                sigma_p = (sigma_state + self.b_p[..., self.d_z:]).softplus() + self.sigma_min
            else:
                _, sigma_p = self.infer_prior(state)
            pair_t = LatentDistributionPair(mu_q, sigma_q, state, sigma_p)
            z = sample_latent(pair_t, rng)
            mu_q_steps.append(mu_q)
            sigma_q_steps.append(sigma_q)
            sigma_p_steps.append(sigma_p)
            z_steps.append(z)
            state_steps.append(state)
            if t + 1 < t_len:
                z_sg = z.detach()
                state = self.ar_prior_step(state, z_sg)
                if self.ar_sigma:
                    gate_s = self.gate_sigma_raw.sigmoid()
                    sigma_state = gate_s * sigma_state + (1.0 - gate_s) * (z_sg @ self.W_ar_sigma)
        pair = LatentDistributionPair(
            concat(mu_q_steps, axis=1), concat(sigma_q_steps, axis=1),
            concat(state_steps, axis=1), concat(sigma_p_steps, axis=1))
        z_all = concat(z_steps, axis=1)
        ar = ar_loss(pair.mu_p, pair.mu_q)
        return self._finish(t_len, pair, z_all, ar=ar)

    def _finish(self, t_len: int, pair: LatentDistributionPair, z: Tensor,
                ar: Tensor | None) -> BankResult:
        y = self.decode(z)                                   # (U, T, d_out)
        flat = y.transpose((1, 0, 2)).reshape((t_len, self.n_units * self.d_out))
        kl_dim = kl_diag_gauss_per_dim(pair)                 # (U, T, d_z)
        kl_unit_t = kl_dim.sum(axis=-1)                      # (U, T)
        kl_mean = kl_unit_t.mean()
        mu2 = latent_energy(pair.mu_q)                       # (U, T)
        kl_dim_np = kl_dim.data
        mu2_np = mu2.data
        stats = BankStats(
            n_tokens=t_len,
            kl_mean=float(kl_unit_t.data.mean()),
            kl_per_unit=kl_unit_t.data.mean(axis=1),
            kl_per_dim=kl_dim_np.mean(axis=1),
            mu2_mean=float(mu2_np.mean()),
            mu2_sq_mean=float((mu2_np ** 2).mean()),
            mu2_per_unit=mu2_np.mean(axis=1),
            sigma_q_mean=float(pair.sigma_q.data.mean()),
        )
        return BankResult(activations=flat, kl_mean=kl_mean, mu2=mu2,
                          pair=pair, ar=ar, stats=stats)

    def param_count(self) -> int:
        return sum(p.data.size for _, p in self.parameters())
