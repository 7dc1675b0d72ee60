"""Latent diagnostics: structured logging, running aggregates, collapse status.

Runs write line-delimited JSON logs (one object per line). The loss
breakdown is logged every optimizer step by the trainer; full per-layer
latent diagnostics go through DiagWriter.record on a coarser interval.
Running latent-energy moments are maintained so the evaluation-stream mean
and std never require a second pass over the log.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .varneuron import ACTIVE_KL_THRESHOLD


@dataclass
class LayerDiag:
    """One layer's latent summary at one logging step."""

    layer: int
    kl: float                   # mean KL nats per unit
    mu2: float                  # mean latent energy
    mu2_std: float
    weight: float               # head mixing weight
    active_fraction: float      # latent dims with mean KL above threshold
    band: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kl < 0 or self.mu2 < 0 or self.mu2_std < 0:
            raise ValueError("kl, mu2 and mu2_std must be >= 0")
        if not -1e-9 <= self.weight <= 1 + 1e-9:
            raise ValueError(f"head weight {self.weight} outside [0, 1]")


class RunningMoments:
    """Streaming mean/std over scalar observations, mergeable by batch.

    update(count, mean, sq_mean) folds in a pre-aggregated batch; push(x)
    folds in one value. std is the population standard deviation.
    """

    def __init__(self):
        self.n = 0
        self._sum = 0.0
        self._sumsq = 0.0

    def push(self, x: float) -> None:
        self.update(1, float(x), float(x) ** 2)

    def update(self, count: int, mean: float, sq_mean: float) -> None:
        self.n += count
        self._sum += mean * count
        self._sumsq += sq_mean * count

    @property
    def mean(self) -> float:
        return self._sum / self.n if self.n else 0.0

    @property
    def std(self) -> float:
        if not self.n:
            return 0.0
        return math.sqrt(max(self._sumsq / self.n - self.mean ** 2, 0.0))


class JsonlLogger:
    """Append-only line-delimited JSON writer (single writer per run)."""

    def __init__(self, path):
        self.path = str(path)
        os.makedirs(os.path.dirname(self.path) or ".", exist_ok=True)
        self._fh = open(self.path, "a", encoding="utf-8")

    def write(self, record: dict) -> None:
        self._fh.write(json.dumps(record) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_jsonl(path) -> list[dict]:
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


class DiagWriter:
    """Per-layer latent diagnostics recorder with running mu2 aggregates."""

    def __init__(self, logger: JsonlLogger | None = None):
        self.logger = logger
        self.records: list[LayerDiag] = []
        self.mu2_eval = RunningMoments()

    def record(self, step: int, layer_stats: list, head_weights,
               control_snapshots: list | None = None) -> list[LayerDiag]:
        """Append one LayerDiag per layer; stats may be BankStats or dicts."""
        out = []
        for i, st in enumerate(layer_stats):
            get = st.get if isinstance(st, dict) else lambda k, d=None: getattr(st, k, d)
            kl_per_dim = np.asarray(get("kl_per_dim"))
            mu2_mean = float(get("mu2_mean"))
            mu2_sq = get("mu2_sq_mean", None)
            if mu2_sq is None:
                mu2_std = float(get("mu2_std", 0.0))
                mu2_sq = mu2_std ** 2 + mu2_mean ** 2
            else:
                mu2_std = math.sqrt(max(float(mu2_sq) - mu2_mean ** 2, 0.0))
            n_cells = int(get("n_tokens")) * kl_per_dim.shape[0]
            self.mu2_eval.update(n_cells, mu2_mean, float(mu2_sq))
            diag = LayerDiag(
                layer=i,
                kl=float(get("kl_mean")),
                mu2=mu2_mean,
                mu2_std=mu2_std,
                weight=float(np.asarray(head_weights)[i]),
                active_fraction=float((kl_per_dim > ACTIVE_KL_THRESHOLD).mean()),
                band=(control_snapshots[i] if control_snapshots else {}),
            )
            out.append(diag)
            self.records.append(diag)
            if self.logger is not None:
                rec = {"kind": "latent_diag", "step": step}
                rec.update(asdict(diag))
                self.logger.write(rec)
        return out


def collapse_monitor(records, dead: float = 1e-4, weak: float = 1e-2) -> list[str]:
    """Per-layer activity status from mean KL: dead < 1e-4 <= weak < 1e-2 <= active.

    ``records`` may be LayerDiag objects, dicts with layer/kl fields, or a
    plain sequence of per-layer KL values.
    """
    if not 0 < dead < weak:
        raise ValueError("thresholds must satisfy 0 < dead < weak")
    by_layer: dict[int, list[float]] = {}
    for i, r in enumerate(records):
        if isinstance(r, LayerDiag):
            layer, kl = r.layer, r.kl
        elif isinstance(r, dict):
            layer, kl = r["layer"], r["kl"]
        else:
            layer, kl = i, float(r)
        by_layer.setdefault(layer, []).append(kl)

    def status(kl: float) -> str:
        if kl < dead:
            return "dead"
        if kl < weak:
            return "weak"
        return "active"

    return [status(float(np.mean(by_layer[k]))) for k in sorted(by_layer)]
