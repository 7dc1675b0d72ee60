"""Compact causal Transformer with a variational or deterministic FFN path.

Blocks are pre-LN: H~ = H + MHA(LN(H)), then the feed-forward update reads
u = LN(H~). In variational mode u feeds a bank of local variational units
whose concatenated decoded activations are projected back to d_model; in
deterministic mode a two-layer GELU MLP of matched parameter count (within
5%) takes its place. The head mixes the post-block residual streams with a
softmax over per-layer logits, applies the final layer norm, and unembeds.

Checkpoints are self-describing single files:

    magic b"VLMC" | u64 header length | header JSON (utf-8) | payload | sha256

The header records a format version, the model config, parameter index
(name, shape, byte offset), control-loop gains, rng state, epoch and the
selection metric; the payload is raw little-endian floats in index order.
The trailing digest covers everything before it.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .tensor import RngStream, Tensor, embedding, layer_norm, no_grad, softmax
from .varneuron import BankStats, ControlState, UnitBank

CHECKPOINT_MAGIC = b"VLMC"
CHECKPOINT_VERSION = 1


class CheckpointError(IOError):
    """Unreadable, truncated, or corrupted checkpoint file."""


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 2
    d_z: int = 4
    n_units: int = 8
    window_length: int = 128
    ffn_mode: str = "variational"          # or "deterministic"
    layer_aux_enabled: bool = False
    embedding_mode: str = "learned"        # or "frozen_from_file"
    ar_memory: bool = False
    ar_sigma: bool = False
    d_ff: int | None = None                # default 4 * d_model
    sigma_min: float = 1e-4
    init_std: float = 0.02
    mu2_target: float = 0.15
    band_halfwidth: float = 0.10
    homeostat_eta: float = 0.05
    control_enabled: bool = True

    def __post_init__(self):
        if self.d_ff is None:
            self.d_ff = 4 * self.d_model
        sizes = (self.vocab_size, self.d_model, self.n_layers, self.n_heads,
                 self.d_z, self.n_units, self.window_length, self.d_ff)
        if min(sizes) < 1:
            raise ValueError("all config sizes must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.ffn_mode not in ("variational", "deterministic"):
            raise ValueError(f"unknown ffn_mode {self.ffn_mode!r}")
        if self.embedding_mode not in ("learned", "frozen_from_file"):
            raise ValueError(f"unknown embedding_mode {self.embedding_mode!r}")
        if self.ffn_mode == "variational" and self.d_ff % self.n_units:
            raise ValueError(f"d_ff {self.d_ff} not divisible by n_units {self.n_units}")

    @property
    def unit_d_out(self) -> int:
        return self.d_ff // self.n_units


def variational_ffn_params(cfg: ModelConfig) -> int:
    """Parameter count of one variational FFN path (bank + output projection)."""
    dz, dm, do = cfg.d_z, cfg.d_model, cfg.unit_d_out
    per_unit = dm * 2 * dz + 2 * dz + dz * 2 * dz + 2 * dz + dz * do + do
    if cfg.ar_memory:
        per_unit += dz * 2 * dz + dz + dz * dz
    if cfg.ar_sigma:
        per_unit += dz + dz * dz
    return cfg.n_units * per_unit + cfg.d_ff * dm + dm


def matched_det_width(cfg: ModelConfig) -> int:
    """Hidden width of the deterministic MLP that matches the bank's budget.

    A two-layer MLP spends dh * (2 * d_model + 1) + d_model parameters, so
    dh = round((variational total - d_model) / (2 * d_model + 1)).
    """
    target = variational_ffn_params(cfg)
    return max(1, round((target - cfg.d_model) / (2 * cfg.d_model + 1)))


def ffn_param_parity(cfg: ModelConfig) -> tuple[int, int, float]:
    """(variational count, deterministic count, relative gap) for one block."""
    n_var = variational_ffn_params(cfg)
    dh = matched_det_width(cfg)
    n_det = dh * (2 * cfg.d_model + 1) + cfg.d_model
    return n_var, n_det, abs(n_var - n_det) / n_var


class Block:
    """One Transformer block: multi-head causal attention + FFN path."""

    def __init__(self, cfg: ModelConfig, rng: RngStream):
        dm, std = cfg.d_model, cfg.init_std
        self.cfg = cfg
        self.n_heads = cfg.n_heads
        self.d_head = dm // cfg.n_heads

        def p(arr):
            return Tensor(arr, requires_grad=True)

        self.W_q = p(rng.normal((dm, dm)) * std)
        self.W_k = p(rng.normal((dm, dm)) * std)
        self.W_v = p(rng.normal((dm, dm)) * std)
        self.W_o = p(rng.normal((dm, dm)) * std)
        self.b_q, self.b_k, self.b_v, self.b_o = (p(np.zeros(dm)) for _ in range(4))
        self.ln1_g, self.ln2_g = p(np.ones(dm)), p(np.ones(dm))
        self.ln1_b, self.ln2_b = p(np.zeros(dm)), p(np.zeros(dm))

        if cfg.ffn_mode == "variational":
            self.bank = UnitBank(d_in=dm, d_z=cfg.d_z, d_out=cfg.unit_d_out,
                                 n_units=cfg.n_units, rng=rng.child("bank"),
                                 sigma_min=cfg.sigma_min, ar_memory=cfg.ar_memory,
                                 ar_sigma=cfg.ar_sigma, init_std=std)
            self.W_ffn_out = p(rng.normal((cfg.d_ff, dm)) * std)
            self.b_ffn_out = p(np.zeros(dm))
        else:
            dh = matched_det_width(cfg)
            self.W_ffn1 = p(rng.normal((dm, dh)) * std)
            self.b_ffn1 = p(np.zeros(dh))
            self.W_ffn2 = p(rng.normal((dh, dm)) * std)
            self.b_ffn2 = p(np.zeros(dm))

    def parameters(self) -> list[tuple[str, Tensor]]:
        names = ["W_q", "b_q", "W_k", "b_k", "W_v", "b_v", "W_o", "b_o",
                 "ln1_g", "ln1_b", "ln2_g", "ln2_b"]
        out = [(n, getattr(self, n)) for n in names]
        if self.cfg.ffn_mode == "variational":
            out += [("bank." + n, p) for n, p in self.bank.parameters()]
            out += [("W_ffn_out", self.W_ffn_out), ("b_ffn_out", self.b_ffn_out)]
        else:
            out += [(n, getattr(self, n)) for n in ("W_ffn1", "b_ffn1", "W_ffn2", "b_ffn2")]
        return out

    def attention(self, h: Tensor, mask: np.ndarray) -> Tensor:
        """Residual-added causal multi-head attention on h (T, d_model)."""
        t_len, dm = h.shape
        x = layer_norm(h, self.ln1_g, self.ln1_b)
        nh, dh = self.n_heads, self.d_head

        def heads(w, b):
            # (T, dm) -> (nh, T, dh)
            return (x @ w + b).reshape((t_len, nh, dh)).transpose((1, 0, 2))

        q, k, v = heads(self.W_q, self.b_q), heads(self.W_k, self.b_k), heads(self.W_v, self.b_v)
        scores = q @ k.transpose((0, 2, 1)) * (1.0 / math.sqrt(dh)) + Tensor(mask)
        attn = scores.softmax(axis=-1)
        ctx = (attn @ v).transpose((1, 0, 2)).reshape((t_len, dm))
        return h + ctx @ self.W_o + self.b_o

    def ffn(self, h: Tensor, rng: RngStream | None):
        """FFN update on the post-attention stream; returns (out, BankResult|None)."""
        u = layer_norm(h, self.ln2_g, self.ln2_b)
        if self.cfg.ffn_mode == "deterministic":
            mid = (u @ self.W_ffn1 + self.b_ffn1).gelu()
            return h + mid @ self.W_ffn2 + self.b_ffn2, None
        res = self.bank.forward(u, rng=rng)
        update = res.activations @ self.W_ffn_out + self.b_ffn_out
        return h + update, res


@dataclass
class ForwardResult:
    logits: Tensor                      # (T, vocab)
    layer_weights: np.ndarray           # (L,), sums to 1
    kl_layers: list                     # scalar Tensor per block (variational)
    mu2_layers: list                    # (U, T) Tensor per block
    ar_layers: list                     # scalar Tensor or None per block
    stats: list                         # BankStats per block


class Model:
    """Backbone + head. Parameters update only between forward/backward cycles."""

    def __init__(self, cfg: ModelConfig, rng: RngStream,
                 frozen_embedding: np.ndarray | None = None):
        self.cfg = cfg
        dm, std = cfg.d_model, cfg.init_std

        if cfg.embedding_mode == "frozen_from_file":
            if frozen_embedding is None:
                raise ValueError("embedding_mode=frozen_from_file needs an embedding table")
            if frozen_embedding.shape != (cfg.vocab_size, dm):
                raise ValueError(f"frozen embedding shape {frozen_embedding.shape} != "
                                 f"({cfg.vocab_size}, {dm})")
            self.tok_emb = Tensor(frozen_embedding.astype(float), requires_grad=False)
        else:
            self.tok_emb = Tensor(rng.normal((cfg.vocab_size, dm)) * std, requires_grad=True)
        self.pos_emb = Tensor(rng.normal((cfg.window_length, dm)) * std, requires_grad=True)
        self.blocks = [Block(cfg, rng.child("block", i)) for i in range(cfg.n_layers)]
        self.layer_logits = Tensor(np.zeros(cfg.n_layers), requires_grad=True)
        self.lnf_g = Tensor(np.ones(dm), requires_grad=True)
        self.lnf_b = Tensor(np.zeros(dm), requires_grad=True)
        self.W_unemb = Tensor(rng.normal((dm, cfg.vocab_size)) * std, requires_grad=True)
        self.b_unemb = Tensor(np.zeros(cfg.vocab_size), requires_grad=True)
        if cfg.ffn_mode == "variational":
            self.control = [ControlState(mu2_target=cfg.mu2_target,
                                         band_halfwidth=cfg.band_halfwidth,
                                         eta=cfg.homeostat_eta,
                                         enabled=cfg.control_enabled)
                            for _ in range(cfg.n_layers)]
        else:
            self.control = []
        self._mask_cache: dict[int, np.ndarray] = {}

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        if self.tok_emb.requires_grad:
            out.append(("tok_emb", self.tok_emb))
        out.append(("pos_emb", self.pos_emb))
        for i, blk in enumerate(self.blocks):
            out += [(f"blocks.{i}.{n}", p) for n, p in blk.parameters()]
        out += [("layer_logits", self.layer_logits), ("lnf_g", self.lnf_g),
                ("lnf_b", self.lnf_b), ("W_unemb", self.W_unemb), ("b_unemb", self.b_unemb)]
        return out

    def param_count(self) -> int:
        return sum(p.data.size for _, p in self.parameters())

    def head_weights(self) -> np.ndarray:
        """Current mixing weights over per-layer readouts, as plain numpy."""
        with no_grad():
            return self.layer_logits.softmax(axis=-1).data.copy()

    def _mask(self, t_len: int) -> np.ndarray:
        if t_len not in self._mask_cache:
            m = np.triu(np.full((t_len, t_len), -1e9), k=1)
            self._mask_cache[t_len] = m
        return self._mask_cache[t_len]

    def forward(self, tokens: np.ndarray, rng: RngStream | None = None) -> ForwardResult:
        """Next-token logits for one window of token ids (length T).

        In variational mode each block samples from rng (``None`` gives the
        posterior-mean path); in deterministic mode rng is never touched.
        """
        tokens = np.asarray(tokens)
        if tokens.ndim != 1:
            raise ValueError(f"expected a 1-d token window, got shape {tokens.shape}")
        t_len = tokens.shape[0]
        if t_len > self.cfg.window_length:
            raise ValueError(f"window of {t_len} tokens exceeds limit {self.cfg.window_length}")
        if tokens.min() < 0 or tokens.max() >= self.cfg.vocab_size:
            raise ValueError("token id out of range")

        h = embedding(self.tok_emb, tokens) + self.pos_emb[:t_len]
        mask = self._mask(t_len)
        variational = self.cfg.ffn_mode == "variational"
        kl_layers, mu2_layers, ar_layers, stats, reps = [], [], [], [], []
        for i, blk in enumerate(self.blocks):
            h = blk.attention(h, mask)
            block_rng = rng.child("layer", i) if (variational and rng is not None) else None
            h, res = blk.ffn(h, block_rng)
            if res is not None:
                kl_layers.append(res.kl_mean)
                mu2_layers.append(res.mu2)
                ar_layers.append(res.ar)
                stats.append(res.stats)
            reps.append(h)

        w = self.layer_logits.softmax(axis=-1)
        mixed = None
        for i, rep in enumerate(reps):
            term = w[i:i + 1] * layer_norm(rep, self.lnf_g, self.lnf_b)
            mixed = term if mixed is None else mixed + term
        logits = mixed @ self.W_unemb + self.b_unemb
        return ForwardResult(logits=logits, layer_weights=w.data.copy(),
                             kl_layers=kl_layers, mu2_layers=mu2_layers,
                             ar_layers=ar_layers, stats=stats)


# ----------------------------------------------------------------- checkpoints

def _rng_state_jsonable(stream: RngStream | None) -> dict | None:
    if stream is None:
        return None

    def conv(x):
        if isinstance(x, np.ndarray):
            return x.tolist()
        if isinstance(x, dict):
            return {k: conv(v) for k, v in x.items()}
        if isinstance(x, (np.integer,)):
            return int(x)
        return x

    return {"seed": stream.seed_info(), "draws": stream.draws, "state": conv(stream.state())}


def save_checkpoint(path, model: Model, epoch: int = 0, metric: float = float("nan"),
                    select_by: str = "ce", rng: RngStream | None = None,
                    extra: dict | None = None) -> None:
    """Write the model to a single self-describing checkpoint file."""
    params = model.parameters()
    index = []
    offset = 0
    chunks = []
    for name, p in params:
        arr = np.ascontiguousarray(p.data, dtype=np.float64)
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = {
        "version": CHECKPOINT_VERSION,
        "config": dataclasses.asdict(model.cfg),
        "dtype": "<f8",
        "epoch": int(epoch),
        "metric": None if metric != metric else float(metric),
        "select_by": select_by,
        "control_gains": [cs.gain for cs in model.control],
        "rng": _rng_state_jsonable(rng),
        "frozen_embedding": not model.tok_emb.requires_grad,
        "params": index,
        "extra": extra or {},
    }
    if not model.tok_emb.requires_grad:
        header["embedding_table"] = model.tok_emb.data.tolist()
    hbytes = json.dumps(header).encode("utf-8")
    payload = b"".join(chunks)
    body = CHECKPOINT_MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + payload
    digest = hashlib.sha256(body).digest()
    with open(path, "wb") as f:
        f.write(body + digest)


def read_checkpoint_header(path) -> dict:
    """Header JSON only (config, epoch, metric, param index); verifies magic."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (magic {magic!r})")
        (hlen,) = struct.unpack("<Q", f.read(8))
        try:
            return json.loads(f.read(hlen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"{path}: unreadable header: {e}") from e


def load_checkpoint(path) -> tuple[Model, dict]:
    """Rebuild a model from a checkpoint; raises CheckpointError on corruption."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 44 or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch, file is corrupted")
    (hlen,) = struct.unpack("<Q", body[4:12])
    header = json.loads(body[12:12 + hlen].decode("utf-8"))
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {header.get('version')}")
    payload = body[12 + hlen:]

    cfg = ModelConfig(**header["config"])
    frozen = None
    if header.get("frozen_embedding"):
        frozen = np.array(header["embedding_table"], dtype=float)
    model = Model(cfg, RngStream(0), frozen_embedding=frozen)
    by_name = dict(model.parameters())
    seen = set()
    for entry in header["params"]:
        name, shape, off = entry["name"], tuple(entry["shape"]), entry["offset"]
        if name not in by_name:
            raise CheckpointError(f"{path}: unknown parameter {name!r}")
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype=header["dtype"], count=n, offset=off)
        by_name[name].data = arr.reshape(shape).astype(float).copy()
        seen.add(name)
    missing = set(by_name) - seen
    if missing:
        raise CheckpointError(f"{path}: missing parameters {sorted(missing)}")
    for cs, g in zip(model.control, header.get("control_gains", [])):
        cs.gain = g
    meta = {k: header.get(k) for k in ("epoch", "metric", "select_by", "rng", "extra")}
    return model, meta
