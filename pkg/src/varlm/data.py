"""Corpus ingestion, byte-level tokenization, window construction, splits.

Documents are prompt/story pairs. Each example becomes one token stream
<bos> + prompt bytes + <sep> + story bytes, sliced into teacher-forcing
windows of length T+1 (input = window[:-1], target = window[1:]). The
tokenizer is byte-level: ids 0..255 are raw byte values, 256 is <bos>,
257 is <sep>, so round-trips are exact on arbitrary UTF-8 text.
"""
from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass

import numpy as np

from .tensor import RngStream

log = logging.getLogger("varlm.data")

BOS_ID = 256
SEP_ID = 257
VOCAB_SIZE = 258

EMBED_MAGIC = b"VEMB"
EMBED_VERSION = 1


class ByteTokenizer:
    """Reversible byte-level tokenizer: 256 byte ids plus <bos>/<sep>."""

    vocab_size = VOCAB_SIZE

    def encode(self, text: str) -> np.ndarray:
        return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.int64)

    def decode(self, ids) -> str:
        ids = np.asarray(ids)
        kept = ids[ids < 256].astype(np.uint8)
        return kept.tobytes().decode("utf-8")


@dataclass
class Corpus:
    examples: list        # (prompt, story) string pairs
    source: str = ""
    raw_count: int = 0    # records seen before filtering

    def __len__(self):
        return len(self.examples)


def ingest(path, fmt: str = "auto") -> Corpus:
    """Read a corpus file into prompt/story pairs.

    ``fmt``: "jsonl" (one object per line with string fields prompt, story),
    "text" (one document per line, empty prompt), or "auto" by extension.
    Malformed lines are logged with their line number and dropped; more than
    10% malformed aborts the run.
    """
    path = str(path)
    if fmt == "auto":
        fmt = "jsonl" if path.endswith((".jsonl", ".json")) else "text"
    if fmt not in ("jsonl", "text"):
        raise ValueError(f"unknown corpus format {fmt!r}")
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()

    examples = []
    raw = 0
    malformed = 0
    for ln, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        raw += 1
        if fmt == "text":
            examples.append(("", line))
            continue
        try:
            rec = json.loads(line)
            prompt, story = rec["prompt"], rec["story"]
            if not isinstance(prompt, str) or not isinstance(story, str):
                raise TypeError("prompt/story must be strings")
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            malformed += 1
            log.warning("%s line %d: malformed record (%s)", path, ln, e)
            continue
        if (prompt + story).strip():
            examples.append((prompt, story))
    if raw and malformed / raw > 0.10:
        raise ValueError(f"{path}: {malformed}/{raw} records malformed (>10%)")
    if not examples:
        raise ValueError(f"{path}: empty corpus")
    return Corpus(examples=examples, source=path, raw_count=raw)


@dataclass
class SplitSpec:
    val_frac: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.val_frac < 1:
            raise ValueError(f"val_frac must be in (0, 1), got {self.val_frac}")


def split(corpus: Corpus, spec: SplitSpec) -> tuple[Corpus, Corpus]:
    """Deterministic whole-example split: floor(val_frac * N) to validation."""
    n = len(corpus)
    if n < 2:
        raise ValueError(f"cannot split a corpus of {n} example(s)")
    perm = RngStream(spec.seed).permutation(n)
    n_val = math.floor(spec.val_frac * n)
    val_idx = sorted(perm[:n_val].tolist())
    train_idx = sorted(perm[n_val:].tolist())
    mk = lambda idx: Corpus(examples=[corpus.examples[i] for i in idx],
                            source=corpus.source, raw_count=corpus.raw_count)
    return mk(train_idx), mk(val_idx)


@dataclass
class TokenWindow:
    """One teacher-forcing window: a length-(T+1) slice of an example stream.

    input ids are stream[:-1], target ids stream[1:], so target[t] is
    input[t+1] by construction. ``loss_mask`` (aligned to the stream) marks
    positions that count as prediction targets; None means all of them.
    """

    stream: np.ndarray
    origin: int
    loss_mask: np.ndarray | None = None

    @property
    def input_ids(self) -> np.ndarray:
        return self.stream[:-1]

    @property
    def target_ids(self) -> np.ndarray:
        return self.stream[1:]

    def __len__(self):
        return len(self.stream)


def example_stream(prompt: str, story: str,
                   tokenizer: ByteTokenizer | None = None) -> tuple[np.ndarray, int]:
    """(token stream, index of <sep>) for one prompt/story pair."""
    tok = tokenizer or ByteTokenizer()
    p, s = tok.encode(prompt), tok.encode(story)
    stream = np.concatenate([[BOS_ID], p, [SEP_ID], s]).astype(np.int64)
    return stream, len(p) + 1


def make_windows(corpus: Corpus, t_len: int, stride: int | None = None,
                 story_only_loss: bool = False,
                 tokenizer: ByteTokenizer | None = None) -> tuple[list[TokenWindow], int]:
    """Slice every example stream into windows of length T+1.

    Window starts step by ``stride`` (default T, non-overlapping targets);
    a shorter tail window is kept when it still holds at least one
    input/target pair. Returns (windows, skipped count) where skipped counts
    degenerate examples or all-masked windows.
    """
    if t_len < 2:
        raise ValueError(f"window length must be >= 2, got {t_len}")
    stride = t_len if stride is None else stride
    if stride < 1:
        raise ValueError("stride must be >= 1")
    windows = []
    skipped = 0
    for origin, (prompt, story) in enumerate(corpus.examples):
        stream, sep_pos = example_stream(prompt, story, tokenizer)
        if len(stream) < 2:
            skipped += 1
            continue
        mask_full = None
        if story_only_loss:
            mask_full = (np.arange(len(stream)) > sep_pos).astype(float)
        for start in range(0, len(stream) - 1, stride):
            chunk = stream[start:start + t_len + 1]
            if len(chunk) < 2:
                continue
            mask = None if mask_full is None else mask_full[start:start + t_len + 1]
            if mask is not None and mask[1:].sum() == 0:
                skipped += 1       # window with no unmasked targets
                continue
            windows.append(TokenWindow(stream=chunk, origin=origin, loss_mask=mask))
    return windows, skipped


def training_arrays(windows: list[TokenWindow]) -> tuple[list, list]:
    """(streams, masks) lists in the layout the training loop consumes."""
    return [w.stream for w in windows], [w.loss_mask for w in windows]


# -------------------------------------------------------- frozen embedding file

def save_embedding(path, matrix: np.ndarray) -> None:
    """Write an embedding table: magic | version | vocab | d_model | <f8 rows."""
    matrix = np.ascontiguousarray(matrix, dtype=np.float64)
    if matrix.ndim != 2:
        raise ValueError("embedding table must be 2-d")
    with open(path, "wb") as f:
        f.write(EMBED_MAGIC)
        f.write(struct.pack("<III", EMBED_VERSION, matrix.shape[0], matrix.shape[1]))
        f.write(matrix.tobytes())


def load_embedding(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != EMBED_MAGIC:
        raise ValueError(f"{path}: not an embedding file")
    version, vocab, dm = struct.unpack("<III", blob[4:16])
    if version != EMBED_VERSION:
        raise ValueError(f"{path}: unsupported embedding version {version}")
    data = np.frombuffer(blob[16:], dtype="<f8")
    if data.size != vocab * dm:
        raise ValueError(f"{path}: payload size {data.size} != {vocab}x{dm}")
    return data.reshape(vocab, dm).copy()


# ------------------------------------------------------------ synthetic corpus

_WORDS = ["the", "cat", "sat", "on", "a", "mat", "dog", "ran", "far", "and",
          "sun", "was", "hot", "bird", "flew", "home", "rain", "fell", "all", "day"]
_NOUNS = ["cat", "dog", "bird", "sun", "rain"]


def synthetic_corpus(n_docs: int = 50, seed: int = 0) -> Corpus:
    """Small repetitive prompt/story corpus for demos and self-contained runs.

    Text is low-entropy English-like word salad, so a byte model can make
    fast measurable progress on it.
    """
    r = np.random.default_rng(seed)
    examples = []
    for _ in range(n_docs):
        noun = _NOUNS[r.integers(len(_NOUNS))]
        prompt = f"tell about the {noun}"
        n_words = int(r.integers(8, 17))
        words = [_WORDS[r.integers(len(_WORDS))] for _ in range(n_words)]
        story = " ".join([f"the {noun}"] + words) + "."
        examples.append((prompt, story))
    return Corpus(examples=examples, source=f"synthetic(n={n_docs}, seed={seed})",
                  raw_count=n_docs)
