"""Command-line entry points: train, eval, compare, report.

Runs are driven by a JSON config file; every unset field falls back to a
spelled-out default and the fully resolved config is written next to the run
outputs, so each run directory is self-documenting. Exit codes: 0 success,
1 usage or config error, 2 numeric failure (non-finite metrics), 3 I/O error.

Outputs per training run: config_resolved.json, train_log.jsonl (per-step
loss records and periodic latent diagnostics), epochs.jsonl (per-epoch
validation metrics), best.ckpt / last.ckpt, report.json, report.csv.
"""
from __future__ import annotations

import argparse
import copy
import json
import math
import os
import sys

import numpy as np

from .data import (SplitSpec, ingest, load_embedding, make_windows, split,
                   synthetic_corpus, training_arrays)
from .diagnostics import DiagWriter, JsonlLogger, collapse_monitor, read_jsonl
from .mceval import MetricsReport, evaluate
from .model import (CheckpointError, Model, ModelConfig, ffn_param_parity,
                    load_checkpoint, save_checkpoint)
from .objective import TrainSettings, Trainer, select_best
from .tensor import RngStream

OUT_DIR_ENV = "VARLM_OUT"
PLOT_FLOOR = 1e-8          # visualization floor for exact zeros on log plots
TABLE_METRICS = ["ce", "ppl", "acc", "nll", "ece", "mutual_information",
                 "top1_flip_rate_mc", "cvar_nll"]


class UsageError(Exception):
    """Bad arguments or config; maps to exit code 1."""


class NumericFailure(Exception):
    """Run produced non-finite metrics; maps to exit code 2."""


DEFAULT_CONFIG = {
    "seed": 0,
    "out_dir": "runs/run0",
    "model": {
        "vocab_size": 258,
        "d_model": 32,
        "n_layers": 2,
        "n_heads": 2,
        "d_z": 4,
        "n_units": 8,
        "window_length": 64,
        "ffn_mode": "variational",
        "layer_aux_enabled": False,
        "embedding_mode": "learned",
        "ar_memory": False,
        "ar_sigma": False,
        "d_ff": None,
        "sigma_min": 1e-4,
        "init_std": 0.02,
        "mu2_target": 0.15,
        "band_halfwidth": 0.10,
        "homeostat_eta": 0.05,
        "control_enabled": True,
    },
    "objective": {"beta": 1e-2, "alpha_ar": 1.0, "warmup_frac": 0.1},
    "data": {
        "path": None,                # None -> synthetic corpus
        "format": "auto",
        "synthetic_docs": 50,
        "synthetic_seed": 0,
        "val_frac": 0.2,
        "split_seed": 0,
        "stride": None,              # None -> window_length
        "story_only_loss": False,
        "embedding_path": None,
    },
    "training": {
        "epochs": 2,
        "batch_size": 8,
        "lr": 3e-3,
        "clip_norm": 1.0,
        "select_by": "ce",
        "window_steps": 20,
        "diag_every": 50,
    },
    "eval": {"m_samples": 8, "cvar_alpha": 0.05, "ece_bins": 15,
             "top1_variance": False},
}


def _merge_config(defaults: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(defaults)
    for key, value in override.items():
        if key not in defaults:
            raise UsageError(f"unknown config key '{path}{key}'")
        if isinstance(defaults[key], dict) and isinstance(value, dict):
            out[key] = _merge_config(defaults[key], value, f"{path}{key}.")
        else:
            out[key] = value
    return out


def load_run_config(path: str | None = None, seed: int | None = None,
                    out_dir: str | None = None, overrides: dict | None = None) -> dict:
    """Resolved run config dict from a JSON file plus CLI overrides."""
    user = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as f:
                user = json.load(f)
        except json.JSONDecodeError as e:
            raise UsageError(f"{path}: invalid JSON config: {e}") from e
    cfg = _merge_config(DEFAULT_CONFIG, user)
    if overrides:
        cfg = _merge_config(cfg, overrides)
    if seed is not None:
        cfg["seed"] = seed
    if out_dir is not None:
        cfg["out_dir"] = out_dir
    if os.environ.get(OUT_DIR_ENV):
        cfg["out_dir"] = os.environ[OUT_DIR_ENV]
    _validate_run_config(cfg)
    return cfg


def _validate_run_config(cfg: dict) -> None:
    if cfg["seed"] is None:
        raise UsageError("seed is mandatory")
    epochs = cfg["training"]["epochs"]
    if not isinstance(epochs, int) or isinstance(epochs, bool) or epochs < 1:
        raise UsageError("epochs must be >= 1")
    if cfg["training"]["select_by"] not in ("ce", "loss", "nll"):
        raise UsageError(f"select_by must be ce, loss or nll, "
                         f"got {cfg['training']['select_by']!r}")
    for key in ("lr", "batch_size"):
        v = cfg["training"][key]
        if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
            raise UsageError(f"training.{key} must be positive and finite")
    try:
        model_config(cfg)
    except ValueError as e:
        raise UsageError(f"invalid model config: {e}") from e


def model_config(cfg: dict) -> ModelConfig:
    return ModelConfig(**cfg["model"])


def build_datasets(cfg: dict):
    """(train windows, val windows) of TokenWindow per the data section."""
    d = cfg["data"]
    if d["path"] is None:
        corpus = synthetic_corpus(d["synthetic_docs"], seed=d["synthetic_seed"])
    else:
        corpus = ingest(d["path"], fmt=d["format"])
    train_c, val_c = split(corpus, SplitSpec(val_frac=d["val_frac"],
                                             seed=d["split_seed"]))
    t_len = cfg["model"]["window_length"]
    train_ws, _ = make_windows(train_c, t_len=t_len, stride=d["stride"],
                               story_only_loss=d["story_only_loss"])
    val_ws, _ = make_windows(val_c, t_len=t_len, stride=d["stride"],
                             story_only_loss=d["story_only_loss"])
    if not train_ws or not val_ws:
        raise UsageError("corpus too small: empty train or validation window set")
    return train_ws, val_ws


def build_model(cfg: dict) -> Model:
    mc = model_config(cfg)
    frozen = None
    if mc.embedding_mode == "frozen_from_file":
        path = cfg["data"]["embedding_path"]
        if path is None:
            raise UsageError("embedding_mode=frozen_from_file needs data.embedding_path")
        frozen = load_embedding(path)
    return Model(mc, RngStream(cfg["seed"]).child("init"), frozen_embedding=frozen)


def _metric_of(report: MetricsReport, select_by: str) -> float:
    if select_by in ("ce", "loss"):
        return float(report.final_validation[select_by])
    return float(report.extended["nll"])


def _eval_rng(seed: int, tag) -> RngStream:
    return RngStream(seed).child("eval", tag)


def _run_eval(model: Model, val_ws, cfg: dict, tag, skipped: int,
              selected_epoch: int | None) -> MetricsReport:
    e = cfg["eval"]
    return evaluate(model, val_ws, m_samples=e["m_samples"],
                    rng=_eval_rng(cfg["seed"], tag),
                    beta=cfg["objective"]["beta"],
                    cvar_alpha=e["cvar_alpha"], ece_bins=e["ece_bins"],
                    report_top1_variance=e["top1_variance"],
                    skipped_batches=skipped, selected_epoch=selected_epoch)


def run_train(cfg: dict) -> MetricsReport:
    """Full training run; writes all artifacts under cfg['out_dir']."""
    out = cfg["out_dir"]
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config_resolved.json"), "w", encoding="utf-8") as f:
        json.dump(cfg, f, indent=2)

    train_ws, val_ws = build_datasets(cfg)
    streams, masks = training_arrays(train_ws)
    model = build_model(cfg)

    t = cfg["training"]
    steps_per_epoch = math.ceil(len(streams) / t["batch_size"])
    warmup = int(cfg["objective"]["warmup_frac"] * steps_per_epoch * t["epochs"])
    settings = TrainSettings(lr=t["lr"], batch_size=t["batch_size"],
                             beta=cfg["objective"]["beta"],
                             alpha_ar=cfg["objective"]["alpha_ar"],
                             clip_norm=t["clip_norm"], warmup_steps=warmup,
                             window_steps=t["window_steps"],
                             diag_every=t["diag_every"])

    best_path = os.path.join(out, "best.ckpt")
    epoch_log_path = os.path.join(out, "epochs.jsonl")
    if os.path.exists(epoch_log_path):
        os.remove(epoch_log_path)
    log_path = os.path.join(out, "train_log.jsonl")
    if os.path.exists(log_path):
        os.remove(log_path)

    with JsonlLogger(log_path) as logger, JsonlLogger(epoch_log_path) as epoch_log:
        diag = DiagWriter(logger)

        def diag_fn(step, stats, snapshots):
            if stats:
                diag.record(step, stats, head_weights=model.head_weights(),
                            control_snapshots=snapshots)

        trainer = Trainer(model, settings, RngStream(cfg["seed"]).child("train"),
                          log_fn=lambda rec: logger.write({"kind": "step", **rec}),
                          diag_fn=diag_fn)

        history = []
        best_metric = None
        for epoch in range(1, t["epochs"] + 1):
            trainer.train(streams, masks=masks, epochs=1)
            rep = _run_eval(model, val_ws, cfg, tag=epoch,
                            skipped=trainer.skipped, selected_epoch=None)
            metric = _metric_of(rep, t["select_by"])
            history.append(metric)
            improved = best_metric is None or metric < best_metric
            if improved:
                best_metric = metric
                save_checkpoint(best_path, model, epoch=epoch, metric=metric,
                                select_by=t["select_by"], rng=trainer.rng,
                                extra={"run_config": cfg, "skipped": trainer.skipped})
            epoch_log.write({"kind": "epoch", "epoch": epoch,
                             "metric": metric, "select_by": t["select_by"],
                             "ce": rep.final_validation["ce"],
                             "loss": rep.final_validation["loss"],
                             "nll": rep.extended["nll"],
                             "improved": improved})
        save_checkpoint(os.path.join(out, "last.ckpt"), model, epoch=t["epochs"],
                        metric=history[-1], select_by=t["select_by"],
                        rng=trainer.rng,
                        extra={"run_config": cfg, "skipped": trainer.skipped})

    selected = select_best(history)
    best_model, meta = load_checkpoint(best_path)
    assert meta["epoch"] == selected, (meta["epoch"], selected)
    final = _run_eval(best_model, val_ws, cfg, tag="final",
                      skipped=int(meta["extra"]["skipped"]), selected_epoch=selected)
    _write_report(out, final)
    if not final.meta["finite_ok"]:
        raise NumericFailure(f"non-finite metrics in {out}/report.json")
    return final


def _write_report(out_dir: str, report: MetricsReport) -> None:
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as f:
        f.write(report.to_json() + "\n")
    with open(os.path.join(out_dir, "report.csv"), "w", encoding="utf-8") as f:
        f.write(report.to_csv())


def run_eval(ckpt_path: str, cfg: dict | None = None,
             out_dir: str | None = None) -> MetricsReport:
    """Re-evaluate a checkpoint; defaults to its stored run config."""
    model, meta = load_checkpoint(ckpt_path)
    stored = (meta.get("extra") or {}).get("run_config")
    if cfg is None:
        if stored is None:
            raise UsageError(f"{ckpt_path} has no embedded run config; pass --config")
        cfg = stored
    _, val_ws = build_datasets(cfg)
    report = _run_eval(model, val_ws, cfg, tag="final",
                       skipped=int((meta.get("extra") or {}).get("skipped", 0)),
                       selected_epoch=meta.get("epoch"))
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        _write_report(out_dir, report)
    if not report.meta["finite_ok"]:
        raise NumericFailure("non-finite metrics in evaluation")
    return report


# -------------------------------------------------------------------- compare

BACKBONE_KEYS = ("vocab_size", "d_model", "n_layers", "n_heads",
                 "window_length", "embedding_mode")


def _check_matched(cfg_a: dict, cfg_b: dict) -> None:
    for key in BACKBONE_KEYS:
        if cfg_a["model"][key] != cfg_b["model"][key]:
            raise UsageError(f"backbone mismatch: model.{key} differs "
                             f"({cfg_a['model'][key]} vs {cfg_b['model'][key]})")
    if cfg_a["data"] != cfg_b["data"]:
        raise UsageError("data sections differ; comparison must share data")
    if cfg_a["seed"] != cfg_b["seed"]:
        raise UsageError("seeds differ; comparison must share the seed")
    for cfg in (cfg_a, cfg_b):
        if cfg["model"]["ffn_mode"] == "variational":
            _, _, gap = ffn_param_parity(model_config(cfg))
            if gap > 0.05:
                raise UsageError(f"FFN parameter parity {gap:.1%} exceeds 5%")


def _format_table(headers: list[str], rows: list[list]) -> str:
    def fmt(v):
        if isinstance(v, float):
            return f"{v:.6g}"
        return str(v)

    cells = [[fmt(v) for v in row] for row in rows]
    widths = [max(len(h), *(len(r[i]) for r in cells)) if cells else len(h)
              for i, h in enumerate(headers)]
    line = lambda vals: "  ".join(v.ljust(w) for v, w in zip(vals, widths))
    sep = "  ".join("-" * w for w in widths)
    return "\n".join([line(headers), sep] + [line(r) for r in cells])


def _plot_ce_curves(path: str, curves: dict) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.4))
    for name, ys in curves.items():
        ax.plot(range(1, len(ys) + 1), ys, marker="o", label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("validation CE (nats/token)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def _plot_epistemic_bars(path: str, rows: dict) -> None:
    """Log-scale bars; exact zeros are drawn at the documented floor."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    metrics = ["mutual_information", "conditional_variance_mc", "top1_flip_rate_mc"]
    names = list(rows)
    x = np.arange(len(metrics))
    width = 0.8 / len(names)
    fig, ax = plt.subplots(figsize=(5.5, 3.4))
    for j, name in enumerate(names):
        vals = [max(rows[name][m], PLOT_FLOOR) for m in metrics]
        ax.bar(x + j * width, vals, width=width, label=name)
    ax.set_yscale("log")
    ax.set_xticks(x + width * (len(names) - 1) / 2)
    ax.set_xticklabels(["MI", "cond. var.", "top-1 flips"])
    ax.set_ylabel(f"value (log scale; zeros at {PLOT_FLOOR:g} floor)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def run_compare(cfg_a: dict, cfg_b: dict, out_dir: str) -> dict:
    """Train both configs against the shared backbone/data/seed, compare."""
    _check_matched(cfg_a, cfg_b)
    os.makedirs(out_dir, exist_ok=True)
    names = []
    for i, cfg in enumerate((cfg_a, cfg_b)):
        mode = "det" if cfg["model"]["ffn_mode"] == "deterministic" else "var"
        names.append(f"{'ab'[i]}_{mode}")
    reports = {}
    curves = {}
    for name, cfg in zip(names, (cfg_a, cfg_b)):
        cfg = copy.deepcopy(cfg)
        cfg["out_dir"] = os.path.join(out_dir, name)
        reports[name] = run_train(cfg)
        curves[name] = [rec["ce"] for rec in
                        read_jsonl(os.path.join(cfg["out_dir"], "epochs.jsonl"))]

    rows = []
    flat = {}
    for name in names:
        rep = reports[name]
        merged = {**rep.final_validation, **rep.extended}
        flat[name] = merged
        rows.append([name] + [merged[m] for m in TABLE_METRICS])
    table = _format_table(["run"] + TABLE_METRICS, rows)

    with open(os.path.join(out_dir, "compare.csv"), "w", encoding="utf-8") as f:
        f.write(",".join(["run"] + TABLE_METRICS) + "\n")
        for row in rows:
            f.write(",".join(repr(v) if isinstance(v, float) else str(v)
                             for v in row) + "\n")
    with open(os.path.join(out_dir, "ce_curves.csv"), "w", encoding="utf-8") as f:
        f.write("run,epoch,ce\n")
        for name, ys in curves.items():
            for e, ce in enumerate(ys, start=1):
                f.write(f"{name},{e},{ce!r}\n")
    _plot_ce_curves(os.path.join(out_dir, "ce_curves.svg"), curves)
    _plot_epistemic_bars(os.path.join(out_dir, "epistemic_bars.svg"), flat)
    with open(os.path.join(out_dir, "compare.txt"), "w", encoding="utf-8") as f:
        f.write(table + "\n")
    print(table)
    return {"names": names, "reports": reports, "table": table}


# --------------------------------------------------------------------- report

def run_report(log_dir: str) -> str:
    """Render summary tables from run directories under log_dir."""
    if not os.path.isdir(log_dir):
        raise FileNotFoundError(f"{log_dir}: not a directory")
    runs = []
    for name in sorted(os.listdir(log_dir)):
        rp = os.path.join(log_dir, name, "report.json")
        if os.path.isfile(rp):
            with open(rp, "r", encoding="utf-8") as f:
                runs.append((name, MetricsReport.from_json(f.read())))
    if os.path.isfile(os.path.join(log_dir, "report.json")):
        with open(os.path.join(log_dir, "report.json"), "r", encoding="utf-8") as f:
            runs.insert(0, (os.path.basename(log_dir.rstrip("/")),
                            MetricsReport.from_json(f.read())))
    if not runs:
        raise FileNotFoundError(f"{log_dir}: no report.json found in any run")

    rows = []
    for name, rep in runs:
        merged = {**rep.final_validation, **rep.extended}
        rows.append([name] + [merged[m] for m in TABLE_METRICS])
    out = ["== final and extended validation ==",
           _format_table(["run"] + TABLE_METRICS, rows)]

    latent_rows = []
    for name, rep in runs:
        layers = rep.internal.get("layers", [])
        if not layers:
            continue
        statuses = collapse_monitor([{"layer": i, "kl": l["kl"]}
                                     for i, l in enumerate(layers)])
        for i, (layer, st) in enumerate(zip(layers, statuses)):
            latent_rows.append([name, i, layer["kl"], layer["mu2"],
                                layer.get("mu2_std", 0.0), layer["weight"],
                                layer.get("active_latent_fraction",
                                          layer.get("active_fraction", 0.0)), st])
    if latent_rows:
        out += ["", "== per-layer latent diagnostics ==",
                _format_table(["run", "layer", "kl", "mu2", "mu2_std", "weight",
                               "active_frac", "status"], latent_rows)]
    text = "\n".join(out)
    print(text)
    return text


# ------------------------------------------------------------------------ CLI

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--seed", type=int, help="override config seed")
    p.add_argument("--out", help="override output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="varlm",
        description="Compact variational-FFN language model: train, evaluate, "
                    "compare against the matched deterministic baseline.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model per config")
    _add_common(p_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("checkpoint")
    _add_common(p_eval)

    p_cmp = sub.add_parser("compare", help="matched two-config comparison")
    p_cmp.add_argument("--det", required=True, help="first run config (baseline)")
    p_cmp.add_argument("--var", required=True, help="second run config")
    p_cmp.add_argument("--seed", type=int, help="override both seeds")
    p_cmp.add_argument("--out", default="runs/compare", help="output directory")

    p_rep = sub.add_parser("report", help="render tables from run logs")
    p_rep.add_argument("log_dir")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "train":
            cfg = load_run_config(args.config, seed=args.seed, out_dir=args.out)
            report = run_train(cfg)
            print(f"selected epoch {report.meta['selected_epoch']}; "
                  f"ce={report.final_validation['ce']:.4f} "
                  f"ppl={report.final_validation['ppl']:.3f} "
                  f"acc={report.final_validation['acc']:.4f}")
        elif args.command == "eval":
            cfg = None
            if args.config is not None:
                cfg = load_run_config(args.config, seed=args.seed)
            report = run_eval(args.checkpoint, cfg=cfg, out_dir=args.out)
            print(report.to_json())
        elif args.command == "compare":
            cfg_a = load_run_config(args.det, seed=args.seed)
            cfg_b = load_run_config(args.var, seed=args.seed)
            out = args.out
            if os.environ.get(OUT_DIR_ENV):
                out = os.environ[OUT_DIR_ENV]
            run_compare(cfg_a, cfg_b, out)
        elif args.command == "report":
            run_report(args.log_dir)
        return 0
    except (UsageError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except NumericFailure as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 2
    except (CheckpointError, OSError) as e:
        print(f"io error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
