"""Command-line interface for the full pipeline.

Subcommands: pretrain, finetune-lm, finetune-clf, eval, ablate, lowshot,
dump-schedule. Defaults may come from a JSON config file (--config) whose
top-level keys name the subcommand; explicit flags always win. The report
commands (dump-schedule, ablate, lowshot) write a CSV and render a PNG
next to it unless --no-plot is given.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from .ablation import (AblationSpec, LowShotSpec, VARIANTS, read_curve_csv,
                       read_grid_csv, run_ablation, run_lowshot,
                       write_curve_csv, write_grid_csv)
from .checkpoint import load_checkpoint, save_checkpoint
from .classifier import HeadConfig
from .schedules import StlrSchedule, UnfreezePolicy, cosine_lr, stlr_lr
from .text import read_labeled, read_lm_corpus
from .training import StageConfig, evaluate, run_clf_finetune, run_lm_finetune, run_pretrain

DATA_DIR_ENV = "ULMFIT_DATA_DIR"


def _data_dir() -> Path:
    return Path(os.environ.get(DATA_DIR_ENV, "."))


def _log(msg: str) -> None:
    print(msg, flush=True)


def _parse_seeds(text: str) -> list[int]:
    """Either a count ("5" means seeds 1..5) or an explicit "1,2,7" list."""
    parts = [p for p in text.split(",") if p]
    if len(parts) == 1 and "," not in text:
        return list(range(1, int(parts[0]) + 1))
    return [int(p) for p in parts]


def _parse_list(text: str) -> list[str]:
    return [p for p in text.split(",") if p]


class ConfigMerger:
    """Flag > config-file > built-in default, per subcommand section."""

    def __init__(self, args: argparse.Namespace, section: str):
        self.args = args
        self.section = {}
        if getattr(args, "config", None):
            with open(args.config, encoding="utf-8") as fh:
                self.section = json.load(fh).get(section, {})

    def get(self, key: str, default=None):
        value = getattr(self.args, key, None)
        if value is not None:
            return value
        if key in self.section:
            return self.section[key]
        return default


def _maybe_plot(enabled: bool, render, csv_path) -> None:
    if not enabled:
        return
    png = render(csv_path)
    _log(f"wrote figure {png}")


# ---------------------------------------------------------------------------
# subcommand implementations
# ---------------------------------------------------------------------------

def cmd_pretrain(args) -> int:
    cfg = ConfigMerger(args, "pretrain")
    corpus = cfg.get("corpus", _data_dir() / "pretrain.txt")
    out = Path(cfg.get("out", "lm.ulmf"))
    stage = StageConfig(
        stage="pretrain",
        epochs=int(cfg.get("epochs", 3)),
        batch_size=int(cfg.get("batch_size", 64)),
        base_lr=float(cfg.get("lr", 0.004)),
        schedule=cfg.get("schedule", "constant"),
        bptt_len=int(cfg.get("bptt", 70)),
        length_jitter=cfg.get("length_jitter"),
        seed=int(cfg.get("seed", 1)))
    arch = {}
    for key, name in (("embed_dim", "embed_dim"), ("hidden_dim", "hidden_dim"),
                      ("layers", "n_layers")):
        value = cfg.get(key)
        if value is not None:
            arch[name] = int(value)
    ckpt, metrics = run_pretrain(
        stage, corpus,
        token_mode=cfg.get("token_mode", "char"),
        vocab_size=int(cfg.get("vocab_size", 2000)),
        min_freq=int(cfg.get("min_freq", 1)),
        arch=arch,
        direction=cfg.get("direction", "forward"),
        log=_log)
    save_checkpoint(ckpt, out)
    metrics_path = cfg.get("metrics", out.with_suffix(".metrics.csv"))
    metrics.to_csv(metrics_path)
    _log(f"wrote checkpoint {out} and metrics {metrics_path}")
    return 0


def cmd_finetune_lm(args) -> int:
    cfg = ConfigMerger(args, "finetune_lm")
    model_path = cfg.get("model")
    if model_path is None:
        raise ValueError("finetune-lm needs --model")
    if cfg.get("corpus"):
        task_text = read_lm_corpus(cfg.get("corpus"))
    else:
        data = cfg.get("data", _data_dir() / "labeled.tsv")
        task_text = " ".join(text for _, text in read_labeled(data))
    out = Path(cfg.get("out", "lm_finetuned.ulmf"))
    stage = StageConfig(
        stage="lm_finetune",
        epochs=int(cfg.get("epochs", 4)),
        batch_size=int(cfg.get("batch_size", 32)),
        base_lr=float(cfg.get("lr", 0.004)),
        schedule=cfg.get("schedule", "stlr"),
        discriminative=bool(cfg.get("discriminative", True)),
        bptt_len=int(cfg.get("bptt", 70)),
        seed=int(cfg.get("seed", 1)))
    ckpt, metrics = run_lm_finetune(stage, load_checkpoint(model_path),
                                    task_text, log=_log)
    save_checkpoint(ckpt, out)
    metrics_path = cfg.get("metrics", out.with_suffix(".metrics.csv"))
    metrics.to_csv(metrics_path)
    _log(f"wrote checkpoint {out} and metrics {metrics_path}")
    return 0


def cmd_finetune_clf(args) -> int:
    from .ablation import stratified_split

    cfg = ConfigMerger(args, "finetune_clf")
    model_path = cfg.get("model")
    if model_path is None:
        raise ValueError("finetune-clf needs --model")
    rows = read_labeled(cfg.get("data", _data_dir() / "labeled.tsv"))
    train_rows, val_rows = stratified_split(
        rows, float(cfg.get("val_frac", 0.1)), int(cfg.get("split_seed", 1234)))
    out = Path(cfg.get("out", "classifier.ulmf"))
    stage = StageConfig(
        stage="clf_finetune",
        epochs=int(cfg.get("epochs", 10)),
        batch_size=int(cfg.get("batch_size", 32)),
        base_lr=float(cfg.get("lr", 0.01)),
        schedule=cfg.get("schedule", "stlr"),
        discriminative=bool(cfg.get("discriminative", True)),
        unfreeze=UnfreezePolicy(cfg.get("unfreeze", "gradual")),
        chunk_len=int(cfg.get("chunk_len", 40)),
        grad_window=cfg.get("grad_window"),
        seed=int(cfg.get("seed", 1)))
    head = HeadConfig(n_classes=len({label for label, _ in rows}),
                      hidden=int(cfg.get("head_hidden", 50)))
    ckpt, metrics = run_clf_finetune(
        stage, load_checkpoint(model_path), train_rows, val_rows,
        head_config=head, from_scratch=bool(cfg.get("from_scratch", False)),
        log=_log)
    save_checkpoint(ckpt, out)
    metrics_path = cfg.get("metrics", out.with_suffix(".metrics.csv"))
    metrics.to_csv(metrics_path)
    final = metrics.final()
    _log(f"wrote checkpoint {out} and metrics {metrics_path}")
    _log(f"final validation error {final.val_error:.4f}")
    return 0


def cmd_eval(args) -> int:
    cfg = ConfigMerger(args, "eval")
    model_path = cfg.get("model")
    if model_path is None:
        raise ValueError("eval needs --model")
    rows = read_labeled(cfg.get("data", _data_dir() / "labeled.tsv"))
    ensemble = cfg.get("ensemble_with")
    row = evaluate(load_checkpoint(model_path), rows,
                   ensemble_with=load_checkpoint(ensemble) if ensemble else None,
                   batch_size=int(cfg.get("batch_size", 64)),
                   chunk_len=int(cfg.get("chunk_len", 40)))
    _log(f"error_rate {row.val_error:.6f}")
    return 0


def cmd_ablate(args) -> int:
    cfg = ConfigMerger(args, "ablate")
    data_path = cfg.get("data", _data_dir() / "labeled.tsv")
    rows = read_labeled(data_path)
    variants = cfg.get("variants")
    variants = _parse_list(variants) if isinstance(variants, str) else \
        (variants or list(VARIANTS))
    seeds = cfg.get("seeds", [1, 2, 3, 4, 5])
    seeds = _parse_seeds(seeds) if isinstance(seeds, str) else seeds
    out = cfg.get("out", "ablation.csv")
    spec = AblationSpec(
        data_path=str(data_path),
        lm_checkpoint=cfg.get("pretrained"),
        variants=variants, seeds=seeds, out_path=str(out),
        epochs=int(cfg.get("epochs", 8)),
        batch_size=int(cfg.get("batch_size", 32)),
        chunk_len=int(cfg.get("chunk_len", 40)),
        lm_epochs=int(cfg.get("lm_epochs", 2)),
        train_limit=cfg.get("train_limit"),
        val_frac=float(cfg.get("val_frac", 0.1)),
        jobs=int(cfg.get("jobs", 1)))
    with tempfile.TemporaryDirectory(prefix="ablate-") as work:
        grid = run_ablation(spec, rows, work, log=_log)
    write_grid_csv(out, grid)
    read_grid_csv(out)  # round-trip schema check
    _log(f"wrote grid {out} ({len(grid)} cells)")
    from .plots import render_ablation
    _maybe_plot(not cfg.get("no_plot", False), render_ablation, out)
    return 0


def cmd_lowshot(args) -> int:
    cfg = ConfigMerger(args, "lowshot")
    data_path = cfg.get("data", _data_dir() / "labeled.tsv")
    rows = read_labeled(data_path)
    pretrained = cfg.get("pretrained")
    if pretrained is None:
        raise ValueError("lowshot needs --pretrained LM checkpoint")
    budgets = cfg.get("budgets", [100, 500, 1000])
    if isinstance(budgets, str):
        budgets = [int(b) for b in _parse_list(budgets)]
    modes = cfg.get("modes", ["supervised", "semi_supervised"])
    modes = _parse_list(modes) if isinstance(modes, str) else modes
    seeds = cfg.get("seeds", [1, 2, 3, 4, 5])
    seeds = _parse_seeds(seeds) if isinstance(seeds, str) else seeds
    out = cfg.get("out", "lowshot.csv")
    spec = LowShotSpec(
        data_path=str(data_path), lm_checkpoint=pretrained,
        budgets=budgets, modes=modes, seeds=seeds, out_path=str(out),
        epochs=int(cfg.get("epochs", 12)),
        batch_size=int(cfg.get("batch_size", 32)),
        chunk_len=int(cfg.get("chunk_len", 40)),
        lm_epochs=int(cfg.get("lm_epochs", 2)),
        val_frac=float(cfg.get("val_frac", 0.1)),
        jobs=int(cfg.get("jobs", 1)))
    with tempfile.TemporaryDirectory(prefix="lowshot-") as work:
        curve = run_lowshot(spec, rows, work, log=_log)
    write_curve_csv(out, curve)
    read_curve_csv(out)  # round-trip schema check
    _log(f"wrote curve {out} ({len(curve)} cells)")
    from .plots import render_lowshot
    _maybe_plot(not cfg.get("no_plot", False), render_lowshot, out)
    return 0


def cmd_dump_schedule(args) -> int:
    cfg = ConfigMerger(args, "dump_schedule")
    T = int(cfg.get("T", 1000))
    kind = cfg.get("schedule", "stlr")
    eta_max = float(cfg.get("eta_max", 0.01))
    out = Path(cfg.get("out", "schedule.csv"))
    if kind == "stlr":
        sched = StlrSchedule(T=T, cut_frac=float(cfg.get("cut_frac", 0.1)),
                             ratio=float(cfg.get("ratio", 32.0)),
                             eta_max=eta_max)
        values = [(t, stlr_lr(sched, t)) for t in range(T + 1)]
    elif kind == "cosine":
        eta_min = float(cfg.get("eta_min", 0.0))
        values = [(t, cosine_lr(t, T, eta_max, eta_min)) for t in range(T + 1)]
    else:
        raise ValueError(f"unknown schedule {kind!r}")
    with open(out, "w", encoding="utf-8") as fh:
        fh.write("t,eta\n")
        for t, eta in values:
            fh.write(f"{t},{eta:.12g}\n")
    _log(f"wrote schedule {out}")
    from .plots import render_schedule
    _maybe_plot(not cfg.get("no_plot", False), render_schedule, out)
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ulmfit",
        description="Three-stage LSTM transfer learning for text classification.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file; flags override it")
        p.add_argument("--seed", type=int)

    p = sub.add_parser("pretrain", help="train the general-domain LM")
    common(p)
    p.add_argument("--corpus")
    p.add_argument("--out")
    p.add_argument("--metrics")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--bptt", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--schedule", choices=["constant", "stlr", "cosine"])
    p.add_argument("--length-jitter", dest="length_jitter", type=float)
    p.add_argument("--token-mode", dest="token_mode", choices=["char", "word"])
    p.add_argument("--vocab-size", dest="vocab_size", type=int)
    p.add_argument("--min-freq", dest="min_freq", type=int)
    p.add_argument("--embed-dim", dest="embed_dim", type=int)
    p.add_argument("--hidden-dim", dest="hidden_dim", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--direction", choices=["forward", "backward"])
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("finetune-lm", help="adapt the LM to task text")
    common(p)
    p.add_argument("--model")
    p.add_argument("--corpus")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--metrics")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--bptt", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--schedule", choices=["constant", "stlr", "cosine"])
    p.add_argument("--discriminative", action=argparse.BooleanOptionalAction)
    p.set_defaults(fn=cmd_finetune_lm)

    p = sub.add_parser("finetune-clf", help="train the classifier head")
    common(p)
    p.add_argument("--model")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--metrics")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--schedule", choices=["constant", "stlr", "cosine"])
    p.add_argument("--discriminative", action=argparse.BooleanOptionalAction)
    p.add_argument("--unfreeze",
                   choices=["full", "last_only", "gradual", "chain_thaw"])
    p.add_argument("--chunk-len", dest="chunk_len", type=int)
    p.add_argument("--grad-window", dest="grad_window", type=int)
    p.add_argument("--val-frac", dest="val_frac", type=float)
    p.add_argument("--head-hidden", dest="head_hidden", type=int)
    p.add_argument("--from-scratch", dest="from_scratch", action="store_true",
                   default=None)
    p.set_defaults(fn=cmd_finetune_clf)

    p = sub.add_parser("eval", help="error rate of a classifier checkpoint")
    common(p)
    p.add_argument("--model")
    p.add_argument("--data")
    p.add_argument("--ensemble-with", dest="ensemble_with")
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--chunk-len", dest="chunk_len", type=int)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="run the classifier fine-tuning grid")
    common(p)
    p.add_argument("--data")
    p.add_argument("--pretrained", help="pretrained LM checkpoint")
    p.add_argument("--variants", help="comma list; default all")
    p.add_argument("--seeds", help="count or comma list")
    p.add_argument("--out")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lm-epochs", dest="lm_epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--train-limit", dest="train_limit", type=int)
    p.add_argument("--jobs", type=int)
    p.add_argument("--no-plot", dest="no_plot", action="store_true",
                   default=None)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("lowshot", help="error against label budget")
    common(p)
    p.add_argument("--data")
    p.add_argument("--pretrained")
    p.add_argument("--budgets", help="comma list of label budgets")
    p.add_argument("--modes", help="comma list: supervised,semi_supervised")
    p.add_argument("--seeds", help="count or comma list")
    p.add_argument("--out")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lm-epochs", dest="lm_epochs", type=int)
    p.add_argument("--jobs", type=int)
    p.add_argument("--no-plot", dest="no_plot", action="store_true",
                   default=None)
    p.set_defaults(fn=cmd_lowshot)

    p = sub.add_parser("dump-schedule", help="write (t, eta) rows to CSV")
    common(p)
    p.add_argument("--T", type=int)
    p.add_argument("--cut-frac", dest="cut_frac", type=float)
    p.add_argument("--ratio", type=float)
    p.add_argument("--eta-max", dest="eta_max", type=float)
    p.add_argument("--eta-min", dest="eta_min", type=float)
    p.add_argument("--schedule", choices=["stlr", "cosine"])
    p.add_argument("--out")
    p.add_argument("--no-plot", dest="no_plot", action="store_true",
                   default=None)
    p.set_defaults(fn=cmd_dump_schedule)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except Exception as exc:  # one parseable line, nonzero exit
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
