"""Classifier fine-tuning ablation grid and low-shot learning curves.

Every grid variant shares the same two earlier stages (the pretrained and
task-adapted LM); only the classifier stage differs, which is what the
variant names describe: which groups unfreeze, whether layer-wise
discriminative rates apply, and which schedule shapes the learning rate.
``from_scratch`` instead starts from a randomly initialized trunk. All
variants except the full method train with patience-based early stopping.
"""

from __future__ import annotations

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .classifier import HeadConfig
from .schedules import UnfreezePolicy
from .training import (RunMetrics, StageConfig, TrainingError,
                       run_clf_finetune, run_lm_finetune)

# light head regularization suits the bundled corpus scale
DESK_HEAD_DROPS = (0.1, 0.05)


@dataclass(frozen=True)
class Variant:
    """One row of the classifier fine-tuning grid."""
    name: str
    pretrained: bool = True
    unfreeze: str = "full"
    discriminative: bool = False
    schedule: str = "constant"
    base_lr: float = 0.001
    group_lr_overrides: Optional[tuple[float, ...]] = None
    early_stopping: bool = True


def _chain_thaw_lrs(n_groups: int) -> tuple[float, ...]:
    # head trains at 1e-3, every other group at 1e-4
    return tuple([1e-4] * (n_groups - 1) + [1e-3])


VARIANTS: dict[str, Variant] = {v.name: v for v in [
    Variant("from_scratch", pretrained=False, unfreeze="full"),
    Variant("full", unfreeze="full"),
    Variant("full_discr", unfreeze="full", discriminative=True, base_lr=0.01),
    Variant("full_discr_stlr", unfreeze="full", discriminative=True,
            base_lr=0.01, schedule="stlr"),
    Variant("last", unfreeze="last_only"),
    Variant("chain_thaw", unfreeze="chain_thaw",
            group_lr_overrides=_chain_thaw_lrs(5)),
    Variant("freez", unfreeze="gradual"),
    Variant("freez_discr", unfreeze="gradual", discriminative=True,
            base_lr=0.01),
    Variant("freez_stlr", unfreeze="gradual", schedule="stlr"),
    Variant("freez_cos", unfreeze="gradual", schedule="cosine"),
    Variant("freez_discr_stlr", unfreeze="gradual", discriminative=True,
            base_lr=0.01, schedule="stlr", early_stopping=False),
]}


@dataclass
class AblationSpec:
    """Grid request: which variants, which seeds, on which data."""
    data_path: str
    lm_checkpoint: Optional[str] = None
    variants: list[str] = field(default_factory=lambda: list(VARIANTS))
    seeds: list[int] = field(default_factory=lambda: [1, 2, 3, 4, 5])
    out_path: str = "ablation.csv"
    epochs: int = 8
    batch_size: int = 32
    chunk_len: int = 40
    lm_epochs: int = 2
    train_limit: Optional[int] = None
    val_frac: float = 0.1
    split_seed: int = 1234
    patience: int = 2
    jobs: int = 1

    def __post_init__(self):
        unknown = [v for v in self.variants if v not in VARIANTS]
        if unknown:
            raise TrainingError(f"unknown ablation variants: {unknown}")
        needs_lm = any(VARIANTS[v].pretrained for v in self.variants)
        if needs_lm and self.lm_checkpoint is None:
            raise TrainingError(
                "pretrained variants need an LM checkpoint (lm_checkpoint)")


@dataclass
class LowShotSpec:
    """Learning-curve request over ascending label budgets."""
    data_path: str
    lm_checkpoint: str
    budgets: list[int] = field(default_factory=lambda: [100, 500, 1000])
    modes: list[str] = field(default_factory=lambda: ["supervised", "semi_supervised"])
    seeds: list[int] = field(default_factory=lambda: [1, 2, 3, 4, 5])
    out_path: str = "lowshot.csv"
    epochs: int = 24
    batch_size: int = 16
    chunk_len: int = 40
    lm_epochs: int = 3
    val_frac: float = 0.1
    split_seed: int = 1234
    patience: int = 2
    jobs: int = 1

    def __post_init__(self):
        if sorted(self.budgets) != list(self.budgets):
            raise TrainingError("budgets must be ascending")
        bad = [m for m in self.modes if m not in ("supervised", "semi_supervised")]
        if bad:
            raise TrainingError(f"unknown low-shot modes: {bad}")


# ---------------------------------------------------------------------------
# data splitting
# ---------------------------------------------------------------------------

def stratified_split(rows: Sequence[tuple[str, str]], val_frac: float,
                     seed: int) -> tuple[list, list]:
    """Per-class shuffled split; val share is exact to within one example."""
    by_class: dict[str, list[int]] = {}
    for i, (label, _) in enumerate(rows):
        by_class.setdefault(label, []).append(i)
    rng = np.random.default_rng(seed)
    val_idx: list[int] = []
    for label in sorted(by_class):
        idx = np.array(by_class[label])
        rng.shuffle(idx)
        n_val = int(round(len(idx) * val_frac))
        val_idx.extend(idx[:n_val].tolist())
    val_set = set(val_idx)
    train = [rows[i] for i in range(len(rows)) if i not in val_set]
    val = [rows[i] for i in sorted(val_set)]
    return train, val


def balanced_subsample(rows: Sequence[tuple[str, str]], budget: int,
                       seed: int) -> list[tuple[str, str]]:
    """Evenly split ``budget`` examples over the classes."""
    by_class: dict[str, list[int]] = {}
    for i, (label, _) in enumerate(rows):
        by_class.setdefault(label, []).append(i)
    labels = sorted(by_class)
    per_class, extra = divmod(budget, len(labels))
    rng = np.random.default_rng(seed)
    picked: list[int] = []
    for j, label in enumerate(labels):
        want = per_class + (1 if j < extra else 0)
        pool = by_class[label]
        if want > len(pool):
            raise TrainingError(
                f"budget {budget} needs {want} examples of class {label!r}, "
                f"only {len(pool)} available")
        idx = np.array(pool)
        rng.shuffle(idx)
        picked.extend(idx[:want].tolist())
    return [rows[i] for i in sorted(picked)]


# ---------------------------------------------------------------------------
# grid cells
# ---------------------------------------------------------------------------

def _variant_config(variant: Variant, spec: AblationSpec, seed: int) -> StageConfig:
    return StageConfig(
        stage="clf_finetune", epochs=spec.epochs, batch_size=spec.batch_size,
        base_lr=variant.base_lr, schedule=variant.schedule,
        discriminative=variant.discriminative,
        unfreeze=UnfreezePolicy(variant.unfreeze), seed=seed,
        chunk_len=spec.chunk_len,
        group_lr_overrides=(list(variant.group_lr_overrides)
                            if variant.group_lr_overrides else None),
        early_stop_patience=spec.patience if variant.early_stopping else None)


def _reported_error(metrics: RunMetrics, early_stopped: bool) -> float:
    errors = [r.val_error for r in metrics.rows if r.val_error is not None]
    if not errors:
        raise TrainingError("no validation error recorded")
    return min(errors) if early_stopped else errors[-1]


def _run_cell(args) -> tuple[str, int, float]:
    variant_name, seed, lm_ckpt_path, train_rows, val_rows, spec = args
    variant = VARIANTS[variant_name]
    lm_ckpt = load_checkpoint(lm_ckpt_path)
    config = _variant_config(variant, spec, seed)
    n_classes = len({label for label, _ in train_rows})
    head = HeadConfig(n_classes=n_classes, drops=DESK_HEAD_DROPS)
    _, metrics = run_clf_finetune(config, lm_ckpt, train_rows, val_rows,
                                  head_config=head,
                                  from_scratch=not variant.pretrained)
    return variant_name, seed, _reported_error(metrics, variant.early_stopping)


def _finetune_shared_lm(lm_checkpoint: str, train_rows, epochs: int,
                        work_dir: Path, seed: int = 1,
                        log=lambda s: None) -> str:
    """Adapt the pretrained LM once on the task text; all cells share it."""
    ckpt = load_checkpoint(lm_checkpoint)
    task_text = " ".join(text for _, text in train_rows)
    config = StageConfig(stage="lm_finetune", epochs=epochs, batch_size=32,
                         base_lr=0.004, schedule="stlr", discriminative=True,
                         seed=seed)
    tuned, _ = run_lm_finetune(config, ckpt, task_text, log=log)
    out = work_dir / "lm_finetuned.ulmf"
    save_checkpoint(tuned, out)
    return str(out)


def run_ablation(spec: AblationSpec, rows: Sequence[tuple[str, str]],
                 work_dir, log=lambda s: None) -> list[tuple[str, int, float]]:
    """Train every (variant, seed) cell and return sorted grid rows."""
    work_dir = Path(work_dir)
    work_dir.mkdir(parents=True, exist_ok=True)
    train_rows, val_rows = stratified_split(rows, spec.val_frac, spec.split_seed)
    if spec.train_limit is not None and spec.train_limit < len(train_rows):
        train_rows = balanced_subsample(train_rows, spec.train_limit,
                                        spec.split_seed)
    lm_path = spec.lm_checkpoint
    if lm_path is not None and any(VARIANTS[v].pretrained for v in spec.variants):
        log(f"fine-tuning shared LM on {len(train_rows)} task documents")
        lm_path = _finetune_shared_lm(lm_path, train_rows, spec.lm_epochs,
                                      work_dir, log=log)
    cells = [(v, s, lm_path, train_rows, val_rows, spec)
             for v in spec.variants for s in spec.seeds]
    results: list[tuple[str, int, float]] = []
    if spec.jobs > 1:
        with ProcessPoolExecutor(max_workers=spec.jobs) as pool:
            for res in pool.map(_run_cell, cells):
                results.append(res)
                log(f"ablation cell {res[0]} seed {res[1]}: error {res[2]:.4f}")
    else:
        for cell in cells:
            res = _run_cell(cell)
            results.append(res)
            log(f"ablation cell {res[0]} seed {res[1]}: error {res[2]:.4f}")
    results.sort(key=lambda r: (spec.variants.index(r[0]), r[1]))
    return results


def write_grid_csv(path, rows: Sequence[tuple[str, int, float]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "seed", "val_error"])
        for variant, seed, err in rows:
            writer.writerow([variant, seed, f"{err:.6f}"])


def read_grid_csv(path) -> list[tuple[str, int, float]]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["variant", "seed", "val_error"]:
            raise TrainingError(f"{path}: unexpected grid columns")
        for rec in reader:
            out.append((rec["variant"], int(rec["seed"]),
                        float(rec["val_error"])))
    return out


# ---------------------------------------------------------------------------
# low-shot curves
# ---------------------------------------------------------------------------

def _run_lowshot_cell(args) -> tuple[int, str, int, float]:
    budget, mode, seed, lm_ckpt_path, train_rows, val_rows, spec = args
    subset = balanced_subsample(train_rows, budget, seed=1000 + seed)
    lm_ckpt = load_checkpoint(lm_ckpt_path)
    n_classes = len({label for label, _ in train_rows})
    head = HeadConfig(n_classes=n_classes, drops=DESK_HEAD_DROPS)
    if mode == "from_scratch":
        config = StageConfig(
            stage="clf_finetune", epochs=spec.epochs,
            batch_size=min(spec.batch_size, max(2, len(subset) // 2)),
            base_lr=0.001, schedule="constant", unfreeze=UnfreezePolicy("full"),
            seed=seed, chunk_len=spec.chunk_len,
            early_stop_patience=spec.patience)
        _, metrics = run_clf_finetune(config, lm_ckpt, subset, val_rows,
                                      head_config=head, from_scratch=True)
        return budget, mode, seed, _reported_error(metrics, True)
    if mode == "supervised":
        # adapt the LM only on the labeled subset's text
        task_text = " ".join(text for _, text in subset)
        lm_config = StageConfig(stage="lm_finetune", epochs=max(spec.lm_epochs, 2),
                                batch_size=8, base_lr=0.004, schedule="stlr",
                                discriminative=True, seed=seed, bptt_len=70)
        lm_ckpt, _ = run_lm_finetune(lm_config, lm_ckpt, task_text)
    config = StageConfig(
        stage="clf_finetune", epochs=spec.epochs,
        batch_size=min(spec.batch_size, max(2, len(subset) // 2)),
        base_lr=0.01, schedule="stlr", discriminative=True,
        unfreeze=UnfreezePolicy("gradual"), seed=seed,
        chunk_len=spec.chunk_len, early_stop_patience=None)
    _, metrics = run_clf_finetune(config, lm_ckpt, subset, val_rows,
                                  head_config=head)
    return budget, mode, seed, _reported_error(metrics, False)


def run_lowshot(spec: LowShotSpec, rows: Sequence[tuple[str, str]],
                work_dir, log=lambda s: None) -> list[tuple[int, str, int, float]]:
    """Error-vs-budget curves; the validation split stays fixed throughout."""
    work_dir = Path(work_dir)
    work_dir.mkdir(parents=True, exist_ok=True)
    train_rows, val_rows = stratified_split(rows, spec.val_frac, spec.split_seed)
    for budget in spec.budgets:
        if budget > len(train_rows):
            raise TrainingError(
                f"budget {budget} exceeds {len(train_rows)} training examples")

    # the semi-supervised LM sees all task text regardless of budget
    semi_lm_path = None
    if "semi_supervised" in spec.modes:
        log("fine-tuning LM on all task text for the semi-supervised arm")
        semi_lm_path = _finetune_shared_lm(
            spec.lm_checkpoint, train_rows, spec.lm_epochs, work_dir, log=log)

    modes = ["from_scratch"] + list(spec.modes)
    cells = []
    for budget in spec.budgets:
        for mode in modes:
            for seed in spec.seeds:
                lm_path = (semi_lm_path if mode == "semi_supervised"
                           else spec.lm_checkpoint)
                cells.append((budget, mode, seed, lm_path, train_rows,
                              val_rows, spec))
    results: list[tuple[int, str, int, float]] = []
    if spec.jobs > 1:
        with ProcessPoolExecutor(max_workers=spec.jobs) as pool:
            for res in pool.map(_run_lowshot_cell, cells):
                results.append(res)
                log(f"lowshot {res[1]} budget {res[0]} seed {res[2]}: "
                    f"error {res[3]:.4f}")
    else:
        for cell in cells:
            res = _run_lowshot_cell(cell)
            results.append(res)
            log(f"lowshot {res[1]} budget {res[0]} seed {res[2]}: "
                f"error {res[3]:.4f}")
    results.sort(key=lambda r: (r[0], modes.index(r[1]), r[2]))
    return results


def write_curve_csv(path, rows: Sequence[tuple[int, str, int, float]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["budget", "mode", "seed", "val_error"])
        for budget, mode, seed, err in rows:
            writer.writerow([budget, mode, seed, f"{err:.6f}"])


def read_curve_csv(path) -> list[tuple[int, str, int, float]]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["budget", "mode", "seed", "val_error"]:
            raise TrainingError(f"{path}: unexpected curve columns")
        for rec in reader:
            out.append((int(rec["budget"]), rec["mode"], int(rec["seed"]),
                        float(rec["val_error"])))
    return out
