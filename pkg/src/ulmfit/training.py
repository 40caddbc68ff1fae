"""Three-stage training pipeline: pretrain, LM fine-tune, classifier fine-tune.

Each stage shares the same mechanics: materialize every batch up front so
the schedule knows its total iteration count, run one update per batch at
the effective learning rate (group LR times schedule factor), clip the
global gradient norm, and log one metrics row per epoch. A NaN or Inf loss
aborts immediately, naming the iteration.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field, asdict
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, no_tape
from .checkpoint import (Checkpoint, checkpoint_from_classifier,
                         checkpoint_from_lm, restore_classifier, restore_lm)
from .classifier import (ClassifierModel, HeadConfig, bpt3c_forward,
                         ensemble_predict)
from .lm import LmConfig, LmModel, lm_forward, reverse_stream
from .schedules import (LayerGroups, StlrSchedule, UnfreezePolicy,
                        apply_update, assign_discriminative_lrs,
                        clip_gradients, make_optimizer, schedule_factor,
                        unfreeze_step)
from .text import (TextError, Vocab, bpt3c_chunks, build_vocab, corpus_stream,
                   doc_ids, lm_batches, read_labeled, read_lm_corpus, tokenize)


class TrainingError(Exception):
    """Aborted runs: NaN losses, unusable corpora, label problems."""


@dataclass
class StageConfig:
    """Knobs for one training stage."""
    stage: str                      # pretrain | lm_finetune | clf_finetune
    epochs: int = 1
    batch_size: int = 64
    base_lr: float = 0.004
    schedule: str = "constant"      # stlr | cosine | constant
    discriminative: bool = False
    unfreeze: UnfreezePolicy = field(default_factory=lambda: UnfreezePolicy("full"))
    seed: int = 1
    optimizer: str = "adam"
    beta1: float = 0.7
    beta2: float = 0.99
    bptt_len: int = 70
    length_jitter: Optional[float] = None
    chunk_len: int = 40
    grad_window: Optional[int] = None
    clip_norm: float = 0.25
    stlr_cut_frac: float = 0.1
    stlr_ratio: float = 32.0
    early_stop_patience: Optional[int] = None
    group_lr_overrides: Optional[list[float]] = None

    def __post_init__(self):
        if isinstance(self.unfreeze, str):
            self.unfreeze = UnfreezePolicy(self.unfreeze)
        if isinstance(self.unfreeze, dict):
            self.unfreeze = UnfreezePolicy(**self.unfreeze)
        if self.epochs < 1:
            raise TrainingError("epochs must be >= 1")
        if self.base_lr <= 0:
            raise TrainingError("base_lr must be positive")
        if self.stage not in ("pretrain", "lm_finetune", "clf_finetune"):
            raise TrainingError(f"unknown stage {self.stage!r}")


@dataclass
class MetricsRow:
    stage: str
    epoch: int
    iterations: int
    train_loss: float
    val_loss: float
    val_error: Optional[float]
    perplexity: Optional[float]
    wall_clock_s: float


METRICS_COLUMNS = ["stage", "epoch", "iterations", "train_loss", "val_loss",
                   "val_error", "perplexity", "wall_clock_s"]


class RunMetrics:
    """Per-epoch rows for one run; serializes to/from CSV."""

    def __init__(self, rows: Optional[list[MetricsRow]] = None):
        self.rows: list[MetricsRow] = rows or []

    def append(self, row: MetricsRow) -> None:
        if row.val_error is not None and not 0.0 <= row.val_error <= 1.0:
            raise TrainingError(f"error rate {row.val_error} outside [0,1]")
        self.rows.append(row)

    def final(self) -> MetricsRow:
        return self.rows[-1]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            self.write(fh)

    def write(self, fh) -> None:
        writer = csv.writer(fh)
        writer.writerow(METRICS_COLUMNS)
        for r in self.rows:
            writer.writerow([
                r.stage, r.epoch, r.iterations,
                f"{r.train_loss:.6f}", f"{r.val_loss:.6f}",
                "" if r.val_error is None else f"{r.val_error:.6f}",
                "" if r.perplexity is None else f"{r.perplexity:.6f}",
                f"{r.wall_clock_s:.3f}",
            ])

    @classmethod
    def from_csv(cls, path) -> "RunMetrics":
        rows = []
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != METRICS_COLUMNS:
                raise TrainingError(f"{path}: unexpected metrics columns")
            for rec in reader:
                rows.append(MetricsRow(
                    stage=rec["stage"], epoch=int(rec["epoch"]),
                    iterations=int(rec["iterations"]),
                    train_loss=float(rec["train_loss"]),
                    val_loss=float(rec["val_loss"]),
                    val_error=float(rec["val_error"]) if rec["val_error"] else None,
                    perplexity=float(rec["perplexity"]) if rec["perplexity"] else None,
                    wall_clock_s=float(rec["wall_clock_s"])))
        return cls(rows)


def _check_finite(loss_value: float, iteration: int) -> None:
    if not np.isfinite(loss_value):
        raise TrainingError(
            f"loss became non-finite ({loss_value}) at iteration {iteration}")


def _stlr_for(config: StageConfig, total_iters: int) -> Optional[StlrSchedule]:
    if config.schedule != "stlr":
        return None
    # very short runs still get at least one warm-up iteration
    cut_frac = max(config.stlr_cut_frac, 1.0 / max(total_iters, 1))
    if cut_frac >= 1.0:
        cut_frac = 0.5
    return StlrSchedule(T=max(total_iters, 2), cut_frac=cut_frac,
                        ratio=config.stlr_ratio, eta_max=config.base_lr)


def _assign_lrs(groups: LayerGroups, config: StageConfig) -> None:
    if config.group_lr_overrides is not None:
        if len(config.group_lr_overrides) != len(groups):
            raise TrainingError(
                f"{len(config.group_lr_overrides)} LR overrides for "
                f"{len(groups)} groups")
        for g, lr in zip(groups, config.group_lr_overrides):
            g.lr = lr
    elif config.discriminative:
        assign_discriminative_lrs(groups, config.base_lr)
    else:
        groups.set_uniform_lr(config.base_lr)


# ---------------------------------------------------------------------------
# language-model training
# ---------------------------------------------------------------------------

def evaluate_lm(model: LmModel, stream: np.ndarray, batch_size: int,
                bptt_len: int) -> tuple[float, float]:
    """(mean token cross-entropy, perplexity) with dropout off."""
    batch_size = max(1, min(batch_size, stream.size // (bptt_len + 1)))
    batches = lm_batches(stream, batch_size, bptt_len)
    state = model.init_state(batch_size)
    total, count = 0.0, 0
    with no_tape():
        for batch in batches:
            _, state, loss = lm_forward(model, batch.inputs, batch.targets,
                                        state, train=False)
            n = batch.targets.size
            total += loss.item() * n
            count += n
    if count == 0:
        raise TrainingError("validation stream produced no batches")
    mean = total / count
    return mean, float(np.exp(mean))


def train_lm(model: LmModel, train_stream: np.ndarray,
             val_stream: Optional[np.ndarray], config: StageConfig,
             groups: Optional[LayerGroups] = None,
             log: Callable[[str], None] = lambda s: None) -> RunMetrics:
    """Truncated-BPTT training loop over a contiguous token stream."""
    rng = np.random.default_rng(config.seed)
    jit_rng = np.random.default_rng(config.seed + 1)
    epochs_batches = [
        lm_batches(train_stream, config.batch_size, config.bptt_len,
                   config.length_jitter, jit_rng)
        for _ in range(config.epochs)
    ]
    total_iters = sum(len(b) for b in epochs_batches)
    stlr = _stlr_for(config, total_iters)
    groups = groups or model.layer_groups()
    _assign_lrs(groups, config)
    optimizer = make_optimizer(config.optimizer, config.beta1, config.beta2)
    metrics = RunMetrics()
    t = 0
    for epoch, batches in enumerate(epochs_batches, start=1):
        start = time.perf_counter()
        state = model.init_state(config.batch_size)
        params = groups.trainable_params()
        loss_sum, token_count = 0.0, 0
        for batch in batches:
            factor = schedule_factor(config.schedule, t, total_iters, stlr,
                                     config.base_lr)
            with Tape() as tape:
                _, state, loss = lm_forward(model, batch.inputs, batch.targets,
                                            state, train=True, rng=rng)
                value = loss.item()
                _check_finite(value, t)
                grads = tape.backward(loss, params=params)
            clip_gradients(grads, params, config.clip_norm)
            apply_update(optimizer, groups, factor, grads)
            for p in params:
                p.zero_grad()
            loss_sum += value * batch.targets.size
            token_count += batch.targets.size
            t += 1
        train_loss = loss_sum / max(token_count, 1)
        if val_stream is not None:
            val_loss, ppl = evaluate_lm(model, val_stream, config.batch_size,
                                        config.bptt_len)
        else:
            val_loss, ppl = train_loss, float(np.exp(train_loss))
        metrics.append(MetricsRow(
            stage=config.stage, epoch=epoch, iterations=t,
            train_loss=train_loss, val_loss=val_loss, val_error=None,
            perplexity=ppl, wall_clock_s=time.perf_counter() - start))
        log(f"[{config.stage}] epoch {epoch}/{config.epochs} "
            f"train {train_loss:.4f} val {val_loss:.4f} ppl {ppl:.2f}")
    return metrics


# ---------------------------------------------------------------------------
# classifier training
# ---------------------------------------------------------------------------

@dataclass
class LabeledDocs:
    """Numericalized classification documents with integer labels."""
    docs: list[np.ndarray]
    labels: np.ndarray
    label_names: list[str]

    def __len__(self) -> int:
        return len(self.docs)

    def subset(self, idx: Sequence[int]) -> "LabeledDocs":
        idx = list(idx)
        return LabeledDocs([self.docs[i] for i in idx], self.labels[idx],
                           self.label_names)


def prepare_labeled(rows: Sequence[tuple[str, str]], vocab: Vocab, mode: str,
                    direction: str = "forward",
                    label_names: Optional[list[str]] = None) -> LabeledDocs:
    """Numericalize (label, text) rows; backward models read reversed docs."""
    if label_names is None:
        label_names = sorted({label for label, _ in rows})
    if len(label_names) < 2:
        raise TrainingError("need at least two distinct labels")
    lookup = {name: i for i, name in enumerate(label_names)}
    docs, labels = [], []
    for label, text in rows:
        if label not in lookup:
            raise TrainingError(f"unknown label {label!r}")
        ids = doc_ids(text, vocab, mode)
        if direction == "backward":
            ids = reverse_stream(ids)
        docs.append(ids)
        labels.append(lookup[label])
    return LabeledDocs(docs, np.array(labels, dtype=np.int64), label_names)


def _classifier_minibatches(n: int, batch_size: int,
                            rng: Optional[np.random.Generator]) -> list[np.ndarray]:
    order = np.arange(n)
    if rng is not None:
        rng.shuffle(order)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    # batch norm cannot train on a single document
    if len(batches) > 1 and len(batches[-1]) == 1:
        batches[-2] = np.concatenate([batches[-2], batches[-1]])
        batches.pop()
    return batches


def _recalibrate_batch_norm(model: ClassifierModel, data: LabeledDocs,
                            chunk_len: int, sample: int = 256) -> None:
    """Re-estimate BN running statistics on the current features.

    During fine-tuning the trunk's features drift each epoch, and with few
    batches per epoch the momentum-0.1 running estimates lag far enough
    behind to wreck eval-mode normalization. One forward pass over (a
    sample of) the training set in train mode with momentum forced to 1
    snaps both blocks' statistics to the present feature distribution.
    Dropout stays off (no rng is passed).
    """
    head = model.head
    if not head.config.use_batch_norm:
        return
    n = min(len(data), sample)
    states = (head.bn1_state, head.bn2_state)
    saved = [s.momentum for s in states]
    for s in states:
        s.momentum = 1.0
    try:
        with no_tape():
            chunks = bpt3c_chunks(data.docs[:n], chunk_len)
            bpt3c_forward(model, chunks, train=True, rng=None)
    finally:
        for s, m in zip(states, saved):
            s.momentum = m


def evaluate_classifier(model: ClassifierModel, data: LabeledDocs,
                        batch_size: int = 64, chunk_len: int = 40
                        ) -> tuple[float, float, np.ndarray]:
    """(mean loss, error rate, probability table) with dropout off."""
    probs_out = np.zeros((len(data), model.head.config.n_classes))
    loss_sum = 0.0
    with no_tape():
        for idx in _classifier_minibatches(len(data), batch_size, rng=None):
            chunks = bpt3c_chunks([data.docs[i] for i in idx], chunk_len)
            probs, loss = bpt3c_forward(model, chunks, train=False,
                                        labels=data.labels[idx])
            probs_out[idx] = probs.data
            loss_sum += loss.item() * len(idx)
    preds = probs_out.argmax(axis=1)
    error = float((preds != data.labels).mean())
    return loss_sum / len(data), error, probs_out


def train_classifier(model: ClassifierModel, train_data: LabeledDocs,
                     val_data: Optional[LabeledDocs], config: StageConfig,
                     log: Callable[[str], None] = lambda s: None) -> RunMetrics:
    """BPT3C training under the configured unfreezing policy.

    With early stopping enabled (non-default), the best-validation-loss
    parameters are restored at the end and the reported rows still cover
    every epoch actually run.
    """
    rng = np.random.default_rng(config.seed)
    groups = model.layer_groups()
    _assign_lrs(groups, config)
    optimizer = make_optimizer(config.optimizer, config.beta1, config.beta2)
    batches_per_epoch = len(_classifier_minibatches(
        len(train_data), config.batch_size, rng=None))
    total_iters = batches_per_epoch * config.epochs
    stlr = _stlr_for(config, total_iters)
    metrics = RunMetrics()
    best_loss, best_state, since_best = np.inf, None, 0
    t = 0
    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        unfreeze_step(config.unfreeze, groups, epoch)
        params = groups.trainable_params()
        loss_sum, n_seen = 0.0, 0
        for idx in _classifier_minibatches(len(train_data), config.batch_size, rng):
            chunks = bpt3c_chunks([train_data.docs[i] for i in idx],
                                  config.chunk_len)
            factor = schedule_factor(config.schedule, t, total_iters, stlr,
                                     config.base_lr)
            with Tape() as tape:
                _, loss = bpt3c_forward(model, chunks,
                                        grad_window=config.grad_window,
                                        train=True, rng=rng,
                                        labels=train_data.labels[idx])
                value = loss.item()
                _check_finite(value, t)
                grads = tape.backward(loss, params=params)
            clip_gradients(grads, params, config.clip_norm)
            apply_update(optimizer, groups, factor, grads)
            for p in params:
                p.zero_grad()
            loss_sum += value * len(idx)
            n_seen += len(idx)
            t += 1
        train_loss = loss_sum / max(n_seen, 1)
        _recalibrate_batch_norm(model, train_data, config.chunk_len)
        if val_data is not None:
            val_loss, val_error, _ = evaluate_classifier(
                model, val_data, config.batch_size, config.chunk_len)
        else:
            val_loss, val_error = train_loss, None
        metrics.append(MetricsRow(
            stage=config.stage, epoch=epoch, iterations=t,
            train_loss=train_loss, val_loss=val_loss, val_error=val_error,
            perplexity=None, wall_clock_s=time.perf_counter() - start))
        log(f"[{config.stage}] epoch {epoch}/{config.epochs} "
            f"train {train_loss:.4f} val {val_loss:.4f} "
            f"err {val_error if val_error is None else round(val_error, 4)} "
            f"unfrozen {groups.unfrozen_names()}")
        if config.early_stop_patience is not None and val_data is not None:
            if val_loss < best_loss - 1e-6:
                best_loss = val_loss
                best_state = {n: p.data.copy()
                              for n, p in model.named_params().items()}
                since_best = 0
            else:
                since_best += 1
                if since_best > config.early_stop_patience:
                    log(f"[{config.stage}] early stop at epoch {epoch}")
                    break
    if best_state is not None:
        for name, p in model.named_params().items():
            p.data = best_state[name]
    return metrics


# ---------------------------------------------------------------------------
# stage runners
# ---------------------------------------------------------------------------

def split_stream(stream: np.ndarray, val_frac: float = 0.05
                 ) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Head/tail split; the tail is dropped when too short to batch."""
    cut = int(len(stream) * (1.0 - val_frac))
    val = stream[cut:]
    if val.size < 16:
        return stream, None
    return stream[:cut], val


def run_pretrain(config: StageConfig, corpus_path, token_mode: str = "char",
                 vocab_size: int = 2000, min_freq: int = 1,
                 arch: Optional[dict] = None, direction: str = "forward",
                 log: Callable[[str], None] = lambda s: None
                 ) -> tuple[Checkpoint, RunMetrics]:
    """Stage one: train the general-domain LM on a contiguous corpus.

    ``arch`` may override embed_dim / hidden_dim / n_layers / dropouts /
    tie_weights of the desk-scale architecture; the vocabulary size always
    comes from the corpus itself.
    """
    text = read_lm_corpus(corpus_path)
    tokens = tokenize(text, token_mode)
    if not tokens:
        raise TrainingError(f"{corpus_path}: no training tokens")
    vocab = build_vocab([tokens], vocab_size, min_freq)
    stream = corpus_stream(text, vocab, token_mode)
    if direction == "backward":
        stream = reverse_stream(stream)
    train_stream, val_stream = split_stream(stream)
    lm_config = LmConfig.desk_scale(len(vocab), direction=direction,
                                    **(arch or {}))
    model = LmModel(lm_config, rng=np.random.default_rng(config.seed))
    metrics = train_lm(model, train_stream, val_stream, config, log=log)
    ckpt = checkpoint_from_lm(model, vocab, token_mode)
    return ckpt, metrics


def transfer_vocab(model: LmModel, old_vocab: Vocab, new_vocab: Vocab) -> LmModel:
    """Copy embedding rows for shared tokens; novel rows get the mean row."""
    old_emb = model.embedding.data
    mean_row = old_emb.mean(axis=0)
    new_emb = np.tile(mean_row, (len(new_vocab), 1)).astype(old_emb.dtype)
    new_bias = np.full(len(new_vocab), model.decoder_bias.data.mean(),
                       dtype=old_emb.dtype)
    for tok, new_id in new_vocab.token_to_id.items():
        old_id = old_vocab.token_to_id.get(tok)
        if old_id is not None:
            new_emb[new_id] = old_emb[old_id]
            new_bias[new_id] = model.decoder_bias.data[old_id]
    cfg = LmConfig.from_dict(model.config.to_dict())
    cfg.vocab_size = len(new_vocab)
    if not cfg.tie_weights:
        raise TrainingError("vocab transfer requires tied weights")
    new_model = LmModel(cfg)
    new_model.embedding.data = new_emb
    new_model.decoder_bias.data = new_bias
    for old_layer, new_layer in zip(model.layers, new_model.layers):
        new_layer.wx.data = old_layer.wx.data.copy()
        new_layer.wh.data = old_layer.wh.data.copy()
        new_layer.bias.data = old_layer.bias.data.copy()
    return new_model


def run_lm_finetune(config: StageConfig, pretrained: Checkpoint,
                    task_text: str,
                    log: Callable[[str], None] = lambda s: None
                    ) -> tuple[Checkpoint, RunMetrics]:
    """Stage two: adapt the LM to target-task text (STLR + discriminative)."""
    model, vocab, token_mode = restore_lm(pretrained)
    stream = corpus_stream(task_text, vocab, token_mode)
    if model.config.direction == "backward":
        stream = reverse_stream(stream)
    train_stream, val_stream = split_stream(stream)
    metrics = train_lm(model, train_stream, val_stream, config, log=log)
    ckpt = checkpoint_from_lm(model, vocab, token_mode)
    return ckpt, metrics


def run_clf_finetune(config: StageConfig, lm_ckpt: Checkpoint,
                     train_rows: Sequence[tuple[str, str]],
                     val_rows: Sequence[tuple[str, str]],
                     head_config: Optional[HeadConfig] = None,
                     from_scratch: bool = False,
                     log: Callable[[str], None] = lambda s: None
                     ) -> tuple[Checkpoint, RunMetrics]:
    """Stage three: fresh head on the (pretrained or random) trunk, BPT3C."""
    model_lm, vocab, token_mode = restore_lm(lm_ckpt)
    if from_scratch:
        model_lm = LmModel(model_lm.config,
                           rng=np.random.default_rng(config.seed + 77))
    label_names = sorted({label for label, _ in train_rows})
    if len(label_names) < 2:
        raise TrainingError("training data has a single class")
    if head_config is None:
        head_config = HeadConfig(n_classes=len(label_names))
    direction = model_lm.config.direction
    train_data = prepare_labeled(train_rows, vocab, token_mode, direction,
                                 label_names)
    val_data = prepare_labeled(val_rows, vocab, token_mode, direction,
                               label_names) if val_rows else None
    model = ClassifierModel(model_lm, head_config,
                            rng=np.random.default_rng(config.seed + 1))
    metrics = train_classifier(model, train_data, val_data, config, log=log)
    ckpt = checkpoint_from_classifier(model, vocab, token_mode, label_names)
    return ckpt, metrics


def evaluate(model_ckpt: Checkpoint, rows: Sequence[tuple[str, str]],
             ensemble_with: Optional[Checkpoint] = None,
             batch_size: int = 64, chunk_len: int = 40) -> MetricsRow:
    """Error rate of a classifier checkpoint, optionally ensembled."""
    start = time.perf_counter()
    model, vocab, token_mode, labels = restore_classifier(model_ckpt)
    data = prepare_labeled(rows, vocab, token_mode,
                           model.trunk.config.direction, labels)
    loss, error, probs = evaluate_classifier(model, data, batch_size, chunk_len)
    if ensemble_with is not None:
        model2, vocab2, mode2, labels2 = restore_classifier(ensemble_with)
        if labels2 != labels:
            raise TrainingError(
                f"ensemble class mismatch: {labels} vs {labels2}")
        data2 = prepare_labeled(rows, vocab2, mode2,
                                model2.trunk.config.direction, labels2)
        _, _, probs2 = evaluate_classifier(model2, data2, batch_size, chunk_len)
        merged = ensemble_predict(probs, probs2)
        error = float((merged.argmax(axis=1) != data.labels).mean())
    return MetricsRow(stage="eval", epoch=0, iterations=0,
                      train_loss=float("nan"), val_loss=loss,
                      val_error=error, perplexity=None,
                      wall_clock_s=time.perf_counter() - start)
