"""Concat-pooled classifier head and chunked document classification.

The classifier input concatenates the hidden state at the last time step
with max- and mean-pooled hidden states over the whole document, then runs
two blocks of batch norm, dropout, and a linear map (ReLU between, softmax
on top). Long documents are processed in fixed-length chunks with the
hidden state carried across chunk boundaries; chunks older than the
gradient window run tape-free, so their states contribute values but no
gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Tensor
from .lm import LmModel
from .schedules import LayerGroup, LayerGroups
from .text import DocChunks


@dataclass
class HeadConfig:
    n_classes: int
    hidden: int = 50
    drops: tuple[float, float] = (0.2, 0.1)  # not from any reference setting
    use_batch_norm: bool = True

    def __post_init__(self):
        if self.hidden <= 0:
            raise ad.ContractError("head hidden size must be positive")
        if self.n_classes < 2:
            raise ad.ContractError("need at least two classes")


@dataclass
class PooledState:
    """Hidden states accumulated over every chunk of a document batch."""
    seq: Tensor        # [T, batch, H], pad steps included
    mask: np.ndarray   # [T, batch] bool, True on real tokens

    @property
    def h_last(self) -> Tensor:
        return ad.select_time(self.seq, self.seq.shape[0] - 1)

    @property
    def count(self) -> np.ndarray:
        return self.mask.sum(axis=0)

    @property
    def running_max(self) -> np.ndarray:
        work = np.where(self.mask[..., None], self.seq.data, -np.inf)
        return work.max(axis=0)

    @property
    def running_sum(self) -> np.ndarray:
        return (self.seq.data * self.mask[..., None]).sum(axis=0)


def concat_pool(states: PooledState) -> Tensor:
    """[h_last || max over time || mean over time], dimension exactly 3H."""
    if not states.mask.any(axis=0).all():
        raise ad.ContractError("concat_pool: a document consists only of padding")
    if not states.mask[-1].all():
        raise ad.ContractError("concat_pool: final step must be real content "
                               "(documents are front-padded)")
    h_last = states.h_last
    h_max = ad.max_over_time(states.seq, states.mask)
    h_mean = ad.mean_over_time(states.seq, states.mask)
    return ad.concat([h_last, h_max, h_mean], axis=-1)


class ClassifierHead:
    """Two blocks: BN -> dropout -> linear -> ReLU, BN -> dropout -> linear."""

    def __init__(self, config: HeadConfig, input_dim: int,
                 rng: Optional[np.random.Generator] = None, dtype=np.float32):
        self.config = config
        self.input_dim = input_dim
        self.dtype = dtype
        rng = rng or np.random.default_rng(0)

        def linear(n_in, n_out):
            scale = 1.0 / np.sqrt(n_in)
            w = Tensor(rng.uniform(-scale, scale, (n_in, n_out)).astype(dtype),
                       requires_grad=True)
            b = Tensor(np.zeros(n_out, dtype=dtype), requires_grad=True)
            return w, b

        self.w1, self.b1 = linear(input_dim, config.hidden)
        self.w2, self.b2 = linear(config.hidden, config.n_classes)
        self.bn1_gamma = Tensor(np.ones(input_dim, dtype=dtype), requires_grad=True)
        self.bn1_beta = Tensor(np.zeros(input_dim, dtype=dtype), requires_grad=True)
        self.bn2_gamma = Tensor(np.ones(config.hidden, dtype=dtype), requires_grad=True)
        self.bn2_beta = Tensor(np.zeros(config.hidden, dtype=dtype), requires_grad=True)
        self.bn1_state = BatchNormState(input_dim, dtype=dtype)
        self.bn2_state = BatchNormState(config.hidden, dtype=dtype)

    def named_params(self) -> dict[str, Tensor]:
        return {
            "head.bn1.gamma": self.bn1_gamma, "head.bn1.beta": self.bn1_beta,
            "head.lin1.weight": self.w1, "head.lin1.bias": self.b1,
            "head.bn2.gamma": self.bn2_gamma, "head.bn2.beta": self.bn2_beta,
            "head.lin2.weight": self.w2, "head.lin2.bias": self.b2,
        }

    def named_buffers(self) -> dict[str, np.ndarray]:
        return {
            "head.bn1.running_mean": self.bn1_state.running_mean,
            "head.bn1.running_var": self.bn1_state.running_var,
            "head.bn2.running_mean": self.bn2_state.running_mean,
            "head.bn2.running_var": self.bn2_state.running_var,
        }

    def params(self) -> list[Tensor]:
        return list(self.named_params().values())

    def logits(self, pooled: Tensor, train: bool,
               rng: Optional[np.random.Generator] = None) -> Tensor:
        cfg = self.config
        training = train and rng is not None
        x = pooled
        if cfg.use_batch_norm:
            x = ad.batch_norm(x, self.bn1_gamma, self.bn1_beta, self.bn1_state, train)
        if training and cfg.drops[0] > 0:
            mask = ad.make_dropout_mask(x.shape, cfg.drops[0], rng, x.data.dtype)
            x = ad.dropout_mask_apply(x, mask)
        x = ad.relu(ad.add(ad.matmul(x, self.w1), self.b1))
        if cfg.use_batch_norm:
            x = ad.batch_norm(x, self.bn2_gamma, self.bn2_beta, self.bn2_state, train)
        if training and cfg.drops[1] > 0:
            mask = ad.make_dropout_mask(x.shape, cfg.drops[1], rng, x.data.dtype)
            x = ad.dropout_mask_apply(x, mask)
        return ad.add(ad.matmul(x, self.w2), self.b2)


def head_forward(head: ClassifierHead, pooled: Tensor, train: bool,
                 rng: Optional[np.random.Generator] = None) -> Tensor:
    """Class probabilities for pooled features; rows sum to one."""
    return ad.softmax(head.logits(pooled, train, rng))


class ClassifierModel:
    """LM trunk plus concat-pool head; the head is the only fresh part."""

    def __init__(self, trunk: LmModel, head_config: HeadConfig,
                 rng: Optional[np.random.Generator] = None):
        self.trunk = trunk
        pooled_dim = 3 * trunk.config.layer_hidden_dim(trunk.config.n_layers - 1)
        self.head = ClassifierHead(head_config, pooled_dim, rng,
                                   dtype=trunk.dtype)

    def named_params(self) -> dict[str, Tensor]:
        named = dict(self.trunk.named_params())
        named.update(self.head.named_params())
        return named

    def params(self) -> list[Tensor]:
        return list(self.named_params().values())

    def layer_groups(self) -> LayerGroups:
        """Classifier-phase groups: embedding, each LSTM layer, then head."""
        base = self.trunk.layer_groups()
        groups = list(base.groups)
        groups.append(LayerGroup("head", self.head.params()))
        return LayerGroups(groups)


def bpt3c_forward(model: ClassifierModel, chunks: DocChunks,
                  grad_window: Optional[int] = None, train: bool = False,
                  rng: Optional[np.random.Generator] = None,
                  labels: Optional[np.ndarray] = None
                  ) -> tuple[Tensor, Optional[Tensor]]:
    """Chunked classifier forward with hidden-state carryover.

    Chunks are processed in order; the hidden state initializes each chunk
    from the previous one. Only the trailing ``grad_window`` chunks stay on
    the tape -- earlier chunks contribute carried state and pooling values
    but no gradients. Pooling statistics accumulate over every non-pad
    position of every chunk. Returns (probabilities, loss or None).
    """
    n_chunks = len(chunks.chunks)
    if grad_window is None:
        grad_window = n_chunks
    if grad_window < 1:
        raise ad.ContractError("grad_window must be >= 1")
    trunk = model.trunk
    batch = chunks.chunks[0].shape[1]
    state = trunk.init_state(batch)
    chunk_seqs: list[Tensor] = []
    for ci, chunk in enumerate(chunks.chunks):
        if ci < n_chunks - grad_window:
            with ad.no_tape():
                seq, state = trunk.trunk_forward(chunk, state, train, rng)
        else:
            seq, state = trunk.trunk_forward(chunk, state, train, rng)
        chunk_seqs.append(seq)

    seq = chunk_seqs[0] if len(chunk_seqs) == 1 else ad.concat(chunk_seqs, axis=0)
    pooled = concat_pool(PooledState(seq=seq, mask=chunks.pad_mask()))
    logits = model.head.logits(pooled, train, rng)
    probs = ad.softmax(logits)
    loss = None
    if labels is not None:
        loss = ad.softmax_cross_entropy(logits, labels)
    return probs, loss


def ensemble_predict(fwd_probs: np.ndarray, bwd_probs: np.ndarray) -> np.ndarray:
    """Average two probability tables; rows keep summing to one."""
    a = np.asarray(fwd_probs)
    b = np.asarray(bwd_probs)
    if a.shape != b.shape:
        raise ad.ShapeError(
            f"ensemble_predict: shape mismatch {a.shape} vs {b.shape}")
    return 0.5 * (a + b)
