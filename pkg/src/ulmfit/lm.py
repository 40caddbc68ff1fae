"""Weight-dropped LSTM language model with tied embeddings.

Five dropout sites, all inverted (evaluation is the identity):

* ``embedding_matrix`` -- whole rows of the embedding matrix, once per call;
* ``input_embedding`` -- the embedded input, one mask reused at every step;
* ``rnn_internal``    -- between LSTM layers, one mask per layer per call;
* ``output_layers``   -- the top layer's output, one mask per call;
* ``weight_drop``     -- the recurrent hidden-to-hidden matrices, masked
  once per forward call (DropConnect), not per time step.

Hidden state is detached at every batch boundary, which is what truncates
backpropagation through time.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .schedules import LayerGroup, LayerGroups


@dataclass
class DropoutRates:
    output_layers: float = 0.4
    rnn_internal: float = 0.3
    input_embedding: float = 0.4
    embedding_matrix: float = 0.05
    weight_drop: float = 0.5

    def validate(self) -> None:
        for name, rate in asdict(self).items():
            if not 0.0 <= rate < 1.0:
                raise ad.ContractError(f"dropout {name}={rate} outside [0,1)")

    @classmethod
    def none(cls) -> "DropoutRates":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0)


@dataclass
class LmConfig:
    """Architecture and regularization settings for the language model."""
    vocab_size: int
    embed_dim: int = 400
    hidden_dim: int = 1150
    n_layers: int = 3
    dropouts: DropoutRates = field(default_factory=DropoutRates)
    tie_weights: bool = True
    direction: str = "forward"

    def __post_init__(self):
        if isinstance(self.dropouts, dict):
            self.dropouts = DropoutRates(**self.dropouts)
        self.dropouts.validate()
        if self.n_layers < 1:
            raise ad.ContractError("n_layers must be >= 1")
        if self.direction not in ("forward", "backward"):
            raise ad.ContractError(f"bad direction {self.direction!r}")

    @classmethod
    def desk_scale(cls, vocab_size: int, **kw) -> "LmConfig":
        """Small configuration that trains in minutes on a laptop CPU."""
        kw.setdefault("embed_dim", 64)
        kw.setdefault("hidden_dim", 128)
        kw.setdefault("n_layers", 3)
        return cls(vocab_size=vocab_size, **kw)

    def layer_hidden_dim(self, layer: int) -> int:
        last = self.n_layers - 1
        if layer == last and self.tie_weights:
            return self.embed_dim
        return self.hidden_dim

    def layer_input_dim(self, layer: int) -> int:
        return self.embed_dim if layer == 0 else self.layer_hidden_dim(layer - 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LmConfig":
        return cls(**d)


class LstmLayer:
    """One LSTM layer; gate order is input, forget, cell, output."""

    def __init__(self, input_dim: int, hidden_dim: int, rng: np.random.Generator,
                 dtype=np.float32):
        scale = 1.0 / np.sqrt(hidden_dim)
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.wx = Tensor(rng.uniform(-scale, scale, (input_dim, 4 * hidden_dim))
                         .astype(dtype), requires_grad=True)
        self.wh = Tensor(rng.uniform(-scale, scale, (hidden_dim, 4 * hidden_dim))
                         .astype(dtype), requires_grad=True)
        bias = np.zeros(4 * hidden_dim, dtype=dtype)
        bias[hidden_dim:2 * hidden_dim] = 1.0  # forget gate starts open
        self.bias = Tensor(bias, requires_grad=True)

    def params(self) -> list[Tensor]:
        return [self.wx, self.wh, self.bias]

    def run_sequence(self, x_seq: Tensor, hc0: Tensor,
                     wh_eff: Tensor) -> tuple[Tensor, Tensor]:
        """Unroll over a [T, batch, in] sequence from stacked state hc0.

        The input projection is hoisted into one big matmul, then the whole
        layer runs as one fused node. Returns the [T, batch, H] hidden
        sequence and the final [batch, 2H] state, both on the tape.
        """
        t_len, batch, _ = x_seq.shape
        hd = self.hidden_dim
        flat = ad.reshape(x_seq, (t_len * batch, self.input_dim))
        gx_seq = ad.reshape(ad.matmul(flat, self.wx), (t_len, batch, 4 * hd))
        hc_all = ad.lstm_unroll(gx_seq, hc0, wh_eff, self.bias)
        h_seq = ad.slice_cols(hc_all, 0, hd)
        hc_last = ad.select_time(hc_all, t_len - 1)
        return h_seq, hc_last


HiddenState = list[Tensor]  # per layer: [batch, 2H] stacked (h, c)


def detach_state(state: HiddenState) -> HiddenState:
    """Cut the carried state off the tape (truncates BPTT)."""
    return [hc.detach() for hc in state]


class LmModel:
    """Embedding, stacked weight-dropped LSTM layers, tied decoder."""

    def __init__(self, config: LmConfig, rng: Optional[np.random.Generator] = None,
                 dtype=np.float32):
        self.config = config
        self.dtype = dtype
        rng = rng or np.random.default_rng(0)
        v, e = config.vocab_size, config.embed_dim
        self.embedding = Tensor(rng.uniform(-0.1, 0.1, (v, e)).astype(dtype),
                                requires_grad=True)
        self.layers = [
            LstmLayer(config.layer_input_dim(i), config.layer_hidden_dim(i),
                      rng, dtype=dtype)
            for i in range(config.n_layers)
        ]
        self.decoder_bias = Tensor(np.zeros(v, dtype=dtype), requires_grad=True)
        if config.tie_weights:
            self.decoder_weight = None
        else:
            scale = 1.0 / np.sqrt(config.hidden_dim)
            self.decoder_weight = Tensor(
                rng.uniform(-scale, scale, (v, config.layer_hidden_dim(config.n_layers - 1)))
                .astype(dtype), requires_grad=True)

    # -- parameter bookkeeping ------------------------------------------------

    def named_params(self) -> dict[str, Tensor]:
        named = {"embedding.weight": self.embedding,
                 "decoder.bias": self.decoder_bias}
        if self.decoder_weight is not None:
            named["decoder.weight"] = self.decoder_weight
        for i, layer in enumerate(self.layers):
            named[f"lstm{i}.wx"] = layer.wx
            named[f"lstm{i}.wh"] = layer.wh
            named[f"lstm{i}.bias"] = layer.bias
        return named

    def params(self) -> list[Tensor]:
        return list(self.named_params().values())

    def layer_groups(self) -> LayerGroups:
        """LM-phase groups, lowest first: embedding (+ tied decoder), LSTMs."""
        emb_params = [self.embedding, self.decoder_bias]
        if self.decoder_weight is not None:
            emb_params.append(self.decoder_weight)
        groups = [LayerGroup("embedding", emb_params)]
        for i, layer in enumerate(self.layers):
            groups.append(LayerGroup(f"lstm{i}", layer.params()))
        return LayerGroups(groups)

    # -- forward --------------------------------------------------------------

    def init_state(self, batch_size: int) -> HiddenState:
        return [Tensor(np.zeros((batch_size, 2 * self.config.layer_hidden_dim(i)),
                                dtype=self.dtype))
                for i in range(self.config.n_layers)]

    def _variational_mask(self, t_len: int, batch: int, dim: int, p: float,
                          rng: np.random.Generator) -> Tensor:
        """One [batch, dim] mask broadcast across every time step."""
        mask = ad.make_dropout_mask((batch, dim), p, rng, self.dtype)
        return Tensor(np.broadcast_to(mask.data, (t_len, batch, dim)))

    def trunk_forward(self, ids: np.ndarray, state: HiddenState, train: bool,
                      rng: Optional[np.random.Generator] = None
                      ) -> tuple[Tensor, HiddenState]:
        """Run the LSTM stack over [T, batch] ids.

        Returns the top layer's stacked output sequence [T, batch, H]
        (after output dropout when training) and the detached new hidden
        state. All dropout masks are drawn once per call and reused at
        every time step (variational); the hidden-to-hidden matrices are
        likewise masked once per call.
        """
        cfg = self.config
        t_len, batch = ids.shape
        if len(state) != cfg.n_layers or state[0].shape[0] != batch:
            raise ad.ContractError(
                f"hidden state does not match batch of {batch}")
        drops = cfg.dropouts
        training = train and rng is not None

        emb_matrix = self.embedding
        if training and drops.embedding_matrix > 0:
            row_keep = (rng.random((cfg.vocab_size, 1)) >= drops.embedding_matrix)
            row_mask = np.broadcast_to(
                row_keep.astype(self.dtype) / (1.0 - drops.embedding_matrix),
                emb_matrix.shape)
            emb_matrix = ad.dropout_mask_apply(emb_matrix, Tensor(row_mask))

        x_seq = ad.embedding_lookup(emb_matrix, ids)  # [T, B, E]
        if training and drops.input_embedding > 0:
            x_seq = ad.dropout_mask_apply(
                x_seq, self._variational_mask(t_len, batch, cfg.embed_dim,
                                              drops.input_embedding, rng))

        new_state: HiddenState = []
        for li, layer in enumerate(self.layers):
            if training and drops.weight_drop > 0:
                wh_mask = ad.make_dropout_mask(layer.wh.shape, drops.weight_drop,
                                               rng, self.dtype)
                wh_eff = ad.dropout_mask_apply(layer.wh, wh_mask)
            else:
                wh_eff = layer.wh
            x_seq, hc_last = layer.run_sequence(x_seq, state[li], wh_eff)
            new_state.append(hc_last)
            last = li == cfg.n_layers - 1
            rate = drops.output_layers if last else drops.rnn_internal
            if training and rate > 0:
                x_seq = ad.dropout_mask_apply(
                    x_seq, self._variational_mask(t_len, batch,
                                                  layer.hidden_dim, rate, rng))
        return x_seq, new_state

    def decode(self, hidden_flat: Tensor) -> Tensor:
        """Project [N, H_last] hidden states to vocabulary logits."""
        if self.config.tie_weights:
            logits = ad.matmul(hidden_flat, self.embedding, trans_b=True)
        else:
            logits = ad.matmul(hidden_flat, self.decoder_weight, trans_b=True)
        return ad.add(logits, self.decoder_bias)


def lm_forward(model: LmModel, inputs: np.ndarray, targets: Optional[np.ndarray],
               state: HiddenState, train: bool,
               rng: Optional[np.random.Generator] = None
               ) -> tuple[Tensor, HiddenState, Optional[Tensor]]:
    """Full LM pass: trunk, decoder, mean per-token cross-entropy.

    Returns ([T, batch, vocab] logits, detached new state, loss or None);
    the detachment is what stops gradients crossing batch boundaries.
    """
    t_len, batch = inputs.shape
    seq, new_state = model.trunk_forward(inputs, state, train, rng)
    new_state = detach_state(new_state)
    top_dim = model.config.layer_hidden_dim(model.config.n_layers - 1)
    flat = ad.reshape(seq, (t_len * batch, top_dim))  # [T*batch, H_last]
    logits_flat = model.decode(flat)
    logits = ad.reshape(logits_flat, (t_len, batch, model.config.vocab_size))
    loss = None
    if targets is not None:
        if targets.shape != inputs.shape:
            raise ad.ShapeError(
                f"lm_forward: targets {targets.shape} must match inputs {inputs.shape}")
        loss = ad.softmax_cross_entropy(logits_flat, targets.reshape(-1))
    return logits, new_state, loss


def reverse_stream(stream: np.ndarray) -> np.ndarray:
    """Reverse token order; applying twice is the identity."""
    return np.ascontiguousarray(np.asarray(stream)[::-1])
