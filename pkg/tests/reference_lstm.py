"""Plain-numpy LSTM language model, independent of the tape engine.

Used as the oracle for the zero-dropout equivalence check: a straight
transcription of the LSTM recurrences with no autodiff machinery. It
mirrors the production op ordering (hoisted input projection, in-place
gate activation) so that agreement can be asserted bit-for-bit.
"""

import numpy as np


def _sigmoid(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def vanilla_lm_forward(params: dict, ids: np.ndarray, n_layers: int,
                       tie_weights: bool = True):
    """Forward pass of a dropout-free stacked LSTM LM.

    ``params`` maps the checkpoint tensor names to numpy arrays. Returns
    (logits [T*B, vocab], final states list of (h, c)).
    """
    emb = params["embedding.weight"]
    t_len, batch = ids.shape
    x_seq = emb[ids]  # [T, B, E]
    states = []
    for li in range(n_layers):
        wx = params[f"lstm{li}.wx"]
        wh = params[f"lstm{li}.wh"]
        bias = params[f"lstm{li}.bias"]
        hd = wh.shape[0]
        gx_all = (x_seq.reshape(t_len * batch, -1) @ wx).reshape(
            t_len, batch, 4 * hd)
        h = np.zeros((batch, hd), dtype=emb.dtype)
        c = np.zeros((batch, hd), dtype=emb.dtype)
        out = np.empty((t_len, batch, hd), dtype=emb.dtype)
        for t in range(t_len):
            gates = h @ wh
            gates += gx_all[t]
            gates += bias
            gates[:, :2 * hd] = _sigmoid(gates[:, :2 * hd])
            gates[:, 2 * hd:3 * hd] = np.tanh(gates[:, 2 * hd:3 * hd])
            gates[:, 3 * hd:] = _sigmoid(gates[:, 3 * hd:])
            i, f = gates[:, :hd], gates[:, hd:2 * hd]
            g, o = gates[:, 2 * hd:3 * hd], gates[:, 3 * hd:]
            c = f * c
            c += i * g
            h = o * np.tanh(c)
            out[t] = h
        states.append((h, c))
        x_seq = out
    flat = x_seq.reshape(t_len * batch, -1)
    if tie_weights:
        logits = flat @ emb.T
    else:
        logits = flat @ params["decoder.weight"].T
    logits += params["decoder.bias"]
    return logits, states
