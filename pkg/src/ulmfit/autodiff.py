"""Reverse-mode automatic differentiation on dense numpy tensors.

A :class:`Tensor` wraps a flat numpy array plus an optional gradient slot.
Operations executed while a :class:`Tape` is active are recorded as nodes
(inputs, output, backward rule); replaying the tape in reverse accumulates
gradients into every reachable leaf that requires them.

The op set is deliberately small: exactly what a weight-dropped LSTM
language model, a batch-normalized classifier head, and pooling over time
need. No general broadcasting -- the only broadcast allowed is a rank-1
bias added over the last dimension, which keeps every shape rule auditable.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class AutodiffError(Exception):
    """Base class for tensor-engine errors."""


class ShapeError(AutodiffError):
    """Input shapes violate an op's shape rule; names the op and dims."""


class ContractError(AutodiffError):
    """An op precondition was violated (non-scalar loss, bad mode, ...)."""


class DegenerateBatchError(AutodiffError):
    """batch_norm asked to normalize a single-sample batch in train mode."""


_uid_counter = itertools.count(1)


class Tensor:
    """n-dimensional real array with an optional gradient slot."""

    __slots__ = ("uid", "data", "grad", "requires_grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.uid: int = next(_uid_counter)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.node: Optional[Node] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def detach(self) -> "Tensor":
        """A view of the same values cut off from any tape history."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"


class Node:
    """One recorded operation: input refs, output ref, backward rule."""

    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op: str, inputs: Sequence[Tensor], output: Tensor,
                 backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]):
        self.op = op
        self.inputs = tuple(inputs)
        self.output = output
        self.backward_fn = backward_fn


_tape_stack: list[Optional["Tape"]] = []


def _active_tape() -> Optional["Tape"]:
    return _tape_stack[-1] if _tape_stack else None


class Tape:
    """Ordered record of operations; inputs always precede their consumers."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack.pop()

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, backward_fn) -> None:
        node = Node(op, inputs, output, backward_fn)
        output.node = node
        self.nodes.append(node)

    def backward(self, loss: Tensor, params: Optional[Iterable[Tensor]] = None) -> dict[int, Tensor]:
        """Accumulate d(loss)/d(leaf) for every requires_grad leaf.

        Returns a map from tensor uid to gradient tensor. Leaves listed in
        ``params`` but unreachable from ``loss`` get zero gradients.
        Gradients always accumulate (sum over all paths), never overwrite.
        """
        if loss.data.size != 1:
            raise ContractError(
                f"backward: loss must be scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {
            loss.uid: np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g_out = grads.pop(node.output.uid, None)
            if g_out is None:
                continue  # not on a path from loss
            in_grads = node.backward_fn(g_out)
            for t, g in zip(node.inputs, in_grads):
                if g is None or not t.requires_grad:
                    continue
                acc = grads.get(t.uid)
                # out-of-place: backward rules may hand out aliased arrays
                grads[t.uid] = g if acc is None else acc + g

        result: dict[int, Tensor] = {}
        remaining = dict(grads)
        if params is not None:
            for p in params:
                g = remaining.pop(p.uid, None)
                if g is None:
                    g = np.zeros_like(p.data)
                p.grad = g if p.grad is None else p.grad + g
                result[p.uid] = Tensor(g)
        for uid, g in remaining.items():
            result[uid] = Tensor(g)
        # leaves not passed via params still get .grad populated
        produced = {n.output.uid for n in self.nodes}
        by_uid = {t.uid: t for n in self.nodes for t in n.inputs}
        for uid, g in remaining.items():
            t = by_uid.get(uid)
            if t is not None and uid not in produced and t.requires_grad:
                t.grad = g if t.grad is None else t.grad + g
        return result


def backward(loss: Tensor, params: Optional[Iterable[Tensor]] = None) -> dict[int, Tensor]:
    """Run reverse-mode accumulation on the tape that produced ``loss``."""
    tape = _active_tape()
    if tape is None and loss.node is None:
        raise ContractError("backward: loss was not recorded on any tape")
    if tape is None:
        raise ContractError("backward: no active tape")
    return tape.backward(loss, params)


class no_tape:
    """Context that disables recording (evaluation / detached segments)."""

    def __enter__(self):
        _tape_stack.append(None)
        return self

    def __exit__(self, *exc):
        _tape_stack.pop()


def _finish(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, backward_fn) -> Tensor:
    tape = _active_tape()
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs and tape is not None)
    if out.requires_grad:
        tape.record(op, inputs, out, backward_fn)
    return out


def _check(cond: bool, op: str, msg: str) -> None:
    if not cond:
        raise ShapeError(f"{op}: {msg}")


# ---------------------------------------------------------------------------
# op implementations
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor, trans_b: bool = False) -> Tensor:
    """2-D matrix product; ``trans_b`` multiplies by b's transpose."""
    _check(a.data.ndim == 2 and b.data.ndim == 2, "matmul",
           f"expects 2-D operands, got {a.shape} and {b.shape}")
    bk = b.shape[1] if trans_b else b.shape[0]
    _check(a.shape[1] == bk, "matmul",
           f"inner dims differ: {a.shape} x {b.shape}" + (" (transposed)" if trans_b else ""))
    ad, bd = a.data, b.data
    out = ad @ bd.T if trans_b else ad @ bd

    def bwd(g):
        if trans_b:
            return g @ bd, g.T @ ad
        return g @ bd.T, ad.T @ g

    return _finish("matmul", (a, b), out, bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; b may be rank-1 broadcast over the last dim (bias)."""
    bias = b.data.ndim == 1 and a.data.ndim > 1
    if bias:
        _check(a.shape[-1] == b.shape[0], "add",
               f"bias dim {b.shape[0]} does not match last dim of {a.shape}")
    else:
        _check(a.shape == b.shape, "add", f"shape mismatch {a.shape} vs {b.shape}")
    out = a.data + b.data

    def bwd(g):
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if bias else g
        return g, gb

    return _finish("add", (a, b), out, bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product of same-shape tensors."""
    _check(a.shape == b.shape, "mul", f"shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _finish("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def sigmoid(x: Tensor) -> Tensor:
    out = _stable_sigmoid(x.data)
    return _finish("sigmoid", (x,), out, lambda g: (g * out * (1.0 - out),))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    # sigma(x) = (tanh(x/2) + 1) / 2: one transcendental, no overflow
    out = np.tanh(0.5 * x)
    out += 1.0
    out *= 0.5
    return out


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _finish("tanh", (x,), out, lambda g: (g * (1.0 - out * out),))


def relu(x: Tensor) -> Tensor:
    xd = x.data
    out = np.maximum(xd, 0.0)
    return _finish("relu", (x,), out, lambda g: (g * (xd > 0),))


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate along ``axis``; all other dims must agree."""
    _check(len(parts) >= 1, "concat", "needs at least one input")
    ref = list(parts[0].shape)
    ax = axis % len(ref) if ref else 0
    for p in parts[1:]:
        s = list(p.shape)
        s_other = s[:ax] + s[ax + 1:]
        r_other = ref[:ax] + ref[ax + 1:]
        _check(s_other == r_other, "concat",
               f"non-concat dims differ: {tuple(ref)} vs {p.shape} on axis {ax}")
    out = np.concatenate([p.data for p in parts], axis=ax)
    sizes = [p.shape[ax] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=ax))

    return _finish("concat", tuple(parts), out, bwd)


def embedding_lookup(emb: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``emb`` by integer index array ``ids``."""
    _check(emb.data.ndim == 2, "embedding_lookup",
           f"embedding matrix must be 2-D, got {emb.shape}")
    idx = np.asarray(ids)
    _check(idx.size == 0 or (idx.min() >= 0 and idx.max() < emb.shape[0]),
           "embedding_lookup", f"ids out of range for vocab {emb.shape[0]}")
    out = emb.data[idx]

    def bwd(g):
        ge = np.zeros_like(emb.data)
        np.add.at(ge, idx.reshape(-1), g.reshape(-1, emb.shape[1]))
        return (ge,)

    return _finish("embedding_lookup", (emb,), out, bwd)


def dropout_mask_apply(x: Tensor, mask: Tensor) -> Tensor:
    """Apply a precomputed inverted-dropout mask (entries 0 or 1/(1-p))."""
    _check(x.shape == mask.shape, "dropout_mask_apply",
           f"mask shape {mask.shape} differs from input {x.shape}")
    xd, md = x.data, mask.data
    return _finish("dropout_mask_apply", (x, mask), xd * md,
                   lambda g: (g * md, g * xd))


def make_dropout_mask(shape, p: float, rng: np.random.Generator, dtype=np.float64) -> Tensor:
    """Draw an inverted-dropout mask: 0 with prob p, else 1/(1-p)."""
    if p <= 0.0:
        return Tensor(np.ones(shape, dtype=dtype))
    if p >= 1.0:
        return Tensor(np.zeros(shape, dtype=dtype))
    keep = rng.random(shape) >= p
    return Tensor(keep.astype(dtype) / (1.0 - p))


class BatchNormState:
    """Running statistics for one batch_norm site (eval-mode estimates)."""

    __slots__ = ("running_mean", "running_var", "momentum", "eps")

    def __init__(self, num_features: int, momentum: float = 0.1,
                 eps: float = 1e-5, dtype=np.float64):
        self.running_mean = np.zeros(num_features, dtype=dtype)
        self.running_var = np.ones(num_features, dtype=dtype)
        self.momentum = momentum
        self.eps = eps


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
               train: bool) -> Tensor:
    """Batch normalization over dim 0 of a [batch, features] input.

    Train mode normalizes with batch statistics and folds them into the
    running estimates (momentum update); eval mode uses the running
    estimates only. A train-mode batch of one sample is degenerate.
    """
    _check(x.data.ndim == 2, "batch_norm", f"expects [batch, features], got {x.shape}")
    n, f = x.shape
    _check(gamma.shape == (f,) and beta.shape == (f,), "batch_norm",
           f"gamma/beta must be [{f}], got {gamma.shape}/{beta.shape}")
    xd = x.data
    eps = state.eps
    if train:
        if n < 2:
            raise DegenerateBatchError(
                "batch_norm: train mode needs batch size >= 2")
        mu = xd.mean(axis=0)
        var = xd.var(axis=0)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (xd - mu) * inv_std
        m = state.momentum
        state.running_mean[:] = (1 - m) * state.running_mean + m * mu
        state.running_var[:] = (1 - m) * state.running_var + m * var * n / max(n - 1, 1)
    else:
        inv_std = 1.0 / np.sqrt(state.running_var + eps)
        xhat = (xd - state.running_mean) * inv_std
    out = gamma.data * xhat + beta.data
    gd = gamma.data

    def bwd(g):
        dgamma = (g * xhat).sum(axis=0)
        dbeta = g.sum(axis=0)
        if train:
            dxhat = g * gd
            dx = inv_std * (dxhat - dxhat.mean(axis=0)
                            - xhat * (dxhat * xhat).mean(axis=0))
        else:
            dx = g * gd * inv_std
        return dx, dgamma, dbeta

    return _finish("batch_norm", (x, gamma, beta), out, bwd)


def _pool_prep(op: str, x: Tensor, mask: Optional[np.ndarray]):
    """Shared validation for time pooling over [T, H] or [T, B, H]."""
    _check(x.data.ndim in (2, 3), op, f"expects [T,H] or [T,B,H], got {x.shape}")
    if mask is not None:
        want = x.shape[:-1]
        m = np.asarray(mask, dtype=bool)
        _check(m.shape == want, op, f"mask shape {m.shape} must be {want}")
        if not m.any(axis=0).all():
            raise ContractError(f"{op}: some column has no unmasked time step")
        return m
    return None


def max_over_time(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Featurewise max over the leading time axis; masked steps excluded."""
    m = _pool_prep("max_over_time", x, mask)
    xd = x.data
    if m is None:
        work = xd
    else:
        work = np.where(m[..., None], xd, -np.inf)
    idx = work.argmax(axis=0)
    out = np.take_along_axis(work, idx[None, ...], axis=0)[0]

    def bwd(g):
        gx = np.zeros_like(xd)
        np.put_along_axis(gx, idx[None, ...], g[None, ...], axis=0)
        return (gx,)

    return _finish("max_over_time", (x,), out, bwd)


def mean_over_time(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Featurewise mean over the leading time axis; masked steps excluded."""
    m = _pool_prep("mean_over_time", x, mask)
    xd = x.data
    if m is None:
        count = float(xd.shape[0])
        out = xd.sum(axis=0) / count

        def bwd(g):
            return (np.broadcast_to(g / count, xd.shape).copy(),)
    else:
        mf = m.astype(xd.dtype)[..., None]
        count = mf.sum(axis=0)
        out = (xd * mf).sum(axis=0) / count

        def bwd(g):
            return ((g / count) * mf,)

    return _finish("mean_over_time", (x,), out, bwd)


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean cross-entropy of softmax(logits) against integer targets."""
    _check(logits.data.ndim == 2, "softmax_cross_entropy",
           f"expects [N, classes], got {logits.shape}")
    tgt = np.asarray(targets).reshape(-1)
    n, c = logits.shape
    _check(tgt.shape[0] == n, "softmax_cross_entropy",
           f"{tgt.shape[0]} targets for {n} rows")
    _check(tgt.size == 0 or (tgt.min() >= 0 and tgt.max() < c),
           "softmax_cross_entropy", f"target out of range for {c} classes")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    logsumexp = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsumexp
    out = -logp[np.arange(n), tgt].mean()
    probs = np.exp(logp)

    def bwd(g):
        gl = probs.copy()
        gl[np.arange(n), tgt] -= 1.0
        gl *= float(g) / n
        return (gl,)

    return _finish("softmax_cross_entropy", (logits,),
                   np.asarray(out, dtype=z.dtype), bwd)


def softmax(logits: Tensor) -> Tensor:
    """Row-wise softmax over the last dim of a 2-D tensor."""
    _check(logits.data.ndim == 2, "softmax", f"expects [N, classes], got {logits.shape}")
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return (out * (g - dot),)

    return _finish("softmax", (logits,), out, bwd)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    """Slice [start:stop] of the last dimension."""
    f = x.shape[-1]
    _check(0 <= start < stop <= f, "slice_cols",
           f"range [{start}:{stop}] invalid for last dim {f}")
    out = x.data[..., start:stop]  # view; ops never mutate inputs

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[..., start:stop] = g
        return (gx,)

    return _finish("slice_cols", (x,), out, bwd)


def select_time(x: Tensor, t: int) -> Tensor:
    """Select index ``t`` along the leading (time) axis."""
    _check(0 <= t < x.shape[0], "select_time",
           f"index {t} out of range for time dim {x.shape[0]}")
    out = x.data[t]  # view; ops never mutate inputs

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[t] = g
        return (gx,)

    return _finish("select_time", (x,), out, bwd)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    _check(int(np.prod(shape)) == x.size, "reshape",
           f"cannot reshape {x.shape} to {shape}")
    old = x.shape
    return _finish("reshape", (x,), x.data.reshape(shape),
                   lambda g: (g.reshape(old),))


def lstm_unroll(gx_seq: Tensor, hc0: Tensor, wh: Tensor, bias: Tensor) -> Tensor:
    """One LSTM layer unrolled over time as a single tape node.

    ``gx_seq`` is the hoisted input projection x @ Wx of shape [T, batch, 4H]
    (gate order: input, forget, cell, output); ``hc0`` stacks the initial
    hidden and cell state as [batch, 2H]. Returns [T, batch, 2H] holding
    every step's (h, c) stack, so both the output sequence and the final
    carried state are slices of one output. Fusing the whole unroll keeps
    the tape small and the backward loop free of per-step allocations.
    """
    _check(gx_seq.data.ndim == 3 and gx_seq.shape[2] % 4 == 0, "lstm_unroll",
           f"gx_seq must be [T, batch, 4H], got {gx_seq.shape}")
    t_len, batch, gdim = gx_seq.shape
    hd = gdim // 4
    _check(hc0.shape == (batch, 2 * hd), "lstm_unroll",
           f"hc0 must be [{batch}, {2 * hd}], got {hc0.shape}")
    _check(wh.shape == (hd, 4 * hd), "lstm_unroll",
           f"wh must be [{hd}, {4 * hd}], got {wh.shape}")
    _check(bias.shape == (4 * hd,), "lstm_unroll",
           f"bias must be [{4 * hd}], got {bias.shape}")
    gxd, whd, bd = gx_seq.data, wh.data, bias.data
    gates_all = np.empty((t_len, batch, 4 * hd), dtype=gxd.dtype)
    tanhc_all = np.empty((t_len, batch, hd), dtype=gxd.dtype)
    out = np.empty((t_len, batch, 2 * hd), dtype=gxd.dtype)
    h = hc0.data[:, :hd]
    c = hc0.data[:, hd:]
    for t in range(t_len):
        gt = gates_all[t]
        np.matmul(h, whd, out=gt)
        gt += gxd[t]
        gt += bd
        gt[:, :2 * hd] = _stable_sigmoid(gt[:, :2 * hd])
        gt[:, 2 * hd:3 * hd] = np.tanh(gt[:, 2 * hd:3 * hd])
        gt[:, 3 * hd:] = _stable_sigmoid(gt[:, 3 * hd:])
        c_new = out[t, :, hd:]
        np.multiply(gt[:, hd:2 * hd], c, out=c_new)
        c_new += gt[:, :hd] * gt[:, 2 * hd:3 * hd]
        np.tanh(c_new, out=tanhc_all[t])
        np.multiply(gt[:, 3 * hd:], tanhc_all[t], out=out[t, :, :hd])
        h = out[t, :, :hd]
        c = c_new

    def bwd(grad):
        dgates_all = np.empty_like(gates_all)
        dh = np.zeros((batch, hd), dtype=gxd.dtype)
        dc = np.zeros((batch, hd), dtype=gxd.dtype)
        for t in range(t_len - 1, -1, -1):
            gt = gates_all[t]
            i, f = gt[:, :hd], gt[:, hd:2 * hd]
            g, o = gt[:, 2 * hd:3 * hd], gt[:, 3 * hd:]
            tanhc = tanhc_all[t]
            c_prev = out[t - 1, :, hd:] if t > 0 else hc0.data[:, hd:]
            gh = grad[t, :, :hd] + dh
            dc = dc + grad[t, :, hd:] + gh * (o * (1.0 - tanhc * tanhc))
            dgt = dgates_all[t]
            np.multiply((dc * g), (i * (1.0 - i)), out=dgt[:, :hd])
            np.multiply((dc * c_prev), (f * (1.0 - f)), out=dgt[:, hd:2 * hd])
            np.multiply((dc * i), (1.0 - g * g), out=dgt[:, 2 * hd:3 * hd])
            np.multiply((gh * tanhc), (o * (1.0 - o)), out=dgt[:, 3 * hd:])
            dh = dgt @ whd.T
            dc = dc * f
        dhc0 = np.concatenate([dh, dc], axis=1)
        h_prev_all = np.concatenate([hc0.data[None, :, :hd], out[:-1, :, :hd]],
                                    axis=0)
        dwh = h_prev_all.reshape(t_len * batch, hd).T @ \
            dgates_all.reshape(t_len * batch, 4 * hd)
        dbias = dgates_all.sum(axis=(0, 1))
        return dgates_all, dhc0, dwh, dbias

    return _finish("lstm_unroll", (gx_seq, hc0, wh, bias), out, bwd)


# ---------------------------------------------------------------------------
# dispatch surface
# ---------------------------------------------------------------------------

def _op_matmul(inputs, attrs):
    return matmul(inputs[0], inputs[1], trans_b=bool(attrs.get("trans_b", False)))


def _op_concat(inputs, attrs):
    return concat(inputs, axis=attrs.get("axis", -1))


def _op_embedding(inputs, attrs):
    return embedding_lookup(inputs[0], attrs["ids"])


def _op_batch_norm(inputs, attrs):
    return batch_norm(inputs[0], inputs[1], inputs[2],
                      attrs["state"], bool(attrs.get("train", False)))


OPS: dict[str, Callable] = {
    "matmul": _op_matmul,
    "add": lambda inputs, attrs: add(inputs[0], inputs[1]),
    "mul": lambda inputs, attrs: mul(inputs[0], inputs[1]),
    "sigmoid": lambda inputs, attrs: sigmoid(inputs[0]),
    "tanh": lambda inputs, attrs: tanh(inputs[0]),
    "relu": lambda inputs, attrs: relu(inputs[0]),
    "concat": _op_concat,
    "embedding_lookup": _op_embedding,
    "dropout_mask_apply": lambda inputs, attrs: dropout_mask_apply(inputs[0], inputs[1]),
    "batch_norm": _op_batch_norm,
    "max_over_time": lambda inputs, attrs: max_over_time(inputs[0], attrs.get("mask")),
    "mean_over_time": lambda inputs, attrs: mean_over_time(inputs[0], attrs.get("mask")),
    "softmax_cross_entropy": lambda inputs, attrs: softmax_cross_entropy(inputs[0], attrs["targets"]),
    "softmax": lambda inputs, attrs: softmax(inputs[0]),
    "slice_cols": lambda inputs, attrs: slice_cols(inputs[0], attrs["start"], attrs["stop"]),
    "select_time": lambda inputs, attrs: select_time(inputs[0], attrs["t"]),
    "reshape": lambda inputs, attrs: reshape(inputs[0], attrs["shape"]),
    "lstm_unroll": lambda inputs, attrs: lstm_unroll(inputs[0], inputs[1], inputs[2], inputs[3]),
}


def op_forward(kind: str, inputs: Sequence[Tensor], attrs: Optional[dict] = None) -> Tensor:
    """Run one registered op; records on the active tape when grads flow."""
    if kind not in OPS:
        raise ContractError(f"op_forward: unknown op kind {kind!r}")
    return OPS[kind](list(inputs), attrs or {})


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

class GradCheckReport:
    """Outcome of an analytic-vs-numeric gradient comparison."""

    def __init__(self, passed: bool, max_rel_err: float, worst: str):
        self.passed = passed
        self.max_rel_err = max_rel_err
        self.worst = worst

    def __repr__(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return f"GradCheckReport({status}, max_rel_err={self.max_rel_err:.3e}, worst={self.worst})"


def grad_check(f: Callable[[Sequence[Tensor]], Tensor], point: Sequence[Tensor],
               h: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients of ``f`` against central differences.

    ``f`` must be deterministic (freeze any dropout masks before calling).
    Relative error uses denominator max(|analytic|, |numeric|, 1e-8); the
    report carries the worst element.
    """
    leaves = [Tensor(np.array(p.data, dtype=np.float64, copy=True), requires_grad=True)
              for p in point]
    with Tape() as tape:
        loss = f(leaves)
        if loss.data.size != 1:
            raise ContractError("grad_check: f must return a scalar")
        grads = tape.backward(loss, params=leaves)

    max_rel = 0.0
    worst = "none"
    for i, leaf in enumerate(leaves):
        analytic = grads[leaf.uid].data
        flat = leaf.data.reshape(-1)
        num = np.zeros_like(flat)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            with no_tape():
                f_plus = f(leaves).item()
            flat[j] = orig - h
            with no_tape():
                f_minus = f(leaves).item()
            flat[j] = orig
            num[j] = (f_plus - f_minus) / (2.0 * h)
        num = num.reshape(leaf.shape)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(num)), 1e-8)
        rel = np.abs(analytic - num) / denom
        j = int(np.argmax(rel))
        if rel.reshape(-1)[j] > max_rel:
            max_rel = float(rel.reshape(-1)[j])
            worst = f"input {i} element {j}"
    return GradCheckReport(max_rel <= tol, max_rel, worst)
