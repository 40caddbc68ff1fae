"""Learning-rate schedules, layer groups, freezing, and parameter updates.

The slanted triangular schedule rises linearly to its peak over the first
``cut = floor(T * cut_frac)`` iterations and decays linearly back so that
the first and last iterations sit at ``eta_max / ratio``. Discriminative
fine-tuning gives each layer group its own learning rate, decaying by a
fixed factor of 2.6 per group from the head downward; the two compose
multiplicatively (group LR times the schedule's eta_t / eta_max factor).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .autodiff import ContractError, Tensor

DISCRIMINATIVE_DECAY = 2.6


@dataclass
class StlrSchedule:
    """Slanted triangular learning-rate schedule over T iterations."""
    T: int
    cut_frac: float = 0.1
    ratio: float = 32.0
    eta_max: float = 0.01

    def __post_init__(self):
        if not 0.0 < self.cut_frac < 1.0:
            raise ContractError(f"cut_frac must be in (0,1), got {self.cut_frac}")
        if self.ratio <= 1.0:
            raise ContractError(f"ratio must exceed 1, got {self.ratio}")
        if self.cut < 1:
            raise ContractError(
                f"T={self.T} with cut_frac={self.cut_frac} gives an empty warm-up")

    @property
    def cut(self) -> int:
        # tiny epsilon so floor() survives products like 10 * 0.3
        return int(self.T * self.cut_frac + 1e-9)

    def lr(self, t: int) -> float:
        return stlr_lr(self, t)


def stlr_lr(sched: StlrSchedule, t: int) -> float:
    """Learning rate at iteration t in [0, T]: linear up, then linear down."""
    if not 0 <= t <= sched.T:
        raise ContractError(f"iteration {t} outside [0, {sched.T}]")
    cut = sched.cut
    if t < cut:
        p = t / cut
    else:
        decay_span = cut * (1.0 / sched.cut_frac - 1.0)
        p = 1.0 if decay_span <= 0 else 1.0 - (t - cut) / decay_span
        # flooring of cut can leave the decay span short of T; the rate
        # then rests at eta_max/ratio instead of extrapolating below it
        if p < 0.0:
            p = 0.0
    return sched.eta_max * (1.0 + p * (sched.ratio - 1.0)) / sched.ratio


def cosine_lr(t: int, T: int, eta_max: float, eta_min: float = 0.0) -> float:
    """One-cycle cosine annealing from eta_max down to eta_min."""
    if not 0 <= t <= T:
        raise ContractError(f"iteration {t} outside [0, {T}]")
    return eta_min + 0.5 * (eta_max - eta_min) * (1.0 + np.cos(np.pi * t / T))


def constant_lr(t: int, T: int, eta: float) -> float:
    return eta


@dataclass
class LayerGroup:
    """One unit of discriminative learning rates and freezing."""
    name: str
    params: list[Tensor]
    lr: float = 0.0
    frozen: bool = False


class LayerGroups:
    """Ordered partition of all parameters: index 0 lowest, last the head."""

    def __init__(self, groups: Sequence[LayerGroup]):
        self.groups = list(groups)
        seen: set[int] = set()
        for g in self.groups:
            for p in g.params:
                if p.uid in seen:
                    raise ContractError(
                        f"parameter {p.uid} appears in more than one group")
                seen.add(p.uid)

    def __len__(self) -> int:
        return len(self.groups)

    def __iter__(self):
        return iter(self.groups)

    def __getitem__(self, i: int) -> LayerGroup:
        return self.groups[i]

    def all_params(self) -> list[Tensor]:
        return [p for g in self.groups for p in g.params]

    def trainable_params(self) -> list[Tensor]:
        return [p for g in self.groups if not g.frozen for p in g.params]

    def unfrozen_names(self) -> list[str]:
        return [g.name for g in self.groups if not g.frozen]

    def set_uniform_lr(self, lr: float) -> "LayerGroups":
        for g in self.groups:
            g.lr = lr
        return self

    def freeze_all(self) -> "LayerGroups":
        for g in self.groups:
            g.frozen = True
        return self


def assign_discriminative_lrs(groups: LayerGroups, eta_last: float,
                              decay: float = DISCRIMINATIVE_DECAY) -> LayerGroups:
    """Head group gets eta_last; each group below divides by ``decay``."""
    if eta_last <= 0 or decay <= 0:
        raise ContractError("eta_last and decay must be positive")
    lr = eta_last
    for g in reversed(groups.groups):
        g.lr = lr
        lr = lr / decay
    return groups


@dataclass
class UnfreezePolicy:
    """Which layer groups train at each epoch of classifier fine-tuning."""
    mode: str = "gradual"  # full | last_only | gradual | chain_thaw
    epochs_per_stage: int = 1

    MODES = ("full", "last_only", "gradual", "chain_thaw")

    def __post_init__(self):
        if self.mode not in self.MODES:
            raise ContractError(f"unknown unfreeze mode {self.mode!r}")
        if self.epochs_per_stage < 1:
            raise ContractError("epochs_per_stage must be >= 1")


def unfreeze_step(policy: UnfreezePolicy, groups: LayerGroups,
                  epoch: int) -> LayerGroups:
    """Set frozen flags for the given 1-based training epoch.

    gradual unfreezes one additional group per stage from the top down;
    chain_thaw trains exactly one group per stage (head first, then each
    lower group) and finishes with everything thawed; last_only trains only
    the head; full trains everything from the start.
    """
    if epoch < 1:
        raise ContractError("epoch index is 1-based")
    n = len(groups)
    stage = (epoch - 1) // policy.epochs_per_stage + 1
    if policy.mode == "full":
        unfrozen = set(range(n))
    elif policy.mode == "last_only":
        unfrozen = {n - 1}
    elif policy.mode == "gradual":
        unfrozen = set(range(max(0, n - stage), n))
    else:  # chain_thaw
        if stage <= n:
            unfrozen = {n - stage}
        else:
            unfrozen = set(range(n))
    for i, g in enumerate(groups):
        g.frozen = i not in unfrozen
    return groups


class SgdOptimizer:
    """Plain SGD; the update is the gradient scaled by the effective LR."""

    kind = "sgd"

    def step(self, groups: LayerGroups, grads: dict[int, Tensor],
             sched_factor: float = 1.0) -> None:
        _check_sched(sched_factor)
        for g in groups:
            if g.frozen:
                continue
            lr = g.lr * sched_factor
            for p in g.params:
                grad = _require_grad(grads, p)
                p.data -= lr * grad


class AdamOptimizer:
    """Adam with per-group learning rates; state keyed by parameter uid.

    Frozen groups are skipped entirely: neither the parameter nor its
    first/second-moment state advances.
    """

    kind = "adam"

    def __init__(self, beta1: float = 0.7, beta2: float = 0.99,
                 eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[int, np.ndarray] = {}
        self.v: dict[int, np.ndarray] = {}
        self.t: dict[int, int] = {}

    def step(self, groups: LayerGroups, grads: dict[int, Tensor],
             sched_factor: float = 1.0) -> None:
        _check_sched(sched_factor)
        b1, b2 = self.beta1, self.beta2
        for g in groups:
            if g.frozen:
                continue
            lr = g.lr * sched_factor
            for p in g.params:
                grad = _require_grad(grads, p)
                m = self.m.get(p.uid)
                if m is None:
                    m = np.zeros_like(p.data)
                    self.m[p.uid] = m
                    self.v[p.uid] = np.zeros_like(p.data)
                    self.t[p.uid] = 0
                v = self.v[p.uid]
                self.t[p.uid] += 1
                t = self.t[p.uid]
                m *= b1
                m += (1 - b1) * grad
                v *= b2
                v += (1 - b2) * grad * grad
                m_hat = m / (1 - b1 ** t)
                v_hat = v / (1 - b2 ** t)
                p.data -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(kind: str, beta1: float = 0.7, beta2: float = 0.99):
    if kind == "sgd":
        return SgdOptimizer()
    if kind == "adam":
        return AdamOptimizer(beta1=beta1, beta2=beta2)
    raise ContractError(f"unknown optimizer {kind!r}")


def apply_update(optimizer, groups: LayerGroups, sched_factor: float,
                 grads: dict[int, Tensor]) -> None:
    """One update over all unfrozen groups at their effective LRs."""
    optimizer.step(groups, grads, sched_factor)


def clip_gradients(grads: dict[int, Tensor], params: Iterable[Tensor],
                   max_norm: float) -> float:
    """Scale the whole gradient map so its global L2 norm is <= max_norm."""
    total = 0.0
    arrs = []
    for p in params:
        g = grads.get(p.uid)
        if g is None:
            continue
        arrs.append(g.data)
        total += float((g.data * g.data).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for a in arrs:
            a *= scale
    return norm


def schedule_factor(schedule: str, t: int, T: int, stlr: Optional[StlrSchedule],
                    eta_max: float) -> float:
    """eta_t / eta_max for the active schedule; constant gives 1."""
    if schedule == "constant":
        return 1.0
    if schedule == "cosine":
        return cosine_lr(t, T, eta_max) / eta_max
    if schedule == "stlr":
        return stlr_lr(stlr, t) / stlr.eta_max
    raise ContractError(f"unknown schedule {schedule!r}")


def _check_sched(sched_factor: float) -> None:
    if not 0.0 < sched_factor <= 1.0:
        raise ContractError(
            f"sched_factor must be in (0, 1], got {sched_factor}")


def _require_grad(grads: dict[int, Tensor], p: Tensor) -> np.ndarray:
    g = grads.get(p.uid)
    if g is None:
        raise ContractError(
            f"missing gradient for unfrozen parameter uid={p.uid}")
    return g.data
