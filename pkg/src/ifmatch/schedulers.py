"""Confidence gates, distribution alignment, LR schedule, EMA shadow.

Four threshold mechanisms gate the strongly-augmented student branch:

* ``constant`` — the fixed base threshold;
* ``flex`` — class-specific thresholds scaled by per-class pass counts
  (more passes => higher threshold for that class);
* ``free`` — a self-adaptive global level times a max-normalized running
  class profile, starting from 1/C;
* ``soft`` — no hard gate; per-sample Gaussian weights around a running
  mean confidence.

The flex/free/soft rules are simplified versions of the published
mechanisms they are named after: flex omits the nonlinear warm-up
mapping, free and soft track their statistics by a plain EMA with decay
0.999.  All emitted thresholds land in [0, 1]; an optional clamp range is
applied last.
"""

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

THRESHOLD_KINDS = ("constant", "flex", "free", "soft")
STATE_EMA_DECAY = 0.999
SOFT_VAR_FLOOR = 1e-6


@dataclass
class ThresholdState:
    kind: str
    num_classes: int
    tau_base: float = 0.95
    clamp: Optional[Tuple[float, float]] = None
    sigma: np.ndarray = None          # per-class pass counts (flex)
    mu_t: float = 0.0                 # EMA mean confidence (free/soft)
    var_t: float = 0.0                # EMA confidence variance (soft)
    profile: np.ndarray = None        # EMA of batch-mean predictions (free)
    decay: float = STATE_EMA_DECAY

    def __post_init__(self):
        if self.kind not in THRESHOLD_KINDS:
            raise ValueError(f"unknown threshold kind {self.kind!r}; known: {THRESHOLD_KINDS}")
        if not 0.0 < self.tau_base <= 1.0:
            raise ValueError(f"tau_base must be in (0, 1], got {self.tau_base}")
        c = self.num_classes
        if self.sigma is None:
            self.sigma = np.zeros(c)
        if self.profile is None:
            self.profile = np.full(c, 1.0 / c)
        if self.mu_t == 0.0:
            self.mu_t = 1.0 / c
        if self.var_t == 0.0:
            self.var_t = (1.0 / c) ** 2


def _clamped(state: ThresholdState, value):
    if state.clamp is not None:
        lo, hi = state.clamp
        return np.clip(value, lo, hi)
    return value


def threshold_value(state: ThresholdState, cls: Optional[int] = None) -> float:
    """Current gate for one class (flex requires the class argument)."""
    if state.kind == "constant":
        return float(_clamped(state, state.tau_base))
    if state.kind == "flex":
        if cls is None:
            raise ValueError("flex threshold requires a class argument")
        ref = max(float(state.sigma.max()), 1.0)
        return float(_clamped(state, state.tau_base * float(state.sigma[cls]) / ref))
    if state.kind == "free":
        prof = state.profile / max(float(state.profile.max()), 1e-12)
        if cls is None:
            return float(_clamped(state, np.clip(state.mu_t, 0.0, 1.0)))
        return float(_clamped(state, np.clip(state.mu_t * float(prof[cls]), 0.0, 1.0)))
    # soft: gating happens through soft_weight; the comparison level is mu_t
    return float(_clamped(state, state.mu_t))


def threshold_for_batch(state: ThresholdState, pseudo: np.ndarray) -> np.ndarray:
    """Per-sample gates for a batch of pseudo-classes."""
    return np.array([threshold_value(state, int(c)) for c in pseudo])


def soft_weight(conf: float, state: ThresholdState) -> float:
    """Gaussian down-weighting below the running mean confidence."""
    if not 0.0 <= conf <= 1.0:
        raise ValueError(f"confidence must be in [0, 1], got {conf}")
    if conf >= state.mu_t:
        return 1.0
    var = max(state.var_t, SOFT_VAR_FLOOR)
    return float(np.exp(-((conf - state.mu_t) ** 2) / (2.0 * var)))


def soft_weights(confs: np.ndarray, state: ThresholdState) -> np.ndarray:
    return np.array([soft_weight(float(c), state) for c in confs])


def update_threshold_state(state: ThresholdState, probs: np.ndarray):
    """Fold one batch of (DA-refined) teacher predictions into the state."""
    conf = probs.max(axis=1)
    pseudo = probs.argmax(axis=1)
    d = state.decay
    if state.kind == "flex":
        passed = conf >= state.tau_base
        for c in pseudo[passed]:
            state.sigma[int(c)] += 1.0
    elif state.kind in ("free", "soft"):
        state.mu_t = d * state.mu_t + (1.0 - d) * float(conf.mean())
        state.mu_t = float(np.clip(state.mu_t, 1.0 / state.num_classes, 1.0))
        if state.kind == "free":
            state.profile = d * state.profile + (1.0 - d) * probs.mean(axis=0)
        else:
            state.var_t = d * state.var_t + (1.0 - d) * float(conf.var())


@dataclass
class DAState:
    """Running mean of teacher predictions plus the alignment target."""

    num_classes: int
    target: np.ndarray = None
    p_bar: np.ndarray = None
    decay: float = STATE_EMA_DECAY

    def __post_init__(self):
        c = self.num_classes
        if self.target is None:
            self.target = np.full(c, 1.0 / c)
        if self.p_bar is None:
            self.p_bar = np.full(c, 1.0 / c)
        for name, dist in (("target", self.target), ("p_bar", self.p_bar)):
            if abs(float(dist.sum()) - 1.0) > 1e-9:
                raise ValueError(f"{name} distribution does not sum to 1")


def da_refine(p: np.ndarray, state: DAState) -> np.ndarray:
    """Rescale predictions toward the target class distribution.

    Refinement uses the stored running mean; afterwards the running mean
    absorbs the pre-refinement batch mean.  Accepts a single distribution
    (C,) or a batch (N, C).
    """
    single = p.ndim == 1
    batch = p[None, :] if single else p
    ratio = state.target / np.maximum(state.p_bar, 1e-8)
    refined = batch * ratio[None, :]
    refined = refined / refined.sum(axis=1, keepdims=True)
    state.p_bar = state.decay * state.p_bar + (1.0 - state.decay) * batch.mean(axis=0)
    return refined[0] if single else refined


@dataclass(frozen=True)
class LrSchedule:
    """Cosine decay eta(k) = eta0 * cos(7*pi*k / (16*K))."""

    eta0: float
    total_steps: int


def lr_at(schedule: LrSchedule, k: int) -> float:
    if k < 0 or k > schedule.total_steps:
        raise ValueError(f"step {k} outside [0, {schedule.total_steps}]")
    if schedule.total_steps == 0:
        return schedule.eta0
    return schedule.eta0 * float(np.cos(7.0 * np.pi * k / (16.0 * schedule.total_steps)))


class EmaModel:
    """Exponentially averaged shadow of the live parameters."""

    def __init__(self, named_params, decay: float = 0.999):
        self.decay = decay
        self.shadow = {name: p.data.copy() for name, p in named_params}

    def update(self, named_params):
        ema_update(self, named_params)

    def as_tensors(self):
        from .tensor import Tensor

        return {name: Tensor(arr) for name, arr in self.shadow.items()}


def ema_update(ema: EmaModel, named_params):
    """shadow <- m * shadow + (1 - m) * live, for every parameter."""
    m = ema.decay
    for name, p in named_params:
        shadow = ema.shadow.get(name)
        if shadow is None or shadow.shape != p.data.shape:
            raise ValueError(f"shadow/live shape mismatch for {name!r}")
        ema.shadow[name] = m * shadow + (1.0 - m) * p.data
