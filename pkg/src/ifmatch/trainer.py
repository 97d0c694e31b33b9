"""The training loop: supervised branch plus two student branches.

Every iteration draws one labeled and one unlabeled batch, computes the
teacher's weak-view predictions (detached, distribution-aligned), and
optimizes L = L_s + lambda_u * (L_u1 + L_u2):

* branch 1 pairs a weak image view with strong feature perturbation at a
  block output (position A), gated by a high constant threshold;
* branch 2 pairs the strong image view with weak feature perturbation
  inside the residual component (position B), gated by the configured
  threshold mechanism, and adds the feature perturbation only for samples
  currently identified as naive.

After back-propagation and the SGD/EMA updates, the step's strong-branch
predictions are recorded into the confidence ledger, which drives the
next visit's naive/challenging decision.

paradigm variants:
  ``fixmatch_baseline``   branch 2 only, image perturbation only.
  ``toy_combined``        one branch stacking strong image and strong
                          feature perturbation (known to over-perturb).
  ``separate_branches``   feature perturbation and image perturbation in
                          separate branches, no co-occurrence, no
                          identification.
  ``ifmatch``             the full triple-branch setup above.
"""

import time
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from . import cbi, featperturb, imgperturb, nets
from . import tensor as T
from .datahub import DatasetSplit
from .errors import NumericAbort
from .report import ExperimentRecord
from .schedulers import (
    DAState,
    EmaModel,
    LrSchedule,
    ThresholdState,
    da_refine,
    lr_at,
    soft_weights,
    threshold_for_batch,
    update_threshold_state,
)
from .streams import named_stream
from .tensor import Tensor

PARADIGMS = ("fixmatch_baseline", "ifmatch", "toy_combined", "separate_branches")


@dataclass
class TrainConfig:
    steps: int = 3000
    batch_labeled: int = 8
    batch_unlabeled: int = 16
    lambda_u: float = 1.0
    tau: float = 0.95
    threshold_kind: str = "constant"
    threshold_clamp: Optional[Tuple[float, float]] = None
    branch1_threshold: str = "constant"   # "constant" or "mirror"
    lr: float = 0.03
    weight_decay: float = 5e-4
    momentum: float = 0.9
    ema_decay: float = 0.999
    seed: int = 1
    paradigm: str = "ifmatch"
    cbi: bool = True
    identification: str = "cbi"           # "cbi" or "saa"
    distribution_alignment: bool = True
    da_target: str = "uniform"            # "uniform" or "labeled_prior"
    eval_every: int = 0                   # 0 -> max(steps // 100, 50)
    eval_batch: int = 64
    measure_time: bool = False            # write measured wall_ms into metrics

    def validate(self):
        if self.paradigm not in PARADIGMS:
            raise ValueError(f"unknown paradigm {self.paradigm!r}; known: {PARADIGMS}")
        if self.batch_labeled < 1 or self.batch_unlabeled < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.lambda_u < 0:
            raise ValueError(f"lambda_u must be >= 0, got {self.lambda_u}")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError(f"tau must be in (0, 1], got {self.tau}")
        if self.branch1_threshold not in ("constant", "mirror"):
            raise ValueError(f"branch1_threshold must be constant|mirror, got {self.branch1_threshold!r}")
        if self.identification not in ("cbi", "saa"):
            raise ValueError(f"identification must be cbi|saa, got {self.identification!r}")


@dataclass
class BatchOutcome:
    loss_s: float = 0.0
    loss_u1: float = 0.0
    loss_u2: float = 0.0
    util_b1: float = 0.0
    util_b2: float = 0.0
    cbi_mask_rate: float = 0.0
    naive_ratio: float = 0.0
    wall_ms: float = 0.0

    def total(self, lambda_u: float) -> float:
        return self.loss_s + lambda_u * (self.loss_u1 + self.loss_u2)


class _Sgd:
    """SGD with momentum and decoupled-from-norm-params weight decay."""

    def __init__(self, named_params, momentum: float, weight_decay: float):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(p.data) for name, p in named_params}

    @staticmethod
    def _decayed(name: str) -> bool:
        return not (name.endswith(".gamma") or name.endswith(".beta") or name.endswith(".b"))

    def step(self, named_params, lr: float):
        for name, p in named_params:
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay and self._decayed(name):
                g = g + self.weight_decay * p.data
            v = self.velocity[name]
            v *= self.momentum
            v += g
            p.data = p.data - lr * v


@dataclass
class TrainState:
    config: TrainConfig
    model: nets.Model
    ema: EmaModel
    optimizer: _Sgd
    schedule: LrSchedule
    thresholds: ThresholdState
    da: DAState
    ledger: cbi.ConfidenceLedger
    policy: imgperturb.ImageAugPolicy
    feat_pool: tuple
    split: DatasetSplit
    step: int = 0


def init_state(config: TrainConfig, split: DatasetSplit, model_spec: nets.ModelSpec,
               policy: Optional[imgperturb.ImageAugPolicy] = None,
               feat_pool=featperturb.STRATEGIES) -> TrainState:
    config.validate()
    model = nets.build(model_spec, seed=config.seed)
    if policy is None:
        policy = imgperturb.ImageAugPolicy.for_image(
            split.image_shape(), fill=split.channel_means()
        )
    target = None
    if config.da_target == "labeled_prior":
        counts = np.bincount(split.labeled_classes, minlength=split.num_classes).astype(float)
        target = counts / counts.sum()
    return TrainState(
        config=config,
        model=model,
        ema=EmaModel(model.param_items(), decay=config.ema_decay),
        optimizer=_Sgd(model.param_items(), config.momentum, config.weight_decay),
        schedule=LrSchedule(config.lr, config.steps),
        thresholds=ThresholdState(
            kind=config.threshold_kind,
            num_classes=split.num_classes,
            tau_base=config.tau,
            clamp=config.threshold_clamp,
        ),
        da=DAState(num_classes=split.num_classes, target=target),
        ledger=cbi.ConfidenceLedger(),
        policy=policy,
        feat_pool=tuple(feat_pool),
        split=split,
    )


def _augment_batch(images: np.ndarray, rng, policy, fn) -> np.ndarray:
    return np.stack([fn(img, rng, policy) for img in images])


def _one_hot(classes: np.ndarray, c: int) -> np.ndarray:
    out = np.zeros((classes.shape[0], c))
    out[np.arange(classes.shape[0]), classes] = 1.0
    return out


def supervised_loss(state: TrainState, images: np.ndarray, classes: np.ndarray) -> Tensor:
    """Mean cross-entropy on weakly augmented labeled samples."""
    if images.shape[0] == 0:
        raise ValueError("empty labeled batch")
    logits = nets.forward(state.model, Tensor(images))
    probs = T.softmax(logits)
    targets = Tensor(_one_hot(classes, state.split.num_classes))
    return T.tmean(T.cross_entropy_rows(targets, probs))


def _gated_branch_loss(state, images, pseudo_onehot, gates, hook):
    """(1/B) sum_i gate_i * H(pseudo_i, p_i) with perturbation at ``hook``."""
    b = images.shape[0]
    mask = None
    if hook is not None and hook[2] is not None:
        mask = hook[2]
    hook_arg = None if hook is None else (hook[0], hook[1])
    logits = nets.forward(state.model, Tensor(images), hook=hook_arg, sample_mask=mask)
    probs = T.softmax(logits)
    ce = T.cross_entropy_rows(Tensor(pseudo_onehot), probs)
    gated = T.mul(ce, Tensor(gates))
    return T.scale(T.tsum(gated), 1.0 / b), probs


def _teacher_predictions(state: TrainState, weak_images: np.ndarray) -> np.ndarray:
    """Detached, optionally distribution-aligned weak-view predictions."""
    with T.no_grad():
        logits = nets.forward(state.model, Tensor(weak_images))
        probs = T.softmax(logits).data
    if state.config.distribution_alignment:
        probs = da_refine(probs, state.da)
    return probs


def _sample_feature_draws(state: TrainState, rng):
    """One block and one strategy per iteration, shared by both branches."""
    block = int(rng.integers(state.model.num_blocks()))
    shape = state.model.feature_shape_at(block)
    strong = featperturb.sample_draw(state.feat_pool, shape, "strong", rng)
    conv_index = int(rng.integers(1, 3))
    weak = featperturb.sample_draw({strong.strategy}, shape, "weak", rng)
    hook_a = nets.HookPoint(block, "A")
    hook_b = nets.HookPoint(block, "B", conv_index)
    return hook_a, strong, hook_b, weak


def train_step(state: TrainState) -> BatchOutcome:
    cfg = state.config
    split = state.split
    t = state.step + 1
    started = time.perf_counter()

    shuffle = named_stream(cfg.seed, "shuffle", t)
    img_weak = named_stream(cfg.seed, "img_weak", t)
    img_strong = named_stream(cfg.seed, "img_strong", t)
    feat_rng = named_stream(cfg.seed, "feat", t)

    li = shuffle.integers(0, split.labeled_ids.shape[0], cfg.batch_labeled)
    ui = shuffle.integers(0, split.unlabeled_ids.shape[0], cfg.batch_unlabeled)
    unlabeled_ids = split.unlabeled_ids[ui]

    labeled_weak = _augment_batch(split.labeled_images[li], img_weak, state.policy, imgperturb.weak_aug)
    teacher_weak = _augment_batch(split.unlabeled_images[ui], img_weak, state.policy, imgperturb.weak_aug)
    needs_b1 = cfg.paradigm in ("ifmatch", "separate_branches")
    if cfg.paradigm == "ifmatch":
        branch1_weak = _augment_batch(split.unlabeled_images[ui], img_weak, state.policy, imgperturb.weak_aug)
    elif cfg.paradigm == "separate_branches":
        branch1_weak = teacher_weak  # shares the teacher's exact view
    else:
        branch1_weak = None
    strong_images = _augment_batch(split.unlabeled_images[ui], img_strong, state.policy, imgperturb.strong_aug)

    try:
        teacher_probs = _teacher_predictions(state, teacher_weak)
    except (FloatingPointError, ValueError) as exc:
        if "non-finite" not in str(exc):
            raise
        raise NumericAbort(t, _param_diagnostics(state)) from exc
    conf = teacher_probs.max(axis=1)
    pseudo = teacher_probs.argmax(axis=1)
    pseudo_onehot = _one_hot(pseudo, split.num_classes)

    # branch-2 gate from the configured mechanism (soft weights for "soft")
    if state.thresholds.kind == "soft":
        tau2 = np.full(conf.shape, state.thresholds.mu_t)
        gates2 = soft_weights(conf, state.thresholds)
    else:
        tau2 = threshold_for_batch(state.thresholds, pseudo)
        gates2 = (conf >= tau2).astype(np.float64)
    # branch-1 gate: high constant threshold, or mirror branch 2
    if cfg.branch1_threshold == "mirror":
        gates1 = gates2.copy()
    else:
        gates1 = (conf >= cfg.tau).astype(np.float64)

    hook_a = strong_draw = hook_b = weak_draw = None
    if needs_b1 or cfg.paradigm == "toy_combined" or (cfg.paradigm == "ifmatch"):
        hook_a, strong_draw, hook_b, weak_draw = _sample_feature_draws(state, feat_rng)

    # identification mask for this step (decided by the previous visit)
    if cfg.paradigm == "ifmatch" and cfg.cbi:
        if cfg.identification == "saa":
            losses = cbi.recorded_losses(state.ledger, unlabeled_ids)
            saa_t = cbi.otsu_threshold(cbi.recorded_losses(state.ledger, split.unlabeled_ids))
            if np.isfinite(saa_t):
                masks = (losses < saa_t).astype(np.int64)
            else:
                masks = np.zeros(cfg.batch_unlabeled, dtype=np.int64)
        else:
            masks = np.array([state.ledger.stored_mask(int(sid)) for sid in unlabeled_ids])
    elif cfg.paradigm == "ifmatch":
        masks = np.ones(cfg.batch_unlabeled, dtype=np.int64)  # no identification: perturb all
    else:
        masks = np.array([state.ledger.stored_mask(int(sid)) for sid in unlabeled_ids])

    try:
        loss_s = supervised_loss(state, labeled_weak, split.labeled_classes[li])

        zero = Tensor(np.zeros(()))
        loss_u1 = zero
        util_b1 = 0.0
        if needs_b1:
            loss_u1, _ = _gated_branch_loss(state, branch1_weak, pseudo_onehot, gates1,
                                            (hook_a, strong_draw, None))
            util_b1 = float(gates1.mean())

        branch2_probs = None
        loss_u2 = zero
        util_b2 = 0.0
        if cfg.paradigm == "fixmatch_baseline" or cfg.paradigm == "separate_branches":
            loss_u2, branch2_probs = _gated_branch_loss(state, strong_images, pseudo_onehot, gates2, None)
        elif cfg.paradigm == "toy_combined":
            loss_u2, branch2_probs = _gated_branch_loss(state, strong_images, pseudo_onehot, gates2,
                                                        (hook_a, strong_draw, None))
        else:  # ifmatch
            feature_rows = masks.astype(bool)
            loss_u2, branch2_probs = _gated_branch_loss(state, strong_images, pseudo_onehot, gates2,
                                                        (hook_b, weak_draw, feature_rows))
        util_b2 = float(gates2.mean())

        total = T.add(loss_s, T.scale(T.add(loss_u1, loss_u2), cfg.lambda_u))
        total_value = total.item()
    except (FloatingPointError, ValueError) as exc:
        if "non-finite" not in str(exc):
            raise
        raise NumericAbort(t, _param_diagnostics(state)) from exc
    if not np.isfinite(total_value):
        raise NumericAbort(t, _diagnostics(state, loss_s, loss_u1, loss_u2))

    T.zero_grads(state.model.parameters())
    T.backward(total)
    lr = lr_at(state.schedule, t)
    state.optimizer.step(state.model.param_items(), lr)
    state.ema.update(state.model.param_items())

    update_threshold_state(state.thresholds, teacher_probs)

    # record target confidences from the forward already computed this step
    p2 = branch2_probs.data
    for i, sid in enumerate(unlabeled_ids):
        sid = int(sid)
        cbi.record(state.ledger, sid, p2[i], int(pseudo[i]))
        cbi.mask(state.ledger, sid, float(tau2[i]))
        if cfg.identification == "saa":
            state.ledger.entry(sid).loss = float(
                -np.log(max(p2[i][int(pseudo[i])], T.LOG_EPS))
            )

    pass2 = conf >= tau2
    state.step = t
    return BatchOutcome(
        loss_s=float(loss_s.item()),
        loss_u1=float(loss_u1.item()),
        loss_u2=float(loss_u2.item()),
        util_b1=util_b1,
        util_b2=util_b2,
        cbi_mask_rate=float(masks.mean()),
        naive_ratio=cbi.naive_ratio(pass2, masks),
        wall_ms=(time.perf_counter() - started) * 1000.0,
    )


def _param_diagnostics(state) -> dict:
    return {f"norm.{name}": float(np.abs(p.data).max())
            for name, p in state.model.param_items()}


def _diagnostics(state, loss_s, loss_u1, loss_u2) -> dict:
    diag = {
        "loss_s": float(loss_s.item()),
        "loss_u1": float(loss_u1.item()),
        "loss_u2": float(loss_u2.item()),
    }
    diag.update(_param_diagnostics(state))
    return diag


def evaluate(model: nets.Model, images: np.ndarray, classes: np.ndarray,
             params=None, batch: int = 64, num_classes: Optional[int] = None):
    """Top-1 accuracy plus a per-class breakdown (absent classes -> None)."""
    n = images.shape[0]
    if n == 0:
        raise ValueError("empty evaluation set")
    predicted = np.empty(n, dtype=np.int64)
    for start in range(0, n, batch):
        chunk = images[start : start + batch]
        logits = nets.forward_array(model, chunk, params=params)
        predicted[start : start + chunk.shape[0]] = logits.argmax(axis=1)
    accuracy = float((predicted == classes).mean())
    if num_classes is None:
        num_classes = model.spec.num_classes
    per_class = {}
    for c in range(num_classes):
        sel = classes == c
        per_class[c] = float((predicted[sel] == c).mean()) if sel.any() else None
    return accuracy, per_class


def train(config: TrainConfig, split: DatasetSplit, model_spec: nets.ModelSpec,
          policy: Optional[imgperturb.ImageAugPolicy] = None,
          feat_pool=featperturb.STRATEGIES,
          log=None) -> Tuple[ExperimentRecord, TrainState]:
    """Run ``config.steps`` iterations with periodic EMA evaluation."""
    state = init_state(config, split, model_spec, policy, feat_pool)
    cadence = config.eval_every if config.eval_every > 0 else max(config.steps // 100, 50)
    record = ExperimentRecord(config=_config_snapshot(config, model_spec))
    wall_start = time.perf_counter()

    def eval_row(step, interval: BatchOutcome, wall_ms: float):
        acc, _ = evaluate(state.model, split.test_images, split.test_classes,
                          batch=config.eval_batch)
        ema_acc, _ = evaluate(state.model, split.test_images, split.test_classes,
                              params=state.ema.as_tensors(), batch=config.eval_batch)
        record.append({
            "step": step,
            "lr": lr_at(state.schedule, step),
            "loss_s": interval.loss_s,
            "loss_u1": interval.loss_u1,
            "loss_u2": interval.loss_u2,
            "util_b1": interval.util_b1,
            "util_b2": interval.util_b2,
            "cbi_mask_rate": interval.cbi_mask_rate,
            "naive_ratio": interval.naive_ratio,
            "acc": acc,
            "ema_acc": ema_acc,
            "wall_ms": wall_ms if config.measure_time else 0.0,
        })
        if log is not None:
            log(f"step {step}: acc={acc:.4f} ema_acc={ema_acc:.4f} "
                f"loss_s={interval.loss_s:.4f} naive_ratio={interval.naive_ratio:.3f}")
        if log is not None and config.identification == "saa" and state.ledger.entries:
            losses = cbi.recorded_losses(state.ledger, split.unlabeled_ids)
            lt = cbi.otsu_threshold(losses)
            if np.isfinite(lt):
                log(f"  saa loss threshold L={lt:.4g} -> confidence exp(-L)={cbi.loss_to_confidence(lt):.4g}")

    eval_row(0, BatchOutcome(), 0.0)
    window = []
    for _ in range(config.steps):
        outcome = train_step(state)
        window.append(outcome)
        if state.step % cadence == 0 or state.step == config.steps:
            interval = _mean_outcome(window)
            eval_row(state.step, interval, interval.wall_ms)
            window = []

    final = record.rows[-1]
    record.summary = {
        "final_ema_acc": final["ema_acc"],
        "best_ema_acc": max(r["ema_acc"] for r in record.rows),
        "mean_naive_ratio": float(np.mean([r["naive_ratio"] for r in record.rows[1:]]))
        if len(record.rows) > 1 else 0.0,
        "wall_seconds": time.perf_counter() - wall_start,
    }
    return record, state


def _mean_outcome(window) -> BatchOutcome:
    if not window:
        return BatchOutcome()
    fields = ("loss_s", "loss_u1", "loss_u2", "util_b1", "util_b2",
              "cbi_mask_rate", "naive_ratio", "wall_ms")
    values = {f: float(np.mean([getattr(o, f) for o in window])) for f in fields}
    return BatchOutcome(**values)


def _config_snapshot(config: TrainConfig, spec: nets.ModelSpec) -> dict:
    snap = {f"trainer.{k}": v for k, v in vars(config).items()}
    snap.update({
        "model.widths": spec.stage_widths,
        "model.blocks_per_stage": spec.blocks_per_stage,
        "model.kind": spec.kind,
        "model.num_classes": spec.num_classes,
        "model.input_shape": spec.input_shape,
    })
    return snap


def checkpoint_entries(state: TrainState) -> dict:
    """Everything needed to restore inference: model, EMA, scheduler, ledger."""
    entries = {}
    for name, p in state.model.param_items():
        entries[f"model.{name}"] = p.data
    for name, arr in state.ema.shadow.items():
        entries[f"ema.{name}"] = arr
    entries["state.step"] = np.array(float(state.step))
    entries["thresh.sigma"] = state.thresholds.sigma
    entries["thresh.mu_t"] = np.array(state.thresholds.mu_t)
    entries["thresh.var_t"] = np.array(state.thresholds.var_t)
    entries["thresh.profile"] = state.thresholds.profile
    entries["da.p_bar"] = state.da.p_bar
    entries["da.target"] = state.da.target
    rows = state.ledger.dump_rows()
    if rows:
        entries["ledger.ids"] = np.array([r[0] for r in rows], dtype=np.float64)
        entries["ledger.h"] = np.array([r[1] for r in rows])
        entries["ledger.m"] = np.array([float(r[2]) for r in rows])
    return entries
