"""Small pre-activation residual networks with perturbation hook points.

The backbone is a reduced-width wide-residual design: a stem convolution,
stages of pre-activation residual blocks (norm-relu-conv, norm-relu-conv,
plus identity or 1x1 projection), a final norm-relu, global average
pooling, and a linear head.

Every residual block exposes three hook points for feature perturbation:
position ``A`` is the block's output summation, position ``B`` is the
output of one of the two convolutions inside the residual component.  A
perturbation installed at a hook applies only to the samples selected by
an optional boolean mask and is fully differentiable (its randomness
lives in a frozen draw).

Normalization uses per-sample spatial statistics computed on the fly
(epsilon 1e-5, no learned running averages), so one sample's logits never
depend on the rest of the batch; planes with fewer than two elements pass
through unchanged.
"""

from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

from . import featperturb
from . import tensor as T
from .streams import named_stream
from .tensor import Tensor


@dataclass(frozen=True)
class ModelSpec:
    stage_widths: Tuple[int, ...]
    blocks_per_stage: int
    num_classes: int
    input_shape: Tuple[int, int, int]  # (C_in, H, W)
    kind: str = "residual_cnn"

    def validate(self):
        if self.num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.num_classes}")
        if self.kind not in ("residual_cnn", "mlp"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.kind == "residual_cnn":
            if not self.stage_widths or self.blocks_per_stage < 1:
                raise ValueError("residual_cnn requires at least one residual block")
        if len(self.input_shape) != 3:
            raise ValueError(f"input_shape must be (C, H, W), got {self.input_shape}")


@dataclass(frozen=True)
class HookPoint:
    """Where a feature perturbation is injected.

    ``position`` "A" perturbs the block's output summation; "B" perturbs
    the output of convolution 1 or 2 inside the residual component
    (``conv_index`` is meaningful only for "B").
    """

    block_index: int
    position: str  # "A" or "B"
    conv_index: int = 0


@dataclass
class _BlockCfg:
    index: int
    in_width: int
    out_width: int
    stride: int
    needs_projection: bool


@dataclass
class Model:
    spec: ModelSpec
    params: dict = field(default_factory=dict)
    blocks: List[_BlockCfg] = field(default_factory=list)

    def parameters(self):
        return list(self.params.values())

    def param_items(self):
        return list(self.params.items())

    def num_blocks(self) -> int:
        return len(self.blocks)

    def hook_points(self) -> List[HookPoint]:
        hooks = []
        for b in self.blocks:
            hooks.append(HookPoint(b.index, "A"))
            hooks.append(HookPoint(b.index, "B", 1))
            hooks.append(HookPoint(b.index, "B", 2))
        if self.spec.kind == "mlp":
            hooks = [HookPoint(i, "A") for i in range(len(self.spec.stage_widths))]
        return hooks

    def feature_shape_at(self, block_index: int) -> Tuple[int, int, int]:
        """(C, H, W) of the feature maps at a block's hooks."""
        if self.spec.kind == "mlp":
            return (self.spec.stage_widths[block_index], 1, 1)
        _, h, w = self.spec.input_shape
        for b in self.blocks[: block_index + 1]:
            if b.stride == 2:
                h = (h + 1) // 2
                w = (w + 1) // 2
        return (self.blocks[block_index].out_width, h, w)


def _he(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def build(spec: ModelSpec, seed: int) -> Model:
    """Deterministically initialized model (He fan-in scaling)."""
    spec.validate()
    rng = named_stream(seed, "init")
    model = Model(spec=spec)
    p = model.params
    c_in = spec.input_shape[0]

    if spec.kind == "mlp":
        feat = int(np.prod(spec.input_shape))
        prev = feat
        for li, width in enumerate(spec.stage_widths):
            p[f"fc{li}.w"] = Tensor(_he(rng, (prev, width), prev), requires_grad=True)
            p[f"fc{li}.b"] = Tensor(np.zeros(width), requires_grad=True)
            prev = width
        p["head.w"] = Tensor(_he(rng, (prev, spec.num_classes), prev), requires_grad=True)
        p["head.b"] = Tensor(np.zeros(spec.num_classes), requires_grad=True)
        return model

    w0 = spec.stage_widths[0]
    p["stem.w"] = Tensor(_he(rng, (w0, c_in, 3, 3), c_in * 9), requires_grad=True)
    prev = w0
    idx = 0
    for si, width in enumerate(spec.stage_widths):
        for bi in range(spec.blocks_per_stage):
            stride = 2 if (si > 0 and bi == 0) else 1
            needs_proj = (prev != width) or (stride != 1)
            cfg = _BlockCfg(idx, prev, width, stride, needs_proj)
            model.blocks.append(cfg)
            pre = f"block{idx}"
            p[f"{pre}.norm1.gamma"] = Tensor(np.ones(prev), requires_grad=True)
            p[f"{pre}.norm1.beta"] = Tensor(np.zeros(prev), requires_grad=True)
            p[f"{pre}.conv1.w"] = Tensor(_he(rng, (width, prev, 3, 3), prev * 9), requires_grad=True)
            p[f"{pre}.norm2.gamma"] = Tensor(np.ones(width), requires_grad=True)
            p[f"{pre}.norm2.beta"] = Tensor(np.zeros(width), requires_grad=True)
            p[f"{pre}.conv2.w"] = Tensor(_he(rng, (width, width, 3, 3), width * 9), requires_grad=True)
            if needs_proj:
                p[f"{pre}.proj.w"] = Tensor(_he(rng, (width, prev, 1, 1), prev), requires_grad=True)
            prev = width
            idx += 1
    p["final.gamma"] = Tensor(np.ones(prev), requires_grad=True)
    p["final.beta"] = Tensor(np.zeros(prev), requires_grad=True)
    p["head.w"] = Tensor(_he(rng, (prev, spec.num_classes), prev), requires_grad=True)
    p["head.b"] = Tensor(np.zeros(spec.num_classes), requires_grad=True)
    return model


def _maybe_perturb(feat: Tensor, hook, here: HookPoint, sample_mask) -> Tensor:
    """Apply the hook's perturbation at this point, honoring the mask."""
    if hook is None:
        return feat
    point, draw = hook
    if point.block_index != here.block_index or point.position != here.position:
        return feat
    if point.position == "B" and point.conv_index != here.conv_index:
        return feat
    if sample_mask is not None and not sample_mask.any():
        return feat
    perturbed = featperturb.apply(feat, draw)
    if sample_mask is None or sample_mask.all():
        return perturbed
    m = Tensor(sample_mask.astype(np.float64)[:, None, None, None])
    keep = Tensor((~sample_mask).astype(np.float64)[:, None, None, None])
    return T.add(T.mul(perturbed, m), T.mul(feat, keep))


def forward(model: Model, x: Tensor, hook=None, sample_mask=None, params=None) -> Tensor:
    """Logits for a batch; optionally perturb features at one hook point.

    ``hook`` is a (HookPoint, PerturbDraw) pair; ``sample_mask`` selects
    which rows of the batch receive the perturbation (all rows when
    absent).  ``params`` overrides the model's own parameters (used to
    evaluate the EMA shadow copy).
    """
    p = model.params if params is None else params
    n = x.data.shape[0]
    if sample_mask is not None:
        sample_mask = np.asarray(sample_mask, dtype=bool)
        if sample_mask.shape != (n,):
            raise ValueError(f"sample_mask length {sample_mask.shape} != batch {n}")
    if hook is not None:
        point = hook[0]
        total = len(model.blocks) if model.spec.kind == "residual_cnn" else len(model.spec.stage_widths)
        if point.block_index >= total:
            raise ValueError(f"hook block {point.block_index} out of range ({total} blocks)")

    if model.spec.kind == "mlp":
        return _forward_mlp(model, x, hook, sample_mask, p)

    if x.data.ndim != 4 or tuple(x.data.shape[1:]) != tuple(model.spec.input_shape):
        raise ValueError(
            f"input shape {x.shape} does not match spec {model.spec.input_shape}"
        )
    h = T.conv2d(x, p["stem.w"], stride=1, pad=1)
    for b in model.blocks:
        pre = f"block{b.index}"
        act = T.relu(T.channel_affine(T.instance_normalize(h), p[f"{pre}.norm1.gamma"], p[f"{pre}.norm1.beta"]))
        if b.needs_projection:
            identity = T.conv2d(act, p[f"{pre}.proj.w"], stride=b.stride, pad=0)
        else:
            identity = h
        c1 = T.conv2d(act, p[f"{pre}.conv1.w"], stride=b.stride, pad=1)
        c1 = _maybe_perturb(c1, hook, HookPoint(b.index, "B", 1), sample_mask)
        act2 = T.relu(T.channel_affine(T.instance_normalize(c1), p[f"{pre}.norm2.gamma"], p[f"{pre}.norm2.beta"]))
        c2 = T.conv2d(act2, p[f"{pre}.conv2.w"], stride=1, pad=1)
        c2 = _maybe_perturb(c2, hook, HookPoint(b.index, "B", 2), sample_mask)
        h = T.add(identity, c2)
        h = _maybe_perturb(h, hook, HookPoint(b.index, "A"), sample_mask)
    h = T.relu(T.channel_affine(T.instance_normalize(h), p["final.gamma"], p["final.beta"]))
    pooled = T.global_avg_pool(h)
    return T.affine(pooled, p["head.w"], p["head.b"])


def _forward_mlp(model: Model, x: Tensor, hook, sample_mask, p) -> Tensor:
    if hook is not None and hook[0].position != "A":
        raise ValueError("mlp models expose position-A hooks only")
    n = x.data.shape[0]
    h = T.reshape(x, (n, int(np.prod(x.data.shape[1:]))))
    for li in range(len(model.spec.stage_widths)):
        h = T.relu(T.affine(h, p[f"fc{li}.w"], p[f"fc{li}.b"]))
        if hook is not None and hook[0].block_index == li:
            width = h.data.shape[1]
            feat = T.reshape(h, (n, width, 1, 1))
            feat = _maybe_perturb(feat, hook, HookPoint(li, "A"), sample_mask)
            h = T.reshape(feat, (n, width))
    return T.affine(h, p["head.w"], p["head.b"])


def forward_array(model: Model, x: np.ndarray, params=None) -> np.ndarray:
    """Plain-inference logits with no graph (teacher and evaluation path)."""
    with T.no_grad():
        return forward(model, Tensor(np.asarray(x, dtype=np.float64)), params=params).data
