"""Training loop, two-stage initialisation, and evaluation."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import checkpoint
from .checkpoint import atomic_write_bytes
from .data.augment import AugmentPolicy
from .data.prepare import PreparedDataset, batch_indices, draw_batch
from .metrics import ConfusionMatrix, MetricError
from .networks import NetworkSpec, SegmentationNet, build_network
from .ops import softmax_cross_entropy
from .optim import Adam
from .tensor import Tensor, backward, default_dtype, no_grad

STAGES = ("unimodal", "multimodal", "finetune")
UNIMODAL_VARIANTS = ("unimodal_rgb", "unimodal_depth")
CHECKPOINT_NAME = "model.ckpt"
LOG_NAME = "metrics.jsonl"
SPEC_NAME = "spec.json"


class PlanError(ValueError):
    pass


class InitError(ValueError):
    """Raised when checkpoints do not fit the network; lists every mismatch."""

    def __init__(self, mismatches: list[str]):
        super().__init__("cannot initialise from checkpoints:\n  " + "\n  ".join(mismatches))
        self.mismatches = mismatches


class NumericError(RuntimeError):
    """Non-finite loss; carries the iteration and the layer with the worst gradients."""

    def __init__(self, iteration: int, layer: str, grad_norms: dict[str, float]):
        super().__init__(f"non-finite loss at iteration {iteration}; suspect layer {layer!r}")
        self.iteration = iteration
        self.layer = layer
        self.grad_norms = grad_norms

    def as_dict(self) -> dict:
        return {"error": "numeric", "iteration": self.iteration, "layer": self.layer,
                "grad_norms": {k: (v if np.isfinite(v) else str(v)) for k, v in self.grad_norms.items()}}


@dataclass
class TrainPlan:
    stage: str = "unimodal"
    init_from: dict[str, str] | None = None
    iterations: int = 300
    batch_size: int = 8
    base_lr: float = 1e-2
    weight_decay: float = 0.0
    seed: int = 0
    augment: dict | None = None

    def validate(self, spec: NetworkSpec | None = None) -> "TrainPlan":
        if self.stage not in STAGES:
            raise PlanError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.iterations < 0 or self.batch_size < 1:
            raise PlanError("iterations must be >= 0 and batch_size >= 1")
        if self.base_lr < 0 or self.weight_decay < 0:
            raise PlanError("base_lr and weight_decay must be non-negative")
        init = self.init_from or {}
        if self.stage == "multimodal" and self.init_from is not None and not {"rgb", "depth"} <= set(init):
            raise PlanError("multimodal init_from must name both 'rgb' and 'depth' checkpoints")
        if self.stage == "finetune" and "model" not in init:
            raise PlanError("finetune needs init_from['model']")
        if self.augment is not None:
            self.policy()
        if spec is not None:
            is_uni = spec.variant in UNIMODAL_VARIANTS
            if self.stage == "unimodal" and not is_uni:
                raise PlanError(f"unimodal stage needs a unimodal variant, got {spec.variant!r}")
            if self.stage == "multimodal" and is_uni:
                raise PlanError(f"multimodal stage needs a two-modality variant, got {spec.variant!r}")
        return self

    def policy(self) -> AugmentPolicy | None:
        if self.augment is None:
            return None
        known = {f.name for f in fields(AugmentPolicy)}
        unknown = set(self.augment) - known
        if unknown:
            raise PlanError(f"unknown augmentation keys: {sorted(unknown)}")
        d = dict(self.augment)
        for key in ("scale_range", "crop_size"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return AugmentPolicy(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainPlan":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise PlanError(f"unknown train keys: {sorted(unknown)}")
        return cls(**d).validate()


@dataclass
class TrainResult:
    net: SegmentationNet
    log: list[dict] = field(default_factory=list)
    final: dict = field(default_factory=dict)


def _as_state(ckpt) -> dict[str, np.ndarray]:
    return ckpt if isinstance(ckpt, dict) else checkpoint.load(ckpt)


def init_multimodal_from_unimodal(spec: NetworkSpec, rgb_ckpt, depth_ckpt, seed: int = 0) -> SegmentationNet:
    """Fresh network whose two encoders are copied from unimodal checkpoints.

    Everything outside the encoders keeps its fresh initialisation, in
    particular the zero-initialised gate outputs.
    """
    net = build_network(spec, seed)
    encoders = net.encoders()
    if not {"rgb_encoder", "depth_encoder"} <= set(encoders):
        raise InitError([f"variant {spec.variant!r} has no separate rgb/depth encoders"])
    params = dict(net.named_parameters())
    buffers = dict(net.named_buffers())
    mismatches, updates = [], {}
    for prefix, ckpt in (("rgb_encoder.", rgb_ckpt), ("depth_encoder.", depth_ckpt)):
        src = _as_state(ckpt)
        wanted = {k: v for k, v in {**params, **buffers}.items() if k.startswith(prefix)}
        for name, target in wanted.items():
            shape = target.data.shape if isinstance(target, Tensor) else target.shape
            if name not in src:
                mismatches.append(f"{name}: missing from {prefix[:-1]} checkpoint")
            elif src[name].shape != shape:
                mismatches.append(f"{name}: expected {shape}, checkpoint has {src[name].shape}")
            else:
                updates[name] = src[name]
        extra = sorted(k for k in src if k.startswith(prefix) and k not in wanted)
        mismatches.extend(f"{k}: not present in the network" for k in extra)
    if mismatches:
        raise InitError(mismatches)
    state = net.state_dict()
    state.update(updates)
    net.load_state_dict(state)
    return net


def _grad_norms(net: SegmentationNet) -> dict[str, float]:
    out = {}
    for name, p in net.named_parameters():
        g = p.grad
        out[name] = float(np.sqrt(np.sum(np.square(g)))) if g is not None else 0.0
    return out


def _suspect(net: SegmentationNet, norms: dict[str, float]) -> str:
    """A parameter holding non-finite values, else the non-finite gradient
    closest to the loss (where the backward pass first broke), else the
    largest gradient."""
    params = dict(net.named_parameters())
    for name, p in params.items():
        if not np.all(np.isfinite(p.data)):
            return name
    bad = [name for name, v in norms.items() if not np.isfinite(v)]
    if bad:
        return bad[-1]
    return max(norms, key=norms.get) if norms else ""


def predict(net: SegmentationNet, ds: PreparedDataset, batch_size: int = 8, dtype=np.float64) -> np.ndarray:
    net.eval()
    preds = []
    with no_grad(), default_dtype(dtype):
        for start in range(0, len(ds), batch_size):
            idx = range(start, min(start + batch_size, len(ds)))
            x_rgb, x_d, _ = draw_batch(ds, idx, net.spec.shrink_depth, dtype=dtype)
            logits = net(Tensor(x_rgb), Tensor(x_d))
            preds.append(np.argmax(logits.data, axis=1).astype(np.uint8))
    return np.concatenate(preds)


def evaluate(net: SegmentationNet, ds: PreparedDataset, batch_size: int = 8, dtype=np.float64) -> dict:
    """Per-class IoU, mIoU, pixel accuracy and the confusion matrix."""
    if len(ds) == 0:
        raise MetricError("cannot evaluate on an empty dataset")
    cm = ConfusionMatrix(net.spec.num_classes)
    cm.update(predict(net, ds, batch_size, dtype), ds.label)
    return cm.summary()


def train(plan: TrainPlan, spec: NetworkSpec, ds: PreparedDataset, out_dir=None,
          dtype=np.float64, net: SegmentationNet | None = None) -> TrainResult:
    """Run the loop; optionally write checkpoint, spec and JSONL log to ``out_dir``."""
    plan.validate(spec)
    if len(ds) == 0:
        raise PlanError("training set is empty")
    with default_dtype(dtype):
        if net is None:
            net = _initial_network(plan, spec)
        policy = plan.policy()
        params = net.parameters()
        opt = Adam(params, plan.base_lr, plan.iterations, plan.weight_decay) if plan.iterations else None
        log: list[dict] = []
        net.train()
        try:
            for it in range(plan.iterations):
                idx = batch_indices(len(ds), plan.batch_size, plan.seed, it)
                x_rgb, x_d, y = draw_batch(ds, idx, spec.shrink_depth, policy, plan.seed, it, dtype)
                opt.zero_grad()
                with np.errstate(all="ignore"):
                    logits = net(Tensor(x_rgb), Tensor(x_d))
                    loss = softmax_cross_entropy(logits, y)
                    backward(loss)
                value = float(loss.data)
                if not np.isfinite(value):
                    norms = _grad_norms(net)
                    raise NumericError(it, _suspect(net, norms), norms)
                lr = opt.step()
                log.append({"iteration": it, "loss": value, "lr": lr})
        except NumericError as err:
            if out_dir is not None:
                _write_log(out_dir, log + [err.as_dict()])
            raise
        final = evaluate(net, ds, dtype=dtype)
    result = TrainResult(net, log, final)
    if out_dir is not None:
        save_run(out_dir, result, spec, plan)
    return result


def _initial_network(plan: TrainPlan, spec: NetworkSpec) -> SegmentationNet:
    init = plan.init_from or {}
    if plan.stage == "multimodal" and init:
        return init_multimodal_from_unimodal(spec, init["rgb"], init["depth"], plan.seed)
    net = build_network(spec, plan.seed)
    if plan.stage == "finetune":
        net.load_state_dict(_as_state(init["model"]))
    return net


def _write_log(out_dir, records: list[dict]) -> None:
    os.makedirs(out_dir, exist_ok=True)
    text = "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
    atomic_write_bytes(Path(out_dir) / LOG_NAME, text.encode())


def save_run(out_dir, result: TrainResult, spec: NetworkSpec, plan: TrainPlan) -> None:
    out = Path(out_dir)
    os.makedirs(out, exist_ok=True)
    checkpoint.save(out / CHECKPOINT_NAME, result.net.state_dict())
    atomic_write_bytes(out / SPEC_NAME, (json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n").encode())
    final = {"event": "final", "train_miou": result.final["miou"],
             "train_pixel_accuracy": result.final["pixel_accuracy"], "iterations": plan.iterations}
    _write_log(out, result.log + [final])


def ema(values, span: int = 50) -> np.ndarray:
    """Exponential moving average with smoothing 2 / (span + 1)."""
    alpha = 2.0 / (span + 1.0)
    out = np.empty(len(values))
    acc = None
    for i, v in enumerate(values):
        acc = v if acc is None else alpha * v + (1 - alpha) * acc
        out[i] = acc
    return out
