"""Central finite-difference checks for every composite block.

Each registered block builds a small random instance from a seed and
returns the tensors to check plus a closure producing its outputs. The loss
is a fixed random projection of all outputs, so every output element
contributes. Per checked tensor a sample of coordinates is perturbed and
the relative error ``||analytic - numeric|| / max(||analytic||, ||numeric||, floor)``
is recorded; a block's score is the maximum over tensors and seeds.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import ops
from .blocks import (Combiner, GatedFusionUnit, GateNet, ResidualFusionBlock, ResidualUnit,
                     TriStreamState, residual_unit)
from .networks import Head
from .tensor import Param, Tensor, backward, default_dtype

STEP = 1e-5
TOLERANCE = 1e-4
# gradients smaller than this are compared absolutely (FD roundoff is ~1e-10)
FLOOR = 1e-5
COORDS_PER_TENSOR = 8


@dataclass
class Case:
    tensors: dict[str, Tensor]
    run: Callable[[], list[Tensor]]
    shape: str


@dataclass
class BlockReport:
    block: str
    max_rel_error: float = 0.0
    worst_seed: int | None = None
    worst_tensor: str = ""
    worst_shape: str = ""
    seeds: list[int] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= TOLERANCE

    def as_dict(self) -> dict:
        return {"block": self.block, "max_rel_error": self.max_rel_error, "passed": self.passed,
                "worst_seed": self.worst_seed, "worst_tensor": self.worst_tensor,
                "worst_shape": self.worst_shape, "seeds": len(self.seeds)}


def _randomize(module, rng: np.random.Generator, scale: float = 0.5) -> None:
    for p in module.parameters():
        p.data = rng.normal(0.0, scale, size=p.data.shape)


def _inputs(rng, **shapes) -> dict[str, Tensor]:
    return {k: Tensor(rng.normal(size=s), requires_grad=True) for k, s in shapes.items()}


def _small_dims(rng):
    n = int(rng.integers(1, 3))
    c = int(rng.choice([2, 4]))
    h = int(rng.choice([2, 4]))
    w = int(rng.choice([2, 4]))
    return n, c, h, w


def _params(module) -> dict[str, Tensor]:
    return dict(module.named_parameters())


def ru_case(rng, inject: str) -> Case:
    n, c, h, w = _small_dims(rng)
    ru = ResidualUnit(c, rng)
    _randomize(ru, rng)
    x = _inputs(rng, x=(n, c, 2 * h, 2 * w), comp=(n, c, 2 * h, 2 * w))
    if inject == "none":
        x.pop("comp")
    tensors = {**x, **_params(ru)}
    return Case(tensors, lambda: [residual_unit(x["x"], x.get("comp"), ru, inject)],
                f"N={n} C={c} H={2 * h} W={2 * w}")


def gate_case(rng) -> Case:
    n, c, h, w = _small_dims(rng)
    g = GateNet(c, max(1, c // 2), rng)
    _randomize(g, rng)
    x = _inputs(rng, x=(n, c, h, w))
    return Case({**x, **_params(g)}, lambda: [g(x["x"])], f"N={n} C={c} H={h} W={w}")


def _tri_inputs(rng, n, c, h, w):
    return _inputs(rng, x_r=(n, c, 2 * h, 2 * w), x_d=(n, c, h, w), x_rd=(n, c // 2, h, w))


def gfu_case(rng) -> Case:
    n, c, h, w = _small_dims(rng)
    unit = GatedFusionUnit(c, rng)
    _randomize(unit, rng)
    x = _tri_inputs(rng, n, c, h, w)

    def run():
        out = unit(TriStreamState(x["x_r"], x["x_d"], x["x_rd"]))
        return [out.x_r_com, out.x_rd_next, out.x_d_com]

    return Case({**x, **_params(unit)}, run, f"N={n} C={c} H/2={h} W/2={w}")


def rfb_case(rng, inject: str, form: str = "nonbottleneck") -> Case:
    n, c, h, w = _small_dims(rng)
    if form == "bottleneck":
        c = 8
    block = ResidualFusionBlock(c, rng, inject=inject, ru_form=form)
    _randomize(block, rng)
    fused = c // 4 if form == "bottleneck" else c
    x = _inputs(rng, x_r=(n, c, 2 * h, 2 * w), x_d=(n, c, h, w), x_rd=(n, fused // 2, h, w))

    def run():
        s = block(TriStreamState(x["x_r"], x["x_d"], x["x_rd"]))
        return [s.x_r, s.x_d, s.x_rd]

    return Case({**x, **_params(block)}, run, f"N={n} C={c} H/2={h} W/2={w} form={form}")


def combiner_case(rng) -> Case:
    n, c, h, w = _small_dims(rng)
    comb = Combiner("ssma", [c, c, c // 2], rng, out_channels=c)
    _randomize(comb, rng)
    x = _inputs(rng, x_r=(n, c, h, w), x_d=(n, c, h, w), x_rd=(n, c // 2, h, w))
    return Case({**x, **_params(comb)}, lambda: [comb([x["x_r"], x["x_d"], x["x_rd"]])],
                f"N={n} C={c} H={h} W={w}")


def head_case(rng) -> Case:
    n, c, h, w = _small_dims(rng)
    k = int(rng.integers(2, 5))
    head = Head(c, k, rng)
    _randomize(head, rng)
    x = _inputs(rng, x=(n, c, h, w))
    return Case({**x, **_params(head)}, lambda: [head(x["x"], 8 * h, 8 * w)],
                f"N={n} C={c} H={h} W={w} K={k}")


REGISTRY: dict[str, Callable[[np.random.Generator], Case]] = {
    "ru_R": lambda rng: ru_case(rng, "R"),
    "ru_T": lambda rng: ru_case(rng, "T"),
    "ru_none": lambda rng: ru_case(rng, "none"),
    "gate_network": gate_case,
    "gfu": gfu_case,
    "rfb_R": lambda rng: rfb_case(rng, "R"),
    "rfb_T": lambda rng: rfb_case(rng, "T"),
    "bottleneck_attach": lambda rng: rfb_case(rng, "R", "bottleneck"),
    "ssma_combiner": combiner_case,
    "decoder_head": head_case,
}


def check_case(case: Case, rng: np.random.Generator) -> tuple[float, str]:
    """Return (max relative error, name of the worst tensor)."""
    outs = case.run()
    projections = [rng.normal(size=o.shape) for o in outs]

    def loss_value() -> float:
        return float(sum((o.data * p).sum() for o, p in zip(case.run(), projections)))

    for t in case.tensors.values():
        t.grad = None
    loss = None
    for o, p in zip(outs, projections):
        term = (o * p).sum()
        loss = term if loss is None else loss + term
    backward(loss)

    worst, worst_name = 0.0, ""
    for name, t in case.tensors.items():
        analytic_full = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        k = min(COORDS_PER_TENSOR, flat.size)
        idx = rng.choice(flat.size, size=k, replace=False)
        numeric = np.empty(k)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + STEP
            up = loss_value()
            flat[i] = orig - STEP
            down = loss_value()
            flat[i] = orig
            numeric[j] = (up - down) / (2 * STEP)
        analytic = analytic_full.reshape(-1)[idx]
        denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), FLOOR)
        err = float(np.linalg.norm(analytic - numeric) / denom)
        if err > worst:
            worst, worst_name = err, name
    return worst, worst_name


def check_block(name: str, builder: Callable, seeds) -> BlockReport:
    report = BlockReport(name)
    with default_dtype(np.float64):
        for seed in seeds:
            rng = np.random.default_rng(seed)
            case = builder(rng)
            err, tensor_name = check_case(case, rng)
            report.seeds.append(seed)
            if err > report.max_rel_error or report.worst_seed is None:
                report.max_rel_error = max(err, report.max_rel_error)
                report.worst_seed, report.worst_tensor, report.worst_shape = seed, tensor_name, case.shape
    return report


def run_gradcheck(seeds=range(20), registry: dict | None = None) -> list[BlockReport]:
    registry = REGISTRY if registry is None else registry
    return [check_block(name, builder, list(seeds)) for name, builder in registry.items()]


def format_report(reports: list[BlockReport]) -> str:
    lines = [f"{'block':<20} {'max_rel_err':>12}  status  worst"]
    for r in reports:
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"{r.block:<20} {r.max_rel_error:12.3e}  {status:6}  "
                     f"seed={r.worst_seed} tensor={r.worst_tensor} {r.worst_shape}")
    return "\n".join(lines)


# exposed for fault-injection tests
def _broken_relu(x: Tensor) -> Tensor:
    """relu whose backward is off by a factor of two."""
    from .tensor import make_result
    mask = x.data > 0
    return make_result(x.data * mask, (x,), lambda g: (2.0 * g * mask,), "broken_relu")


def broken_block_case(rng) -> Case:
    n, c, h, w = _small_dims(rng)
    conv = Param(rng.normal(size=(c, c, 3, 3)))
    x = _inputs(rng, x=(n, c, h, w))
    return Case({"x": x["x"], "weight": conv},
                lambda: [_broken_relu(ops.conv2d(x["x"], conv, None, 1, 1))], f"N={n} C={c}")
