"""Residual units, the gated fusion unit, the residual fusion block, and combiners.

Stream layout at one fusion level (``s`` is the RGB/depth resolution ratio,
2 when the depth input is shrunk)::

    x_r   N x C    x sH x sW     RGB stream
    x_d   N x C    x H  x W      depth stream
    x_rd  N x C/2  x H  x W      interaction stream
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .nn import BatchNorm2d, Conv2d, DepthwiseSeparableConv2d, Module
from .tensor import Tensor

INJECT_POINTS = ("R", "T", "none")
RU_FORMS = ("nonbottleneck", "bottleneck")
COMBINERS = ("concat", "sum", "ssma")


class StreamContractError(ValueError):
    """A tri-stream state violates the channel or spatial contract."""


@dataclass
class TriStreamState:
    x_r: Tensor
    x_d: Tensor
    x_rd: Tensor

    @property
    def scale(self) -> int:
        return self.x_r.shape[2] // self.x_d.shape[2]

    def validate(self, allowed_scales=(1, 2)) -> "TriStreamState":
        r, d, rd = self.x_r.shape, self.x_d.shape, self.x_rd.shape
        if not (len(r) == len(d) == len(rd) == 4):
            raise StreamContractError("streams must be rank-4 NCHW tensors")
        if not (r[0] == d[0] == rd[0]):
            raise StreamContractError(f"batch extents differ: {r[0]}, {d[0]}, {rd[0]}")
        if r[1] != d[1]:
            raise StreamContractError(f"RGB and depth channels differ: {r[1]} vs {d[1]}")
        if d[1] % 2 or rd[1] != d[1] // 2:
            raise StreamContractError(
                f"interaction channels must be half the depth channels: {rd[1]} vs {d[1]}")
        if rd[2:] != d[2:]:
            raise StreamContractError(f"interaction and depth spatial extents differ: {rd[2:]} vs {d[2:]}")
        if d[2] % 2 or d[3] % 2:
            raise StreamContractError(f"depth/interaction spatial extents must be even, got {d[2:]}")
        scale = r[2] // d[2]
        if scale not in allowed_scales or r[2] != scale * d[2] or r[3] != scale * d[3]:
            raise StreamContractError(
                f"RGB extents {r[2:]} must be {allowed_scales} x depth extents {d[2:]}")
        return self


@dataclass
class GateSet:
    g_r_in: Tensor
    g_d_in: Tensor
    g_r_out: Tensor
    g_d_out: Tensor

    def as_dict(self) -> dict[str, Tensor]:
        return {"g_r_in": self.g_r_in, "g_d_in": self.g_d_in,
                "g_r_out": self.g_r_out, "g_d_out": self.g_d_out}


@dataclass
class GfuOutput:
    x_r_com: Tensor | None
    x_rd_next: Tensor
    x_d_com: Tensor | None
    gates: GateSet


# ---------------------------------------------------------------------------
# residual units
# ---------------------------------------------------------------------------

class ResidualUnit(Module):
    """Full pre-activation residual unit ``x + F(x)``.

    nonbottleneck: F = conv3x3(relu(bn(conv3x3(relu(bn(x))))))
    bottleneck:    F = conv1x1(relu(bn(conv3x3(relu(bn(conv1x1(relu(bn(x)))))))))
    with inner width ``channels // expansion``. The last conv has no bias,
    so zero weights in it make F vanish exactly.
    """

    def __init__(self, channels: int, rng: np.random.Generator, form: str = "nonbottleneck",
                 expansion: int = 4):
        if form not in RU_FORMS:
            raise ValueError(f"unknown residual unit form {form!r}")
        self.form = form
        self.channels = channels
        if form == "nonbottleneck":
            self.inner = channels
            self.bn1 = BatchNorm2d(channels)
            self.conv1 = Conv2d(channels, channels, 3, rng, bias=False)
            self.bn2 = BatchNorm2d(channels)
            self.conv2 = Conv2d(channels, channels, 3, rng, bias=False)
        else:
            if channels % expansion:
                raise ValueError(f"channels {channels} not divisible by expansion {expansion}")
            self.inner = channels // expansion
            self.bn1 = BatchNorm2d(channels)
            self.conv1 = Conv2d(channels, self.inner, 1, rng, bias=False)
            self.bn2 = BatchNorm2d(self.inner)
            self.conv2 = Conv2d(self.inner, self.inner, 3, rng, bias=False)
            self.bn3 = BatchNorm2d(self.inner)
            self.conv3 = Conv2d(self.inner, channels, 1, rng, bias=False)

    def tap(self, x: Tensor) -> Tensor:
        """Output of the first bottleneck 1x1 layer."""
        self._require_bottleneck()
        return self.conv1(ops.relu(self.bn1(x)))

    def finish(self, t: Tensor) -> Tensor:
        """Residual function from the input of the bottleneck 3x3 layer onward."""
        self._require_bottleneck()
        t = self.conv2(ops.relu(self.bn2(t)))
        return self.conv3(ops.relu(self.bn3(t)))

    def residual(self, x: Tensor) -> Tensor:
        if self.form == "bottleneck":
            return self.finish(self.tap(x))
        h = self.conv1(ops.relu(self.bn1(x)))
        return self.conv2(ops.relu(self.bn2(h)))

    def forward(self, x: Tensor, complementary: Tensor | None = None, inject: str = "none") -> Tensor:
        return residual_unit(x, complementary, self, inject)

    def _require_bottleneck(self):
        if self.form != "bottleneck":
            raise ValueError("tap/finish are only defined for bottleneck residual units")

    def describe(self, h: int, w: int):
        convs = [self.conv1, self.conv2] + ([self.conv3] if self.form == "bottleneck" else [])
        return [d for c in convs for d in c.describe(h, w)]


def residual_unit(x: Tensor, complementary: Tensor | None, ru: ResidualUnit, inject: str = "none") -> Tensor:
    """Residual unit with optional complementary-feature injection.

    ``R``: x + F(x + comp)  (comp enters the residual function input)
    ``T``: y = x + comp on the trunk, then y + F(y)
    ``none``: x + F(x)
    """
    if inject not in INJECT_POINTS:
        raise ValueError(f"inject must be one of {INJECT_POINTS}, got {inject!r}")
    if inject == "none":
        if complementary is not None:
            raise ValueError("inject='none' requires no complementary tensor")
        return x + ru.residual(x)
    if complementary is None:
        raise ValueError(f"inject={inject!r} requires a complementary tensor")
    if complementary.shape != x.shape:
        raise ops.ShapeError("residual_unit", "complementary", x.shape, complementary.shape)
    y = x + complementary
    if inject == "R":
        return x + ru.residual(y)
    return y + ru.residual(y)


@dataclass(frozen=True)
class BottleneckWiring:
    """Where a fusion unit taps and injects into a bottleneck residual unit."""

    tap_after: str
    inject_before: str
    tap_channels: int
    inject_channels: int
    trunk_channels: int


def bottleneck_rfb_attach(ru: ResidualUnit) -> BottleneckWiring:
    """The fusion unit reads the first 1x1 output and injects before the 3x3 layer."""
    if ru.form != "bottleneck":
        raise ValueError("bottleneck_rfb_attach needs a bottleneck residual unit")
    return BottleneckWiring(tap_after="conv1", inject_before="conv2",
                            tap_channels=ru.inner, inject_channels=ru.inner,
                            trunk_channels=ru.channels)


# ---------------------------------------------------------------------------
# gates and the gated fusion unit
# ---------------------------------------------------------------------------

class GateNet(Module):
    """conv3x3 -> relu -> conv3x3 (one channel) -> sigmoid."""

    def __init__(self, cin: int, hidden: int, rng: np.random.Generator, zero_last: bool = True):
        self.conv1 = Conv2d(cin, hidden, 3, rng)
        self.conv2 = Conv2d(hidden, 1, 3, rng)
        if zero_last:
            self.conv2.weight.data[...] = 0.0

    def forward(self, x: Tensor) -> Tensor:
        return gate_network(x, self.conv1, self.conv2)


def gate_network(x: Tensor, first: Conv2d, second: Conv2d, hidden: Tensor | None = None) -> Tensor:
    """Single-channel gate map in (0, 1); pass ``hidden`` to reuse a shared first layer."""
    if hidden is None:
        hidden = ops.relu(first(x))
    return ops.sigmoid(second(hidden))


class GatedFusionUnit(Module):
    """Aggregates gated unimodal features into the interaction stream and
    emits gated complementary features for both residual units.

    Parameters: a shared first conv for both input gates with one second conv
    per input gate, a 1x1 merge conv (2C -> C/2), a depthwise separable conv
    on the interaction stream, two independent output gate nets reading the
    updated interaction features, and 1x1 projections C/2 -> C feeding the
    output gates.
    """

    def __init__(self, channels: int, rng: np.random.Generator, use_gates: bool = True,
                 emit_complementary: bool = True, hidden: int | None = None):
        if channels % 2:
            raise ValueError(f"fusion channels must be even, got {channels}")
        c, c2 = channels, channels // 2
        hidden = hidden or max(1, c2)
        self.channels = c
        self.use_gates = use_gates
        self.emit_complementary = emit_complementary
        self.force_output_gates: float | None = None
        self.gate_scales: dict[str, float] = {}
        if use_gates:
            self.shared_in_conv = Conv2d(2 * c + c2, hidden, 3, rng)
            self.in_gate_r = Conv2d(hidden, 1, 3, rng)
            self.in_gate_d = Conv2d(hidden, 1, 3, rng)
            self.in_gate_r.weight.data[...] = 0.0
            self.in_gate_d.weight.data[...] = 0.0
        self.merge_conv = Conv2d(2 * c, c2, 1, rng)
        self.sconv = DepthwiseSeparableConv2d(c2, c2, 3, rng)
        if emit_complementary:
            if use_gates:
                self.out_gate_r = GateNet(c2, hidden, rng)
                self.out_gate_d = GateNet(c2, hidden, rng)
            self.out_proj_r = Conv2d(c2, c, 1, rng)
            self.out_proj_d = Conv2d(c2, c, 1, rng)

    def _ones(self, like: Tensor) -> Tensor:
        n, _, h, w = like.shape
        return Tensor(np.ones((n, 1, h, w), dtype=like.dtype))

    def _scaled(self, name: str, gate: Tensor) -> Tensor:
        s = self.gate_scales.get(name)
        return gate if s is None else gate * s

    def forward(self, state: TriStreamState) -> GfuOutput:
        state.validate()
        x_r, x_d, x_rd = state.x_r, state.x_d, state.x_rd
        h, w = x_d.shape[2:]
        big_h, big_w = x_r.shape[2:]
        xr_low = ops.bilinear_resize(x_r, h, w)

        if self.use_gates:
            hidden = ops.relu(self.shared_in_conv(ops.concat([xr_low, x_d, x_rd])))
            g_r_in = gate_network(None, None, self.in_gate_r, hidden)
            g_d_in = gate_network(None, None, self.in_gate_d, hidden)
        else:
            g_r_in = g_d_in = self._ones(x_d)
        g_r_in = self._scaled("g_r_in", g_r_in)
        g_d_in = self._scaled("g_d_in", g_d_in)

        merged = self.merge_conv(ops.concat([g_r_in * xr_low, g_d_in * x_d]))
        x_rd_next = self.sconv(merged + x_rd)

        if not self.emit_complementary:
            one = self._ones(x_d)
            return GfuOutput(None, x_rd_next, None, GateSet(g_r_in, g_d_in, one, one))

        if self.force_output_gates is not None:
            n = x_d.shape[0]
            forced = Tensor(np.full((n, 1, h, w), self.force_output_gates, dtype=x_d.dtype))
            g_r_out = g_d_out = forced
        elif self.use_gates:
            g_r_out = self.out_gate_r(x_rd_next)
            g_d_out = self.out_gate_d(x_rd_next)
        else:
            g_r_out = g_d_out = self._ones(x_d)
        g_r_out = self._scaled("g_r_out", g_r_out)
        g_d_out = self._scaled("g_d_out", g_d_out)

        x_d_com = g_d_out * self.out_proj_d(x_rd_next)
        x_r_com = ops.bilinear_resize(g_r_out * self.out_proj_r(x_rd_next), big_h, big_w)
        return GfuOutput(x_r_com, x_rd_next, x_d_com, GateSet(g_r_in, g_d_in, g_r_out, g_d_out))

    def describe(self, h: int, w: int):
        """Convs at interaction resolution (the RGB down/upsampling is not a conv)."""
        descs = []
        if self.use_gates:
            descs += self.shared_in_conv.describe(h, w)
            descs += self.in_gate_r.describe(h, w) + self.in_gate_d.describe(h, w)
        descs += self.merge_conv.describe(h, w) + self.sconv.describe(h, w)
        if self.emit_complementary:
            if self.use_gates:
                for g in (self.out_gate_r, self.out_gate_d):
                    descs += g.conv1.describe(h, w) + g.conv2.describe(h, w)
            descs += self.out_proj_r.describe(h, w) + self.out_proj_d.describe(h, w)
        return descs


def gfu(state: TriStreamState, unit: GatedFusionUnit) -> GfuOutput:
    return unit(state)


# ---------------------------------------------------------------------------
# residual fusion block
# ---------------------------------------------------------------------------

def rfb(state: TriStreamState, ru_r: ResidualUnit, ru_d: ResidualUnit, unit: GatedFusionUnit,
        inject: str = "R") -> TriStreamState:
    """One residual fusion block over a tri-stream state.

    The fusion unit's gate switch lives on ``unit`` (``use_gates``). With
    ``inject='none'`` the interaction stream only aggregates. For bottleneck
    units the channel contract holds between the tapped features and x_rd,
    which the fusion unit checks itself.
    """
    if inject not in INJECT_POINTS:
        raise ValueError(f"inject must be one of {INJECT_POINTS}, got {inject!r}")
    if ru_r.form != ru_d.form:
        raise ValueError("paired residual units must share a form")

    if ru_r.form == "bottleneck":
        if inject == "T":
            raise ValueError("trunk injection is undefined for bottleneck units "
                             "(complementary features live at the inner width)")
        bottleneck_rfb_attach(ru_r)
        t_r, t_d = ru_r.tap(state.x_r), ru_d.tap(state.x_d)
        out = unit(TriStreamState(t_r, t_d, state.x_rd))
        if inject == "none":
            x_r = state.x_r + ru_r.finish(t_r)
            x_d = state.x_d + ru_d.finish(t_d)
        else:
            x_r = state.x_r + ru_r.finish(t_r + out.x_r_com)
            x_d = state.x_d + ru_d.finish(t_d + out.x_d_com)
        return TriStreamState(x_r, x_d, out.x_rd_next)

    state.validate()
    out = unit(state)
    if inject == "none":
        x_r = residual_unit(state.x_r, None, ru_r, "none")
        x_d = residual_unit(state.x_d, None, ru_d, "none")
    else:
        x_r = residual_unit(state.x_r, out.x_r_com, ru_r, inject)
        x_d = residual_unit(state.x_d, out.x_d_com, ru_d, inject)
    return TriStreamState(x_r, x_d, out.x_rd_next).validate()


def interaction_channels(ru: ResidualUnit) -> int:
    """Width of the interaction stream fed by a pair of these units."""
    return (ru.inner if ru.form == "bottleneck" else ru.channels) // 2


class ResidualFusionBlock(Module):
    """Owns two residual units and one fusion unit; see :func:`rfb`."""

    def __init__(self, channels: int, rng: np.random.Generator, use_gates: bool = True,
                 inject: str = "R", ru_form: str = "nonbottleneck"):
        if inject not in INJECT_POINTS:
            raise ValueError(f"inject must be one of {INJECT_POINTS}, got {inject!r}")
        self.inject = inject
        self.ru_r = ResidualUnit(channels, rng, ru_form)
        self.ru_d = ResidualUnit(channels, rng, ru_form)
        fused = self.ru_r.inner if ru_form == "bottleneck" else channels
        self.gfu = GatedFusionUnit(fused, rng, use_gates=use_gates,
                                   emit_complementary=inject != "none")

    def forward(self, state: TriStreamState) -> TriStreamState:
        return rfb(state, self.ru_r, self.ru_d, self.gfu, self.inject)


# ---------------------------------------------------------------------------
# stream combiners
# ---------------------------------------------------------------------------

class Combiner(Module):
    """Merge same-resolution streams by concatenation, summation, or a
    recalibrating stand-in for the SSMA block:
    concat -> conv3x3 (ratio 4) -> relu -> conv3x3 -> sigmoid -> reweight -> conv1x1.
    """

    def __init__(self, mode: str, in_channels: list[int], rng: np.random.Generator,
                 out_channels: int | None = None, reduction: int = 4):
        if mode not in COMBINERS:
            raise ValueError(f"unknown combiner {mode!r}")
        self.mode = mode
        self.in_channels = list(in_channels)
        total = sum(in_channels)
        if mode == "sum" and len(set(in_channels)) != 1:
            raise ops.ShapeError("combine(sum)", "channel", in_channels[0], in_channels)
        if mode == "concat":
            self.out_channels = total
        elif mode == "sum":
            self.out_channels = in_channels[0]
        else:
            self.out_channels = out_channels or in_channels[0]
            mid = max(1, total // reduction)
            self.bottleneck = Conv2d(total, mid, 3, rng)
            self.expand = Conv2d(mid, total, 3, rng)
            self.out_conv = Conv2d(total, self.out_channels, 1, rng)

    def forward(self, streams: list[Tensor]) -> Tensor:
        ref = streams[0].shape
        for s in streams[1:]:
            if s.shape[2:] != ref[2:]:
                raise ops.ShapeError(f"combine({self.mode})", "spatial", ref[2:], s.shape[2:])
        if [s.shape[1] for s in streams] != self.in_channels:
            raise ops.ShapeError(f"combine({self.mode})", "channel", self.in_channels,
                                 [s.shape[1] for s in streams])
        if self.mode == "sum":
            out = streams[0]
            for s in streams[1:]:
                out = out + s
            return out
        cat = ops.concat(streams) if len(streams) > 1 else streams[0]
        if self.mode == "concat":
            return cat
        weights = ops.sigmoid(self.expand(ops.relu(self.bottleneck(cat))))
        return self.out_conv(cat * weights)

    def describe(self, h: int, w: int):
        if self.mode != "ssma":
            return []
        return (self.bottleneck.describe(h, w) + self.expand.describe(h, w)
                + self.out_conv.describe(h, w))


def ssma_combine(x_r: Tensor, x_d: Tensor, x_rd: Tensor | None, combiner: Combiner) -> Tensor:
    streams = [x_r, x_d] + ([x_rd] if x_rd is not None else [])
    return combiner(streams)
