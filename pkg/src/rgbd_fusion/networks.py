"""Encoders, decoder head, and the fusion-structure variants.

Variants share one tiny backbone family: a stride-2 stem then one stage per
entry of ``stage_widths``; every stage after the first opens with a stride-2
conv. With three stages the last one runs at 1/8 of the input resolution.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import ops
from .blocks import (COMBINERS, INJECT_POINTS, RU_FORMS, Combiner, GatedFusionUnit, ResidualUnit,
                     TriStreamState, rfb)
from .nn import Conv2d, ConvBNReLU, ConvDesc, Module, ModuleList
from .tensor import Tensor

VARIANTS = ("unimodal_rgb", "unimodal_depth", "early", "late", "fusenet_bottomup",
            "topdown_multilevel", "rfbnet")


class SpecError(ValueError):
    pass


@dataclass
class NetworkSpec:
    variant: str = "rfbnet"
    stage_widths: list[int] = field(default_factory=lambda: [16, 32, 64])
    blocks_per_stage: list[int] = field(default_factory=lambda: [2, 2, 2])
    rfb_start_stage: int | None = None
    ru_form: str = "nonbottleneck"
    combiner: str = "concat"
    shrink_depth: bool = True
    num_classes: int = 5
    use_gates: bool = True
    inject: str = "R"
    rgb_channels: int = 3
    depth_channels: int = 3

    def __post_init__(self):
        self.stage_widths = list(self.stage_widths)
        self.blocks_per_stage = list(self.blocks_per_stage)
        self.validate()

    @property
    def num_stages(self) -> int:
        return len(self.stage_widths)

    @property
    def downsample_factor(self) -> int:
        return 2 ** self.num_stages

    @property
    def rfb_start(self) -> int:
        """First fusion stage (0-based); defaults to the 1/8-resolution stage."""
        if self.rfb_start_stage is not None:
            return self.rfb_start_stage
        return min(2, self.num_stages - 1)

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise SpecError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if not self.stage_widths or any(w < 1 for w in self.stage_widths):
            raise SpecError("stage_widths must be a non-empty list of positive ints")
        if len(self.blocks_per_stage) != len(self.stage_widths):
            raise SpecError("blocks_per_stage must have one entry per stage")
        if any(b < 0 for b in self.blocks_per_stage):
            raise SpecError("blocks_per_stage entries must be >= 0")
        if self.ru_form not in RU_FORMS:
            raise SpecError(f"ru_form must be one of {RU_FORMS}")
        if self.combiner not in COMBINERS:
            raise SpecError(f"combiner must be one of {COMBINERS}")
        if self.inject not in INJECT_POINTS:
            raise SpecError(f"inject must be one of {INJECT_POINTS}")
        if self.num_classes < 1:
            raise SpecError("num_classes must be >= 1")
        if self.rfb_start_stage is not None:
            if self.variant != "rfbnet":
                raise SpecError("rfb_start_stage only applies to variant 'rfbnet'")
            if self.rfb_start_stage < 0:
                raise SpecError("rfb_start_stage must be >= 0")
        if self.ru_form == "bottleneck" and any(w % 4 for w in self.stage_widths):
            raise SpecError("bottleneck units need widths divisible by 4")
        if self.variant == "rfbnet":
            for s in range(self.rfb_start, self.num_stages):
                inner = self.stage_widths[s] // (4 if self.ru_form == "bottleneck" else 1)
                if inner % 2:
                    raise SpecError(f"stage {s} width must give an even fusion width")
            if self.ru_form == "bottleneck" and self.inject == "T":
                raise SpecError("inject 'T' is undefined for bottleneck units")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "NetworkSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise SpecError(f"unknown network keys: {sorted(unknown)}")
        return cls(**data)

    def replace(self, **changes) -> "NetworkSpec":
        d = self.to_dict()
        d.update(changes)
        return NetworkSpec(**d)


# ---------------------------------------------------------------------------
# backbone
# ---------------------------------------------------------------------------

class Stage(Module):
    def __init__(self, cin: int, cout: int, n_blocks: int, downsample: bool, rng, ru_form: str):
        self.down = ConvBNReLU(cin, cout, 3, rng, stride=2) if downsample else None
        if not downsample and cin != cout:
            self.down = ConvBNReLU(cin, cout, 1, rng)
        self.blocks = ModuleList(ResidualUnit(cout, rng, ru_form) for _ in range(n_blocks))


class Encoder(Module):
    """Stride-2 stem, then stages of residual units; records one tap per stage."""

    def __init__(self, spec: NetworkSpec, in_channels: int, rng: np.random.Generator):
        widths = spec.stage_widths
        self.stem = ConvBNReLU(in_channels, widths[0], 3, rng, stride=2)
        self.stages = ModuleList()
        prev = widths[0]
        for s, (w, n) in enumerate(zip(widths, spec.blocks_per_stage)):
            self.stages.append(Stage(prev, w, n, s > 0, rng, spec.ru_form))
            prev = w
        self._factor = spec.downsample_factor

    def check_input(self, x: Tensor) -> None:
        h, w = x.shape[2:]
        if h % self._factor or w % self._factor:
            raise ops.ShapeError("encoder", "spatial", f"multiple of {self._factor}", (h, w))

    def forward(self, x: Tensor) -> tuple[Tensor, list[Tensor]]:
        self.check_input(x)
        x = self.stem(x)
        taps = []
        for stage in self.stages:
            if stage.down is not None:
                x = stage.down(x)
            for ru in stage.blocks:
                x = ru(x)
            taps.append(x)
        return x, taps

    def describe(self, h: int, w: int) -> list[ConvDesc]:
        descs = self.stem.describe(h, w)
        h, w = self.stem.output_hw(h, w)
        for stage in self.stages:
            if stage.down is not None:
                descs += stage.down.describe(h, w)
                h, w = stage.down.output_hw(h, w)
            for ru in stage.blocks:
                descs += ru.describe(h, w)
        return descs


def build_backbone(spec: NetworkSpec, modality: str, rng: np.random.Generator) -> Encoder:
    channels = {"rgb": spec.rgb_channels, "depth": spec.depth_channels,
                "rgbd": spec.rgb_channels + spec.depth_channels}
    if modality not in channels:
        raise SpecError(f"unknown modality {modality!r}")
    return Encoder(spec, channels[modality], rng)


class Head(Module):
    """1x1 conv to class logits, then bilinear upsampling by an integer factor."""

    def __init__(self, cin: int, num_classes: int, rng: np.random.Generator):
        self.conv = Conv2d(cin, num_classes, 1, rng)

    def forward(self, x: Tensor, out_h: int, out_w: int) -> Tensor:
        return decoder_forward(x, self.conv, out_h, out_w)


def decoder_forward(x: Tensor, conv: Conv2d, out_h: int, out_w: int) -> Tensor:
    h, w = x.shape[2:]
    if out_h % h or out_w % w or out_h // h != out_w // w:
        raise ops.ShapeError("decoder", "scale", f"one integer factor of {(h, w)}", (out_h, out_w))
    return ops.bilinear_resize(conv(x), out_h, out_w)


# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------

class SegmentationNet(Module):
    spec: NetworkSpec

    def forward(self, rgb: Tensor, depth: Tensor) -> Tensor:  # pragma: no cover - abstract
        raise NotImplementedError

    def encoders(self) -> dict[str, Encoder]:
        return {name: m for name, m in self._children() if isinstance(m, Encoder)}


def _depth_scale(rgb: Tensor, depth: Tensor, spec: NetworkSpec) -> None:
    expected = 2 if spec.shrink_depth else 1
    rh, rw = rgb.shape[2:]
    dh, dw = depth.shape[2:]
    if rh != expected * dh or rw != expected * dw:
        raise ops.ShapeError("network input", "spatial",
                             f"depth {(rh // expected, rw // expected)} for rgb {(rh, rw)}", (dh, dw))


class UnimodalNet(SegmentationNet):
    def __init__(self, spec: NetworkSpec, rng: np.random.Generator):
        self.spec = spec
        self._modality = "rgb" if spec.variant == "unimodal_rgb" else "depth"
        enc = build_backbone(spec, self._modality, rng)
        if self._modality == "rgb":
            self.rgb_encoder = enc
        else:
            self.depth_encoder = enc
        self.head = Head(spec.stage_widths[-1], spec.num_classes, rng)

    def forward(self, rgb: Tensor, depth: Tensor) -> Tensor:
        out_h, out_w = rgb.shape[2:]
        if self._modality == "rgb":
            feat, _ = self.rgb_encoder(rgb)
        else:
            _depth_scale(rgb, depth, self.spec)
            feat, _ = self.depth_encoder(depth)
        return self.head(feat, out_h, out_w)


class EarlyFusionNet(SegmentationNet):
    """One encoder over the channel concatenation of RGB and depth."""

    def __init__(self, spec: NetworkSpec, rng: np.random.Generator):
        self.spec = spec
        self.encoder = build_backbone(spec, "rgbd", rng)
        self.head = Head(spec.stage_widths[-1], spec.num_classes, rng)

    def forward(self, rgb: Tensor, depth: Tensor) -> Tensor:
        _depth_scale(rgb, depth, self.spec)
        out_h, out_w = rgb.shape[2:]
        depth = ops.bilinear_resize(depth, out_h, out_w)
        feat, _ = self.encoder(ops.concat([rgb, depth]))
        return self.head(feat, out_h, out_w)


class FuseNetBottomUp(SegmentationNet):
    """Depth features summed into the RGB stream after the stem and every stage."""

    def __init__(self, spec: NetworkSpec, rng: np.random.Generator):
        self.spec = spec
        self.rgb_encoder = build_backbone(spec, "rgb", rng)
        self.depth_encoder = build_backbone(spec, "depth", rng)
        self.head = Head(spec.stage_widths[-1], spec.num_classes, rng)

    def forward(self, rgb: Tensor, depth: Tensor) -> Tensor:
        _depth_scale(rgb, depth, self.spec)
        self.rgb_encoder.check_input(rgb)
        self.depth_encoder.check_input(depth)
        out_h, out_w = rgb.shape[2:]

        def fuse(xr, xd):
            return xr + ops.bilinear_resize(xd, *xr.shape[2:])

        xr = self.rgb_encoder.stem(rgb)
        xd = self.depth_encoder.stem(depth)
        xr = fuse(xr, xd)
        for sr, sd in zip(self.rgb_encoder.stages, self.depth_encoder.stages):
            if sr.down is not None:
                xr, xd = sr.down(xr), sd.down(xd)
            for ru_r, ru_d in zip(sr.blocks, sd.blocks):
                xr, xd = ru_r(xr), ru_d(xd)
            xr = fuse(xr, xd)
        return self.head(xr, out_h, out_w)


class TopDownNet(SegmentationNet):
    """Per-stage taps of both encoders fused by the combiner and refined
    along a progressively upsampling decoder path."""

    def __init__(self, spec: NetworkSpec, rng: np.random.Generator):
        self.spec = spec
        self.rgb_encoder = build_backbone(spec, "rgb", rng)
        self.depth_encoder = build_backbone(spec, "depth", rng)
        self.tap_combiners = ModuleList(Combiner(spec.combiner, [w, w], rng) for w in spec.stage_widths)
        outs = [c.out_channels for c in self.tap_combiners]
        self.laterals = ModuleList(Conv2d(outs[s + 1], outs[s], 1, rng) for s in range(len(outs) - 1))
        self.refines = ModuleList(Conv2d(outs[s], outs[s], 3, rng) for s in range(len(outs) - 1))
        self.head = Head(outs[0], spec.num_classes, rng)

    def forward(self, rgb: Tensor, depth: Tensor) -> Tensor:
        _depth_scale(rgb, depth, self.spec)
        out_h, out_w = rgb.shape[2:]
        _, taps_r = self.rgb_encoder(rgb)
        _, taps_d = self.depth_encoder(depth)
        fused = [comb([tr, ops.bilinear_resize(td, *tr.shape[2:])])
                 for comb, tr, td in zip(self.tap_combiners, taps_r, taps_d)]
        d = fused[-1]
        for s in range(len(fused) - 2, -1, -1):
            d = ops.bilinear_resize(self.laterals[s](d), *fused[s].shape[2:])
            d = ops.relu(self.refines[s](d + fused[s]))
        return self.head(d, out_h, out_w)


class TwoStreamNet(SegmentationNet):
    """Late fusion, or (variant 'rfbnet') two encoders bridged by an
    interaction stream through residual fusion blocks from ``rfb_start``.

    If no stage hosts fusion blocks the network is exactly late fusion.
    """

    def __init__(self, spec: NetworkSpec, rng: np.random.Generator):
        self.spec = spec
        self.rgb_encoder = build_backbone(spec, "rgb", rng)
        self.depth_encoder = build_backbone(spec, "depth", rng)
        fusion_stages = range(spec.rfb_start, spec.num_stages) if spec.variant == "rfbnet" else range(0)
        self._fusion_stages = [s for s in fusion_stages if spec.blocks_per_stage[s] > 0]
        self._rd_widths: dict[int, int] = {}
        self.fusion = ModuleList()
        self._gfu_index: dict[tuple[int, int], int] = {}
        for s in self._fusion_stages:
            ru = self.rgb_encoder.stages[s].blocks[0]
            fused = ru.inner if ru.form == "bottleneck" else ru.channels
            self._rd_widths[s] = fused // 2
            for j in range(spec.blocks_per_stage[s]):
                self._gfu_index[(s, j)] = len(self.fusion)
                self.fusion.append(GatedFusionUnit(fused, rng, use_gates=spec.use_gates,
                                                   emit_complementary=spec.inject != "none"))
        self.rd_transitions = ModuleList()
        self._transition_index: dict[int, int] = {}
        for prev, s in zip(self._fusion_stages, self._fusion_stages[1:]):
            self._transition_index[s] = len(self.rd_transitions)
            self.rd_transitions.append(Conv2d(self._rd_widths[prev], self._rd_widths[s], 1, rng))

        c = spec.stage_widths[-1]
        in_ch = [c, c]
        self.rd_proj = None
        if self._fusion_stages:
            last_rd = self._rd_widths[self._fusion_stages[-1]]
            if spec.combiner == "sum":
                self.rd_proj = Conv2d(last_rd, c, 1, rng)
                in_ch.append(c)
            else:
                in_ch.append(last_rd)
        self.combiner = Combiner(spec.combiner, in_ch, rng, out_channels=c)
        self.head = Head(self.combiner.out_channels, spec.num_classes, rng)

    @property
    def has_interaction(self) -> bool:
        return bool(self._fusion_stages)

    def set_output_gates(self, value: float | None) -> None:
        """Force every fusion unit's output gates to a constant (None restores)."""
        for unit in self.fusion:
            unit.force_output_gates = value

    def encode(self, rgb: Tensor, depth: Tensor) -> dict:
        _depth_scale(rgb, depth, self.spec)
        self.rgb_encoder.check_input(rgb)
        self.depth_encoder.check_input(depth)
        xr = self.rgb_encoder.stem(rgb)
        xd = self.depth_encoder.stem(depth)
        rd = None
        taps_r, taps_d, states = [], [], []
        for s, (sr, sd) in enumerate(zip(self.rgb_encoder.stages, self.depth_encoder.stages)):
            if sr.down is not None:
                xr, xd = sr.down(xr), sd.down(xd)
            if s in self._rd_widths:
                n, _, h, w = xd.shape
                if rd is None:
                    rd = Tensor(np.zeros((n, self._rd_widths[s], h, w), dtype=xd.dtype))
                else:
                    rd = self.rd_transitions[self._transition_index[s]](ops.bilinear_resize(rd, h, w))
                for j, (ru_r, ru_d) in enumerate(zip(sr.blocks, sd.blocks)):
                    state = rfb(TriStreamState(xr, xd, rd), ru_r, ru_d,
                                self.fusion[self._gfu_index[(s, j)]], self.spec.inject)
                    xr, xd, rd = state.x_r, state.x_d, state.x_rd
                    states.append(state)
            else:
                for ru_r, ru_d in zip(sr.blocks, sd.blocks):
                    xr, xd = ru_r(xr), ru_d(xd)
            taps_r.append(xr)
            taps_d.append(xd)
        return {"x_r": xr, "x_d": xd, "x_rd": rd, "taps_r": taps_r, "taps_d": taps_d, "states": states}

    def forward(self, rgb: Tensor, depth: Tensor) -> Tensor:
        enc = self.encode(rgb, depth)
        xr, xd, rd = enc["x_r"], enc["x_d"], enc["x_rd"]
        h, w = xr.shape[2:]
        streams = [xr, ops.bilinear_resize(xd, h, w)]
        if rd is not None:
            rd = ops.bilinear_resize(rd, h, w)
            streams.append(self.rd_proj(rd) if self.rd_proj is not None else rd)
        out_h, out_w = rgb.shape[2:]
        return self.head(self.combiner(streams), out_h, out_w)


def build_network(spec: NetworkSpec, seed: int | np.random.Generator = 0) -> SegmentationNet:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if spec.variant in ("unimodal_rgb", "unimodal_depth"):
        return UnimodalNet(spec, rng)
    if spec.variant == "early":
        return EarlyFusionNet(spec, rng)
    if spec.variant == "fusenet_bottomup":
        return FuseNetBottomUp(spec, rng)
    if spec.variant == "topdown_multilevel":
        return TopDownNet(spec, rng)
    return TwoStreamNet(spec, rng)


def rfbnet_forward(rgb: Tensor, depth: Tensor, net: TwoStreamNet) -> Tensor:
    return net(rgb, depth)


def variant_forward(net: SegmentationNet, rgb: Tensor, depth: Tensor) -> Tensor:
    return net(rgb, depth)


# ---------------------------------------------------------------------------
# analytic cost
# ---------------------------------------------------------------------------

def flop_count(spec: NetworkSpec, input_hw: tuple[int, int]) -> dict[str, int]:
    """Multiply-accumulate counts per stream, from shapes alone.

    ``input_hw`` is the RGB input size; the depth stream sees half of it
    when ``spec.shrink_depth``.
    """
    h, w = input_hw
    if h is None or w is None or h < 1 or w < 1:
        raise ValueError(f"unspecified input size {input_hw}")
    net = build_network(spec, 0)
    dh, dw = (h // 2, w // 2) if spec.shrink_depth else (h, w)
    counts = {"rgb": 0, "depth": 0, "interaction": 0, "head": 0}
    encs = net.encoders()
    if "rgb_encoder" in encs:
        counts["rgb"] = sum(d.macs() for d in encs["rgb_encoder"].describe(h, w))
    if "depth_encoder" in encs:
        counts["depth"] = sum(d.macs() for d in encs["depth_encoder"].describe(dh, dw))
    if "encoder" in encs:
        counts["rgb"] = sum(d.macs() for d in encs["encoder"].describe(h, w))
    f = spec.downsample_factor
    if isinstance(net, TwoStreamNet):
        for s in net._fusion_stages:
            sh, sw = dh // (2 ** (s + 1)), dw // (2 ** (s + 1))
            for j in range(spec.blocks_per_stage[s]):
                counts["interaction"] += sum(d.macs() for d in net.fusion[net._gfu_index[(s, j)]].describe(sh, sw))
            if s in net._transition_index:
                counts["interaction"] += sum(
                    d.macs() for d in net.rd_transitions[net._transition_index[s]].describe(sh, sw))
        fh, fw = h // f, w // f
        head = net.combiner.describe(fh, fw)
        if net.rd_proj is not None:
            head += net.rd_proj.describe(fh, fw)
        head += net.head.conv.describe(fh, fw)
        counts["head"] = sum(d.macs() for d in head)
    elif isinstance(net, TopDownNet):
        descs = []
        for s, comb in enumerate(net.tap_combiners):
            descs += comb.describe(h // 2 ** (s + 1), w // 2 ** (s + 1))
        for s in range(len(net.refines)):
            sh, sw = h // 2 ** (s + 1), w // 2 ** (s + 1)
            descs += net.laterals[s].describe(sh // 2, sw // 2) + net.refines[s].describe(sh, sw)
        descs += net.head.conv.describe(h // 2, w // 2)
        counts["head"] = sum(d.macs() for d in descs)
    else:
        counts["head"] = sum(d.macs() for d in net.head.conv.describe(h // f, w // f))
    counts["total"] = sum(counts.values())
    return counts
