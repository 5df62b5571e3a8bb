import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rgbd_fusion import ops
from rgbd_fusion.blocks import (Combiner, GatedFusionUnit, GateNet, ResidualFusionBlock, ResidualUnit,
                                StreamContractError, TriStreamState, bottleneck_rfb_attach, gfu, rfb,
                                residual_unit)
from rgbd_fusion.tensor import Tensor


def tri(rng, n=2, c=8, h=8, w=8, zero_rd=False):
    rd = np.zeros((n, c // 2, h // 2, w // 2)) if zero_rd else rng.normal(size=(n, c // 2, h // 2, w // 2))
    return TriStreamState(Tensor(rng.normal(size=(n, c, h, w))), Tensor(rng.normal(size=(n, c, h // 2, w // 2))),
                          Tensor(rd))


def randomize(module, rng, scale=0.5):
    for p in module.parameters():
        p.data = rng.normal(scale=scale, size=p.shape)


def zero_convs(ru):
    for name, p in ru.named_parameters():
        if name.startswith("conv"):
            p.data[...] = 0.0


# -- residual units -------------------------------------------------------------

@pytest.mark.parametrize("form", ["nonbottleneck", "bottleneck"])
def test_zero_residual_unit_is_identity(rng, form):
    ru = ResidualUnit(8, rng, form)
    zero_convs(ru)
    x = Tensor(rng.normal(size=(2, 8, 4, 4)))
    comp = Tensor(rng.normal(size=(2, 8, 4, 4)))
    assert np.array_equal(residual_unit(x, comp, ru, "R").data, x.data)
    assert np.array_equal(residual_unit(x, None, ru, "none").data, x.data)


def test_zero_complementary_makes_r_match_none(rng):
    ru = ResidualUnit(4, rng)
    x = Tensor(rng.normal(size=(2, 4, 5, 5)))
    zero = Tensor(np.zeros(x.shape))
    a = residual_unit(x, zero, ru, "R").data
    assert np.array_equal(a, residual_unit(x, None, ru, "none").data)
    assert np.array_equal(a, residual_unit(x, zero, ru, "T").data)


def test_inject_r_matches_composition(rng):
    ru = ResidualUnit(4, rng)
    randomize(ru, rng)
    x = rng.normal(size=(2, 4, 5, 5))
    comp = rng.normal(size=(2, 4, 5, 5))

    def bn(v, mod):
        mean = v.mean(axis=(0, 2, 3), keepdims=True)
        var = v.var(axis=(0, 2, 3), keepdims=True)
        return (v - mean) / np.sqrt(var + 1e-5) * mod.scale.data + mod.shift.data

    def conv(v, mod):
        return ops.conv2d(Tensor(v), mod.weight, None, 1, 1).data

    y = x + comp
    f = conv(np.maximum(bn(conv(np.maximum(bn(y, ru.bn1), 0), ru.conv1), ru.bn2), 0), ru.conv2)
    out = residual_unit(Tensor(x), Tensor(comp), ru, "R").data
    np.testing.assert_allclose(out, x + f, rtol=1e-12, atol=1e-12)


def test_inject_points_differ_generically(rng):
    ru = ResidualUnit(4, rng)
    x = Tensor(rng.normal(size=(1, 4, 4, 4)))
    comp = Tensor(rng.normal(size=(1, 4, 4, 4)))
    r = residual_unit(x, comp, ru, "R").data
    t = residual_unit(x, comp, ru, "T").data
    assert np.abs(r - t).max() > 1e-3
    # trunk injection adds comp on the identity path as well
    np.testing.assert_allclose(t - r, comp.data, atol=1e-12)


def test_residual_unit_argument_errors(rng):
    ru = ResidualUnit(4, rng)
    x = Tensor(np.zeros((1, 4, 2, 2)))
    with pytest.raises(ValueError):
        residual_unit(x, x, ru, "none")
    with pytest.raises(ValueError):
        residual_unit(x, None, ru, "R")
    with pytest.raises(ops.ShapeError):
        residual_unit(x, Tensor(np.zeros((1, 4, 3, 3))), ru, "T")


# -- gates ------------------------------------------------------------------------

def test_gate_network_zero_params_gives_half(rng):
    g = GateNet(4, 3, rng)
    for p in g.parameters():
        p.data[...] = 0.0
    out = g(Tensor(rng.normal(size=(2, 4, 5, 5)))).data
    assert out.shape == (2, 1, 5, 5)
    assert np.all(out == 0.5)


def test_gate_network_saturates(rng):
    g = GateNet(4, 3, rng)
    g.conv2.bias.data[...] = 40.0
    out = g(Tensor(rng.normal(size=(1, 4, 3, 3)))).data
    assert np.all(out >= 1 - 1e-10) and np.all(out < 1)


def test_gate_network_matches_composition(rng):
    g = GateNet(3, 2, rng)
    randomize(g, rng)
    x = rng.normal(size=(1, 3, 4, 4))
    hidden = np.maximum(ops.conv2d(Tensor(x), g.conv1.weight, g.conv1.bias, 1, 1).data, 0)
    z = ops.conv2d(Tensor(hidden), g.conv2.weight, g.conv2.bias, 1, 1).data
    np.testing.assert_allclose(g(Tensor(x)).data, 1 / (1 + np.exp(-z)), rtol=1e-12)


@given(st.integers(0, 2 ** 31 - 1), st.floats(0.01, 50.0))
def test_gates_stay_inside_unit_interval(seed, scale):
    rng = np.random.default_rng(seed)
    unit = GatedFusionUnit(4, rng)
    randomize(unit, rng, scale=scale)
    out = unit(tri(rng, n=1, c=4, h=4, w=4))
    for gate in out.gates.as_dict().values():
        assert gate.shape == (1, 1, 2, 2)
        assert np.all((gate.data > 0) & (gate.data < 1))


# -- gated fusion unit ------------------------------------------------------------

def test_gfu_shapes_match_declared_contract(rng):
    unit = GatedFusionUnit(64, rng)
    out = gfu(tri(rng, n=1, c=64, h=32, w=32, zero_rd=True), unit)
    assert out.x_r_com.shape == (1, 64, 32, 32)
    assert out.x_rd_next.shape == (1, 32, 16, 16)
    assert out.x_d_com.shape == (1, 64, 16, 16)


def test_fresh_gates_are_open_halfway(rng):
    out = GatedFusionUnit(8, rng)(tri(rng))
    for gate in out.gates.as_dict().values():
        assert np.all(gate.data == 0.5)


def test_closed_output_gates_silence_complementary_features(rng):
    unit = GatedFusionUnit(8, rng)
    unit.out_gate_r.conv2.bias.data[...] = -40.0
    unit.out_gate_d.conv2.bias.data[...] = -40.0
    out = unit(tri(rng))
    assert np.abs(out.x_r_com.data).max() <= 1e-10
    assert np.abs(out.x_d_com.data).max() <= 1e-10


def test_zero_merge_path_leaves_sconv_of_bias(rng):
    unit = GatedFusionUnit(8, rng)
    unit.merge_conv.weight.data[...] = 0.0
    unit.merge_conv.bias.data[...] = rng.normal(size=unit.merge_conv.bias.shape)
    state = tri(rng, zero_rd=True)
    out = unit(state)
    merged = np.broadcast_to(unit.merge_conv.bias.data, state.x_rd.shape).copy()
    mid = ops.conv2d(Tensor(merged), unit.sconv.depthwise, None, 1, 1, groups=4)
    ref = ops.conv2d(mid, unit.sconv.pointwise, None).data
    np.testing.assert_allclose(out.x_rd_next.data, ref, atol=1e-12)


def test_input_gate_scaling_is_continuous_at_zero(rng):
    unit = GatedFusionUnit(8, rng)
    randomize(unit, rng)
    state = tri(rng)
    unit.gate_scales = {"g_r_in": 0.0, "g_d_in": 0.0}
    closed = unit(state).x_rd_next.data
    zero_in = ops.concat([Tensor(np.zeros((2, 8, 4, 4))), Tensor(np.zeros((2, 8, 4, 4)))])
    ref = unit.sconv(unit.merge_conv(zero_in) + state.x_rd).data
    np.testing.assert_allclose(closed, ref, atol=1e-12)
    gaps = []
    for s in (1.0, 1e-2, 1e-4, 1e-6):
        unit.gate_scales = {"g_r_in": s, "g_d_in": s}
        gaps.append(np.abs(unit(state).x_rd_next.data - closed).max())
    assert all(a > b for a, b in zip(gaps, gaps[1:]))
    assert gaps[-1] < 1e-4


@pytest.mark.parametrize("make", [
    lambda r: TriStreamState(Tensor(r.normal(size=(1, 8, 8, 8))), Tensor(r.normal(size=(1, 6, 4, 4))),
                             Tensor(r.normal(size=(1, 4, 4, 4)))),
    lambda r: TriStreamState(Tensor(r.normal(size=(1, 8, 8, 8))), Tensor(r.normal(size=(1, 8, 4, 4))),
                             Tensor(r.normal(size=(1, 8, 4, 4)))),
    lambda r: TriStreamState(Tensor(r.normal(size=(1, 8, 10, 10))), Tensor(r.normal(size=(1, 8, 5, 5))),
                             Tensor(r.normal(size=(1, 4, 5, 5)))),
    lambda r: TriStreamState(Tensor(r.normal(size=(1, 8, 12, 12))), Tensor(r.normal(size=(1, 8, 4, 4))),
                             Tensor(r.normal(size=(1, 4, 4, 4)))),
    lambda r: TriStreamState(Tensor(r.normal(size=(2, 8, 8, 8))), Tensor(r.normal(size=(1, 8, 4, 4))),
                             Tensor(r.normal(size=(1, 4, 4, 4)))),
])
def test_contract_violations_raise_before_compute(rng, make):
    with pytest.raises(StreamContractError):
        GatedFusionUnit(8, rng)(make(rng))


# -- residual fusion block --------------------------------------------------------

@pytest.mark.parametrize("inject", ["R", "none"])
def test_zero_residual_rfb_keeps_unimodal_streams(rng, inject):
    block = ResidualFusionBlock(8, rng, inject=inject)
    randomize(block.gfu, rng)
    zero_convs(block.ru_r)
    zero_convs(block.ru_d)
    state = tri(rng)
    out = block(state)
    assert np.array_equal(out.x_r.data, state.x_r.data)
    assert np.array_equal(out.x_d.data, state.x_d.data)


def test_zero_output_path_reduces_to_independent_units(rng):
    block = ResidualFusionBlock(8, rng, inject="R")
    for proj in (block.gfu.out_proj_r, block.gfu.out_proj_d):
        proj.weight.data[...] = 0.0
        proj.bias.data[...] = 0.0
    state = tri(rng)
    out = block(state)
    np.testing.assert_array_equal(out.x_r.data, block.ru_r(state.x_r).data)
    np.testing.assert_array_equal(out.x_d.data, block.ru_d(state.x_d).data)


def test_inject_none_is_bit_identical_to_standalone_units(rng):
    block = ResidualFusionBlock(8, rng, inject="none")
    state = tri(rng)
    out = block(state)
    assert np.array_equal(out.x_r.data, residual_unit(state.x_r, None, block.ru_r, "none").data)
    assert np.array_equal(out.x_d.data, residual_unit(state.x_d, None, block.ru_d, "none").data)
    assert out.x_rd.shape == state.x_rd.shape


@given(st.integers(0, 2 ** 31 - 1), st.sampled_from(["R", "T", "none"]), st.booleans(),
       st.sampled_from([(4, 4), (8, 4), (4, 12)]))
def test_rfb_preserves_stream_contract(seed, inject, gates, hw):
    rng = np.random.default_rng(seed)
    block = ResidualFusionBlock(4, rng, use_gates=gates, inject=inject)
    randomize(block, rng)
    out = block(tri(rng, n=1, c=4, h=hw[0], w=hw[1]))
    out.validate()
    assert out.x_rd.shape == (1, 2, hw[0] // 2, hw[1] // 2)


def test_gates_off_means_unit_gates(rng):
    unit = GatedFusionUnit(8, rng, use_gates=False)
    out = unit(tri(rng))
    for gate in out.gates.as_dict().values():
        assert np.all(gate.data == 1.0)
    assert not any(n.startswith(("shared_in", "in_gate", "out_gate")) for n, _ in unit.named_parameters())


def test_rfb_accepts_equal_resolution_streams(rng):
    block = ResidualFusionBlock(8, rng)
    state = TriStreamState(Tensor(rng.normal(size=(1, 8, 4, 4))), Tensor(rng.normal(size=(1, 8, 4, 4))),
                           Tensor(np.zeros((1, 4, 4, 4))))
    out = block(state)
    assert out.x_r.shape == (1, 8, 4, 4) and out.scale == 1


# -- bottleneck attachment --------------------------------------------------------

def test_bottleneck_wiring_widths(rng):
    wiring = bottleneck_rfb_attach(ResidualUnit(64, rng, "bottleneck"))
    assert wiring.tap_channels == 16 and wiring.inject_channels == 16
    assert (wiring.tap_after, wiring.inject_before) == ("conv1", "conv2")
    with pytest.raises(ValueError):
        bottleneck_rfb_attach(ResidualUnit(8, rng))


def test_bottleneck_zero_complementary_matches_plain_unit(rng):
    block = ResidualFusionBlock(16, rng, inject="R", ru_form="bottleneck")
    for proj in (block.gfu.out_proj_r, block.gfu.out_proj_d):
        proj.weight.data[...] = 0.0
        proj.bias.data[...] = 0.0
    state = TriStreamState(Tensor(rng.normal(size=(1, 16, 8, 8))), Tensor(rng.normal(size=(1, 16, 4, 4))),
                           Tensor(np.zeros((1, 2, 4, 4))))
    out = rfb(state, block.ru_r, block.ru_d, block.gfu, "R")
    np.testing.assert_array_equal(out.x_r.data, block.ru_r(state.x_r).data)
    np.testing.assert_array_equal(out.x_d.data, block.ru_d(state.x_d).data)
    assert out.x_rd.shape == (1, 2, 4, 4)


def test_bottleneck_rejects_trunk_injection(rng):
    ru = ResidualUnit(8, rng, "bottleneck")
    unit = GatedFusionUnit(2, rng)
    state = TriStreamState(Tensor(np.zeros((1, 8, 4, 4))), Tensor(np.zeros((1, 8, 2, 2))),
                           Tensor(np.zeros((1, 1, 2, 2))))
    with pytest.raises(ValueError):
        rfb(state, ru, ru, unit, "T")


# -- combiners --------------------------------------------------------------------

def test_sum_combiner_cancels(rng):
    x = rng.normal(size=(1, 4, 3, 3))
    out = Combiner("sum", [4, 4], rng)([Tensor(x), Tensor(-x)])
    assert np.all(out.data == 0)


def test_concat_combiner_width(rng):
    comb = Combiner("concat", [64, 64, 32], rng)
    out = comb([Tensor(np.zeros((1, c, 2, 2))) for c in (64, 64, 32)])
    assert comb.out_channels == 160 and out.shape == (1, 160, 2, 2)


def test_saturated_ssma_reproduces_a_concat_slice(rng):
    comb = Combiner("ssma", [4, 4, 2], rng, out_channels=4)
    comb.expand.weight.data[...] = 0.0
    comb.expand.bias.data[...] = 40.0
    comb.out_conv.weight.data[...] = 0.0
    comb.out_conv.bias.data[...] = 0.0
    for k in range(4):
        comb.out_conv.weight.data[k, 4 + k, 0, 0] = 1.0
    streams = [Tensor(rng.normal(size=(1, c, 3, 3))) for c in (4, 4, 2)]
    np.testing.assert_allclose(comb(streams).data, streams[1].data, atol=1e-10)


def test_combiner_never_resamples(rng):
    comb = Combiner("concat", [2, 2], rng)
    with pytest.raises(ops.ShapeError):
        comb([Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 2, 2, 2)))])
    with pytest.raises(ops.ShapeError):
        Combiner("sum", [2, 3], rng)
