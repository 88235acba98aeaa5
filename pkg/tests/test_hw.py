import json
import math
from importlib import resources

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rowmix.hw import (CostTable, HardwareProfile, LayerShape, Strategy, TileConfig, auto_tile, check_constraints,
                       classify_situation, estimate_fps, estimate_layers, expand_layers, layer_cycles,
                       resource_report, select_compute_strategy, tile_cycles, _grid)
from rowmix.space import ModelGeometry, SubnetConfig

from oracles import simulate_layer

COSTS = CostTable.default()


def prof(s_dsp=100, s_lut=3000, **kw):
    return HardwareProfile(s_dsp=s_dsp, s_lut=s_lut, **kw)


def test_default_costs_are_the_published_table():
    assert COSTS["W4A6", "lut"] == (33.3, 0.0)
    assert COSTS["W4A6", "pack3"] == (10.9, 0.33)
    assert COSTS["W4A6", "pack4"] == (12.9, 0.25)
    assert COSTS["W8A6", "lut"] == (66.7, 0.0)
    assert COSTS["W8A6", "pack3"] == (21.9, 0.67)
    assert COSTS["W8A6", "pack4"] == (25.8, 0.5)
    assert COSTS["W8A6-direct", "lut"] == (62.2, 0.0)
    assert COSTS["W8A6-direct", "pack3"] == (21.5, 0.5)
    assert COSTS["W8A6-direct", "pack4"] == (21.5, 0.5)


def test_cost_ordering_validated_on_load(tmp_path):
    d = COSTS.to_dict()
    d["W4A6"]["pack3"]["c_lut"] = 13.0
    with pytest.raises(ValueError, match="ordering"):
        CostTable.from_dict(d)
    p = tmp_path / "bad.json"
    p.write_text('{"W4A6": {\n  "lut": }')
    with pytest.raises(ValueError, match="line 2"):
        CostTable.load(p)


def test_packing_rates():
    assert COSTS.mults_per_dsp("W4A6", "pack3") == 3
    assert COSTS.mults_per_dsp("W4A6", "pack4") == 4
    assert COSTS.mults_per_dsp("W8A6", "pack3") == 1.5


def test_profile_validation():
    with pytest.raises(ValueError):
        prof(gamma_dsp=0.0)
    with pytest.raises(ValueError):
        prof(s_dsp=0)
    with pytest.raises(ValueError):
        HardwareProfile.from_dict({"s_dsp": 1, "s_lut": 1, "bogus": 3})


def test_situation_1():
    p = prof(100, 3000)
    assert classify_situation(p, COSTS) == 1
    plan = select_compute_strategy(p, COSTS)
    assert plan.strategy == Strategy.PACK3_ONLY
    assert (plan.n_dsp, plan.n_lut, plan.n_tot) == (275, 0, 275)
    rep = resource_report(plan, p, COSTS)
    assert rep["lut_util"] == pytest.approx(275 * 10.9 / 3000)
    assert rep["lut_util"] == pytest.approx(0.999, abs=1e-3)


def test_situation_2():
    p = prof(100, 100000)
    assert classify_situation(p, COSTS) == 2
    plan = select_compute_strategy(p, COSTS)
    assert plan.strategy == Strategy.PACK4_PLUS_LUT
    assert (plan.n_dsp, plan.n_lut) == (400, 2848)
    assert plan.n_tot == 400 + 2848


def test_situation_3():
    p = prof(100, 4000)
    assert classify_situation(p, COSTS) == 3
    # evaluated as printed: (4000 + 300*(33.3-10.9))/33.3 = 321.9 > 4000/12.9 = 310.1
    plan = select_compute_strategy(p, COSTS)
    assert plan.strategy == Strategy.PACK3_PLUS_LUT
    assert (plan.n_dsp, plan.n_lut) == (300, math.floor((4000 - 3270) / 33.3))


def test_derived_rule_differs_only_in_situation_2():
    p = prof(100, 100000)
    d = select_compute_strategy(p, COSTS, rule="derived")
    # 4*12.9 - 3*10.9 = 18.9 <= 33.3 -> pack4 as well
    assert d.strategy == Strategy.PACK4_PLUS_LUT
    with pytest.raises(ValueError):
        select_compute_strategy(p, COSTS, rule="other")


def test_infeasible_profile():
    with pytest.raises(ValueError, match="infeasible profile"):
        select_compute_strategy(prof(1, 1), COSTS)


def test_dsp_utilisation_at_gamma():
    p = HardwareProfile(2520, 274080, gamma_dsp=0.69, gamma_lut=0.66)
    plan = select_compute_strategy(p, COSTS)
    rep = resource_report(plan, p, COSTS)
    assert rep["dsp_util"] <= 0.69 + 1e-9
    assert rep["dsp_util"] == pytest.approx(0.69, abs=1 / 2520)
    empty = resource_report(None, p, COSTS)
    assert empty["dsp_util"] == 0 and empty["lut_util"] == 0


@given(st.integers(1, 5000), st.integers(1, 10 ** 6), st.floats(0.05, 1.0), st.floats(0.05, 1.0),
       st.sampled_from(["W4A6", "W8A6", "W8A6-direct"]), st.sampled_from(["verbatim", "derived"]))
def test_plans_respect_budgets(s_dsp, s_lut, gd, gl, mode, rule):
    p = HardwareProfile(s_dsp, s_lut, gd, gl)
    try:
        plan = select_compute_strategy(p, COSTS, mode, rule)
    except ValueError as exc:
        assert "infeasible profile" in str(exc)
        return
    assert all(check_constraints(plan, p, COSTS))
    assert plan.n_tot == plan.n_dsp + plan.n_lut >= 1


def test_tile_cycle_examples():
    p = HardwareProfile.load(resources.files("rowmix").joinpath("data/profile_toy.json"))
    plan = select_compute_strategy(p, COSTS)
    assert (plan.strategy, plan.n_dsp, plan.n_lut) == (Strategy.PACK4_PLUS_LUT, 64, 0)
    shape = LayerShape(4, 4, 8)
    c = tile_cycles(shape, TileConfig(4, 4, 4), p, plan)
    assert (c.l_in, c.l_wgt, c.l_out, c.l_cmpt) == (8, 4, 8, 2)
    assert layer_cycles(shape, TileConfig(4, 4, 4), p, plan) == 18
    one = HardwareProfile(16, 100000)
    assert tile_cycles(LayerShape(1, 1, 1), TileConfig(1, 1, 1), one, plan).l_out == 1


def test_single_tile_degenerate(rng):
    p = HardwareProfile(16, 100000, axi_in=2, d_act=2)
    plan = select_compute_strategy(p, COSTS)
    shape = LayerShape(6, 5, 7)
    tile = TileConfig(5, 6, 3)
    c = tile_cycles(shape, tile, p, plan)
    l2 = max(max(c.l_in, c.l_wgt, c.l_cmpt) + c.l_cmpt, c.l_out)
    assert layer_cycles(shape, tile, p, plan) == l2 + c.l_out


def test_tile_must_fit():
    p = HardwareProfile(16, 100000)
    plan = select_compute_strategy(p, COSTS)
    with pytest.raises(ValueError):
        layer_cycles(LayerShape(4, 4, 4), TileConfig(8, 4, 4), p, plan)
    with pytest.raises(ValueError):
        LayerShape(4, 6, 4, n_h=4)


@st.composite
def layer_case(draw):
    n_h = draw(st.integers(1, 3))
    shape = LayerShape(draw(st.integers(1, 24)), n_h * draw(st.integers(1, 12)), draw(st.integers(1, 16)), n_h,
                       draw(st.sampled_from([0.0, 0.25, 0.5, 1.0])))
    tile = TileConfig(draw(st.integers(1, shape.n_per_head)), draw(st.integers(1, shape.m)),
                      draw(st.integers(1, shape.f)))
    p = HardwareProfile(draw(st.integers(1, 40)), draw(st.integers(1000, 200000)),
                        axi_in=draw(st.integers(1, 4)), axi_wgt=draw(st.integers(1, 4)),
                        axi_out=draw(st.integers(1, 4)), d_act=draw(st.integers(1, 8)),
                        d_wgt=draw(st.integers(1, 16)))
    return shape, tile, p


@given(layer_case())
def test_layer_cycles_match_simulator(case):
    shape, tile, p = case
    plan = select_compute_strategy(p, COSTS)
    sim = simulate_layer(shape.m, shape.n, shape.f, shape.n_h, shape.mixed_ratio, tile.t_n, tile.t_m, tile.p_f,
                         p, plan.n_tot)
    assert layer_cycles(shape, tile, p, plan) == sim


def test_fps_is_frequency_over_cycles():
    p = HardwareProfile(16, 100000)
    plan = select_compute_strategy(p, COSTS)
    shapes = [LayerShape(4, 4, 8, name="a"), LayerShape(8, 4, 8, name="b")]
    est = estimate_layers(shapes, p, plan, TileConfig(4, 4, 4))
    assert est.total_cycles == sum(layer_cycles(s, TileConfig(4, 4, 4), p, plan) for s in shapes)
    assert est.fps == p.freq_hz / est.total_cycles
    assert 150e6 / 150_000 == 1000.0
    with pytest.raises(ValueError):
        estimate_layers([], p, plan)


def test_doubling_cycles_halves_fps():
    p = HardwareProfile(16, 100000)
    plan = select_compute_strategy(p, COSTS)
    one = estimate_layers([LayerShape(4, 4, 8, name="a")], p, plan, TileConfig(4, 4, 4))
    two = estimate_layers([LayerShape(4, 4, 8, name="a"), LayerShape(4, 4, 8, name="b")], p, plan,
                          TileConfig(4, 4, 4))
    assert two.fps == one.fps / 2


def test_toy_two_layer_config_sums_layers():
    geo = ModelGeometry(8, 16, 8, 4)
    cfg = SubnetConfig(16, 2, (16, 8), (2.0, 3.0), (0.5, 0.25))
    p = HardwareProfile(16, 100000, axi_in=2, d_act=2)
    est = estimate_fps(cfg, p, COSTS, geo=geo)
    plan = est.plan
    manual = sum(layer_cycles(s, auto_tile(s, p, plan), p, plan) for s in expand_layers(cfg, geo))
    assert est.total_cycles == manual
    assert len(est.layers) == 2 + 6 * 2


def test_expand_layers_shapes():
    geo = ModelGeometry(197, 768, 64, 1000)
    cfg = SubnetConfig(384, 1, (384,), (4.0,), (0.25,))
    layers = {s.name: s for s in expand_layers(cfg, geo)}
    assert (layers["b0.qkv"].m, layers["b0.qkv"].n) == (1152, 384)
    assert layers["b0.attn_score"].n_h == 6 and layers["b0.attn_score"].n_per_head == 64
    assert layers["b0.attn_value"].n_per_head == 197
    assert (layers["b0.mlp1"].m, layers["b0.mlp2"].n) == (1536, 1536)
    assert layers["head"].f == 1


@given(layer_case())
def test_auto_tile_is_argmin_over_grid(case):
    shape, _, p = case
    plan = select_compute_strategy(p, COSTS)
    best = layer_cycles(shape, auto_tile(shape, p, plan), p, plan)
    for t_n in _grid(shape.n_per_head):
        for t_m in _grid(shape.m):
            for p_f in _grid(shape.f):
                assert best <= layer_cycles(shape, TileConfig(t_n, t_m, p_f), p, plan)


@given(layer_case(), st.sampled_from(["m", "n", "f"]), st.integers(1, 8))
def test_fps_monotone_in_layer_dims(case, dim, inc):
    shape, _, p = case
    plan = select_compute_strategy(p, COSTS)
    kw = dict(m=shape.m, n=shape.n, f=shape.f, n_h=shape.n_h, mixed_ratio=shape.mixed_ratio)
    kw[dim] += inc * (shape.n_h if dim == "n" else 1)
    bigger = LayerShape(**kw)
    a = estimate_layers([shape], p, plan).fps
    b = estimate_layers([bigger], p, plan).fps
    assert b <= a


def test_profile_json_roundtrip(tmp_path):
    p = HardwareProfile(2520, 274080, 0.69, 0.66, 4, 4, 4, 8, 16)
    f = tmp_path / "p.json"
    f.write_text(json.dumps({"name": "board", **p.to_dict()}))
    assert HardwareProfile.load(f) == p
