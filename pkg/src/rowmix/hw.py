"""Analytical FPGA resource allocation and tile-level latency model.

Resource side: pick how many 4-bit multipliers run on packed DSPs and how
many on plain LUT fabric, following the three LUT-budget situations.
Latency side: cycles per tile for input/weight/output transfer and compute,
combined into per-layer totals and frames per second.
"""
from __future__ import annotations

import enum
import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import NamedTuple

from .quant import bops, model_size_bytes
from .space import ModelGeometry, SubnetConfig

MODES = ("W4A6", "W8A6", "W8A6-direct")
IMPLS = ("lut", "pack3", "pack4")
_EPS = 1e-9


def _floor(x: float) -> int:
    # guards 3 * 1000 * 0.69 == 2069.9999999999995
    return math.floor(x + _EPS)


@dataclass(frozen=True)
class HardwareProfile:
    s_dsp: int
    s_lut: int
    gamma_dsp: float = 1.0
    gamma_lut: float = 1.0
    axi_in: int = 1
    axi_wgt: int = 1
    axi_out: int = 1
    d_act: int = 1
    d_wgt: int = 1
    freq_hz: float = 150e6

    def __post_init__(self):
        for name in ("s_dsp", "s_lut", "axi_in", "axi_wgt", "axi_out", "d_act", "d_wgt"):
            v = getattr(self, name)
            if int(v) != v or v <= 0:
                raise ValueError(f"{name} must be a positive count, got {v}")
        for name in ("gamma_dsp", "gamma_lut"):
            if not 0.0 < getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1]")
        if self.freq_hz <= 0:
            raise ValueError("freq_hz must be positive")

    @property
    def dsp_budget(self) -> float:
        return self.s_dsp * self.gamma_dsp

    @property
    def lut_budget(self) -> float:
        return self.s_lut * self.gamma_lut

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "HardwareProfile":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known - {"name", "comment"}
        if unknown:
            raise ValueError(f"unknown hardware profile keys: {sorted(unknown)}")
        return cls(**{k: v for k, v in d.items() if k in known})

    @classmethod
    def load(cls, path) -> "HardwareProfile":
        return cls.from_dict(_read_json(path))


class UnitCost(NamedTuple):
    c_lut: float
    c_dsp: float


def _read_json(path) -> dict:
    text = Path(path).read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc


@dataclass(frozen=True)
class CostTable:
    """Per-multiplication LUT/DSP cost for each (mode, implementation) cell."""

    entries: dict

    def __post_init__(self):
        for mode in MODES:
            for impl in IMPLS:
                if (mode, impl) not in self.entries:
                    raise ValueError(f"cost table is missing {mode}/{impl}")
        self.validate()

    def __getitem__(self, key) -> UnitCost:
        return self.entries[key]

    def validate(self) -> None:
        """LUT cost ordering pack3 < pack4 < pure LUT.

        The direct W8A6 row shares one DSP cell between both packing columns,
        so only the non-strict form is required there.
        """
        for mode in MODES:
            c3, c4, cl = (self.entries[mode, i].c_lut for i in ("pack3", "pack4", "lut"))
            strict = mode != "W8A6-direct"
            ok = (c3 < c4 < cl) if strict else (c3 <= c4 < cl)
            if not ok:
                raise ValueError(f"cost ordering violated for {mode}: pack3={c3}, pack4={c4}, lut={cl}")

    def mults_per_dsp(self, mode: str, impl: str) -> Fraction:
        # table lists 0.33/0.67 for 1/3 and 2/3 DSP
        return 1 / Fraction(self.entries[mode, impl].c_dsp).limit_denominator(10)

    def dsp_per_mult(self, mode: str, impl: str) -> Fraction:
        return 1 / self.mults_per_dsp(mode, impl)

    def to_dict(self) -> dict:
        out: dict = {}
        for (mode, impl), c in self.entries.items():
            out.setdefault(mode, {})[impl] = {"c_lut": c.c_lut, "c_dsp": c.c_dsp}
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "CostTable":
        entries = {}
        for mode, impls in d.items():
            for impl, c in impls.items():
                entries[mode, impl] = UnitCost(float(c["c_lut"]), float(c["c_dsp"]))
        return cls(entries)

    @classmethod
    def load(cls, path) -> "CostTable":
        return cls.from_dict(_read_json(path))

    @classmethod
    def default(cls) -> "CostTable":
        text = resources.files("rowmix").joinpath("data/costs_default.json").read_text()
        return cls.from_dict(json.loads(text))


class Strategy(str, enum.Enum):
    PACK3_ONLY = "Pack3Only"
    PACK3_PLUS_LUT = "Pack3PlusLut"
    PACK4_ONLY = "Pack4Only"
    PACK4_PLUS_LUT = "Pack4PlusLut"

    @property
    def impl(self) -> str:
        return "pack3" if self in (Strategy.PACK3_ONLY, Strategy.PACK3_PLUS_LUT) else "pack4"


@dataclass(frozen=True)
class ComputePlan:
    strategy: Strategy
    n_dsp: int  # multipliers mapped onto DSPs
    n_lut: int  # multipliers built from LUTs
    situation: int
    mode: str = "W4A6"
    dsp_blocks: int = 0
    n_tot: int = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "n_tot", self.n_dsp + self.n_lut)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["strategy"] = self.strategy.value
        return d


def _plan(strategy, n_dsp, n_lut, situation, mode, costs) -> ComputePlan:
    if n_dsp + n_lut < 1:
        raise ValueError("infeasible profile: budget cannot hold a single multiplier")
    blocks = math.ceil(n_dsp * costs.dsp_per_mult(mode, strategy.impl))
    return ComputePlan(strategy, n_dsp, n_lut, situation, mode, blocks)


def classify_situation(profile: HardwareProfile, costs: CostTable, mode: str = "W4A6") -> int:
    r3, r4 = costs.mults_per_dsp(mode, "pack3"), costs.mults_per_dsp(mode, "pack4")
    c3, c4 = costs[mode, "pack3"].c_lut, costs[mode, "pack4"].c_lut
    need3 = float(r3) * profile.dsp_budget * c3
    need4 = float(r4) * profile.dsp_budget * c4
    if profile.lut_budget <= need3:
        return 1
    if need4 <= profile.lut_budget:
        return 2
    return 3


def select_compute_strategy(profile: HardwareProfile, costs: CostTable, mode: str = "W4A6",
                            rule: str = "verbatim") -> ComputePlan:
    """Allocate DSP-packed and LUT multipliers for one quantization mode.

    ``rule="verbatim"`` applies the printed pack-4 preference test in the
    LUT-rich situation, ``rule="derived"`` the comparison obtained by
    maximising the total multiplier count directly (independent of S_lut).
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if rule not in ("verbatim", "derived"):
        raise ValueError(f"unknown strategy rule {rule!r}")
    r3, r4 = float(costs.mults_per_dsp(mode, "pack3")), float(costs.mults_per_dsp(mode, "pack4"))
    c3, c4 = costs[mode, "pack3"].c_lut, costs[mode, "pack4"].c_lut
    cl = costs[mode, "lut"].c_lut
    dsp, lut = profile.dsp_budget, profile.lut_budget

    def with_lut(strategy, rate, c_dsp_lut, situation):
        n_dsp = _floor(rate * dsp)
        n_lut = max(0, _floor((lut - n_dsp * c_dsp_lut) / cl))
        return _plan(strategy, n_dsp, n_lut, situation, mode, costs)

    def dsp_only(strategy, rate, c_dsp_lut, situation):
        n_dsp = min(_floor(rate * dsp), _floor(lut / c_dsp_lut))
        return _plan(strategy, n_dsp, 0, situation, mode, costs)

    situation = classify_situation(profile, costs, mode)
    if situation == 1:
        return dsp_only(Strategy.PACK3_ONLY, r3, c3, 1)
    if situation == 2:
        if rule == "verbatim":
            prefer4 = (r4 * c4 - r3 * c3) * dsp <= lut * cl
        else:
            prefer4 = r4 * c4 - r3 * c3 <= (r4 - r3) * cl
        if prefer4:
            return with_lut(Strategy.PACK4_PLUS_LUT, r4, c4, 2)
        return with_lut(Strategy.PACK3_PLUS_LUT, r3, c3, 2)
    if (lut + r3 * dsp * (cl - c3)) / cl <= lut / c4:
        return dsp_only(Strategy.PACK4_ONLY, r4, c4, 3)
    return with_lut(Strategy.PACK3_PLUS_LUT, r3, c3, 3)


def check_constraints(plan: ComputePlan, profile: HardwareProfile, costs: CostTable) -> tuple[bool, bool]:
    """(DSP constraint holds, LUT constraint holds) for ``plan``."""
    impl = plan.strategy.impl
    dsp_ok = plan.n_dsp * costs.dsp_per_mult(plan.mode, impl) <= Fraction(profile.dsp_budget) + Fraction(_EPS)
    lut_used = plan.n_lut * costs[plan.mode, "lut"].c_lut + plan.n_dsp * costs[plan.mode, impl].c_lut
    return bool(dsp_ok), lut_used <= profile.lut_budget + 1e-6


def resource_report(plan: ComputePlan | None, profile: HardwareProfile, costs: CostTable) -> dict:
    if plan is None or plan.n_tot == 0:
        return {"dsp_blocks": 0, "dsp_util": 0.0, "lut_used": 0.0, "lut_util": 0.0}
    impl = plan.strategy.impl
    lut_used = plan.n_lut * costs[plan.mode, "lut"].c_lut + plan.n_dsp * costs[plan.mode, impl].c_lut
    return {
        "dsp_blocks": plan.dsp_blocks,
        # fractional DSP accounting, as in the DSP budget constraint
        "dsp_util": float(plan.n_dsp * costs.dsp_per_mult(plan.mode, impl) / profile.s_dsp),
        "lut_used": lut_used,
        "lut_util": lut_used / profile.s_lut,
    }


# -- latency ----------------------------------------------------------------

@dataclass(frozen=True)
class LayerShape:
    """``n_h`` independent GEMMs, each with ``m`` outputs and ``n / n_h`` inputs over ``f`` tokens.

    ``mixed_ratio`` is the share of 8-bit weight rows; each such row costs two
    4-bit multiplier passes.
    """

    m: int
    n: int
    f: int
    n_h: int = 1
    mixed_ratio: float = 0.0
    name: str = ""

    def __post_init__(self):
        if min(self.m, self.n, self.f, self.n_h) < 1:
            raise ValueError(f"layer dims must be positive: {self}")
        if self.n % self.n_h:
            raise ValueError(f"input channels {self.n} not divisible by {self.n_h} heads")

    @property
    def n_per_head(self) -> int:
        return self.n // self.n_h

    @property
    def macs(self) -> int:
        return self.m * self.n * self.f


@dataclass(frozen=True)
class TileConfig:
    t_n: int
    t_m: int
    p_f: int

    def check(self, shape: LayerShape) -> None:
        if not (1 <= self.t_n <= shape.n_per_head and 1 <= self.t_m <= shape.m and 1 <= self.p_f <= shape.f):
            raise ValueError(f"tile {self} does not fit layer {shape}")

    def clipped(self, shape: LayerShape) -> "TileConfig":
        return TileConfig(min(self.t_n, shape.n_per_head), min(self.t_m, shape.m), min(self.p_f, shape.f))


class TileCycles(NamedTuple):
    l_in: int
    l_wgt: int
    l_out: int
    l_cmpt: int


def _cdiv(a, b) -> int:
    return -(-a // b)


def _work_factor(ratio: float) -> Fraction:
    return 1 + Fraction(ratio).limit_denominator(10 ** 6)


def tile_cycles(shape: LayerShape, tile: TileConfig, profile: HardwareProfile, plan: ComputePlan) -> TileCycles:
    f = shape.f
    l_in = _cdiv(tile.t_n, profile.d_act) * _cdiv(f, profile.axi_in)
    l_wgt = _cdiv(tile.t_n, profile.d_wgt) * _cdiv(tile.t_m, profile.axi_wgt)
    l_out = _cdiv(tile.t_m, profile.d_act) * _cdiv(f, profile.axi_out)
    work = tile.t_n * tile.t_m * f * _work_factor(shape.mixed_ratio)
    l_cmpt = max(_cdiv(f, tile.p_f), math.ceil(work / plan.n_tot))
    return TileCycles(l_in, l_wgt, l_out, l_cmpt)


def layer_cycles(shape: LayerShape, tile: TileConfig, profile: HardwareProfile, plan: ComputePlan) -> int:
    tile.check(shape)
    c = tile_cycles(shape, tile, profile, plan)
    l1 = max(c.l_in, c.l_wgt, c.l_cmpt)
    l2 = max(l1 * _cdiv(shape.n_per_head, tile.t_n) + c.l_cmpt, c.l_out)
    per_head = _cdiv(shape.m, tile.t_m) * l2 + c.l_out
    return shape.n_h * per_head


def _grid(dim: int) -> list[int]:
    vals = {1 << k for k in range(dim.bit_length()) if 1 << k <= dim}
    vals.add(dim)
    return sorted(vals)


@lru_cache(maxsize=65536)
def _auto_tile(shape: LayerShape, profile: HardwareProfile, plan: ComputePlan) -> tuple[TileConfig, int]:
    best = None
    for t_n, t_m, p_f in itertools.product(_grid(shape.n_per_head), _grid(shape.m), _grid(shape.f)):
        tile = TileConfig(t_n, t_m, p_f)
        cyc = layer_cycles(shape, tile, profile, plan)
        key = (cyc, t_n * t_m, p_f, t_n)
        if best is None or key < best[0]:
            best = (key, tile, cyc)
    return best[1], best[2]


def auto_tile(shape: LayerShape, profile: HardwareProfile, plan: ComputePlan) -> TileConfig:
    """Grid search over power-of-two tiles (plus the full dimension) minimising layer cycles.

    Ties go to the smaller tile footprint.
    """
    return _auto_tile(shape, profile, plan)[0]


def expand_layers(config: SubnetConfig, geo: ModelGeometry) -> list[LayerShape]:
    """GEMM layers of a subnet, in execution order.

    Attention score and attention-value products run per head with 6-bit
    operands on both sides (no 8-bit rows). Embedding and classifier are
    fully 8-bit.
    """
    f, dh = geo.tokens, geo.head_dim
    e = config.embed_dim
    layers = [LayerShape(e, geo.token_dim, f, 1, 1.0, "patch_embed")]
    for i in range(config.depth):
        h, rho, m = config.hidden_dims[i], config.mixed_ratios[i], config.mlp_dim(i)
        heads = h // dh
        layers += [
            LayerShape(3 * h, e, f, 1, rho, f"b{i}.qkv"),
            LayerShape(f, h, f, heads, 0.0, f"b{i}.attn_score"),
            LayerShape(dh, f * heads, f, heads, 0.0, f"b{i}.attn_value"),
            LayerShape(e, h, f, 1, rho, f"b{i}.proj"),
            LayerShape(m, e, f, 1, rho, f"b{i}.mlp1"),
            LayerShape(e, m, f, 1, rho, f"b{i}.mlp2"),
        ]
    layers.append(LayerShape(geo.num_classes, e, 1, 1, 1.0, "head"))
    return layers


@dataclass
class LayerReport:
    name: str
    shape: LayerShape
    tile: TileConfig
    cycles: TileCycles
    total: int

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "m": self.shape.m, "n": self.shape.n, "f": self.shape.f, "n_h": self.shape.n_h,
            "mixed_ratio": self.shape.mixed_ratio,
            "tile": asdict(self.tile),
            "l_in": self.cycles.l_in, "l_wgt": self.cycles.l_wgt,
            "l_out": self.cycles.l_out, "l_cmpt": self.cycles.l_cmpt,
            "l_tot": self.total,
        }


@dataclass
class FpsEstimate:
    fps: float
    total_cycles: int
    layers: list[LayerReport]
    plan: ComputePlan

    @property
    def per_layer_cycles(self) -> list[int]:
        return [r.total for r in self.layers]


def estimate_layers(layers: list[LayerShape], profile: HardwareProfile, plan: ComputePlan,
                    tiles=None) -> FpsEstimate:
    """``tiles``: None (auto-tune), one TileConfig for every layer (clipped), or a name -> TileConfig dict."""
    if not layers:
        raise ValueError("model has no layers to estimate")
    reports = []
    for shape in layers:
        if tiles is None:
            tile = auto_tile(shape, profile, plan)
        elif isinstance(tiles, TileConfig):
            tile = tiles.clipped(shape)
        else:
            tile = tiles[shape.name]
        reports.append(LayerReport(shape.name, shape, tile, tile_cycles(shape, tile, profile, plan),
                                   layer_cycles(shape, tile, profile, plan)))
    total = sum(r.total for r in reports)
    return FpsEstimate(profile.freq_hz / total, total, reports, plan)


def estimate_fps(model: SubnetConfig, profile: HardwareProfile, costs: CostTable, tiles=None,
                 geo: ModelGeometry | None = None, mode: str = "W4A6", rule: str = "verbatim") -> FpsEstimate:
    plan = select_compute_strategy(profile, costs, mode, rule)
    return estimate_layers(expand_layers(model, geo or ModelGeometry()), profile, plan, tiles)


def model_stats(config: SubnetConfig, geo: ModelGeometry, act_bits: int = 6) -> dict:
    """Parameter count, code bytes and BOPs summed layer by layer."""
    params = 0
    size = 0.0
    total_bops = 0.0
    macs = 0
    for shape in expand_layers(config, geo):
        if shape.name.endswith(("attn_score", "attn_value")):
            # activation x activation: no stored weights, both operands act_bits wide
            macs += shape.macs
            total_bops += shape.macs * act_bits * act_bits
            continue
        w = shape.m * shape.n
        params += w
        size += model_size_bytes(w, shape.mixed_ratio)
        macs += shape.macs
        total_bops += bops(shape.macs, shape.mixed_ratio, act_bits)
    return {"params": params, "model_size_bytes": size, "macs": macs, "bops": total_bops}
