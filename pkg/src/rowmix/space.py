"""Search-space and subnet-configuration types shared by the supernet, the
hardware estimator and the evolution search."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class ModelGeometry:
    """Dimensions that are fixed across a search space."""

    tokens: int = 197
    token_dim: int = 768
    head_dim: int = 64
    num_classes: int = 1000


def _int_product(d: int, ratio: float, what: str) -> int:
    x = d * ratio
    if abs(x - round(x)) > 1e-9:
        raise ValueError(f"infeasible ratio/dim pair: {what} {d} x {ratio} is not integral")
    return int(round(x))


@dataclass(frozen=True)
class SearchSpace:
    embed_dims: tuple[int, ...]
    hidden_dims: tuple[int, ...]
    mixed_ratios: tuple[float, ...] = (0.0, 0.25, 0.5)
    expansion_ratios: tuple[float, ...] = (3.5, 4.0)
    depths: tuple[int, ...] = (12, 13, 14)
    geometry: ModelGeometry = field(default_factory=ModelGeometry)

    def __post_init__(self):
        for name in ("embed_dims", "hidden_dims", "mixed_ratios", "expansion_ratios", "depths"):
            vals = tuple(getattr(self, name))
            if not vals:
                raise ValueError(f"search space list {name!r} is empty")
            object.__setattr__(self, name, vals)
        if any(not 0.0 <= r <= 1.0 for r in self.mixed_ratios):
            raise ValueError("mixed ratios must lie in [0, 1]")
        if any(d < 1 for d in self.depths):
            raise ValueError("depths must be positive")
        hd = self.geometry.head_dim
        for h in self.hidden_dims:
            if h % hd:
                raise ValueError(f"hidden dim {h} is not a multiple of head_dim {hd}")
        # fail fast on any (dim, ratio) pair whose 8-bit row count is fractional
        for rho in self.mixed_ratios:
            for d in self.embed_dims + self.hidden_dims:
                _int_product(d, rho, "dim")
            for m in self.mlp_dims:
                _int_product(m, rho, "mlp dim")

    @property
    def mlp_dims(self) -> tuple[int, ...]:
        return tuple(sorted({_int_product(e, r, "embed x expansion")
                             for e in self.embed_dims for r in self.expansion_ratios}))

    @property
    def max_ratio(self) -> float:
        return max(self.mixed_ratios)

    def layer_choices(self) -> list[tuple[int, float, float]]:
        return [(h, e, r) for h in self.hidden_dims for e in self.expansion_ratios
                for r in self.mixed_ratios]

    def size(self) -> int:
        per_layer = len(self.layer_choices())
        return len(self.embed_dims) * sum(per_layer ** d for d in self.depths)

    def to_dict(self) -> dict:
        return {
            "embed_dims": list(self.embed_dims),
            "hidden_dims": list(self.hidden_dims),
            "mixed_ratios": list(self.mixed_ratios),
            "expansion_ratios": list(self.expansion_ratios),
            "depths": list(self.depths),
            "geometry": asdict(self.geometry),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SearchSpace":
        geo = ModelGeometry(**d.get("geometry", {}))
        return cls(tuple(int(x) for x in d["embed_dims"]), tuple(int(x) for x in d["hidden_dims"]),
                   tuple(float(x) for x in d["mixed_ratios"]),
                   tuple(float(x) for x in d["expansion_ratios"]),
                   tuple(int(x) for x in d["depths"]), geo)

    @classmethod
    def load(cls, path) -> "SearchSpace":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class SubnetConfig:
    embed_dim: int
    depth: int
    hidden_dims: tuple[int, ...]
    expansion_ratios: tuple[float, ...]
    mixed_ratios: tuple[float, ...]

    def __post_init__(self):
        for name in ("hidden_dims", "expansion_ratios", "mixed_ratios"):
            vals = tuple(getattr(self, name))
            if len(vals) != self.depth:
                raise ValueError(f"{name} has {len(vals)} entries for depth {self.depth}")
            object.__setattr__(self, name, vals)
        if self.depth < 1:
            raise ValueError("a subnet needs at least one block")

    def mlp_dim(self, i: int) -> int:
        return _int_product(self.embed_dim, self.expansion_ratios[i], "embed x expansion")

    def layer_genes(self, i: int) -> tuple[int, float, float]:
        return self.hidden_dims[i], self.expansion_ratios[i], self.mixed_ratios[i]

    def key(self) -> tuple:
        return (self.embed_dim, self.depth, self.hidden_dims, self.expansion_ratios, self.mixed_ratios)

    def check_in(self, space: SearchSpace) -> None:
        if self.embed_dim not in space.embed_dims or self.depth not in space.depths:
            raise ValueError(f"config {self} is outside the search space")
        for h, e, r in zip(self.hidden_dims, self.expansion_ratios, self.mixed_ratios):
            if h not in space.hidden_dims or e not in space.expansion_ratios or r not in space.mixed_ratios:
                raise ValueError(f"config {self} is outside the search space")

    def param_count(self, geo: ModelGeometry) -> int:
        """Weight parameters of every linear layer (embedding and classifier included)."""
        e = self.embed_dim
        n = geo.token_dim * e + e * geo.num_classes
        for i in range(self.depth):
            h, m = self.hidden_dims[i], self.mlp_dim(i)
            n += 3 * h * e + e * h + 2 * e * m
        return n

    def to_dict(self) -> dict:
        return {
            "embed_dim": self.embed_dim,
            "depth": self.depth,
            "hidden_dims": list(self.hidden_dims),
            "expansion_ratios": list(self.expansion_ratios),
            "mixed_ratios": list(self.mixed_ratios),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SubnetConfig":
        return cls(int(d["embed_dim"]), int(d["depth"]), tuple(int(x) for x in d["hidden_dims"]),
                   tuple(float(x) for x in d["expansion_ratios"]),
                   tuple(float(x) for x in d["mixed_ratios"]))


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def sample_subnet(space: SearchSpace, seed) -> SubnetConfig:
    """Uniform independent draw per dimension and per layer."""
    rng = _rng(seed)
    embed = space.embed_dims[rng.integers(len(space.embed_dims))]
    depth = space.depths[rng.integers(len(space.depths))]
    hid, exp, rat = [], [], []
    for _ in range(depth):
        hid.append(space.hidden_dims[rng.integers(len(space.hidden_dims))])
        exp.append(space.expansion_ratios[rng.integers(len(space.expansion_ratios))])
        rat.append(space.mixed_ratios[rng.integers(len(space.mixed_ratios))])
    return SubnetConfig(embed, depth, tuple(hid), tuple(exp), tuple(rat))


def largest_subnet(space: SearchSpace, ratio: float | None = None) -> SubnetConfig:
    d = max(space.depths)
    r = space.max_ratio if ratio is None else ratio
    return SubnetConfig(max(space.embed_dims), d, (max(space.hidden_dims),) * d,
                        (max(space.expansion_ratios),) * d, (r,) * d)


def enumerate_space(space: SearchSpace):
    """Every config in the space (only sensible for toy spaces)."""
    import itertools

    choices = space.layer_choices()
    for e in space.embed_dims:
        for d in space.depths:
            for layers in itertools.product(choices, repeat=d):
                h, x, r = zip(*layers)
                yield SubnetConfig(e, d, h, x, r)
