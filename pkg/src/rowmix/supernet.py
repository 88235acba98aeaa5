"""Mixed-precision weight entanglement.

Each searchable linear layer stores one latent matrix with ``H + D_max`` rows,
where ``H = rho_max * D_max``. Rows ``[0, H)`` are permanently 8-bit and the
rest are 4-bit. A subnet layer with output width ``d`` and 8-bit ratio ``rho``
reads the contiguous window starting at ``H - rho*d``, so exactly ``rho*d`` of
its rows fall in the 8-bit zone. Windows are numpy views: gradient steps on a
subnet land directly in the shared storage.

Input columns follow the producer of that input: readers of the residual
stream take the prefix ``[0, E)``, ``proj`` takes the window of ``v`` and
``mlp2`` takes the window of ``mlp1``.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import qvt
from .quant import PrecisionTag
from .space import SearchSpace, SubnetConfig, _int_product
from .vit import Block, Linear, ViTParams

LINEARS = ("q", "k", "v", "proj", "mlp1", "mlp2")
CHECKPOINT_MANIFEST = "supernet.json"


@dataclass(frozen=True)
class WindowSelection:
    offset: int
    length: int
    achieved_ratio: float

    @property
    def rows(self) -> slice:
        return slice(self.offset, self.offset + self.length)


def select_window(zone_boundary: int, d_max: int, d: int, ratio: float) -> WindowSelection:
    if not 0 < d <= d_max:
        raise ValueError(f"window length {d} outside (0, {d_max}]")
    n8 = _int_product(d, ratio, "window")
    if n8 > zone_boundary:
        raise ValueError(f"infeasible ratio/dim pair: {n8} 8-bit rows exceed the {zone_boundary}-row zone")
    return WindowSelection(zone_boundary - n8, d, n8 / d)


class EntangledLayer:
    """Latent weights of one searchable linear layer plus its fixed zone tags."""

    def __init__(self, latent: np.ndarray, zone_boundary: int, sls_super: np.ndarray | None = None):
        latent = np.ascontiguousarray(latent, dtype=np.float64)
        rows = latent.shape[0]
        if not 0 <= zone_boundary <= rows:
            raise ValueError("zone boundary outside the latent matrix")
        if sls_super is not None and sls_super.shape != (rows,):
            raise ValueError("sls_super must have one entry per latent row")
        self.latent = latent
        self.zone_boundary = zone_boundary
        self.d_max = rows - zone_boundary
        self.sls_super = sls_super
        tags = np.full(rows, int(PrecisionTag.W4), dtype=np.int8)
        tags[:zone_boundary] = int(PrecisionTag.W8)
        tags.setflags(write=False)
        self._tags = tags

    @property
    def tags(self) -> np.ndarray:
        return self._tags

    @property
    def super_rows(self) -> int:
        return self.latent.shape[0]

    @classmethod
    def init(cls, rng: np.random.Generator, d_max: int, in_max: int, max_ratio: float,
             sls_init: float | None = None, fan_in: int | None = None) -> "EntangledLayer":
        h = _int_product(d_max, max_ratio, "zone")
        w = rng.normal(0.0, 1.0 / np.sqrt(fan_in or in_max), size=(h + d_max, in_max))
        sls = None if sls_init is None else np.full(h + d_max, float(sls_init))
        return cls(w, h, sls)

    def window(self, d: int, ratio: float) -> WindowSelection:
        return select_window(self.zone_boundary, self.d_max, d, ratio)


def extract_window(layer: EntangledLayer, d: int, ratio: float, cols: slice | None = None):
    """Views of the selected rows (and columns), their tags and the SLS slice."""
    win = layer.window(d, ratio)
    cols = slice(None) if cols is None else cols
    w = layer.latent[win.rows, cols]
    sls = None if layer.sls_super is None else layer.sls_super[win.rows]
    return w, layer.tags[win.rows], sls


@dataclass
class SuperBlock:
    layers: dict[str, EntangledLayer]
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray


class Supernet:
    """Shared weights for every subnet of a search space."""

    def __init__(self, space: SearchSpace, embed: np.ndarray, blocks: list[SuperBlock],
                 head: np.ndarray, head_b: np.ndarray):
        self.space = space
        self.embed = embed
        self.blocks = blocks
        self.head = head
        self.head_b = head_b
        self._full_tags = {}

    @classmethod
    def init(cls, space: SearchSpace, seed, sls_init: float = 0.5) -> "Supernet":
        rng = np.random.default_rng(seed)
        geo = space.geometry
        e_max, h_max, m_max = max(space.embed_dims), max(space.hidden_dims), max(space.mlp_dims)
        rho = space.max_ratio
        blocks = []
        for _ in range(max(space.depths)):
            qkv = {nm: EntangledLayer.init(rng, h_max, e_max, rho) for nm in ("q", "k", "v")}
            v_rows = qkv["v"].super_rows
            mlp1 = EntangledLayer.init(rng, m_max, e_max, rho)
            layers = dict(qkv)
            layers["proj"] = EntangledLayer.init(rng, e_max, v_rows, rho, sls_init, fan_in=h_max)
            layers["mlp1"] = mlp1
            layers["mlp2"] = EntangledLayer.init(rng, e_max, mlp1.super_rows, rho, sls_init, fan_in=m_max)
            blocks.append(SuperBlock(layers, np.ones(e_max), np.zeros(e_max), np.ones(e_max), np.zeros(e_max)))
        embed = rng.normal(0.0, 1.0 / np.sqrt(geo.token_dim), size=(e_max, geo.token_dim))
        head = rng.normal(0.0, 1.0 / np.sqrt(e_max), size=(geo.num_classes, e_max))
        return cls(space, embed, blocks, head, np.zeros(geo.num_classes))

    def _w8(self, rows: int) -> np.ndarray:
        t = self._full_tags.get(rows)
        if t is None:
            t = np.full(rows, int(PrecisionTag.W8), dtype=np.int8)
            t.setflags(write=False)
            self._full_tags[rows] = t
        return t

    def windows(self, config: SubnetConfig) -> dict[str, tuple[slice, slice]]:
        """(row, column) slices into every storage array a subnet reads."""
        config.check_in(self.space)
        e = config.embed_dim
        pre = slice(0, e)
        out = {"embed": (pre, slice(None)), "head": (slice(None), pre), "head_b": (slice(None), slice(None))}
        for i in range(config.depth):
            blk = self.blocks[i]
            h, _, r = config.layer_genes(i)
            m = config.mlp_dim(i)
            lay = blk.layers
            rows = {nm: lay[nm].window(h, r).rows for nm in ("q", "k", "v")}
            rows["proj"] = lay["proj"].window(e, r).rows
            rows["mlp1"] = lay["mlp1"].window(m, r).rows
            rows["mlp2"] = lay["mlp2"].window(e, r).rows
            cols = {"q": pre, "k": pre, "v": pre, "proj": rows["v"], "mlp1": pre, "mlp2": rows["mlp1"]}
            for nm in LINEARS:
                out[f"blocks.{i}.{nm}"] = (rows[nm], cols[nm])
            out[f"blocks.{i}.sls_msa"] = (rows["proj"], slice(None))
            out[f"blocks.{i}.sls_mlp"] = (rows["mlp2"], slice(None))
            for nm in ("ln1_g", "ln1_b", "ln2_g", "ln2_b"):
                out[f"blocks.{i}.{nm}"] = (pre, slice(None))
        return out

    def subnet_params(self, config: SubnetConfig) -> ViTParams:
        """ViT parameters whose arrays alias the supernet storage."""
        win = self.windows(config)
        blocks = []
        for i in range(config.depth):
            sb = self.blocks[i]
            lin = {}
            for nm in LINEARS:
                r, c = win[f"blocks.{i}.{nm}"]
                layer = sb.layers[nm]
                lin[nm] = Linear(layer.latent[r, c], layer.tags[r])
            e = slice(0, config.embed_dim)
            blocks.append(Block(
                **lin,
                ln1_g=sb.ln1_g[e], ln1_b=sb.ln1_b[e], ln2_g=sb.ln2_g[e], ln2_b=sb.ln2_b[e],
                sls_msa=sb.layers["proj"].sls_super[win[f"blocks.{i}.sls_msa"][0]],
                sls_mlp=sb.layers["mlp2"].sls_super[win[f"blocks.{i}.sls_mlp"][0]],
            ))
        e = config.embed_dim
        return ViTParams(
            embed=Linear(self.embed[:e], self._w8(e)),
            blocks=blocks,
            head=Linear(self.head[:, :e], self._w8(self.head.shape[0])),
            head_b=self.head_b,
            head_dim=self.space.geometry.head_dim,
        )

    # -- flat views for snapshots and checkpoints ---------------------------

    def arrays(self) -> dict[str, np.ndarray]:
        out = {"embed": self.embed, "head": self.head, "head_b": self.head_b}
        for i, sb in enumerate(self.blocks):
            for nm, layer in sb.layers.items():
                out[f"blocks.{i}.{nm}"] = layer.latent
            out[f"blocks.{i}.sls_msa"] = sb.layers["proj"].sls_super
            out[f"blocks.{i}.sls_mlp"] = sb.layers["mlp2"].sls_super
            for nm in ("ln1_g", "ln1_b", "ln2_g", "ln2_b"):
                out[f"blocks.{i}.{nm}"] = getattr(sb, nm)
        return out

    def tags(self) -> dict[str, np.ndarray]:
        return {f"blocks.{i}.{nm}": layer.tags for i, sb in enumerate(self.blocks)
                for nm, layer in sb.layers.items()}

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.arrays().items()}

    def save(self, out_dir, meta: dict | None = None) -> Path:
        """One f64 QVT file per array plus a JSON manifest with content digests."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        tags = self.tags()
        files = {}
        for name, arr in self.arrays().items():
            t = None if name not in tags else [PrecisionTag(int(b)).name for b in tags[name]]
            path = qvt.save(out / f"{name}.qvt", arr, "f64", tags=t)
            files[name] = {"file": path.name, "sha256": hashlib.sha256(path.read_bytes()).hexdigest()}
        zones = {name: int(np.count_nonzero(t == int(PrecisionTag.W8))) for name, t in tags.items()}
        manifest = {"space": self.space.to_dict(), "files": files, "zones": zones, "meta": meta or {}}
        path = out / CHECKPOINT_MANIFEST
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, ckpt_dir) -> "Supernet":
        d = Path(ckpt_dir)
        if d.is_file():
            d = d.parent
        manifest = json.loads((d / CHECKPOINT_MANIFEST).read_text())
        space = SearchSpace.from_dict(manifest["space"])
        sn = cls.init(space, 0)
        arrays = sn.arrays()
        for name, entry in manifest["files"].items():
            raw = (d / entry["file"]).read_bytes()
            if hashlib.sha256(raw).hexdigest() != entry["sha256"]:
                raise ValueError(f"checkpoint file {entry['file']} does not match its manifest digest")
            t = qvt.loads(raw)
            if name not in arrays or arrays[name].shape != t.data.shape:
                raise ValueError(f"checkpoint array {name} does not fit the search space")
            arrays[name][...] = t.data
        for name, layer_tags in sn.tags().items():
            if manifest["zones"][name] != int(np.count_nonzero(layer_tags == int(PrecisionTag.W8))):
                raise ValueError(f"zone boundary of {name} differs from the checkpoint")
        return sn
