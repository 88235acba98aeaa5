"""Command-line entry point.

Every command writes a run manifest (inputs with sha256 digests, seeds,
version, timestamp, outputs with digests). Result files themselves carry no
timestamps, so identical seeds give byte-identical results.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__, dsp, qvt, vit
from .dataset import SyntheticDataset
from .evo import ConstraintTooTight, EvoParams, HwConstraint, evolve
from .hw import (CostTable, HardwareProfile, LayerShape, TileConfig, _read_json, estimate_layers,
                 expand_layers, model_stats, resource_report, select_compute_strategy)
from .quant import bops, leading_tags, model_size_bytes, quantize_rows, tags_from_strings
from .space import ModelGeometry, SearchSpace, SubnetConfig, largest_subnet
from .supernet import CHECKPOINT_MANIFEST, Supernet
from .train import TrainConfig, subnet_accuracy, teacher_config, train_supernet, train_teacher

log = logging.getLogger("rowmix")

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
TEACHER_MANIFEST = "teacher.json"
RUN_MANIFEST = "run_manifest.json"


class CliError(Exception):
    pass


# -- helpers ----------------------------------------------------------------

def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _digests(paths) -> dict[str, str]:
    out = {}
    for p in paths:
        p = Path(p)
        files = sorted(q for q in p.rglob("*") if q.is_file() and q.name != RUN_MANIFEST) if p.is_dir() else [p]
        for f in files:
            out[str(f)] = _sha256(f)
    return out


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _write_json(path: Path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(_dump_json(obj))
    return path


class Run:
    """Collects what a command read and wrote, then writes the manifest."""

    def __init__(self, args):
        self.args = args
        self.inputs: list[Path] = []
        self.outputs: list[Path] = []
        self.seeds: dict[str, int] = {}

    def read(self, path) -> Path:
        p = Path(path)
        if not p.exists():
            raise CliError(f"input not found: {p}")
        self.inputs.append(p)
        return p

    def wrote(self, path) -> Path:
        self.outputs.append(Path(path))
        return Path(path)

    def manifest_path(self) -> Path:
        if self.args.manifest:
            return Path(self.args.manifest)
        out = getattr(self.args, "out", None)
        if out:
            out = Path(out)
            return out / RUN_MANIFEST if out.is_dir() else out.with_name(out.name + ".manifest.json")
        return Path(f"rowmix-{self.args.command}.manifest.json")

    def finish(self) -> Path:
        manifest = {
            "command": self.args.command,
            "argv": self.args.argv,
            "inputs": _digests(self.inputs),
            "seeds": self.seeds,
            "version": __version__,
            "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(),
            "outputs": _digests(self.outputs),
        }
        return _write_json(self.manifest_path(), manifest)


def _load_costs(run: Run, path) -> CostTable:
    if path is None:
        return CostTable.default()
    return CostTable.load(run.read(path))


def _load_space(run: Run, path) -> SearchSpace:
    p = run.read(path)
    return SearchSpace.from_dict(_read_json(p))


def _dataset(space: SearchSpace, seed: int, num_samples: int, sigma: float) -> SyntheticDataset:
    geo = space.geometry
    return SyntheticDataset.generate(seed, num_samples, geo.tokens, geo.token_dim, geo.num_classes, sigma)


def _parse_tiles(obj) -> TileConfig | dict[str, TileConfig]:
    if {"t_n", "t_m", "p_f"} <= set(obj):
        return TileConfig(int(obj["t_n"]), int(obj["t_m"]), int(obj["p_f"]))
    return {k: TileConfig(int(v["t_n"]), int(v["t_m"]), int(v["p_f"])) for k, v in obj.items()}


def _subnet_from_json(obj: dict) -> tuple[SubnetConfig, ModelGeometry | None]:
    geo = ModelGeometry(**obj["geometry"]) if "geometry" in obj else None
    body = obj.get("subnet", obj.get("config", obj))
    return SubnetConfig.from_dict(body), geo


def _layer_stats(layers: list[LayerShape], act_bits: int = 6) -> dict:
    params, size, total_bops, macs = 0, 0.0, 0.0, 0
    for s in layers:
        params += s.m * s.n
        size += model_size_bytes(s.m * s.n, s.mixed_ratio)
        macs += s.macs
        total_bops += bops(s.macs, s.mixed_ratio, act_bits)
    return {"params": params, "model_size_bytes": size, "macs": macs, "bops": total_bops}


def _estimate_report(est, profile, costs, stats) -> dict:
    return {
        "fps": est.fps,
        "total_cycles": est.total_cycles,
        "layers": [r.to_dict() for r in est.layers],
        "plan": est.plan.to_dict(),
        "resources": resource_report(est.plan, profile, costs),
        **stats,
    }


def _save_params(params: vit.ViTParams, out: Path) -> dict[str, str]:
    files = {}
    for name, arr in params.named().items():
        files[name] = qvt.save(out / f"{name}.qvt", arr, "f64").name
    return files


def _load_teacher(run: Run, path) -> tuple[vit.ViTParams, dict]:
    d = Path(path)
    d = d.parent if d.is_file() else d
    meta = json.loads(run.read(d / TEACHER_MANIFEST).read_text())
    mc = meta["model"]
    cfg = vit.ToyModelConfig(**{**mc, "hidden_dims": tuple(mc["hidden_dims"]),
                                "expansion_ratios": tuple(mc["expansion_ratios"]),
                                "mixed_ratios": tuple(mc["mixed_ratios"])})
    params = vit.init_params(cfg, 0)
    named = params.named()
    for name, fname in meta["files"].items():
        named[name][...] = qvt.load(run.read(d / fname)).data
    return params, meta


# -- commands ---------------------------------------------------------------

def cmd_pack_verify(args, run: Run) -> int:
    impl = None if args.impl == "auto" else args.impl
    lines: list[list] = []
    if args.mode in ("all", "pack"):
        if args.corrupt_layout:
            # operand offsets that disagree with the lane layout: must be caught
            p3 = dsp.sweep_pack3(True, (0, 10, 21), impl=impl)
        else:
            p3 = dsp.sweep_pack3(True, impl=impl)
        lines.append([p3, dsp.sweep_pack4(True, impl=impl)])
        if not args.signed_only:
            u3, u4 = dsp.sweep_pack3(False, impl=impl), dsp.sweep_pack4(False, impl=impl)
            u3.name, u4.name = "unsigned-lane pack3", "unsigned-lane pack4"
            lines.append([u3, u4])
    if args.mode in ("all", "w8"):
        lines.append([dsp.sweep_w8(impl=impl)])
    reports = [r for line in lines for r in line]
    for line in lines:
        print(", ".join(f"{r.cases} {r.name} cases " + ("OK" if r.ok else f"FAILED ({r.failures} mismatches)")
                        for r in line))
    for r in reports:
        if not r.ok:
            print(f"first failing case for {r.name}: {r.first_failure}", file=sys.stderr)
    if args.out:
        _write_json(run.wrote(args.out), {"sweeps": [asdict(r) for r in reports]})
    return 0 if all(r.ok for r in reports) else 1


def cmd_estimate(args, run: Run) -> int:
    cfg = _read_json(run.read(args.config))
    profile = HardwareProfile.from_dict(_read_json(run.read(args.hw_profile)))
    costs = _load_costs(run, args.costs)
    plan = select_compute_strategy(profile, costs, args.mode, args.strategy_rule)
    if "layers" in cfg:
        if not cfg["layers"]:
            raise CliError("model has no layers to estimate")
        layers = [LayerShape(int(l["m"]), int(l["n"]), int(l["f"]), int(l.get("n_h", 1)),
                             float(l.get("mixed_ratio", 0.0)), l.get("name", f"layer{i}"))
                  for i, l in enumerate(cfg["layers"])]
        stats = _layer_stats(layers, args.act_bits)
    else:
        subnet, geo = _subnet_from_json(cfg)
        geo = geo or ModelGeometry()
        layers = expand_layers(subnet, geo)
        stats = model_stats(subnet, geo, args.act_bits)
    if args.auto_tile:
        tiles = None
    elif args.tiles:
        tiles = _parse_tiles(_read_json(run.read(args.tiles)))
    elif "tiles" in cfg:
        tiles = _parse_tiles(cfg["tiles"])
    else:
        tiles = None
    est = estimate_layers(layers, profile, plan, tiles)
    text = _dump_json(_estimate_report(est, profile, costs, stats))
    if args.out:
        run.wrote(args.out)
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def _data_args(args, space, run: Run) -> SyntheticDataset:
    run.seeds["data_seed"] = args.data_seed
    return _dataset(space, args.data_seed, args.num_samples, args.sigma)


def cmd_train_teacher(args, run: Run) -> int:
    space = _load_space(run, args.space)
    run.seeds["seed"] = args.seed
    data = _data_args(args, space, run)
    mc = teacher_config(space.geometry, args.embed_dim, args.depth)
    tc = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, seed=args.seed)
    params, hist = train_teacher(data, mc, tc)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = _save_params(params, out)
    logits = vit.predict(params, data.x_train, vit.QuantMode.off())
    qvt.save(out / "teacher_logits.qvt", logits, "f64")
    meta = {
        "model": asdict(mc),
        "files": files,
        "logits": "teacher_logits.qvt",
        "data": {"seed": args.data_seed, "num_samples": args.num_samples, "sigma": args.sigma},
        "train": asdict(tc),
        "val_acc": hist.val_acc[-1] if hist.val_acc else None,
    }
    _write_json(out / TEACHER_MANIFEST, meta)
    run.wrote(out)
    print(f"teacher val acc {meta['val_acc']:.4f}")
    return 0


def cmd_train_supernet(args, run: Run) -> int:
    space = _load_space(run, args.space)
    run.seeds["seed"] = args.seed
    data = _data_args(args, space, run)
    teacher_logits = None
    if args.kd_teacher:
        p = Path(args.kd_teacher)
        if p.is_dir() or p.name == TEACHER_MANIFEST:
            _, meta = _load_teacher(run, p)
            tdata = meta["data"]
            if (tdata["seed"], tdata["num_samples"], tdata["sigma"]) != (args.data_seed, args.num_samples, args.sigma):
                raise CliError("teacher logits were produced on a different dataset")
            p = (p if p.is_dir() else p.parent) / meta["logits"]
        teacher_logits = qvt.load(run.read(p)).data
        if teacher_logits.shape != (len(data.x_train), space.geometry.num_classes):
            raise CliError(f"teacher logits shaped {teacher_logits.shape} do not match the training split")
    alpha = args.alpha if teacher_logits is not None else 0.0
    tc = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, seed=args.seed,
                     alpha=alpha, tau=args.tau)
    sn = Supernet.init(space, args.seed, args.sls_init)
    hist = train_supernet(sn, data, tc, teacher_logits, eval_every=args.eval_every)
    largest = largest_subnet(space)
    acc = subnet_accuracy(sn, largest, data.x_val, data.y_val)
    out = Path(args.out)
    meta = {
        "data": {"seed": args.data_seed, "num_samples": args.num_samples, "sigma": args.sigma},
        "train": asdict(tc),
        "sls_init": args.sls_init,
        "largest_subnet": largest.to_dict(),
        "largest_val_acc": acc,
        "final_loss": hist.losses[-1] if hist.losses else None,
    }
    sn.save(out, meta)
    run.wrote(out)
    print(f"largest subnet one-shot val acc {acc:.4f}")
    return 0


def _load_supernet(run: Run, path) -> tuple[Supernet, dict]:
    d = Path(path)
    d = d.parent if d.is_file() else d
    meta = json.loads(run.read(d / CHECKPOINT_MANIFEST).read_text())
    for entry in meta["files"].values():
        run.read(d / entry["file"])
    return Supernet.load(d), meta["meta"]


def cmd_search(args, run: Run) -> int:
    space = _load_space(run, args.space) if args.space else None
    sn, meta = _load_supernet(run, args.supernet)
    if space is not None and space.to_dict() != sn.space.to_dict():
        raise CliError("--space does not match the search space the supernet was trained on")
    space = sn.space
    data_cfg = meta.get("data", {})
    data_seed = args.data_seed if args.data_seed is not None else data_cfg.get("seed")
    if data_seed is None:
        raise CliError("no data seed recorded in the supernet; pass --data-seed")
    data = _dataset(space, data_seed, data_cfg.get("num_samples", args.num_samples), data_cfg.get("sigma", args.sigma))
    run.seeds.update(seed=args.seed, data_seed=data_seed)
    profile = HardwareProfile.from_dict(_read_json(run.read(args.hw_profile)))
    costs = _load_costs(run, args.costs)
    hc = HwConstraint(profile, costs, args.target_fps, space.geometry, mode=args.mode, rule=args.strategy_rule)
    params = EvoParams(args.population, args.generations, args.top_k, args.p_d, args.p_m, args.target_fps, args.seed)

    def fitness(c: SubnetConfig) -> float:
        return subnet_accuracy(sn, c, data.x_val, data.y_val)

    res = evolve(space, params, fitness, hc.check, jobs=args.jobs)
    ranked = []
    for cand in res.population:
        est = hc.estimate(cand.config)
        ranked.append({
            "config": cand.config.to_dict(),
            "fitness": cand.fitness,
            "fps": cand.fps,
            "feasible": cand.feasible,
            "per_layer_cycles": est.per_layer_cycles,
            "total_cycles": est.total_cycles,
            **model_stats(cand.config, space.geometry),
        })
    result = {
        "target_fps": args.target_fps,
        "evo": asdict(params),
        "plan": hc.plan.to_dict(),
        "best_per_generation": res.best_per_generation,
        "evaluations": res.evaluations,
        "rejected_infeasible": res.rejected_infeasible,
        "ranked": ranked,
    }
    _write_json(run.wrote(args.out), result)
    print(f"best fitness {ranked[0]['fitness']:.4f} at {ranked[0]['fps']:.1f} FPS")
    return 0


def cmd_quantize(args, run: Run) -> int:
    t = qvt.load(run.read(args.weights))
    w = t.data
    if w.ndim != 2:
        raise CliError("quantize expects a 2-D weight matrix")
    if args.tags:
        tags = tags_from_strings(_read_json(run.read(args.tags))["tags"])
    elif t.tags:
        tags = tags_from_strings(t.tags)
    else:
        tags = leading_tags(w.shape[0], args.ratio)
    q = quantize_rows(w, tags)
    qvt.save_quantized(run.wrote(args.out), q)
    print(f"{q.rows}x{q.cols} matrix, 8-bit row ratio {q.mixed_ratio():.4f}")
    return 0


def cmd_export(args, run: Run) -> int:
    sn, _ = _load_supernet(run, args.supernet)
    if args.results:
        ranked = _read_json(run.read(args.results))["ranked"]
        if not 0 <= args.rank < len(ranked):
            raise CliError(f"rank {args.rank} outside the {len(ranked)} search results")
        config = SubnetConfig.from_dict(ranked[args.rank]["config"])
    elif args.config:
        config, _ = _subnet_from_json(_read_json(run.read(args.config)))
    else:
        raise CliError("export needs --config or --results")
    params = sn.subnet_params(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    weights = {}
    for name, lin in params.linears():
        q = quantize_rows(lin.weight, lin.bits)
        weights[name] = qvt.save_quantized(out / f"{name}.qvt", q).name
    floats = {}
    for name, arr in params.named().items():
        if not name.endswith(".weight"):
            floats[name] = qvt.save(out / f"{name}.qvt", arr, "f64").name
    _write_json(out / "subnet.json", {"config": config.to_dict(), "geometry": asdict(sn.space.geometry),
                                      "quantized": weights, "float": floats})
    if args.hw_profile:
        profile = HardwareProfile.from_dict(_read_json(run.read(args.hw_profile)))
        costs = _load_costs(run, args.costs)
        plan = select_compute_strategy(profile, costs, args.mode, args.strategy_rule)
        est = estimate_layers(expand_layers(config, sn.space.geometry), profile, plan)
        _write_json(out / "estimate.json",
                    _estimate_report(est, profile, costs, model_stats(config, sn.space.geometry)))
    run.wrote(out)
    print(f"exported {len(weights)} quantized matrices to {out}")
    return 0


# -- parser -----------------------------------------------------------------

def _add_data(p, seed_required=True):
    p.add_argument("--data-seed", type=int, required=seed_required, default=None)
    p.add_argument("--num-samples", type=int, default=1000)
    p.add_argument("--sigma", type=float, default=1.0)


def _add_hw(p, profile_required=True):
    p.add_argument("--hw-profile", required=profile_required)
    p.add_argument("--costs", default=None, help="cost table JSON (default: built-in table)")
    p.add_argument("--mode", default="W4A6", choices=["W4A6", "W8A6", "W8A6-direct"])
    p.add_argument("--strategy-rule", default="verbatim", choices=["verbatim", "derived"])


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rowmix", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--manifest", default=None, help="where to write the run manifest")
    common.add_argument("--jobs", type=int, default=1, help="worker cap for parallel evaluation")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pack-verify", parents=[common], help="exhaustive DSP packing checks")
    p.add_argument("--mode", choices=["all", "pack", "w8"], default="pack")
    p.add_argument("--impl", choices=["auto", "numba", "numpy"], default="auto")
    p.add_argument("--signed-only", action="store_true", help="skip the unsigned-lane sweeps")
    p.add_argument("--corrupt-layout", action="store_true", help=argparse.SUPPRESS)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_pack_verify)

    p = sub.add_parser("estimate", parents=[common], help="latency/FPS/resource report")
    p.add_argument("--config", required=True, help="subnet config or layer-list JSON")
    _add_hw(p)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--tiles", default=None)
    g.add_argument("--auto-tile", action="store_true")
    p.add_argument("--act-bits", type=int, default=6)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("train-teacher", parents=[common], help="train the float teacher and export its logits")
    p.add_argument("--space", required=True)
    p.add_argument("--seed", type=int, required=True)
    _add_data(p)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--embed-dim", type=int, default=48)
    p.add_argument("--depth", type=int, default=2)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("train-supernet", parents=[common], help="one-subnet-per-step supernet training")
    p.add_argument("--space", required=True)
    p.add_argument("--seed", type=int, required=True)
    _add_data(p)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--sls-init", type=float, default=0.5)
    p.add_argument("--kd-teacher", default=None, help="teacher directory or logits QVT")
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--tau", type=float, default=2.0)
    p.add_argument("--eval-every", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_supernet)

    p = sub.add_parser("search", parents=[common], help="hardware-constrained evolution search")
    p.add_argument("--space", default=None, help="optional; must match the supernet's space")
    p.add_argument("--supernet", required=True)
    _add_hw(p)
    p.add_argument("--target-fps", type=float, required=True)
    p.add_argument("--seed", type=int, required=True)
    _add_data(p, seed_required=False)
    p.add_argument("--population", type=int, default=50)
    p.add_argument("--generations", type=int, default=20)
    p.add_argument("--top-k", type=int, default=10)
    p.add_argument("--p-d", type=float, default=0.2)
    p.add_argument("--p-m", type=float, default=0.4)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("quantize", parents=[common], help="row-wise 4/8-bit quantization of a QVT matrix")
    p.add_argument("--weights", required=True)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--ratio", type=float, default=0.0, help="share of leading rows kept at 8 bits")
    g.add_argument("--tags", default=None, help='JSON file {"tags": ["W8", "W4", ...]}')
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("export", parents=[common], help="extract a subnet's quantized weights")
    p.add_argument("--supernet", required=True)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--config", default=None)
    g.add_argument("--results", default=None, help="search results JSON")
    p.add_argument("--rank", type=int, default=0)
    _add_hw(p, profile_required=False)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)
    return ap


def _setup_logging() -> None:
    level = os.environ.get("QUASAR_LOG", "error").lower()
    if level not in LOG_LEVELS:
        raise CliError(f"QUASAR_LOG must be one of {sorted(LOG_LEVELS)}, got {level!r}")
    logging.basicConfig(level=LOG_LEVELS[level], format="%(levelname)s %(name)s: %(message)s", force=True)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    args.argv = argv
    try:
        _setup_logging()
        run = Run(args)
        code = args.func(args, run)
        run.finish()
        return code
    except (CliError, ConstraintTooTight, ValueError, OSError, KeyError, FloatingPointError) as exc:
        print(f"rowmix {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
