"""Command-line entry point: prune, pack, unpack, run, schedule, reproduce, gen-data.

Exit codes: 0 ok, 1 usage, 2 data error, 3 infeasible target.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import reproduce as repro
from .data import Dataset, gen_synthetic
from .graph import (
    GraphError,
    WeightFormatError,
    load_model,
    load_weights,
    random_weights,
    save_weights,
)
from .pruner import (
    BlockConfig,
    CompressionTarget,
    InfeasibleTargetError,
    PruneHyper,
    allocate_budgets,
    compression_report,
    evaluate,
    load_masks,
    project_mask,
    reweighted_prune,
    save_masks,
)
from .report import Report
from .runtime.executor import dense_reference, run_model
from .runtime.packed import (
    PackedFormatError,
    csr_index_bytes,
    decode,
    encode,
    load_packed,
    mask_of,
    reorder_blocks,
    save_packed,
)
from .scheduler import (
    ProfileError,
    dumps_schedule,
    load_profile,
    loads_schedule,
    profile_branches,
    save_profile,
    schedule_model,
)
from .training import TrainConfig, TrainingError, init_params, to_weight_tensors, train

log = logging.getLogger("blockpunch")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INFEASIBLE = 0, 1, 2, 3
PACKED_SUFFIX = ".bpcr"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


@dataclass
class RunConfig:
    """Everything a subcommand needs; a fixed seed makes every artifact reproducible."""

    command: str
    model: str | None = None
    weights: str | None = None
    rate: float = 1.0
    rho: float = 1.15
    block: BlockConfig = field(default_factory=BlockConfig)
    seed: int = 0
    out: str = "."
    fixture: str | None = None  # profile file; measured mode when absent
    extra: dict = field(default_factory=dict)


# --------------------------------------------------------------------------
# helpers


def resolve_model(name):
    """A path, or the name of a bundled fixture (``toy4``, ``micro``, ``yolov4``)."""
    path = Path(name)
    if not path.exists():
        candidate = repro.fixture_path(f"{name}.model")
        if not candidate.is_file():
            raise FileNotFoundError(f"no model file or fixture named '{name}'")
        path = candidate
    return load_model(path)


def _overrides(items):
    out = {}
    for item in items or ():
        lid, sep, rate = item.partition("=")
        if not sep:
            raise UsageError(f"override must look like layer=rate, got '{item}'")
        try:
            out[lid] = float(rate)
        except ValueError:
            raise UsageError(f"override rate for '{lid}' is not a number") from None
    return out


def _load_hyper(path, seed):
    raw = {}
    if path:
        raw = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(raw, dict):
            raise ValueError(f"{path}: expected a mapping of hyperparameters")
    raw.setdefault("seed", seed)
    return PruneHyper.from_dict(raw)


def _load_data(cfg: RunConfig):
    if cfg.extra.get("data"):
        return Dataset.load(cfg.extra["data"])
    return gen_synthetic(cfg.seed, cfg.extra.get("size", 1600), cfg.extra.get("difficulty", 0.4))


def _load_packed_dir(model, directory):
    directory = Path(directory)
    packed = {}
    for layer in model.weight_layers:
        path = directory / f"{layer.id}{PACKED_SUFFIX}"
        if not path.is_file():
            raise FileNotFoundError(f"missing packed layer {path}")
        packed[layer.id] = load_packed(path)
    return packed


def _load_input(cfg: RunConfig, model):
    source = cfg.extra.get("input")
    if source:
        arr = np.load(source)
        if isinstance(arr, np.lib.npyio.NpzFile):
            with arr:
                arr = arr["x"]
        return np.asarray(arr, dtype=np.float64)
    batch = cfg.extra.get("batch", 1)
    return np.random.default_rng(cfg.seed).standard_normal((batch, *model.input_shape))


# --------------------------------------------------------------------------
# subcommands


def cmd_gen_data(cfg: RunConfig) -> Report:
    ds = gen_synthetic(cfg.seed, cfg.extra["size"], cfg.extra["difficulty"])
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    ds.save(out / "data.npz")
    counts = np.bincount(ds.y, minlength=2)
    rep = Report("synthetic data", ["class", "count"])
    for c, n in enumerate(counts):
        rep.add(**{"class": c, "count": int(n)})
    rep.summary = {"seed": cfg.seed, "size": len(ds), "difficulty": cfg.extra["difficulty"]}
    return rep


def cmd_prune(cfg: RunConfig) -> Report:
    model = resolve_model(cfg.model)
    target = CompressionTarget(cfg.rate, cfg.rho, cfg.extra.get("overrides", {}))
    method = cfg.extra.get("method", "reweighted")
    budgets = allocate_budgets(model, target, cfg.block)  # fails fast on infeasible targets
    data = None
    if cfg.weights:
        weights = load_weights(cfg.weights, model)
    elif method == "reweighted":
        data = _load_data(cfg)
        params, _ = train(
            model, init_params(model, cfg.seed), data.split(cfg.extra.get("n_train", 1200))[0].as_tuple(),
            TrainConfig(cfg.extra.get("dense_epochs", 15), seed=cfg.seed),
        )
        weights = to_weight_tensors(params)
    else:
        weights = random_weights(model, cfg.seed)

    if method == "reweighted":
        data = data or _load_data(cfg)
        train_set, test_set = data.split(cfg.extra.get("n_train", 1200))
        hyper = _load_hyper(cfg.extra.get("config"), cfg.seed)
        result = reweighted_prune(model, weights, train_set.as_tuple(), target, cfg.block, hyper)
        pruned, masks = result.weights, result.masks
        acc = (evaluate(model, weights, test_set.as_tuple()), evaluate(model, pruned, test_set.as_tuple()))
    else:
        masks = {lid: project_mask(weights[lid], cfg.block, b.units, lid) for lid, b in budgets.items()}
        pruned = {
            lid: type(w).from_gemm(lid, w.dims, np.where(masks[lid].dense(), w.gemm_view, 0))
            for lid, w in weights.items()
        }
        acc = None

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    save_weights(pruned, out / "weights.bpw")
    save_masks(masks, out / "masks.json")
    summary = compression_report(model, masks)
    rep = Report(
        f"prune {cfg.model} at {cfg.rate:g}x (block {cfg.block})",
        ["layer", "weights", "kept", "rate", "budget_units", "total_units"],
    )
    for lid, (n, kept) in summary["per_layer"].items():
        rep.add(layer=lid, weights=n, kept=kept, rate=n / kept if kept else float("inf"),
                budget_units=budgets[lid].units, total_units=budgets[lid].total_units)
    rep.summary = {
        "weights_before": summary["weights"],
        "weights_after": summary["weights_kept"],
        "rate": summary["rate"],
        "flops_before": summary["flops"],
        "flops_after": summary["flops_kept"],
        "method": method,
        "seed": cfg.seed,
    }
    if acc is not None:
        rep.summary.update(accuracy_dense=acc[0], accuracy_pruned=acc[1])
    return rep


def cmd_pack(cfg: RunConfig) -> Report:
    model = resolve_model(cfg.model)
    weights = load_weights(cfg.weights, model)
    masks = load_masks(cfg.extra["masks"])
    missing = [layer.id for layer in model.weight_layers if layer.id not in masks]
    if missing:
        raise ValueError(f"mask file has no entry for layers {missing}")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    rep = Report("pack", ["layer", "nnz", "value_bytes", "index_bytes", "csr_index_bytes", "file_bytes"])
    for layer in model.weight_layers:
        packed = encode(weights[layer.id], masks[layer.id])
        if cfg.extra.get("reorder", True):
            packed = reorder_blocks(packed)
        path = out / f"{layer.id}{PACKED_SUFFIX}"
        save_packed(packed, path)
        rep.add(layer=layer.id, nnz=packed.nnz, value_bytes=4 * packed.nnz, index_bytes=packed.index_bytes(),
                csr_index_bytes=csr_index_bytes(masks[layer.id].dense()), file_bytes=path.stat().st_size)
    rep.summary = {"layers": len(rep.rows), "reordered": cfg.extra.get("reorder", True)}
    return rep


def cmd_unpack(cfg: RunConfig) -> Report:
    model = resolve_model(cfg.model)
    packed = _load_packed_dir(model, cfg.extra["packed"])
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    weights = {lid: decode(p) for lid, p in packed.items()}
    save_weights(weights, out / "weights.bpw")
    save_masks({lid: mask_of(p) for lid, p in packed.items()}, out / "masks.json")
    rep = Report("unpack", ["layer", "nnz"])
    for lid, p in packed.items():
        rep.add(layer=lid, nnz=p.nnz)
    return rep


def cmd_schedule(cfg: RunConfig) -> Report:
    model = resolve_model(cfg.model)
    if cfg.fixture:
        profile = load_profile(cfg.fixture)
        mode = "fixture"
    else:
        if not cfg.extra.get("packed"):
            raise UsageError("measured profiling needs --packed (or pass --profile)")
        profile = profile_branches(model, _load_packed_dir(model, cfg.extra["packed"]), seed=cfg.seed)
        mode = "measured"
    sched = schedule_model(model, profile)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "schedule.txt").write_text(dumps_schedule(model, sched))
    if mode == "measured":
        save_profile(profile, out / "profile.txt")
    rep = Report(
        f"schedule ({mode} profile)",
        ["structure", "kind", "lanes", "makespan_ms", "all_g_ms"],
        measured=("makespan_ms", "all_g_ms") if mode == "measured" else (),
    )
    for bs in model.branch_structures:
        rep.add(structure=bs.id, kind=bs.kind, lanes="".join(sched.assignments[bs.id]),
                makespan_ms=sched.makespans[bs.id], all_g_ms=sum(t[0] for t in profile.times(bs.id)))
    rep.summary = {"sequential_ms": sched.sequential_ms, "total_ms": sched.total, "profile": mode}
    return rep


def cmd_run(cfg: RunConfig) -> Report:
    model = resolve_model(cfg.model)
    packed = _load_packed_dir(model, cfg.extra["packed"])
    schedule = loads_schedule(Path(cfg.extra["schedule"]).read_text()) if cfg.extra.get("schedule") else None
    x = _load_input(cfg, model)
    result = run_model(model, packed, x, schedule, backend=cfg.extra.get("backend"))
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    np.savez(out / "outputs.npz", **result.outputs)
    rep = Report("run", ["unit", "kind", "lane", "start_ms", "duration_ms"], measured=("start_ms", "duration_ms"))
    for e in result.trace:
        rep.add(unit=e.name, kind=e.kind, lane=e.lane, start_ms=e.start * 1e3, duration_ms=e.duration * 1e3)
    rep.summary = {"wall_ms": result.wall * 1e3, "outputs": sorted(result.outputs)}
    if cfg.extra.get("check"):
        ref = dense_reference(model, {lid: decode(p) for lid, p in packed.items()}, x)
        err = max(
            float(np.abs(result.outputs[k] - ref[k]).max() / max(np.abs(ref[k]).max(), 1e-300)) for k in ref
        )
        rep.summary["max_rel_error_vs_dense"] = err
        if err > 1e-4:
            raise ValueError(f"sparse run deviates from the dense reference (rel. error {err:.3g})")
    return rep


def cmd_reproduce(cfg: RunConfig) -> Report:
    table = cfg.extra["table"]
    if table == "scheme-comparison":
        return repro.scheme_comparison(seeds=cfg.extra.get("seeds", 5), rate=cfg.rate if cfg.rate > 1 else 8.0)
    return repro.reproduce(table)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "prune": cmd_prune,
    "pack": cmd_pack,
    "unpack": cmd_unpack,
    "schedule": cmd_schedule,
    "run": cmd_run,
    "reproduce": cmd_reproduce,
}


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="blockpunch", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, model=True):
        if model:
            sp.add_argument("--model", required=True, help="model file or fixture name")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", default=".", help="output directory")
        sp.add_argument("--json", action="store_true", help="print the JSON report instead of the table")

    sp = sub.add_parser("gen-data", help="write a synthetic labeled dataset")
    common(sp, model=False)
    sp.add_argument("--size", type=int, default=1600)
    sp.add_argument("--difficulty", type=float, default=0.4)

    sp = sub.add_parser("prune", help="block-punched pruning to a compression target")
    common(sp)
    sp.add_argument("--weights", help="dense weights; trained (or random for projection) when omitted")
    sp.add_argument("--rate", type=float, default=8.0)
    sp.add_argument("--rho", type=float, default=1.15)
    sp.add_argument("--block", default="8x4", help="block size as rows x columns")
    sp.add_argument("--override", action="append", metavar="LAYER=RATE")
    sp.add_argument("--method", choices=("reweighted", "projection"), default="reweighted")
    sp.add_argument("--config", help="YAML/JSON hyperparameter file")
    sp.add_argument("--data", help="dataset .npz (synthetic data from --seed otherwise)")
    sp.add_argument("--size", type=int, default=1600)
    sp.add_argument("--n-train", type=int, default=1200)
    sp.add_argument("--difficulty", type=float, default=0.4)
    sp.add_argument("--dense-epochs", type=int, default=15)

    sp = sub.add_parser("pack", help="encode pruned weights into packed layer files")
    common(sp)
    sp.add_argument("--weights", required=True)
    sp.add_argument("--masks", required=True)
    sp.add_argument("--no-reorder", action="store_true")

    sp = sub.add_parser("unpack", help="decode packed layer files to weights and masks")
    common(sp)
    sp.add_argument("--packed", required=True, help="directory of packed layer files")

    sp = sub.add_parser("schedule", help="assign branch structures to lanes")
    common(sp)
    sp.add_argument("--profile", help="profile file (fixture mode); measured when omitted")
    sp.add_argument("--packed", help="packed layers for measured profiling")

    sp = sub.add_parser("run", help="execute a packed model")
    common(sp)
    sp.add_argument("--packed", required=True)
    sp.add_argument("--schedule", help="schedule file from the schedule command")
    sp.add_argument("--input", help=".npy or .npz (key x) input; random when omitted")
    sp.add_argument("--batch", type=int, default=1)
    sp.add_argument("--backend", choices=("cython", "numpy"))
    sp.add_argument("--check", action="store_true", help="compare against the dense reference")

    sp = sub.add_parser("reproduce", help="regenerate an accounting or comparison table")
    common(sp, model=False)
    sp.add_argument("table", choices=repro.TABLES)
    sp.add_argument("--seeds", type=int, default=5)
    sp.add_argument("--rate", type=float, default=8.0)
    return p


def config_from_args(args) -> RunConfig:
    extra = {
        k: v for k, v in vars(args).items()
        if k not in ("command", "model", "weights", "rate", "rho", "block", "seed", "out", "profile", "verbose", "json")
    }
    if "override" in extra:
        extra["overrides"] = _overrides(extra.pop("override"))
    if "no_reorder" in extra:
        extra["reorder"] = not extra.pop("no_reorder")
    try:
        block = BlockConfig.parse(args.block) if getattr(args, "block", None) else BlockConfig()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return RunConfig(
        command=args.command, model=getattr(args, "model", None), weights=getattr(args, "weights", None),
        rate=getattr(args, "rate", 1.0), rho=getattr(args, "rho", 1.15), block=block, seed=args.seed,
        out=args.out, fixture=getattr(args, "profile", None), extra=extra,
    )


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # --help and usage errors
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = config_from_args(args)
        report = COMMANDS[cfg.command](cfg)
    except UsageError as exc:
        print(f"blockpunch: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InfeasibleTargetError as exc:
        print(f"blockpunch: infeasible target: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (OSError, GraphError, WeightFormatError, PackedFormatError, ProfileError, TrainingError,
            ValueError, KeyError, json.JSONDecodeError, yaml.YAMLError) as exc:
        print(f"blockpunch: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    name = cfg.command.replace("-", "_") + ("_" + cfg.extra["table"].replace("-", "_") if "table" in cfg.extra else "")
    report.save(cfg.out, f"{name}_report")
    sys.stdout.write(report.to_json() if args.json else report.to_text())
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
