"""Desk-scale reproductions: compression accounting, the pattern-pruning ceiling,
and the pruning-scheme comparison on the synthetic task."""
from __future__ import annotations

import logging
import time
from importlib.resources import files

import numpy as np

from .data import gen_synthetic
from .graph import count_flops, count_weights, load_model
from .pruner import (
    BlockConfig,
    CompressionTarget,
    PruneHyper,
    PruneMask,
    allocate_budgets,
    baseline_finetune,
    evaluate,
    pattern_ceiling,
    reweighted_prune,
)
from .report import Report
from .runtime.executor import run_model
from .runtime.packed import encode
from .training import TrainConfig, accuracy, init_params, to_weight_tensors, train

log = logging.getLogger(__name__)

TABLES = ("compression-accounting", "ceiling", "scheme-comparison")
# kept-parameter counts of the four compressed YOLOv4 variants
ACCOUNTING_KEPT = (16.11e6, 8.04e6, 6.37e6, 4.59e6)
CEILING_FRACTIONS = (0.8331,)
# detection mAP of the three schemes on the full-size task; reference only, never recomputed
SCHEME_REFERENCE_MAP = {"unstructured": 53.9, "block-punched": 51.4, "filter-structured": 38.6}


def fixture_path(name):
    return files("blockpunch") / "fixtures" / name


def compression_accounting(kept_counts=ACCOUNTING_KEPT, model=None, rho=1.15) -> Report:
    """Rate of each kept-parameter count against the fixture's parameter total, plus the
    per-kernel-size allocation that would realize it."""
    model = model or load_model(fixture_path("yolov4.model"))
    wc = count_weights(model)
    fc = count_flops(model)
    rep = Report(
        "compression accounting (YOLOv4 topology, 320x320)",
        ["kept_params", "rate", "kept_weights_allocated", "rate_3x3", "rate_other", "flops_kept"],
    )
    rep.summary = {
        "params": wc.total_params,
        "kernel_weights": wc.total,
        "flops": fc.total,
        "fraction_3x3": wc.fraction_3x3,
    }
    for kept in kept_counts:
        rate = wc.total_params / kept
        budgets = allocate_budgets(model, CompressionTarget(rate, rho))
        kept_w = sum(b.weights for b in budgets.values())
        flops_kept = sum(fc.per_layer[lid] / b.rate for lid, b in budgets.items())
        r3 = next((b.rate for lid, b in budgets.items() if model[lid].is_3x3), None)
        r1 = next((b.rate for lid, b in budgets.items() if not model[lid].is_3x3), None)
        rep.add(kept_params=kept, rate=rate, kept_weights_allocated=kept_w, rate_3x3=r3,
                rate_other=r1, flops_kept=flops_kept)
    return rep


def ceiling(fractions=CEILING_FRACTIONS, model=None) -> Report:
    """Highest rate reachable when only 3x3 kernels can be pruned."""
    model = model or load_model(fixture_path("yolov4.model"))
    rep = Report("pattern-pruning ceiling", ["source", "prunable_fraction", "ceiling"])
    frac = count_weights(model).fraction_3x3
    rep.add(source="fixture", prunable_fraction=frac, ceiling=pattern_ceiling(frac))
    for f in fractions:
        rep.add(source="given", prunable_fraction=f, ceiling=pattern_ceiling(f))
    return rep


def toy_trial(seed, rate=8.0, difficulty=0.4, size=1600, n_train=1200, dense_epochs=15, hyper=None,
              cfg=BlockConfig(), measure=True):
    """Dense training then the three pruning schemes at ``rate``; test accuracy of each."""
    model = load_model(fixture_path("toy4.model"))
    train_set, test_set = gen_synthetic(seed, size, difficulty).split(n_train)
    params, _ = train(model, init_params(model, seed), train_set.as_tuple(), TrainConfig(dense_epochs, seed=seed))
    dense = to_weight_tensors(params)
    # the two-row classifier stays dense: filter pruning it would delete a class
    target = CompressionTarget(rate, overrides={"fc": 1.0})
    hyper = hyper or PruneHyper(seed=seed)
    out = {"dense": accuracy(model, params, test_set.as_tuple())}
    res = reweighted_prune(model, dense, train_set.as_tuple(), target, cfg, hyper)
    out["block-punched"] = evaluate(model, res.weights, test_set.as_tuple())
    for scheme in ("unstructured", "filter-structured"):
        w, _ = baseline_finetune(model, dense, train_set.as_tuple(), target, scheme, cfg, hyper)
        out[scheme] = evaluate(model, w, test_set.as_tuple())
    out["history"] = [
        sum(float(n[lid][~res.masks[lid].kept].sum()) for lid in n) for n in res.history
    ]
    if measure:
        x = test_set.x[:64]
        full = {lid: encode(w, PruneMask.full(lid, w.gemm_shape, cfg), cfg) for lid, w in dense.items()}
        packed = {lid: encode(res.weights[lid], res.masks[lid], cfg) for lid in res.weights}
        out["ms_dense"] = _time_ms(lambda: run_model(model, full, x)) / len(x)
        out["ms_block"] = _time_ms(lambda: run_model(model, packed, x)) / len(x)
    return out


def _time_ms(fn, repeats=5):
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        samples.append((time.perf_counter() - t0) * 1e3)
    return float(np.median(samples))


def scheme_comparison(seeds=5, rate=8.0, measure=True, **kwargs) -> Report:
    trials = []
    for seed in range(seeds):
        trials.append(toy_trial(seed, rate, measure=measure, **kwargs))
        log.info("seed %d: %s", seed, {k: v for k, v in trials[-1].items() if k != "history"})
    rep = Report(
        f"pruning-scheme comparison (synthetic task, {rate:g}x, {seeds} seeds)",
        ["scheme", "accuracy_mean", "accuracy_min", "accuracy_max", "drop_vs_dense", "ms_per_image",
         "reference_map"],
        measured=("ms_per_image",),
    )
    dense = [t["dense"] for t in trials]
    for scheme in ("dense", "unstructured", "block-punched", "filter-structured"):
        acc = [t[scheme] for t in trials]
        ms = None
        if measure and scheme in ("dense", "block-punched"):
            key = "ms_dense" if scheme == "dense" else "ms_block"
            ms = float(np.mean([t[key] for t in trials]))
        rep.add(
            scheme=scheme,
            accuracy_mean=float(np.mean(acc)),
            accuracy_min=float(np.min(acc)),
            accuracy_max=float(np.max(acc)),
            drop_vs_dense=float(np.mean(dense) - np.mean(acc)),
            ms_per_image=ms,
            reference_map=SCHEME_REFERENCE_MAP.get(scheme),
        )
    rep.summary = {"seeds": seeds, "rate": rate}
    rep.notes.append("reference_map is the full-size detection result, shown for ordering only")
    rep.per_seed = trials
    return rep


def reproduce(table, **kwargs) -> Report:
    if table == "compression-accounting":
        return compression_accounting(**kwargs)
    if table == "ceiling":
        return ceiling(**kwargs)
    if table == "scheme-comparison":
        return scheme_comparison(**kwargs)
    raise ValueError(f"unknown table '{table}'; choose from {', '.join(TABLES)}")
