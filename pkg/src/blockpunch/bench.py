"""Timing helpers for the sparse kernels (results are machine dependent)."""
from __future__ import annotations

import time

import numpy as np
from scipy.stats import spearmanr

from .graph import WeightTensor
from .pruner import BlockConfig, project_mask
from .runtime.kernels import BACKENDS
from .runtime.ops import TuningConfig, sparse_gemm
from .runtime.packed import decode, encode, reorder_blocks

KEPT_FRACTIONS = (1.0, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1)


def random_packed(m, c, kept_fraction, cfg=BlockConfig(), seed=0):
    rng = np.random.default_rng(seed)
    w = WeightTensor.from_gemm("bench", (m, c, 1, 1), rng.standard_normal((m, c)).astype(np.float32))
    grid_rows = -(-m // cfg.gm)
    budget = max(grid_rows, round(kept_fraction * grid_rows * c))
    return reorder_blocks(encode(w, project_mask(w, cfg, budget, "bench"), cfg))


def time_gemm(packed, x, backend, tuning=None, repeats=5):
    sparse_gemm(packed, x, tuning, backend)  # warm up
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        sparse_gemm(packed, x, tuning, backend)
        samples.append(time.perf_counter() - t0)
    return float(np.median(samples))


def kept_fraction_sweep(backend=None, size=1024, batch=64, fractions=KEPT_FRACTIONS, repeats=5, seed=0):
    """Median GEMM time per kept fraction and the Spearman correlation between the two."""
    x = np.random.default_rng(seed + 1).standard_normal((size, batch))
    times = [time_gemm(random_packed(size, size, f, seed=seed), x, backend, repeats=repeats) for f in fractions]
    # sweep step vs time: strongly negative when time falls as the kept fraction drops
    rho = spearmanr(np.argsort(np.argsort(-np.asarray(fractions))), times).statistic
    return {"fractions": list(fractions), "seconds": times, "spearman": float(rho)}


def backend_comparison(shapes=((128, 512, 64), (256, 1152, 64), (512, 2304, 32)), kept_fraction=0.25,
                       repeats=5, seed=0):
    rows = []
    tuning = TuningConfig(row_tile=4, col_tile=64, workers=1)
    for m, c, batch in shapes:
        packed = random_packed(m, c, kept_fraction, seed=seed)
        x = np.random.default_rng(seed + 1).standard_normal((c, batch))
        row = {"shape": (m, c, batch), "kept_fraction": kept_fraction}
        for name in BACKENDS:
            row[name] = time_gemm(packed, x, name, tuning, repeats)
        dense = decode(packed).gemm_view.astype(np.float64)
        t0 = time.perf_counter()
        for _ in range(repeats):
            dense @ x
        row["dense_blas"] = (time.perf_counter() - t0) / repeats
        rows.append(row)
    return rows
