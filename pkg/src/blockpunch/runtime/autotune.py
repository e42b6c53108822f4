"""Empirical search over kernel execution parameters."""
from __future__ import annotations

import itertools
import logging
import os
import time

import numpy as np

from .ops import DEFAULT_TUNING, TuningConfig, sparse_gemm
from .packed import PackedSparseLayer

log = logging.getLogger(__name__)

ROW_TILES = (1, 2, 4, 8)
COL_TILES = (16, 32, 64)
# Both lanes run on the host; they differ only in how many workers they may use.
DEVICE_WORKERS = {"G": os.cpu_count() or 1, "C": 1}


def candidate_space(packed: PackedSparseLayer, input_shape, device_class="G"):
    block_rows = packed.grid.rows
    batch = input_shape[1] if len(input_shape) > 1 else 1
    rows = [t for t in ROW_TILES if t <= max(block_rows, 1)] or [1]
    cols = [t for t in COL_TILES if t <= batch] or [max(batch, 1)]
    workers = range(1, DEVICE_WORKERS.get(device_class, 1) + 1)
    return [TuningConfig(r, c, w) for r, c, w in itertools.product(rows, cols, workers)]


class Autotuner:
    """Times candidate configs and caches the winner per (layer shape, device class)."""

    def __init__(self, repeats=3, seed=0, clock=time.perf_counter):
        self.cache = {}
        self.repeats = repeats
        self.seed = seed
        self.clock = clock
        self.timings = 0

    def measure(self, packed, x, cfg) -> float:
        samples = []
        for _ in range(self.repeats):
            t0 = self.clock()
            sparse_gemm(packed, x, cfg)
            samples.append(self.clock() - t0)
        self.timings += 1
        return float(np.median(samples))

    @staticmethod
    def key(packed, input_shape, device_class):
        return (packed.shape, packed.cfg, packed.nnz, tuple(input_shape), device_class)

    def tune(self, packed, input_shape, device_class="G", budget=0.5, candidates=None):
        if budget <= 0:
            raise ValueError("time budget must be positive")
        key = self.key(packed, input_shape, device_class)
        if key in self.cache:
            return self.cache[key]
        cands = list(candidates) if candidates is not None else candidate_space(packed, input_shape, device_class)
        if len(cands) == 1:
            self.cache[key] = cands[0]
            return cands[0]
        default = DEFAULT_TUNING if DEFAULT_TUNING in cands else None
        rng = np.random.default_rng(self.seed)
        x = rng.standard_normal(tuple(input_shape))
        order = [default] if default else []
        rest = [c for c in cands if c != default]
        order += [rest[i] for i in rng.permutation(len(rest))]
        deadline = self.clock() + budget
        results = {}
        for cfg in order:
            results[cfg] = self.measure(packed, x, cfg)
            if self.clock() > deadline:
                break
        best = min(results, key=results.get)
        if default is not None and best != default:
            # re-measure head to head; keep the default unless the winner holds up
            t_best, t_default = self.measure(packed, x, best), self.measure(packed, x, default)
            if t_best >= t_default:
                log.debug("tuning winner %s did not beat default on re-measure", best)
                best = default
        self.cache[key] = best
        return best


_DEFAULT_TUNER = Autotuner()


def autotune(packed, input_shape, device_class="G", budget=0.5, candidates=None, tuner=None):
    return (tuner or _DEFAULT_TUNER).tune(packed, input_shape, device_class, budget, candidates)
