"""End-to-end model execution on packed layers, honoring a two-lane schedule."""
from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..graph import GraphError, ModelGraph
from .autotune import DEVICE_WORKERS
from .ops import TuningConfig, sparse_conv, sparse_gemm

LANE_TUNING = {
    "G": TuningConfig(workers=DEVICE_WORKERS["G"]),
    "C": TuningConfig(workers=1),
}


@dataclass(frozen=True)
class TraceEntry:
    name: str
    kind: str  # "layer", "structure" or "branch"
    lane: str
    start: float  # seconds since run start
    duration: float


@dataclass
class RunResult:
    outputs: dict
    trace: list = field(default_factory=list)
    wall: float = 0.0

    def top_level(self):
        return [e for e in self.trace if e.kind in ("layer", "structure")]


def activate(x, activation):
    if activation == "relu":
        return np.maximum(x, 0.0)
    if activation == "leaky":
        return np.where(x > 0, x, 0.1 * x)
    if activation == "mish":
        return x * np.tanh(np.logaddexp(0.0, x))
    return x


def maxpool(x, kernel, stride, padding):
    kh, kw = kernel
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
    ho = (x.shape[2] + 2 * padding - kh) // stride + 1
    wo = (x.shape[3] + 2 * padding - kw) // stride + 1
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    return win.max(axis=(4, 5))


def apply_nonweight(layer, srcs):
    """Data-movement and pointwise layers. Single-operand pointwise layers stand for
    an op against a constant that the graph does not model and pass data through."""
    kind = layer.kind
    if kind == "pointwise-add":
        out = srcs[0]
        for s in srcs[1:]:
            out = out + s
        return out
    if kind == "pointwise-mul":
        out = srcs[0]
        for s in srcs[1:]:
            out = out * s
        return out
    if kind == "concat":
        return np.concatenate(srcs, axis=1)
    if kind == "upsample":
        return srcs[0].repeat(layer.stride, axis=2).repeat(layer.stride, axis=3)
    if kind == "maxpool":
        return maxpool(srcs[0], layer.kernel, layer.stride, layer.padding)
    if kind == "transpose-reshape":
        return srcs[0]
    raise GraphError(f"no executor for layer kind {kind}")


def _apply_packed(layer, srcs, packed, tuning, backend):
    x = srcs[0]
    if layer.kind == "conv":
        out = sparse_conv(packed[layer.id], x, layer.stride, layer.padding, tuning, backend)
    elif layer.kind == "fc":
        flat = x.reshape(x.shape[0], -1)
        out = sparse_gemm(packed[layer.id], flat.T, tuning, backend).T.reshape(x.shape[0], -1, 1, 1)
    else:
        out = apply_nonweight(layer, srcs)
    return activate(out, layer.activation)


def execute_layers(model, layer_ids, values, x, packed, lane="G", tunings=None, backend=None):
    """Run ``layer_ids`` in model order, reading and writing activations in ``values``."""
    tunings = tunings or {}
    for lid in layer_ids:
        layer = model[lid]
        srcs = [values[s] for s in layer.inputs] if layer.inputs else [x]
        tuning = tunings.get((lid, lane), LANE_TUNING[lane])
        values[lid] = _apply_packed(layer, srcs, packed, tuning, backend)
    return values


def execution_units(model: ModelGraph):
    """Topologically ordered units: ("structure", BranchStructure) or ("layer", LayerSpec).

    Each branch structure is contracted to one node so its branches can run
    concurrently once all of their external inputs exist.
    """
    owner = {}
    for bs in model.branch_structures:
        for lid in bs.layer_ids:
            owner[lid] = bs.id
    node_of = lambda lid: owner.get(lid, lid)  # noqa: E731
    nodes, deps, first_pos = {}, {}, {}
    for pos, layer in enumerate(model.layers):
        node = node_of(layer.id)
        if node not in nodes:
            nodes[node] = ("layer", layer) if node == layer.id else ("structure", None)
            deps[node] = set()
            first_pos[node] = pos
        for src in layer.inputs:
            if node_of(src) != node:
                deps[node].add(node_of(src))
    for bs in model.branch_structures:
        nodes[bs.id] = ("structure", bs)
    order, done = [], set()
    pending = sorted(nodes, key=first_pos.get)
    while pending:
        ready = [n for n in pending if deps[n] <= done]
        if not ready:
            raise GraphError(f"branch structures create a dependency cycle among {pending[:5]}")
        n = ready[0]
        order.append(nodes[n])
        done.add(n)
        pending.remove(n)
    return order


def run_model(model: ModelGraph, packed: dict, x, schedule=None, tunings=None, backend=None) -> RunResult:
    """Execute ``model`` on a (C, H, W) or (B, C, H, W) input with packed weight layers.

    ``schedule`` maps branch structures to lanes; C-lane branches run on a
    separate worker while G-lane branches run in order on the calling thread.
    A model without layers returns its input under the key ``"input"``.
    """
    missing = [layer.id for layer in model.weight_layers if layer.id not in packed]
    if missing:
        raise ValueError(f"unpacked weight layers: {missing}")
    x = np.asarray(x, dtype=np.float64)
    if not model.layers:
        return RunResult({"input": x.copy()})
    single = x.ndim == 3
    if single:
        x = x[None]
    values = {}
    trace = []
    t0 = time.perf_counter()
    layer_pos = {layer.id: i for i, layer in enumerate(model.layers)}

    def run_branch(branch, lane):
        start = time.perf_counter()
        execute_layers(model, sorted(branch, key=layer_pos.get), values, x, packed, lane, tunings, backend)
        return start, time.perf_counter()

    with ThreadPoolExecutor(1) as side_lane:
        for kind, item in execution_units(model):
            start = time.perf_counter()
            if kind == "layer":
                execute_layers(model, [item.id], values, x, packed, "G", tunings, backend)
                trace.append(TraceEntry(item.id, "layer", "G", start - t0, time.perf_counter() - start))
                continue
            lanes = (schedule.assignments.get(item.id) if schedule else None) or ("G",) * len(item.branches)
            futures = [
                (i, side_lane.submit(run_branch, branch, "C"))
                for i, (branch, lane) in enumerate(zip(item.branches, lanes))
                if lane == "C"
            ]
            spans = {}
            for i, (branch, lane) in enumerate(zip(item.branches, lanes)):
                if lane == "G":
                    spans[i] = run_branch(branch, "G")
            for i, fut in futures:
                spans[i] = fut.result()
            end = time.perf_counter()
            trace.append(TraceEntry(item.id, "structure", "G+C" if futures else "G", start - t0, end - start))
            for i, lane in enumerate(lanes):
                b0, b1 = spans[i]
                trace.append(TraceEntry(f"{item.id}[{i}]", "branch", lane, b0 - t0, b1 - b0))
    wall = time.perf_counter() - t0
    outputs = {lid: (values[lid][0] if single else values[lid]) for lid in model.outputs()}
    return RunResult(outputs, trace, wall)


def direct_conv(x, w, stride=1, padding=0):
    """Dense convolution by shifted-window accumulation (no im2col)."""
    m, n, kh, kw = w.shape
    b, _, h, wd = x.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((b, m, ho, wo))
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
            out += np.einsum("mn,bnhw->bmhw", w[:, :, i, j], patch)
    return out


def dense_reference(model: ModelGraph, weights: dict, x) -> dict:
    """Reference execution with dense (already masked) weights; outputs by layer id."""
    x = np.asarray(x, dtype=np.float64)
    if not model.layers:
        return {"input": x.copy()}
    single = x.ndim == 3
    if single:
        x = x[None]
    values = {}
    for layer in model.topological_order():
        srcs = [values[s] for s in layer.inputs] if layer.inputs else [x]
        if layer.kind == "conv":
            out = direct_conv(srcs[0], weights[layer.id].tensor.astype(np.float64), layer.stride, layer.padding)
        elif layer.kind == "fc":
            w = weights[layer.id].gemm_view.astype(np.float64)
            out = (srcs[0].reshape(srcs[0].shape[0], -1) @ w.T).reshape(srcs[0].shape[0], -1, 1, 1)
        else:
            out = apply_nonweight(layer, srcs)
        values[layer.id] = activate(out, layer.activation)
    return {lid: (values[lid][0] if single else values[lid]) for lid in model.outputs()}
