"""Forward pass of a ModelGraph on autodiff tensors, SGD training and evaluation."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .graph import ModelGraph, WeightTensor

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


def forward(model: ModelGraph, params: dict, x) -> ad.Tensor:
    """Run ``model`` on a (B, C, H, W) batch; ``params`` maps layer id -> Tensor."""
    inp = ad.as_tensor(x)
    values = {}
    for layer in model.topological_order():
        srcs = [values[s] for s in layer.inputs] if layer.inputs else [inp]
        kind = layer.kind
        if kind == "conv":
            out = ad.conv2d(srcs[0], params[layer.id], layer.stride, layer.padding)
        elif kind == "fc":
            out = ad.linear(srcs[0], params[layer.id])
        elif kind == "maxpool":
            out = ad.maxpool2d(srcs[0], layer.kernel, layer.stride, layer.padding)
        elif kind == "pointwise-add":
            out = srcs[0]
            for s in srcs[1:]:
                out = out + s
        elif kind == "pointwise-mul":
            out = srcs[0]
            for s in srcs[1:]:
                out = out * s
        elif kind == "concat":
            out = ad.concat(srcs)
        elif kind == "upsample":
            out = ad.upsample(srcs[0], layer.stride)
        elif kind == "transpose-reshape":
            out = srcs[0]
        else:  # pragma: no cover - LayerSpec validates kinds
            raise TrainingError(f"cannot differentiate layer kind {kind}")
        if layer.activation == "relu":
            out = ad.relu(out)
        elif layer.activation == "leaky":
            out = ad.leaky_relu(out)
        elif layer.activation != "linear":
            raise TrainingError(f"activation {layer.activation} is not differentiable here")
        values[layer.id] = out
    outs = model.outputs()
    if len(outs) != 1:
        raise TrainingError(f"training needs a single-output model, got {outs}")
    return values[outs[0]]


def to_arrays(weights: dict) -> dict[str, np.ndarray]:
    return {lid: wt.tensor.astype(np.float64) for lid, wt in weights.items()}


def to_weight_tensors(arrays: dict) -> dict[str, WeightTensor]:
    return {lid: WeightTensor(lid, a.shape, a.astype(np.float32)) for lid, a in arrays.items()}


@dataclass
class TrainConfig:
    epochs: int = 10
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 32
    seed: int = 0


def objective(model, params: dict, x, y, regularizer=None):
    """Task loss plus optional regularizer (a callable on the param tensors)."""
    tensors = {lid: ad.param(a) for lid, a in params.items()}
    task = ad.softmax_cross_entropy(forward(model, tensors, x), y)
    total = task if regularizer is None else task + regularizer(tensors)
    return total, task, tensors


def train(model, params: dict, data, cfg: TrainConfig, regularizer=None, masks=None):
    """SGD with momentum. ``masks`` (layer id -> 0/1 array, GEMM or 4-D shape)
    freezes pruned weights at zero. Returns new params and mean loss per epoch."""
    x, y = data
    params = {lid: a.copy() for lid, a in params.items()}
    dense_masks = {}
    for lid, m in (masks or {}).items():
        dense_masks[lid] = np.asarray(m, dtype=np.float64).reshape(params[lid].shape)
        params[lid] *= dense_masks[lid]
    velocity = {lid: np.zeros_like(a) for lid, a in params.items()}
    rng = np.random.default_rng(cfg.seed)
    losses = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(x))
        epoch_loss = 0.0
        for start in range(0, len(x), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            total, _, tensors = objective(model, params, x[idx], y[idx], regularizer)
            if not np.isfinite(total.data):
                raise TrainingError(
                    f"non-finite loss {float(total.data)} at epoch {epoch}, batch offset {start}; "
                    f"max |w| = {max(float(np.abs(a).max()) for a in params.values()):.3g}"
                )
            total.backward()
            for lid, t in tensors.items():
                g = t.grad
                if lid in dense_masks:
                    g = g * dense_masks[lid]
                velocity[lid] = cfg.momentum * velocity[lid] + g
                params[lid] -= cfg.lr * velocity[lid]
            epoch_loss += float(total.data) * len(idx)
        losses.append(epoch_loss / len(x))
        log.debug("epoch %d loss %.4f", epoch, losses[-1])
    return params, losses


def predict(model, params: dict, x, batch_size=256) -> np.ndarray:
    tensors = {lid: ad.Tensor(a) for lid, a in params.items()}
    out = [
        forward(model, tensors, x[i : i + batch_size]).data.reshape(len(x[i : i + batch_size]), -1)
        for i in range(0, len(x), batch_size)
    ]
    return np.concatenate(out).argmax(axis=1)


def accuracy(model, params: dict, data) -> float:
    x, y = data
    return float((predict(model, params, x) == np.asarray(y)).mean())


def init_params(model: ModelGraph, seed=0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    out = {}
    for layer in model.weight_layers:
        m, n, kh, kw = layer.dims
        out[layer.id] = rng.normal(0.0, np.sqrt(2.0 / (n * kh * kw)), layer.dims)
    return out
