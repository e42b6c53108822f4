"""Block-punched pruning.

The GEMM view of a layer (rows = filters, columns = channel x kernel position)
is cut into ``gm x gn`` blocks. Within a block a column is either kept for all
of the block's rows or punched for all of them. A penalty group is one
``(block row, column)`` pair, so group norms are stored as an array of shape
``(block_rows, C)``; block ``(i, j)`` owns columns ``j*gn .. j*gn+gn-1`` of row ``i``.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .graph import ModelGraph, WeightTensor, count_flops, count_weights
from .training import TrainConfig, accuracy, to_arrays, to_weight_tensors, train

log = logging.getLogger(__name__)

MASK_FORMAT = "blockpunch-mask"
MASK_VERSION = 1


class InfeasibleTargetError(ValueError):
    pass


@dataclass(frozen=True)
class BlockConfig:
    gm: int = 8
    gn: int = 4

    def __post_init__(self):
        if self.gm < 1 or self.gn < 1:
            raise ValueError(f"block dims must be positive, got {self.gm}x{self.gn}")
        if self.gn > 255:
            raise ValueError("gn must fit an 8-bit kept-column count (gn <= 255)")

    @classmethod
    def parse(cls, text: str) -> BlockConfig:
        gm, gn = (int(v) for v in text.lower().split("x"))
        return cls(gm, gn)

    def __str__(self):
        return f"{self.gm}x{self.gn}"


@dataclass(frozen=True)
class BlockGrid:
    shape: tuple[int, int]
    cfg: BlockConfig

    @property
    def rows(self) -> int:
        return -(-self.shape[0] // self.cfg.gm)

    @property
    def cols(self) -> int:
        return -(-self.shape[1] // self.cfg.gn)

    def row_slice(self, i) -> slice:
        return slice(i * self.cfg.gm, min((i + 1) * self.cfg.gm, self.shape[0]))

    def col_slice(self, j) -> slice:
        return slice(j * self.cfg.gn, min((j + 1) * self.cfg.gn, self.shape[1]))

    def band_heights(self) -> np.ndarray:
        h = np.full(self.rows, self.cfg.gm)
        h[-1] = self.shape[0] - self.cfg.gm * (self.rows - 1)
        return h

    def blocks(self):
        for i in range(self.rows):
            for j in range(self.cols):
                yield i, j, self.row_slice(i), self.col_slice(j)


def _gemm(weights) -> np.ndarray:
    if isinstance(weights, WeightTensor):
        return weights.gemm_view
    w = np.asarray(weights)
    return w.reshape(w.shape[0], -1)


def partition_blocks(weights, cfg: BlockConfig) -> BlockGrid:
    return BlockGrid(_gemm(weights).shape, cfg)


def group_norms(weights, cfg: BlockConfig) -> np.ndarray:
    """Squared norm of every (block row, column) group, shape (block_rows, C)."""
    w = _gemm(weights).astype(np.float64)
    m, c = w.shape
    grid = BlockGrid((m, c), cfg)
    padded = np.zeros((grid.rows * cfg.gm, c))
    padded[:m] = w
    return (padded**2).reshape(grid.rows, cfg.gm, c).sum(axis=1)


def expand_bands(per_group: np.ndarray, m: int, gm: int) -> np.ndarray:
    """(block_rows, C) -> (M, C) by repeating each band's row over its filters."""
    return np.repeat(per_group, gm, axis=0)[:m]


# --------------------------------------------------------------------------
# masks


@dataclass(frozen=True)
class PruneMask:
    """Kept/punched status per (block row, column); punched structure by construction."""

    layer_id: str
    shape: tuple[int, int]
    cfg: BlockConfig
    kept: np.ndarray  # bool (block_rows, C)

    def __post_init__(self):
        kept = np.asarray(self.kept, dtype=bool)
        grid = BlockGrid(tuple(self.shape), self.cfg)
        if kept.shape != (grid.rows, self.shape[1]):
            raise ValueError(f"mask for {self.layer_id}: kept array {kept.shape} does not fit grid")
        kept.flags.writeable = False
        object.__setattr__(self, "kept", kept)
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))

    @property
    def grid(self) -> BlockGrid:
        return BlockGrid(self.shape, self.cfg)

    def block_columns(self, i, j) -> np.ndarray:
        """Kept local column indices of block (i, j), ascending."""
        return np.flatnonzero(self.kept[i, self.grid.col_slice(j)])

    def block_counts(self) -> np.ndarray:
        """Kept-column count of every block, shape (block_rows, block_cols)."""
        grid = self.grid
        padded = np.zeros((grid.rows, grid.cols * self.cfg.gn), dtype=np.int64)
        padded[:, : self.shape[1]] = self.kept
        return padded.reshape(grid.rows, grid.cols, self.cfg.gn).sum(axis=2)

    def dense(self) -> np.ndarray:
        return expand_bands(self.kept, self.shape[0], self.cfg.gm)

    @property
    def kept_units(self) -> int:
        return int(self.kept.sum())

    @property
    def kept_weights(self) -> int:
        return int((self.kept.sum(axis=1) * self.grid.band_heights()).sum())

    @property
    def density(self) -> float:
        return self.kept_weights / (self.shape[0] * self.shape[1])

    @classmethod
    def full(cls, layer_id, shape, cfg):
        grid = BlockGrid(tuple(shape), cfg)
        return cls(layer_id, shape, cfg, np.ones((grid.rows, shape[1]), dtype=bool))

    @classmethod
    def from_dense(cls, layer_id, dense, cfg):
        dense = np.asarray(dense, dtype=bool)
        if not is_punched(dense, cfg):
            raise ValueError(f"mask for {layer_id} is not block-punched under {cfg}")
        grid = BlockGrid(dense.shape, cfg)
        kept = np.stack([dense[grid.row_slice(i)][0] for i in range(grid.rows)])
        return cls(layer_id, dense.shape, cfg, kept)

    def __eq__(self, other):
        if not isinstance(other, PruneMask):
            return NotImplemented
        return (
            (self.layer_id, self.shape, self.cfg) == (other.layer_id, other.shape, other.cfg)
            and np.array_equal(self.kept, other.kept)
        )

    __hash__ = None


def is_punched(dense_mask, cfg: BlockConfig) -> bool:
    """True iff every column of every block is uniformly kept or punched."""
    dense = np.asarray(dense_mask, dtype=bool)
    grid = BlockGrid(dense.shape, cfg)
    for i in range(grid.rows):
        band = dense[grid.row_slice(i)]
        if not (band == band[0]).all():
            return False
    return True


def save_masks(masks: dict, path) -> None:
    layers = []
    for lid, mask in masks.items():
        grid = mask.grid
        blocks = [
            [int(c) for c in mask.block_columns(i, j)]
            for i in range(grid.rows)
            for j in range(grid.cols)
        ]
        layers.append(
            {"id": lid, "shape": list(mask.shape), "block": [mask.cfg.gm, mask.cfg.gn], "blocks": blocks}
        )
    doc = {"format": MASK_FORMAT, "version": MASK_VERSION, "layers": layers}
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_masks(path) -> dict[str, PruneMask]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != MASK_FORMAT:
        raise ValueError(f"{path}: not a {MASK_FORMAT} file")
    if doc.get("version") != MASK_VERSION:
        raise ValueError(f"{path}: unsupported mask version {doc.get('version')}")
    out = {}
    for entry in doc["layers"]:
        shape = tuple(entry["shape"])
        cfg = BlockConfig(*entry["block"])
        grid = BlockGrid(shape, cfg)
        if len(entry["blocks"]) != grid.rows * grid.cols:
            raise ValueError(f"layer {entry['id']}: expected {grid.rows * grid.cols} blocks")
        kept = np.zeros((grid.rows, shape[1]), dtype=bool)
        for b, cols in enumerate(entry["blocks"]):
            i, j = divmod(b, grid.cols)
            width = grid.col_slice(j).stop - grid.col_slice(j).start
            local = np.asarray(cols, dtype=np.int64)
            if local.size and (local.min() < 0 or local.max() >= width or np.any(np.diff(local) <= 0)):
                raise ValueError(f"layer {entry['id']} block {b}: bad column indices {cols}")
            kept[i, j * cfg.gn + local] = True
        out[entry["id"]] = PruneMask(entry["id"], shape, cfg, kept)
    return out


# --------------------------------------------------------------------------
# reweighted regularization


@dataclass(frozen=True)
class ReweightState:
    alphas: dict  # layer id -> (block_rows, C) penalties
    eps: float = 1e-3
    lam: float = 1e-3
    round: int = 0


def penalties(norms: np.ndarray, eps: float) -> np.ndarray:
    return 1.0 / (np.asarray(norms, dtype=np.float64) + eps)


def update_penalties(state: ReweightState, norms: dict, lam=None) -> ReweightState:
    """alpha_g = 1 / (||W_g||^2 + eps) for every group; advances the round."""
    if state.eps <= 0:
        raise ValueError("eps must be positive")
    alphas = {lid: penalties(n, state.eps) for lid, n in norms.items()}
    return replace(state, alphas=alphas, lam=state.lam if lam is None else lam, round=state.round + 1)


def initial_state(weights: dict, cfg: BlockConfig, layers, eps=1e-3, lam=1e-3) -> ReweightState:
    norms = {lid: group_norms(weights[lid], cfg) for lid in layers}
    return ReweightState({lid: penalties(n, eps) for lid, n in norms.items()}, eps, lam, 0)


def regularizer_value(weights: dict, state: ReweightState, cfg: BlockConfig) -> float:
    """lambda * sum over layers and groups of alpha_g * ||W_g||^2."""
    return state.lam * sum(
        float((state.alphas[lid] * group_norms(weights[lid], cfg)).sum()) for lid in state.alphas
    )


def regularizer_grad(weights: dict, state: ReweightState, cfg: BlockConfig) -> dict:
    out = {}
    for lid, alpha in state.alphas.items():
        w = np.asarray(weights[lid], dtype=np.float64)
        w2 = w.reshape(w.shape[0], -1)
        out[lid] = (2.0 * state.lam * expand_bands(alpha, w2.shape[0], cfg.gm) * w2).reshape(w.shape)
    return out


def regularized_loss(weights: dict, task_loss: float, state: ReweightState, cfg: BlockConfig) -> float:
    return float(task_loss) + regularizer_value(weights, state, cfg)


def make_regularizer(state: ReweightState, cfg: BlockConfig):
    """Regularizer as a callable on autodiff parameter tensors (alpha held fixed)."""
    expanded = {}

    def reg(tensors):
        total = None
        for lid, alpha in state.alphas.items():
            t = tensors[lid]
            if lid not in expanded:
                a = expand_bands(alpha, t.shape[0], cfg.gm)
                expanded[lid] = a.reshape(t.shape)
            term = (t * t * expanded[lid]).sum()
            total = term if total is None else total + term
        if total is None:
            return ad.Tensor(0.0)
        return total * state.lam

    return reg


# --------------------------------------------------------------------------
# projection and budgets


def project_mask(weights, cfg: BlockConfig, budget: int, layer_id: str = "") -> PruneMask:
    """Keep the ``budget`` groups with the largest squared norm, ranked layer-wide.

    Ties go to the lower column index, then the lower block row.
    """
    norms = group_norms(weights, cfg)
    rows, c = norms.shape
    if not 0 <= budget <= rows * c:
        raise ValueError(f"budget {budget} outside [0, {rows * c}] for layer {layer_id}")
    band, col = np.indices(norms.shape)
    order = np.lexsort((band.ravel(), col.ravel(), -norms.ravel()))
    kept = np.zeros(rows * c, dtype=bool)
    kept[order[:budget]] = True
    return PruneMask(layer_id, (_gemm(weights).shape), cfg, kept.reshape(rows, c))


@dataclass(frozen=True)
class CompressionTarget:
    rate: float
    rho: float = 1.15
    overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.rate < 1:
            raise ValueError("compression rate must be >= 1")
        if self.rho <= 0:
            raise ValueError("kernel-size ratio must be positive")
        if any(r < 1 for r in self.overrides.values()):
            raise ValueError("per-layer override rates must be >= 1")


@dataclass(frozen=True)
class LayerBudget:
    rate: float
    weights: float  # kept weights, real-valued
    units: int  # kept (block row, column) groups
    total_units: int


def allocate_budgets(model: ModelGraph, target: CompressionTarget, cfg: BlockConfig = BlockConfig()):
    """Per-layer rates with 3x3 layers compressed ``rho`` times harder than the rest,
    solved so the whole model hits ``target.rate``."""
    layers = model.weight_layers
    total = sum(layer.n_weights for layer in layers)
    fixed = {layer.id: target.overrides[layer.id] for layer in layers if layer.id in target.overrides}
    unknown = set(target.overrides) - {layer.id for layer in layers}
    if unknown:
        raise ValueError(f"overrides for unknown layers {sorted(unknown)}")
    free = [layer for layer in layers if layer.id not in fixed]
    rates = dict(fixed)
    if target.rate == 1:
        rates.update({layer.id: 1.0 for layer in free})
    elif free:
        w3 = sum(layer.n_weights for layer in free if layer.is_3x3)
        w1 = sum(layer.n_weights for layer in free if not layer.is_3x3)
        remaining = total / target.rate - sum(model[lid].n_weights / r for lid, r in fixed.items())
        if remaining <= 0:
            raise InfeasibleTargetError(
                f"overrides already keep more than the {target.rate:g}x target allows"
            )
        r_other = (w3 / target.rho + w1) / remaining
        r_3x3 = target.rho * r_other
        if min(r_other if w1 else np.inf, r_3x3 if w3 else np.inf) < 1:
            raise InfeasibleTargetError(
                f"rate {target.rate:g}x with ratio {target.rho:g} needs a layer rate below 1x"
            )
        rates.update({layer.id: (r_3x3 if layer.is_3x3 else r_other) for layer in free})

    ideal = {}
    for layer in layers:
        grid = BlockGrid((layer.filters, layer.n_weights // layer.filters), cfg)
        ideal[layer.id] = grid.rows * grid.shape[1] / rates[layer.id]
    units = _round_preserving_total(ideal)
    out = {}
    for layer in layers:
        grid = BlockGrid((layer.filters, layer.n_weights // layer.filters), cfg)
        total_units = grid.rows * grid.shape[1]
        if rates[layer.id] > 1 and units[layer.id] < grid.rows:
            raise InfeasibleTargetError(
                f"layer {layer.id}: rate {rates[layer.id]:.3g}x leaves fewer than one kept "
                f"column per block row ({units[layer.id]} < {grid.rows})"
            )
        out[layer.id] = LayerBudget(
            rates[layer.id], layer.n_weights / rates[layer.id], min(units[layer.id], total_units), total_units
        )
    return out


def _round_preserving_total(ideal: dict) -> dict:
    """Largest-remainder rounding; exact ideals (within 1e-9) are never perturbed."""
    floor = {k: math.floor(v + 1e-9) for k, v in ideal.items()}
    extra = round(sum(ideal.values())) - sum(floor.values())
    by_remainder = sorted(ideal, key=lambda k: (-(ideal[k] - floor[k]), k))
    for k in by_remainder[: max(extra, 0)]:
        floor[k] += 1
    return floor


# --------------------------------------------------------------------------
# baselines and reporting


def baseline_prune(weights, scheme: str, rate: float) -> np.ndarray:
    """Elementwise keep-mask for the unstructured and filter-structured baselines."""
    w = _gemm(weights).astype(np.float64)
    m, c = w.shape
    if rate < 1:
        raise ValueError("rate must be >= 1")
    if scheme == "unstructured":
        k = max(1, round(m * c / rate))
        order = np.argsort(-np.abs(w).ravel(), kind="stable")
        keep = np.zeros(m * c, dtype=bool)
        keep[order[:k]] = True
        return keep.reshape(m, c)
    if scheme in ("filter", "filter-structured"):
        k = max(1, round(m / rate))
        order = np.argsort(-(w**2).sum(axis=1), kind="stable")
        keep = np.zeros((m, c), dtype=bool)
        keep[order[:k]] = True
        return keep
    raise ValueError(f"unknown baseline scheme '{scheme}'")


def pattern_ceiling(prunable_fraction: float) -> float:
    """Highest whole-model rate when only a fraction of weights can be pruned."""
    if not 0 <= prunable_fraction < 1:
        raise ValueError("prunable fraction must be in [0, 1)")
    return 1.0 / (1.0 - prunable_fraction)


def _kept(mask) -> int:
    return mask.kept_weights if isinstance(mask, PruneMask) else int(np.asarray(mask).sum())


def compression_report(model: ModelGraph, masks: dict) -> dict:
    """Weights and FLOPs kept under ``masks``; unmasked layers count as dense."""
    wc = count_weights(model)
    fc = count_flops(model)
    kept = dict(wc.per_layer)
    kept_flops = dict(fc.per_layer)
    for lid, mask in masks.items():
        kept[lid] = _kept(mask)
        kept_flops[lid] = fc.per_layer[lid] * kept[lid] / wc.per_layer[lid]
    total_kept = sum(kept.values())
    return {
        "weights": wc.total,
        "weights_kept": total_kept,
        "rate": wc.total / total_kept if total_kept else math.inf,
        "flops": fc.total,
        "flops_kept": sum(kept_flops.values()),
        "prunable_fraction_3x3": wc.fraction_3x3,
        "pattern_ceiling": pattern_ceiling(wc.fraction_3x3),
        "per_layer": {lid: (wc.per_layer[lid], kept[lid]) for lid in wc.per_layer},
    }


# --------------------------------------------------------------------------
# the pruning loop


@dataclass
class PruneHyper:
    eps: float = 1e-3
    lam: float = 1e-3
    lam_growth: float = 2.0
    rounds: int = 4
    epochs_per_round: int = 3
    finetune_epochs: int | None = None
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 32
    seed: int = 0

    @classmethod
    def from_dict(cls, raw: dict) -> PruneHyper:
        known = set(cls.__dataclass_fields__)
        bad = set(raw) - known
        if bad:
            raise ValueError(f"unknown hyperparameters {sorted(bad)}")
        return cls(**raw)

    def train_config(self, epochs, seed_offset=0) -> TrainConfig:
        return TrainConfig(epochs, self.lr, self.momentum, self.batch_size, self.seed + seed_offset)


@dataclass
class PruneResult:
    weights: dict  # layer id -> WeightTensor
    masks: dict  # layer id -> PruneMask
    budgets: dict
    history: list = field(default_factory=list)  # group norms per round, index 0 = start


def reweighted_prune(model, weights, train_data, target, cfg=BlockConfig(), hyper=None) -> PruneResult:
    """Reweighted group regularization, hard top-k projection, masked fine-tuning."""
    hyper = hyper or PruneHyper()
    budgets = allocate_budgets(model, target, cfg)
    params = to_arrays(weights)
    pruned = [lid for lid, b in budgets.items() if b.units < b.total_units]
    gemm = lambda lid: params[lid].reshape(params[lid].shape[0], -1)  # noqa: E731
    if not pruned:
        masks = {lid: PruneMask.full(lid, gemm(lid).shape, cfg) for lid in budgets}
        return PruneResult(dict(weights), masks, budgets, [])

    state = initial_state({lid: gemm(lid) for lid in pruned}, cfg, pruned, hyper.eps, hyper.lam)
    history = [{lid: group_norms(gemm(lid), cfg) for lid in pruned}]
    for t in range(hyper.rounds):
        params, losses = train(
            model, params, train_data, hyper.train_config(hyper.epochs_per_round, t + 1),
            regularizer=make_regularizer(state, cfg),
        )
        norms = {lid: group_norms(gemm(lid), cfg) for lid in pruned}
        history.append(norms)
        state = update_penalties(state, norms, lam=state.lam * hyper.lam_growth)
        log.info("round %d: loss %.4f lambda %.2e", t + 1, losses[-1], state.lam)

    masks = {}
    for lid, b in budgets.items():
        masks[lid] = project_mask(gemm(lid), cfg, b.units, lid)
    dense = {lid: m.dense() for lid, m in masks.items() if lid in pruned}
    finetune = hyper.finetune_epochs if hyper.finetune_epochs is not None else hyper.epochs_per_round
    params, _ = train(model, params, train_data, hyper.train_config(finetune, 100), masks=dense)
    for lid, d in dense.items():
        params[lid] = np.where(d.reshape(params[lid].shape), params[lid], 0.0)  # +0.0, never -0.0
    return PruneResult(to_weight_tensors(params), masks, budgets, history)


def baseline_finetune(model, weights, train_data, target, scheme, cfg=BlockConfig(), hyper=None):
    """Prune with a baseline scheme at the same per-layer rates, then masked fine-tune.

    Returns (weights, elementwise masks). The fine-tune budget matches the
    reweighted path's total epochs so the comparison is like-for-like.
    """
    hyper = hyper or PruneHyper()
    budgets = allocate_budgets(model, target, cfg)
    params = to_arrays(weights)
    masks = {}
    for lid, b in budgets.items():
        if b.units < b.total_units:
            masks[lid] = baseline_prune(params[lid], scheme, b.rate)
    epochs = hyper.rounds * hyper.epochs_per_round + (
        hyper.finetune_epochs if hyper.finetune_epochs is not None else hyper.epochs_per_round
    )
    params, _ = train(model, params, train_data, hyper.train_config(epochs, 200), masks=masks)
    for lid, m in masks.items():
        params[lid] = np.where(m.reshape(params[lid].shape), params[lid], 0.0)
    return to_weight_tensors(params), masks


def evaluate(model, weights, data) -> float:
    return accuracy(model, to_arrays(weights), data)
