"""Layer graphs, weight/FLOP accounting and on-disk model/weight formats.

A model is an ordered list of :class:`LayerSpec` records forming a DAG. Weight
layers (``conv`` and ``fc``) carry an ``M x N x Kh x Kw`` kernel whose GEMM view
is ``M`` rows by ``C = N*Kh*Kw`` columns. Column ``c`` of the GEMM view maps to
``(channel, kh, kw) = (c // (Kh*Kw), (c % (Kh*Kw)) // Kw, c % Kw)``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

LAYER_KINDS = (
    "conv",
    "fc",
    "pointwise-add",
    "pointwise-mul",
    "concat",
    "upsample",
    "transpose-reshape",
    "maxpool",
)
WEIGHT_KINDS = ("conv", "fc")
ACTIVATIONS = ("linear", "relu", "leaky", "mish")
BRANCH_KINDS = ("conv-branches", "nonconv-branches")

MODEL_MAGIC = "blockpunch-model"
MODEL_VERSION = 1
WEIGHTS_MAGIC = b"BPWT"
WEIGHTS_VERSION = 1


class GraphError(ValueError):
    """Structurally invalid model graph (cycles, dangling inputs, bad shapes)."""


class ModelFormatError(GraphError):
    def __init__(self, message, line=None, field=None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field '{field}'")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)


class WeightFormatError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    """One node of the model graph.

    ``aux_params`` counts per-filter parameters outside the prunable kernel
    (bias, folded batch-norm scale/shift). They enter parameter accounting only.
    For ``upsample`` the ``stride`` field is the scale factor.
    """

    id: str
    kind: str
    filters: int = 0
    in_channels: int = 0
    kernel: tuple[int, int] = (1, 1)
    stride: int = 1
    padding: int = 0
    inputs: tuple[str, ...] = ()
    activation: str = "linear"
    aux_params: int = 0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise GraphError(f"unknown layer kind '{self.kind}' (layer {self.id})")
        if self.activation not in ACTIVATIONS:
            raise GraphError(f"unknown activation '{self.activation}' (layer {self.id})")
        if self.kind in WEIGHT_KINDS:
            if min(self.filters, self.in_channels, *self.kernel) < 1:
                raise GraphError(f"weight layer {self.id} needs M, N, Kh, Kw >= 1")
            if self.kind == "fc" and self.kernel != (1, 1):
                raise GraphError(f"fc layer {self.id} must have a 1x1 kernel")
        elif self.filters or self.in_channels:
            raise GraphError(f"layer {self.id} of kind {self.kind} carries no weight shape")
        if self.stride < 1 or self.padding < 0:
            raise GraphError(f"layer {self.id}: stride must be >= 1 and padding >= 0")

    @property
    def has_weights(self) -> bool:
        return self.kind in WEIGHT_KINDS

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return (self.filters, self.in_channels, self.kernel[0], self.kernel[1])

    @property
    def n_weights(self) -> int:
        if not self.has_weights:
            return 0
        m, n, kh, kw = self.dims
        return m * n * kh * kw

    @property
    def is_3x3(self) -> bool:
        return self.has_weights and self.kernel == (3, 3)


@dataclass(frozen=True)
class BranchStructure:
    """Mutually independent layer sequences between a fork and a join."""

    id: str
    kind: str
    branches: tuple[tuple[str, ...], ...]
    data_bytes: tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind not in BRANCH_KINDS:
            raise GraphError(f"unknown branch structure kind '{self.kind}'")
        if not self.branches or any(len(b) == 0 for b in self.branches):
            raise GraphError(f"branch structure {self.id} has an empty branch")
        if self.data_bytes and len(self.data_bytes) != len(self.branches):
            raise GraphError(f"branch structure {self.id}: one byte count per branch expected")

    @property
    def layer_ids(self) -> tuple[str, ...]:
        return tuple(lid for b in self.branches for lid in b)

    def bytes_for(self, index: int) -> int:
        return self.data_bytes[index] if self.data_bytes else 0


@dataclass(frozen=True)
class ModelGraph:
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, int, int]
    branch_structures: tuple[BranchStructure, ...] = ()
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "branch_structures", tuple(self.branch_structures))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        index = {}
        for layer in self.layers:
            if layer.id in index:
                raise GraphError(f"duplicate layer id '{layer.id}'")
            index[layer.id] = layer
        object.__setattr__(self, "_index", index)
        for layer in self.layers:
            for src in layer.inputs:
                if src not in index:
                    raise GraphError(f"layer {layer.id}: input '{src}' does not resolve")
        self.topological_order()
        seen = set()
        for bs in self.branch_structures:
            for lid in bs.layer_ids:
                if lid not in index:
                    raise GraphError(f"branch structure {bs.id}: unknown layer '{lid}'")
                if lid in seen:
                    raise GraphError(f"layer {lid} appears in more than one branch")
                seen.add(lid)

    def __getitem__(self, layer_id: str) -> LayerSpec:
        return self._index[layer_id]

    def __contains__(self, layer_id) -> bool:
        return layer_id in self._index

    def __len__(self):
        return len(self.layers)

    @property
    def weight_layers(self) -> list[LayerSpec]:
        return [layer for layer in self.layers if layer.has_weights]

    def topological_order(self) -> list[LayerSpec]:
        """Kahn's algorithm, stable with respect to the declared layer order."""
        position = {layer.id: i for i, layer in enumerate(self.layers)}
        indegree = {layer.id: len(set(layer.inputs)) for layer in self.layers}
        consumers: dict[str, list[str]] = {layer.id: [] for layer in self.layers}
        for layer in self.layers:
            for src in set(layer.inputs):
                consumers[src].append(layer.id)
        ready = sorted((lid for lid, d in indegree.items() if d == 0), key=position.get)
        order = []
        while ready:
            lid = ready.pop(0)
            order.append(self._index[lid])
            for nxt in consumers[lid]:
                indegree[nxt] -= 1
                if indegree[nxt] == 0:
                    ready.append(nxt)
            ready.sort(key=position.get)
        if len(order) != len(self.layers):
            stuck = sorted(lid for lid, d in indegree.items() if d > 0)
            raise GraphError(f"cycle detected among layers {stuck[:5]}")
        return order

    def outputs(self) -> list[str]:
        consumed = {src for layer in self.layers for src in layer.inputs}
        return [layer.id for layer in self.layers if layer.id not in consumed]

    def infer_shapes(self, input_shape=None) -> dict[str, tuple[int, int, int]]:
        """Output (channels, height, width) of every layer."""
        in_shape = tuple(input_shape or self.input_shape)
        shapes: dict[str, tuple[int, int, int]] = {}
        for layer in self.topological_order():
            srcs = [shapes[s] for s in layer.inputs] if layer.inputs else [in_shape]
            shapes[layer.id] = _layer_output_shape(layer, srcs)
        return shapes


def _layer_output_shape(layer: LayerSpec, srcs):
    c, h, w = srcs[0]
    kind = layer.kind
    if kind in ("conv", "fc", "upsample", "maxpool", "transpose-reshape") and len(srcs) != 1:
        raise GraphError(f"layer {layer.id} ({kind}) takes exactly one input")
    if kind == "conv":
        if c != layer.in_channels:
            raise GraphError(f"layer {layer.id}: expects {layer.in_channels} channels, got {c}")
        kh, kw = layer.kernel
        ho = (h + 2 * layer.padding - kh) // layer.stride + 1
        wo = (w + 2 * layer.padding - kw) // layer.stride + 1
        if ho < 1 or wo < 1:
            raise GraphError(f"layer {layer.id}: kernel larger than padded input")
        return (layer.filters, ho, wo)
    if kind == "fc":
        if c * h * w != layer.in_channels:
            raise GraphError(
                f"layer {layer.id}: expects {layer.in_channels} features, got {c * h * w}"
            )
        return (layer.filters, 1, 1)
    if kind == "maxpool":
        kh, kw = layer.kernel
        ho = (h + 2 * layer.padding - kh) // layer.stride + 1
        wo = (w + 2 * layer.padding - kw) // layer.stride + 1
        if ho < 1 or wo < 1:
            raise GraphError(f"layer {layer.id}: pool window larger than padded input")
        return (c, ho, wo)
    if kind == "upsample":
        return (c, h * layer.stride, w * layer.stride)
    if kind == "transpose-reshape":
        return (c, h, w)
    if kind == "concat":
        if any(s[1:] != (h, w) for s in srcs):
            raise GraphError(f"layer {layer.id}: concat inputs differ spatially {srcs}")
        return (sum(s[0] for s in srcs), h, w)
    # pointwise-add / pointwise-mul broadcast channels of size 1
    out_c = max(s[0] for s in srcs)
    for s in srcs:
        if s[1:] != (h, w) or s[0] not in (1, out_c):
            raise GraphError(f"layer {layer.id}: incompatible pointwise shapes {srcs}")
    return (out_c, h, w)


@dataclass(frozen=True)
class WeightTensor:
    layer_id: str
    dims: tuple[int, int, int, int]
    values: np.ndarray

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        values = np.ascontiguousarray(self.values, dtype=np.float32).reshape(-1)
        if values.size != int(np.prod(dims)):
            raise WeightFormatError(
                f"layer {self.layer_id}: {values.size} values for dims {dims}"
            )
        values.flags.writeable = False
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "values", values)

    @classmethod
    def from_gemm(cls, layer_id, dims, matrix):
        return cls(layer_id, dims, np.asarray(matrix, dtype=np.float32).reshape(-1))

    @property
    def gemm_shape(self) -> tuple[int, int]:
        m, n, kh, kw = self.dims
        return (m, n * kh * kw)

    @property
    def gemm_view(self) -> np.ndarray:
        return self.values.reshape(self.gemm_shape)

    @property
    def tensor(self) -> np.ndarray:
        return self.values.reshape(self.dims)

    def __eq__(self, other):
        if not isinstance(other, WeightTensor):
            return NotImplemented
        return (
            self.layer_id == other.layer_id
            and self.dims == other.dims
            and self.values.tobytes() == other.values.tobytes()
        )

    __hash__ = None


def column_position(c: int, kernel: tuple[int, int]) -> tuple[int, int, int]:
    """GEMM column index -> (channel, kh, kw)."""
    kh, kw = kernel
    return (c // (kh * kw), (c % (kh * kw)) // kw, c % kw)


# --------------------------------------------------------------------------
# accounting


@dataclass(frozen=True)
class WeightCount:
    per_layer: dict
    total: int
    total_params: int
    weights_3x3: int

    @property
    def fraction_3x3(self) -> float:
        return self.weights_3x3 / self.total if self.total else 0.0


@dataclass(frozen=True)
class FlopCount:
    per_layer: dict
    total: int
    flops_3x3: int

    @property
    def fraction_3x3(self) -> float:
        return self.flops_3x3 / self.total if self.total else 0.0

    @property
    def fraction_other(self) -> float:
        return (self.total - self.flops_3x3) / self.total if self.total else 0.0


def count_weights(model: ModelGraph) -> WeightCount:
    """Kernel weights per layer, their total, and the total including aux params."""
    per_layer = {layer.id: layer.n_weights for layer in model.weight_layers}
    total = sum(per_layer.values())
    aux = sum(layer.filters * layer.aux_params for layer in model.weight_layers)
    w3 = sum(layer.n_weights for layer in model.weight_layers if layer.is_3x3)
    return WeightCount(per_layer, total, total + aux, w3)


def count_flops(model: ModelGraph, input_shape=None) -> FlopCount:
    """FLOPs with one multiply-accumulate counted as 2.

    Pointwise add/mul cost one FLOP per output element and extra operand
    (single-input ones act against a constant); data-movement layers
    (concat, upsample, reshape, pooling) cost nothing.
    """
    shapes = model.infer_shapes(input_shape)
    per_layer = {}
    for layer in model.layers:
        c, h, w = shapes[layer.id]
        if layer.has_weights:
            per_layer[layer.id] = 2 * layer.n_weights * h * w
        elif layer.kind in ("pointwise-add", "pointwise-mul"):
            per_layer[layer.id] = c * h * w * max(1, len(layer.inputs) - 1)
        else:
            per_layer[layer.id] = 0
    f3 = sum(per_layer[layer.id] for layer in model.layers if layer.is_3x3)
    return FlopCount(per_layer, sum(per_layer.values()), f3)


# --------------------------------------------------------------------------
# model text format


def _format_layer(layer: LayerSpec) -> str:
    parts = [f"id={layer.id}", f"kind={layer.kind}"]
    if layer.has_weights:
        parts += [
            f"filters={layer.filters}",
            f"in_channels={layer.in_channels}",
            f"kernel={layer.kernel[0]}x{layer.kernel[1]}",
        ]
    elif layer.kind == "maxpool":
        parts.append(f"kernel={layer.kernel[0]}x{layer.kernel[1]}")
    parts += [f"stride={layer.stride}", f"padding={layer.padding}"]
    if layer.activation != "linear":
        parts.append(f"act={layer.activation}")
    if layer.aux_params:
        parts.append(f"aux={layer.aux_params}")
    parts.append("inputs=" + (",".join(layer.inputs) if layer.inputs else "-"))
    return "layer " + " ".join(parts)


def _format_branch(bs: BranchStructure) -> str:
    parts = [f"id={bs.id}", f"kind={bs.kind}"]
    parts.append("branches=" + "|".join(",".join(b) for b in bs.branches))
    if bs.data_bytes:
        parts.append("bytes=" + ",".join(str(b) for b in bs.data_bytes))
    return "branch " + " ".join(parts)


def dumps_model(model: ModelGraph) -> str:
    lines = [f"{MODEL_MAGIC} {MODEL_VERSION}", "input " + " ".join(map(str, model.input_shape))]
    lines += [_format_layer(layer) for layer in model.layers]
    lines += [_format_branch(bs) for bs in model.branch_structures]
    return "\n".join(lines) + "\n"


def save_model(model: ModelGraph, path) -> None:
    Path(path).write_text(dumps_model(model))


def _parse_fields(tokens, lineno):
    fields = {}
    for tok in tokens:
        if "=" not in tok:
            raise ModelFormatError(f"expected key=value, got '{tok}'", lineno)
        key, value = tok.split("=", 1)
        if key in fields:
            raise ModelFormatError("duplicate field", lineno, key)
        fields[key] = value
    return fields


def _int_field(fields, key, lineno, default=None):
    if key not in fields:
        if default is None:
            raise ModelFormatError("missing field", lineno, key)
        return default
    try:
        return int(fields.pop(key))
    except ValueError:
        raise ModelFormatError("not an integer", lineno, key) from None


def _kernel_field(fields, lineno):
    if "kernel" not in fields:
        return (1, 1)
    raw = fields.pop("kernel")
    try:
        kh, kw = (int(v) for v in raw.lower().split("x"))
    except ValueError:
        raise ModelFormatError(f"kernel must look like 3x3, got '{raw}'", lineno, "kernel") from None
    return (kh, kw)


def _parse_layer(fields, lineno) -> LayerSpec:
    for key in ("id", "kind"):
        if key not in fields:
            raise ModelFormatError("missing field", lineno, key)
    kind = fields.pop("kind")
    if kind not in LAYER_KINDS:
        raise ModelFormatError(f"unknown layer kind '{kind}'", lineno, "kind")
    lid = fields.pop("id")
    weighted = kind in WEIGHT_KINDS
    spec = dict(
        id=lid,
        kind=kind,
        filters=_int_field(fields, "filters", lineno, None if weighted else 0),
        in_channels=_int_field(fields, "in_channels", lineno, None if weighted else 0),
        kernel=_kernel_field(fields, lineno),
        stride=_int_field(fields, "stride", lineno, 1),
        padding=_int_field(fields, "padding", lineno, 0),
        activation=fields.pop("act", "linear"),
        aux_params=_int_field(fields, "aux", lineno, 0),
    )
    raw_inputs = fields.pop("inputs", "-")
    spec["inputs"] = () if raw_inputs == "-" else tuple(raw_inputs.split(","))
    if fields:
        raise ModelFormatError("unexpected field", lineno, sorted(fields)[0])
    try:
        return LayerSpec(**spec)
    except GraphError as exc:
        raise ModelFormatError(str(exc), lineno) from None


def _parse_branch(fields, lineno) -> BranchStructure:
    for key in ("id", "kind", "branches"):
        if key not in fields:
            raise ModelFormatError("missing field", lineno, key)
    branches = tuple(tuple(b.split(",")) for b in fields.pop("branches").split("|"))
    data_bytes = ()
    if "bytes" in fields:
        try:
            data_bytes = tuple(int(v) for v in fields.pop("bytes").split(","))
        except ValueError:
            raise ModelFormatError("byte counts must be integers", lineno, "bytes") from None
    bid, kind = fields.pop("id"), fields.pop("kind")
    if fields:
        raise ModelFormatError("unexpected field", lineno, sorted(fields)[0])
    try:
        return BranchStructure(bid, kind, branches, data_bytes)
    except GraphError as exc:
        raise ModelFormatError(str(exc), lineno) from None


def loads_model(text: str) -> ModelGraph:
    layers, branches = [], []
    input_shape = None
    header_seen = False
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        if not header_seen:
            if tokens[0] != MODEL_MAGIC or len(tokens) != 2:
                raise ModelFormatError(f"missing '{MODEL_MAGIC} <version>' header", lineno)
            if tokens[1] != str(MODEL_VERSION):
                raise ModelFormatError(f"unsupported version {tokens[1]}", lineno)
            header_seen = True
        elif tokens[0] == "input":
            try:
                input_shape = tuple(int(v) for v in tokens[1:])
            except ValueError:
                raise ModelFormatError("input shape must be integers", lineno, "input") from None
            if len(input_shape) != 3:
                raise ModelFormatError("input needs channels height width", lineno, "input")
        elif tokens[0] == "layer":
            layers.append((_parse_layer(_parse_fields(tokens[1:], lineno), lineno), lineno))
        elif tokens[0] == "branch":
            branches.append(_parse_branch(_parse_fields(tokens[1:], lineno), lineno))
        else:
            raise ModelFormatError(f"unknown record type '{tokens[0]}'", lineno)
    if not header_seen:
        raise ModelFormatError("empty model file")
    if input_shape is None:
        raise ModelFormatError("missing input record")
    ids = {layer.id for layer, _ in layers}
    for layer, lineno in layers:
        for src in layer.inputs:
            if src not in ids:
                raise ModelFormatError(f"input '{src}' does not resolve", lineno, "inputs")
    return ModelGraph(tuple(layer for layer, _ in layers), input_shape, tuple(branches))


def load_model(path) -> ModelGraph:
    return loads_model(Path(path).read_text())


# --------------------------------------------------------------------------
# weight binary format


def save_weights(weights: dict, path) -> None:
    """Little-endian: magic, u32 version, u32 count, then per layer
    ``u16 id_len, id, 4 x u32 dims, f32 values``."""
    chunks = [WEIGHTS_MAGIC, struct.pack("<II", WEIGHTS_VERSION, len(weights))]
    for lid, wt in weights.items():
        raw_id = lid.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw_id)) + raw_id)
        chunks.append(struct.pack("<4I", *wt.dims))
        chunks.append(wt.values.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_weights(path, model: ModelGraph | None = None) -> dict[str, WeightTensor]:
    data = Path(path).read_bytes()
    if data[:4] != WEIGHTS_MAGIC:
        raise WeightFormatError("bad magic: not a weight file")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise WeightFormatError(f"truncated weight file at byte {pos}")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    version, count = struct.unpack("<II", take(8))
    if version != WEIGHTS_VERSION:
        raise WeightFormatError(f"unsupported weight file version {version}")
    out = {}
    for _ in range(count):
        (id_len,) = struct.unpack("<H", take(2))
        lid = take(id_len).decode("utf-8")
        dims = struct.unpack("<4I", take(16))
        n = int(np.prod(dims))
        values = np.frombuffer(take(4 * n), dtype="<f4").astype(np.float32)
        if model is not None:
            if lid not in model or not model[lid].has_weights:
                raise WeightFormatError(f"weights for unknown layer '{lid}'")
            if model[lid].dims != dims:
                raise WeightFormatError(
                    f"layer {lid}: file dims {dims} do not match model dims {model[lid].dims}"
                )
        out[lid] = WeightTensor(lid, dims, values)
    if pos != len(data):
        raise WeightFormatError(f"{len(data) - pos} trailing bytes after last record")
    return out


def random_weights(model: ModelGraph, seed=0, scale="he") -> dict[str, WeightTensor]:
    rng = np.random.default_rng(seed)
    out = {}
    for layer in model.weight_layers:
        m, n, kh, kw = layer.dims
        std = np.sqrt(2.0 / (n * kh * kw)) if scale == "he" else float(scale)
        out[layer.id] = WeightTensor(layer.id, layer.dims, rng.normal(0.0, std, m * n * kh * kw))
    return out
