"""Packed storage and sparse execution of block-punched layers.

Names are resolved lazily: the lowering helpers are imported by the training
code, which the packed format in turn depends on through the pruner.
"""
from importlib import import_module

_EXPORTS = {
    "Autotuner": "autotune", "autotune": "autotune", "candidate_space": "autotune",
    "RunResult": "executor", "TraceEntry": "executor", "dense_reference": "executor",
    "run_model": "executor",
    "BACKENDS": "kernels", "COMPILED_AVAILABLE": "kernels", "DEFAULT_BACKEND": "kernels",
    "DEFAULT_TUNING": "ops", "TuningConfig": "ops", "sparse_conv": "ops", "sparse_gemm": "ops",
    "sparse_gemm_counted": "ops",
    "PackedFormatError": "packed", "PackedSparseLayer": "packed", "decode": "packed",
    "encode": "packed", "load_packed": "packed", "reorder_blocks": "packed", "save_packed": "packed",
}
__all__ = list(_EXPORTS)


def __getattr__(name):
    if name not in _EXPORTS:
        raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
    return getattr(import_module(f".{_EXPORTS[name]}", __name__), name)
