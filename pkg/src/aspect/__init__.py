"""Adaptive spectral graph contrastive learning with a node-wise reliability gate."""

import importlib

# resolved lazily so the CLI can pin BLAS thread counts before numpy loads
_EXPORTS = {
    "DatasetBundle": "graphcore", "Graph": "graphcore", "generate_mixed_graph": "graphcore",
    "load_dataset": "graphcore", "AspectModel": "model", "ModelConfig": "model",
    "TrainConfig": "trainer", "build_model": "trainer", "train": "trainer",
}

__all__ = list(_EXPORTS)
__version__ = "0.1.0"


def __getattr__(name):
    if name not in _EXPORTS:
        raise AttributeError(f"module 'aspect' has no attribute {name!r}")
    return getattr(importlib.import_module(f".{_EXPORTS[name]}", __name__), name)
