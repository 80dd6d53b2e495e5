"""Multi-task aspect-based sentiment tagger with iterative knowledge routing."""

from . import (config, data, layers, metrics, model, routing, synth, tensor,
               training)

__all__ = ["config", "data", "layers", "metrics", "model", "routing",
           "synth", "tensor", "training"]
__version__ = "0.1.0"
