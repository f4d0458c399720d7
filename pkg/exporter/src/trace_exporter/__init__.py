"""Trace exporter: run toy multi-exit models and emit JSONL inference traces."""

from .dataset import DATASETS, make_dataset, write_image
from .export import ExportResult, ExportSpec, export, load_spec, validate_trace_obj
from .macs import count_macs, cumulative_exit_macs
from .model import MODELS, MultiExitNet, build_model

__all__ = [
    "DATASETS",
    "ExportResult",
    "ExportSpec",
    "MODELS",
    "MultiExitNet",
    "build_model",
    "count_macs",
    "cumulative_exit_macs",
    "export",
    "load_spec",
    "make_dataset",
    "validate_trace_obj",
    "write_image",
]
