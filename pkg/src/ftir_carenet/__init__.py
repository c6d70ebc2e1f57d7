"""Dual-path CNN pipeline for FTIR hyperspectral biopsy imaging.

Modules: ``spectra`` (containers, cube I/O, synthetic data), ``preprocess``
(segmentation, outlier removal, smoothing, EMSC, patches), ``labels``
(task encodings), ``autonn`` (numpy layers, losses, Adam, schedule),
``carenet`` (network, training), ``explain`` and ``evaluate``.
"""

from .carenet import CaReNetConfig, CaReNetEstimator, DualPathNetwork, build_carenet, train_model
from .labels import SCHEMAS, TaskSchema, decode_output, encode_label, get_schema
from .preprocess import FTIRPreprocessor, PipelineConfig, extract_patches, segment_tissue
from .spectra import HyperMosaic, Patch, ReferenceLibrary, SynthConfig, WavenumberAxis, read_cube, synth_dataset, write_cube

__version__ = "0.1.0"

__all__ = [
    "CaReNetConfig",
    "CaReNetEstimator",
    "DualPathNetwork",
    "FTIRPreprocessor",
    "HyperMosaic",
    "Patch",
    "PipelineConfig",
    "ReferenceLibrary",
    "SCHEMAS",
    "SynthConfig",
    "TaskSchema",
    "WavenumberAxis",
    "build_carenet",
    "decode_output",
    "encode_label",
    "extract_patches",
    "get_schema",
    "read_cube",
    "segment_tissue",
    "synth_dataset",
    "train_model",
    "write_cube",
]
