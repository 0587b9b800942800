"""AtrousLoRA vessel segmentation at desk scale, on a small numpy autodiff engine."""

import os as _os

# BLAS reads these at import time, so they must be set before numpy loads.
_threads = _os.environ.get("ATROUS_LAB_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

from .boxes import BBoxPrompt  # noqa: E402
from .config import AdapterConfig, ModelConfig, OptimConfig, RunConfig  # noqa: E402
from .errors import AtrousLabError  # noqa: E402
from .gradcheck import gradcheck  # noqa: E402
from .model import VesselSegmenter, build_model  # noqa: E402
from .peft import AtrousLoraAdapter, count_parameters  # noqa: E402
from .tensor import Precision, Tape, Tensor, backward, no_grad  # noqa: E402

__version__ = "0.1.0"

__all__ = [
    "AdapterConfig", "AtrousLabError", "AtrousLoraAdapter", "BBoxPrompt", "ModelConfig",
    "OptimConfig", "Precision", "RunConfig", "Tape", "Tensor", "VesselSegmenter",
    "backward", "build_model", "count_parameters", "gradcheck", "no_grad",
]
