"""Ensemble super-resolution of synthetic 4D flow MRI.

Subpackages follow the data path: ``phantoms`` (analytic HR flow),
``synth`` (k-space degradation), ``patches`` (training windows),
``autodiff`` and ``models`` (networks), ``training`` and ``estimators``
(fitting, bagging, stacking) and ``evaluate`` (metrics, stitching, reports).
"""
__version__ = "0.1.0"

from .estimators import BaggingSR, StackingSR, SuperResolutionNet  # noqa: E402
from .evaluate import EvalReport, evaluate_fields, evaluate_patches, relative_error  # noqa: E402
from .models import BaseModelSpec, MetaModelSpec  # noqa: E402
from .phantoms import PhantomSpec, generate_phantom, generate_sequence  # noqa: E402
from .synth import NoiseSpec, synthesize_pair  # noqa: E402
from .volume import FlowSample, VolumeGrid, read_sample, write_sample  # noqa: E402

__all__ = [
    "BaggingSR", "BaseModelSpec", "EvalReport", "FlowSample", "MetaModelSpec", "NoiseSpec", "PhantomSpec",
    "StackingSR", "SuperResolutionNet", "VolumeGrid", "evaluate_fields", "evaluate_patches",
    "generate_phantom", "generate_sequence", "read_sample", "relative_error", "synthesize_pair",
    "write_sample",
]
