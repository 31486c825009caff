"""LMI-guided score-based diffusion for zero-shot cross-modality translation."""

from .errors import (
    ConfigurationError,
    DegenerateInputError,
    FormatError,
    NumericalDivergenceError,
)
from .image import extract_patch, load_image, quantize, save_image
from .lmi import CondMap, LMIConfig, entropy, histogram, joint_histogram, lmi_map, lmi_point, mutual_information
from .sde import NoiseSchedule, SamplerConfig, dsm_loss, dsm_target, em_translate, perturb, sdedit_translate
from .estimators import KMeansSegmenter, LMIDiffusionTranslator, SDEditTranslator

__version__ = "0.1.0"

__all__ = [
    "CondMap",
    "ConfigurationError",
    "DegenerateInputError",
    "FormatError",
    "KMeansSegmenter",
    "LMIConfig",
    "LMIDiffusionTranslator",
    "NoiseSchedule",
    "NumericalDivergenceError",
    "SDEditTranslator",
    "SamplerConfig",
    "dsm_loss",
    "dsm_target",
    "em_translate",
    "entropy",
    "extract_patch",
    "histogram",
    "joint_histogram",
    "lmi_map",
    "lmi_point",
    "load_image",
    "mutual_information",
    "perturb",
    "quantize",
    "save_image",
    "sdedit_translate",
]
