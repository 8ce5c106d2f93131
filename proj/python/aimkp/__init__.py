"""Progressive modality masking with gradient-based filtering, desk scale.

Thin wrapper around the C++ core; see the project README for the CLI and
file formats.
"""

from ._core import (  # noqa: F401
    KeepMask,
    Sample,
    Dataset,
    ModelParams,
    TrainResult,
    ablate_modality,
    build_stride_mask_1d,
    build_stride_mask_2d,
    cosine_similarity,
    decode,
    f1_at_k,
    filter_switch,
    forward_nll,
    generate_synthetic,
    load_dataset,
    map_at_k,
    masked_nll,
    normalize_phrases,
    porter_stem,
    retention_ratio,
    save_dataset,
    train,
)

__all__ = [
    "KeepMask",
    "Sample",
    "Dataset",
    "ModelParams",
    "TrainResult",
    "ablate_modality",
    "build_stride_mask_1d",
    "build_stride_mask_2d",
    "cosine_similarity",
    "decode",
    "f1_at_k",
    "filter_switch",
    "forward_nll",
    "generate_synthetic",
    "load_dataset",
    "map_at_k",
    "masked_nll",
    "normalize_phrases",
    "porter_stem",
    "retention_ratio",
    "save_dataset",
    "train",
]

__version__ = "0.1.0"
