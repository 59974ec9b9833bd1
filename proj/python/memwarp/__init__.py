"""MemWarp deformable registration (C++ core)."""

from ._memwarp import (
    ConfigError,
    ContractError,
    DataError,
    NumericError,
    UndefinedMetric,
    dice_score,
    evaluate,
    hd95,
    integrate_velocity,
    jacobian_determinant,
    mask_reads,
    phantom_pair,
    register,
    sdlogj,
    synth,
    train,
    warp,
    warp_labels,
)

__all__ = [
    "ConfigError",
    "ContractError",
    "DataError",
    "NumericError",
    "UndefinedMetric",
    "dice_score",
    "evaluate",
    "hd95",
    "integrate_velocity",
    "jacobian_determinant",
    "mask_reads",
    "phantom_pair",
    "register",
    "sdlogj",
    "synth",
    "train",
    "warp",
    "warp_labels",
]
