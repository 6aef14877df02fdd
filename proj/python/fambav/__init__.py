"""Python access to the fambav C++ core."""

from ._core import (
    ConfigError,
    Error,
    FormatError,
    PlanError,
    build_plan,
    fuse_layer,
    load_cifar100,
    match_pairs,
    parity_configs,
    phi1,
    selective_scan,
    token_steps,
)

__all__ = [
    "ConfigError",
    "Error",
    "FormatError",
    "PlanError",
    "build_plan",
    "fuse_layer",
    "load_cifar100",
    "match_pairs",
    "parity_configs",
    "phi1",
    "selective_scan",
    "token_steps",
]
__version__ = "0.1.0"
