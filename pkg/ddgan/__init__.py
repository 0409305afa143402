"""ddgan package entry."""

__all__ = [
    "config",
    "models",
    "ingest",
    "numerics",
    "schedule",
    "posterior",
    "oracle",
    "nets",
    "optim",
    "training",
    "checkpoint",
    "sampling",
    "evaluation",
    "presets",
    "cli",
]

__version__ = "0.1.0"
