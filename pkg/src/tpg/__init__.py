"""Textile pattern generation from degraded clothing images.

Two stages: a latent disentangled network (content / defect / structured
features) followed by a semi-supervised latent diffusion model conditioned on
those features.
"""

__version__ = "0.1.0"


class TPGError(Exception):
    """Base class for package errors. ``code`` is a stable machine-readable tag."""

    code = "TPG_ERROR"


class ConfigError(TPGError, ValueError):
    code = "CONFIG_INVALID"


class ShapeError(TPGError, ValueError):
    code = "SHAPE_MISMATCH"


class DatasetError(TPGError):
    code = "DATASET_INVALID"


class StateError(TPGError, RuntimeError):
    code = "STATE_INVALID"


class BatchCompositionError(TPGError, ValueError):
    code = "BATCH_COMPOSITION"


class CheckpointError(TPGError):
    code = "CHECKPOINT_INVALID"


class MetricUndefinedError(TPGError, ValueError):
    code = "METRIC_UNDEFINED"
