"""Exception hierarchy shared by every subsystem."""


class SegError(Exception):
    """Base class for all package errors."""


class ShapeError(SegError, ValueError):
    """An operand has the wrong shape; the message names the offending axis."""


class EmptyLossError(SegError):
    """Every target pixel was ignored, so the mean loss is undefined."""


class GraphError(SegError, RuntimeError):
    """Backward was requested through a detached or already consumed graph."""


class NonFiniteError(SegError, FloatingPointError):
    """A NaN or Inf surfaced in a tensor that must stay finite."""


class PaddingRequiredError(SegError, ValueError):
    """Spatial input size is not a multiple of the model's required block size."""


class ConfigError(SegError, ValueError):
    """Invalid configuration value."""


class CheckpointError(SegError):
    """Checkpoint manifest and payload disagree, or do not match the model."""


class SceneFormatError(SegError):
    """A scene container on disk is malformed."""


class ZeroVarianceError(SegError, ValueError):
    """A channel has no spread, so Z-score statistics cannot be formed."""


class SamplerError(SegError):
    """Patch extraction could not satisfy its contract."""


class LabelError(SegError, ValueError):
    """Label derivation failed (unknown polygon ids or codes)."""
