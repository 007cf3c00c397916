"""Exception taxonomy shared across the package."""


class MagnaforgeError(Exception):
    """Base class for all package errors."""


class ParseError(MagnaforgeError):
    """File could not be parsed at all (malformed JSON, wrong container)."""


class SchemaError(MagnaforgeError):
    """Parsed file violates the declared schema or its field-level invariants."""


class GeometryError(MagnaforgeError):
    """Block or magnet geometry violates a construction invariant."""


class InconsistentBlueprint(MagnaforgeError):
    """Blueprint relative poses contradict its connection geometry."""


class GenerationExhausted(MagnaforgeError):
    """Rejection sampling failed to produce a valid blueprint in bounded attempts."""


class PlacementFailure(MagnaforgeError):
    """Could not find a non-overlapping initial block layout in bounded attempts."""


class ShapeError(MagnaforgeError):
    """Array dimensions do not match the configured sizes."""


class LengthMismatch(MagnaforgeError):
    """Aligned sequence arguments have different lengths."""


class NonFiniteLoss(MagnaforgeError):
    """PPO update produced a non-finite loss; the update was aborted."""


class CheckpointMismatch(MagnaforgeError):
    """Checkpoint tensor shapes or metadata do not match the requested network."""
