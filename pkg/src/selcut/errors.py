"""Exception types shared across the pipeline."""


class InvalidDataError(ValueError):
    """Input values violate a data invariant (non-finite voxels, out of range)."""


class EmptyResultError(ValueError):
    """An operation that must produce at least one item produced none."""


class InvalidManifestError(ValueError):
    """A subject manifest is malformed or internally inconsistent."""


class GenerationError(ValueError):
    """A phantom cannot be generated from the given spec."""


class NumericalFailureError(RuntimeError):
    """A non-finite activation, loss or gradient was encountered."""


class NoThresholdError(ValueError):
    """No histogram peak is available and no threshold override was given."""


class MissingROIError(ValueError):
    """A threshold rule requires a region-of-interest mask that was not supplied."""
