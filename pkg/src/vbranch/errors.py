"""Exception hierarchy shared by every vbranch module."""


class VBranchError(Exception):
    """Base class for all library errors."""


class ShapeError(VBranchError, ValueError):
    pass


class PartitionError(VBranchError, ValueError):
    pass


class ModelError(VBranchError, ValueError):
    pass


class ParamError(VBranchError, ValueError):
    pass


class DataError(VBranchError, ValueError):
    pass


class BatchError(VBranchError, ValueError):
    pass


class UnassignableError(VBranchError, ValueError):
    """Keypoints are missing or degenerate, so no orientation can be computed."""


class AffectedParamError(VBranchError, FloatingPointError):
    """Raised when an optimizer step sees non-finite gradients.

    ``names`` lists the parameters whose gradients were not finite; the step
    is aborted before any parameter or moment is touched.
    """

    def __init__(self, names):
        self.names = list(names)
        super().__init__("non-finite gradient for: " + ", ".join(self.names))


class ConfigError(VBranchError, ValueError):
    pass
