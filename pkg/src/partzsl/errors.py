"""Exception types shared across the package."""


class InputError(ValueError):
    """An input failed validation (bad shape, bad value, bad file, bad config)."""


class DimensionMismatch(InputError):
    """Array shapes disagree with the declared dimensions."""


class ContainerFormatError(InputError):
    """A binary matrix container is malformed or truncated."""


class BundleError(InputError):
    """A dataset bundle manifest cannot be resolved."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values.

    ``iterate`` holds the offending parameter vector when known;
    ``last_model`` holds the last finite model when training fails mid-run.
    """

    def __init__(self, message, iterate=None, last_model=None):
        super().__init__(message)
        self.iterate = iterate
        self.last_model = last_model
