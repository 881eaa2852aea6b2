class InvalidArgument(ValueError):
    pass


class FormatError(ValueError):
    """Malformed cloud, index or checkpoint file."""


class CheckpointError(FormatError):
    pass


class ConfigError(ValueError):
    pass


class ModelMismatch(ValueError):
    """Checkpoint shapes disagree with the configured model."""


class NumericFailure(ArithmeticError):
    """Non-finite activations or loss.

    ``block`` is the transformer block index where the failure was seen
    (None when unknown), ``step`` the optimizer step when raised from training.
    """

    def __init__(self, message, block=None, step=None):
        super().__init__(message)
        self.block = block
        self.step = step
