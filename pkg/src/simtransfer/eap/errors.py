class Error(Exception):
    """Base class for exceptions in this module."""
    pass


class ConfigurationError(Error):
    """Exception raised when an experiment configuration, an override or an
    ablation spec names an unknown field or carries an invalid value."""
    pass


class ContractError(Error):
    """Exception raised when an operation is called outside its contract, e.g.
    stepping an episode that is already done or running backward without a
    cached forward pass."""
    pass


class DimensionError(Error):
    """Exception raised when the arguments of simtransfer-eap functions have a
    mismatch of the necessary dimensionality."""
    pass


class NonFiniteError(Error):
    """Exception raised when a loss, gradient or parameter becomes NaN or
    infinite."""
    pass


class ParityError(Error):
    """Exception raised when results that must share a population or a sample
    budget are compared although they do not."""
    pass


class CheckpointError(Error):
    """Exception raised when a checkpoint is missing, malformed or written by an
    unsupported format version."""
    pass
