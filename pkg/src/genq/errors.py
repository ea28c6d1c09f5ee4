"""Exception hierarchy shared by all subpackages."""


class GenqError(Exception):
    """Base class for every error raised by this package."""


class ContractError(GenqError, ValueError):
    """A documented precondition was violated by the caller."""


class DimensionError(ContractError):
    """Operand shapes are incompatible."""


class ParameterError(ContractError):
    """A quantization parameter is out of its legal range."""


class StageError(GenqError):
    """An operation was requested at the wrong pipeline stage."""


class FormatError(GenqError):
    """A file does not match its binary format."""


class ScoringError(GenqError):
    """A filter score could not be computed for a sample."""


class RoutingError(GenqError):
    """A filter was applied to a model family it does not support."""


class TransportError(GenqError):
    """The external generation service failed."""

    def __init__(self, message: str, request_id: str):
        super().__init__(f"[request {request_id}] {message}")
        self.request_id = request_id


class NonFiniteLossError(GenqError, FloatingPointError):
    """Training produced a NaN or infinite loss."""


class ConfigError(GenqError):
    """An experiment configuration is invalid."""
