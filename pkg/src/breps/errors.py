"""Exception hierarchy shared across the package."""


class BrepsError(Exception):
    """Base class for all domain errors raised by this package."""


class InvalidInputError(BrepsError, ValueError):
    """Malformed input: non-finite coordinates, shape mismatch, bad flag."""


class InvalidGroundTruthError(InvalidInputError):
    """Reference box is degenerate (zero width or height)."""


class EmptyMaskError(BrepsError, ValueError):
    """Mask contains no foreground pixels."""


class InsufficientDataError(BrepsError, ValueError):
    """Too few samples for the requested statistic or fit."""


class DegenerateSampleError(BrepsError, ValueError):
    """Sample has zero variance; distribution fit is undefined."""


class InvalidParameterError(BrepsError, ValueError):
    """Out-of-range algorithm parameter (step size, counts, ...)."""


class UndefinedCorrelationError(BrepsError, ValueError):
    """Correlation undefined because one variable has zero variance."""


class BudgetExceededError(BrepsError):
    """Exhaustive sweep would exceed the evaluation budget."""

    def __init__(self, message: str, suggested_stride: int):
        super().__init__(message)
        self.suggested_stride = suggested_stride


class AnnotationParseError(BrepsError, ValueError):
    """Malformed annotation CSV row."""

    def __init__(self, message: str, line_number: int):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class AttackAbortedError(BrepsError):
    """Model evaluation failed mid-attack; carries the partial trajectory."""

    def __init__(self, message: str, trajectory: list):
        super().__init__(message)
        self.trajectory = trajectory


class BridgeError(BrepsError):
    """Base class for wire-protocol client failures."""


class BridgeTimeoutError(BridgeError):
    """Server did not answer within the configured timeout."""


class BridgeProtocolError(BridgeError):
    """Reply violated the message schema; message names the bad field."""


class BridgeVersionError(BridgeError):
    """Handshake failed: incompatible protocol version."""


class BridgeServerError(BridgeError):
    """Server answered with an error frame."""

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code
        self.server_message = message


class UnknownImageError(BridgeServerError):
    """Eval referenced an image_id the server has not registered."""
