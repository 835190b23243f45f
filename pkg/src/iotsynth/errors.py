"""Exception types raised across the toolkit."""


class IotSynthError(Exception):
    """Base class for all toolkit errors."""


class CaptureParseError(IotSynthError):
    """Capture file is truncated, corrupt or in an unknown format."""


class EmptyCaptureError(IotSynthError):
    """No addressed packets were available to infer a device address."""


class LengthMismatchError(IotSynthError, ValueError):
    pass


class InvalidTokenError(IotSynthError, ValueError):
    pass


class ConfigError(IotSynthError, ValueError):
    pass


class DataError(IotSynthError, ValueError):
    pass


class VocabMismatchError(IotSynthError, ValueError):
    pass


class ModeCollapseError(IotSynthError):
    """Generated samples kept failing the variety check after every recovery attempt."""


class StageError(IotSynthError):
    def __init__(self, stage: str, device: str | None, cause: BaseException):
        where = f"{stage}[{device}]" if device else stage
        super().__init__(f"stage {where} failed: {cause}")
        self.stage = stage
        self.device = device
        self.cause = cause
