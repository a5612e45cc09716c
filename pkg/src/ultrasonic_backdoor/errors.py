"""Exception hierarchy shared by every stage of the pipeline."""


class BackdoorError(Exception):
    """Base class for all toolkit errors."""


class AudioFormatError(BackdoorError):
    """Malformed or unreadable WAV container."""


class UnsupportedFormatError(AudioFormatError):
    """Valid WAV that uses a layout we refuse (stereo, non-16-bit)."""


class RateMismatchError(BackdoorError):
    pass


class BoundsError(BackdoorError):
    pass


class NyquistError(BackdoorError):
    """Sample rate too low to represent the requested frequency."""


class TooShortError(BackdoorError):
    pass


class DatasetError(BackdoorError):
    pass


class PoisonConfigError(BackdoorError):
    pass


class ShapeError(BackdoorError):
    pass


class TrainingDivergedError(BackdoorError):
    def __init__(self, epoch: int, message: str = "loss became non-finite"):
        super().__init__(f"{message} at epoch {epoch}")
        self.epoch = epoch


class EvaluationError(BackdoorError):
    pass


class CheckpointError(BackdoorError):
    pass
