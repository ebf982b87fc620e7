"""
Exception hierarchy for hamogen.
Library code raises these; the CLI turns them into exit codes and a JSON line on stderr.
"""

from typing import Dict, Optional


class HamogenError(Exception):
    """Base class for every error raised by hamogen"""

    def __init__(self, message: str, context: Optional[Dict] = None):
        super().__init__(message)
        self.message = message
        self.context = dict(context or {})

    def to_dict(self) -> Dict:
        """Machine-readable form written to stderr by the CLI"""
        return {
            'error': type(self).__name__,
            'message': self.message,
            'context': self.context,
        }

    def __str__(self) -> str:
        if not self.context:
            return self.message
        details = ', '.join(f"{key}={value}" for key, value in self.context.items())
        return f"{self.message} ({details})"


class ConfigError(HamogenError):
    """Invalid system parameters, run config or CLI arguments"""


class NumericalError(HamogenError):
    """Non-finite value met during integration or gradient evaluation"""

    def __init__(self, message: str, stage: Optional[str] = None, coordinate: Optional[str] = None,
                 step: Optional[int] = None, frame: Optional[int] = None):
        context = {}
        if stage is not None:
            context['stage'] = stage
        if coordinate is not None:
            context['coordinate'] = coordinate
        if step is not None:
            context['step'] = step
        if frame is not None:
            context['frame'] = frame
        super().__init__(message, context)
        self.stage = stage
        self.coordinate = coordinate
        self.step = step
        self.frame = frame

    def at_step(self, step: int) -> 'NumericalError':
        """Copy of this error tagged with the failing step index"""
        return NumericalError(self.message, stage=self.stage, coordinate=self.coordinate,
                              step=step, frame=self.frame)

    def at_frame(self, frame: int) -> 'NumericalError':
        """Copy of this error tagged with the failing frame index"""
        return NumericalError(self.message, stage=self.stage, coordinate=self.coordinate,
                              step=self.step, frame=frame)


class SamplingError(HamogenError):
    """Rejection sampling gave up"""


class SingularityError(HamogenError):
    """Coordinate transform undefined at the given state"""


class ShapeError(HamogenError):
    """Dimension mismatch between arrays, networks or datasets"""


class TapeError(HamogenError):
    """Misuse of the autodiff tape"""


class TrainingDiverged(HamogenError):
    """A loss became NaN or infinite"""

    def __init__(self, message: str, epoch: Optional[int] = None, step: Optional[int] = None):
        context = {}
        if epoch is not None:
            context['epoch'] = epoch
        if step is not None:
            context['step'] = step
        super().__init__(message, context)
        self.epoch = epoch
        self.step = step


class CorruptDataset(HamogenError):
    """Manifest and files on disk disagree"""

    def __init__(self, message: str, trajectory: Optional[str] = None):
        super().__init__(message, {'trajectory': trajectory} if trajectory is not None else None)
        self.trajectory = trajectory


class DatasetIoError(HamogenError):
    """Writing a dataset file failed"""

    def __init__(self, message: str, trajectory: Optional[int] = None):
        super().__init__(message, {'trajectory': trajectory} if trajectory is not None else None)
        self.trajectory = trajectory
