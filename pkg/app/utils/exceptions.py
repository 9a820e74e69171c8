from typing import Any, Dict, List, Optional


class TactileError(Exception):
    """Base class for every error raised by the tactile pipeline"""

    exit_code = 1

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.message = message
        self.details = details or {}

    def to_dict(self) -> Dict[str, Any]:
        return {
            'error': type(self).__name__,
            'message': self.message,
            'details': self.details,
        }


class ConfigError(TactileError):
    exit_code = 2

    def __init__(self, message: str, keys: Optional[List[str]] = None):
        super().__init__(message, {'keys': sorted(keys or [])})
        self.keys = sorted(keys or [])


class ContractViolation(TactileError):
    pass


class DatasetError(TactileError):
    pass


class TrainingDivergedError(TactileError):
    pass


class SplitError(TactileError):
    pass


class LeakageError(TactileError):
    pass


class DegeneratePredictionError(TactileError):
    pass


class MarkerTrackingError(TactileError):
    pass


class ResolutionError(TactileError):
    exit_code = 2


class ArtifactMismatchError(TactileError):
    exit_code = 2
