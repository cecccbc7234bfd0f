"""
Error types for the nicguard toolkit
Every error can render itself as a machine-readable record for the CLI
"""

from typing import Any, Dict


class NICGuardError(Exception):
    """Base class for all toolkit errors"""

    def __init__(self, message: str, **details: Any):
        super().__init__(message)
        self.message = message
        self.details = details

    def to_record(self) -> Dict[str, Any]:
        record = {"error": type(self).__name__, "message": self.message}
        record.update(self.details)
        return record


class GeometryError(NICGuardError, ValueError):
    """Shapes that do not fit the codec geometry"""


class ParameterError(NICGuardError, ValueError):
    """Out-of-domain numeric parameters"""


class EntropyModelModeError(NICGuardError):
    """Entropy model call does not match the model mode"""


class AttackSpecError(NICGuardError, ValueError):
    """Invalid attack configuration"""


class ArchitectureMismatchError(NICGuardError):
    """Two models that must share an architecture do not"""


class CheckpointError(NICGuardError):
    """Unreadable or inconsistent checkpoint container"""


class TrainingDivergedError(NICGuardError):
    """Loss became non-finite during optimization"""


class DatasetError(NICGuardError):
    """Empty, unreadable or unsupported image data"""


class ConfigError(NICGuardError):
    """Invalid run configuration"""
