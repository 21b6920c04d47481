from typing import Optional, Sequence


class VmivError(Exception):
    """Base class for every error raised by the library."""


class InputError(VmivError, ValueError):
    pass


class SingularDesignError(VmivError):
    def __init__(self, message: str, suggested_family: Optional[Sequence[int]] = None):
        super().__init__(message)
        self.suggested_family = list(suggested_family) if suggested_family is not None else None


class WeakIdentificationError(VmivError):
    """The complier share is too close to zero to divide by."""

    def __init__(self, share: float, t_stat: Optional[float] = None):
        msg = f"complier share {share:.6g} fails the weak-identification gate"
        if t_stat is not None:
            msg += f" (t-stat {t_stat:.3g})"
        super().__init__(msg)
        self.share = share
        self.t_stat = t_stat


class PropertyMError(VmivError):
    def __init__(self, message: str, violations: Sequence = ()):
        super().__init__(message)
        self.violations = list(violations)
