from typing import Optional


class StragglerError(Exception):
    """Base class for every error raised by the control plane."""


class ConfigurationError(StragglerError):
    def __init__(self, message: str, violations: Optional[list] = None):
        super().__init__(message)
        self.violations = violations or []


class ProtocolError(StragglerError):
    pass


class IllegalTransition(ProtocolError):
    """A shard state change the ledger does not allow."""


class OutOfOrder(ProtocolError):
    pass


class LateEnvelope(ProtocolError):
    pass


class Infeasible(StragglerError):
    def __init__(self, message: str, nearest: Optional[tuple[int, int]] = None):
        super().__init__(message)
        # (largest achievable total below B, smallest achievable total above B)
        self.nearest = nearest


class MonitorUnavailable(StragglerError):
    def __init__(self, message: str, delivered: int = 0):
        super().__init__(message)
        # records of the batch the monitor acknowledged before the failure
        self.delivered = delivered


class JobAborted(StragglerError):
    pass
