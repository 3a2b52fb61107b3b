class XmtfError(Exception):
    """Base class for errors raised by this package."""


class ContractViolation(XmtfError, ValueError):
    """An argument broke a documented precondition (shape, range, domain)."""


class NonFiniteError(XmtfError, FloatingPointError):
    """A NaN or infinity reached a parameter, gradient or loss."""


class BufferNotReady(XmtfError):
    """The replay buffer holds fewer transitions than requested. Retry later."""


class SessionDone(XmtfError, RuntimeError):
    """A step was requested on a session that has already ended."""
