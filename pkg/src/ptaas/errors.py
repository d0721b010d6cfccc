"""Exception hierarchy shared by every ptaas module."""


class PTaaSError(Exception):
    """Base class for all ptaas errors."""


# sketching
class EmptyInput(PTaaSError, ValueError):
    pass


class DegenerateInput(PTaaSError, ValueError):
    pass


class IncompatibleSketches(PTaaSError, ValueError):
    pass


# differential privacy
class InvalidBudget(PTaaSError, ValueError):
    pass


class BudgetExhausted(PTaaSError):
    def __init__(self, spent: float, requested: float, cap: float):
        super().__init__(
            f"spent {spent} + requested {requested} exceeds cap {cap}"
        )
        self.spent = spent
        self.requested = requested
        self.cap = cap


# envelope / wire
class SchemaError(PTaaSError, ValueError):
    pass


class NonceReuse(PTaaSError):
    pass


class AuthFailure(PTaaSError):
    """Authentication tag did not verify under the registered key."""


class IntegrityFailure(AuthFailure):
    """Frame or artifact bytes were modified in transit or at rest.

    A wrong key and a modified ciphertext are indistinguishable to AEAD, so
    this subclasses AuthFailure and both conditions raise it.
    """


class UnknownDevice(PTaaSError):
    pass


class MalformedFrame(PTaaSError, ValueError):
    pass


# corpus
class IngestError(PTaaSError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class EmptyCorpus(PTaaSError):
    pass


class CorruptIndex(PTaaSError):
    pass


class StoreVersionError(PTaaSError):
    pass


class StoreCorrupt(PTaaSError):
    pass


# learning
class EmptyTrainingSet(PTaaSError, ValueError):
    pass


class SpecMismatch(PTaaSError, ValueError):
    pass


class NumericalError(PTaaSError, ValueError):
    pass


class Diverged(PTaaSError):
    pass


class ModelFormatError(PTaaSError, ValueError):
    pass


# protocol
class Retryable(PTaaSError):
    """Transport-level failure; the round may be retried."""


class VerifyFailed(PTaaSError):
    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason
        self.detail = detail


class ConfigError(PTaaSError):
    pass
