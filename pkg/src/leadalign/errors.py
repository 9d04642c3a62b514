"""Exception types raised across the package."""


class LeadAlignError(Exception):
    """Base class for all package errors."""

    def __str__(self) -> str:
        # plain message even for KeyError subclasses, which would repr() it
        return str(self.args[0]) if len(self.args) == 1 else super().__str__()


class UnknownLead(LeadAlignError, KeyError):
    pass


class EmptyRecord(LeadAlignError, ValueError):
    pass


class CorruptFile(LeadAlignError, IOError):
    pass


class ManifestMismatch(LeadAlignError, ValueError):
    pass


class DuplicateRecord(LeadAlignError, ValueError):
    pass


class LengthMismatch(LeadAlignError, ValueError):
    pass


class ShapeMismatch(LeadAlignError, ValueError):
    pass


class IncompatibleCheckpoint(LeadAlignError, ValueError):
    pass


class BatchMismatch(LeadAlignError, ValueError):
    pass


class DuplicateId(LeadAlignError, ValueError):
    pass


class NonFiniteLoss(LeadAlignError, FloatingPointError):
    pass


class DatasetTooSmall(LeadAlignError, ValueError):
    pass


class MissingSplit(LeadAlignError, KeyError):
    pass


class TooFewSamples(LeadAlignError, ValueError):
    pass


class UnknownKey(LeadAlignError, KeyError):
    pass


class ConfigTypeError(LeadAlignError, TypeError):
    pass
