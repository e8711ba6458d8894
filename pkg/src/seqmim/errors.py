"""Exception types raised across the package."""


class SeqMimError(Exception):
    """Base class for every error raised by seqmim."""


class MalformedLine(SeqMimError):
    def __init__(self, line_no, reason=""):
        self.line_no = line_no
        msg = f"malformed input at line {line_no}"
        if reason:
            msg += f": {reason}"
        super().__init__(msg)


class EmptyFile(SeqMimError):
    pass


class EmptyAfterFilter(SeqMimError):
    pass


class UnknownItem(SeqMimError):
    pass


class SequenceTooShort(SeqMimError):
    def __init__(self, user, length, minimum):
        self.user = user
        super().__init__(f"user {user}: sequence length {length} < {minimum}")


class IndexOutOfRange(SeqMimError):
    pass


class MaskAllFalseRow(SeqMimError):
    pass


class NoRealPositions(SeqMimError):
    pass


class SequenceTooShortForSegment(SeqMimError):
    pass


class VocabExhausted(SeqMimError):
    pass


class NoEligibleDonor(SeqMimError):
    pass


class NonFiniteGradient(SeqMimError):
    pass


class DivergenceDetected(SeqMimError):
    pass


class ConfigMismatch(SeqMimError):
    pass


class CorruptCheckpoint(SeqMimError):
    pass


class ConfigError(SeqMimError):
    pass
