"""Exception hierarchy shared by every module."""


class SpeechInsertError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(SpeechInsertError, ValueError):
    """Operand shapes are incompatible."""


class ParameterError(SpeechInsertError, ValueError):
    """A hyperparameter or option is out of its valid range."""


class ContractError(SpeechInsertError, RuntimeError):
    """A precondition of an operation was violated by the caller."""


class InputError(SpeechInsertError, ValueError):
    """User supplied data (audio, phonemes, edit position) is unusable."""


class ParseError(SpeechInsertError, ValueError):
    """An alignment or manifest file could not be parsed."""


class ConfigError(SpeechInsertError, ValueError):
    """A run configuration is invalid (e.g. empty dataset)."""


class SkipUtterance(SpeechInsertError):
    """The utterance has no word that can be masked for training."""


class CorpusError(SpeechInsertError, ValueError):
    """An utterance's alignment and audio disagree beyond repair."""
