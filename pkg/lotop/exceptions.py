"""Custom warnings and exceptions."""


class LotopError(Exception):
    """The base class for all errors raised by lotop."""


class FormatError(LotopError, ValueError):
    """A file does not follow the expected binary or text layout."""


class ConfigError(LotopError, ValueError):
    """A configuration file or mapping contains unknown keys or bad values."""


class RegistrationError(LotopError, RuntimeError):
    """The energy of a registration problem cannot be evaluated."""


class ConvergenceWarning(Warning):
    pass
