"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes (see ``tgeat.cli``).
"""


class TgeatError(Exception):
    """Base class for all package errors."""


class ConfigError(TgeatError, ValueError):
    pass


class ValidationError(TgeatError, ValueError):
    pass


class ManifestError(ValidationError):
    def __init__(self, path, line: int, message: str):
        self.path = path
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


class AudioError(TgeatError, OSError):
    pass


class DegenerateCorpusError(TgeatError, ValueError):
    pass


class ZeroPowerError(TgeatError, ValueError):
    pass


class TemplateError(ConfigError):
    pass


class UnseenEnvironmentError(TgeatError, KeyError):
    """Raised by providers that cannot represent an environment (e.g. one-hot)."""

    def __str__(self):
        return str(self.args[0]) if self.args else "unseen environment"


class LookupFailure(TgeatError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "lookup failed"


class UnsupportedError(TgeatError, TypeError):
    pass


class NumericError(TgeatError, FloatingPointError):
    pass


class DependencyError(TgeatError, RuntimeError):
    """An upstream artifact (checkpoint, corpus, eval set) is missing or stale."""
