"""Exception types shared across the package."""


class SSLFinetuneError(Exception):
    """Base class for all package errors."""


class ConfigError(SSLFinetuneError, ValueError):
    """Invalid configuration value."""


class TooShortError(SSLFinetuneError, ValueError):
    """Input is shorter than the minimum the operation can handle."""


class UnsupportedVariantError(SSLFinetuneError, ValueError):
    """Operation is not defined for this model variant."""


class DataError(SSLFinetuneError, ValueError):
    """Manifest, split or corpus problem."""


class TrainingError(SSLFinetuneError, RuntimeError):
    """Training diverged or could not continue."""
