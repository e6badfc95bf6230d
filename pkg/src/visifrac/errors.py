"""Exception hierarchy shared by all modules."""


class VisifracError(Exception):
    """Base class for library errors."""


class ParameterError(VisifracError, ValueError):
    """A numeric parameter is outside its admissible range."""


class ResolutionError(VisifracError, ValueError):
    """A requested scale is finer than the data resolution or a depth cap is exceeded."""


class DomainError(VisifracError, ValueError):
    """Input geometry is invalid (empty set, escaping attractor, bad frame...)."""


class ConfigError(VisifracError):
    """Invalid experiment configuration."""
