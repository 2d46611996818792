class SynAlignError(Exception):
    """Base class for domain errors; the CLI maps these to exit code 1."""


class FormatError(SynAlignError, ValueError):
    pass


class ConfigError(SynAlignError, ValueError):
    pass


class SplitError(SynAlignError, ValueError):
    pass


class ShapeError(SynAlignError, ValueError):
    pass


class TrainingError(SynAlignError, RuntimeError):
    pass
