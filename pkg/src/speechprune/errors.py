"""Exception hierarchy shared across the toolkit.

The CLI maps these onto distinct exit codes (see cli.EXIT_CODES), so new
errors should subclass one of the category roots below rather than raising
bare ValueError.
"""


class SpeechPruneError(Exception):
    """Base class for all toolkit errors."""


class ConfigurationError(SpeechPruneError):
    """Invalid configuration values or an unusable combination of options."""


class RangeError(ConfigurationError):
    """An index or step outside its valid range."""


class SelectorError(ConfigurationError):
    """A projection/target selector that names nothing attachable."""


class PlanError(ConfigurationError):
    """A surgery plan that is structurally invalid for the target model."""


class ShapeError(SpeechPruneError):
    """Tensor dimensions that do not line up."""


class SequenceLengthError(ShapeError):
    """Input sequence longer than the model's maximum."""


class NumericError(SpeechPruneError):
    """Non-finite values where finite ones are required."""


class DegenerateVectorError(NumericError):
    """A zero-norm vector fed to a direction-based computation."""


class DataError(SpeechPruneError):
    """Broken, missing, or inconsistent data artifacts."""


class VocabularyError(DataError):
    """Token id outside the configured vocabulary."""


class CheckpointError(DataError):
    """Unreadable or structurally invalid checkpoint file."""


class ChecksumError(CheckpointError):
    """Checkpoint payload bytes fail their recorded checksum."""


class MetricError(SpeechPruneError):
    """A metric evaluated on inputs where it is undefined."""


class LossUndefinedError(SpeechPruneError):
    """Loss requested over an empty or unpredictable target mask."""
