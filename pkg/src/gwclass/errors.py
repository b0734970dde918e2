"""Exception hierarchy.

Every error carries the process exit code the CLI maps it to:
2 for configuration problems, 3 for bad input data, 4 for numerical
degeneracies.
"""


class GwClassError(Exception):
    exit_code = 1


class ConfigError(GwClassError):
    exit_code = 2


class DataError(GwClassError):
    exit_code = 3


class SchemaError(DataError):
    pass


class ParseError(DataError):
    pass


class IntegrityError(DataError):
    pass


class NumericalError(GwClassError):
    exit_code = 4


class DegenerateVariableError(NumericalError):
    pass


class DegenerateLabelsError(NumericalError):
    pass


class SingularityError(NumericalError):
    pass


class BandwidthError(NumericalError):
    pass


class DegenerateBandwidthError(BandwidthError):
    pass


class DegenerateFieldError(NumericalError):
    pass


class LearnerMismatchError(GwClassError):
    exit_code = 2


class MissingStageError(DataError):
    """A pipeline stage's output is absent; ``stage`` names the subcommand to run."""

    def __init__(self, stage: str, path):
        super().__init__(f"missing output of stage {stage!r}: {path} not found "
                         f"(run `gwclass {stage}` first)")
        self.stage = stage
        self.path = path
