"""Exception hierarchy shared by all mrag modules."""


class MragError(Exception):
    """Base class for every error raised by this package."""


class DataError(MragError):
    """Input data is inconsistent or unusable."""


class FormatError(DataError):
    """A file does not follow the documented binary or JSONL layout."""


class DimensionError(DataError):
    """Vectors or matrices have incompatible dimensions."""


class EmptyDatasetError(DataError):
    pass


class DegenerateVectorError(DataError):
    """A zero-norm vector reached an operation that needs a direction."""


class DegenerateInputError(DataError):
    pass


class SingularSystemError(DataError):
    pass


class CorpusStatsError(DataError):
    pass


class ReferenceError(DataError):  # noqa: A001 - shadows the builtin on purpose
    """Generated outputs lack the references needed to score them."""


class EmptyVocabularyError(DataError):
    pass


class ConfigError(MragError):
    """Invalid run configuration (bad flag value, unknown key)."""


class ProviderError(MragError):
    """A generation or embedding provider failed."""


class ProviderTimeoutError(ProviderError, TimeoutError):
    pass


class EmptyGenerationError(ProviderError):
    pass
