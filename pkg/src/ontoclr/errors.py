"""Exception hierarchy shared across the package.

Error classes are grouped by the pipeline stage that raises them; the CLI
maps groups to exit codes (config -> 2, data -> 3, numeric -> 4).
"""


class OntoclrError(Exception):
    """Base class for all package errors."""


# -- configuration ----------------------------------------------------------

class ConfigError(OntoclrError):
    pass


class InvalidFractions(ConfigError):
    pass


class DegenerateConfig(ConfigError):
    pass


# -- data / inputs ----------------------------------------------------------

class DataError(OntoclrError):
    pass


class FormatError(DataError):
    pass


class MissingInput(DataError):
    pass


class EmptyCohort(DataError):
    pass


class OffsetOutOfRange(DataError):
    pass


class UnknownChannel(DataError):
    pass


class LabelOutOfRange(DataError):
    pass


# -- ontology ----------------------------------------------------------------

class OntologyError(DataError):
    pass


class DuplicateNode(OntologyError):
    pass


class MissingParent(OntologyError):
    pass


class CycleDetected(OntologyError):
    pass


class MultipleRoots(OntologyError):
    pass


class EmptyOntology(OntologyError):
    pass


class UnknownCode(OntologyError):
    pass


# -- similarity / weighting --------------------------------------------------

class SimilarityError(DataError):
    pass


class EmptySet(SimilarityError):
    pass


class OutOfRangeSimilarity(SimilarityError):
    pass


class BudgetExceeded(SimilarityError):
    pass


class CacheCorrupt(SimilarityError):
    pass


class ZeroBins(SimilarityError):
    pass


# -- numerics ----------------------------------------------------------------

class NumericError(OntoclrError):
    pass


class ShapeMismatch(NumericError):
    pass


class NonFiniteInput(NumericError):
    pass


class NonScalarLoss(NumericError):
    pass


class NonFiniteLoss(NumericError):
    pass


class NormViolation(NumericError):
    pass


class AsymmetricWeights(NumericError):
    pass


# -- training ----------------------------------------------------------------

class TaskMismatch(OntoclrError):
    pass


# -- metrics -----------------------------------------------------------------

class MetricError(OntoclrError):
    pass


class SingleClass(MetricError):
    pass


class NoPositives(MetricError):
    pass


class MissingClass(MetricError):
    pass


class InsufficientLabels(MetricError):
    pass


class KTooLarge(MetricError):
    pass


class EmptySample(MetricError):
    pass
