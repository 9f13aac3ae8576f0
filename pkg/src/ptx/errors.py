"""Exception hierarchy shared by all ptx modules."""


class PtxError(Exception):
    """Base class for every error raised by ptx."""


class ValidationError(PtxError):
    """Input data does not satisfy the observed-data schema."""


class SchemaError(ValidationError):
    """Malformed CSV header or non-numeric cell."""


class ConsistencyError(ValidationError):
    """Trial/target rows carry the wrong set of fields."""


class EmptyPopulationError(ValidationError):
    """A population (trial or target) or a trial arm has no units."""


class DimensionError(PtxError):
    """Covariate vector has the wrong length."""


class FitError(PtxError):
    """A nuisance model could not be fit.

    ``nuisance`` and ``fold`` are filled in when the error is raised from
    :func:`ptx.nuisance.fit_nuisances`.
    """

    def __init__(self, message, nuisance=None, fold=None):
        super().__init__(message)
        self.nuisance = nuisance
        self.fold = fold

    def annotate(self, nuisance, fold=None):
        where = nuisance if fold is None else f"{nuisance}, fold {fold}"
        err = type(self)(f"[{where}] {self}", nuisance=nuisance, fold=fold)
        return err


class SeparationError(FitError):
    pass


class SingularError(FitError):
    pass


class ConvergenceError(FitError):
    pass


class FoldError(PtxError):
    pass


class EstimationError(PtxError):
    """Base class for failures inside an estimator."""


class DegenerateDenominator(EstimationError):
    pass


class NonFiniteTerm(EstimationError):
    pass


class BootstrapError(EstimationError):
    pass


class BracketError(PtxError):
    pass


class ScenarioError(PtxError):
    pass


class DegenerateStratum(PtxError):
    pass
