"""Exception hierarchy shared by every stage of the pipeline."""


class AftTestError(Exception):
    """Base class for all errors raised by this package."""


class DataError(AftTestError, ValueError):
    pass


class MissingColumn(DataError):
    def __init__(self, name):
        super().__init__(f"missing column: {name!r}")
        self.name = name


class NonPositiveTime(DataError):
    def __init__(self, row):
        super().__init__(f"non-positive time in row {row}")
        self.row = row


class UnparseableValue(DataError):
    def __init__(self, row, col):
        super().__init__(f"cannot parse value in row {row}, column {col!r}")
        self.row = row
        self.col = col


class NoEvents(DataError):
    def __init__(self):
        super().__init__("dataset contains no events (status == 1)")


class ZeroVariance(DataError):
    def __init__(self, col):
        super().__init__(f"continuous column {col!r} is constant")
        self.col = col


class FormulaError(AftTestError, ValueError):
    pass


class FormulaSyntaxError(FormulaError):
    def __init__(self, position, expected, text=""):
        msg = f"syntax error at position {position}: expected {expected}"
        if text:
            msg += f"\n  {text}\n  {' ' * position}^"
        super().__init__(msg)
        self.position = position
        self.expected = expected


class MissingSurv(FormulaError):
    def __init__(self):
        super().__init__("formula must start with a Surv(time, status) response")


class EmptyRHS(FormulaError):
    def __init__(self):
        super().__init__("formula has no covariate terms")


class UnknownTransform(FormulaError):
    def __init__(self, name):
        super().__init__(f"unknown transform {name!r} (only 'log' is supported)")
        self.name = name


class DuplicateTerm(FormulaError):
    def __init__(self, label):
        super().__init__(f"duplicate term {label!r}")
        self.label = label


class UnknownCovariate(AftTestError, KeyError):
    def __init__(self, key):
        super().__init__(f"unknown covariate {key!r}")
        self.key = key

    def __str__(self):
        return self.args[0]


class IndexOutOfRange(AftTestError, IndexError):
    def __init__(self, key):
        super().__init__(f"covariate index {key} out of range")
        self.key = key


class NonFiniteEvaluation(AftTestError, ArithmeticError):
    def __init__(self, x):
        super().__init__(f"function returned a non-finite value at x = {x!r}")
        self.x = x


class SolverFailure(AftTestError, RuntimeError):
    def __init__(self, message, f_norm=float("nan")):
        super().__init__(f"{message} (final norm {f_norm:.3g})")
        self.f_norm = f_norm


class SingularDesign(AftTestError, ArithmeticError):
    pass


class KaplanMeierDegenerate(AftTestError, ArithmeticError):
    pass


class EmptyInput(AftTestError, ValueError):
    pass


class BinaryCovariateForCovform(AftTestError, ValueError):
    def __init__(self, name):
        super().__init__(
            f"functional form test is not supported for binary covariate {name!r}"
        )
        self.name = name


class QuantileCountNotFive(AftTestError, ValueError):
    def __init__(self, count):
        super().__init__(f"exactly five quantiles are required, got {count}")
        self.count = count


class NotAfttestResult(AftTestError, ValueError):
    def __init__(self):
        super().__init__("Must be afttest class")
