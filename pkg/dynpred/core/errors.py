class DynpredError(Exception):
    exit_code = 1


class ConfigError(DynpredError):
    exit_code = 2


class DataError(DynpredError):
    exit_code = 3

    def __init__(self, message, row=None):
        if row is not None:
            message = f'{message} (row {row})'
        super().__init__(message)
        self.row = row


class NumericalError(DynpredError):
    exit_code = 4


class ConvergenceError(NumericalError):
    """Optimizer stopped without meeting its tolerance; keeps the best iterate."""

    def __init__(self, message, best=None, gradient_norm=None):
        if gradient_norm is not None:
            message = f'{message} (gradient norm {gradient_norm:.3g})'
        super().__init__(message)
        self.best = best
        self.gradient_norm = gradient_norm


class SingularDesignError(NumericalError):
    pass


class MonotoneLikelihoodError(NumericalError):
    def __init__(self, column):
        super().__init__(f'Monotone likelihood: coefficient of "{column}" diverges')
        self.column = column


class SeparationError(NumericalError):
    pass


class CensoringWeightError(NumericalError):
    pass
