'''
Exceptions raised by the interpolant library. Anything deriving from
ConfigError maps to exit code 2 in run.py, anything deriving from
NumericalError maps to exit code 3.
'''

class InterpolantError(Exception):
    exit_code = 1


class ConfigError(InterpolantError):
    '''
    The request cannot be served as stated: bad config values,
    inconsistent schedules, missing inputs.
    '''
    exit_code = 2


class InvalidCombination(ConfigError):
    pass


class EmptySource(ConfigError):
    pass


class MissingScore(ConfigError):
    pass


class NumericalError(InterpolantError):
    '''
    A computation was well posed but failed numerically.
    '''
    exit_code = 3


class SingularCovariance(NumericalError):
    pass


class IllConditioned(NumericalError):
    pass


class SingularGamma(NumericalError):
    pass


class StepUnderflow(NumericalError):
    pass


class NonFinite(NumericalError):
    pass


class DivideByZeroBeta(NumericalError):
    pass


class DegenerateWeight(NumericalError):
    pass


class BothGapsZero(NumericalError):
    pass


class ZeroDensity(NumericalError):
    pass
