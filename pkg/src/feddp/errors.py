class FeddpError(Exception):
    pass


class StructuralError(FeddpError, ValueError):
    """Shapes, names or layouts do not line up."""


class NumericError(FeddpError, ArithmeticError):
    """A NaN or Inf showed up where finite values are required."""


class UsageError(FeddpError, RuntimeError):
    pass


class ConfigError(FeddpError, ValueError):
    pass


class PartitionError(FeddpError, ValueError):
    pass


class FormatError(FeddpError, ValueError):
    pass
