"""Exception hierarchy shared by every module of the toolkit."""


class AdaptclError(Exception):
    """Base class for toolkit errors."""


class DimensionError(AdaptclError, ValueError):
    """Operand shapes are incompatible."""


class DomainError(AdaptclError, ValueError):
    """An operation was applied outside its mathematical domain."""


class NumericError(AdaptclError, ArithmeticError):
    """A NaN or infinity appeared in values or gradients."""


class ContractError(AdaptclError, RuntimeError):
    """A caller violated an API precondition."""


class TaskLookupError(AdaptclError, LookupError):
    """A task id does not name a spawned task branch."""


class AnchorError(AdaptclError, KeyError):
    """A weight anchor does not line up with the model's parameters."""

    def __str__(self):
        return Exception.__str__(self)


class ConfigurationError(AdaptclError, ValueError):
    """A method or experiment is missing a required component."""


class InputError(AdaptclError, ValueError):
    """Input data is empty or otherwise unusable."""


class StateError(AdaptclError, RuntimeError):
    """An object was used in the wrong lifecycle state."""


class ParseError(AdaptclError, ValueError):
    """A data file is malformed."""


class ConfigValidationError(ConfigurationError):
    """An experiment configuration violates one or more constraints."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {p}" for p in self.problems))
