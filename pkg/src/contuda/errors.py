"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Input violates an operation's preconditions."""


class ContractError(RuntimeError):
    """Structural misuse of a model, snapshot or optimizer partition."""


class ProtocolViolation(RuntimeError):
    """A data access that the continual protocol forbids."""


class NumericalAbort(FloatingPointError):
    """Training produced a non-finite loss."""

    def __init__(self, component, iteration=None, step=None):
        self.component = component
        self.iteration = iteration
        self.step = step
        where = ""
        if step is not None:
            where += f" at step {step}"
        if iteration is not None:
            where += f" iteration {iteration}"
        super().__init__(f"non-finite {component}{where}")


class ConfigError(ValueError):
    """Invalid run configuration; carries the offending key."""

    def __init__(self, key, message):
        self.key = key
        super().__init__(f"{key}: {message}")


class NonFiniteComponent(ValidationError):
    """A loss component is NaN or infinite."""

    def __init__(self, component):
        self.component = component
        super().__init__(f"loss component {component!r} is not finite")
