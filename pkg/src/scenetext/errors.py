"""Exception types shared across the package."""


class RejectedInput(ValueError):
    """An argument violates a documented precondition (shape, range, emptiness)."""


class StateError(RuntimeError):
    """A backward pass was requested without the matching forward cache."""


class NumericError(FloatingPointError):
    """Non-finite activations appeared during a forward pass."""

    def __init__(self, layer: str, message: str = "non-finite activations"):
        super().__init__(f"{message} in layer {layer!r}")
        self.layer = layer


class ParseError(ValueError):
    """A ground-truth, result, lexicon or matrix file could not be parsed."""

    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        where = ""
        if path is not None:
            where += f"{path}: "
        if line is not None:
            where += f"line {line}: "
        super().__init__(where + message)
        self.line = line
        self.path = path


class InfeasibleTarget(ValueError):
    """A CTC target cannot be emitted in the available number of frames."""


class NoMatch(LookupError):
    """No lexicon word can be aligned to the frame probabilities."""
