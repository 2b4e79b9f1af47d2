"""Exception hierarchy shared by all convkit modules."""


class ConvkitError(Exception):
    """Base class for every error raised by this package."""


class DimensionMismatch(ConvkitError):
    """Operand shapes are incompatible for the requested operation."""


class StateMissing(ConvkitError):
    """A backward pass was requested without the forward state it needs."""


class NumericError(ConvkitError):
    """Checked-mode execution produced a non-finite value."""


class ParseError(ConvkitError):
    """A network spec document could not be parsed.

    Carries the 1-based line number of the offending line.
    """

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ShapeChainError(ConvkitError):
    """Adjacent layers in a network spec have incompatible shapes."""


class DuplicateName(ConvkitError):
    """Two layers in a network spec share a name."""


class FormatError(ConvkitError):
    """A binary file has a bad magic, version, or truncated payload."""


class ShapeMismatch(ConvkitError):
    """A stored parameter blob does not match the spec's declared shape."""


class MissingLayer(ConvkitError):
    """Weight bundle and spec disagree about which layers exist."""


class UnknownTap(ConvkitError):
    """A requested tap names no layer in the spec."""


class Divergence(ConvkitError):
    """Training produced a non-finite loss.  Carries the epoch index."""

    def __init__(self, message, epoch=None):
        if epoch is not None:
            message = f"epoch {epoch}: {message}"
        super().__init__(message)
        self.epoch = epoch


class SingleClass(ConvkitError):
    """Classifier training needs at least two distinct labels."""


class EmptyClass(ConvkitError):
    """A class required by the metric has no ground-truth samples."""


class InsufficientClassSize(ConvkitError):
    """A class has too few samples for the requested split."""


class EmptyGrid(ConvkitError):
    """Cross-validation was given no hyperparameters to choose from."""


class LabelDictMismatch(ConvkitError):
    """Two feature matrices carry incompatible label dictionaries."""


class PerplexityInfeasible(ConvkitError):
    """Too few samples for the requested embedding perplexity."""


class DegenerateInput(ConvkitError):
    """Input rows are all identical; no meaningful embedding exists."""


class DegenerateImage(ConvkitError):
    """An image has a zero-sized dimension."""
