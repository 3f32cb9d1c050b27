"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: malformed inputs (format, shape,
annotation, distribution) exit 3, internal invariant violations exit 4.
"""


class PanopticError(Exception):
    """Base class for all panoparse errors."""


class DimensionMismatchError(PanopticError):
    """Shapes disagree or a divisibility precondition fails."""


class TensorFormatError(PanopticError):
    """A .rten file is truncated, has a bad header, or a bad dtype."""


class InvalidAnnotationError(PanopticError):
    """A panoptic map violates its invariants (stuff/thing/instance ids)."""


class InvalidDistributionError(PanopticError):
    """A probability map is negative or does not sum to one per pixel."""


class InvalidInputError(PanopticError):
    """An input value is outside its documented domain."""


class EmptyInstanceError(PanopticError):
    """An instance mask with no pixels was passed where one is required."""


class GenerationError(PanopticError):
    """Synthetic scene placement failed after bounded retries."""


class InternalInvariantError(PanopticError):
    """A should-be-impossible condition was detected; indicates a bug."""
