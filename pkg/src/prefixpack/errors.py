"""Exception types shared across the package."""


class PrefixpackError(Exception):
    """Base class for all package-specific errors."""


class InvalidSpec(PrefixpackError):
    """A workload specification violates its invariants."""


class InvalidChildIndex(PrefixpackError):
    """A merge-candidate child index is out of range."""


class MissingRegisterEntry(PrefixpackError):
    """The register-usage table has no entry for a tile candidate."""


class EmptyFeasibleSet(PrefixpackError):
    """No tile configuration survived the hardware constraints."""


class NoFeasibleConfig(PrefixpackError):
    """A task reached the simulator without a usable tile configuration."""


class ShapeMismatch(PrefixpackError):
    """Tensor arguments have inconsistent shapes."""


class EmptySpan(PrefixpackError):
    """A per-CTA attention span covers zero tokens."""


class EmptyPartialList(PrefixpackError):
    """merge was asked to combine zero partial results."""


class NonPositiveDenominator(PrefixpackError):
    """Merged exp-sum accumulator is not positive; partials are corrupt."""


class CoverageGap(PrefixpackError):
    """A query's KV range is not exactly covered by its packs."""
