"""Exception and warning types shared across the package."""


class ParameterError(ValueError):
    """Bad shapes, dimensions or option values passed to an operation."""


class TopologyError(ValueError):
    """Mesh connectivity that an operation cannot handle (e.g. non-manifold edges)."""


class ContractViolation(RuntimeError):
    """A call sequence broke an operation's contract (stale caches, mismatched passes)."""


class ConfigurationError(RuntimeError):
    """Training/editing inputs are missing something the stage requires."""


class RankDeficiencyError(ValueError):
    """Point set too degenerate for a closed-form alignment."""


class AlignmentError(RuntimeError):
    """Raised by editing operations when an alignment cannot be computed."""


class UndefinedMetricError(ValueError):
    """A metric was asked for over an empty pixel set."""


class HybridHeadWarning(UserWarning):
    """Non-fatal conditions: empty masks, renormalized view vectors, no-op edits."""
