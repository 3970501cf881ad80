"""Exception hierarchy shared across the package."""


class MindkitError(Exception):
    """Base class for every failure raised deliberately by mindkit."""


class GraphError(MindkitError):
    """Invalid graph structure, shape mismatch, or bad leaf binding."""


class DataError(MindkitError):
    """Malformed dataset file or inconsistent dataset contents."""


class TrainingError(MindkitError):
    """Optimization failed: non-finite loss or an impossible configuration."""


class AnalysisError(MindkitError):
    """Degenerate input to a statistical or closed-form routine."""
