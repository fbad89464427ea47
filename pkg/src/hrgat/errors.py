class HierarchyError(ValueError):
    """A tile's quadtree parent (or ancestor chain) is missing."""


class NumericalError(ArithmeticError):
    """Non-finite values or an ill-posed linear system."""


class DegenerateRegressorError(ValueError):
    """Regression input has no variance."""
