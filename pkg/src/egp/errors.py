"""Exception hierarchy shared across the package."""


class EgpError(Exception):
    """Base class for all package errors."""


class ManifoldError(EgpError, ValueError):
    """Invalid point, degenerate configuration or manifold kind mismatch."""


class KernelError(EgpError, ValueError):
    """Kernel family used outside its contract (e.g. wrong manifold)."""


class NumericalError(EgpError, ArithmeticError):
    """Factorisation or iterative solver failure."""
