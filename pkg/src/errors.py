"""Exception types raised across the package."""


class SrfmError(Exception):
    """Base class for every error raised by this package."""


class NetworkFormatError(SrfmError, ValueError):
    """Edge list or adjacency input is malformed."""

    def __init__(self, message, row=None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


class CovariateError(SrfmError, ValueError):
    """Covariate table is malformed or does not fit the network."""


class ModelSpecError(SrfmError, ValueError):
    """Model specification is invalid or inconsistent with the covariates."""


class EstimationError(SrfmError, RuntimeError):
    """Every start of a mixture fit failed."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = list(diagnostics or [])

    def __str__(self):
        base = super().__str__()
        if not self.diagnostics:
            return base
        lines = [base] + [f"  start {d.get('start')}: {d.get('status')} ({d.get('detail', '')})"
                          for d in self.diagnostics]
        return "\n".join(lines)


class DegeneracyError(SrfmError, RuntimeError):
    """The sampler met a non-finite linear predictor."""

    def __init__(self, message, dyad=None, eta=None):
        super().__init__(message)
        self.dyad = dyad
        self.eta = eta


class EmptyClassError(SrfmError, RuntimeError):
    """An assignment step left at least one latent class without nodes."""

    def __init__(self, message, empty_classes=()):
        super().__init__(message)
        self.empty_classes = tuple(empty_classes)
