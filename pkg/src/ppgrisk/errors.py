"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: validation errors exit 2, missing
upstream artifacts exit 3, numerical failures exit 4.
"""


class ValidationError(ValueError):
    """Malformed input: bad config, unparseable file, impossible argument."""


class DependencyError(RuntimeError):
    """A required upstream artifact (weights, fit file, ...) is missing."""


class NumericalError(RuntimeError):
    """A numerical procedure failed (divergence, no events, no comparable pairs)."""


class MissingCovariateError(ValidationError):
    """A model demanded covariates the row does not provide."""

    def __init__(self, missing: list[str]):
        self.missing = list(missing)
        super().__init__("missing covariate(s): " + ", ".join(self.missing))
