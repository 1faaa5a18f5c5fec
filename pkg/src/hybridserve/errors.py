"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration value (rates, schedules, distribution specs)."""


class FitDegenerateError(RuntimeError):
    """Latency-model fit failed because the sample design is rank-deficient."""


class IntegrityFault(RuntimeError):
    """Simulator detected a bookkeeping violation (e.g. missing residual)."""

    def __init__(self, message: str, request_id: str | None = None, layer: int | None = None):
        super().__init__(message)
        self.request_id = request_id
        self.layer = layer


class ScenarioError(RuntimeError):
    """Scenario cannot be executed as configured (names the offending item)."""
