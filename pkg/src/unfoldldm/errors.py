"""Exception types shared across the package."""


class ShapeError(ValueError):
    """An op received inputs whose extents do not conform."""

    def __init__(self, op: str, detail: str):
        self.op = op
        self.detail = detail
        super().__init__(f"{op}: {detail}")


class GraphError(RuntimeError):
    """Misuse of the compute graph (non-scalar loss, reused graph)."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf showed up where a finite value is required."""

    def __init__(self, what: str, path: str | None = None):
        self.path = path
        super().__init__(f"non-finite value in {what}" + (f" at {path!r}" if path else ""))


class CheckpointError(ValueError):
    """A checkpoint file is malformed or does not match the registry."""


class ConfigError(ValueError):
    """A run configuration failed schema validation."""
