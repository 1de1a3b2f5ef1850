class InvalidInputError(ValueError):
    pass


class FeasibilityError(RuntimeError):
    """A design violates a constraint rule; ``margin`` is the signed slack (negative)."""

    def __init__(self, rule: str, margin: float):
        super().__init__(f"{rule} constraint violated by {-margin:.3g}")
        self.rule = rule
        self.margin = margin


class TrainingError(RuntimeError):
    def __init__(self, message: str, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


class CheckpointError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass
