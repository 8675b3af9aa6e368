"""Exception hierarchy shared by all solver stages."""


class JumpfieldError(Exception):
    """Base class; ``payload`` feeds the CLI's structured error JSON."""

    kind = "error"

    def __init__(self, message, **payload):
        super().__init__(message)
        self.payload = payload

    def to_dict(self):
        return {"error": self.kind, "message": str(self), **self.payload}


class StructuralError(JumpfieldError, ValueError):
    kind = "structural"


class EvaluationError(JumpfieldError, ValueError):
    kind = "evaluation"


class DivergenceError(JumpfieldError, FloatingPointError):
    kind = "divergence"


class RegressionError(JumpfieldError, ArithmeticError):
    kind = "regression"


class NonContractionError(JumpfieldError, RuntimeError):
    kind = "non_contraction"


class CapabilityError(JumpfieldError, NotImplementedError):
    kind = "capability"


class ConfigError(JumpfieldError, ValueError):
    kind = "config"
