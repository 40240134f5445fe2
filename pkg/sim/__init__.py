"""Deterministic interpreter for instrumented programs over policy-built layouts."""


class SimError(ValueError):
    """Base class for simulator errors. Faults and traps are outcomes, not errors."""
