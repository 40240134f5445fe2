"""Permission model, isolation policy, layouts and the load-time code scanner."""


class LayoutError(ValueError):
    """Base class for layout and policy errors."""
