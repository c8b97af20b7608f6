"""Exception hierarchy."""


class DomainError(ValueError):
    """An input lies outside the domain of an operation."""


class LayoutTopologyError(DomainError):
    """Layout edges do not partition the panorama into the declared elements."""


class ConfidenceDegenerateError(DomainError):
    """All confidence weights over an element region are zero."""
