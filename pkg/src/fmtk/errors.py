"""Exception types shared across the toolkit."""


class ShapeError(ValueError):
    """A tensor shape does not match what a node or function expects."""


class DataError(ValueError):
    """Invalid dataset contents: bad manifest rows, labels, or image files."""
