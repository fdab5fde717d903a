"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array dimensions do not line up."""


class FormatError(ValueError):
    """A file on disk does not match its expected layout."""


class ClassEmptyError(ValueError):
    def __init__(self, class_id):
        super().__init__(f"class {class_id} has no training nodes")
        self.class_id = class_id


class DivergenceError(RuntimeError):
    """Optimization produced a non-finite value."""

    def __init__(self, message, epoch=None, class_id=None):
        where = []
        if epoch is not None:
            where.append(f"epoch {epoch}")
        if class_id is not None:
            where.append(f"class {class_id}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.epoch = epoch
        self.class_id = class_id
