"""Exception hierarchy shared across the lab."""

from __future__ import annotations


class LabError(Exception):
    """Base class for all structured errors raised by dlglab."""


class ShapeError(LabError, ValueError):
    def __init__(self, op: str, shapes, detail: str = ""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{op}: incompatible shapes {list(self.shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NumericError(LabError, ArithmeticError):
    """Non-finite values appeared; ``layer`` names where, if known."""

    def __init__(self, message: str, layer: int | str | None = None):
        self.layer = layer
        if layer is not None:
            message = f"{message} [layer {layer}]"
        super().__init__(message)


class ConfigError(LabError, ValueError):
    pass


class FormatError(LabError, ValueError):
    """Malformed or truncated file payload."""

    def __init__(self, fmt: str, message: str):
        self.fmt = fmt
        super().__init__(f"{fmt}: {message}")
