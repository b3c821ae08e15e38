"""Exception hierarchy with stable exit codes for scripted use."""

from __future__ import annotations

import enum


class ErrorCode(enum.IntEnum):
    OK = 0
    USAGE = 2
    PRECONDITION = 3
    IO = 4
    FORMAT = 5
    INCOMPATIBLE = 6
    DEGENERATE = 7
    INTERNAL = 70


class LayerSwapError(Exception):
    code = ErrorCode.INTERNAL

    def to_dict(self) -> dict:
        return {"code": self.code.name, "exit": int(self.code), "message": str(self)}


class ContainerFormatError(LayerSwapError, ValueError):
    """Malformed checkpoint container. ``position`` is an absolute byte offset when known."""

    code = ErrorCode.FORMAT

    def __init__(self, message: str, position: int | None = None):
        if position is not None:
            message = f"{message} (at byte {position})"
        super().__init__(message)
        self.position = position


class PreconditionError(LayerSwapError, ValueError):
    code = ErrorCode.PRECONDITION


class NoSignalError(PreconditionError):
    pass


class IncompatibleError(LayerSwapError, ValueError):
    code = ErrorCode.INCOMPATIBLE


class DegenerateError(LayerSwapError, ValueError):
    code = ErrorCode.DEGENERATE
