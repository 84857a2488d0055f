"""Shared exception hierarchy. Every pipeline error derives from ControlPipeError
so the CLI can map failures to a single operational exit code."""


class ControlPipeError(Exception):
    """Base class for all pipeline errors."""


class EmptyBatch(ControlPipeError):
    """An aggregate operation received zero elements."""
