"""Forward models."""

from .base import CountingModel, ForwardModel, FunctionModel, LinearModel

__all__ = ["ForwardModel", "LinearModel", "FunctionModel", "CountingModel"]
