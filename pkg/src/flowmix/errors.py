"""Exception hierarchy shared across the package."""

from __future__ import annotations


class FlowmixError(Exception):
    """Base class for every error raised deliberately by flowmix."""


class ShapeError(FlowmixError, ValueError):
    def __init__(self, op: str, *shapes: tuple[int, ...], detail: str = ""):
        self.op = op
        self.shapes = shapes
        msg = f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class DomainError(FlowmixError, ValueError):
    """Input outside the mathematical domain of an operation (e.g. log of 0)."""


class ContractError(FlowmixError, ValueError):
    """A caller violated a documented precondition."""


class NumericError(FlowmixError, FloatingPointError):
    """A non-finite value appeared where finite values are required.

    ``layer``, ``component``, ``epoch`` and ``batch`` are filled in as the
    error propagates outward, so the final message locates the failure.
    """

    def __init__(self, message: str, *, layer: int | None = None,
                 component: int | None = None, epoch: int | None = None,
                 batch: int | None = None):
        self.base_message = message
        self.layer = layer
        self.component = component
        self.epoch = epoch
        self.batch = batch
        super().__init__(self._render())

    def _render(self) -> str:
        where = [f"{k}={v}" for k, v in (("component", self.component), ("layer", self.layer),
                                         ("epoch", self.epoch), ("batch", self.batch))
                 if v is not None]
        return self.base_message + (f" [{', '.join(where)}]" if where else "")

    def locate(self, **where: int) -> "NumericError":
        for k, v in where.items():
            if getattr(self, k) is None:
                setattr(self, k, v)
        self.args = (self._render(),)
        return self


class FormatError(FlowmixError, ValueError):
    """A file did not match its expected binary or text layout."""


class ConfigError(FlowmixError, ValueError):
    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"config key '{key}': {message}")
