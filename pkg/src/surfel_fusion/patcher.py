__all__ = ["ComponentPatcher"]

import typing
from types import TracebackType

from .registry import ComponentRegistry

T = typing.TypeVar("T")


class ComponentPatcher(typing.Generic[T]):
    """
    Context manager that registers components for the duration of a ``with`` block.

    Components it shadows come back on exit, even when the block raises::

        with ComponentPatcher(scale_initializers, adaptive=HalfScale):
            ...

    Args:
        registry:
            The registry to patch.
        args:
            Classes keyed by their ``registry.attr_name`` attribute.
        kwargs:
            Classes under explicit keys; ``args`` win on conflicts.
    """

    def __init__(
        self,
        registry: ComponentRegistry[T],
        *args: typing.Type[T],
        **kwargs: typing.Type[T],
    ) -> None:
        if args and not registry.attr_name:
            raise ValueError(f"Positional patches need `attr_name` in {registry}.")

        patches = dict(kwargs)
        for class_ in args:
            patches[getattr(class_, typing.cast(str, registry.attr_name))] = class_

        self.registry = registry
        self._patches = patches
        self._shadowed: dict[str, typing.Optional[typing.Type[T]]] = {}

    def __enter__(self) -> "ComponentPatcher[T]":
        self._shadowed = {}
        for key, class_ in self._patches.items():
            self._shadowed[key] = self._take(key)
            self.registry.register(key)(class_)
        return self

    def __exit__(
        self,
        exc_type: typing.Optional[typing.Type[BaseException]],
        exc_val: typing.Optional[BaseException],
        exc_tb: typing.Optional[TracebackType],
    ) -> None:
        for key, previous in self._shadowed.items():
            self._take(key)
            if previous is not None:
                self.registry.register(key)(previous)

    def _take(self, key: str) -> typing.Optional[typing.Type[T]]:
        # Removes and returns the class under ``key``, if any.
        if key not in self.registry:
            return None
        return self.registry.unregister(key)
