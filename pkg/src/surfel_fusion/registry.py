__all__ = ["AutoRegister", "ComponentRegistry", "UnknownComponentError"]

import logging
import typing
from importlib.metadata import entry_points
from inspect import getdoc as get_doc, isabstract as is_abstract, isclass as is_class

from .errors import SurfelFusionError

logger = logging.getLogger(__name__)


class UnknownComponentError(SurfelFusionError, KeyError):
    """
    Used to differentiate a registry lookup from a standard KeyError.

    The message lists the keys that *are* registered, which is what a user who typed
    ``--scene plane_bx`` actually needs to see.
    """

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


T = typing.TypeVar("T")

# Using ``D`` instead of ``T`` keeps the decorated class' type intact.
# :see: https://mypy.readthedocs.io/en/stable/generics.html#decorator-factories
D = typing.TypeVar("D", bound=typing.Callable[..., typing.Any])


class ComponentRegistry(typing.Generic[T]):
    """
    Maps string keys to pluggable component classes (feature frontends, scale
    initialisers, synthetic scenes, mesh writers, CLI commands) and acts as a factory
    for them.

    Keys are normalised by :py:meth:`gen_lookup_key`, so ``"plane_box"``,
    ``"Plane-Box"`` and ``"plane-box"`` all name the same component.
    """

    def __init__(
        self,
        attr_name: typing.Optional[str] = None,
        unique: bool = False,
        group: typing.Optional[str] = None,
    ) -> None:
        """
        Args:
            attr_name:
                If provided, :py:meth:`register` will automatically detect the key to
                use when registering new classes.

            unique:
                Determines what happens when two classes are registered with the same
                key:

                - ``True``: A :py:class:`KeyError` will be raised.
                - ``False``: The second class will replace the first one.

            group:
                Optional entry point group.  Third-party distributions that declare
                entry points in this group are loaded (once) the first time the
                registry is queried.  Built-in registrations always win.
        """
        super().__init__()

        self.attr_name = attr_name
        self.unique = unique
        self.group = group

        self._registry: dict[str, typing.Type[T]] = {}

        # Map lookup keys to readable keys, in registration order.
        self._lookup_keys: dict[str, str] = {}

        self._plugins_loaded = group is None

    def __contains__(self, key: str) -> bool:
        """
        Returns whether the specified key is registered.
        """
        try:
            self.get_class(key)
        except UnknownComponentError:
            return False
        else:
            return True

    def __getitem__(self, key: str) -> T:
        """
        Shortcut for calling :py:meth:`get` with empty args/kwargs.
        """
        return self.get(key)

    def __iter__(self) -> typing.Iterator[str]:
        return iter(self.keys())

    def __len__(self) -> int:
        self._load_plugins()
        return len(self._registry)

    def __repr__(self) -> str:
        return (
            f"{type(self).__name__}(attr_name={self.attr_name!r}, "
            f"unique={self.unique!r}, group={self.group!r})"
        )

    def __missing__(self, key: str) -> typing.Type[T]:
        """
        Defines what to do when trying to access an unregistered key.
        """
        known = ", ".join(sorted(self._lookup_keys)) or "<none>"
        raise UnknownComponentError(f"Unknown component {key!r} (known: {known}).")

    def get_class(self, key: str) -> typing.Type[T]:
        """
        Returns the class associated with the specified key.
        """
        self._load_plugins()
        lookup_key = self.gen_lookup_key(key)

        try:
            return self._registry[lookup_key]
        except KeyError:
            return self.__missing__(key)

    def get(self, key: str, *args: typing.Any, **kwargs: typing.Any) -> T:
        """
        Creates a new instance of the class matching the specified key.

        Args:
            key:
                The corresponding load key.
            args:
                Positional arguments passed to class initializer.
            kwargs:
                Keyword arguments passed to class initializer.
        """
        return self.get_class(key)(*args, **kwargs)

    def keys(self) -> typing.Iterable[str]:
        """
        Returns the collection of registry keys, in the order that they were registered.
        """
        self._load_plugins()
        return iter(self._lookup_keys.values())

    def classes(self) -> typing.Iterable[typing.Type[T]]:
        """
        Returns the collection of registered classes.
        """
        return iter(self.get_class(key) for key in self.keys())

    def describe(self) -> dict[str, str]:
        """
        Returns ``{key: first line of the class docstring}``, used for ``--help``
        output.
        """
        result = {}
        for key in self.keys():
            doc = get_doc(self.get_class(key)) or ""
            result[key] = doc.strip().splitlines()[0] if doc.strip() else ""
        return result

    @staticmethod
    def gen_lookup_key(key: str) -> str:
        """
        Used by :py:meth:`get` to generate a lookup key.

        Args:
            key:
                The key value provided to e.g., :py:meth:`__getitem__`

        Returns:
            The case-folded key, with ``_`` and whitespace replaced by ``-``.
        """
        return "-".join(str(key).strip().lower().replace("_", "-").split())

    @typing.overload
    def register(self, key: D, /) -> D:
        """Bare decorator variant"""
        ...

    @typing.overload
    def register(self, key: str) -> typing.Callable[[D], D]:
        """Decorator factory variant"""
        ...

    def register(self, key: typing.Union[D, str]) -> typing.Union[
        D,
        typing.Callable[[D], D],
    ]:
        """
        Decorator that registers a class with the registry.

        Example::

           frontends = ComponentRegistry(attr_name='frontend_name')

           @frontends.register
           class MyFrontend(FeatureFrontend):
             frontend_name = 'mine'

           # Override the registry key:
           @frontends.register('fast')
           class OtherFrontend(FeatureFrontend):
             ...

        Args:
            key:
                The registry key to use for the registered class.
                Optional if the registry's :py:attr:`attr_name` is set.
        """
        if is_class(key):
            if typing.TYPE_CHECKING:
                key = typing.cast(D, key)

            if not self.attr_name:
                raise ValueError(
                    f"Attempting to register {key.__name__} to {type(self).__name__} "
                    f"via decorator, but `attr_name` is not set."
                )

            cls = typing.cast(typing.Type[T], key)
            self._register(getattr(key, self.attr_name), cls)
            return key

        if typing.TYPE_CHECKING:
            key = typing.cast(str, key)

        def _decorator(cls: D) -> D:
            self._register(key, typing.cast(typing.Type[T], cls))
            return cls

        return _decorator

    def unregister(self, key: str) -> typing.Type[T]:
        """
        Unregisters the class with the specified key.

        Returns:
            The class that was unregistered.

        Raises:
            UnknownComponentError: if the key is not registered.
        """
        lookup_key = self.gen_lookup_key(key)
        if lookup_key not in self._registry:
            return self.__missing__(key)

        del self._lookup_keys[lookup_key]
        return self._registry.pop(lookup_key)

    def _register(self, key: str, class_: typing.Type[T]) -> None:
        lookup_key = self.gen_lookup_key(key)

        if not lookup_key:
            raise ValueError(
                f"Attempting to register class {class_.__name__} "
                f"with empty registry key {key!r}."
            )

        if self.unique and (lookup_key in self._registry):
            raise KeyError(f"{class_.__name__} with key {key!r} is already registered.")

        self._registry[lookup_key] = class_
        self._lookup_keys[lookup_key] = str(key)

    def _load_plugins(self) -> None:
        """
        Pulls in entry point registrations on first use.
        """
        if self._plugins_loaded:
            return

        self._plugins_loaded = True
        assert self.group is not None
        for ep in entry_points(group=self.group):
            lookup_key = self.gen_lookup_key(ep.name)
            if lookup_key in self._registry:
                logger.debug("Skipping plugin %s: key already registered.", ep.name)
                continue

            try:
                cls = ep.load()
            except Exception:
                logger.warning("Could not load plugin %s from %s.", ep.name, ep.value)
                continue

            if self.attr_name and isinstance(cls, type):
                setattr(cls, self.attr_name, ep.name)

            self._registry[lookup_key] = cls
            self._lookup_keys[lookup_key] = ep.name


def AutoRegister(registry: ComponentRegistry[T]) -> type:
    """
    Creates a base class that automatically registers all non-abstract subclasses in the
    specified registry.

    Example::

       commands = ComponentRegistry(attr_name='command_name')

       class Command(AutoRegister(commands), ABC):
         @abstractmethod
         def run(self, args):
           raise NotImplementedError()

       class RunCommand(Command):
         command_name = 'run'

         def run(self, args):
           ...

    .. important::

       Python defines abstract as "having at least one unimplemented abstract method";
       adding :py:class:`abc.ABC` as a base class is not enough.

    Args:
        registry:
            The registry that new classes will be added to.  Its ``attr_name`` must be
            set.
    """
    if not registry.attr_name:
        raise ValueError(f"Missing `attr_name` in {registry}.")

    class _Base:
        def __init_subclass__(cls, **kwargs: typing.Any) -> None:
            super().__init_subclass__(**kwargs)

            if not is_abstract(cls):
                registry.register(cls)

    return _Base
