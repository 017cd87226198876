import logging
import typing
from abc import ABC, abstractmethod as abstract_method

import pytest

from surfel_fusion.registry import (
    AutoRegister,
    ComponentRegistry,
    UnknownComponentError,
)
from test import (
    BilateralFilter,
    BoxFilter,
    DepthFilter,
    FilterFactory,
    GaussianFilter,
    JointBilateralFilter,
    MedianFilter,
    WeightedMedianFilter,
)
from test.helper import DummyDistributionFinder


def test_register_manual_keys() -> None:
    """
    Registers a few classes with manually-assigned keys and verifies that the factory
    returns them correctly.
    """
    registry = ComponentRegistry[DepthFilter]()

    @registry.register("edge-aware")
    class GuidedFilter(DepthFilter):
        pass

    class AnisotropicFilter(DepthFilter):
        pass

    registry.register("diffusion")(AnisotropicFilter)

    # Without ``attr_name`` the key has to be given explicitly.
    with pytest.raises(ValueError):
        # noinspection PyUnusedLocal
        @registry.register
        class TemporalFilter(DepthFilter):
            pass

    assert registry.get_class("edge-aware") is GuidedFilter
    assert isinstance(registry["edge-aware"], GuidedFilter)
    assert isinstance(registry["diffusion"], AnisotropicFilter)


def test_register_detect_keys() -> None:
    """
    With ``attr_name`` set, the key is read off the class; an explicit key still
    overrides it.
    """
    registry = ComponentRegistry[DepthFilter](attr_name="kind")
    registry.register(BilateralFilter)
    registry.register(MedianFilter)
    registry.register("blur")(GaussianFilter)

    assert isinstance(registry["bilateral"], BilateralFilter)
    assert isinstance(registry["median"], MedianFilter)
    assert isinstance(registry["blur"], GaussianFilter)

    with pytest.raises(UnknownComponentError):
        # noinspection PyStatementEffect
        registry["gaussian"]


def test_lookup_keys_are_normalised() -> None:
    """
    Case, surrounding whitespace, underscores and hyphens do not matter.
    """
    registry = ComponentRegistry[DepthFilter]()
    registry.register("plane_box")(BoxFilter)

    for key in ("plane_box", "Plane-Box", " PLANE_BOX ", "plane-box"):
        assert registry.get_class(key) is BoxFilter
        assert key in registry

    # The readable key is kept as registered.
    assert list(registry.keys()) == ["plane_box"]
    assert ComponentRegistry.gen_lookup_key("Harris_BRIEF") == "harris-brief"
    assert ComponentRegistry.gen_lookup_key("two  words") == "two-words"


def test_register_error_empty_key() -> None:
    """
    Attempting to register a class with an empty key.
    """
    registry = ComponentRegistry[DepthFilter]("kind")

    with pytest.raises(ValueError):
        # noinspection PyUnusedLocal
        @registry.register("")
        class NoOpFilter(DepthFilter):
            kind = "noop"

    with pytest.raises(ValueError):
        # noinspection PyUnusedLocal
        @registry.register
        class BlankFilter(DepthFilter):
            kind = "  "


def test_unique_keys() -> None:
    """
    ``unique=True`` refuses a second class under the same key.
    """
    registry = ComponentRegistry[DepthFilter](attr_name="kind", unique=True)
    registry.register(MedianFilter)

    with pytest.raises(KeyError):
        registry.register(WeightedMedianFilter)

    assert registry.get_class("median") is MedianFilter


def test_replace_by_default() -> None:
    """
    Without ``unique`` the last registration wins.
    """
    registry = ComponentRegistry[DepthFilter](attr_name="kind")
    registry.register(BilateralFilter)
    registry.register(JointBilateralFilter)

    assert registry.get_class("bilateral") is JointBilateralFilter
    assert len(registry) == 1


def test_unregister() -> None:
    """
    Removing a class from the registry, by key.
    """
    registry = ComponentRegistry[DepthFilter](attr_name="kind")
    registry.register(MedianFilter)
    registry.register(BoxFilter)

    assert registry.unregister("median") is MedianFilter

    with pytest.raises(UnknownComponentError):
        registry.get("median")

    with pytest.raises(KeyError):
        registry.unregister("median")

    assert list(registry) == ["box"]


def test_unknown_key_lists_known_keys() -> None:
    """
    The error names the missing key and every key that is registered, and is still a
    :py:class:`KeyError`.
    """
    registry = ComponentRegistry[DepthFilter](attr_name="kind")
    registry.register(MedianFilter)
    registry.register(BoxFilter)

    with pytest.raises(KeyError) as info:
        registry.get("bilatral")

    message = str(info.value)
    assert "'bilatral'" in message
    assert "box, median" in message


def test_constructor_params() -> None:
    """
    Params are passed to the registered class' constructor.
    """
    registry = ComponentRegistry[DepthFilter](attr_name="kind")
    registry.register(BilateralFilter)

    positional = registry.get("bilateral", 5)
    keyword = registry.get("bilateral", radius=7)

    assert positional.radius == 5
    assert keyword.radius == 7
    assert registry["bilateral"].radius == 2


def test_new_instance_every_time() -> None:
    """
    Every lookup creates a new instance.
    """
    registry = ComponentRegistry[DepthFilter](attr_name="kind")
    registry.register(GaussianFilter)

    assert registry["gaussian"] is not registry["gaussian"]


def test_register_function() -> None:
    """
    Functions can be registered as well, so long as they behave like a class.
    """
    registry = ComponentRegistry[DepthFilter]()
    registry.register("box")(FilterFactory.create_box_filter)

    def median_factory(radius: int = 3) -> MedianFilter:
        return MedianFilter(radius)

    registry.register("median")(median_factory)

    box = registry.get("box", radius=4)
    assert isinstance(box, BoxFilter)
    assert box.radius == 4
    assert registry["median"].radius == 3


def test_contains_when_init_requires_arguments() -> None:
    """
    Membership checks never instantiate the class.
    """
    registry = ComponentRegistry[DepthFilter](attr_name="kind")

    @registry.register
    class SizedFilter(DepthFilter):
        kind = "sized"

        def __init__(self, radius: int) -> None:
            super().__init__(radius)

    assert "sized" in registry
    assert "unsized" not in registry


def test_describe_uses_docstring_first_lines() -> None:
    """
    :py:meth:`ComponentRegistry.describe` feeds ``--help`` output.
    """
    registry = ComponentRegistry[DepthFilter]()

    @registry.register("documented")
    class DocumentedFilter(DepthFilter):
        """
        Smooths along edges.

        More details that do not belong in a one-line summary.
        """

    @registry.register("plain")
    class PlainFilter(DepthFilter):
        pass

    description = registry.describe()
    assert description["documented"] == "Smooths along edges."
    # Inherited docstrings are used when a class has none of its own.
    assert description["plain"] == "Smooths a depth map."


def test_auto_register() -> None:
    """
    Using :py:func:`AutoRegister` to register concrete subclasses on definition.
    """
    registry = ComponentRegistry["BaseSmoother"](attr_name="kind")

    class BaseSmoother(AutoRegister(registry), ABC):  # type: ignore
        """
        Abstract base class; will not get registered.
        """

        @abstract_method
        def smooth(self, depth: list[float]) -> list[float]:
            raise NotImplementedError()

    class Identity(BaseSmoother):
        kind = "identity"

        def smooth(self, depth: list[float]) -> list[float]:
            return depth

    class BaseIterativeSmoother(BaseSmoother, ABC):
        """
        Abstract subclass; will not get registered.
        """

        @abstract_method
        def iterations(self) -> int:
            raise NotImplementedError()

    class Jacobi(BaseIterativeSmoother):
        kind = "jacobi"

        def smooth(self, depth: list[float]) -> list[float]:
            return depth

        def iterations(self) -> int:
            return 3

    # Only the concrete classes are registered.
    assert list(registry.classes()) == [Identity, Jacobi]


def test_auto_register_needs_strictly_abstract_methods() -> None:
    """
    A subclass of :py:func:`AutoRegister` with no abstract methods is concrete, even
    if it looks like a base class.
    """
    registry = ComponentRegistry["LooksAbstract"](attr_name="kind")

    class LooksAbstract(AutoRegister(registry)):  # type: ignore
        kind = "base"

    assert list(registry.classes()) == [LooksAbstract]


def test_auto_register_needs_attr_name() -> None:
    """
    :py:func:`AutoRegister` cannot work without a key attribute.
    """
    with pytest.raises(ValueError):
        AutoRegister(ComponentRegistry[DepthFilter]())


@pytest.fixture(name="distro")
def fixture_distro() -> typing.Generator[None, None, None]:
    # Inject a distribution that declares plugin entry points.
    DummyDistributionFinder.install()
    yield
    DummyDistributionFinder.uninstall()


@pytest.mark.usefixtures("distro")
def test_plugins_loaded_from_entry_points(caplog: pytest.LogCaptureFixture) -> None:
    """
    Entry points in the registry's group are loaded on first use; a plugin that
    fails to import is logged and skipped.

    See ``dummy_plugin.egg-info/entry_points.txt``.
    """
    registry = ComponentRegistry[DepthFilter](group="surfel_fusion.test_plugins")

    with caplog.at_level(logging.WARNING, logger="surfel_fusion.registry"):
        assert isinstance(registry["bilateral"], BilateralFilter)

    assert isinstance(registry.get("median", radius=4), MedianFilter)
    assert isinstance(registry["box"], BoxFilter)
    assert "broken" not in registry
    assert sorted(registry) == ["bilateral", "box", "median"]
    assert "broken" in caplog.text


@pytest.mark.usefixtures("distro")
def test_builtins_win_over_plugins() -> None:
    """
    A key registered in code is not replaced by a plugin with the same name.
    """
    registry = ComponentRegistry[DepthFilter](
        attr_name="kind", group="surfel_fusion.test_plugins"
    )
    registry.register(JointBilateralFilter)

    assert registry.get_class("bilateral") is JointBilateralFilter
    assert registry.get_class("median") is MedianFilter


@pytest.mark.usefixtures("distro")
def test_plugins_are_branded() -> None:
    """
    Plugin classes get the registry's key attribute set to their entry point name.
    """
    registry = ComponentRegistry[DepthFilter](
        attr_name="plugin_key", group="surfel_fusion.test_plugins"
    )
    try:
        registry.get_class("median")
        assert getattr(MedianFilter, "plugin_key") == "median"
        assert getattr(BilateralFilter, "plugin_key") == "bilateral"

        # Factories are not classes and are left alone.
        assert not hasattr(FilterFactory.create_box_filter, "plugin_key")
    finally:
        for cls in (MedianFilter, BilateralFilter):
            try:
                delattr(cls, "plugin_key")
            except AttributeError:
                pass


def test_no_plugins_without_group() -> None:
    """
    A registry without a group never looks at entry points.
    """
    DummyDistributionFinder.install()
    try:
        registry = ComponentRegistry[DepthFilter](attr_name="kind")
        assert len(registry) == 0
    finally:
        DummyDistributionFinder.uninstall()
