import pytest

from surfel_fusion.patcher import ComponentPatcher
from surfel_fusion.registry import ComponentRegistry, UnknownComponentError
from test import (
    BilateralFilter,
    BoxFilter,
    DepthFilter,
    JointBilateralFilter,
    MedianFilter,
    WeightedMedianFilter,
)


@pytest.fixture(name="registry")
def fixture_registry() -> ComponentRegistry[DepthFilter]:
    return ComponentRegistry(attr_name="kind", unique=True)


def test_patch_detect_keys(registry: ComponentRegistry[DepthFilter]) -> None:
    """
    Patching a registry in a context, with keys detected automatically.
    """
    registry.register(BilateralFilter)
    registry.register(BoxFilter)

    with ComponentPatcher(registry, JointBilateralFilter, MedianFilter):
        assert isinstance(registry["bilateral"], JointBilateralFilter)
        assert isinstance(registry["box"], BoxFilter)

        # Contexts nest.
        with ComponentPatcher(registry, WeightedMedianFilter):
            assert isinstance(registry["median"], WeightedMedianFilter)

        assert isinstance(registry["median"], MedianFilter)

    assert isinstance(registry["bilateral"], BilateralFilter)
    assert isinstance(registry["box"], BoxFilter)

    with pytest.raises(UnknownComponentError):
        registry.get("median")


def test_patch_manual_keys(registry: ComponentRegistry[DepthFilter]) -> None:
    """
    Patching a registry in a context, specifying keys manually.
    """
    registry.register("fast")(BoxFilter)
    registry.register("edge-aware")(BilateralFilter)

    with ComponentPatcher(registry, fast=MedianFilter, robust=WeightedMedianFilter):
        assert isinstance(registry["fast"], MedianFilter)
        assert isinstance(registry["edge-aware"], BilateralFilter)

        with ComponentPatcher(registry, robust=JointBilateralFilter):
            assert isinstance(registry["robust"], JointBilateralFilter)

        assert isinstance(registry["robust"], WeightedMedianFilter)

    assert isinstance(registry["fast"], BoxFilter)
    assert "robust" not in registry


def test_patch_restores_after_error(registry: ComponentRegistry[DepthFilter]) -> None:
    """
    The previous registration comes back even when the context raises.
    """
    registry.register(MedianFilter)

    with pytest.raises(RuntimeError):
        with ComponentPatcher(registry, WeightedMedianFilter):
            raise RuntimeError("boom")

    assert registry.get_class("median") is MedianFilter


def test_positional_patch_needs_attr_name() -> None:
    """
    Positional patches need a key attribute to read.
    """
    with pytest.raises(ValueError):
        ComponentPatcher(ComponentRegistry[DepthFilter](), MedianFilter)
