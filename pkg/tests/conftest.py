from pathlib import Path

import numpy as np
import pytest

from app.config import get_settings
from app.models import PhantomSpec
from app.volume import MaterialClass, MaterialField

CONFIG_DIR = Path(__file__).resolve().parents[1] / "config"


@pytest.fixture(autouse=True)
def fresh_settings():
    get_settings.cache_clear()
    yield
    get_settings.cache_clear()


def block_material(
    dims: tuple[int, int, int] = (10, 10, 10),
    modulus: float | np.ndarray = 1000.0,
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0),
    poisson: float = 0.3,
) -> MaterialField:
    moduli = np.broadcast_to(np.asarray(modulus, dtype=float), dims).copy()
    return MaterialField(
        dims=dims,
        spacing=spacing,
        origin=(0.0, 0.0, 0.0),
        material_class=np.full(dims, MaterialClass.CANCELLOUS, dtype=np.uint8),
        modulus=moduli,
        poisson=poisson,
    )


@pytest.fixture
def small_phantom_spec() -> PhantomSpec:
    return PhantomSpec(
        outer_mm=(30.0, 20.0, 16.0),
        shell_mm=2.0,
        cancellous_hu=400.0,
        cortical_hu=2000.0,
        margin_mm=1.0,
        seed=3,
    )
