import pytest

from forcing_kv import kernels
from forcing_kv.config import PlantedStreamSpec, StreamConfig


@pytest.fixture(params=sorted(kernels.BACKENDS))
def backend(request):
    """Run a test once per available kernel backend."""
    with kernels.using(request.param):
        yield request.param


@pytest.fixture
def small_config():
    return StreamConfig(
        layers=2,
        heads_per_layer=4,
        head_dim=16,
        frames_per_chunk=2,
        tokens_per_frame=8,
        segments_per_frame=4,
        sink_frames=1,
        ar_steps=5,
        denoise_steps=2,
    )


@pytest.fixture
def planted_spec():
    return PlantedStreamSpec(seed=11, static_head_fraction=0.5)
