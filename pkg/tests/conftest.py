import numpy as np
import pytest

from voxfrac.pipeline import RunConfig, SplitConfig, NetworkSettings
from voxfrac.kpnet.train import TrainConfig
from voxfrac.lidarsim import SensorConfig
from voxfrac.scenegen import SceneConfig


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def tiny_config() -> RunConfig:
    """A small scene and a short training schedule for end-to-end checks."""
    return RunConfig(
        seed=3,
        scene=SceneConfig(extent=(20.0, 20.0, 12.0), tree_count=1, shrub_count=1, misc_count=1),
        voxel_sizes=[2.0],
        sensor=SensorConfig(ray_spacing=1.0),
        network=NetworkSettings(stages=2, base_channels=4, kernel_points=5, input_sphere_ratio=4.0),
        training=TrainConfig(epochs=2, steps_per_epoch=2, spheres_per_batch=1),
        split=SplitConfig(section_size=5.0),
    )


@pytest.fixture(scope="session")
def default_dataset_1m():
    """The default synthetic scene at 1 m, shared by the slower checks."""
    from voxfrac.pipeline import build_dataset
    from voxfrac.scenegen import generate_scene

    cfg = RunConfig()
    return cfg, build_dataset(generate_scene(cfg.scene_config()), 1.0, cfg)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record one acceptance line: ``verdict(n, ok, detail)``."""

    def record(n: int, ok: bool, detail: str) -> bool:
        line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'} {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
