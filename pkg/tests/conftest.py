import numpy as np
import pytest
from hypothesis import settings

from usmim.encoder import EncoderConfig

settings.register_profile("repo", deadline=None, derandomize=True, max_examples=50)
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_encoder():
    # 16x16 input, 4x4 stem grid, 2x2 final grid
    return EncoderConfig(image_size=16, stem_patch=4, stages=2, stage_dims=(8, 16), state_dim=4,
                         scan_directions=2, mlp_ratio=2.0, depths=(1, 1))


def tiny_train_config(**changes):
    from usmim.config import TrainConfig, replace

    base = dict(epochs=3, warmup_epochs=1, batch_size=4, encoder__image_size=32, encoder__stage_dims=(8, 16),
                encoder__state_dim=4, encoder__mlp_ratio=2.0, head__hidden=16, head__bottleneck=8,
                head__prototypes=32, views__global_size=32, views__local_size=16, views__n_local=2)
    base.update(changes)
    return replace(TrainConfig(), **base)


def tiny_records(count=8, size=48):
    from usmim.data import SpecklePhantomSpec, synth_speckle

    return [synth_speckle(SpecklePhantomSpec(image_size=size, seed=s)) for s in range(count)]


# acceptance criteria report: number -> (passed, detail)
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
