import time

import numpy as np
import pytest

from diffrestore.process import make_process
from diffrestore.score import TrainConfig, save_checkpoint, train_score
from diffrestore.signal import harmonic_frames

ACCEPTANCE_LINES = []

# toy audio prior shared by the blind-estimation tests
HARMONIC_FRAME = 128
HARMONIC_TRAIN = dict(steps=8000, batch_size=128, hidden=(256, 256), lr=1e-3, seed=0)


@pytest.fixture(scope="session")
def harmonic_model(tmp_path_factory):
    """VE score model trained on band-rich harmonic frames, plus its checkpoint and training time."""
    t0 = time.perf_counter()
    process = make_process("ve")
    data = harmonic_frames(40000, HARMONIC_FRAME, rng=np.random.default_rng(1))
    model = train_score(data, process, TrainConfig(**HARMONIC_TRAIN))
    path = tmp_path_factory.mktemp("harmonic") / "model.bin"
    save_checkpoint(model, path)
    return model, path, time.perf_counter() - t0


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
