import numpy as np
import pytest
import torch

from framedistill import synthvideo
from framedistill.augment import AugConfig
from framedistill.config import load_config
from framedistill.encoder import EncoderConfig


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_scene():
    return synthvideo.generate_scene(seed=3, num_shapes=4, canvas=(64, 64), num_frames=120)


@pytest.fixture(scope="session")
def small_video(tmp_path_factory, small_scene):
    """A materialized 120-frame, 64x64 synthetic video."""
    root = tmp_path_factory.mktemp("video")
    store, labels = synthvideo.materialize(small_scene, root)
    return root, store, labels


@pytest.fixture
def tiny_encoder():
    return EncoderConfig(image_size=32, patch_size=8, embed_dim=16, depth=1, heads=2, num_prototypes=8, head_hidden=16, head_bottleneck=8)


@pytest.fixture
def tiny_aug():
    return AugConfig(global_size=32, local_size=16, num_local=2)


def tiny_run_config(**overrides):
    """Seconds-scale run config on the tiny encoder."""
    base = {
        "image_size": 32,
        "patch_size": 8,
        "embed_dim": 16,
        "depth": 1,
        "heads": 2,
        "num_prototypes": 8,
        "head_hidden": 16,
        "head_bottleneck": 8,
        "predictor_blocks": 1,
        "global_size": 32,
        "local_size": 16,
        "num_local": 2,
        "batch_size": 2,
        "epochs": 2,
        "clips_per_epoch": 4,
        "warmup_epochs": 1,
        "teacher_temp_warmup_epochs": 1,
        "stride": 5,
        "probe_iters": 20,
        "probe_batch": 4,
        "probe_train_frames": 8,
        "probe_eval_frames": 4,
    }
    base.update(overrides)
    return load_config(overrides=base)


@pytest.fixture
def make_run_config():
    return tiny_run_config


_CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _CRITERIA[number] = ("PASS" if report.passed else "FAIL", title)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        status, title = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d} {status}: {title}")
