import pytest
import torch
from hypothesis import settings

from delt.core import DatasetProfile
from delt.data import load_split
from delt.models import build_model
from delt.teacher import TeacherSnapshot, squeeze

settings.register_profile("ci", deadline=None, max_examples=100)
settings.load_profile("ci")


@pytest.fixture(scope="session")
def tiny_profile():
    return DatasetProfile("tiny", 4, 8, (0.5, 0.5, 0.5), (0.25, 0.25, 0.25))


@pytest.fixture(scope="session")
def tiny_teacher(tiny_profile):
    """Untrained 2-block ConvNet with perturbed BN statistics, for fast structural tests."""
    torch.manual_seed(0)
    model = build_model("convnet2_w8", tiny_profile.num_classes, tiny_profile.resolution)
    for m in model.modules():
        if isinstance(m, torch.nn.BatchNorm2d):
            m.running_mean.uniform_(-0.2, 0.2)
            m.running_var.uniform_(0.5, 1.5)
    return TeacherSnapshot("convnet2_w8", model, tiny_profile.num_classes, tiny_profile)


@pytest.fixture(scope="session")
def digits_train():
    return load_split("digits", "train")


@pytest.fixture(scope="session")
def digits_val():
    return load_split("digits", "val")


@pytest.fixture(scope="session")
def digits_teacher(digits_train, digits_val):
    return squeeze(digits_train.normalized(), digits_train.labels, "convnet3_w32", digits_train.profile, 8,
                   seed=0, val_images=digits_val.normalized(), val_labels=digits_val.labels, flip=False)


ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record one acceptance line, print it, and fail the test when it is red."""

    def record(number: int, passed: bool, detail: str):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        request.config.stash.setdefault(ACCEPTANCE_KEY, []).append(line)
        print(line)
        assert passed, line

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
