import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from support import EVAL_IMAGES, TRAIN_IMAGES, load  # noqa: E402

from asr.detect import DogParams, detect_dog  # noqa: E402
from asr.model import ASRParams, augment_images, collect_reference_patches, train_model  # noqa: E402

TRAIN_DOG = DogParams(contrast_threshold=0.01)


@pytest.fixture(scope="session")
def reference_patches():
    images = augment_images([load(n) for n in TRAIN_IMAGES])
    return collect_reference_patches(images, ASRParams(), TRAIN_DOG)


@pytest.fixture(scope="session")
def model(reference_patches):
    return train_model(reference_patches, ASRParams())


@pytest.fixture(scope="session")
def eval_images():
    return {n: load(n) for n in EVAL_IMAGES}


@pytest.fixture(scope="session")
def eval_keypoints(eval_images):
    """DoG keypoints of each evaluation image (orientation left unset)."""
    return {n: detect_dog(img, TRAIN_DOG) for n, img in eval_images.items()}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_RESULTS = []


def record_acceptance(criterion: str, passed: bool, detail: str) -> None:
    line = f"[{'PASS' if passed else 'FAIL'}] {criterion}: {detail}"
    ACCEPTANCE_RESULTS.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_RESULTS):
            terminalreporter.write_line(line)
