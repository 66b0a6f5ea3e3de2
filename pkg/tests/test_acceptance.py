"""One test per acceptance criterion, each at its stated tolerance.

Every result line is printed and also repeated in the terminal summary. The
MNIST criteria (7-9) need the real MNIST files under --data-dir or
GANSSL_DATA_DIR; without them they fail and say so.
"""
import os

import pytest

from ganssl import verify

RESULTS = []


@pytest.fixture(scope="module")
def work_dir(tmp_path_factory):
    return os.environ.get("GANSSL_ACCEPTANCE_DIR") or tmp_path_factory.mktemp("acceptance")


def _record(result):
    RESULTS.append(result.line())
    print(result.line())
    assert result.passed, result.line()


def test_criterion_01_loss_oracle():
    _record(verify.check_loss_oracle())


def test_criterion_02_analytic_values():
    _record(verify.check_analytic_values())


def test_criterion_03_gradients():
    _record(verify.check_gradients())


def test_criterion_04_reinforce():
    _record(verify.check_reinforce())


def test_criterion_05_zca():
    _record(verify.check_zca())


@pytest.mark.slow
def test_criterion_06_synthetic_efficacy(work_dir):
    _record(verify.check_synthetic_efficacy(os.path.join(work_dir, "synthetic")))


@pytest.mark.slow
def test_criterion_07_mnist_scaled(work_dir):
    _record(verify.check_mnist_scaled(None, os.path.join(work_dir, "mnist")))


@pytest.mark.slow
def test_criterion_08_batch_direction(work_dir):
    _record(verify.check_batch_direction(None, os.path.join(work_dir, "mnist")))


@pytest.mark.slow
def test_criterion_09_conditional_generation(work_dir):
    _record(verify.check_conditional_generation(None, os.path.join(work_dir, "mnist")))


def test_criterion_10_plumbing(work_dir):
    _record(verify.check_plumbing(os.path.join(work_dir, "plumbing")))
