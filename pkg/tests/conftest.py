import sys

import numpy as np
import pytest
import torch

from atsc import Encoder, EncoderSpec, SharedClassifier, build_projector
from atsc.models import seeded


@pytest.fixture(autouse=True)
def _torch_defaults():
    torch.use_deterministic_algorithms(False)
    yield
    torch.use_deterministic_algorithms(False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_models(seed=0, dtype=torch.float64, in_dim=6, t_out=8, s_out=4, r=2, k=3, t_widths=(8,), s_widths=(5,)):
    """Teacher, student, projector and classifier with well under 1000 parameters each."""
    with seeded(seed):
        teacher = Encoder(EncoderSpec("mlp", in_dim, t_widths, t_out), role="teacher").to(dtype)
        student = Encoder(EncoderSpec("mlp", in_dim, s_widths, s_out)).to(dtype)
        proj = build_projector(s_out, t_out, r).to(dtype)
        clf = SharedClassifier(t_out, k).to(dtype)
    return teacher, student, proj, clf


def tiny_cnn_models(seed=0, dtype=torch.float64):
    with seeded(seed):
        teacher = Encoder(EncoderSpec("cnn", 2, (3,), 4, input_size=(4, 4), strides=(1,)), role="teacher").to(dtype)
        student = Encoder(EncoderSpec("cnn", 2, (2,), 3, input_size=(4, 4), strides=(2,))).to(dtype)
        proj = build_projector(3, 4, 2).to(dtype)
        clf = SharedClassifier(4, 3).to(dtype)
    return teacher, student, proj, clf


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in acceptance.summary_lines():
        terminalreporter.write_line(line)
