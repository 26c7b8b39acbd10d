"""Shared fixtures: a tiny synthetic dataset and a quickly trained model,
both session-scoped because generation and training dominate test runtime.
"""

from __future__ import annotations

import numpy as np
import pytest

import maknet.tensor as T
from maknet.config import parse_config
from maknet.data import SyntheticSpec, generate_synthetic_dataset


@pytest.fixture(autouse=True)
def _finite_checks():
    """Assert no-NaN/Inf after every forward op while tests run."""
    T.set_debug_checks(True)
    yield
    T.set_debug_checks(False)


TINY_CONFIG = """
[run]
seed = 7

[model]
input_size = 32
stem_channels = 8
stem_stride = 2
growth = 8
block_layers = 3,3
block_channels = 12,16
num_labels = 6
dtype = float32

[data]
root = data
synthetic_labeled = 60
synthetic_unlabeled = 120
synthetic_val = 40
synthetic_test = 40

[semisup]
iterations = 2
batch = 4
teacher_epochs = 3
teacher_batch = 8
student_steps = 12
eval_batch = 16
"""


@pytest.fixture(scope="session")
def tiny_workspace(tmp_path_factory):
    """Config file + generated dataset for a 6-label 32x32 problem."""
    root = tmp_path_factory.mktemp("tiny")
    cfg_path = root / "tiny.cfg"
    cfg_path.write_text(TINY_CONFIG)
    cfg = parse_config(TINY_CONFIG, config_dir=root)
    generate_synthetic_dataset(cfg.data_root(), cfg.synthetic_spec(), cfg.seed)
    return cfg_path


@pytest.fixture(scope="session")
def trained_tiny(tiny_workspace):
    """A teacher trained on the tiny dataset; used by attribution and
    evaluation tests that need a non-random model."""
    from maknet.config import load_config
    from maknet.semisup import load_semisup_data, train_teacher

    cfg = load_config(tiny_workspace)
    cfg.values["semisup"]["teacher_epochs"] = 30
    data = load_semisup_data(cfg)
    model, _ = train_teacher(cfg, data)
    return cfg, data, model
