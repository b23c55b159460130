import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from uapcl.classifier import ClassifierConfig, init_params  # noqa: E402
from uapcl.continual import StageConfig, StageData, TrainerState, finetune_stage  # noqa: E402
from uapcl.data import SynthConfig, make_extractor, stack, synth_domain, train_features  # noqa: E402
from uapcl.data import FeatureMatrix, normalize_rows  # noqa: E402
from uapcl.experiment import default_domains  # noqa: E402


def small_split(domain, split, n=(60, 60), synth=None):
    """Stacked features and clips for one small domain split."""
    synth = synth or SynthConfig()
    spec = replace(domain, counts={split: n})
    clips = synth_domain(spec, split, synth)
    x = normalize_rows(np.stack([c.samples for c in clips]))
    feats = train_features(x, make_extractor(synth), synth.crop_len)
    return stack([FeatureMatrix(f, c.label, c.domain_id, c.cluster_id) for f, c in zip(feats, clips)], clips)


@pytest.fixture(scope="session")
def world():
    return SynthConfig(), default_domains(0)


@pytest.fixture(scope="session")
def extractor(world):
    return make_extractor(world[0])


@pytest.fixture(scope="session")
def trained(world):
    """A small classifier base-trained on domain 1 for 10 epochs, plus its data."""
    synth, domains = world
    train = small_split(domains[0], "train", (120, 120), synth)
    dev = small_split(domains[0], "dev", (40, 40), synth)
    cfg = ClassifierConfig(model_dim=16, ff_dim=32, seed=0)
    state = TrainerState(init_params(cfg))
    res = finetune_stage(state, StageData(train, dev, 1), StageConfig(lr=6e-3, epochs=10, batch_size=32, seed=0))
    return res.snapshot, train, dev


# one line per acceptance criterion, echoed after the run
ACCEPTANCE: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
