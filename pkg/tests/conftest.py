import time

import numpy as np
import pytest

from megc.corpus import SampleCache, load_manifest
from megc.cues import SupervisionSource, zero_map
from megc.moire_net import build_moire_net, make_moire_pairs, pretrain_demoire, train_moire_net
from megc.toy import make_toy_corpus
from megc.trainer import TrainConfig, Trainer, train_accuracy

# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []

SMOKE_CONFIG = dict(steps=300, lr=1e-3, batch_size=8, seed=0, desk_scale=True)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def toy_manifest(tmp_path_factory):
    return make_toy_corpus(tmp_path_factory.mktemp("toy"), n_live=8, n_print=4, n_replay=4, seed=0)


@pytest.fixture(scope="session")
def toy_index(toy_manifest):
    return load_manifest(toy_manifest)


@pytest.fixture(scope="session")
def toy_cache(toy_index):
    return SampleCache(toy_index)


@pytest.fixture(scope="session")
def toy_samples(toy_index, toy_cache):
    return [toy_cache.get(r) for r in toy_index.samples]


@pytest.fixture(scope="session")
def live_samples(toy_samples):
    return [s for s in toy_samples if s.is_live]


def toy_source():
    # desk-scale defaults: dome depth, zero reflection; moire labels are zero maps here
    return SupervisionSource(moire=zero_map)


@pytest.fixture(scope="session")
def smoke_run(toy_index):
    """The 300-step overfit run on the 16-sample toy corpus, shared by several tests."""
    t0 = time.time()
    trainer = Trainer(toy_index, toy_source(), TrainConfig(**SMOKE_CONFIG))
    result = trainer.run()
    elapsed = time.time() - t0
    samples = [trainer.cache.get(r) for r in toy_index.samples]
    acc = train_accuracy(result.model, samples)
    return {"trainer": trainer, "result": result, "elapsed": elapsed, "accuracy": acc}


@pytest.fixture(scope="session")
def moire_run(live_samples):
    """Pretrained-then-frozen moire net trained on 64 synthetic pairs for 200 steps."""
    pairs = make_moire_pairs(live_samples, 64, seed=0)
    held_out = make_moire_pairs(live_samples, 32, seed=1, clean_fraction=0.0)
    net = build_moire_net(seed=0)
    pretrain_demoire(net, pairs, steps=400, seed=0)
    frozen_before = {k: v.clone() for k, v in net.demoire.state_dict().items()}
    history = train_moire_net(net, pairs, steps=200, seed=0, lr=3e-3)
    return {"net": net, "pairs": pairs, "held_out": held_out, "history": history, "frozen_before": frozen_before}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
