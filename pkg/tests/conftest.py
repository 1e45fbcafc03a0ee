import numpy as np
import pytest
import torch

from vst.seeding import set_deterministic
from vst.toydata import DatasetConfig, generate_dataset


@pytest.fixture(autouse=True)
def _seed_everything():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Six subjects, four short clips each; two subjects held out for test."""
    out = tmp_path_factory.mktemp("tiny") / "data"
    cfg = DatasetConfig(out_dir=str(out), n_subjects=6, clips_per_subject=4, n_frames=24,
                        height=32, width=32)
    generate_dataset(cfg)
    return out


@pytest.fixture
def deterministic():
    set_deterministic(True)
    yield
    set_deterministic(False)


TINY_TRAIN = dict(channels=16, style_dim=8, synth_hidden=16, n_heads=2, batch_size=2, max_steps=10,
                  encoder_input_size=16, checkpoint_every=1000)


@pytest.fixture(scope="session")
def tiny_cache(tiny_dataset):
    from vst.trainer import ClipCache
    return ClipCache(tiny_dataset, "train")


@pytest.fixture
def make_trainer(tiny_cache):
    from vst.objectives import AudioIdClassifier
    from vst.trainer import SubjectIndex, TrainConfig, Trainer

    def build(**overrides):
        torch.manual_seed(123)
        index = SubjectIndex(tiny_cache.subjects)
        clf = AudioIdClassifier(len(index), width=8)
        cfg = TrainConfig(**{**TINY_TRAIN, **overrides})
        return Trainer(cfg, tiny_cache, clf, index)

    return build


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    verdicts = getattr(mod, "VERDICTS", None)
    if verdicts:
        terminalreporter.section("acceptance")
        for n in sorted(verdicts):
            terminalreporter.write_line(verdicts[n])
