import pytest

from protodistill.config import TrainConfig
from protodistill.data import synth_corpus

# a model small enough that a few epochs run in seconds, with every code path intact
TINY = dict(
    corpus_size=32, batch_size=8, epochs=2, warmup_epochs=1,
    image_side=8, local_side=4, patch_side=2, depth=1, width=8, heads=2,
    mlp_ratio=2.0, proj_hidden=8, out_dim=4, num_prototypes=6,
)


@pytest.fixture
def tiny_cfg():
    return TrainConfig(**TINY)


@pytest.fixture
def tiny_corpus(tiny_cfg):
    return synth_corpus(tiny_cfg.corpus_size, tiny_cfg.corpus_classes, tiny_cfg.image_side, tiny_cfg.corpus_seed)
