import numpy as np
import pytest

from serp.pipeline import synth_dataset

TINY_TRANSFORMER = dict(c=8, n=16, d=16, latent=16, encoder_depth=1, decoder_depth=1, heads=2,
                        patch_widths=[16], pos_hidden=16)
TINY_POINTNET = dict(global_dim=32, perpoint_dim=16, local_dim=16, fusion_widths=[32, 16, 16, 16])


def tiny_model_config(model):
    return dict(TINY_POINTNET) if model == "pointnet" else dict(TINY_TRANSFORMER)


def tiny_train_kwargs(model, **overrides):
    kw = dict(model=model, epochs=2, batch_size=4, num_centers=8, patch_size=16, codebook_size=16,
              model_config=tiny_model_config(model))
    kw.update(overrides)
    return kw


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset():
    return synth_dataset(["sphere", "cube", "torus"], 4, points=128, seed=0, test_fraction=0.25)
