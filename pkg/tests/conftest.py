import numpy as np
import pytest

from edgeforest.features import compute_channels
from edgeforest.forest import TrainParams, train_forest
from edgeforest.groundtruth import sample_training_set
from edgeforest.label_space import LabelSpaceConfig

CFG = LabelSpaceConfig()


def make_toy_scenes(n=6, size=48, seed=5):
    """Axis-aligned two-region scenes with exact segmentations."""
    rng = np.random.default_rng(seed)
    images, seg_sets = [], []
    for i in range(n):
        seg = np.ones((size, size), dtype=np.uint16)
        if i % 2 == 0:
            seg[:, 18 + 2 * i :] = 2
        else:
            seg[18 + 2 * i :, :] = 2
        img = np.zeros((size, size, 3), dtype=np.float64)
        img[seg == 1] = (60, 80, 100)
        img[seg == 2] = (180, 160, 140)
        img += rng.normal(0, 3, size=img.shape)
        images.append(np.clip(img, 0, 255).astype(np.uint8))
        seg_sets.append([seg])
    return images, seg_sets


@pytest.fixture(scope="session")
def toy_training():
    images, seg_sets = make_toy_scenes()
    stacks = [compute_channels(im, CFG) for im in images]
    patches = sample_training_set(seg_sets, CFG, n_per_class=12, seed=3)
    return images, seg_sets, stacks, patches


@pytest.fixture(scope="session")
def small_forest(toy_training):
    _, _, stacks, patches = toy_training
    params = TrainParams(n_trees=4, max_depth=12, min_leaf_count=2,
                         n_single=64, n_pairdiff=64)
    return train_forest(patches, stacks, CFG, params, seed=1)
