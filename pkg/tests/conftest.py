"""
Shared fixtures: seeded generators, random and planted datasets, on-disk copies
"""
import numpy as np
import pytest

from services.augmentation import AugmentationSpec
from services.data_ingest import Dataset, InteractionMatrix, write_dataset
from services.fusion_scoring import FusionCoefficients
from services.trainer import TrainConfig


def random_matrix(rng, rows, cols, density, kind):
    dense = rng.random((rows, cols)) < density
    return InteractionMatrix(rows, cols, np.argwhere(dense), kind)


def random_dataset(seed=0, users=10, bundles=8, items=12, ub_density=0.35, ui_density=0.3, bi_density=0.3):
    """Random dataset where every user has a train edge and every bundle an item"""
    rng = np.random.default_rng(seed)
    ub = rng.random((users, bundles)) < ub_density
    ub[np.arange(users), rng.integers(0, bundles, size=users)] = True
    pairs = np.argwhere(ub)
    split = rng.choice(3, size=len(pairs), p=[0.6, 0.2, 0.2])
    first = {}
    for index, (user, _) in enumerate(pairs):
        first.setdefault(user, index)
    split[list(first.values())] = 0

    ui = rng.random((users, items)) < ui_density
    bi = rng.random((bundles, items)) < bi_density
    bi[np.arange(bundles), rng.integers(0, items, size=bundles)] = True
    return Dataset(
        ub_train=InteractionMatrix(users, bundles, pairs[split == 0], 'UB'),
        ub_valid=InteractionMatrix(users, bundles, pairs[split == 1], 'UB'),
        ub_test=InteractionMatrix(users, bundles, pairs[split == 2], 'UB'),
        ui=InteractionMatrix(users, items, np.argwhere(ui), 'UI'),
        bi=InteractionMatrix(bundles, items, np.argwhere(bi), 'BI'),
        name=f"random{seed}",
    )


def planted_dataset():
    """
    20 users, 10 bundles, 30 items

    Bundle b holds items 3b..3b+2; user u interacts with bundles 2(u % 5) and
    2(u % 5) + 1 and with all of their items. Nothing is held out.
    """
    users, bundles, items = 20, 10, 30
    bi = [(b, 3 * b + j) for b in range(bundles) for j in range(3)]
    ub = [(u, 2 * (u % 5) + j) for u in range(users) for j in range(2)]
    ui = [(u, 3 * b + j) for u, b in ub for j in range(3)]
    return Dataset(
        ub_train=InteractionMatrix(users, bundles, ub, 'UB'),
        ub_valid=InteractionMatrix.empty(users, bundles, 'UB'),
        ub_test=InteractionMatrix.empty(users, bundles, 'UB'),
        ui=InteractionMatrix(users, items, ui, 'UI'),
        bi=InteractionMatrix(bundles, items, bi, 'BI'),
        name='planted',
    )


def small_config(**changes):
    """Float64 TrainConfig sized for unit tests"""
    values = dict(
        dim=4, layers=2, fusion=FusionCoefficients(), tau=0.5, beta1=0.5, beta2=0.1,
        lr=0.01, batch_size=6, epochs=2, aug=AugmentationSpec(kind='edge_dropout', edge_drop_rate=0.3),
        precision='float64', seed=11,
    )
    values.update(changes)
    return TrainConfig(**values)


@pytest.fixture
def rng():
    return np.random.default_rng(2023)


@pytest.fixture
def dataset():
    return random_dataset(seed=3)


@pytest.fixture
def planted():
    return planted_dataset()


@pytest.fixture
def dataset_dir(tmp_path):
    """A random dataset written in the on-disk layout"""
    path = tmp_path / 'tiny'
    write_dataset(random_dataset(seed=5, users=30, bundles=25, items=40), str(path))
    return str(path)
