from pathlib import Path

import numpy as np
import pytest

from cbcf.clustering import ClusterModel
from cbcf.dataset import RatingsDataset, load_movielens
from cbcf.predictor import PredictionSet

ROOT = Path(__file__).resolve().parents[1]
ML100K = ROOT / "data" / "ml-100k" / "u.data"


@pytest.fixture(scope="session")
def ml100k():
    if not ML100K.exists():
        pytest.skip(f"MovieLens 100K not found at {ML100K}")
    return load_movielens(ML100K)


# Two items, four user clusters. Training ratings fix the cluster averages;
# test pairs carry (true rating, prediction).
EXAMPLE_CLUSTERS = {
    0: [1, 2, 6, 17],
    1: [3, 5, 7, 4, 23],
    2: [10, 11, 12, 19],
    3: [13, 14, 8, 9, 29],
}
EXAMPLE_TRAIN = [
    (1, 1, 5.0), (2, 1, 5.0), (6, 1, 4.0),          # cluster 0, item 1 -> 4.67
    (1, 2, 5.0), (2, 2, 4.0),                       # cluster 0, item 2 -> 4.5
    (3, 1, 4.0), (5, 1, 3.0), (7, 1, 3.0),          # cluster 1, item 1 -> 3.33
    (10, 1, 5.0), (11, 1, 4.0), (12, 1, 4.0),       # cluster 2, item 1 -> 4.33
    (10, 2, 2.0), (11, 2, 2.0), (12, 2, 3.0),       # cluster 2, item 2 -> 2.33
    (13, 2, 4.0), (14, 2, 3.0),                     # cluster 3, item 2 -> 3.5
    (13, 1, 2.0), (14, 1, 2.0),                     # cluster 3, item 1 -> 2.0
    (4, 2, 3.0), (23, 2, 4.0), (17, 2, 3.0), (8, 3, 4.0), (9, 3, 3.0),
    (29, 3, 5.0), (19, 3, 4.0),
]
# (user, item, true rating, predicted rating)
EXAMPLE_TEST = [
    (4, 1, 5.0, 4.6),
    (17, 1, 4.0, 3.9),
    (23, 1, 4.0, 3.2),
    (8, 1, 2.0, 3.0),
    (6, 2, 3.0, 4.1),
    (8, 2, 5.0, 4.7),
    (9, 2, 3.0, 3.4),
    (29, 2, 4.0, 3.7),
]


class WorkedExample:
    def __init__(self):
        triples = EXAMPLE_TRAIN + [(u, i, r) for u, i, r, _ in EXAMPLE_TEST]
        full = RatingsDataset.from_triples(triples)
        n_train = len(EXAMPLE_TRAIN)
        is_test = np.zeros(len(full), dtype=bool)
        test_keys = {(u, i) for u, i, _, _ in EXAMPLE_TEST}
        for k in range(len(full)):
            key = (int(full.user_ids[full.users[k]]), int(full.item_ids[full.items[k]]))
            is_test[k] = key in test_keys
        assert is_test.sum() == len(EXAMPLE_TEST) and (~is_test).sum() == n_train
        self.full = full
        self.train = full.subset(~is_test)
        self.test = full.subset(is_test)
        assign = np.empty(len(full.user_ids), dtype=np.int64)
        for c, users in EXAMPLE_CLUSTERS.items():
            for u in users:
                assign[full.user_index(u)] = c
        self.model = ClusterModel(assign, 4, "given")
        self.preds = PredictionSet(
            np.array([full.user_index(u) for u, _, _, _ in EXAMPLE_TEST]),
            np.array([full.item_index(i) for _, i, _, _ in EXAMPLE_TEST]),
            np.array([p for _, _, _, p in EXAMPLE_TEST]),
            "given", 0, len(EXAMPLE_TEST))


@pytest.fixture
def worked():
    return WorkedExample()


def random_ratings(rng, n_users, n_items, density=0.5, integer=True):
    """Random dataset as triples over raw ids 1..n."""
    triples = []
    for u in range(1, n_users + 1):
        for i in range(1, n_items + 1):
            if rng.random() < density:
                r = float(rng.integers(1, 6)) if integer else float(rng.uniform(1, 5))
                triples.append((u, i, r))
    return triples


def synthetic_instance(n_users=50, n_items=30, seed=0):
    """Random train/test split with noisy predictions and a random
    4-cluster model."""
    rng = np.random.default_rng(seed)
    triples = [(u, i, float(rng.integers(1, 6)))
               for u in range(1, n_users + 1) for i in range(1, n_items + 1)
               if rng.random() < 0.4]
    full = RatingsDataset.from_triples(triples)
    is_test = rng.random(len(full)) < 0.3
    train, test = full.subset(~is_test), full.subset(is_test)
    model = ClusterModel(rng.integers(0, 4, full.shape[0]), 4, "given")
    pred = np.round(np.clip(test.ratings + rng.normal(0, 1, len(test)), 1, 5), 2)
    preds = PredictionSet(test.users, test.items, pred, "given", 0, len(test))
    return train, test, model, preds


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
