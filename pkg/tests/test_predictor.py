import itertools

import numpy as np
import pytest

from cbcf.dataset import RatingsDataset
from cbcf.errors import ConfigError
from cbcf.predictor import (COLD_USER, NO_NEIGHBOURS, pairs_of, predict_all,
                            predict_item_based, predict_user_based, save_predictions)
from cbcf.similarity import build_similarity_matrix

from conftest import random_ratings


def user_based_oracle(train, sims, u, i, k):
    """Direct evaluation of the mean-centred weighted sum over raw loops."""
    R, M = train.dense()
    means = [R[v][M[v]].mean() if M[v].any() else None for v in range(len(R))]
    cands = [v for v in range(len(R)) if v != u and M[v, i] and sims.defined[u, v]]
    if not cands or not M[u].any():
        return None
    cands.sort(key=lambda v: (-abs(sims.scores[u, v]), v))
    nb = cands[:k]
    den = sum(abs(sims.scores[u, v]) for v in nb)
    if den == 0:
        return None
    val = means[u] + sum(sims.scores[u, v] * (R[v, i] - means[v]) for v in nb) / den
    return min(max(val, 1.0), 5.0)


def item_based_oracle(train, sims, u, i, k):
    R, M = train.dense()
    cands = [j for j in range(R.shape[1])
             if j != i and M[u, j] and sims.defined[i, j] and sims.scores[i, j] > 0]
    if not cands:
        return None
    cands.sort(key=lambda j: (-sims.scores[i, j], j))
    nb = cands[:k]
    val = sum(sims.scores[i, j] * R[u, j] for j in nb) / sum(sims.scores[i, j] for j in nb)
    return min(max(val, 1.0), 5.0)


TOY_USERS = [(1, 1, 5), (1, 2, 3), (1, 3, 4), (1, 4, 1),
             (2, 1, 4), (2, 2, 2), (2, 3, 5), (2, 4, 2),
             (3, 1, 1), (3, 2, 5), (3, 4, 4),
             (4, 1, 2), (4, 2, 4), (4, 3, 2)]
TOY_ITEMS = [(1, 1, 5), (1, 2, 4),
             (2, 1, 2), (2, 2, 1), (2, 3, 4),
             (3, 1, 4), (3, 2, 5), (3, 3, 2)]


class TestUserBased:
    def test_four_user_toy(self):
        tr = RatingsDataset.from_triples(TOY_USERS)
        sims = build_similarity_matrix(tr, "user_pcc")
        u, i = tr.user_index(3), tr.item_index(3)
        got, why = predict_user_based(u, i, tr, sims, k=2)
        assert why is None
        assert got == pytest.approx(user_based_oracle(tr, sims, u, i, 2), abs=1e-12)

    def test_zero_deviation_transfers(self):
        # v's rating of item 3 equals v's mean, so u keeps its own mean
        tr = RatingsDataset.from_triples([(1, 1, 2), (1, 2, 4),
                                          (2, 1, 1), (2, 2, 5), (2, 3, 3)])
        sims = build_similarity_matrix(tr, "user_pcc")
        got, _ = predict_user_based(0, tr.item_index(3), tr, sims, k=5)
        assert got == pytest.approx(3.0)

    def test_nobody_rated_item(self):
        tr = RatingsDataset.from_triples(TOY_USERS + [(5, 9, 3)])
        sims = build_similarity_matrix(tr, "user_pcc")
        got, why = predict_user_based(tr.user_index(1), tr.item_index(9), tr, sims)
        assert got is None and why == NO_NEIGHBOURS

    def test_wrong_kind(self):
        tr = RatingsDataset.from_triples(TOY_ITEMS)
        with pytest.raises(ConfigError):
            predict_user_based(0, 0, tr, build_similarity_matrix(tr, "item_cosine"))


class TestItemBased:
    def test_three_by_three_toy(self):
        tr = RatingsDataset.from_triples(TOY_ITEMS)
        sims = build_similarity_matrix(tr, "item_cosine")
        for u, i in itertools.product(range(3), range(3)):
            got, _ = predict_item_based(u, i, tr, sims, k=2)
            ref = item_based_oracle(tr, sims, u, i, 2)
            assert (got is None) == (ref is None)
            if ref is not None:
                assert got == pytest.approx(ref, abs=1e-12)

    def test_single_positive_neighbour(self):
        tr = RatingsDataset.from_triples([(1, 1, 5), (1, 2, 5), (1, 3, 1),
                                          (2, 1, 1), (2, 2, 2), (2, 3, 5),
                                          (4, 1, 2), (4, 3, 4)])
        sims = build_similarity_matrix(tr, "item_cosine")
        assert sims.scores[0, 1] > 0 and sims.scores[1, 2] < 0
        got, _ = predict_item_based(tr.user_index(4), 1, tr, sims, k=1)
        assert got == 2.0

    def test_cold_user(self):
        tr = RatingsDataset.from_triples(TOY_ITEMS)
        sims = build_similarity_matrix(tr, "item_cosine")
        assert predict_item_based(99, 0, tr, sims)[1] == COLD_USER


@pytest.mark.parametrize("seed", range(40))
def test_random_matrices_against_oracles(seed):
    rng = np.random.default_rng(seed)
    n, m = int(rng.integers(2, 6)), int(rng.integers(2, 6))
    triples = random_ratings(rng, n, m, 0.7, integer=bool(seed % 2))
    tr = RatingsDataset.from_triples(triples)
    if len(tr) == 0:
        return
    us = build_similarity_matrix(tr, "user_pcc")
    it = build_similarity_matrix(tr, "item_cosine")
    k = int(rng.integers(1, 4))
    for u, i in itertools.product(range(tr.shape[0]), range(tr.shape[1])):
        for got, ref in ((predict_user_based(u, i, tr, us, k)[0],
                          user_based_oracle(tr, us, u, i, k)),
                         (predict_item_based(u, i, tr, it, k)[0],
                          item_based_oracle(tr, it, u, i, k))):
            assert (got is None) == (ref is None)
            if ref is not None:
                assert got == pytest.approx(ref, abs=1e-12)
                assert 1.0 <= got <= 5.0


class TestPredictAll:
    def test_clamped_and_deterministic(self):
        rng = np.random.default_rng(2)
        tr = RatingsDataset.from_triples(random_ratings(rng, 30, 20, 0.5))
        sims = build_similarity_matrix(tr, "user_pcc")
        pairs = [(u, i) for u in range(30) for i in range(20)]
        a = predict_all(pairs, tr, sims, "user_based", k=5)
        b = predict_all(pairs, tr, sims, "user_based", k=5, jobs=4)
        assert np.array_equal(a.predicted, b.predicted)
        assert np.all((a.predicted >= 1.0) & (a.predicted <= 5.0))
        assert 0.0 <= a.coverage <= 1.0
        assert len(a.predicted) + sum(a.skipped.values()) == a.requested

    def test_full_coverage(self):
        # items 1/2 and 3/4 move together, so every item has a positive partner
        rows = {1: (5, 5, 1, 1), 2: (1, 1, 5, 5), 3: (5, 4, 2, 1), 4: (2, 1, 5, 4)}
        tr = RatingsDataset.from_triples([(u, i + 1, float(r)) for u, row in rows.items()
                                          for i, r in enumerate(row)])
        sims = build_similarity_matrix(tr, "item_cosine")
        pairs = pairs_of(tr)
        out = predict_all(pairs, tr, sims, "item_based", k=3)
        assert out.coverage == 1.0

    def test_disjoint_users_zero_coverage(self):
        tr = RatingsDataset.from_triples(TOY_ITEMS)
        sims = build_similarity_matrix(tr, "item_cosine")
        out = predict_all([(7, 0), (8, 1)], tr, sims, "item_based")
        assert out.coverage == 0.0
        assert out.skipped == {COLD_USER: 2}

    def test_bad_arguments(self):
        tr = RatingsDataset.from_triples(TOY_ITEMS)
        sims = build_similarity_matrix(tr, "item_cosine")
        with pytest.raises(ConfigError):
            predict_all([], tr, sims)
        with pytest.raises(ConfigError):
            predict_all([(0, 0)], tr, sims, k=0)
        with pytest.raises(ConfigError):
            predict_all([(0, 0)], tr, sims, method="slope_one")

    def test_save(self, tmp_path):
        tr = RatingsDataset.from_triples(TOY_ITEMS)
        sims = build_similarity_matrix(tr, "item_cosine")
        out = predict_all(pairs_of(tr), tr, sims, "item_based", k=2)
        save_predictions(out, tmp_path / "p.csv", tr, "h")
        lines = (tmp_path / "p.csv").read_text().splitlines()
        assert lines[0] == "user,item,predicted"
        assert len(lines) == 1 + len(out.predicted)
