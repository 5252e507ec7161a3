import numpy as np
import pytest

from fitrank.data import (DataError, build_examples, load_movielens, majority_cluster, make_batch, read_examples,
                          split_and_batch, synthetic_planted, write_examples)
from fitrank.training import auc

MOVIES = """1::Toy Story (1995)::Animation|Children's|Comedy
2::Jumanji (1995)::Adventure|Children's|Fantasy
3::Heat (1995)::Action|Crime|Thriller
4::Sabrina (1995)::Comedy|Romance
5::Casino (1995)::Drama|Thriller
"""


def write_ml(tmp_path, ratings, movies=MOVIES):
    (tmp_path / "ratings.dat").write_text(ratings)
    (tmp_path / "movies.dat").write_text(movies)
    return tmp_path


class TestLoadMovielens:
    def test_three_line_fixture(self, tmp_path):
        root = write_ml(tmp_path, "1::3::5::300\n1::1::4::100\n2::2::3::200\n")
        log = load_movielens(root)
        # raw ids -> dense 1-based ids, sorted per user by time
        assert log.user.tolist() == [1, 1, 2]
        assert log.item.tolist() == [1, 3, 2]
        assert log.timestamp.tolist() == [100, 300, 200]
        assert log.counts["raw_ratings"] == 3
        assert log.counts["raw_users"] == 2
        assert log.counts["raw_items_rated"] == 3
        assert log.counts["dropped_users"] == 1  # user 2 has a single event
        # first listed genre is the category
        cats = {int(i): int(c) for i, c in zip(log.item, log.category)}
        assert cats[1] != cats[3]

    def test_empty_file(self, tmp_path):
        with pytest.raises(DataError):
            load_movielens(write_ml(tmp_path, ""))

    def test_malformed_line_reports_number(self, tmp_path):
        with pytest.raises(DataError, match="line 2"):
            load_movielens(write_ml(tmp_path, "1::3::5::300\n1::3::5\n"))

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_movielens(tmp_path)

    def test_unknown_movie(self, tmp_path):
        with pytest.raises(DataError):
            load_movielens(write_ml(tmp_path, "1::9::5::300\n"))


def history_log(tmp_path, events_per_user):
    lines = []
    for u, items in enumerate(events_per_user, start=1):
        for t, i in enumerate(items):
            lines.append(f"{u}::{i}::4::{1000 * u + t}")
    movies = "".join(f"{i}::Movie {i} (2000)::{'Drama' if i % 2 else 'Comedy'}\n" for i in range(1, 81))
    return load_movielens(write_ml(tmp_path, "\n".join(lines) + "\n", movies))


class TestBuildExamples:
    def test_leave_last_out(self, tmp_path):
        log = history_log(tmp_path, [[1, 2, 3], [4, 5]])
        ex = build_examples(log, rng_seed=0)
        assert len(ex) == 4
        first = ex[0]
        assert first.label == 1 and first.candidate[0] == 3
        assert [i for i, _ in first.sequence] == [1, 2]
        neg = ex[1]
        assert neg.label == 0 and neg.sequence == first.sequence
        assert neg.candidate[0] not in (1, 2, 3)

    def test_truncates_to_fifty(self, tmp_path):
        # a second user keeps unseen items in the catalog for negatives
        log = history_log(tmp_path, [list(range(1, 61)), list(range(61, 71))])
        ex = build_examples(log, max_len=50)
        assert ex[0].candidate[0] == 60
        assert [i for i, _ in ex[0].sequence] == list(range(10, 60))

    def test_negatives_never_interacted(self, tmp_path):
        rng = np.random.default_rng(0)
        users = [rng.choice(np.arange(1, 81), size=rng.integers(2, 30), replace=False).tolist() for _ in range(40)]
        log = history_log(tmp_path, users)
        ex = build_examples(log, rng_seed=3, prefixes_per_user=3)
        hist = {}
        for u, it in zip(log.user, log.item):
            hist.setdefault(int(u), set()).add(int(it))
        for e in ex:
            if e.label == 0:
                assert e.candidate[0] not in hist[e.user]
            assert e.candidate not in e.sequence or e.label == 1

    def test_no_leakage(self, tmp_path):
        log = history_log(tmp_path, [[5, 6, 7, 8], [9, 10, 11]])
        ex = build_examples(log, prefixes_per_user=2)
        for e in ex:
            if e.label == 1:
                assert e.candidate[0] not in [i for i, _ in e.sequence]

    def test_short_users_dropped(self, tmp_path):
        log = history_log(tmp_path, [[1], [2, 3]])
        ex = build_examples(log)
        assert len(ex) == 2
        assert ex.info["dropped_users"] == 1

    def test_reproducible(self, tmp_path):
        log = history_log(tmp_path, [[1, 2, 3, 4], [5, 6, 7], [8, 9]])
        assert build_examples(log, rng_seed=4).to_bytes() == build_examples(log, rng_seed=4).to_bytes()


class TestSynthetic:
    def test_single_cluster_is_degenerate(self):
        ex, _ = synthetic_planted(0, 10, 20, 1, seq_len=5)
        assert ex.info["degenerate"]
        assert np.all(ex.label == 1)

    def test_bayes_rule_scores_one(self):
        ex, cluster_of = synthetic_planted(1, 500, 240, 12, seq_len=20)
        maj = majority_cluster(ex.seq_items, ex.seq_len, cluster_of)
        match = (cluster_of[ex.cand_item] == maj).astype(float)
        assert auc(match, ex.label) == 1.0

    def test_popularity_scorer_is_blind(self):
        ex, _ = synthetic_planted(2, 3000, 240, 12, seq_len=20)
        pop = np.bincount(ex.cand_item, minlength=ex.n_items + 1)
        assert abs(auc(pop[ex.cand_item], ex.label) - 0.5) <= 0.05

    def test_invalid_sizes(self):
        with pytest.raises(ValueError):
            synthetic_planted(0, 10, 25, 4)
        with pytest.raises(ValueError):
            synthetic_planted(0, 0, 20, 4)
        with pytest.raises(ValueError):
            synthetic_planted(0, 10, 20, 4, pairs_per_user=0)

    def test_category_is_cluster(self):
        ex, cluster_of = synthetic_planted(3, 20, 40, 4, seq_len=8)
        np.testing.assert_array_equal(ex.item_category[1:], cluster_of[1:] + 1)

    def test_deterministic(self):
        a, _ = synthetic_planted(5, 50, 40, 4, seq_len=8)
        b, _ = synthetic_planted(5, 50, 40, 4, seq_len=8)
        assert a.to_bytes() == b.to_bytes()


class TestSplitAndBatch:
    def test_batch_sizes(self):
        ex, _ = synthetic_planted(0, 5, 8, 2, seq_len=3)
        sizes = [len(b) for b in split_and_batch(ex, batch=4, val_frac=0.0, test_frac=0.0).train]
        assert sizes == [4, 4, 2]

    def test_same_seed_same_order(self):
        ex, _ = synthetic_planted(0, 60, 40, 4, seq_len=6)
        a = split_and_batch(ex, batch=8, rng_seed=3)
        b = split_and_batch(ex, batch=8, rng_seed=3)
        for x, y in zip(a.train.epoch(1), b.train.epoch(1)):
            np.testing.assert_array_equal(x.cand, y.cand)
        assert not np.array_equal(a.train.order(0), a.train.order(1))

    def test_user_level_fractions(self):
        ex, _ = synthetic_planted(0, 1000, 40, 4, seq_len=6)
        split = split_and_batch(ex, batch=64, val_frac=0.2, rng_seed=1)
        pool = len(split.users["train"]) + len(split.users["val"])
        assert abs(len(split.users["val"]) - 0.2 * pool) <= 1
        sets = [set(split.users[k].tolist()) for k in ("train", "val", "test")]
        assert not (sets[0] & sets[1]) and not (sets[0] & sets[2]) and not (sets[1] & sets[2])

    def test_mask_zeroes_padding(self):
        ex, _ = synthetic_planted(0, 20, 40, 4, seq_len=8, min_seq_len=2)
        batch = make_batch(ex, np.arange(len(ex)))
        assert np.all(batch.seq_items[~batch.mask] == 0)
        assert np.all(batch.seq_items[batch.mask] > 0)

    def test_empty(self):
        ex, _ = synthetic_planted(0, 5, 8, 2, seq_len=3)
        with pytest.raises(ValueError):
            split_and_batch(ex.subset(np.zeros(0, dtype=np.int64)))


class TestCache:
    def test_round_trip(self, tmp_path):
        ex, _ = synthetic_planted(0, 30, 40, 4, seq_len=6, min_seq_len=2)
        write_examples(tmp_path / "ex.fitd", ex)
        back = read_examples(tmp_path / "ex.fitd")
        assert back.to_bytes() == ex.to_bytes()
        np.testing.assert_array_equal(back.item_category, ex.item_category)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.fitd").write_bytes(b"NOPE" + bytes(40))
        with pytest.raises(DataError):
            read_examples(tmp_path / "x.fitd")
