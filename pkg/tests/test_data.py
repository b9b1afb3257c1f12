"""TSV round trips, per-user splitting and marginals."""

import numpy as np
import pytest

from balancerec import data as D


def make_log(rng, num_users=12, num_items=9, density=0.5, props=False):
    pairs = [(u, i) for u in range(num_users) for i in range(num_items)
             if rng.random() < density]
    users = np.array([p[0] for p in pairs])
    items = np.array([p[1] for p in pairs])
    labels = rng.integers(0, 2, size=len(pairs))
    prop = rng.uniform(0.05, 1.0, size=len(pairs)) if props else None
    return D.InteractionLog(users, items, labels, prop,
                            num_users=num_users, num_items=num_items)


class TestRoundTrip:
    @pytest.mark.parametrize("props", [False, True])
    def test_save_load_identity(self, tmp_path, props):
        rng = np.random.default_rng(0)
        log = make_log(rng, props=props)
        path = tmp_path / "log.tsv"
        D.save_interactions(log, path)
        loaded = D.load_interactions(path)
        assert np.array_equal(loaded.users, log.users)
        assert np.array_equal(loaded.items, log.items)
        assert np.array_equal(loaded.labels, log.labels)
        if props:
            assert np.array_equal(loaded.propensities, log.propensities)
        else:
            assert loaded.propensities is None

    def test_sparse_ids_reindexed_densely(self, tmp_path):
        path = tmp_path / "log.tsv"
        path.write_text("900\t70\t1\n5\t70\t0\n900\t9\t0\n")
        log = D.load_interactions(path)
        assert log.num_users == 2 and log.num_items == 2
        # sorted original ids map to dense ids
        assert np.array_equal(log.orig_users, [5, 900])
        assert np.array_equal(log.orig_items, [9, 70])
        assert np.array_equal(log.users, [1, 0, 1])
        assert np.array_equal(log.items, [1, 1, 0])
        out = tmp_path / "echo.tsv"
        D.save_interactions(log, out)
        assert out.read_text() == "900\t70\t1\n5\t70\t0\n900\t9\t0\n"

    def test_rejects_duplicates_and_bad_rows(self, tmp_path):
        p = tmp_path / "bad.tsv"
        p.write_text("1\t2\t1\n1\t2\t0\n")
        with pytest.raises(ValueError, match="duplicate"):
            D.load_interactions(p)
        p.write_text("1\t2\t5\n")
        with pytest.raises(ValueError, match="label"):
            D.load_interactions(p)
        p.write_text("1\t2\n")
        with pytest.raises(ValueError, match="columns"):
            D.load_interactions(p)
        p.write_text("1\t2\t1\t0.0\n")
        with pytest.raises(ValueError, match="propensity"):
            D.load_interactions(p)
        p.write_text("1\t2\t1\t0.5\n3\t4\t0\n")
        with pytest.raises(ValueError, match="inconsistent"):
            D.load_interactions(p)

    def test_feature_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        ids = np.array([3, 7, 11])
        mat = rng.normal(size=(3, 4))
        path = tmp_path / "feat.tsv"
        D.save_features(ids, mat, path)
        got_ids, got = D.load_features(path)
        assert np.array_equal(got_ids, ids)
        assert np.array_equal(got, mat)

    def test_export_splits_suffixes(self, tmp_path):
        rng = np.random.default_rng(2)
        log = make_log(rng)
        tr, va, te = D.split_by_user(log, seed=3)
        paths = D.export_splits(tr, va, te, tmp_path / "synth")
        assert [p.rsplit(".", 1)[1] for p in paths] == ["train", "val", "test"]
        back = D.load_interactions(paths[0])
        assert len(back) == len(tr)


class TestSplit:
    def test_partition_exact(self):
        rng = np.random.default_rng(4)
        log = make_log(rng, num_users=20, num_items=15, density=0.6)
        tr, va, te = D.split_by_user(log, seed=5)
        assert len(tr) + len(va) + len(te) == len(log)
        seen = set()
        for part in (tr, va, te):
            for u, i in zip(part.users, part.items):
                assert (u, i) not in seen
                seen.add((u, i))
        all_pairs = set(zip(log.users, log.items))
        assert seen == all_pairs

    def test_ten_records_split_7_1_2(self):
        users = np.zeros(10, dtype=int)
        items = np.arange(10)
        log = D.InteractionLog(users, items, np.ones(10, dtype=int), num_users=1, num_items=10)
        tr, va, te = D.split_by_user(log, (0.7, 0.1, 0.2), seed=0)
        assert (len(tr), len(va), len(te)) == (7, 1, 2)

    def test_small_users_go_to_train(self):
        users = np.array([0, 0, 1, 1, 1])
        items = np.array([0, 1, 0, 1, 2])
        log = D.InteractionLog(users, items, np.ones(5, dtype=int), num_users=2, num_items=3)
        tr, va, te = D.split_by_user(log, seed=1)
        assert np.all(np.isin([0], tr.users[np.nonzero(tr.users == 0)]))
        assert sorted(tr.items[tr.users == 0].tolist()) == [0, 1]
        assert len(tr) + len(va) + len(te) == 5

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(6)
        log = make_log(rng)
        a = D.split_by_user(log, seed=9)
        b = D.split_by_user(log, seed=9)
        for x, y in zip(a, b):
            assert np.array_equal(x.users, y.users)
            assert np.array_equal(x.items, y.items)

    def test_bad_ratios_rejected(self):
        log = make_log(np.random.default_rng(7))
        with pytest.raises(ValueError):
            D.split_by_user(log, (0.5, 0.2, 0.2))


class TestMarginals:
    def test_counts_oracle(self):
        log = D.InteractionLog([0, 0, 1, 2], [1, 2, 1, 1], [1, 0, 1, 0],
                               num_users=3, num_items=4)
        m = D.item_marginals(log)
        np.testing.assert_allclose(m, [0.0, 0.75, 0.25, 0.0])
        assert m.sum() == pytest.approx(1.0)

    def test_resample_uniform_keeps_uniform_log(self):
        users = np.repeat(np.arange(6), 4)
        items = np.tile(np.arange(4), 6)
        log = D.InteractionLog(users, items, np.ones(24, dtype=int),
                               num_users=6, num_items=4)
        out = D.resample_uniform_test(log, seed=11)
        assert len(out) == 24  # keep probability 1 everywhere

    def test_resample_expected_counts_near_min(self):
        rng = np.random.default_rng(12)
        items = np.concatenate([np.zeros(400, dtype=int), np.ones(100, dtype=int),
                                np.full(20, 2)])
        users = np.arange(len(items)) % 50
        log = D.InteractionLog(users, items, np.ones(len(items), dtype=int),
                               num_users=50, num_items=3)
        counts = np.zeros(3)
        trials = 200
        for s in range(trials):
            out = D.resample_uniform_test(log, seed=s)
            counts += np.bincount(out.items, minlength=3)
        counts /= trials
        # every item's expected retained count is the rarest item's count (20)
        np.testing.assert_allclose(counts, [20, 20, 20], atol=1.5)
