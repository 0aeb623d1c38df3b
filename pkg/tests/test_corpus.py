"""Ingestion, filtering, splitting, windowing, label noise, and the store."""

from __future__ import annotations

import numpy as np
import pytest

from shiftrec import corpus
from shiftrec.corpus import (
    CorpusError,
    Interaction,
    build_catalog,
    build_dataset,
    build_sequences,
    filter_min_count,
    label_dropout,
    load_interactions,
    load_store,
    rebucket,
    save_store,
    sliding_window_samples,
    split_leave_one_out,
)


def ev(user, item, ts, cats=("A",)):
    return Interaction(user, item, ts, frozenset(cats))


class TestLoadInteractions:
    def test_tsv_roundtrip(self, tmp_path):
        path = tmp_path / "log.tsv"
        path.write_text("u1\ti1\t100\tA|B\nu1\ti2\t200\t\n")
        events = load_interactions(path, "tsv")
        assert events[0] == Interaction("u1", "i1", 100, frozenset({"A", "B"}))
        assert events[1].categories == frozenset()

    def test_empty_file_rejected(self, tmp_path):
        path = tmp_path / "log.tsv"
        path.write_text("")
        with pytest.raises(CorpusError, match="empty input"):
            load_interactions(path, "tsv")

    def test_malformed_line_names_line_number(self, tmp_path):
        path = tmp_path / "log.tsv"
        path.write_text("u1\ti1\t100\tA\nu2\ti2\tnot-a-number\tB\n")
        with pytest.raises(CorpusError, match="line 2"):
            load_interactions(path, "tsv")
        path.write_text("u1\ti1\t100\tA\nonly\ttwo\n")
        with pytest.raises(CorpusError, match="line 2"):
            load_interactions(path, "tsv")

    def test_jsonl_missing_item_names_record(self, tmp_path):
        path = tmp_path / "log.jsonl"
        path.write_text('{"user": "u", "item": "i", "ts": 1, "categories": ["A"]}\n'
                        '{"user": "u", "ts": 2, "categories": []}\n')
        with pytest.raises(CorpusError, match="record 1"):
            load_interactions(path, "jsonl")

    def test_jsonl_unknown_fields_ignored(self, tmp_path):
        path = tmp_path / "log.jsonl"
        path.write_text('{"user": "u", "item": "i", "ts": 1, "categories": ["A"], "extra": 9}\n')
        events = load_interactions(path, "jsonl")
        assert events[0].item == "i"

    def test_unknown_format_rejected(self, tmp_path):
        with pytest.raises(CorpusError, match="unknown input format"):
            load_interactions(tmp_path / "x", "csv")


class TestFilterMinCount:
    def test_sparse_user_removed(self):
        events = [ev("u1", f"i{j}", j) for j in range(4)]
        events += [ev("u2", f"i{j}", j) for j in range(5)]
        # make every item popular enough on its own
        for j in range(5):
            events += [ev(f"filler{n}", f"i{j}", n) for n in range(5)]
        for n in range(5):
            events += [ev(f"filler{n}", f"i{n % 5}", 10 + m) for m in range(4)]
        out = filter_min_count(events, 5)
        assert all(e.user != "u1" for e in out)
        assert any(e.user == "u2" for e in out)

    def test_identity_when_all_pass(self):
        events = [ev(f"u{i}", f"i{j}", j) for i in range(5) for j in range(5)]
        assert filter_min_count(events, 5) == events

    def test_cascade_matches_brute_force(self):
        # u5 has only 4 events; dropping u5 starves i9, so both disappear
        # while the 5x5 core survives intact
        events = []
        for u in range(5):
            for j in range(5):
                events.append(ev(f"u{u}", f"i{j}", j))
        events += [ev("u4", "i9", 10)]
        events += [ev("u5", "i9", t) for t in range(4)]

        def brute_force(evts, k):
            evts = list(evts)
            while True:
                users = {}
                items = {}
                for e in evts:
                    users[e.user] = users.get(e.user, 0) + 1
                    items[e.item] = items.get(e.item, 0) + 1
                bad_users = {u for u, c in users.items() if c < k}
                bad_items = {i for i, c in items.items() if c < k}
                if not bad_users and not bad_items:
                    return evts
                evts = [e for e in evts if e.user not in bad_users and e.item not in bad_items]

        out = filter_min_count(events, 5)
        assert out == brute_force(events, 5)
        assert all(e.item != "i9" for e in out)

    def test_output_satisfies_threshold_invariant(self):
        rng = np.random.default_rng(3)
        events = [
            ev(f"u{rng.integers(12)}", f"i{rng.integers(15)}", int(t))
            for t in range(400)
        ]
        for k in (2, 3, 5):
            out = filter_min_count(events, k)
            users = {}
            items = {}
            for e in out:
                users[e.user] = users.get(e.user, 0) + 1
                items[e.item] = items.get(e.item, 0) + 1
            assert all(c >= k for c in users.values())
            assert all(c >= k for c in items.values())

    def test_emptied_dataset_is_an_error(self):
        with pytest.raises(CorpusError, match="emptied"):
            filter_min_count([ev("u", "i", 0)], 5)

    def test_order_preserved(self):
        events = [ev(f"u{u}", f"i{j}", u * 10 + j) for u in range(5) for j in range(5)]
        events.insert(7, ev("u9", "i0", 99))  # dropped: single-event user
        out = filter_min_count(events, 5)
        survivors = [e for e in events if e.user != "u9"]
        assert out == survivors


class TestBuildSequences:
    def test_sorted_by_timestamp(self):
        events = [ev("u", "a", 3), ev("u", "b", 1), ev("u", "c", 2)]
        catalog = build_catalog(events)
        seq = build_sequences(events, catalog)["u"]
        assert [catalog.items[i - 1] for i in seq] == ["b", "c", "a"]

    def test_ties_keep_file_order(self):
        events = [ev("u", "a", 1), ev("u", "b", 1), ev("u", "c", 1)]
        catalog = build_catalog(events)
        seq = build_sequences(events, catalog)["u"]
        assert [catalog.items[i - 1] for i in seq] == ["a", "b", "c"]

    def test_singleton(self):
        events = [ev("u", "a", 1)]
        catalog = build_catalog(events)
        assert build_sequences(events, catalog)["u"] == [1]


class TestSplit:
    def test_four_item_example(self):
        region, (val_in, val_t), (test_in, test_t) = split_leave_one_out([1, 2, 3, 4])
        assert region == [1, 2, 3]
        assert (val_in, val_t) == ([1, 2], 3)
        assert (test_in, test_t) == ([1, 2, 3], 4)

    def test_short_sequence_rejected(self):
        with pytest.raises(ValueError, match="length 2"):
            split_leave_one_out([1, 2])

    def test_length_three_has_one_trainable_pair(self):
        region, _, _ = split_leave_one_out([1, 2, 3])
        samples = sliding_window_samples(region, 50, _catalog_n(3), 5)
        assert len(samples) == 1


def _catalog_n(n, cats_per_item=1):
    return corpus.Catalog(
        items=[f"i{k}" for k in range(n)],
        categories=[f"g{k}" for k in range(n)],
        item_cats=[frozenset({k % n}) for k in range(n)],
    )


class TestSlidingWindows:
    def test_enumeration(self):
        samples = sliding_window_samples([1, 2, 3], 50, _catalog_n(3), 5)
        assert [(s.input_items, s.target_item) for s in samples] == [((1,), 2), ((1, 2), 3)]

    def test_single_item_region_yields_nothing(self):
        assert sliding_window_samples([1], 50, _catalog_n(1), 5) == []

    def test_window_truncation(self):
        samples = sliding_window_samples([1, 2, 3, 4, 5], 2, _catalog_n(5), 5)
        assert len(samples) == 4
        assert all(len(s.input_items) <= 2 for s in samples)
        assert samples[-1].input_items == (3, 4)

    def test_sample_count_is_region_length_minus_one(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            length = int(rng.integers(2, 30))
            region = [int(rng.integers(1, 6)) for _ in range(length)]
            assert len(sliding_window_samples(region, 7, _catalog_n(6), 5)) == length - 1

    def test_levels_match_direct_assessment(self):
        from shiftrec.shift import assess_shift
        catalog = _catalog_n(6)
        samples = sliding_window_samples([1, 2, 3, 1, 2], 3, catalog, 5)
        for s in samples:
            assert s.shift_level == assess_shift(s.input_items, s.target_item, catalog, 5)


class TestLabelDropout:
    def _catalog(self, labels_per_item=3, n_items=50):
        return corpus.Catalog(
            items=[f"i{k}" for k in range(n_items)],
            categories=[f"g{k}" for k in range(10)],
            item_cats=[frozenset(range(labels_per_item)) for _ in range(n_items)],
        )

    def test_zero_rate_is_identity(self):
        catalog = self._catalog()
        assert label_dropout(catalog, 0.0, 1) is catalog

    def test_full_rate_retains_exactly_one_original_label(self):
        catalog = self._catalog(labels_per_item=2)
        out = label_dropout(catalog, 1.0, 7)
        for original, kept in zip(catalog.item_cats, out.item_cats):
            assert len(kept) == 1
            assert kept <= original

    def test_every_item_keeps_a_label(self):
        catalog = self._catalog()
        out = label_dropout(catalog, 0.9, 3)
        assert all(len(c) >= 1 for c in out.item_cats)

    def test_empirical_drop_rate(self):
        # 10 labels per item makes the keep-one fallback negligible, so the
        # observed rate tracks the Bernoulli parameter
        catalog = self._catalog(labels_per_item=10, n_items=1000)
        out = label_dropout(catalog, 0.5, 11)
        kept = sum(len(c) for c in out.item_cats)
        drop_rate = 1.0 - kept / 10_000
        assert abs(drop_rate - 0.5) < 0.02

    def test_deterministic_given_seed(self):
        catalog = self._catalog()
        a = label_dropout(catalog, 0.4, 5)
        b = label_dropout(catalog, 0.4, 5)
        assert a.item_cats == b.item_cats

    def test_bad_rate_rejected(self):
        with pytest.raises(ValueError):
            label_dropout(self._catalog(), 1.5, 0)


def _synthetic_log(n_users=8, seq_len=6):
    events = []
    cats = ["A", "B", "C"]
    for u in range(n_users):
        for t in range(seq_len):
            item = f"i{(u + t) % 6}"
            events.append(ev(f"u{u}", item, t, (cats[(u + t) % 3],)))
    return events


class TestBuildDataset:
    def test_counts_and_report(self):
        dataset = build_dataset(_synthetic_log(), min_count=2, window=4, n_levels=5)
        report = dataset.report()
        assert report["users"] == dataset.n_users
        assert set(report) >= {"users", "items", "categories", "interactions",
                               "sparsity", "excluded_short_sequences"}
        assert 0 <= report["sparsity"] <= 1

    def test_test_target_never_a_training_target_positionally(self):
        events = _synthetic_log()
        dataset = build_dataset(events, min_count=2, window=10, n_levels=5)
        catalog = dataset.catalog
        sequences = build_sequences(filter_min_count(events, 2), catalog)
        train_by_user = {}
        for s in dataset.train:
            train_by_user.setdefault(s.user, []).append(s.target_item)
        for user_pos, (user, seq) in enumerate(sequences.items()):
            if len(seq) < 3:
                continue
            # training targets are exactly the region's items from position 2 on
            assert train_by_user[user_pos] == seq[1:-1]

    def test_unlabeled_items_get_stand_in_category(self):
        events = [Interaction("u", f"i{t}", t, frozenset()) for t in range(5)]
        events = [Interaction(f"u{k}", e.item, e.timestamp, e.categories)
                  for k in range(5) for e in events]
        dataset = build_dataset(events, min_count=2, window=4, n_levels=5)
        assert corpus.UNLABELED_CATEGORY in dataset.catalog.categories
        assert all(len(c) == 1 for c in dataset.catalog.item_cats)


class TestStore:
    def test_round_trip(self, tmp_path):
        dataset = build_dataset(_synthetic_log(), min_count=2, window=4, n_levels=5)
        path = tmp_path / "store.npz"
        save_store(dataset, path, provenance={"config_hash": "abc", "seed": 1})
        loaded, provenance = load_store(path)
        assert provenance == {"config_hash": "abc", "seed": 1}
        assert loaded.train == dataset.train
        assert loaded.validation == dataset.validation
        assert loaded.test == dataset.test
        assert loaded.catalog.items == dataset.catalog.items
        assert loaded.catalog.item_cats == dataset.catalog.item_cats

    def test_bad_file_rejected(self, tmp_path):
        path = tmp_path / "junk.npz"
        np.savez(path, x=np.arange(3))
        with pytest.raises(CorpusError, match="not a sample store"):
            load_store(path)


class TestRebucket:
    def test_single_level_degenerate(self):
        dataset = build_dataset(_synthetic_log(), min_count=2, window=4, n_levels=5)
        out = rebucket(dataset.train, 1)
        assert all(s.shift_level == 1 for s in out)

    def test_rebucket_matches_fresh_assessment(self):
        events = _synthetic_log()
        base = build_dataset(events, min_count=2, window=4, n_levels=5)
        direct = build_dataset(events, min_count=2, window=4, n_levels=7)
        rebucketed = rebucket(base.train, 7)
        assert [s.shift_level for s in rebucketed] == [s.shift_level for s in direct.train]

    def test_two_levels_rejected(self):
        dataset = build_dataset(_synthetic_log(), min_count=2, window=4, n_levels=5)
        with pytest.raises(ValueError, match="levels"):
            rebucket(dataset.train, 2)
