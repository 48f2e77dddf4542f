import json

import pytest

from hiphop.data import (
    Session,
    augment_prefixes,
    build_dataset,
    compute_stats,
    filter_sessions,
    load_dataset,
    load_metadata,
    load_sessions,
    preprocess,
    save_dataset,
    split_amazon_sessions,
    split_temporal,
)


def write_jsonl(path, records):
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec) + "\n")


def test_load_jsonl_identity_parse(tmp_path):
    raw = tmp_path / "raw.jsonl"
    write_jsonl(raw, [{"session": "s1", "items": ["A", "B", "A"]}])
    sessions = load_sessions(raw, "jsonl")
    assert len(sessions) == 1
    assert sessions[0].items == ["A", "B", "A"]
    assert sessions[0].session_key == "s1"


def test_load_jsonl_empty_file(tmp_path):
    raw = tmp_path / "raw.jsonl"
    raw.write_text("")
    assert load_sessions(raw, "jsonl") == []


def test_load_jsonl_orders_by_timestamp(tmp_path):
    raw = tmp_path / "raw.jsonl"
    write_jsonl(raw, [{"session": "s", "items": ["b", "a"], "ts": [20, 10]}])
    (session,) = load_sessions(raw, "jsonl")
    assert session.items == ["a", "b"]
    assert session.times == [10, 20]


def test_load_jsonl_bad_line_names_line_number(tmp_path):
    raw = tmp_path / "raw.jsonl"
    raw.write_text('{"session": "s1", "items": ["a"]}\nnot json\n')
    with pytest.raises(ValueError, match=":2:"):
        load_sessions(raw, "jsonl")


def test_load_unknown_format(tmp_path):
    raw = tmp_path / "raw.jsonl"
    raw.write_text("")
    with pytest.raises(ValueError, match="unknown format"):
        load_sessions(raw, "tsv")


def test_load_missing_file():
    with pytest.raises(FileNotFoundError):
        load_sessions("/nonexistent/clicks.csv", "jsonl")


def test_load_diginetica_layout(tmp_path):
    raw = tmp_path / "train-item-views.csv"
    raw.write_text(
        "sessionId;userId;itemId;timeframe;eventdate\n"
        "1;NA;10;200;2016-05-01\n"
        "1;NA;11;100;2016-05-01\n"
        "2;NA;12;50;2016-05-02\n"
    )
    sessions = load_sessions(raw, "diginetica")
    assert [s.items for s in sessions] == [[11, 10], [12]]  # ordered by timeframe


def test_load_amazon_groups_per_user(tmp_path):
    raw = tmp_path / "reviews.json"
    write_jsonl(raw, [
        {"reviewerID": "u1", "asin": "B", "unixReviewTime": 200},
        {"reviewerID": "u1", "asin": "A", "unixReviewTime": 100},
        {"reviewerID": "u2", "asin": "C", "unixReviewTime": 150},
    ])
    sessions = load_sessions(raw, "amazon")
    assert [(s.session_key, s.items) for s in sessions] == [("u1", ["A", "B"]), ("u2", ["C"])]


def test_split_amazon_sessions_at_gaps():
    s = Session(items=["a", "b", "c"], session_key="u", times=[0, 10, 1000])
    parts = split_amazon_sessions([s], max_gap=100)
    assert [p.items for p in parts] == [["a", "b"], ["c"]]
    assert [p.session_key for p in parts] == ["u#0", "u#1"]


def test_preprocess_drops_single_interaction_sessions():
    sessions = [Session(items=["A", "B"], session_key="1"), Session(items=["C"], session_key="2")]
    kept, catalog = preprocess(sessions, min_len=2, min_item_freq=1)
    assert [s.items for s in kept] == [[0, 1]]
    assert catalog.n == 2
    assert set(catalog.id_map) == {"A", "B"}


def test_preprocess_frequency_threshold_boundary():
    # X appears exactly 4 times globally; with min_item_freq=5 it must vanish
    sessions = [Session(items=["X", "Y", "Z"], session_key=str(i)) for i in range(4)]
    sessions += [Session(items=["Y", "Z"], session_key=f"z{i}") for i in range(2)]
    kept, catalog = preprocess(sessions, min_len=2, min_item_freq=5)
    assert "X" not in catalog.id_map
    assert all("X" not in s.items for s in kept)
    assert len(kept) == 6


def test_filter_cascades_to_fixed_point():
    # dropping e empties two sessions, which starves c, which starves b's pair
    sessions = (
        [Session(items=["a", "b"], session_key=f"ab{i}") for i in range(3)]
        + [Session(items=["b", "c"], session_key="bc")]
        + [Session(items=["c", "e"], session_key=f"ce{i}") for i in range(2)]
    )
    kept = filter_sessions(sessions, min_len=2, min_item_freq=3)
    assert [s.items for s in kept] == [["a", "b"]] * 3


def test_filter_rerun_is_identity():
    import util

    sessions = util.random_sessions(60, n_items=15, max_len=6, seed=5)
    once = filter_sessions(sessions, min_len=2, min_item_freq=3)
    twice = filter_sessions(once, min_len=2, min_item_freq=3)
    assert [s.items for s in twice] == [s.items for s in once]


def test_preprocess_all_filtered_is_error():
    sessions = [Session(items=["a", "x"], session_key="1"), Session(items=["a", "y"], session_key="2")]
    with pytest.raises(ValueError, match="dataset empty after filtering"):
        preprocess(sessions, min_len=2, min_item_freq=2)


def test_augment_prefixes_scheme():
    out = augment_prefixes([Session(items=["a", "b", "c"], session_key="s")])
    assert [(s.items, s.target) for s in out] == [(["a"], "b"), (["a", "b"], "c")]


def test_augment_prefixes_minimal_session():
    out = augment_prefixes([Session(items=["a", "b"], session_key="s")])
    assert [(s.items, s.target) for s in out] == [(["a"], "b")]


def test_augment_prefixes_count_property():
    import util

    sessions = util.random_sessions(40, n_items=20, min_len=2, max_len=9, seed=3)
    out = augment_prefixes(sessions)
    assert len(out) == sum(len(s) - 1 for s in sessions)


def test_augment_rejects_short_sessions():
    with pytest.raises(ValueError):
        augment_prefixes([Session(items=["a"], session_key="s")])


def test_catalog_id_map_round_trips():
    sessions = [Session(items=["p", "q", "p", "r"], session_key="s1"),
                Session(items=["q", "r"], session_key="s2")]
    kept, catalog = preprocess(sessions, min_len=2, min_item_freq=1)
    rev = catalog.reverse_map()
    assert sorted(catalog.id_map) == sorted(rev[v] for v in catalog.id_map.values())
    assert list(range(catalog.n)) == sorted(catalog.id_map.values())
    assert catalog.pad_id == catalog.n


def test_compute_stats_single_session():
    examples = augment_prefixes([Session(items=["a", "b"], session_key="s")])
    kept, catalog = preprocess([Session(items=["a", "b"], session_key="s")], min_item_freq=1)
    stats = compute_stats(examples, [], catalog, clicks=2, n_sessions=1)
    assert stats.train_count == 1
    assert stats.avg_len == 2.0
    assert stats.clicks == 2


def test_split_temporal_by_fraction():
    sessions = [Session(items=["a", "b"], session_key=str(t), times=[t, t + 1]) for t in range(0, 100, 10)]
    train, test = split_temporal(sessions, test_fraction=0.2)
    assert len(train) + len(test) == len(sessions)
    assert max(max(s.times) for s in train) < min(max(s.times) for s in test)


def test_load_metadata_attaches_and_skips(tmp_path, caplog):
    sessions = [Session(items=["a", "b"], session_key="1")] * 3
    _, catalog = preprocess(sessions, min_item_freq=1)
    meta = tmp_path / "meta.jsonl"
    meta.write_text(
        json.dumps({"item": "a", "title": "Gut Strings", "category": "Musical Instruments"}) + "\n"
        + "broken line\n"
        + json.dumps({"item": "zz", "title": "filtered out"}) + "\n"
    )
    with caplog.at_level("WARNING"):
        load_metadata(meta, catalog)
    assert catalog.metadata[catalog.id_map["a"]]["title"] == "Gut Strings"
    assert len(catalog.metadata) == 1
    assert any("malformed" in rec.message for rec in caplog.records)


def test_build_dataset_catalog_from_train_side_only():
    sessions = [
        Session(items=["a", "b", "a"], session_key="s1", times=[1, 2, 3]),
        Session(items=["a", "b"], session_key="s2", times=[4, 5]),
        Session(items=["b", "zz", "a"], session_key="s3", times=[100, 101, 102]),
    ]
    train, test, catalog, stats = build_dataset(sessions, min_len=2, min_item_freq=1, test_fraction=0.2)
    assert "zz" not in catalog.id_map  # only seen in the test window
    assert stats.train_count == len(train) and stats.test_count == len(test)
    assert stats.clicks == 8  # the filtered corpus, before splitting
    assert stats.avg_len == pytest.approx(8 / 3)
    assert len(test) == 1  # s3 projected to [b, a] yields one labeled example


def test_window_split_drops_boundary_sessions():
    day = 86400
    sessions = [Session(items=["a", "b"], session_key=str(t), times=[t * day]) for t in range(10)]
    train, test = split_temporal(sessions, test_window=2 * day)
    assert [s.session_key for s in train] == [str(t) for t in range(7)]
    assert [s.session_key for s in test] == ["8", "9"]  # day 7 sits on the boundary


def test_dataset_artifact_round_trip_and_determinism(tmp_path):
    import util

    sessions = util.random_sessions(50, n_items=12, min_len=2, max_len=6, seed=11)
    for s in sessions:
        s.times = list(range(len(s.items)))
    train, test, catalog, stats = build_dataset(sessions, min_item_freq=2, test_fraction=0.1)
    d1, d2 = tmp_path / "one", tmp_path / "two"
    save_dataset(d1, train, test, catalog, stats)
    save_dataset(d2, train, test, catalog, stats)
    for name in ("train.jsonl", "test.jsonl", "catalog.json", "stats.json"):
        assert (d1 / name).read_bytes() == (d2 / name).read_bytes()
    train2, test2, catalog2, stats2 = load_dataset(d1)
    assert [(s.items, s.target) for s in train2] == [(s.items, s.target) for s in train]
    assert catalog2.n == catalog.n
    assert stats2 == stats
