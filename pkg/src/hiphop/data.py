"""Dataset ingestion, filtering, prefix augmentation, and artifact IO."""

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import pandas as pd

logger = logging.getLogger(__name__)

KNOWN_FORMATS = ("jsonl", "diginetica", "yoochoose", "amazon")


@dataclass
class Session:
    """An ordered item sequence, optionally labeled with the next item.

    Before preprocessing `items` holds source IDs (strings or ints); after
    preprocessing they are contiguous catalog IDs. `times` carries per-event
    timestamps when the source format has them (used for temporal splits).
    """

    items: list
    target: object = None
    session_key: str = ""
    times: list | None = None

    def __len__(self):
        return len(self.items)


@dataclass
class ItemCatalog:
    """Contiguous item-ID space with frequencies and optional metadata.

    IDs are exactly 0..n-1; the reserved padding ID is `n` and never appears
    in `id_map`.
    """

    id_map: dict
    freq: list
    metadata: dict = field(default_factory=dict)

    @property
    def n(self):
        return len(self.id_map)

    @property
    def pad_id(self):
        return self.n

    def reverse_map(self):
        return {v: k for k, v in self.id_map.items()}

    def has_metadata(self, item_id):
        return item_id in self.metadata


@dataclass
class DatasetStats:
    items: int
    clicks: int
    train_count: int
    test_count: int
    avg_len: float


def load_sessions(path, fmt):
    """Read raw interactions into sessions, preserving source order.

    No filtering happens here. Supported formats: generic "jsonl" sessions,
    "diginetica" / "yoochoose" click CSVs, and "amazon" review JSON lines
    (one session per user, reviews in timestamp order).
    """
    path = Path(path)
    if fmt not in KNOWN_FORMATS:
        raise ValueError(f"unknown format {fmt!r}; expected one of {KNOWN_FORMATS}")
    if not path.exists():
        raise FileNotFoundError(f"input path does not exist: {path}")
    if fmt == "jsonl":
        return _load_jsonl(path)
    if fmt == "diginetica":
        return _load_diginetica(path)
    if fmt == "yoochoose":
        return _load_yoochoose(path)
    return _load_amazon(path)


def _load_jsonl(path):
    sessions = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                items = list(rec["items"])
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: unparseable session record: {exc}") from exc
            times = rec.get("ts")
            if times is not None:
                if len(times) != len(items):
                    raise ValueError(f"{path}:{lineno}: ts length does not match items")
                order = sorted(range(len(items)), key=lambda i: times[i])
                items = [items[i] for i in order]
                times = [times[i] for i in order]
            sessions.append(Session(items=items, session_key=str(rec.get("session", lineno)), times=times))
    return sessions


def _load_diginetica(path):
    # train-item-views.csv: sessionId;userId;itemId;timeframe;eventdate
    df = pd.read_csv(path, sep=";", usecols=["sessionId", "itemId", "timeframe", "eventdate"])
    if df.empty:
        return []
    df["date"] = pd.to_datetime(df["eventdate"]).astype("int64") // 10**9
    df = df.sort_values(["sessionId", "timeframe"], kind="stable")
    sessions = []
    for sid, g in df.groupby("sessionId", sort=True):
        sessions.append(
            Session(items=g["itemId"].tolist(), session_key=str(sid), times=g["date"].tolist())
        )
    return sessions


def _load_yoochoose(path):
    # yoochoose-clicks.dat: session_id,timestamp,item_id,category (no header)
    df = pd.read_csv(
        path, header=None, usecols=[0, 1, 2], names=["session", "ts", "item"], dtype={"item": "int64"}
    )
    if df.empty:
        return []
    df["ts"] = pd.to_datetime(df["ts"]).astype("int64") // 10**9
    df = df.sort_values(["session", "ts"], kind="stable")
    sessions = []
    for sid, g in df.groupby("session", sort=True):
        sessions.append(Session(items=g["item"].tolist(), session_key=str(sid), times=g["ts"].tolist()))
    return sessions


def _load_amazon(path, max_gap=None):
    """One session per user from review lines, chronologically ordered.

    `max_gap` (seconds) optionally splits a user's stream into multiple
    sessions wherever consecutive reviews are further apart; default keeps
    the whole stream as one session.
    """
    per_user = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                user, item, ts = rec["reviewerID"], rec["asin"], int(rec["unixReviewTime"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: unparseable review record: {exc}") from exc
            per_user.setdefault(user, []).append((ts, lineno, item))
    sessions = []
    for user in sorted(per_user):
        events = sorted(per_user[user])  # (ts, lineno) keeps equal-ts order stable
        chunks = [[]]
        for i, ev in enumerate(events):
            if max_gap is not None and chunks[-1] and ev[0] - events[i - 1][0] > max_gap:
                chunks.append([])
            chunks[-1].append(ev)
        for ci, chunk in enumerate(chunks):
            key = user if len(chunks) == 1 else f"{user}#{ci}"
            sessions.append(
                Session(items=[e[2] for e in chunk], session_key=key, times=[e[0] for e in chunk])
            )
    return sessions


def split_amazon_sessions(sessions, max_gap):
    """Re-split already-loaded per-user sessions at time gaps > max_gap seconds."""
    out = []
    for s in sessions:
        if s.times is None or len(s) < 2:
            out.append(s)
            continue
        chunks = [[0]]
        for i in range(1, len(s)):
            if s.times[i] - s.times[i - 1] > max_gap:
                chunks.append([])
            chunks[-1].append(i)
        if len(chunks) == 1:
            out.append(s)
        else:
            for ci, idxs in enumerate(chunks):
                out.append(
                    Session(
                        items=[s.items[i] for i in idxs],
                        session_key=f"{s.session_key}#{ci}",
                        times=[s.times[i] for i in idxs],
                    )
                )
    return out


def filter_sessions(sessions, min_len=2, min_item_freq=5):
    """Drop short sessions and rare items, iterating until a fixed point.

    Each round removes sessions shorter than `min_len` first, then recounts
    item frequencies and strips items below `min_item_freq`. Removing rare
    items can shorten sessions below the threshold again, so both filters
    rerun until nothing changes.
    """
    current = list(sessions)
    while True:
        kept = [s for s in current if len(s) >= min_len]
        freq = {}
        for s in kept:
            for it in s.items:
                freq[it] = freq.get(it, 0) + 1
        changed = len(kept) != len(current)
        out = []
        for s in kept:
            idxs = [i for i, it in enumerate(s.items) if freq[it] >= min_item_freq]
            if len(idxs) != len(s.items):
                changed = True
                s = Session(
                    items=[s.items[i] for i in idxs],
                    target=s.target,
                    session_key=s.session_key,
                    times=[s.times[i] for i in idxs] if s.times is not None else None,
                )
            out.append(s)
        current = out
        if not changed:
            break
    return [s for s in current if len(s) >= min_len]


def build_catalog(sessions):
    """Map items to contiguous IDs in order of first appearance."""
    id_map = {}
    counts = []
    for s in sessions:
        for it in s.items:
            if it not in id_map:
                id_map[it] = len(id_map)
                counts.append(0)
            counts[id_map[it]] += 1
    return ItemCatalog(id_map=id_map, freq=counts)


def remap_sessions(sessions, catalog):
    out = []
    for s in sessions:
        out.append(replace(s, items=[catalog.id_map[it] for it in s.items]))
    return out


def apply_catalog(sessions, catalog, min_len=2):
    """Project sessions onto an existing catalog, dropping unknown items and
    sessions that fall below min_len (used for the test side of a split)."""
    out = []
    for s in sessions:
        idxs = [i for i, it in enumerate(s.items) if it in catalog.id_map]
        if len(idxs) < min_len:
            continue
        out.append(
            Session(
                items=[catalog.id_map[s.items[i]] for i in idxs],
                target=s.target,
                session_key=s.session_key,
                times=[s.times[i] for i in idxs] if s.times is not None else None,
            )
        )
    return out


def preprocess(sessions, min_len=2, min_item_freq=5):
    """Filter to a fixed point and remap the survivors to contiguous IDs."""
    if not sessions:
        raise ValueError("no sessions to preprocess")
    filtered = filter_sessions(sessions, min_len=min_len, min_item_freq=min_item_freq)
    if not filtered:
        raise ValueError("dataset empty after filtering")
    catalog = build_catalog(filtered)
    return remap_sessions(filtered, catalog), catalog


def augment_prefixes(sessions):
    """Expand each session of length n into n-1 (prefix, next-item) examples."""
    examples = []
    for s in sessions:
        if len(s) < 2:
            raise ValueError(f"session {s.session_key!r} has length {len(s)}; filter before augmenting")
        for cut in range(1, len(s)):
            examples.append(Session(items=list(s.items[:cut]), target=s.items[cut], session_key=s.session_key))
    return examples


def session_end_time(session):
    return max(session.times) if session.times else 0


def split_temporal(sessions, test_fraction=0.1, test_window=None):
    """Split sessions by end time: the trailing window goes to test.

    `test_window` (seconds) pins an absolute window before the last event
    (e.g. 7 days) and follows the community convention of dropping sessions
    that end exactly on the boundary; the `test_fraction` mode instead keeps
    boundary sessions on the test side. Sessions without timestamps are
    split positionally.
    """
    if not sessions:
        return [], []
    if all(s.times is None for s in sessions):
        cut = max(1, int(round(len(sessions) * (1 - test_fraction))))
        return sessions[:cut], sessions[cut:]
    ends = [session_end_time(s) for s in sessions]
    t_max = max(ends)
    if test_window is not None:
        threshold = t_max - test_window
        train = [s for s, e in zip(sessions, ends) if e < threshold]
        test = [s for s, e in zip(sessions, ends) if e > threshold]
    else:
        t_min = min(ends)
        threshold = t_max - (t_max - t_min) * test_fraction
        train = [s for s, e in zip(sessions, ends) if e < threshold]
        test = [s for s, e in zip(sessions, ends) if e >= threshold]
    return train, test


def take_recent_fraction(sessions, fraction):
    """Keep the most recent `fraction` of sessions by end time (e.g. 1/64)."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    ranked = sorted(sessions, key=session_end_time)
    keep = max(1, int(round(len(ranked) * fraction)))
    return ranked[-keep:]


def compute_stats(train, test, catalog, clicks, n_sessions):
    """Summarize labeled datasets.

    `clicks` and `n_sessions` describe the filtered corpus before splitting
    and augmentation; avg_len = clicks / n_sessions is the mean original
    session length, which is how the published per-dataset tables are
    internally consistent.
    """
    return DatasetStats(
        items=catalog.n,
        clicks=clicks,
        train_count=len(train),
        test_count=len(test),
        avg_len=clicks / n_sessions if n_sessions else 0.0,
    )


def load_metadata(path, catalog):
    """Attach metadata records ({"item", "title", "description", "category"})
    to catalog items. Malformed records are warned about and skipped; records
    for unknown (filtered-out) items are ignored."""
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                src = rec["item"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                logger.warning("%s:%d: skipping malformed metadata record (%s)", path, lineno, exc)
                continue
            if src not in catalog.id_map:
                continue
            fields = {k: rec[k] for k in ("title", "description", "category") if rec.get(k)}
            if fields:
                catalog.metadata[catalog.id_map[src]] = fields
    return catalog


def build_dataset(
    sessions,
    min_len=2,
    min_item_freq=5,
    test_fraction=0.1,
    test_window=None,
    recent_fraction=None,
):
    """Full preprocessing chain: filter, temporal split, catalog from the
    training side, project the test side, and prefix-augment both.

    The catalog is built from training sessions only; test items unseen in
    training are dropped and test sessions re-checked against min_len, which
    is the standard protocol behind the published per-dataset counts.

    Returns (train_examples, test_examples, catalog, stats).
    """
    filtered = filter_sessions(sessions, min_len=min_len, min_item_freq=min_item_freq)
    if not filtered:
        raise ValueError("dataset empty after filtering")
    clicks = sum(len(s) for s in filtered)  # corpus statistics are pre-split
    n_sessions = len(filtered)
    train_raw, test_raw = split_temporal(filtered, test_fraction=test_fraction, test_window=test_window)
    if recent_fraction is not None:
        train_raw = take_recent_fraction(train_raw, recent_fraction)
    if not train_raw:
        raise ValueError("training split empty; adjust the split parameters")
    catalog = build_catalog(train_raw)
    train_sessions = remap_sessions(train_raw, catalog)
    test_sessions = apply_catalog(test_raw, catalog, min_len=min_len)
    train = augment_prefixes(train_sessions)
    test = augment_prefixes(test_sessions)
    stats = compute_stats(train, test, catalog, clicks=clicks, n_sessions=n_sessions)
    return train, test, catalog, stats


# --- dataset directory artifact ---------------------------------------------

def _dump(obj):
    return json.dumps(obj, sort_keys=True, ensure_ascii=False)


def save_dataset(out_dir, train, test, catalog, stats):
    """Write train.jsonl / test.jsonl / catalog.json / stats.json.

    Output bytes are a pure function of the inputs (sorted keys, no
    timestamps) so identical runs produce identical artifacts.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, examples in (("train.jsonl", train), ("test.jsonl", test)):
        with open(out_dir / name, "w", encoding="utf-8") as f:
            for s in examples:
                f.write(_dump({"items": s.items, "target": s.target, "session_key": s.session_key}) + "\n")
    cat = {
        "n": catalog.n,
        "id_map": {str(k): v for k, v in catalog.id_map.items()},
        "freq": catalog.freq,
        "metadata": {str(k): v for k, v in catalog.metadata.items()},
    }
    (out_dir / "catalog.json").write_text(_dump(cat) + "\n", encoding="utf-8")
    (out_dir / "stats.json").write_text(_dump(stats.__dict__) + "\n", encoding="utf-8")


def load_dataset(dataset_dir):
    """Load a dataset artifact directory back into memory."""
    dataset_dir = Path(dataset_dir)
    out = []
    for name in ("train.jsonl", "test.jsonl"):
        examples = []
        with open(dataset_dir / name, encoding="utf-8") as f:
            for line in f:
                rec = json.loads(line)
                examples.append(Session(items=rec["items"], target=rec["target"], session_key=rec["session_key"]))
        out.append(examples)
    cat = json.loads((dataset_dir / "catalog.json").read_text(encoding="utf-8"))
    catalog = ItemCatalog(
        id_map={k: v for k, v in cat["id_map"].items()},
        freq=cat["freq"],
        metadata={int(k): v for k, v in cat["metadata"].items()},
    )
    stats = DatasetStats(**json.loads((dataset_dir / "stats.json").read_text(encoding="utf-8")))
    return out[0], out[1], catalog, stats
