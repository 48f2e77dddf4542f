"""Shared test helpers: synthetic corpora and brute-force oracles."""

import numpy as np

from hiphop.data import Session, augment_prefixes


def random_sessions(count, n_items, max_len=10, min_len=1, seed=0, key_prefix="r"):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        length = int(rng.integers(min_len, max_len + 1))
        items = [int(x) for x in rng.integers(0, n_items, size=length)]
        out.append(Session(items=items, session_key=f"{key_prefix}{i}"))
    return out


def successor_benchmark(n_items=100, n_train=2000, n_test=200, seed=0,
                        min_len=3, max_len=8):
    """Deterministic next-item corpus: sessions walk a fixed permutation, so
    the label is always a function of the last item."""
    perm = np.random.default_rng(seed).permutation(n_items)
    def build(count, sub_seed, prefix):
        rng = np.random.default_rng(sub_seed)
        sessions = []
        for i in range(count):
            items = [int(rng.integers(n_items))]
            for _ in range(int(rng.integers(min_len, max_len + 1)) - 1):
                items.append(int(perm[items[-1]]))
            sessions.append(Session(items=items, session_key=f"{prefix}{i}"))
        return sessions
    train = augment_prefixes(build(n_train, seed + 1, "train"))
    test = augment_prefixes(build(n_test, seed + 2, "test"))
    return train, test, n_items


def dense_jaccard_matrix(sessions, scope="global", k=None):
    """Brute-force double loop over all session pairs."""
    if scope == "local":
        sets = [set(s.items[-min(k, len(s.items)):]) for s in sessions]
    else:
        sets = [set(s.items) for s in sessions]
    m = len(sessions)
    mat = np.zeros((m, m), dtype=np.float64)
    for i in range(m):
        for j in range(m):
            if i == j:
                continue
            a, b = sets[i], sets[j]
            if not a and not b:
                continue
            mat[i, j] = len(a & b) / len(a | b)
    return mat


def brute_force_rank(scores, target):
    """Full-sort oracle with pessimistic ties: sort by (-score, target last)."""
    order = sorted(range(len(scores)), key=lambda j: (-scores[j], j == target))
    return order.index(target) + 1
