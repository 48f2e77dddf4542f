"""Ranking metrics, non-neural baselines, and ablation reporting."""

from collections import Counter
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import torch

from .model import make_batch

ABLATION_VARIANTS = (
    "w/o MultiIntent",
    "w/o InterSim",
    "w/o GlobalSim",
    "w/o LocalSim",
    "w/o Contrastive",
    "w/o Semantic",
)


@dataclass
class Metrics:
    hr_at_k: float    # percentage in [0, 100]
    mrr_at_k: float   # percentage in [0, 100]
    k: int
    n_examples: int


def rank_target(scores, target):
    """1-based rank of the target item; ties count against it (the target
    ranks below every item sharing its score)."""
    scores = np.asarray(scores)
    others_at_or_above = np.sum(scores >= scores[target]) - 1  # the target itself matches once
    return int(1 + others_at_or_above)


def compute_metrics(ranks, k=20):
    if len(ranks) == 0:
        raise ValueError("no ranks to aggregate")
    ranks = np.asarray(ranks)
    hits = ranks <= k
    hr = 100.0 * int(hits.sum()) / len(ranks)
    mrr = 100.0 * float(np.where(hits, 1.0 / ranks, 0.0).sum()) / len(ranks)
    return Metrics(hr_at_k=hr, mrr_at_k=mrr, k=k, n_examples=len(ranks))


def ranks_from_scores(score_matrix, targets):
    """Vectorized pessimistic ranks for a batch of score rows."""
    score_matrix = np.asarray(score_matrix)
    tgt = score_matrix[np.arange(len(targets)), targets]
    return (score_matrix >= tgt[:, None]).sum(axis=1)


def evaluate_model(model, examples, batch_size=100, k=20, return_ranks=False):
    """Score test prefixes in batches and aggregate HR@K / MRR@K.

    Similarity graphs are built per evaluation batch, mirroring training.
    `return_ranks=True` also yields the per-example 1-based ranks.
    """
    if not examples:
        raise ValueError("no examples to evaluate")
    model.eval()
    cfg = model.config
    all_ranks = []
    with torch.no_grad():
        for start in range(0, len(examples), batch_size):
            chunk = examples[start:start + batch_size]
            batch = make_batch(
                chunk, pad_id=model.n_items, local_window=cfg.local_window,
                use_global=cfg.use_global_sim, use_local=cfg.use_local_sim,
            )
            out = model(batch)
            all_ranks.extend(
                ranks_from_scores(out.scores.numpy(), batch.targets.numpy()).tolist()
            )
    metrics = compute_metrics(all_ranks, k=k)
    return (metrics, all_ranks) if return_ranks else metrics


# --- baselines ----------------------------------------------------------------

def _maximal_sequences(examples):
    """Recover one full session per key from its longest prefix example."""
    best = {}
    for s in examples:
        seq = list(s.items) + [s.target]
        prev = best.get(s.session_key)
        if prev is None or len(seq) > len(prev):
            best[s.session_key] = seq
    return list(best.values())


def _item_frequencies(examples, n_items):
    freq = np.zeros(n_items, dtype=np.float64)
    for seq in _maximal_sequences(examples):
        for it in seq:
            freq[it] += 1
    return freq


def baseline_pop(train, test, n_items, k=20):
    """Rank every candidate by its global training frequency."""
    freq = _item_frequencies(train, n_items)
    ranks = [rank_target(freq, s.target) for s in test]
    return compute_metrics(ranks, k=k)


def baseline_s_pop(train, test, n_items, k=20):
    """Rank by within-session frequency, breaking ties by global popularity."""
    freq = _item_frequencies(train, n_items)
    tiebreak = freq / (freq.max() + 1.0)  # strictly below 1, so session counts dominate
    ranks = []
    for s in test:
        scores = tiebreak.copy()
        for it, cnt in Counter(s.items).items():
            scores[it] += cnt
        ranks.append(rank_target(scores, s.target))
    return compute_metrics(ranks, k=k)


def baseline_item_knn(train, test, n_items, k=20, neighbor_cap=500):
    """Score candidates by cosine similarity to the last clicked item over
    the item-session incidence matrix, keeping at most `neighbor_cap`
    neighbors per item."""
    sequences = _maximal_sequences(train)
    rows, cols = [], []
    for sid, seq in enumerate(sequences):
        for it in set(seq):
            rows.append(it)
            cols.append(sid)
    incidence = sp.csr_matrix(
        (np.ones(len(rows)), (rows, cols)), shape=(n_items, len(sequences)), dtype=np.float64
    )
    norms = np.sqrt(np.asarray(incidence.multiply(incidence).sum(axis=1)).ravel())
    inv = np.divide(1.0, norms, out=np.zeros_like(norms), where=norms > 0)
    normalized = sp.diags(inv).dot(incidence).tocsr()

    sim_cache = {}

    def neighbors(item):
        if item not in sim_cache:
            sims = np.asarray(normalized[item].dot(normalized.T).todense()).ravel()
            sims[item] = 0.0
            if neighbor_cap < n_items:
                keep = np.argsort(-sims, kind="stable")[:neighbor_cap]
                capped = np.zeros_like(sims)
                capped[keep] = sims[keep]
                sims = capped
            sim_cache[item] = sims
        return sim_cache[item]

    ranks = [rank_target(neighbors(s.items[-1]), s.target) for s in test]
    return compute_metrics(ranks, k=k)


BASELINES = {"pop": baseline_pop, "s-pop": baseline_s_pop, "item-knn": baseline_item_knn}


# --- ablations ----------------------------------------------------------------

def apply_variant(model_config, train_config, variant):
    """Return configs with exactly the named component switched off."""
    name = variant.replace("-", " ").strip()
    if not name.startswith("w/o"):
        name = "w/o " + name
    canonical = {v.lower(): v for v in ABLATION_VARIANTS}.get(name.lower())
    if canonical is None:
        raise ValueError(f"unknown ablation variant {variant!r}; expected one of {ABLATION_VARIANTS}")
    mc = type(model_config)(**model_config.__dict__)
    tc = type(train_config)(**train_config.__dict__)
    if canonical == "w/o MultiIntent":
        mc.use_multi_intent = False
    elif canonical == "w/o InterSim":
        mc.use_global_sim = False
        mc.use_local_sim = False
    elif canonical == "w/o GlobalSim":
        mc.use_global_sim = False
    elif canonical == "w/o LocalSim":
        mc.use_local_sim = False
    elif canonical == "w/o Contrastive":
        tc.lam = 0.0
    elif canonical == "w/o Semantic":
        mc.use_semantic = False
    return mc, tc, canonical


def run_ablation(train, valid, test, n_items, model_config, train_config,
                 variants=(), semantic=None, k=20):
    """Train the full model plus each requested variant; returns
    [(name, Metrics), ...] rows in run order."""
    from .training import fit

    rows = []
    jobs = [("full", model_config, train_config)]
    for variant in variants:
        mc, tc, canonical = apply_variant(model_config, train_config, variant)
        jobs.append((canonical, mc, tc))
    for name, mc, tc in jobs:
        sem = semantic if mc.use_semantic else None
        model, _ = fit(train, valid, n_items, mc, tc, semantic=sem, eval_k=k)
        rows.append((name, evaluate_model(model, test, batch_size=tc.batch_size, k=k)))
    return rows


def metrics_table(rows, fmt="markdown"):
    """Render [(name, Metrics), ...] as a markdown or CSV table."""
    if fmt == "csv":
        lines = ["variant,hr_at_k,mrr_at_k,k,n_examples"]
        for name, m in rows:
            lines.append(f"{name},{m.hr_at_k:.4f},{m.mrr_at_k:.4f},{m.k},{m.n_examples}")
        return "\n".join(lines) + "\n"
    width = max((len(name) for name, _ in rows), default=7)
    k = rows[0][1].k if rows else 20
    lines = [
        f"| {'variant'.ljust(width)} | HR@{k} | MRR@{k} |",
        f"|{'-' * (width + 2)}|-------:|--------:|",
    ]
    for name, m in rows:
        lines.append(f"| {name.ljust(width)} | {m.hr_at_k:6.2f} | {m.mrr_at_k:7.2f} |")
    return "\n".join(lines) + "\n"
