"""Joint optimization: full-vocabulary prediction loss, InfoNCE with hard
negatives and an annealed temperature, optimizer schedule, early stopping."""

import copy
import logging
from collections import deque
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .model import HipHop, make_batch

logger = logging.getLogger(__name__)


class NonFiniteLossError(RuntimeError):
    """Raised when a training step produces a non-finite loss; the message
    carries the offending batch's session keys for diagnosis."""


@dataclass
class TrainConfig:
    lr: float = 1e-3
    lr_decay: float = 0.1
    lr_decay_every: int = 3       # epochs between decays
    l2: float = 1e-5              # decoupled weight decay
    batch_size: int = 100
    epochs_max: int = 30
    patience: int = 3             # epochs without validation improvement
    lam: float = 0.3              # contrastive loss weight
    n_neg: int = 8
    tau_start: float = 0.5
    tau_end: float = 0.1
    seed: int = 42
    grad_clip: float = 5.0
    reservoir_batches: int | None = 4  # recent batches kept for negative padding; None keeps every batch (dataset-wide pool for small corpora)
    strict_infonce_denominator: bool = False  # keep the un-exponentiated positive term
    categorical_ce: bool = False  # plain cross entropy instead of the full-vocabulary sum

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.n_neg < 1:
            raise ValueError("n_neg must be >= 1")
        if not 0 < self.tau_end <= self.tau_start:
            raise ValueError("temperatures must satisfy 0 < tau_end <= tau_start")


@dataclass
class TrainState:
    epoch: int = 0
    best_metric: float = float("-inf")
    best_epoch: int = -1
    epochs_since_improve: int = 0
    tau: float = 0.0
    lr: float = 0.0


class NegativeReservoir:
    """Detached fused embeddings and item sets from recent batches, used to
    pad hard-negative candidate pools. `max_batches=None` keeps everything
    seen so far (a dataset-wide pool, viable for small corpora)."""

    def __init__(self, max_batches=4):
        self._batches = deque(maxlen=max_batches)

    def push(self, fused, item_sets):
        self._batches.append((fused.detach(), list(item_sets)))

    def candidates(self):
        out = []
        for fused, sets in self._batches:
            out.extend((fused[i], sets[i]) for i in range(len(sets)))
        return out

    def __len__(self):
        return sum(len(sets) for _, sets in self._batches)


@dataclass
class NegativeSamples:
    embeddings: torch.Tensor          # [B, n_neg, d]
    sources: list                     # per anchor: list of ("batch"|"reservoir"|"overlap", index)
    overlap_fallbacks: int = 0        # negatives that share items with their anchor (last resort)
    reservoir_draws: int = 0


def sample_hard_negatives(item_sets, fused, n_neg, rng, reservoir=None):
    """Pick, per anchor, the most similar sessions that share no items.

    Candidates are the other batch members with zero item overlap, ranked
    by descending cosine similarity of the fused embeddings (ties to the
    lower index). Shortfalls are padded with uniformly drawn zero-overlap
    sessions from the reservoir, then, as a flagged last resort, random
    batch members regardless of overlap.
    """
    bsz = len(item_sets)
    if bsz < 2:
        raise ValueError("hard negative sampling needs a batch of at least 2 sessions")
    with torch.no_grad():
        normed = F.normalize(fused, dim=-1)
        sims = (normed @ normed.t()).cpu().numpy()

    pool = reservoir.candidates() if reservoir is not None else []
    rows, sources = [], []
    overlap_fallbacks = reservoir_draws = 0
    for i in range(bsz):
        clean = [j for j in range(bsz) if j != i and not (item_sets[i] & item_sets[j])]
        clean.sort(key=lambda j: (-sims[i, j], j))
        chosen = [("batch", j) for j in clean[:n_neg]]
        if len(chosen) < n_neg and pool:
            eligible = [p for p in range(len(pool)) if not (item_sets[i] & pool[p][1])]
            take = min(n_neg - len(chosen), len(eligible))
            if take:
                picks = rng.choice(len(eligible), size=take, replace=False)
                chosen += [("reservoir", eligible[p]) for p in picks]
                reservoir_draws += take
        while len(chosen) < n_neg:
            j = int(rng.integers(bsz - 1))
            j = j if j < i else j + 1
            chosen.append(("overlap", j))
            overlap_fallbacks += 1
        vecs = [fused[idx] if src != "reservoir" else pool[idx][0] for src, idx in chosen]
        rows.append(torch.stack(vecs))
        sources.append(chosen)
    if overlap_fallbacks:
        logger.debug("hard negative sampling fell back to %d overlapping sessions", overlap_fallbacks)
    return NegativeSamples(
        embeddings=torch.stack(rows), sources=sources,
        overlap_fallbacks=overlap_fallbacks, reservoir_draws=reservoir_draws,
    )


def contrastive_loss(anchor, positive, negatives, tau, strict_denominator=False):
    """InfoNCE over cosine similarities at temperature tau.

    `strict_denominator` reproduces a variant whose denominator adds the
    raw positive similarity instead of its exponential; it is off by
    default and kept only for comparison runs.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    if negatives.ndim != 3 or negatives.shape[1] < 1:
        raise ValueError("need at least one negative per anchor")
    s_pos = F.cosine_similarity(anchor, positive, dim=-1)                    # [B]
    s_neg = F.cosine_similarity(anchor.unsqueeze(1), negatives, dim=-1)      # [B, N]
    if strict_denominator:
        denom = (s_pos + torch.exp(s_neg / tau).sum(dim=1)).clamp(min=1e-12)
        return (torch.log(denom) - s_pos / tau).mean()
    logits = torch.cat([s_pos.unsqueeze(1), s_neg], dim=1) / tau
    return (torch.logsumexp(logits, dim=1) - s_pos / tau).mean()


def anneal_temperature(epoch, config):
    """Linear interpolation from tau_start at epoch 0 to tau_end at
    epochs_max, clamped thereafter."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    frac = min(epoch / config.epochs_max, 1.0) if config.epochs_max > 0 else 1.0
    return config.tau_start + (config.tau_end - config.tau_start) * frac


def prediction_loss(probs, targets, categorical=False, eps=1e-12):
    """Full-vocabulary binary cross entropy over the item distribution,
    averaged over the batch; `categorical` switches to plain cross entropy
    on the target item. Computed in float64 so the eps clamp is meaningful."""
    p = probs.double().clamp(min=eps, max=1.0 - eps)
    idx = targets.unsqueeze(1)
    log_p_target = torch.log(p.gather(1, idx)).squeeze(1)
    if categorical:
        return -log_p_target.mean()
    log_1mp = torch.log1p(-p)
    off_target = log_1mp.sum(dim=1) - log_1mp.gather(1, idx).squeeze(1)
    return -(log_p_target + off_target).mean()


def current_lr(config, epoch):
    return config.lr * config.lr_decay ** (epoch // config.lr_decay_every)


def joint_step(model, batch, optimizer, config, tau, reservoir=None, rng=None):
    """One optimizer step on L_pred + lam * L_con; returns the logged losses."""
    model.train()
    out = model(batch)
    loss_pred = prediction_loss(out.probs, batch.targets, categorical=config.categorical_ce)
    stats = {"neg_overlap_fallbacks": 0, "neg_reservoir_draws": 0}
    if config.lam > 0 and len(batch) >= 2:
        negs = sample_hard_negatives(batch.item_sets, out.h_fused, config.n_neg,
                                     rng or np.random.default_rng(config.seed), reservoir)
        loss_con = contrastive_loss(out.h_sequence, out.h_similarity, negs.embeddings,
                                    tau, config.strict_infonce_denominator)
        stats["neg_overlap_fallbacks"] = negs.overlap_fallbacks
        stats["neg_reservoir_draws"] = negs.reservoir_draws
        loss = loss_pred + config.lam * loss_con
    else:
        loss_con = torch.zeros((), dtype=loss_pred.dtype)
        loss = loss_pred
    if not torch.isfinite(loss):
        raise NonFiniteLossError(
            f"non-finite loss (pred={loss_pred.item()}, con={loss_con.item()}) "
            f"on batch sessions {batch.session_keys[:20]}"
        )
    optimizer.zero_grad()
    loss.backward()
    torch.nn.utils.clip_grad_norm_(model.parameters(), max_norm=config.grad_clip)
    optimizer.step()
    if reservoir is not None and config.lam > 0:
        reservoir.push(out.h_fused, batch.item_sets)
    return {"loss": loss.item(), "loss_pred": loss_pred.item(), "loss_con": loss_con.item(), **stats}


def _batched(indices, size):
    for start in range(0, len(indices), size):
        yield indices[start:start + size]


def fit(train_examples, valid_examples, n_items, model_config, config,
        semantic=None, eval_k=20, on_epoch_end=None):
    """Train to the early-stopping criterion and return the best model.

    Learning rate decays by `lr_decay` every `lr_decay_every` epochs;
    training halts once validation HR@K has not improved for `patience`
    consecutive epochs. Returns (model, history) with the best-epoch
    parameters restored.
    """
    from .evaluation import evaluate_model  # local import to avoid a cycle

    if not train_examples or not valid_examples:
        raise ValueError("train and validation sets must be non-empty")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    model = HipHop(n_items, model_config, semantic=semantic)
    optimizer = torch.optim.AdamW(model.parameters(), lr=config.lr, weight_decay=config.l2)
    reservoir = NegativeReservoir(max_batches=config.reservoir_batches)
    state = TrainState()
    history = []
    best_params = None

    for epoch in range(config.epochs_max):
        state.epoch = epoch
        state.lr = current_lr(config, epoch)
        state.tau = anneal_temperature(epoch, config)
        for group in optimizer.param_groups:
            group["lr"] = state.lr

        order = torch.randperm(len(train_examples),
                               generator=torch.Generator().manual_seed(config.seed * 100003 + epoch))
        sums = {"loss": 0.0, "loss_pred": 0.0, "loss_con": 0.0,
                "neg_overlap_fallbacks": 0, "neg_reservoir_draws": 0}
        n_batches = 0
        for chunk in _batched(order.tolist(), config.batch_size):
            batch = make_batch(
                [train_examples[i] for i in chunk], pad_id=n_items,
                local_window=model_config.local_window,
                use_global=model_config.use_global_sim,
                use_local=model_config.use_local_sim,
            )
            step_stats = joint_step(model, batch, optimizer, config, state.tau, reservoir, rng)
            for key in sums:
                sums[key] += step_stats[key]
            n_batches += 1

        metrics = evaluate_model(model, valid_examples, batch_size=config.batch_size, k=eval_k)
        record = {
            "epoch": epoch,
            "lr": state.lr,
            "tau": state.tau,
            "loss": sums["loss"] / n_batches,
            "loss_pred": sums["loss_pred"] / n_batches,
            "loss_con": sums["loss_con"] / n_batches,
            "neg_overlap_fallbacks": sums["neg_overlap_fallbacks"],
            "neg_reservoir_draws": sums["neg_reservoir_draws"],
            "valid_hr": metrics.hr_at_k,
            "valid_mrr": metrics.mrr_at_k,
        }
        history.append(record)
        if on_epoch_end is not None:
            on_epoch_end(record)

        if metrics.hr_at_k > state.best_metric:
            state.best_metric = metrics.hr_at_k
            state.best_epoch = epoch
            state.epochs_since_improve = 0
            best_params = copy.deepcopy(model.state_dict())
        else:
            state.epochs_since_improve += 1
        if state.epochs_since_improve >= config.patience:
            logger.info("early stop at epoch %d (best HR@%d %.2f at epoch %d)",
                        epoch, eval_k, state.best_metric, state.best_epoch)
            break

    if best_params is not None:
        model.load_state_dict(best_params)
    model.eval()
    return model, history
