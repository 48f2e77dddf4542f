"""Forward pass: intra-session GNN, multi-intent capture, intent-guided
inter-session similarity learning, top-K fusion, and cosine scoring."""

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import graphs
from .semantic import SemanticTable, SpaceProjector, init_item_table

SCHEMA_VERSION = 1


@dataclass
class ModelConfig:
    d: int = 100                  # hidden width
    gnn_steps: int = 1            # propagation steps over the session graph
    num_intents: int = 4          # learnable intent queries
    local_window: int = 3         # last-k items for the local similarity graph
    top_k_sessions: int = 12      # neighbors kept in the fused aggregation
    dropout: float = 0.2
    cosine_scale: float = 12.0    # score multiplier before the item softmax; 1.0 = unscaled
    gnn_activation: str = "relu"
    untie_denoise: bool = False   # separate gate parameters for global / local paths
    w0_after_softmax: bool = False
    use_multi_intent: bool = True
    use_global_sim: bool = True
    use_local_sim: bool = True
    use_semantic: bool = False
    semantic_finetune: bool = True  # False freezes the projected semantic rows at init
    projector_hidden: int | None = None


@dataclass
class SessionBatch:
    """Padded tensors for a batch of labeled prefixes.

    `items` holds each session's unique nodes (padded with the catalog pad
    ID), `alias` maps sequence positions to node indices, and the
    similarity matrices are row-normalized adjacency over this batch only.
    Targets never enter graph construction.
    """

    items: torch.Tensor
    adj_in: torch.Tensor
    alias: torch.Tensor
    mask: torch.Tensor
    last_pos: torch.Tensor
    targets: torch.Tensor | None
    item_sets: list
    sim_global: torch.Tensor | None = None
    sim_local: torch.Tensor | None = None
    session_keys: list = field(default_factory=list)

    def __len__(self):
        return self.items.shape[0]

    def to(self, device):
        for name in ("items", "adj_in", "alias", "mask", "last_pos", "targets", "sim_global", "sim_local"):
            t = getattr(self, name)
            if t is not None:
                setattr(self, name, t.to(device))
        return self


def make_batch(examples, pad_id, local_window, use_global=True, use_local=True,
               dtype=torch.float32, device=None):
    """Assemble model inputs from labeled prefix examples."""
    bsz = len(examples)
    if bsz == 0:
        raise ValueError("empty batch")
    session_graphs = [graphs.build_session_graph(s) for s in examples]
    max_nodes = max(len(g.nodes) for g in session_graphs)
    max_len = max(len(s) for s in examples)

    items = torch.full((bsz, max_nodes), pad_id, dtype=torch.long)
    adj_in = torch.zeros(bsz, max_nodes, max_nodes, dtype=dtype)
    alias = torch.zeros(bsz, max_len, dtype=torch.long)
    mask = torch.zeros(bsz, max_len, dtype=torch.bool)
    last_pos = torch.zeros(bsz, dtype=torch.long)
    for i, (s, g) in enumerate(zip(examples, session_graphs)):
        k = len(g.nodes)
        items[i, :k] = torch.as_tensor(g.nodes, dtype=torch.long)
        adj_in[i, :k, :k] = torch.as_tensor(g.adj_in, dtype=dtype)
        alias[i, : len(s)] = torch.as_tensor(g.alias, dtype=torch.long)
        mask[i, : len(s)] = True
        last_pos[i] = len(s) - 1

    targets = None
    if all(s.target is not None for s in examples):
        targets = torch.tensor([s.target for s in examples], dtype=torch.long)

    sim_global = sim_local = None
    if use_global:
        g = graphs.build_similarity_graph(examples, scope="global")
        sim_global = torch.as_tensor(g.normalized.toarray(), dtype=dtype)
    if use_local:
        g = graphs.build_similarity_graph(examples, scope="local", k=local_window)
        sim_local = torch.as_tensor(g.normalized.toarray(), dtype=dtype)

    batch = SessionBatch(
        items=items, adj_in=adj_in, alias=alias, mask=mask, last_pos=last_pos,
        targets=targets, item_sets=[frozenset(s.items) for s in examples],
        sim_global=sim_global, sim_local=sim_local,
        session_keys=[s.session_key for s in examples],
    )
    return batch.to(device) if device is not None else batch


# --- forward-pass operations -------------------------------------------------

_ACTIVATIONS = {"relu": torch.relu, "identity": lambda x: x}


def gnn_propagate(adj_in, h, weight, steps, activation="relu"):
    """Repeatedly replace each node by the activated, weighted sum of its
    incoming neighbors. Nodes without incoming edges pass through unchanged
    so single-item sessions keep their information."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    act = _ACTIVATIONS[activation]
    isolated = adj_in.abs().sum(dim=-1, keepdim=True) == 0
    for _ in range(steps):
        msg = adj_in @ h
        h = torch.where(isolated, h, act(msg @ weight.t()))
    return h


def masked_softmax(logits, mask, dim=-1):
    return torch.softmax(logits.masked_fill(~mask, float("-inf")), dim=dim)


def soft_attention_readout(h_items, h_last, mask, w_last, w_item, bias, q):
    """Last-item-conditioned soft attention over positions, softmax
    normalized, yielding the sequence representation."""
    gate = torch.sigmoid(h_last.unsqueeze(1) @ w_last.t() + h_items @ w_item.t() + bias)
    alpha = masked_softmax(gate @ q, mask)            # [B, L]
    return (alpha.unsqueeze(-1) * h_items).sum(dim=1)


def multi_intent(h_items, mask, queries):
    """Attend each intent query over the session's items, then max-pool the
    per-intent summaries feature-wise."""
    logits = torch.einsum("md,bld->bml", queries, h_items)
    alpha = masked_softmax(logits, mask.unsqueeze(1))  # [B, M, L]
    per_intent = torch.einsum("bml,bld->bmd", alpha, h_items)
    return per_intent.max(dim=1).values


def mean_intent(h_items, mask):
    """Average pooling stand-in for the multi-intent module (ablation)."""
    m = mask.unsqueeze(-1).to(h_items.dtype)
    return (h_items * m).sum(dim=1) / m.sum(dim=1).clamp(min=1.0)


def session_sim_conv(h_pooled, sim_normalized):
    """Row-normalized neighbor average over the batch similarity graph.
    Sessions without neighbors come out as the zero vector."""
    if sim_normalized.shape != (h_pooled.shape[0], h_pooled.shape[0]):
        raise ValueError(
            f"similarity matrix shape {tuple(sim_normalized.shape)} does not "
            f"match batch size {h_pooled.shape[0]}"
        )
    return sim_normalized @ h_pooled


def intent_guided_attention(h_conv, h_intent, w1, w2, bias, gate_vec, w0_after_softmax=False):
    """Feature-wise denoising gate conditioned on the session intent.

    Returns (gated output, gate weights). The default gates the activated
    features with `gate_vec` before the feature softmax; the alternative
    applies it after.
    """
    z = torch.relu(h_conv @ w1.t() + h_intent @ w2.t() + bias)
    if w0_after_softmax:
        alpha = torch.softmax(z, dim=-1) * gate_vec
    else:
        alpha = torch.softmax(z * gate_vec, dim=-1)
    return alpha * h_conv, alpha


def fuse_and_aggregate(h_fused, top_k, dropout=None):
    """Aggregate each session's top-K most cosine-similar fused neighbors.

    Rows are L2-normalized for the similarity search (zero rows stay zero),
    self-similarity is excluded, ties go to the lower session index, and
    the selected similarities are softmax-weighted over the raw fused
    vectors. A batch with no possible neighbor yields zeros.
    """
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    bsz = h_fused.shape[0]
    k_eff = min(top_k, bsz - 1)
    if k_eff <= 0:
        h_sim = torch.zeros_like(h_fused)
    else:
        normed = F.normalize(h_fused, dim=-1)
        sims = normed @ normed.t()
        eye = torch.eye(bsz, dtype=torch.bool, device=sims.device)
        sims = sims.masked_fill(eye, float("-inf"))
        order = torch.argsort(sims, dim=1, descending=True, stable=True)
        picked = order[:, :k_eff]
        alpha = torch.softmax(torch.gather(sims, 1, picked), dim=1)
        h_sim = torch.einsum("bk,bkd->bd", alpha, h_fused[picked])
    return dropout(h_sim) if dropout is not None else h_sim


def score_items(h_session, item_table, scale=1.0):
    """Cosine scores against every catalog item and their softmax.

    `item_table` must exclude the padding row. Raises on a zero-norm
    session representation (cosine undefined).
    """
    if (h_session.norm(dim=-1) == 0).any():
        raise ValueError("zero-norm session representation cannot be scored")
    scores = F.normalize(h_session, dim=-1) @ F.normalize(item_table, dim=-1).t()
    return scores, torch.softmax(scores * scale, dim=-1)


@dataclass
class SessionForward:
    h_items: torch.Tensor
    h_sequence: torch.Tensor
    h_intent: torch.Tensor
    h_pooled: torch.Tensor
    h_global: torch.Tensor
    h_local: torch.Tensor
    h_fused: torch.Tensor
    h_similarity: torch.Tensor
    h_session: torch.Tensor
    scores: torch.Tensor
    probs: torch.Tensor


class ItemEmbedding(nn.Module):
    """Item table with optional semantic rows.

    Items flagged present in the semantic table are represented by the
    projected provider embedding (recomputed through the trainable
    projector each forward unless frozen); the rest use the learned table.
    The padding row is always learned and never scored.
    """

    def __init__(self, n_items, d, semantic: SemanticTable | None = None,
                 finetune=True, projector_hidden=None):
        super().__init__()
        self.n_items = n_items
        self.table = nn.Parameter(init_item_table(n_items, d))
        self.finetune = finetune
        if semantic is not None:
            if semantic.raw.shape[0] != n_items:
                raise ValueError(f"semantic table covers {semantic.raw.shape[0]} items, catalog has {n_items}")
            self.register_buffer("semantic_raw", torch.from_numpy(np.ascontiguousarray(semantic.raw)))
            self.register_buffer("semantic_present", torch.from_numpy(semantic.present.copy()))
            self.projector = SpaceProjector(semantic.raw.shape[1], d, projector_hidden)
            if not finetune:
                with torch.no_grad():
                    self.register_buffer("frozen_projected", self.projector(self.semantic_raw))
                for p in self.projector.parameters():
                    p.requires_grad_(False)
        else:
            self.projector = None

    @property
    def has_semantic(self):
        return self.projector is not None

    def forward(self):
        if self.projector is None:
            return self.table
        projected = self.projector(self.semantic_raw) if self.finetune else self.frozen_projected
        body = torch.where(self.semantic_present.unsqueeze(1), projected, self.table[: self.n_items])
        return torch.cat([body, self.table[self.n_items:]], dim=0)


class HipHop(nn.Module):
    """Session model: GNN over per-session transition graphs, multi-intent
    pooling, denoised global/local similarity convolutions, fused top-K
    aggregation, and cosine scoring over the item catalog."""

    def __init__(self, n_items, config: ModelConfig, semantic: SemanticTable | None = None):
        super().__init__()
        self.n_items = n_items
        self.config = config
        d = config.d
        if config.use_semantic and semantic is None:
            raise ValueError("use_semantic=True requires a semantic table")
        self.items = ItemEmbedding(
            n_items, d,
            semantic=semantic if config.use_semantic else None,
            finetune=config.semantic_finetune,
            projector_hidden=config.projector_hidden,
        )
        self.gnn_weight = nn.Parameter(torch.empty(d, d))
        self.readout_last = nn.Parameter(torch.empty(d, d))
        self.readout_item = nn.Parameter(torch.empty(d, d))
        self.readout_bias = nn.Parameter(torch.empty(d))
        self.readout_q = nn.Parameter(torch.empty(d))
        self.intent_queries = nn.Parameter(torch.empty(config.num_intents, d))
        self.denoise_w1 = nn.Parameter(torch.empty(d, d))
        self.denoise_w2 = nn.Parameter(torch.empty(d, d))
        self.denoise_bias = nn.Parameter(torch.empty(d))
        self.denoise_gate = nn.Parameter(torch.empty(d))
        if config.untie_denoise:
            self.denoise_w1_local = nn.Parameter(torch.empty(d, d))
            self.denoise_w2_local = nn.Parameter(torch.empty(d, d))
            self.denoise_bias_local = nn.Parameter(torch.empty(d))
            self.denoise_gate_local = nn.Parameter(torch.empty(d))
        self.dropout = nn.Dropout(config.dropout)
        self.reset_parameters()

    def reset_parameters(self):
        stdv = 1.0 / math.sqrt(self.config.d)
        for p in self.parameters():
            p.data.uniform_(-stdv, stdv)

    def _denoise_params(self, path):
        if path == "local" and self.config.untie_denoise:
            return (self.denoise_w1_local, self.denoise_w2_local,
                    self.denoise_bias_local, self.denoise_gate_local)
        return self.denoise_w1, self.denoise_w2, self.denoise_bias, self.denoise_gate

    def item_table(self):
        return self.items()

    def forward(self, batch: SessionBatch) -> SessionForward:
        cfg = self.config
        table = self.items()                                  # [n+1, d]
        h0 = table[batch.items]                               # [B, N, d]
        h_nodes = gnn_propagate(batch.adj_in, h0, self.gnn_weight, cfg.gnn_steps, cfg.gnn_activation)
        d = h_nodes.shape[-1]
        h_items = torch.gather(h_nodes, 1, batch.alias.unsqueeze(-1).expand(-1, -1, d))
        bsz = h_items.shape[0]
        h_last = h_items[torch.arange(bsz, device=h_items.device), batch.last_pos]
        h_seq = soft_attention_readout(
            h_items, h_last, batch.mask,
            self.readout_last, self.readout_item, self.readout_bias, self.readout_q,
        )
        if cfg.use_multi_intent:
            h_intent = multi_intent(h_items, batch.mask, self.intent_queries)
        else:
            h_intent = mean_intent(h_items, batch.mask)
        h_pooled = (h_items * batch.mask.unsqueeze(-1).to(h_items.dtype)).sum(dim=1)

        h_g = torch.zeros_like(h_seq)
        h_l = torch.zeros_like(h_seq)
        if cfg.use_global_sim:
            conv = session_sim_conv(h_pooled, batch.sim_global)
            h_g, _ = intent_guided_attention(
                conv, h_intent, *self._denoise_params("global"), cfg.w0_after_softmax)
        if cfg.use_local_sim:
            conv = session_sim_conv(h_pooled, batch.sim_local)
            h_l, _ = intent_guided_attention(
                conv, h_intent, *self._denoise_params("local"), cfg.w0_after_softmax)

        h_fused = h_seq + h_g + h_l
        h_sim = fuse_and_aggregate(h_fused, cfg.top_k_sessions, dropout=self.dropout)
        h_session = h_seq + h_sim
        scores, probs = score_items(h_session, table[: self.n_items], cfg.cosine_scale)
        return SessionForward(
            h_items=h_items, h_sequence=h_seq, h_intent=h_intent, h_pooled=h_pooled,
            h_global=h_g, h_local=h_l, h_fused=h_fused, h_similarity=h_sim,
            h_session=h_session, scores=scores, probs=probs,
        )


# --- checkpoints --------------------------------------------------------------

def save_checkpoint(model: HipHop, out_dir, extra=None):
    """Write a manifest plus one little-endian binary blob per tensor."""
    out_dir = Path(out_dir)
    params_dir = out_dir / "params"
    params_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "n_items": model.n_items,
        "model": asdict(model.config),
        "tensors": {},
    }
    if model.items.has_semantic:
        manifest["dim_raw"] = int(model.items.semantic_raw.shape[1])
    for name, tensor in model.state_dict().items():
        arr = tensor.detach().cpu()
        fname = name.replace(".", "__") + ".bin"
        if arr.dtype == torch.bool:
            kind = "u8"
            data = arr.numpy().astype("<u1").tobytes()
        else:
            kind = "f32"
            data = arr.numpy().astype("<f4").tobytes()
        (params_dir / fname).write_bytes(data)
        manifest["tensors"][name] = {"shape": list(arr.shape), "dtype": kind, "file": f"params/{fname}"}
    if extra:
        manifest.update(extra)
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return out_dir / "manifest.json"


def load_checkpoint(ckpt_dir):
    """Rebuild a model from a checkpoint directory."""
    ckpt_dir = Path(ckpt_dir)
    manifest_path = ckpt_dir / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported checkpoint schema {manifest.get('schema_version')}")
    config = ModelConfig(**manifest["model"])
    n_items = manifest["n_items"]
    semantic = None
    if config.use_semantic:
        shape = manifest["tensors"]["items.semantic_raw"]["shape"]
        semantic = SemanticTable(
            raw=np.zeros(shape, dtype=np.float32),
            present=np.zeros(shape[0], dtype=bool),
        )
    model = HipHop(n_items, config, semantic=semantic)
    state = {}
    for name, meta in manifest["tensors"].items():
        blob = (ckpt_dir / meta["file"]).read_bytes()
        if meta["dtype"] == "u8":
            arr = np.frombuffer(blob, dtype="<u1").astype(bool).reshape(meta["shape"])
            state[name] = torch.from_numpy(arr)
        else:
            arr = np.frombuffer(blob, dtype="<f4").reshape(meta["shape"]).copy()
            state[name] = torch.from_numpy(arr)
    model.load_state_dict(state)
    model.eval()
    return model, manifest
