"""Policy/critic networks: graph-attention encoder with entity-selection
decoding, the attention-free ablation, and the flat residual-network
ablation. All architectures share the same decoding contract: per-block
move means and keys, per-gripper queries (block selection via scaled dot
product), a shared state-independent Gaussian log-std, and an MLP critic.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import CheckpointMismatch, ShapeError
from .observe import GraphObs

LOG_STD_INIT = math.log(0.5)
LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
MOVE_DIM = 6

ARCH_GAT = "gat"
ARCH_NO_ATTENTION = "no_attention"
ARCH_RESNET = "resnet"


@dataclass
class NetConfig:
    n_blocks: int
    d_node: int
    d_edge: int
    d_global: int
    n_grippers: int
    arch: str = ARCH_GAT
    d_model: int = 128
    n_heads: int = 4
    d_key: int = 64
    d_ff: int = 256
    n_layers: int = 3
    critic_width: int = 512
    resnet_blocks: int = 4
    resnet_width: int = 1024

    def __post_init__(self):
        if self.arch not in (ARCH_GAT, ARCH_NO_ATTENTION, ARCH_RESNET):
            raise ValueError(f"unknown arch {self.arch!r}")
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.arch == ARCH_RESNET and self.resnet_width % self.n_blocks != 0:
            raise ValueError("resnet_width must be divisible by n_blocks")

    @property
    def flat_dim(self) -> int:
        n = self.n_blocks
        return n * self.d_node + n * (n - 1) * self.d_edge + self.d_global


@dataclass
class PolicyOutput:
    select_logits: torch.Tensor  # (B, G, N)
    move_mean: torch.Tensor  # (B, N, 6)
    move_log_std: torch.Tensor  # (6,)
    value: torch.Tensor  # (B,)
    attention: list = field(default_factory=list)  # per layer (B, H, N, N)


@dataclass
class ActionSample:
    gripper_choice: np.ndarray
    block_moves: np.ndarray
    log_prob: float
    entropy: float


def _init_linear(layer: nn.Linear, scale: float = 0.333):
    """Uniform variance scaling, fan-out mode."""
    fan_out = layer.weight.shape[0]
    limit = math.sqrt(3.0 * scale / fan_out)
    with torch.no_grad():
        layer.weight.uniform_(-limit, limit)
        if layer.bias is not None:
            layer.bias.zero_()
    return layer


def _linear(d_in: int, d_out: int) -> nn.Linear:
    return _init_linear(nn.Linear(d_in, d_out))


def _head_linear(d_in: int, d_out: int, scale: float = 0.1) -> nn.Linear:
    """Output-head layer with weights shrunk after variance-scaling init.

    Keeps early policy outputs near zero (near-uniform block selection,
    near-zero move means and values), which PPO needs to not blow past the
    trust region in the first updates.
    """
    layer = _init_linear(nn.Linear(d_in, d_out))
    with torch.no_grad():
        layer.weight.mul_(scale)
    return layer


def _critic_mlp(d_in: int, width: int) -> nn.Sequential:
    return nn.Sequential(
        _linear(d_in, width), nn.ReLU(),
        _linear(width, width), nn.ReLU(),
        _head_linear(width, 1),
    )


class GraphAttentionLayer(nn.Module):
    """One encoder layer: each node attends over its peers with keys/values
    from (peer node, connecting edge in the attending node's own frame),
    then the global latent attends over all node embeddings.
    Pre-normalization residual blocks throughout. With ``attention=False``
    the softmax is replaced by a uniform average (ablation)."""

    def __init__(self, cfg: NetConfig, attention: bool):
        super().__init__()
        d, h = cfg.d_model, cfg.n_heads
        self.n_heads = h
        self.d_head = d // h
        self.attention = attention
        self.ln_nodes = nn.LayerNorm(d)
        self.ln_edges = nn.LayerNorm(d)
        self.q_proj = _linear(d, d)
        self.kv_proj = _linear(2 * d, 2 * d)
        self.out_proj = _linear(d, d)
        self.ln_ff = nn.LayerNorm(d)
        self.ff = nn.Sequential(_linear(d, cfg.d_ff), nn.ReLU(), _linear(cfg.d_ff, d))
        self.ln_global = nn.LayerNorm(d)
        self.ln_global_nodes = nn.LayerNorm(d)
        self.gq_proj = _linear(d, d)
        self.gkv_proj = _linear(d, 2 * d)
        self.gout_proj = _linear(d, d)

    def forward(self, h, e, g, src_index):
        b, n, d = h.shape
        m = n - 1
        hn = self.ln_nodes(h)
        en = self.ln_edges(e)
        src_h = hn[:, src_index.reshape(-1)].reshape(b, n, m, d)
        kv = self.kv_proj(torch.cat([src_h, en], dim=-1))
        k, v = kv.chunk(2, dim=-1)
        k = k.reshape(b, n, m, self.n_heads, self.d_head)
        v = v.reshape(b, n, m, self.n_heads, self.d_head)
        q = self.q_proj(hn).reshape(b, n, self.n_heads, self.d_head)
        scores = torch.einsum("bnhd,bnmhd->bnmh", q, k) / math.sqrt(self.d_head)
        if self.attention:
            att = torch.softmax(scores, dim=2)
        else:
            att = torch.full_like(scores, 1.0 / m)
        agg = torch.einsum("bnmh,bnmhd->bnhd", att, v).reshape(b, n, d)
        h = h + self.out_proj(agg)
        h = h + self.ff(self.ln_ff(h))

        gq = self.gq_proj(self.ln_global(g)).reshape(b, self.n_heads, self.d_head)
        gkv = self.gkv_proj(self.ln_global_nodes(h))
        gk, gv = gkv.chunk(2, dim=-1)
        gk = gk.reshape(b, n, self.n_heads, self.d_head)
        gv = gv.reshape(b, n, self.n_heads, self.d_head)
        gscores = torch.einsum("bhd,bnhd->bnh", gq, gk) / math.sqrt(self.d_head)
        if self.attention:
            gatt = torch.softmax(gscores, dim=1)
        else:
            gatt = torch.full_like(gscores, 1.0 / n)
        gagg = torch.einsum("bnh,bnhd->bhd", gatt, gv).reshape(b, d)
        g = g + self.gout_proj(gagg)
        return h, g, att


def _square_attention(att: torch.Tensor, src_index: torch.Tensor) -> torch.Tensor:
    """Rearrange (B, N, N-1, H) incoming-edge weights into (B, H, N, N) with
    zero diagonal; rows are each target's distribution over sources."""
    b, n, m, heads = att.shape
    full = att.new_zeros(b, n, n, heads)
    dst = torch.arange(n).unsqueeze(1).expand(n, m)
    full[:, dst.reshape(-1), src_index.reshape(-1)] = att.reshape(b, n * m, heads)
    return full.permute(0, 3, 1, 2)


class DecoderHeads(nn.Module):
    """Shared decoding contract: move means, selection keys/queries, critic."""

    def __init__(self, d_block: int, d_context: int, cfg: NetConfig):
        super().__init__()
        self.d_key = cfg.d_key
        self.n_grippers = cfg.n_grippers
        # first 6 of the 12 move outputs are the velocity means; log-stds are
        # a shared learned vector, not a network output
        self.move_head = _head_linear(d_block, 2 * MOVE_DIM)
        self.key_head = _head_linear(d_block, cfg.d_key)
        self.query_head = _head_linear(d_context, cfg.n_grippers * cfg.d_key)
        self.critic = _critic_mlp(d_context, cfg.critic_width)
        self.log_std = nn.Parameter(torch.full((MOVE_DIM,), LOG_STD_INIT))

    def forward(self, block_h: torch.Tensor, context_h: torch.Tensor):
        b, n, _ = block_h.shape
        move_mean = self.move_head(block_h)[..., :MOVE_DIM]
        keys = self.key_head(block_h)
        queries = self.query_head(context_h).reshape(b, self.n_grippers, self.d_key)
        logits = torch.einsum("bgk,bnk->bgn", queries, keys) / math.sqrt(self.d_key)
        value = self.critic(context_h).squeeze(-1)
        log_std = self.log_std.clamp(LOG_STD_MIN, LOG_STD_MAX)
        return logits, move_mean, log_std, value


class GraphPolicy(nn.Module):
    """Graph-attention policy/critic (also covers the no-attention ablation).

    The per-gripper held one-hot inside the global features is pooled to a
    (holding-any, holding-nothing) pair before embedding: which block is
    held already reaches the network through the node held-flags, and the
    pooling is what keeps the whole policy permutation-equivariant.
    """

    def __init__(self, cfg: NetConfig):
        super().__init__()
        if cfg.arch not in (ARCH_GAT, ARCH_NO_ATTENTION):
            raise ValueError("GraphPolicy requires a graph arch")
        self.cfg = cfg
        attention = cfg.arch == ARCH_GAT
        d = cfg.d_model
        per_gripper = cfg.d_global // cfg.n_grippers
        self.gripper_head_dim = per_gripper - (cfg.n_blocks + 1)
        self.node_embed = _linear(cfg.d_node, d)
        self.edge_embed = _linear(cfg.d_edge, d)
        self.global_embed = _linear(cfg.n_grippers * (self.gripper_head_dim + 2), d)
        self.layers = nn.ModuleList(
            GraphAttentionLayer(cfg, attention) for _ in range(cfg.n_layers)
        )
        self.final_ln_nodes = nn.LayerNorm(d)
        self.final_ln_global = nn.LayerNorm(d)
        self.heads = DecoderHeads(d, d, cfg)
        src_index = torch.tensor(
            [[s for s in range(cfg.n_blocks) if s != t] for t in range(cfg.n_blocks)],
            dtype=torch.long,
        )
        self.register_buffer("src_index", src_index, persistent=False)

    def _pool_globals(self, globals_):
        b = globals_.shape[0]
        per = globals_.reshape(b, self.cfg.n_grippers, -1)
        head = per[..., :self.gripper_head_dim]
        one_hot = per[..., self.gripper_head_dim:]
        holding_any = one_hot[..., :-1].sum(dim=-1, keepdim=True)
        none_flag = one_hot[..., -1:]
        return torch.cat([head, holding_any, none_flag], dim=-1).reshape(b, -1)

    def encode(self, nodes, edges, globals_):
        h = self.node_embed(nodes)
        e = self.edge_embed(edges)
        g = self.global_embed(self._pool_globals(globals_))
        attentions = []
        for layer in self.layers:
            h, g, att = layer(h, e, g, self.src_index)
            attentions.append(_square_attention(att, self.src_index))
        return self.final_ln_nodes(h), self.final_ln_global(g), attentions

    def forward(self, nodes, edges, globals_, want_attention: bool = False) -> PolicyOutput:
        _check_graph_shapes(self.cfg, nodes, edges, globals_)
        h, g, attentions = self.encode(nodes, edges, globals_)
        logits, move_mean, log_std, value = self.heads(h, g)
        return PolicyOutput(logits, move_mean, log_std, value,
                            attentions if want_attention else [])


class ResidualBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.lin1 = _linear(width, width)
        self.lin2 = _linear(width, width)
        self.norm = nn.LayerNorm(width)

    def forward(self, x):
        h = self.lin2(F.relu(self.lin1(x)))
        return self.norm(x + h)


class ResNetPolicy(nn.Module):
    """Flat-observation residual-network ablation. The hidden vector is cut
    into per-block slices for the move/key heads, which deliberately breaks
    permutation equivariance."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        if cfg.arch != ARCH_RESNET:
            raise ValueError("ResNetPolicy requires arch='resnet'")
        self.cfg = cfg
        self.in_proj = _linear(cfg.flat_dim, cfg.resnet_width)
        self.blocks = nn.ModuleList(ResidualBlock(cfg.resnet_width) for _ in range(cfg.resnet_blocks))
        self.slice = cfg.resnet_width // cfg.n_blocks
        self.heads = DecoderHeads(self.slice, cfg.resnet_width, cfg)

    def forward(self, flat: torch.Tensor, want_attention: bool = False) -> PolicyOutput:
        if flat.ndim != 2 or flat.shape[1] != self.cfg.flat_dim:
            raise ShapeError(
                f"flat obs must have shape (B, {self.cfg.flat_dim}), got {tuple(flat.shape)}"
            )
        x = self.in_proj(flat)
        for block in self.blocks:
            x = block(x)
        block_h = x.reshape(x.shape[0], self.cfg.n_blocks, self.slice)
        logits, move_mean, log_std, value = self.heads(block_h, x)
        return PolicyOutput(logits, move_mean, log_std, value, [])


def _check_graph_shapes(cfg: NetConfig, nodes, edges, globals_):
    n = cfg.n_blocks
    if nodes.ndim != 3 or nodes.shape[1:] != (n, cfg.d_node):
        raise ShapeError(f"nodes must be (B, {n}, {cfg.d_node}), got {tuple(nodes.shape)}")
    if edges.ndim != 4 or edges.shape[1:] != (n, n - 1, cfg.d_edge):
        raise ShapeError(f"edges must be (B, {n}, {n - 1}, {cfg.d_edge}), got {tuple(edges.shape)}")
    if globals_.ndim != 2 or globals_.shape[1] != cfg.d_global:
        raise ShapeError(f"globals must be (B, {cfg.d_global}), got {tuple(globals_.shape)}")


def build_policy(cfg: NetConfig) -> nn.Module:
    if cfg.arch == ARCH_RESNET:
        return ResNetPolicy(cfg)
    return GraphPolicy(cfg)


# ---------------------------------------------------------------------------
# Observation packing
# ---------------------------------------------------------------------------

_SRC_MAJOR_CACHE: dict = {}


def src_major_index(n: int) -> np.ndarray:
    """Flat positions of edges (i -> j), i-major, within the destination-major
    export layout. Entry [i, k] locates edge i -> j_k with j_k the k-th
    element of [j != i]."""
    if n not in _SRC_MAJOR_CACHE:
        index = np.empty((n, n - 1), dtype=np.int64)
        for i in range(n):
            for k, j in enumerate(x for x in range(n) if x != i):
                index[i, k] = j * (n - 1) + (i if i < j else i - 1)
        _SRC_MAJOR_CACHE[n] = index
    return _SRC_MAJOR_CACHE[n]


def obs_to_tensors(obs_list, cfg: NetConfig, dtype=torch.float32):
    """Stack GraphObs into the tensors the given architecture consumes.

    Graph architectures take edges regrouped so that row i holds the
    outgoing edges (i -> j): the features a block reads are expressed in
    its own frame.
    """
    if isinstance(obs_list, GraphObs):
        obs_list = [obs_list]
    if cfg.arch == ARCH_RESNET:
        flat = np.stack([o.flatten() for o in obs_list])
        return (torch.as_tensor(flat, dtype=dtype),)
    n = cfg.n_blocks
    order = src_major_index(n).reshape(-1)
    nodes = torch.as_tensor(np.stack([o.nodes for o in obs_list]), dtype=dtype)
    edges = torch.as_tensor(
        np.stack([o.edges[order].reshape(n, n - 1, -1) for o in obs_list]), dtype=dtype
    )
    globals_ = torch.as_tensor(np.stack([o.globals for o in obs_list]), dtype=dtype)
    return nodes, edges, globals_


def forward_obs(policy: nn.Module, obs_list, want_attention: bool = False) -> PolicyOutput:
    dtype = next(policy.parameters()).dtype
    tensors = obs_to_tensors(obs_list, policy.cfg, dtype=dtype)
    return policy(*tensors, want_attention=want_attention)


# ---------------------------------------------------------------------------
# Composite action distribution
# ---------------------------------------------------------------------------

def _log_softmax_np(x: np.ndarray) -> np.ndarray:
    x = x - x.max(axis=-1, keepdims=True)
    return x - np.log(np.exp(x).sum(axis=-1, keepdims=True))


def sample_action(out: PolicyOutput, rng: np.random.Generator,
                  deterministic: bool = False, index: int = 0) -> ActionSample:
    """Draw (per-gripper block choice, per-block moves) for one batch row.

    The log-probability covers the categorical choices plus the Gaussian
    density of the chosen blocks' moves only; unexecuted moves do not
    contribute.
    """
    logits = out.select_logits[index].detach().cpu().numpy().astype(np.float64)
    mean = out.move_mean[index].detach().cpu().numpy().astype(np.float64)
    log_std = out.move_log_std.detach().cpu().numpy().astype(np.float64)
    std = np.exp(log_std)
    n_grippers, n_blocks = logits.shape

    logp_cat = _log_softmax_np(logits)
    if deterministic:
        choice = logits.argmax(axis=1)
        moves = mean.copy()
    else:
        probs = np.exp(logp_cat)
        choice = np.array([
            rng.choice(n_blocks, p=probs[g] / probs[g].sum()) for g in range(n_grippers)
        ])
        moves = mean + std * rng.standard_normal(mean.shape)

    log_prob = 0.0
    for g in range(n_grippers):
        c = int(choice[g])
        log_prob += logp_cat[g, c]
        z = (moves[c] - mean[c]) / std
        log_prob += float(-0.5 * (z @ z) - log_std.sum() - 0.5 * MOVE_DIM * np.log(2 * np.pi))

    ent_cat = float(-(np.exp(logp_cat) * logp_cat).sum())
    ent_gauss = float(n_grippers * (log_std.sum() + 0.5 * MOVE_DIM * (1.0 + np.log(2 * np.pi))))
    return ActionSample(choice.astype(np.int64), moves, float(log_prob), ent_cat + ent_gauss)


def log_prob_torch(out: PolicyOutput, choice: torch.Tensor, moves: torch.Tensor) -> torch.Tensor:
    """Batched log-probability of stored actions; differentiable.

    choice: (B, G) long; moves: (B, N, 6).
    """
    logp_cat = F.log_softmax(out.select_logits, dim=-1)
    cat_part = logp_cat.gather(-1, choice.unsqueeze(-1)).squeeze(-1).sum(dim=-1)
    log_std = out.move_log_std
    b, g = choice.shape
    idx = choice.unsqueeze(-1).expand(b, g, MOVE_DIM)
    chosen_moves = moves.gather(1, idx)
    chosen_mean = out.move_mean.gather(1, idx)
    z = (chosen_moves - chosen_mean) / log_std.exp()
    gauss_part = (
        -0.5 * (z ** 2).sum(dim=-1)
        - log_std.sum()
        - 0.5 * MOVE_DIM * math.log(2 * math.pi)
    ).sum(dim=-1)
    return cat_part + gauss_part


def entropy_torch(out: PolicyOutput) -> torch.Tensor:
    logp = F.log_softmax(out.select_logits, dim=-1)
    cat_ent = -(logp.exp() * logp).sum(dim=-1).sum(dim=-1)
    n_grippers = out.select_logits.shape[1]
    gauss_ent = n_grippers * (out.move_log_std.sum() + 0.5 * MOVE_DIM * (1.0 + math.log(2 * math.pi)))
    return cat_ent + gauss_ent


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(path, policy: nn.Module, extra: dict | None = None,
                    extra_arrays: dict | None = None):
    """Versioned tensor-map checkpoint; save/load round-trips bit-exactly.

    extra_arrays lets the trainer piggyback optimizer state; such entries
    are namespaced and ignored by plain policy loads.
    """
    meta = {
        "checkpoint_version": CHECKPOINT_VERSION,
        "net_config": asdict(policy.cfg),
        "extra": extra or {},
    }
    arrays = {
        name: tensor.detach().cpu().numpy()
        for name, tensor in policy.state_dict().items()
    }
    for name, arr in (extra_arrays or {}).items():
        arrays[f"xtra__{name}"] = np.asarray(arr)
    with open(path, "wb") as f:
        np.savez(f, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path):
    """Rebuild the policy stored at path; returns (policy, extra, extra_arrays)."""
    try:
        data = np.load(path)
    except (OSError, ValueError) as e:
        raise CheckpointMismatch(f"{path}: cannot read checkpoint: {e}") from e
    if "__meta__" not in data:
        raise CheckpointMismatch(f"{path}: missing checkpoint metadata")
    meta = json.loads(bytes(data["__meta__"]).decode())
    if meta.get("checkpoint_version") != CHECKPOINT_VERSION:
        raise CheckpointMismatch(f"{path}: unsupported checkpoint version")
    cfg = NetConfig(**meta["net_config"])
    policy = build_policy(cfg)
    state = {}
    own = policy.state_dict()
    for name in own:
        if name not in data:
            raise CheckpointMismatch(f"{path}: missing tensor {name}")
        arr = data[name]
        if tuple(arr.shape) != tuple(own[name].shape):
            raise CheckpointMismatch(
                f"{path}: tensor {name} has shape {arr.shape}, expected {tuple(own[name].shape)}"
            )
        state[name] = torch.as_tensor(arr)
    policy.load_state_dict(state)
    extra_arrays = {
        name[len("xtra__"):]: data[name] for name in data.files if name.startswith("xtra__")
    }
    return policy, meta["extra"], extra_arrays
