"""Forward pass: ID embeddings -> per-slice propagation -> layer fusion ->
cross-slice recurrence with carry-forward -> MLP interaction probability.

Per history slice s, active nodes feed their current input (ID embedding at
slice 0, previous cross-slice state afterwards in the default chained mode)
through L propagation hops on that slice's graph. The L+1 layer matrices
are fused per side (user/item GRUs by default) and a second pair of GRUs
evolves the states across slices. Nodes inactive in a slice keep their
previous state bit-for-bit; the initial state is zero.

All ablation and variant switches from the evaluation harness live in
ModelConfig: graph mode (time_sliced / global / last_only / none), fusion
mode, side selection, static-ID concatenation, and the slice RNN toggle
(off = running mean of the fused per-slice representations).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import graphs as graphs_mod
from .errors import ConfigError, ContractError

FUSION_MODES = ("gru_per_side", "gru_shared", "concat", "last_layer", "mean_pool")
GRAPH_MODES = ("time_sliced", "global", "last_only", "none")
SIDE_MODES = ("both", "user_only", "item_only")
SLICE_INPUTS = ("chained", "embedding")
DROPOUT_SITES = ("prop", "gru", "mlp")


@dataclass
class ModelConfig:
    embed_dim: int = 16
    num_layers: int = 2
    fusion_mode: str = "gru_per_side"
    graph_mode: str = "time_sliced"
    slice_rnn: bool = True
    concat_id: bool = True
    side_mode: str = "both"
    dropout: float = 0.0
    dropout_sites: tuple = ("mlp",)
    slice_input: str = "chained"

    def validate(self) -> "ModelConfig":
        if self.embed_dim < 1:
            raise ConfigError(f"embed_dim must be >= 1, got {self.embed_dim}")
        if self.num_layers < 1:
            raise ConfigError(f"num_layers must be >= 1, got {self.num_layers}")
        for value, allowed, name in (
            (self.fusion_mode, FUSION_MODES, "fusion_mode"),
            (self.graph_mode, GRAPH_MODES, "graph_mode"),
            (self.side_mode, SIDE_MODES, "side_mode"),
            (self.slice_input, SLICE_INPUTS, "slice_input"),
        ):
            if value not in allowed:
                raise ConfigError(f"unknown {name} {value!r}; expected one of {allowed}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        for site in self.dropout_sites:
            if site not in DROPOUT_SITES:
                raise ConfigError(f"unknown dropout site {site!r}; expected subset of {DROPOUT_SITES}")
        return self

    @property
    def mlp_input_width(self) -> int:
        dynamic = 2 if self.side_mode == "both" else 1
        static = 2 if self.concat_id else 0
        return self.embed_dim * (dynamic + static)


@dataclass
class SliceStates:
    """Per-slice full state matrices plus activity masks.

    state(s) for a node inactive in slice s equals state(s-1) exactly;
    state before slice 0 is the zero vector.
    """

    user_states: list = field(default_factory=list)   # each (M, d)
    item_states: list = field(default_factory=list)   # each (N, d)
    user_active: list = field(default_factory=list)   # each bool (M,)
    item_active: list = field(default_factory=list)

    @property
    def num_slices(self) -> int:
        return len(self.user_states)

    @property
    def final_user(self):
        return self.user_states[-1]

    @property
    def final_item(self):
        return self.item_states[-1]


# ---------------------------------------------------------------------------
# parameters


def _uniform(rng, rows, cols, scale):
    return rng.uniform(-scale, scale, size=(rows, cols))


def _init_gru(params, prefix, d, rng, scale):
    for gate in ("z", "r", "h"):
        params[f"{prefix}.W{gate}"] = ad.tensor(_uniform(rng, d, d, scale), requires_grad=True)
        params[f"{prefix}.U{gate}"] = ad.tensor(_uniform(rng, d, d, scale), requires_grad=True)
        params[f"{prefix}.b{gate}"] = ad.tensor(np.zeros((1, d)), requires_grad=True)


def init_model_params(num_users: int, num_items: int, config: ModelConfig,
                      rng: np.random.Generator) -> dict:
    """Allocate all trainable tensors the configured variant needs.

    Weights and embeddings are uniform(-1/sqrt(d), 1/sqrt(d)); biases zero.
    Allocation order is fixed so a given seed and config reproduce bitwise.
    """
    config.validate()
    d = config.embed_dim
    scale = 1.0 / np.sqrt(d)
    params: dict[str, ad.Tensor] = {}
    params["emb.user"] = ad.tensor(_uniform(rng, num_users, d, scale), requires_grad=True)
    params["emb.item"] = ad.tensor(_uniform(rng, num_items, d, scale), requires_grad=True)

    if config.fusion_mode == "gru_per_side":
        _init_gru(params, "fuse.user", d, rng, scale)
        _init_gru(params, "fuse.item", d, rng, scale)
    elif config.fusion_mode == "gru_shared":
        _init_gru(params, "fuse.shared", d, rng, scale)
    elif config.fusion_mode == "concat":
        width = (config.num_layers + 1) * d
        for side in ("user", "item"):
            params[f"fuse.{side}.proj_w"] = ad.tensor(_uniform(rng, width, d, scale), requires_grad=True)
            params[f"fuse.{side}.proj_b"] = ad.tensor(np.zeros((1, d)), requires_grad=True)
    # last_layer and mean_pool need no parameters

    uses_cross_rnn = config.slice_rnn and config.graph_mode in ("time_sliced", "none")
    if uses_cross_rnn:
        if config.fusion_mode == "gru_shared":
            _init_gru(params, "cross.shared", d, rng, scale)
        else:
            _init_gru(params, "cross.user", d, rng, scale)
            _init_gru(params, "cross.item", d, rng, scale)

    widths = [config.mlp_input_width, 2 * d, d, 1]
    for k in range(3):
        params[f"mlp.w{k + 1}"] = ad.tensor(_uniform(rng, widths[k], widths[k + 1], scale), requires_grad=True)
        params[f"mlp.b{k + 1}"] = ad.tensor(np.zeros((1, widths[k + 1])), requires_grad=True)
    for p_name, p in params.items():
        p.name = p_name
    return params


def param_group(params: dict, prefix: str) -> dict:
    return {name: p for name, p in params.items() if name.startswith(prefix)}


# ---------------------------------------------------------------------------
# building blocks


def gru_cell(params: dict, prefix: str, x: ad.Tensor, h: ad.Tensor) -> ad.Tensor:
    """z-gates-candidate GRU: h' = (1-z)*h + z*tanh(Wx + U(r*h) + b)."""
    def gate(g):
        return ad.add(ad.add(ad.matmul(x, params[f"{prefix}.W{g}"]),
                             ad.matmul(h, params[f"{prefix}.U{g}"])),
                      params[f"{prefix}.b{g}"])

    z = ad.sigmoid(gate("z"))
    r = ad.sigmoid(gate("r"))
    cand = ad.tanh(ad.add(ad.add(ad.matmul(x, params[f"{prefix}.Wh"]),
                                 ad.matmul(ad.mul(r, h), params[f"{prefix}.Uh"])),
                          params[f"{prefix}.bh"]))
    one_minus_z = ad.sadd(ad.neg(z), 1.0)
    return ad.add(ad.mul(one_minus_z, h), ad.mul(z, cand))


def propagate_slice(graph, x0: ad.Tensor, num_layers: int,
                    dropout=0.0, rng=None, training=False) -> list:
    """L propagation hops on one slice graph; returns [X_0, X_1, ..., X_L]."""
    layers = [x0]
    for _ in range(num_layers):
        nxt = graphs_mod.spmm(graph, layers[-1])
        if dropout and training:
            nxt = ad.dropout(nxt, dropout, rng, training=True)
        layers.append(nxt)
    return layers


def fuse_layers(layers: list, side: str, params: dict, config: ModelConfig) -> ad.Tensor:
    """Combine the L+1 per-layer matrices of one side into one row per node."""
    mode = config.fusion_mode
    if mode in ("gru_per_side", "gru_shared"):
        prefix = "fuse.shared" if mode == "gru_shared" else f"fuse.{side}"
        h = ad.zeros(layers[0].shape[0], layers[0].shape[1])
        for x in layers:
            h = gru_cell(params, prefix, x, h)
        return h
    if mode == "concat":
        stacked = ad.concat_cols(layers)
        return ad.add(ad.matmul(stacked, params[f"fuse.{side}.proj_w"]),
                      params[f"fuse.{side}.proj_b"])
    if mode == "last_layer":
        return layers[-1]
    if mode == "mean_pool":
        acc = layers[0]
        for x in layers[1:]:
            acc = ad.add(acc, x)
        return ad.smul(acc, 1.0 / len(layers))
    raise ConfigError(f"unknown fusion_mode {mode!r}")


def _neighbor_mean(graph, xu: ad.Tensor, xi: ad.Tensor):
    """Graph-free aggregation: each node averages its neighbors' inputs.

    Works straight off the edge list so the variant provably never touches
    the normalized adjacency.
    """
    lu = graph.edges[:, 0]
    li = graph.edges[:, 1]
    user_agg = ad.segment_mean(ad.gather_rows(xi, li), lu, xu.shape[0])
    item_agg = ad.segment_mean(ad.gather_rows(xu, lu), li, xi.shape[0])
    return user_agg, item_agg


def _split_sides(layers: list, num_users: int, num_nodes: int):
    u_idx = np.arange(num_users)
    i_idx = np.arange(num_users, num_nodes)
    user_layers = [ad.gather_rows(x, u_idx) for x in layers]
    item_layers = [ad.gather_rows(x, i_idx) for x in layers]
    return user_layers, item_layers


# ---------------------------------------------------------------------------
# full forward


def forward_all(slice_graphs: list, params: dict, config: ModelConfig,
                num_history: int | None = None, training: bool = False,
                rng=None) -> SliceStates:
    """Run the model over history slices 0..num_history-1.

    graph_mode "global" unions the history into one graph, "last_only"
    keeps only the final slice; both skip the cross-slice recurrence and
    yield a single-slice state sequence.
    """
    T1 = len(slice_graphs) if num_history is None else num_history
    if T1 < 1 or T1 > len(slice_graphs):
        raise ContractError(f"need 1..{len(slice_graphs)} history slices, got {T1}")
    config.validate()
    hist = list(slice_graphs[:T1])
    if config.graph_mode == "global":
        hist = [graphs_mod.merge_graphs(hist)]
    elif config.graph_mode == "last_only":
        hist = [hist[-1]]
    single_shot = config.graph_mode in ("global", "last_only")

    E_U = params["emb.user"]
    E_I = params["emb.item"]
    M, d = E_U.shape
    N = E_I.shape[0]

    states = SliceStates()
    prev_u = ad.zeros(M, d)
    prev_i = ad.zeros(N, d)
    if not config.slice_rnn:
        sum_u, sum_i = ad.zeros(M, d), ad.zeros(N, d)
        count_u = np.zeros(M)
        count_i = np.zeros(N)

    for k, g in enumerate(hist):
        if g.num_nodes == 0:
            states.user_states.append(prev_u)
            states.item_states.append(prev_i)
            states.user_active.append(np.zeros(M, dtype=bool))
            states.item_active.append(np.zeros(N, dtype=bool))
            continue
        au = g.active_users
        ai = g.active_items

        chained = config.slice_input == "chained" and k > 0 and not single_shot
        xu = ad.gather_rows(prev_u if chained else E_U, au)
        xi = ad.gather_rows(prev_i if chained else E_I, ai)

        if config.graph_mode == "none":
            xbar_u, xbar_i = _neighbor_mean(g, xu, xi)
        else:
            prop_drop = config.dropout if "prop" in config.dropout_sites else 0.0
            layers = propagate_slice(g, ad.concat_rows([xu, xi]), config.num_layers,
                                     dropout=prop_drop, rng=rng, training=training)
            user_layers, item_layers = _split_sides(layers, g.num_users, g.num_nodes)
            xbar_u = fuse_layers(user_layers, "user", params, config)
            xbar_i = fuse_layers(item_layers, "item", params, config)

        if single_shot:
            hu, hi = xbar_u, xbar_i
        elif config.slice_rnn:
            shared = config.fusion_mode == "gru_shared"
            hu = gru_cell(params, "cross.shared" if shared else "cross.user",
                          xbar_u, ad.gather_rows(prev_u, au))
            hi = gru_cell(params, "cross.shared" if shared else "cross.item",
                          xbar_i, ad.gather_rows(prev_i, ai))
            if training and config.dropout and "gru" in config.dropout_sites:
                hu = ad.dropout(hu, config.dropout, rng, training=True)
                hi = ad.dropout(hi, config.dropout, rng, training=True)
        else:
            # slice RNN ablation: state is the mean of fused representations
            # over the slices where the node has been active so far
            sum_u = ad.row_update(sum_u, au, ad.add(ad.gather_rows(sum_u, au), xbar_u))
            sum_i = ad.row_update(sum_i, ai, ad.add(ad.gather_rows(sum_i, ai), xbar_i))
            count_u[au] += 1
            count_i[ai] += 1
            new_u = ad.row_scale(sum_u, 1.0 / np.maximum(count_u, 1.0))
            new_i = ad.row_scale(sum_i, 1.0 / np.maximum(count_i, 1.0))
            states.user_states.append(new_u)
            states.item_states.append(new_i)
            mu = np.zeros(M, dtype=bool)
            mu[au] = True
            mi = np.zeros(N, dtype=bool)
            mi[ai] = True
            states.user_active.append(mu)
            states.item_active.append(mi)
            prev_u, prev_i = new_u, new_i
            continue

        prev_u = ad.row_update(prev_u, au, hu)
        prev_i = ad.row_update(prev_i, ai, hi)
        states.user_states.append(prev_u)
        states.item_states.append(prev_i)
        mu = np.zeros(M, dtype=bool)
        mu[au] = True
        mi = np.zeros(N, dtype=bool)
        mi[ai] = True
        states.user_active.append(mu)
        states.item_active.append(mi)
    return states


def predict(users, items, states: SliceStates, params: dict, config: ModelConfig,
            training: bool = False, rng=None) -> ad.Tensor:
    """Interaction probabilities for (user, item) pairs, shape (B, 1)."""
    users = np.atleast_1d(np.asarray(users, dtype=np.intp))
    items = np.atleast_1d(np.asarray(items, dtype=np.intp))
    if users.size != items.size:
        raise ContractError("users and items must pair up")
    parts = []
    if config.side_mode in ("both", "user_only"):
        parts.append(ad.gather_rows(states.final_user, users))
    if config.side_mode in ("both", "item_only"):
        parts.append(ad.gather_rows(states.final_item, items))
    if config.concat_id:
        parts.append(ad.gather_rows(params["emb.user"], users))
        parts.append(ad.gather_rows(params["emb.item"], items))
    z = ad.concat_cols(parts) if len(parts) > 1 else parts[0]

    mlp_drop = training and config.dropout and "mlp" in config.dropout_sites
    h = z
    for k in (1, 2):
        h = ad.relu(ad.add(ad.matmul(h, params[f"mlp.w{k}"]), params[f"mlp.b{k}"]))
        if mlp_drop:
            h = ad.dropout(h, config.dropout, rng, training=True)
    logits = ad.add(ad.matmul(h, params["mlp.w3"]), params["mlp.b3"])
    return ad.sigmoid(logits)
