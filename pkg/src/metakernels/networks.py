"""Embedding, inference and prior networks.

All networks keep their weights as plain float64 arrays and are evaluated
on a :class:`~metakernels.autodiff.Graph`; inputs are row matrices
(n x width), a single vector being a 1 x width row.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node, ShapeError

ACTIVATIONS = {"relu": ad.relu, "elu": ad.elu, "tanh": ad.tanh, "none": None}
MODES = ("vanilla-lstm", "bi-lstm", "no-lstm")


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear:
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        self.n_in, self.n_out = n_in, n_out
        self.weight = _uniform(rng, n_in, (n_in, n_out))
        self.bias = _uniform(rng, n_in, (n_out,))

    def named_parameters(self, prefix: str) -> dict[str, np.ndarray]:
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}

    def __call__(self, x: Node) -> Node:
        if x.value.ndim != 2 or x.shape[1] != self.n_in:
            raise ShapeError(f"linear layer expects width {self.n_in}, got input of shape {x.shape}")
        g = x.graph
        out = ad.matmul(x, g.param(self.weight))
        return ad.add(out, ad.broadcast_rows(g.param(self.bias), x.shape[0]))


class MLPStack:
    """Fully connected layers, each followed by its own activation."""

    def __init__(self, widths: list[int], activations: list[str], rng: np.random.Generator):
        if len(activations) != len(widths) - 1:
            raise ValueError("need one activation per layer")
        for act in activations:
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
        self.widths = list(widths)
        self.activations = list(activations)
        self.layers = [Linear(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]

    @property
    def n_in(self) -> int:
        return self.widths[0]

    @property
    def n_out(self) -> int:
        return self.widths[-1]

    def named_parameters(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.named_parameters(f"{prefix}.{i}"))
        return out

    def __call__(self, x: Node) -> Node:
        for layer, act in zip(self.layers, self.activations):
            x = layer(x)
            fn = ACTIVATIONS[act]
            if fn is not None:
                x = fn(x)
        return x


def embed(psi: MLPStack, x) -> Node:
    """Row-wise feature embedding of raw inputs."""
    x = ad.lift(x)
    if x.value.ndim != 2 or x.shape[1] != psi.n_in:
        raise ShapeError(f"embedding expects inputs of width {psi.n_in}, got shape {x.shape}")
    return psi(x)


GATES = ("input", "forget", "output", "cell")


class LSTMCellParams:
    def __init__(self, n_in: int, hidden: int, rng: np.random.Generator, forget_bias: float = 1.0):
        self.n_in, self.hidden = n_in, hidden
        fan_in = n_in + hidden
        self.w_in = {g: _uniform(rng, fan_in, (n_in, hidden)) for g in GATES}
        self.w_hid = {g: _uniform(rng, fan_in, (hidden, hidden)) for g in GATES}
        self.bias = {g: _uniform(rng, fan_in, (hidden,)) for g in GATES}
        self.bias["forget"][:] = forget_bias

    def named_parameters(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for g in GATES:
            out[f"{prefix}.{g}.w_in"] = self.w_in[g]
            out[f"{prefix}.{g}.w_hid"] = self.w_hid[g]
            out[f"{prefix}.{g}.bias"] = self.bias[g]
        return out


def lstm_step(params: LSTMCellParams, x: Node, state: tuple[Node, Node]) -> tuple[Node, Node]:
    h, c = state
    if x.shape != (1, params.n_in) or h.shape != (1, params.hidden) or c.shape != (1, params.hidden):
        raise ShapeError(
            f"lstm_step expects input (1, {params.n_in}) and state (1, {params.hidden}); "
            f"got {x.shape}, {h.shape}, {c.shape}"
        )
    g = x.graph

    def gate(name):
        pre = ad.matmul(x, g.param(params.w_in[name])) + ad.matmul(h, g.param(params.w_hid[name]))
        return pre + ad.broadcast_rows(g.param(params.bias[name]), 1)

    i = ad.sigmoid(gate("input"))
    f = ad.sigmoid(gate("forget"))
    o = ad.sigmoid(gate("output"))
    cand = ad.tanh(gate("cell"))
    c_new = f * c + i * cand
    h_new = o * ad.tanh(c_new)
    return h_new, c_new


def instance_pool(features, labels) -> Node:
    """Average the feature rows of each class; rows come out in sorted label order."""
    features = ad.lift(features)
    labels = np.asarray(labels)
    if labels.shape != (features.shape[0],):
        raise ShapeError(f"{labels.shape[0] if labels.ndim else 0} labels for {features.shape[0]} feature rows")
    classes, counts = np.unique(labels, return_counts=True)
    if np.any(counts != counts[0]):
        raise ValueError(f"unbalanced classes: counts {dict(zip(classes.tolist(), counts.tolist()))}")
    pool = (labels[None, :] == classes[:, None]).astype(np.float64) / counts[0]
    return ad.matmul(features.graph.constant(pool), features)


def cross_attention(query, keys, values) -> tuple[Node, Node]:
    """Laplace attention: weights softmax(-||q_i - k_j||_1) over the keys.

    ``query`` is n x d (one row per query); returns (n x d outputs, n x C weights).
    """
    query = ad.lift(query)
    g = query.graph
    keys, values = ad.lift(keys, g), ad.lift(values, g)
    if keys.shape[0] == 0:
        raise ValueError("cross attention over zero keys")
    if keys.shape != values.shape:
        raise ShapeError(f"keys {keys.shape} and values {values.shape} differ in shape")
    if query.value.ndim != 2 or query.shape[1] != keys.shape[1]:
        raise ShapeError(f"query width {query.shape} does not match key width {keys.shape[1]}")
    n, C = query.shape[0], keys.shape[0]
    q_rep = ad.take_rows(query, np.repeat(np.arange(n), C))
    k_rep = ad.take_rows(keys, np.tile(np.arange(C), n))
    dist = ad.sum_(ad.abs_(q_rep - k_rep), axis=1)
    weights = ad.softmax_rows(ad.reshape(ad.negate(dist), (n, C)))
    return ad.matmul(weights, values), weights


@dataclass
class FrequencyPosterior:
    """Diagonal Gaussian over frequency vectors; ``mu`` and ``log_var`` are 1 x d rows."""

    mu: Node
    log_var: Node

    def __post_init__(self):
        self.mu = ad.lift(self.mu)
        self.log_var = ad.lift(self.log_var, self.mu.graph)
        if self.mu.shape != self.log_var.shape:
            raise ShapeError(f"mu {self.mu.shape} and log_var {self.log_var.shape} differ in shape")

    @property
    def width(self) -> int:
        return self.mu.shape[-1]


class InferenceNet:
    """Amortized posterior q(omega | S).

    ``vanilla-lstm`` carries an LSTM state across the episodes of a
    meta-batch, ``bi-lstm`` runs forward and backward cells over the
    meta-batch and concatenates their hidden states, ``no-lstm`` swaps the
    cell for one ELU layer.
    """

    def __init__(self, n_in: int, hidden: int, out_dim: int, mode: str, rng: np.random.Generator,
                 n_pre: int = 2):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        self.mode = mode
        self.n_in, self.hidden, self.out_dim = n_in, hidden, out_dim
        self.pre = MLPStack([n_in] + [hidden] * n_pre, ["elu"] * n_pre, rng)
        self.cell = self.cell_bwd = self.dense = None
        if mode == "no-lstm":
            self.dense = Linear(hidden, hidden, rng)
        else:
            self.cell = LSTMCellParams(hidden, hidden, rng)
            if mode == "bi-lstm":
                self.cell_bwd = LSTMCellParams(hidden, hidden, rng)
        head_in = 2 * hidden if mode == "bi-lstm" else hidden
        self.mu_head = Linear(head_in, out_dim, rng)
        self.log_var_head = Linear(head_in, out_dim, rng)

    def named_parameters(self, prefix: str = "inference") -> dict[str, np.ndarray]:
        out = self.pre.named_parameters(f"{prefix}.pre")
        if self.dense is not None:
            out.update(self.dense.named_parameters(f"{prefix}.dense"))
        if self.cell is not None:
            out.update(self.cell.named_parameters(f"{prefix}.lstm"))
        if self.cell_bwd is not None:
            out.update(self.cell_bwd.named_parameters(f"{prefix}.lstm_bwd"))
        out.update(self.mu_head.named_parameters(f"{prefix}.mu_head"))
        out.update(self.log_var_head.named_parameters(f"{prefix}.log_var_head"))
        return out

    def zero_state(self, graph: ad.Graph) -> tuple[Node, Node]:
        z = np.zeros((1, self.hidden))
        return graph.constant(z), graph.constant(z)

    def heads(self, hidden: Node) -> FrequencyPosterior:
        t = ad.tanh(hidden)
        return FrequencyPosterior(self.mu_head(t), self.log_var_head(t))


def infer_posterior(net: InferenceNet, representation, state=None):
    """One step of the (vanilla or no-lstm) inference net.

    ``representation`` is the 1 x n_in aggregated support feature of one
    episode.  Returns the posterior and the updated carried state.
    """
    if net.mode == "bi-lstm":
        raise ValueError("bi-lstm needs the whole episode sequence; use infer_sequence")
    x = ad.lift(representation)
    if x.shape != (1, net.n_in):
        raise ShapeError(f"inference input must be (1, {net.n_in}), got {x.shape}")
    u = net.pre(x)
    if net.mode == "no-lstm":
        return net.heads(ad.elu(net.dense(u))), state
    if state is None:
        state = net.zero_state(x.graph)
    h, c = lstm_step(net.cell, u, state)
    return net.heads(h), (h, c)


def infer_sequence(net: InferenceNet, representations: list, state=None):
    """Posteriors for every episode of a meta-batch, in order."""
    graph = next((r.graph for r in representations if isinstance(r, Node)), None) or ad.Graph()
    xs = [ad.lift(r, graph) for r in representations]
    if net.mode != "bi-lstm":
        posts = []
        for x in xs:
            post, state = infer_posterior(net, x, state)
            posts.append(post)
        return posts, state
    for x in xs:
        if x.shape != (1, net.n_in):
            raise ShapeError(f"inference input must be (1, {net.n_in}), got {x.shape}")
    us = [net.pre(x) for x in xs]
    fwd, bwd = bidirectional_states(net.cell, net.cell_bwd, us, state)
    posts = [net.heads(ad.concat([hf, hb], axis=1)) for hf, hb in zip(fwd, bwd)]
    return posts, None


def bidirectional_states(cell_fwd, cell_bwd, inputs: list[Node], state=None):
    graph = inputs[0].graph
    zero = np.zeros((1, cell_fwd.hidden))

    def run(cell, seq, st):
        st = st or (graph.constant(zero), graph.constant(zero))
        hs = []
        for u in seq:
            st = lstm_step(cell, u, st)
            hs.append(st[0])
        return hs

    fwd = run(cell_fwd, inputs, state)
    bwd = run(cell_bwd, inputs[::-1], None)[::-1]
    return fwd, bwd


class PriorNet:
    """Query-conditioned prior p(omega | x, S) fed by the attentive representation."""

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, n_layers: int = 2):
        self.dim = dim
        self.body = MLPStack([dim] + [hidden] * n_layers, ["elu"] * n_layers, rng)
        self.mu_head = Linear(hidden, dim, rng)
        self.log_var_head = Linear(hidden, dim, rng)

    def named_parameters(self, prefix: str = "prior") -> dict[str, np.ndarray]:
        out = self.body.named_parameters(f"{prefix}.body")
        out.update(self.mu_head.named_parameters(f"{prefix}.mu_head"))
        out.update(self.log_var_head.named_parameters(f"{prefix}.log_var_head"))
        return out

    def __call__(self, attentive: Node) -> FrequencyPosterior:
        if attentive.value.ndim != 2 or attentive.shape[1] != self.dim:
            raise ShapeError(f"prior input must have width {self.dim}, got {attentive.shape}")
        h = self.body(attentive)
        return FrequencyPosterior(self.mu_head(h), self.log_var_head(h))


def prior_from_query(prior: PriorNet, query_features, pooled_support) -> FrequencyPosterior:
    """Per-query prior parameters (one row per query)."""
    attentive, _ = cross_attention(query_features, pooled_support, pooled_support)
    return prior(attentive)


class MetaKernelNet:
    """Container for the three networks trained jointly."""

    def __init__(self, d_in: int, feature_dim: int = 40, hidden: int = 40, mode: str = "vanilla-lstm",
                 rng: np.random.Generator | None = None, embed_widths: list[int] | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        widths = [d_in] + (embed_widths or [feature_dim, feature_dim])
        if widths[-1] != feature_dim:
            raise ValueError("embedding output width must equal feature_dim")
        self.d_in, self.feature_dim, self.hidden, self.mode = d_in, feature_dim, hidden, mode
        self.embedding = MLPStack(widths, ["relu"] * (len(widths) - 1), rng)
        self.inference = InferenceNet(feature_dim, hidden, feature_dim, mode, rng)
        self.prior = PriorNet(feature_dim, hidden, rng)

    def named_parameters(self) -> dict[str, np.ndarray]:
        out = self.embedding.named_parameters("embedding")
        out.update(self.inference.named_parameters("inference"))
        out.update(self.prior.named_parameters("prior"))
        return out

    def num_parameters(self) -> int:
        return sum(p.size for p in self.named_parameters().values())

    def load_parameters(self, arrays: dict[str, np.ndarray]) -> None:
        own = self.named_parameters()
        missing = sorted(set(own) - set(arrays))
        extra = sorted(set(arrays) - set(own))
        if missing or extra:
            raise ValueError(f"parameter names differ: missing {missing}, unexpected {extra}")
        for name, arr in own.items():
            src = np.asarray(arrays[name], dtype=np.float64)
            if src.shape != arr.shape:
                raise ValueError(f"{name}: stored shape {src.shape} != model shape {arr.shape}")
            arr[...] = src
