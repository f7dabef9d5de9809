"""Hamming-space graph convolution over the user-item graph.

Every node starts from a relaxed code ``tanh(beta * e)``. Each propagation
layer counts the neighbors' bit signs per dimension and pulls the node's
bits toward the dominant value, keeping the node's own vote with weight
``self_weight``. Two coupled forms are provided:

* hard: integer sums of ±1 codes and a sign with ties resolved to the
  node's previous bit (used at export and evaluation time);
* relaxed: the same update with ``sign`` replaced by ``tanh(beta * .)``,
  which is differentiable and converges to the hard form as beta grows.

Nodes are numbered jointly: users ``0..N-1`` then items ``N..N+M-1``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np
import scipy.sparse as sp

from .graph import BipartiteGraph
from .hamming import CodeMatrix, HashCode, pack, unpack, validate_bits, similarity_score

MAX_LAYERS = 8
READOUTS = ("last_layer", "mean_then_sign")


@dataclass(frozen=True)
class ModelConfig:
    K: int = 64
    L: int = 2
    self_weight: float = 1.0
    normalize_neighbors: bool = False
    readout: str = "last_layer"
    beta0: float = 1.0
    beta_growth: float = 2.0
    beta_period: int = 10
    beta_max: float = 64.0
    score_scale: float = 4.0

    def __post_init__(self):
        validate_bits(self.K)
        if not 0 <= self.L <= MAX_LAYERS:
            raise ValueError(f"L must be in [0, {MAX_LAYERS}], got {self.L}")
        for name in ("self_weight", "beta0", "beta_max", "score_scale"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be a positive finite number, got {v!r}")
        if not (math.isfinite(self.beta_growth) and self.beta_growth > 1):
            raise ValueError(f"beta_growth must be > 1, got {self.beta_growth!r}")
        if self.beta_period < 1:
            raise ValueError("beta_period must be >= 1")
        if self.beta_max < self.beta0:
            raise ValueError("beta_max must be >= beta0")
        if self.readout not in READOUTS:
            raise ValueError(f"readout must be one of {READOUTS}, got {self.readout!r}")

    def to_dict(self):
        return asdict(self)


def beta_schedule(epoch: int, config: ModelConfig) -> float:
    """``min(beta_max, beta0 * growth ** (epoch // period))``."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    steps = epoch // config.beta_period
    # cap the exponent before it can overflow
    cap = math.log(config.beta_max / config.beta0) / math.log(config.beta_growth)
    if steps > cap + 1:
        return float(config.beta_max)
    return float(min(config.beta_max, config.beta0 * config.beta_growth ** steps))


def init_embeddings(n_nodes: int, K: int, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    return rng.uniform(-0.5, 0.5, size=(n_nodes, K)).astype(dtype)


def sign_codes(x: np.ndarray) -> np.ndarray:
    """±1 int8 signs with ``sign(0) = +1``."""
    return np.where(np.asarray(x) >= 0, 1, -1).astype(np.int8)


# --- single-node operations -------------------------------------------------

def init_relaxed(embeddings: np.ndarray, beta: float) -> np.ndarray:
    if not beta > 0:
        raise ValueError("beta must be positive")
    e = np.asarray(embeddings)
    if not np.isfinite(e).all():
        raise ValueError("embedding table contains non-finite entries")
    return np.tanh(beta * e)


def aggregate(states: np.ndarray, graph: BipartiteGraph, node: int, normalize: bool = False) -> np.ndarray:
    """Sum (or mean) of the neighbors' states for one node.

    For integer ±1 codes the sum is exact and is what the hard layer uses.
    """
    nb = graph.neighbors(node)
    states = np.asarray(states)
    if len(nb) == 0:
        return np.zeros(states.shape[1], dtype=np.result_type(states.dtype, np.int64))
    if np.issubdtype(states.dtype, np.integer):
        total = states[nb].astype(np.int64).sum(axis=0)
    else:
        total = states[nb].sum(axis=0)
    return total / len(nb) if normalize else total


def dominant_bits(a: np.ndarray, fallback: HashCode) -> HashCode:
    """Per-dimension sign of ``a``; zero entries take the fallback bit."""
    a = np.asarray(a)
    fb = unpack(fallback)
    if a.shape != fb.shape:
        raise ValueError(f"argument has {a.shape[0]} dims, fallback code has K={fallback.K}")
    return pack(_sign_keep(a, fb))


def _sign_keep(arg: np.ndarray, previous: np.ndarray) -> np.ndarray:
    return np.where(arg > 0, 1, np.where(arg < 0, -1, previous)).astype(np.int8)


def encode_hard(code: HashCode, neighbor_codes, self_weight: float = 1.0) -> HashCode:
    """Weighted bit-wise majority of the node's own code and its neighbors'."""
    if not self_weight > 0:
        raise ValueError("self_weight must be positive")
    own = unpack(code).astype(np.float64)
    if isinstance(neighbor_codes, CodeMatrix):
        nb = neighbor_codes.unpack()
    else:
        nb = np.array([unpack(c) for c in neighbor_codes]).reshape(-1, code.K)
    arg = self_weight * own + nb.sum(axis=0)
    return dominant_bits(arg, code)


def encode_relaxed(h: np.ndarray, a: np.ndarray, self_weight: float, beta: float, degree: int | None = None):
    """Relaxed encoding of one node (or a batch of rows).

    With ``degree=None`` ``a`` is a neighbor mean and the blend is divided by
    ``s + 1``; otherwise ``a`` is a neighbor sum and the divisor is
    ``s + degree``.
    """
    if not self_weight > 0 or not beta > 0:
        raise ValueError("self_weight and beta must be positive")
    denom = self_weight + (1 if degree is None else degree)
    return np.tanh(beta * (self_weight * np.asarray(h) + np.asarray(a)) / denom)


def predict(a, b) -> float:
    """Affinity in ``[-1, 1]``: ``<a, b> / K`` for relaxed rows or hash codes."""
    if isinstance(a, HashCode) and isinstance(b, HashCode):
        return similarity_score(a, b) / a.K
    a, b = np.asarray(a), np.asarray(b)
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"dimension mismatch: {a.shape[-1]} vs {b.shape[-1]}")
    return (a * b).sum(axis=-1) / a.shape[-1]


# --- whole-graph forward ------------------------------------------------------

def propagation_operator(graph: BipartiteGraph, self_weight: float, normalize: bool, dtype=np.float64):
    """Sparse matrix mapping layer ``l`` states to the next pre-activation."""
    key = ("prop", float(self_weight), bool(normalize), np.dtype(dtype).str)
    op = graph._cache.get(key)
    if op is not None:
        return op
    A = graph.adjacency()
    n = A.shape[0]
    deg = graph.degree().astype(np.float64)
    eye = sp.identity(n, format="csr")
    if normalize:
        inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
        op = (self_weight * eye + sp.diags(inv) @ A) / (self_weight + 1.0)
    else:
        op = sp.diags(1.0 / (self_weight + deg)) @ (self_weight * eye + A)
    op = sp.csr_matrix(op, dtype=dtype)
    op.sort_indices()
    graph._cache[key] = (op, sp.csr_matrix(op.T))
    return graph._cache[key]


@dataclass
class LayerState:
    """Relaxed states ``h[0..L]``, each ``(N+M, K)``, plus the readout."""

    layers: list
    readout: str
    beta: float

    @property
    def output(self) -> np.ndarray:
        if self.readout == "last_layer":
            return self.layers[-1]
        return sum(self.layers[1:], self.layers[0].copy()) / len(self.layers)


@dataclass
class BinaryState:
    """Hard ±1 layers ``c[0..L]`` as int8 arrays, plus the readout."""

    layers: list
    readout: str

    @property
    def output(self) -> np.ndarray:
        if self.readout == "last_layer" or len(self.layers) == 1:
            return self.layers[-1]
        total = np.sum([c.astype(np.int64) for c in self.layers], axis=0)
        return _sign_keep(total, self.layers[-1])

    def codes(self, layer: int | None = None) -> CodeMatrix:
        arr = self.output if layer is None else self.layers[layer]
        return CodeMatrix.from_signs(arr)


def hard_self_weights(graph: BipartiteGraph, config: ModelConfig) -> np.ndarray:
    """Per-node self weight used by the hard layer."""
    s = float(config.self_weight)
    if config.normalize_neighbors:
        return s * graph.degree().astype(np.float64)
    return np.full(graph.n_nodes, s)


def forward_relaxed(graph: BipartiteGraph, embeddings: np.ndarray, config: ModelConfig, beta: float) -> LayerState:
    E = np.asarray(embeddings)
    op, _ = propagation_operator(graph, config.self_weight, config.normalize_neighbors, E.dtype)
    h = [init_relaxed(E, beta)]
    for _ in range(config.L):
        h.append(np.tanh(beta * (op @ h[-1])))
    return LayerState(h, config.readout, beta)


def forward_hard(graph: BipartiteGraph, embeddings: np.ndarray, config: ModelConfig) -> BinaryState:
    """Hard propagation from ``sign(e)`` layer-0 codes.

    The neighbor term is the integer sum of ±1 codes. With
    ``normalize_neighbors`` the relaxed layer blends the node with the
    neighbor *mean*, whose sign limit is a majority vote in which the node
    carries ``self_weight * degree`` votes; that weight is used here so the
    hard layer stays the large-beta limit of the relaxed one.
    """
    E = np.asarray(embeddings)
    if not np.isfinite(E).all():
        raise ValueError("embedding table contains non-finite entries")
    A = graph.adjacency()
    weight = hard_self_weights(graph, config)[:, None]
    c = sign_codes(E)
    layers = [c]
    for _ in range(config.L):
        arg = weight * c + A @ c.astype(np.float64)
        c = _sign_keep(arg, c)
        layers.append(c)
    return BinaryState(layers, config.readout)


def forward(graph, embeddings, config: ModelConfig, mode: str = "hard", beta: float | None = None):
    """Run the initial layer and ``L`` synchronous propagation layers."""
    if mode == "hard":
        return forward_hard(graph, embeddings, config)
    if mode == "relaxed":
        if beta is None:
            raise ValueError("relaxed mode needs beta")
        return forward_relaxed(graph, embeddings, config, beta)
    raise ValueError(f"unknown mode {mode!r}")


def backward_relaxed(graph: BipartiteGraph, state: LayerState, config: ModelConfig, grad_output: np.ndarray):
    """Gradient w.r.t. the embedding table given the gradient w.r.t. the readout."""
    beta = state.beta
    L = len(state.layers) - 1
    _, op_t = propagation_operator(graph, config.self_weight, config.normalize_neighbors, state.layers[0].dtype)
    if config.readout == "last_layer":
        per_layer = [None] * L + [grad_output]
    else:
        share = grad_output / (L + 1)
        per_layer = [share] * (L + 1)
    carry = None
    for l in range(L, -1, -1):
        g = per_layer[l]
        if carry is not None:
            g = carry if g is None else g + carry
        dpre = g * (beta * (1 - state.layers[l] ** 2))
        if l == 0:
            return dpre
        carry = op_t @ dpre


# --- loss ---------------------------------------------------------------------

def pairwise_loss(score_pos, score_neg):
    """``-log sigmoid(pos - neg)`` and its derivative w.r.t. the score gap."""
    x = np.asarray(score_pos) - np.asarray(score_neg)
    loss = np.logaddexp(0.0, -x)
    # d/dx of -log sigmoid(x) = -sigmoid(-x), evaluated stably
    dx = -np.exp(-np.logaddexp(0.0, x))
    return loss, dx


def bpr_loss(graph, embeddings, config: ModelConfig, beta: float, users, pos, neg, reg: float = 1e-5):
    """Mean BPR loss over a batch of triples and its gradient w.r.t. the table.

    Per triple: ``-log sigmoid(g * (s_ui - s_uj)) + reg * (|e_u|^2 + |e_i|^2 + |e_j|^2)``
    with relaxed scores ``s = <h_u, h_i> / K`` and ``g = config.score_scale``.
    """
    E = np.asarray(embeddings)
    N, K = graph.n_users, config.K
    users = np.asarray(users)
    ipos = np.asarray(pos) + N
    ineg = np.asarray(neg) + N
    B = len(users)

    state = forward_relaxed(graph, E, config, beta)
    out = state.output
    hu, hi, hj = out[users], out[ipos], out[ineg]
    s_pos = (hu * hi).sum(axis=1) / K
    s_neg = (hu * hj).sum(axis=1) / K
    gain = config.score_scale
    terms, dx = pairwise_loss(gain * s_pos, gain * s_neg)
    eu, ei, ej = E[users], E[ipos], E[ineg]
    with np.errstate(over="ignore"):  # an overflow shows up as a non-finite loss
        reg_terms = (eu * eu).sum(1) + (ei * ei).sum(1) + (ej * ej).sum(1)
    loss = float(terms.mean() + reg * reg_terms.mean())

    g = (dx * gain / (B * K)).astype(E.dtype)[:, None]
    rows = np.concatenate([users, ipos, ineg])
    vals = np.concatenate([g * (hi - hj), g * hu, -g * hu])
    grad_out = np.zeros_like(out)
    np.add.at(grad_out, rows, vals)
    grad = backward_relaxed(graph, state, config, grad_out)
    np.add.at(grad, rows, (2 * reg / B) * E[rows])
    return loss, grad
