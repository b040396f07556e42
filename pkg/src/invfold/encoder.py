"""Message-passing encoder with edge-keyed attention and a global gate.

One layer does three things, in order:

  1. attention over each node's neighbors in which the directed-edge
     feature vector supplies the key (queries come from the receiving
     node, values from receiver/edge/sender concatenated);
  2. a residual per-directed-edge MLP update that reads the layer-input
     node states, so within a layer the update of channel j->i is
     exactly independent of channel i->j;
  3. a gated global-context block: feature-wise attention pooling over
     all nodes, then two sigmoid gates inject the pooled vector back
     into each node.

Node states use pre-layer-norm residual wiring; edge states are residual
without normalization. Edge tensors are laid out (receiver, slot, dim)
with `neighbors[i, m]` naming the sender, so the two orientations of an
adjacency are always distinct entries.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import InvalidParameter, IsolatedNode, ParseError
from .nn import Linear, LayerNorm, MlpBlock

_ALPHA_MAGIC = b"IFA1"


@dataclass
class LayerState:
    """Node and directed-edge tensors flowing through the stack."""

    h: Tensor
    e: Tensor
    neighbors: np.ndarray
    layer_index: int = 0

    @property
    def n(self):
        return self.h.shape[0]


class AttentionParams:
    """Projections for edge-keyed attention; d_k * heads = d."""

    def __init__(self, d, d_e, heads, stream):
        if d % heads != 0:
            raise InvalidParameter(f"hidden dim {d} not divisible by {heads} heads")
        self.d = d
        self.d_e = d_e
        self.heads = heads
        self.d_k = d // heads
        self.w_q = Linear(d, d, stream.child("q"), bias=False)
        self.w_k = Linear(d_e, d, stream.child("k"), bias=False)
        self.w_v = Linear(2 * d + d_e, d, stream.child("v"), bias=False)

    def parameters(self, prefix):
        params = {}
        params.update(self.w_q.parameters(f"{prefix}.q"))
        params.update(self.w_k.parameters(f"{prefix}.k"))
        params.update(self.w_v.parameters(f"{prefix}.v"))
        return params


class BridgeParams:
    """Weights of the global-context block."""

    def __init__(self, d, stream, pool_mode="channel", activation="gelu", dropout=0.0):
        if pool_mode not in ("channel", "scalar"):
            raise InvalidParameter(f"unknown pool mode {pool_mode!r}")
        self.d = d
        self.pool_mode = pool_mode
        self.w_att = Linear(d, d, stream.child("att"), bias=False)
        self.w_val = Linear(d, d, stream.child("val"), bias=False)
        self.mlp_up = MlpBlock((2 * d, d, d), stream.child("up"), activation, dropout)
        self.mlp_in = MlpBlock((d, d, d), stream.child("in"), activation, dropout)
        self.mlp_out = MlpBlock((d, d, d), stream.child("out"), activation, dropout)

    def parameters(self, prefix):
        params = {}
        params.update(self.w_att.parameters(f"{prefix}.att"))
        params.update(self.w_val.parameters(f"{prefix}.val"))
        params.update(self.mlp_up.parameters(f"{prefix}.up"))
        params.update(self.mlp_in.parameters(f"{prefix}.in"))
        params.update(self.mlp_out.parameters(f"{prefix}.out"))
        return params


class LayerParams:
    def __init__(self, d, d_e, heads, stream, activation="gelu", dropout=0.0, pool_mode="channel"):
        self.attention = AttentionParams(d, d_e, heads, stream.child("attn"))
        self.edge_mlp = MlpBlock((2 * d + d_e, d_e, d_e), stream.child("edge"), activation, dropout)
        self.bridge = BridgeParams(d, stream.child("bridge"), pool_mode, activation, dropout)
        self.norm = LayerNorm(d)
        self.dropout = dropout

    def parameters(self, prefix):
        params = {}
        params.update(self.attention.parameters(f"{prefix}.attn"))
        params.update(self.edge_mlp.parameters(f"{prefix}.edge"))
        params.update(self.bridge.parameters(f"{prefix}.bridge"))
        params.update(self.norm.parameters(f"{prefix}.norm"))
        return params


class StackParams:
    def __init__(self, d, d_e, heads, depth, stream, activation="gelu", dropout=0.0,
                 pool_mode="channel"):
        self.depth = depth
        self.layers = [
            LayerParams(d, d_e, heads, stream.child(f"layer{i}"), activation, dropout, pool_mode)
            for i in range(depth)
        ]
        self.final_norm = LayerNorm(d) if depth > 0 else None

    def parameters(self, prefix="stack"):
        params = {}
        for i, layer in enumerate(self.layers):
            params.update(layer.parameters(f"{prefix}.layer{i}"))
        if self.final_norm is not None:
            params.update(self.final_norm.parameters(f"{prefix}.final_norm"))
        return params


def gau_attention(h: Tensor, e: Tensor, neighbors: np.ndarray, params: AttentionParams):
    """Edge-keyed attention.

    q_i = W_Q h_i, k_{ji} = W_K e_{ji}, v_{ji} = W_V [h_i || e_{ji} || h_j],
    alpha_{ji} = softmax_j(q_i . k_{ji} / sqrt(d_k)),
    h_local_i = sum_j alpha_{ji} v_{ji}.

    Returns (h_local, alpha) with alpha of shape (n, k', heads).
    """
    n, k = neighbors.shape
    if k < 1:
        raise IsolatedNode("attention requires at least one neighbor per node")
    heads, d_k = params.heads, params.d_k

    q = params.w_q(h)                                   # (n, d)
    kk = params.w_k(e)                                  # (n, k, d)
    # W_V [h_i || e_{ji} || h_j], with the node blocks lifted to (n, d) GEMMs
    v = ad.pair_linear(h, e, neighbors, params.w_v.w, order=("self", "edge", "nbr"))

    logits = ad.mul(ad.edge_scores(q, kk, heads), 1.0 / math.sqrt(d_k))  # (n, k, heads)
    alpha = ad.softmax(logits, axis=1)
    h_local = ad.attn_combine(alpha, v, heads)
    return h_local, alpha


def edge_update(h: Tensor, e: Tensor, neighbors: np.ndarray, mlp: MlpBlock,
                training=False, stream=None) -> Tensor:
    """Residual directed-edge refresh: e_{ji} + MLP([h_i || h_j || e_{ji}]).

    Each oriented channel reads only its own entry and the node states,
    so the same-layer cross-channel derivative is exactly zero.
    """
    first = mlp.layers[0]
    x = ad.pair_linear(h, e, neighbors, first.w, first.b, order=("self", "nbr", "edge"))
    delta = mlp.apply_tail(x, training=training, stream=stream)
    return ad.add(e, delta)


def global_context_bridge(h_local: Tensor, params: BridgeParams,
                          training=False, stream=None) -> Tensor:
    """Attention-pooled global vector injected through two sigmoid gates.

    s_i = W_att h_i; alpha normalizes exp(s) over nodes (per feature
    channel by default, a single scalar per node in "scalar" mode);
    g = sum_i alpha_i * (W_val h_i); u_i = MLP_up(h_i || g);
    z_i = u_i * sigmoid(MLP_in(h_i)); out_i = h_i * sigmoid(MLP_out(z_i)).
    """
    n = h_local.shape[0]
    s = params.w_att(h_local)                           # (n, d)
    if params.pool_mode == "channel":
        alpha = ad.softmax(s, axis=0)                   # per channel over nodes
    else:
        alpha = ad.softmax(ad.tmean(s, axis=1, keepdims=True), axis=0)  # (n, 1)
    vals = params.w_val(h_local)
    g_pool = ad.tsum(ad.mul(alpha, vals), axis=0, keepdims=True)        # (1, d)
    g_rows = ad.tile_row(g_pool, n)                                     # (n, d)
    u = params.mlp_up(ad.concat([h_local, g_rows], axis=1), training=training, stream=stream)
    z = ad.mul(u, ad.sigmoid(params.mlp_in(h_local, training=training, stream=stream)))
    gate = ad.sigmoid(params.mlp_out(z, training=training, stream=stream))
    return ad.mul(h_local, gate)


def symmetrize_edges(e: Tensor, neighbors: np.ndarray) -> Tensor:
    """Average the two orientations of every mutual adjacency (ablation).

    Non-mutual directed edges are left unchanged.
    """
    n, k, d = e.shape
    partner = np.arange(n * k)
    slot_of = {}
    for i in range(n):
        for m in range(k):
            slot_of[(i, int(neighbors[i, m]))] = i * k + m
    for i in range(n):
        for m in range(k):
            j = int(neighbors[i, m])
            back = slot_of.get((j, i))
            if back is not None:
                partner[i * k + m] = back
    flat = ad.reshape(e, (n * k, d))
    mirrored = ad.take_rows(flat, partner)
    return ad.reshape(ad.mul(ad.add(flat, mirrored), 0.5), (n, k, d))


def encoder_layer(state: LayerState, params: LayerParams, training=False, stream=None,
                  use_bridge=True, symmetric_edges=False):
    """One block: attention -> edge refresh -> global gate, residual on h.

    Returns (new_state, alpha) where alpha is the head-averaged
    pre-dropout attention matrix, shape (n, k').
    """
    child = stream.child(f"l{state.layer_index}") if stream is not None else None
    x = params.norm(state.h)
    h_local, alpha = gau_attention(x, state.e, state.neighbors, params.attention)
    alpha_out = alpha.data.mean(axis=2)
    if training and params.dropout > 0.0:
        h_local = ad.dropout(h_local, params.dropout, child.child("attn_drop"), training)

    e_new = edge_update(x, state.e, state.neighbors, params.edge_mlp,
                        training=training, stream=child.child("edge") if child else None)
    if symmetric_edges:
        e_new = symmetrize_edges(e_new, state.neighbors)

    h_out = h_local
    if use_bridge:
        h_out = global_context_bridge(h_local, params.bridge, training=training,
                                      stream=child.child("bridge") if child else None)
    if training and params.dropout > 0.0:
        h_out = ad.dropout(h_out, params.dropout, child.child("out_drop"), training)
    h_new = ad.add(state.h, h_out)

    return LayerState(h_new, e_new, state.neighbors, state.layer_index + 1), alpha_out


def write_attention_dump(path, alphas, neighbors: np.ndarray) -> None:
    """Per-layer attention weights: JSON index + float32 blocks.

    Entry (layer, receiver, slot) is the head-averaged weight of the
    edge neighbors[receiver, slot] -> receiver at that layer.
    """
    n, k = neighbors.shape
    header = {
        "format": "attention/1",
        "layers": len(alphas),
        "n": n,
        "k": k,
        "keying": "block l: row i, column m = weight of neighbors[i, m] -> i",
    }
    hb = json.dumps(header, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_ALPHA_MAGIC)
        fh.write(struct.pack("<I", len(hb)))
        fh.write(hb)
        fh.write(neighbors.astype("<i4").tobytes())
        for alpha in alphas:
            fh.write(np.asarray(alpha).astype("<f4").tobytes())


def read_attention_dump(path):
    """Returns (list of (n, k) float arrays, neighbors)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _ALPHA_MAGIC:
        raise ParseError("not an attention dump (bad magic)")
    (hlen,) = struct.unpack_from("<I", data, 4)
    header = json.loads(data[8:8 + hlen].decode("utf-8"))
    n, k, layers = header["n"], header["k"], header["layers"]
    off = 8 + hlen
    neighbors = np.frombuffer(data, dtype="<i4", count=n * k, offset=off).reshape(n, k)
    off += neighbors.nbytes
    alphas = []
    for _ in range(layers):
        block = np.frombuffer(data, dtype="<f4", count=n * k, offset=off)
        alphas.append(block.astype(np.float64).reshape(n, k))
        off += block.nbytes
    return alphas, neighbors.astype(np.int32)


def encoder_stack(state: LayerState, params: StackParams, training=False, stream=None,
                  use_bridge=True, symmetric_edges=False, collect_states=False):
    """Run every layer; returns (state, alphas) or (state, alphas, h_trace)."""
    alphas = []
    trace = [state.h.data.copy()] if collect_states else None
    if symmetric_edges and params.depth > 0:
        state = LayerState(state.h, symmetrize_edges(state.e, state.neighbors),
                           state.neighbors, state.layer_index)
    for layer in params.layers:
        state, alpha = encoder_layer(state, layer, training=training, stream=stream,
                                     use_bridge=use_bridge, symmetric_edges=symmetric_edges)
        alphas.append(alpha)
        if collect_states:
            trace.append(state.h.data.copy())
    if params.final_norm is not None:
        state = LayerState(params.final_norm(state.h), state.e, state.neighbors,
                           state.layer_index)
    if collect_states:
        return state, alphas, trace
    return state, alphas
