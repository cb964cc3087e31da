"""Node/edge convolution network on dense currency or exchange graphs.

Graphs are held densely: node tensors are ``(B, n, d)`` and edge tensors
``(B, n, n, d)`` where entry ``[b, i, j]`` is the edge ``i -> j``.  A boolean
``edge_mask`` selects the edges that exist.  Each SLP acting on a concatenation
``[a ; e ; c]`` is evaluated blockwise, ``W_a a + W_e e + W_c c + b``, so node
terms are computed once per node rather than once per edge.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable

import numpy as np

from . import autodiff as ad

LEAKY_SLOPE = 0.01
STD_FLOOR = 1e-8


@dataclass
class GraphBatch:
    node_x: np.ndarray  # (B, n, dn)
    edge_x: np.ndarray  # (B, n, n, de)
    node_mask: np.ndarray  # (B, n) bool
    edge_mask: np.ndarray  # (B, n, n) bool

    @property
    def size(self) -> int:
        return self.node_x.shape[0]

    def take(self, idx) -> "GraphBatch":
        return GraphBatch(self.node_x[idx], self.edge_x[idx], self.node_mask[idx], self.edge_mask[idx])


@dataclass
class FeatureScaler:
    node_mean: np.ndarray
    node_std: np.ndarray
    edge_mean: np.ndarray
    edge_std: np.ndarray
    degenerate: tuple = ()

    @classmethod
    def identity(cls, dn: int, de: int) -> "FeatureScaler":
        return cls(np.zeros(dn), np.ones(dn), np.zeros(de), np.ones(de))

    @classmethod
    def fit(cls, batches: Iterable[GraphBatch]) -> "FeatureScaler":
        """Per-dimension mean and standard deviation over present nodes and edges."""
        acc = None
        for b in batches:
            nx = b.node_x[b.node_mask]
            ex = b.edge_x[b.edge_mask]
            part = [len(nx), nx.sum(0), (nx**2).sum(0), len(ex), ex.sum(0), (ex**2).sum(0)]
            acc = part if acc is None else [a + p for a, p in zip(acc, part)]
        if acc is None:
            raise ValueError("no batches to fit a scaler on")
        nn_, ns, nq, ne, es, eq = acc
        nm = ns / max(nn_, 1)
        em = es / max(ne, 1)
        nsd = np.sqrt(np.maximum(nq / max(nn_, 1) - nm**2, 0.0))
        esd = np.sqrt(np.maximum(eq / max(ne, 1) - em**2, 0.0))
        degenerate = tuple(f"node{k}" for k in np.nonzero(nsd < STD_FLOOR)[0]) + tuple(
            f"edge{k}" for k in np.nonzero(esd < STD_FLOOR)[0]
        )
        return cls(nm, nsd, em, esd, degenerate)

    def scale_nodes(self, x):
        return (x - self.node_mean) / np.maximum(self.node_std, STD_FLOOR)

    def scale_edges(self, x):
        return (x - self.edge_mean) / np.maximum(self.edge_std, STD_FLOOR)

    def unscale_nodes(self, z):
        return z * np.maximum(self.node_std, STD_FLOOR) + self.node_mean

    def unscale_edges(self, z):
        return z * np.maximum(self.edge_std, STD_FLOOR) + self.edge_mean


@dataclass
class Slp:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "leaky_relu"


@dataclass
class GnnParams:
    """Weights of ``L`` node/edge convolution layers plus a linear head.

    In ``edge_output`` mode the head reads final edge embeddings; in
    ``node_output`` mode it reads final node embeddings and the last edge
    convolution is omitted since nothing consumes it.
    """

    mode: str
    node_dim: int
    edge_dim: int
    hidden: int
    node_convs: list
    edge_convs: list
    head: Slp
    scaler: FeatureScaler
    target_scale: float = 1.0
    seed: int = 0

    @property
    def layers(self) -> int:
        return len(self.node_convs)

    def tensors(self) -> dict:
        out = {}
        for k, s in enumerate(self.node_convs, 1):
            out[f"node{k}.weight"], out[f"node{k}.bias"] = s.weight, s.bias
        for k, s in enumerate(self.edge_convs, 1):
            out[f"edge{k}.weight"], out[f"edge{k}.bias"] = s.weight, s.bias
        out["head.weight"], out["head.bias"] = self.head.weight, self.head.bias
        return out

    def with_tensors(self, t: dict) -> "GnnParams":
        nodes = [Slp(t[f"node{k}.weight"], t[f"node{k}.bias"]) for k in range(1, len(self.node_convs) + 1)]
        edges = [Slp(t[f"edge{k}.weight"], t[f"edge{k}.bias"]) for k in range(1, len(self.edge_convs) + 1)]
        return replace(self, node_convs=nodes, edge_convs=edges, head=Slp(t["head.weight"], t["head.bias"], "none"))

    def with_target_scale(self, scale: float) -> "GnnParams":
        return replace(self, target_scale=float(scale))

    def count(self) -> int:
        return int(sum(a.size for a in self.tensors().values()))


def _glorot(rng, fan_out: int, fan_in: int) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_out, fan_in))


def layer_shapes(node_dim: int, edge_dim: int, hidden: int, layers: int, mode: str) -> dict:
    """Weight shapes ``(out, in)`` for every SLP, keyed like :meth:`GnnParams.tensors`."""
    if mode not in ("edge_output", "node_output"):
        raise ValueError(f"unknown mode {mode!r}")
    if layers < 1 or hidden < 1:
        raise ValueError("need layers >= 1 and hidden >= 1")
    shapes = {}
    dn, de = node_dim, edge_dim
    n_edge = layers if mode == "edge_output" else layers - 1
    for k in range(1, layers + 1):
        shapes[f"node{k}"] = (hidden, 2 * dn + de)
        dn = hidden
        if k <= n_edge:
            shapes[f"edge{k}"] = (hidden, 2 * dn + de)
            de = hidden
    shapes["head"] = (1, hidden)
    return shapes


def count_params(node_dim: int, edge_dim: int, hidden: int, layers: int, mode: str = "edge_output") -> int:
    """Closed-form parameter count.

    Layer 1 node SLP: ``h(2·dn + de) + h``; layer 1 edge SLP: ``h(2h + de) + h``;
    each later SLP: ``3h² + h``; head: ``h + 1``.  Node-output networks drop the
    last edge SLP.
    """
    h, L = hidden, layers
    n_edge = L if mode == "edge_output" else L - 1
    total = h * (2 * node_dim + edge_dim) + h
    if n_edge >= 1:
        total += h * (2 * h + edge_dim) + h
    total += (L - 1) * (3 * h * h + h)
    total += max(n_edge - 1, 0) * (3 * h * h + h)
    return total + h + 1


def width_for_budget(budget: int, layers: int, node_dim: int, edge_dim: int, mode: str = "edge_output") -> int:
    """Largest hidden width whose network fits in ``budget`` parameters."""
    if count_params(node_dim, edge_dim, 1, layers, mode) > budget:
        raise ValueError(f"budget {budget} below the minimal network size")
    lo, hi = 1, 2
    while count_params(node_dim, edge_dim, hi, layers, mode) <= budget:
        lo, hi = hi, hi * 2
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if count_params(node_dim, edge_dim, mid, layers, mode) <= budget:
            lo = mid
        else:
            hi = mid
    return lo


def init_gnn(
    node_dim: int,
    edge_dim: int,
    hidden: int,
    layers: int,
    mode: str = "edge_output",
    seed: int = 0,
    zero_head: bool = False,
    scaler: FeatureScaler | None = None,
) -> GnnParams:
    """Glorot-uniform weights, zero biases.  ``zero_head`` starts the head at 0."""
    rng = np.random.default_rng(seed)
    shapes = layer_shapes(node_dim, edge_dim, hidden, layers, mode)
    nodes, edges = [], []
    for k in range(1, layers + 1):
        o, i = shapes[f"node{k}"]
        nodes.append(Slp(_glorot(rng, o, i), np.zeros(o)))
        if f"edge{k}" in shapes:
            o, i = shapes[f"edge{k}"]
            edges.append(Slp(_glorot(rng, o, i), np.zeros(o)))
    hw = np.zeros((1, hidden)) if zero_head else _glorot(rng, 1, hidden)
    return GnnParams(
        mode, node_dim, edge_dim, hidden, nodes, edges, Slp(hw, np.zeros(1), "none"),
        scaler or FeatureScaler.identity(node_dim, edge_dim), 1.0, seed,
    )


# ---------------------------------------------------------------- forward

def _pair_conv(n, e, w, b, p_block: int, q_block: int, slope: float, mask=None):
    """Fused ``leaky(W_p n_p + W_e e_pq + W_q n_q + b)`` over all pairs ``(p, q)``.

    ``w`` is laid out ``[block0 | edge | block2]``; ``p_block`` and ``q_block``
    name which outer block (0 or 2) multiplies the node on axis 1 and axis 2.
    With ``mask`` given the result is the masked mean over axis 1, ``(B, n, h)``;
    otherwise the full ``(B, n, n, h)`` edge tensor.  Recorded as one tape op.
    """
    n, e, w, b = ad.as_var(n), ad.as_var(e), ad.as_var(w), ad.as_var(b)
    tape = ad._tape_of(n, e, w, b)
    nv, ev, wv = n.value, e.value, w.value
    B, m, dn = nv.shape
    de = ev.shape[-1]
    h = wv.shape[0]
    cols = {0: slice(0, dn), 2: slice(dn + de, None)}
    wp, wq, we = wv[:, cols[p_block]], wv[:, cols[q_block]], wv[:, dn:dn + de]
    n2 = nv.reshape(-1, dn)
    e2 = ev.reshape(-1, de)
    pre = (e2 @ we.T).reshape(B, m, m, h)
    pre += (n2 @ wp.T).reshape(B, m, 1, h)
    pre += (n2 @ wq.T).reshape(B, 1, m, h)
    pre += b.value
    pos = pre > 0
    # slope < 1, so the leaky activation is an elementwise max
    act = np.maximum(pre, slope * pre) if slope < 1 else np.where(pos, pre, slope * pre)
    del pre
    if mask is not None:
        count = mask.sum(axis=1)
        inv = np.where(count > 0, 1.0 / np.maximum(count, 1), 0.0)
        weight = mask[..., None] * inv[:, None, :, None]
        act *= weight
        out = act.sum(axis=1)
        del act
    else:
        out = act

    def fn(g):
        gpre = g[:, None, :, :] * weight if mask is not None else g.copy()
        deriv = pos.astype(gpre.dtype)
        deriv *= 1.0 - slope
        deriv += slope
        gpre *= deriv
        del deriv
        g2 = gpre.reshape(-1, h)
        gp = gpre.sum(axis=2).reshape(-1, h)
        gq = gpre.sum(axis=1).reshape(-1, h)
        if w.needs_grad:
            gw = np.zeros_like(wv)
            gw[:, dn:dn + de] = g2.T @ e2
            gw[:, cols[p_block]] += gp.T @ n2
            gw[:, cols[q_block]] += gq.T @ n2
            w._accum(gw)
        if b.needs_grad:
            b._accum(gp.sum(axis=0))
        if n.needs_grad:
            n._accum((gp @ wp + gq @ wq).reshape(nv.shape))
        if e.needs_grad:
            e._accum((g2 @ we).reshape(ev.shape))

    return ad._out(out, tape, fn)


def node_conv(n, e, w, b, edge_mask: np.ndarray, slope: float = LEAKY_SLOPE):
    """Mean over in-neighbours ``j`` of ``SLP([n_i ; e_ji ; n_j])``; 0 for an empty neighbourhood.

    Pairs are laid out ``[j, i]``: the sender sits on axis 1 and uses the
    neighbour block, the receiver on axis 2 uses the self block.
    """
    return _pair_conv(n, e, w, b, 2, 0, slope, mask=np.asarray(edge_mask, dtype=bool))


def edge_conv(n, e, w, b, slope: float = LEAKY_SLOPE):
    """``SLP([n_i ; e_ij ; n_j])`` for every edge ``i -> j``."""
    return _pair_conv(n, e, w, b, 0, 2, slope)


def watch(params: GnnParams, tape: ad.Tape | None) -> dict:
    return {k: (tape.watch(v) if tape is not None else ad.Var(v)) for k, v in params.tensors().items()}


def forward(params: GnnParams, batch: GraphBatch, tape: ad.Tape | None = None, leaves: dict | None = None):
    """Scale features, apply ``L`` convolution layers, then the linear head.

    Returns ``(output, leaves)``: per-edge ``(B, n, n)`` scalars in edge mode or
    per-node ``(B, n)`` scalars in node mode, plus the parameter leaves whose
    ``.grad`` fill in after ``tape.backward``.
    """
    if batch.node_x.shape[-1] != params.node_dim or batch.edge_x.shape[-1] != params.edge_dim:
        raise ValueError(
            f"feature widths ({batch.node_x.shape[-1]}, {batch.edge_x.shape[-1]}) "
            f"do not match params ({params.node_dim}, {params.edge_dim})"
        )
    if leaves is None:
        leaves = watch(params, tape)
    n = ad.Var(params.scaler.scale_nodes(batch.node_x))
    e = ad.Var(params.scaler.scale_edges(batch.edge_x))
    for k in range(1, params.layers + 1):
        n = node_conv(n, e, leaves[f"node{k}.weight"], leaves[f"node{k}.bias"], batch.edge_mask)
        if f"edge{k}.weight" in leaves:
            e = edge_conv(n, e, leaves[f"edge{k}.weight"], leaves[f"edge{k}.bias"])
    src = e if params.mode == "edge_output" else n
    out = ad.linear(src, leaves["head.weight"]) + leaves["head.bias"]
    out = ad.reshape(out, out.shape[:-1])
    if params.target_scale != 1.0:
        out = out * params.target_scale
    return out, leaves


def gradients(leaves: dict) -> dict:
    return {k: (v.grad if v.grad is not None else np.zeros_like(v.value)) for k, v in leaves.items()}
