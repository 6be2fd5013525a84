"""GIN / PNA message passing and the hierarchical cell-to-tissue network.

Graphs in a mini-batch are processed as one disjoint union: node rows of all
graphs are stacked, edges are offset, and per-graph quantities (GraphNorm
scale, readout) use a node-to-graph index.  BatchNorm therefore sees every
node of every graph in the batch.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy import sparse

from .graph_build import EntityGraph, HactGraph
from .nn_core import (
    BatchNormState,
    LstmParams,
    MlpParams,
    Params,
    ShapeError,
    batch_norm,
    batch_norm_backward,
    graph_norm,
    lstm_sequence,
    lstm_sequence_backward,
    mlp_backward,
    mlp_forward,
    prefixed,
    softmax_cross_entropy,
)

STD_EPS = 1e-8
N_AGGREGATORS = 4
N_SCALERS = 3
PNA_BLOCKS = N_AGGREGATORS * N_SCALERS


class DegenerateDeltaError(ValueError):
    pass


# ------------------------------------------------------------------------- delta


@dataclass
class DeltaStats:
    delta: float
    sample_count: int


def compute_delta(graphs: Sequence[EntityGraph]) -> DeltaStats:
    """Mean of ``log(degree + 1)`` over every node of ``graphs``."""
    logs = [np.log(g.degrees() + 1.0) for g in graphs]
    total = sum(x.size for x in logs)
    if total == 0:
        raise ValueError("delta needs at least one node")
    delta = float(np.concatenate(logs).sum() / total)
    if delta <= 0:
        raise DegenerateDeltaError("every node is isolated; degree scalers are undefined")
    return DeltaStats(delta, total)


# --------------------------------------------------------------------- structure


class Neighborhood:
    """Directed (both-way) edge lists sorted by destination, plus sparse operators."""

    def __init__(self, edges: np.ndarray, n: int):
        e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        src = np.concatenate([e[:, 0], e[:, 1]])
        dst = np.concatenate([e[:, 1], e[:, 0]])
        order = np.lexsort((src, dst))
        self.n = n
        self.src = src[order]
        self.dst = dst[order]
        self.deg = np.bincount(self.dst, minlength=n)
        offsets = np.concatenate([[0], np.cumsum(self.deg)[:-1]]) if n else np.zeros(0, dtype=np.int64)
        self.has = self.deg > 0
        self.starts = offsets[self.has]
        ne = self.src.size
        ones = np.ones(ne)
        # gather-by-destination (n x E) and scatter-to-source (n x E)
        self.to_dst = sparse.csr_matrix((ones, (self.dst, np.arange(ne))), shape=(n, ne))
        self.to_src = sparse.csr_matrix((ones, (self.src, np.arange(ne))), shape=(n, ne))
        self.adj = sparse.csr_matrix((ones, (self.dst, self.src)), shape=(n, n))

    @property
    def edge_count(self) -> int:
        return self.src.size


@dataclass
class LevelBatch:
    x: np.ndarray
    nbr: Neighborhood
    graph_index: np.ndarray
    counts_row: np.ndarray
    readout: sparse.csr_matrix  # G x N
    n_graphs: int


def _level(graphs: Sequence[EntityGraph]) -> LevelBatch:
    xs, edges, gidx = [], [], []
    offset = 0
    for i, g in enumerate(graphs):
        xs.append(g.features)
        edges.append(g.edges + offset)
        gidx.append(np.full(g.node_count, i, dtype=np.int64))
        offset += g.node_count
    d = graphs[0].feature_dim if graphs else 0
    x = np.concatenate(xs, axis=0) if xs else np.zeros((0, d))
    gidx = np.concatenate(gidx) if gidx else np.zeros(0, dtype=np.int64)
    counts = np.bincount(gidx, minlength=len(graphs))
    readout = sparse.csr_matrix((np.ones(offset), (gidx, np.arange(offset))), shape=(len(graphs), offset))
    return LevelBatch(
        x=x,
        nbr=Neighborhood(np.concatenate(edges, axis=0) if edges else np.zeros((0, 2)), offset),
        graph_index=gidx,
        counts_row=counts[gidx].astype(np.float64),
        readout=readout,
        n_graphs=len(graphs),
    )


@dataclass
class HactBatch:
    cell: LevelBatch
    tissue: LevelBatch
    assignment: sparse.csr_matrix  # N_cell x N_tissue

    @property
    def n_graphs(self) -> int:
        return self.cell.n_graphs


def collate(graphs: Sequence[HactGraph]) -> HactBatch:
    if not graphs:
        raise ValueError("cannot collate an empty batch")
    cell = _level([g.cell_graph for g in graphs])
    tissue = _level([g.tissue_graph for g in graphs])
    assign = sparse.block_diag([sparse.csr_matrix(g.assignment.astype(np.float64)) for g in graphs], format="csr")
    assign = sparse.csr_matrix(assign, shape=(cell.x.shape[0], tissue.x.shape[0]))
    return HactBatch(cell, tissue, assign)


# ------------------------------------------------------------------- aggregation


def degree_scalers(deg: np.ndarray, delta: float) -> tuple[np.ndarray, np.ndarray]:
    """Amplification ``log(d+1)/delta`` and attenuation ``delta/log(d+1)``; 0 for isolated nodes."""
    if delta <= 0:
        raise DegenerateDeltaError("delta must be positive")
    logd = np.log(np.asarray(deg, dtype=np.float64) + 1.0)
    amp = logd / delta
    att = np.divide(delta, logd, out=np.zeros_like(logd), where=logd > 0)
    return amp, att


def _segment_extreme(values: np.ndarray, nbr: Neighborhood, ufunc) -> np.ndarray:
    out = np.zeros((nbr.n, values.shape[1]))
    if nbr.edge_count:
        out[nbr.has] = ufunc.reduceat(values, nbr.starts, axis=0)
    return out


def pna_aggregate(h: np.ndarray, nbr: Neighborhood, delta: float):
    """Mean/std/max/min of neighbor rows, each times (1, amplify, attenuate).

    Output blocks are aggregator-major: ``[mean*1, mean*amp, mean*att, std*1, ...]``.
    Isolated nodes get all-zero blocks.
    """
    n, d = h.shape
    amp, att = degree_scalers(nbr.deg, delta)
    if nbr.edge_count == 0:
        return np.zeros((n, PNA_BLOCKS * d)), None
    deg = np.maximum(nbr.deg, 1).astype(np.float64)[:, None]
    g = h[nbr.src]
    mx = _segment_extreme(g, nbr, np.maximum)
    mn = _segment_extreme(g, nbr, np.minimum)
    mean = (nbr.to_dst @ g) / deg
    # a float mean of equal values need not round back to that value; snap it
    # so identical neighbors give exactly zero spread
    mean = np.where(mx == mn, mx, mean)
    diff = g - mean[nbr.dst]
    var = (nbr.to_dst @ (diff * diff)) / deg
    # var / sqrt(var + eps) tracks sqrt(var) once var >> eps, is exactly 0 for
    # identical neighbors, and keeps a finite slope there
    root = np.sqrt(var + STD_EPS)
    std = var / root
    blocks = []
    for agg in (mean, std, mx, mn):
        blocks.extend([agg, agg * amp[:, None], agg * att[:, None]])
    cache = (g, diff, var, root, mx, mn, amp, att, deg)
    return np.concatenate(blocks, axis=1), cache


def pna_aggregate_backward(dout: np.ndarray, nbr: Neighborhood, cache, d: int) -> np.ndarray:
    if cache is None:
        return np.zeros((nbr.n, d))
    g, diff, var, root, mx, mn, amp, att, deg = cache
    parts = [dout[:, i * d : (i + 1) * d] for i in range(PNA_BLOCKS)]
    dagg = [parts[3 * a] + parts[3 * a + 1] * amp[:, None] + parts[3 * a + 2] * att[:, None] for a in range(4)]
    d_mean, d_std, d_max, d_min = dagg
    dst = nbr.dst
    dg = d_mean[dst] / deg[dst]
    dvar = d_std * (var + 2.0 * STD_EPS) / (2.0 * root**3)
    dg += dvar[dst] * 2.0 * diff / deg[dst]
    for dext, ext in ((d_max, mx), (d_min, mn)):
        hit = (g == ext[dst]).astype(np.float64)
        ties = nbr.to_dst @ hit
        dg += hit * dext[dst] / np.maximum(ties[dst], 1.0)
    return nbr.to_src @ dg


def gin_aggregate(h: np.ndarray, nbr: Neighborhood, eps: float = 0.0) -> np.ndarray:
    return (1.0 + eps) * h + nbr.adj @ h


def tissue_init(h_tg_raw: np.ndarray, cell_jk: np.ndarray, assignment) -> np.ndarray:
    """Concatenate raw tissue features with the sum of each region's assigned cell embeddings."""
    a = assignment
    if a.shape != (cell_jk.shape[0], h_tg_raw.shape[0]):
        raise ShapeError(
            f"assignment shape {a.shape} does not match {cell_jk.shape[0]} cells x {h_tg_raw.shape[0]} regions"
        )
    pooled = a.T @ cell_jk
    return np.concatenate([h_tg_raw, np.asarray(pooled)], axis=1)


def readout_sum(h: np.ndarray) -> np.ndarray:
    if h.shape[0] == 0:
        raise ValueError("readout of an empty graph")
    return h.sum(axis=0)


# ------------------------------------------------------------------------ layers


class GnnLayer:
    """One PNA or GIN message-passing layer followed by GraphNorm and BatchNorm."""

    def __init__(self, kind: str, d_in: int, hidden: int, mlp_layers: int, rng: np.random.Generator, gin_eps: float = 0.0):
        if kind not in ("pna", "gin"):
            raise ValueError(f"unknown layer type {kind!r}")
        self.kind = kind
        self.d_in = d_in
        self.gin_eps = gin_eps
        mlp_in = (1 + PNA_BLOCKS) * d_in if kind == "pna" else d_in
        self.mlp = MlpParams.init([mlp_in] + [hidden] * mlp_layers, rng)
        self.bn = BatchNormState.init(hidden)

    def params(self) -> Params:
        return {**prefixed("mlp", self.mlp.named()), **prefixed("bn", self.bn.named())}

    def buffers(self) -> Params:
        return prefixed("bn", self.bn.buffers())

    def forward(self, h: np.ndarray, nbr: Neighborhood, counts_row, delta: float | None, mode: str, update_stats: bool = True):
        if h.shape[1] != self.d_in:
            raise ShapeError(f"layer expects {self.d_in} input features, got {h.shape[1]}")
        if self.kind == "pna":
            agg, agg_cache = pna_aggregate(h, nbr, delta)
            z = np.concatenate([h, agg], axis=1)
        else:
            agg_cache = None
            z = gin_aggregate(h, nbr, self.gin_eps)
        y, mlp_cache = mlp_forward(self.mlp, z)
        y = graph_norm(y, counts_row)
        out, bn_cache = batch_norm(y, self.bn, mode, update_stats)
        return out, (nbr, counts_row, agg_cache, mlp_cache, bn_cache)

    def backward(self, dout: np.ndarray, cache):
        nbr, counts_row, agg_cache, mlp_cache, bn_cache = cache
        dy, g_bn = batch_norm_backward(dout, self.bn, bn_cache)
        dy = graph_norm(dy, counts_row)
        dz, g_mlp = mlp_backward(self.mlp, dy, mlp_cache)
        if self.kind == "pna":
            d = self.d_in
            dh = dz[:, :d] + pna_aggregate_backward(dz[:, d:], nbr, agg_cache, d)
        else:
            dh = (1.0 + self.gin_eps) * dz + nbr.adj.T @ dz
        return dh, {**prefixed("mlp", g_mlp), **prefixed("bn", g_bn)}


def pna_layer(layer: GnnLayer, graph: EntityGraph, h: np.ndarray, delta: float, mode: str = "eval") -> np.ndarray:
    nbr = Neighborhood(graph.edges, graph.node_count)
    out, _ = layer.forward(h, nbr, float(max(graph.node_count, 1)), delta, mode)
    return out


def gin_layer(layer: GnnLayer, graph: EntityGraph, h: np.ndarray, mode: str = "eval") -> np.ndarray:
    nbr = Neighborhood(graph.edges, graph.node_count)
    out, _ = layer.forward(h, nbr, float(max(graph.node_count, 1)), None, mode)
    return out


# ------------------------------------------------------------- jumping knowledge


def jumping_knowledge(mode: str, per_layer: Sequence[np.ndarray], lstm: LstmParams | None = None):
    if not per_layer:
        raise ValueError("jumping knowledge needs at least one layer output")
    n = per_layer[0].shape[0]
    if any(x.shape[0] != n for x in per_layer):
        raise ShapeError("layer outputs disagree on node count")
    if (mode == "lstm") != (lstm is not None):
        raise ValueError("LSTM parameters are required for, and only for, mode='lstm'")
    if mode == "none":
        return per_layer[-1], None
    if mode == "concat":
        return np.concatenate(per_layer, axis=1), None
    if mode == "lstm":
        return lstm_sequence(lstm, per_layer)
    raise ValueError(f"unknown jumping knowledge mode {mode!r}")


def jumping_knowledge_backward(mode: str, dout: np.ndarray, per_layer_shapes, lstm: LstmParams | None, cache):
    if mode == "none":
        return [np.zeros(s) for s in per_layer_shapes[:-1]] + [dout], {}
    if mode == "concat":
        outs, start = [], 0
        for s in per_layer_shapes:
            outs.append(dout[:, start : start + s[1]])
            start += s[1]
        return outs, {}
    return lstm_sequence_backward(lstm, dout, cache)


# -------------------------------------------------------------------------- model


@dataclass
class ModelConfig:
    model: str = "hact"  # hact | cg | tg
    layer_type: str = "pna"  # pna | gin
    n_layers_cg: int = 3
    n_layers_tg: int = 3
    hidden_dim: int = 64
    mlp_layers: int = 2
    jk: str = "lstm"  # none | concat | lstm
    embedding_dim: int = 128
    classifier_hidden: int = 128
    classifier_layers: int = 2
    gin_eps: float = 0.0

    def validate(self) -> None:
        if self.model not in ("hact", "cg", "tg"):
            raise ValueError(f"unknown model {self.model!r}")
        if self.layer_type not in ("pna", "gin"):
            raise ValueError(f"unknown layer type {self.layer_type!r}")
        if self.jk not in ("none", "concat", "lstm"):
            raise ValueError(f"unknown jumping knowledge mode {self.jk!r}")
        if min(self.n_layers_cg, self.n_layers_tg) < 1 or self.mlp_layers < 1 or self.classifier_layers < 1:
            raise ValueError("layer counts must be positive")

    def to_json(self) -> dict:
        return asdict(self)


class _Branch:
    """Stack of message-passing layers plus jumping knowledge for one hierarchy level."""

    def __init__(self, cfg: ModelConfig, d_in: int, n_layers: int, rng: np.random.Generator):
        self.cfg = cfg
        self.layers = []
        d = d_in
        for _ in range(n_layers):
            self.layers.append(GnnLayer(cfg.layer_type, d, cfg.hidden_dim, cfg.mlp_layers, rng, cfg.gin_eps))
            d = cfg.hidden_dim
        self.lstm = LstmParams.init(cfg.hidden_dim, cfg.hidden_dim, rng) if cfg.jk == "lstm" else None

    @property
    def out_dim(self) -> int:
        if self.cfg.jk == "concat":
            return self.cfg.hidden_dim * len(self.layers)
        return self.cfg.hidden_dim

    def params(self) -> Params:
        out: Params = {}
        for i, layer in enumerate(self.layers):
            out.update(prefixed(f"layer{i}", layer.params()))
        if self.lstm is not None:
            out.update(prefixed("jk", self.lstm.named()))
        return out

    def buffers(self) -> Params:
        out: Params = {}
        for i, layer in enumerate(self.layers):
            out.update(prefixed(f"layer{i}", layer.buffers()))
        return out

    def forward(self, x, level: LevelBatch, delta, mode, update_stats):
        h = x
        outs, caches = [], []
        for layer in self.layers:
            h, c = layer.forward(h, level.nbr, level.counts_row, delta, mode, update_stats)
            outs.append(h)
            caches.append(c)
        jk, jk_cache = jumping_knowledge(self.cfg.jk, outs, self.lstm)
        return jk, (caches, [o.shape for o in outs], jk_cache)

    def backward(self, djk, cache):
        caches, shapes, jk_cache = cache
        douts, grads = jumping_knowledge_backward(self.cfg.jk, djk, shapes, self.lstm, jk_cache)
        grads = prefixed("jk", grads) if grads else {}
        dh = None
        for i in range(len(self.layers) - 1, -1, -1):
            g = douts[i] if dh is None else douts[i] + dh
            dh, lg = self.layers[i].backward(g, caches[i])
            grads.update(prefixed(f"layer{i}", lg))
        return dh, grads


class HactNet:
    """Cell GNN -> JK -> tissue init -> tissue GNN -> JK -> sum readout -> projection -> MLP classifier.

    ``model='cg'`` and ``model='tg'`` keep a single branch (the cell-only and
    tissue-only baselines).
    """

    def __init__(
        self,
        cfg: ModelConfig,
        d_cell: int,
        d_tissue: int,
        n_classes: int,
        delta_cell: float | None = None,
        delta_tissue: float | None = None,
        seed: int = 0,
    ):
        cfg.validate()
        if cfg.layer_type == "pna":
            for name, dlt, used in (("cell", delta_cell, cfg.model != "tg"), ("tissue", delta_tissue, cfg.model != "cg")):
                if used and (dlt is None or dlt <= 0):
                    raise DegenerateDeltaError(f"PNA needs a positive {name} delta")
        self.cfg = cfg
        self.d_cell = d_cell
        self.d_tissue = d_tissue
        self.n_classes = n_classes
        self.delta_cell = delta_cell
        self.delta_tissue = delta_tissue
        rng = np.random.default_rng(seed)
        self.cg = _Branch(cfg, d_cell, cfg.n_layers_cg, rng) if cfg.model in ("hact", "cg") else None
        if cfg.model == "hact":
            self.tg = _Branch(cfg, d_tissue + self.cg.out_dim, cfg.n_layers_tg, rng)
        elif cfg.model == "tg":
            self.tg = _Branch(cfg, d_tissue, cfg.n_layers_tg, rng)
        else:
            self.tg = None
        top = self.tg if self.tg is not None else self.cg
        self.proj = MlpParams.init([top.out_dim, cfg.embedding_dim], rng)
        self.classifier = MlpParams.init(
            [cfg.embedding_dim] + [cfg.classifier_hidden] * (cfg.classifier_layers - 1) + [n_classes], rng
        )
        self._params = self._collect_params()
        self._buffers = self._collect_buffers()

    # parameters are exposed as a flat, stable-ordered name -> array map
    def _collect_params(self) -> Params:
        out: Params = {}
        if self.cg is not None:
            out.update(prefixed("cg", self.cg.params()))
        if self.tg is not None:
            out.update(prefixed("tg", self.tg.params()))
        out.update(prefixed("proj", self.proj.named()))
        out.update(prefixed("cls", self.classifier.named()))
        return out

    def _collect_buffers(self) -> Params:
        out: Params = {}
        if self.cg is not None:
            out.update(prefixed("cg", self.cg.buffers()))
        if self.tg is not None:
            out.update(prefixed("tg", self.tg.buffers()))
        return out

    @property
    def params(self) -> Params:
        return self._params

    @property
    def buffers(self) -> Params:
        return self._buffers

    def header(self) -> dict:
        return {
            "config": self.cfg.to_json(),
            "d_cell": self.d_cell,
            "d_tissue": self.d_tissue,
            "n_classes": self.n_classes,
            "delta_cell": self.delta_cell,
            "delta_tissue": self.delta_tissue,
        }

    @classmethod
    def from_header(cls, header: dict) -> "HactNet":
        return cls(
            ModelConfig(**header["config"]),
            header["d_cell"],
            header["d_tissue"],
            header["n_classes"],
            header["delta_cell"],
            header["delta_tissue"],
        )

    def _check_dims(self, batch: HactBatch) -> None:
        if self.cg is not None and batch.cell.x.shape[1] != self.d_cell:
            raise ShapeError(f"cell features have width {batch.cell.x.shape[1]}, model expects {self.d_cell}")
        if self.tg is not None and batch.tissue.x.shape[1] != self.d_tissue:
            raise ShapeError(f"tissue features have width {batch.tissue.x.shape[1]}, model expects {self.d_tissue}")

    def embed(self, batch: HactBatch, mode: str = "eval", update_stats: bool = True):
        """Graph-level embeddings (G x embedding_dim) and the cache for backward."""
        self._check_dims(batch)
        cache: dict = {}
        if self.cg is not None:
            cell_jk, cache["cg"] = self.cg.forward(batch.cell.x, batch.cell, self.delta_cell, mode, update_stats)
        if self.cfg.model == "hact":
            h0 = tissue_init(batch.tissue.x, cell_jk, batch.assignment)
            top, cache["tg"] = self.tg.forward(h0, batch.tissue, self.delta_tissue, mode, update_stats)
            level = batch.tissue
        elif self.cfg.model == "tg":
            top, cache["tg"] = self.tg.forward(batch.tissue.x, batch.tissue, self.delta_tissue, mode, update_stats)
            level = batch.tissue
        else:
            top, level = cell_jk, batch.cell
        pooled = np.asarray(level.readout @ top)
        emb, cache["proj"] = mlp_forward(self.proj, pooled)
        cache["level"] = level
        cache["assignment"] = batch.assignment
        return emb, cache

    def forward(self, batch: HactBatch, mode: str = "eval", update_stats: bool = True):
        emb, cache = self.embed(batch, mode, update_stats)
        logits, cache["cls"] = mlp_forward(self.classifier, emb)
        return logits, cache

    def backward(self, dlogits: np.ndarray, cache) -> Params:
        grads: Params = {}
        demb, g = mlp_backward(self.classifier, dlogits, cache["cls"])
        grads.update(prefixed("cls", g))
        dpooled, g = mlp_backward(self.proj, demb, cache["proj"])
        grads.update(prefixed("proj", g))
        dtop = np.asarray(cache["level"].readout.T @ dpooled)
        if self.cfg.model == "cg":
            _, g = self.cg.backward(dtop, cache["cg"])
            grads.update(prefixed("cg", g))
            return grads
        dh0, g = self.tg.backward(dtop, cache["tg"])
        grads.update(prefixed("tg", g))
        if self.cfg.model == "hact":
            dcell_jk = np.asarray(cache["assignment"] @ dh0[:, self.d_tissue :])
            _, g = self.cg.backward(dcell_jk, cache["cg"])
            grads.update(prefixed("cg", g))
        return grads

    def loss_and_grads(self, batch: HactBatch, labels, mode: str = "train", update_stats: bool = True):
        labels = np.asarray(labels, dtype=np.int64)
        if labels.size and labels.max() >= self.n_classes:
            raise ValueError(f"label {labels.max()} >= class count {self.n_classes}")
        logits, cache = self.forward(batch, mode, update_stats)
        loss, dlogits = softmax_cross_entropy(logits, labels)
        return loss, self.backward(dlogits, cache), logits

    def predict_logits(self, graphs: Sequence[HactGraph]) -> np.ndarray:
        logits, _ = self.forward(collate(graphs), "eval")
        return logits


def hactnet_forward(net: HactNet, g: HactGraph) -> np.ndarray:
    """Eval-mode logits (length C) of a single graph."""
    return net.predict_logits([g])[0]
