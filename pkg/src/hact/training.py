"""Mini-batch training with best-validation selection, evaluation and seed repeats."""

from __future__ import annotations

import copy
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .checkpoint import Checkpoint
from .config import HactConfig
from .gnn import HactNet, collate, compute_delta
from .graph_build import FeatureStats, HactGraph
from .metrics import Metrics, metrics_from_predictions
from .nn_core import AdamState, adam_step, gradcheck

EVAL_CHUNK = 64


class DataError(ValueError):
    pass


def check_feature_dims(graphs: Sequence[HactGraph], d_cell: int | None = None, d_tissue: int | None = None) -> tuple[int, int]:
    if not graphs:
        raise DataError("no graphs")
    dc = d_cell if d_cell is not None else graphs[0].cell_graph.feature_dim
    dt = d_tissue if d_tissue is not None else graphs[0].tissue_graph.feature_dim
    for i, g in enumerate(graphs):
        if g.cell_graph.feature_dim != dc or g.tissue_graph.feature_dim != dt:
            raise DataError(
                f"graph {i} has feature widths (cell {g.cell_graph.feature_dim}, tissue {g.tissue_graph.feature_dim}), "
                f"expected (cell {dc}, tissue {dt})"
            )
    return dc, dt


def make_batches(order: np.ndarray, batch_size: int) -> list[np.ndarray]:
    """Consecutive slices of ``order``; a trailing singleton joins the previous batch.

    A one-graph batch may hold a single tissue node, on which batch
    statistics are undefined.
    """
    batches = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        last = batches.pop()
        batches[-1] = np.concatenate([batches[-1], last])
    return batches


def train_step(net: HactNet, opt: AdamState, graphs: Sequence[HactGraph], labels) -> float:
    """One Adam step on the mean cross-entropy of ``graphs``; returns the loss."""
    loss, grads, _ = net.loss_and_grads(collate(graphs), labels, mode="train", update_stats=True)
    adam_step(opt, net.params, grads)
    return loss


def predict(net: HactNet, graphs: Sequence[HactGraph]) -> np.ndarray:
    """Eval-mode logits for ``graphs``, evaluated in fixed-size chunks."""
    out = [net.predict_logits(graphs[i : i + EVAL_CHUNK]) for i in range(0, len(graphs), EVAL_CHUNK)]
    return np.concatenate(out, axis=0)


def evaluate_net(net: HactNet, graphs, labels, class_names=None) -> Metrics:
    pred = predict(net, graphs).argmax(axis=1)
    return metrics_from_predictions(labels, pred, net.n_classes, class_names)


# ------------------------------------------------------------------ checkpoints


def _copy(params: dict) -> dict:
    return {k: v.copy() for k, v in params.items()}


@dataclass
class TrainState:
    net: HactNet
    opt: AdamState
    rng: np.random.Generator
    config: HactConfig
    class_names: list[str]
    stats: FeatureStats | None
    epoch: int = 0  # epochs completed
    log: list[dict] = field(default_factory=list)
    best_val_f1: float = -1.0
    best_epoch: int = -1
    best_params: dict = field(default_factory=dict)
    best_buffers: dict = field(default_factory=dict)

    def _header(self) -> dict:
        return {
            "net": self.net.header(),
            "config": self.config.to_json(),
            "class_names": list(self.class_names),
            "feature_stats": self.stats.to_json() if self.stats is not None else None,
            "epoch": self.epoch,
            "log": self.log,
            "best_val_f1": self.best_val_f1,
            "best_epoch": self.best_epoch,
            "rng_state": self.rng.bit_generator.state,
            "adam": {k: getattr(self.opt, k) for k in ("lr", "beta1", "beta2", "eps", "step")},
        }

    def to_checkpoint(self) -> Checkpoint:
        """Full resumable state; ``param``/``buffer`` hold the current weights."""
        tensors = {}
        for group, src in (
            ("param", self.net.params),
            ("buffer", self.net.buffers),
            ("adam_m", self.opt.m),
            ("adam_v", self.opt.v),
            ("best_param", self.best_params),
            ("best_buffer", self.best_buffers),
        ):
            tensors.update({f"{group}/{k}": v for k, v in src.items()})
        return Checkpoint(self._header(), tensors)

    def best_checkpoint(self) -> Checkpoint:
        """Inference checkpoint whose weights are the best-validation ones."""
        header = self._header()
        header.pop("rng_state")
        header.pop("adam")
        tensors = {f"param/{k}": v for k, v in self.best_params.items()}
        tensors.update({f"buffer/{k}": v for k, v in self.best_buffers.items()})
        return Checkpoint(header, tensors)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "TrainState":
        h = ckpt.header
        net = net_from_checkpoint(ckpt)
        adam = h["adam"]
        opt = AdamState(adam["lr"], adam["beta1"], adam["beta2"], adam["eps"], adam["step"], ckpt.group("adam_m"), ckpt.group("adam_v"))
        rng = np.random.default_rng()
        rng.bit_generator.state = h["rng_state"]
        return cls(
            net=net,
            opt=opt,
            rng=rng,
            config=HactConfig.from_json(h["config"]),
            class_names=h["class_names"],
            stats=FeatureStats.from_json(h["feature_stats"]) if h["feature_stats"] is not None else None,
            epoch=h["epoch"],
            log=h["log"],
            best_val_f1=h["best_val_f1"],
            best_epoch=h["best_epoch"],
            best_params=ckpt.group("best_param"),
            best_buffers=ckpt.group("best_buffer"),
        )


def net_from_checkpoint(ckpt: Checkpoint) -> HactNet:
    net = HactNet.from_header(ckpt.header["net"])
    for group, target in (("param", net.params), ("buffer", net.buffers)):
        stored = ckpt.group(group)
        if set(stored) != set(target):
            raise ValueError(f"checkpoint {group} names do not match the model architecture")
        for k, v in stored.items():
            if v.shape != target[k].shape:
                raise ValueError(f"checkpoint tensor {k!r} has shape {v.shape}, model expects {target[k].shape}")
            target[k][...] = v
    return net


# ----------------------------------------------------------------------- training


@dataclass
class TrainResult:
    state: TrainState
    
    @property
    def log(self) -> list[dict]:
        return self.state.log


def _standardize(graphs, stats):
    return [stats.apply(g) for g in graphs] if stats is not None else list(graphs)


def init_state(train_graphs, train_labels, config: HactConfig, class_names) -> TrainState:
    config.validate()
    d_cell, d_tissue = check_feature_dims(train_graphs)
    n_classes = len(class_names)
    if max(train_labels) >= n_classes or min(train_labels) < 0:
        raise DataError(f"labels must lie in 0..{n_classes - 1}")
    stats = FeatureStats.fit(list(train_graphs)) if config.standardize_features else None
    mc = config.model_config()
    delta_cell = delta_tissue = None
    if mc.layer_type == "pna":
        if mc.model != "tg":
            delta_cell = compute_delta([g.cell_graph for g in train_graphs]).delta
        if mc.model != "cg":
            delta_tissue = compute_delta([g.tissue_graph for g in train_graphs]).delta
    net = HactNet(mc, d_cell, d_tissue, n_classes, delta_cell, delta_tissue, seed=config.seed)
    opt = AdamState(config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_eps)
    return TrainState(net, opt, np.random.default_rng(config.seed), config, list(class_names), stats)


def train(
    train_graphs: Sequence[HactGraph],
    train_labels: Sequence[int],
    val_graphs: Sequence[HactGraph],
    val_labels: Sequence[int],
    config: HactConfig,
    class_names: Sequence[str],
    out_dir=None,
    resume: Checkpoint | None = None,
    stop_after: int | None = None,
    log_fn: Callable[[str], None] | None = None,
) -> TrainResult:
    """Train for ``config.epochs`` epochs, keeping the weights with the best validation weighted F1.

    With ``out_dir`` the full state is written to ``last.ckpt`` after every
    epoch and the selected weights to ``best.ckpt``.  ``resume`` continues
    from such a ``last.ckpt``; ``stop_after`` ends the run early after that
    many total epochs (used to simulate an interruption).
    """
    if not train_graphs or not val_graphs:
        raise DataError("training and validation splits must be nonempty")
    if resume is not None:
        state = TrainState.from_checkpoint(resume)
        check_feature_dims(train_graphs, state.net.d_cell, state.net.d_tissue)
    else:
        state = init_state(train_graphs, train_labels, config, class_names)
    check_feature_dims(val_graphs, state.net.d_cell, state.net.d_tissue)
    cfg = state.config
    tr = _standardize(train_graphs, state.stats)
    va = _standardize(val_graphs, state.stats)
    y_tr = np.asarray(train_labels, dtype=np.int64)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    last_epoch = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)

    while state.epoch < last_epoch:
        order = state.rng.permutation(len(tr))
        losses, sizes = [], []
        for idx in make_batches(order, cfg.batch_size):
            losses.append(train_step(state.net, state.opt, [tr[i] for i in idx], y_tr[idx]))
            sizes.append(len(idx))
        state.epoch += 1
        val = evaluate_net(state.net, va, val_labels, state.class_names)
        entry = {
            "epoch": state.epoch,
            "train_loss": float(np.average(losses, weights=sizes)),
            "val_weighted_f1": val.weighted_f1,
            "val_accuracy": val.accuracy,
        }
        state.log.append(entry)
        if val.weighted_f1 > state.best_val_f1:
            state.best_val_f1 = val.weighted_f1
            state.best_epoch = state.epoch
            state.best_params = _copy(state.net.params)
            state.best_buffers = _copy(state.net.buffers)
        if log_fn is not None:
            log_fn(
                f"epoch {state.epoch:3d}  loss {entry['train_loss']:.4f}  "
                f"val wF1 {val.weighted_f1:.4f}  val acc {val.accuracy:.4f}"
            )
        if out is not None:
            state.to_checkpoint().save(out / "last.ckpt")

    if state.epoch == 0:
        # zero-epoch budget: the initial weights are the only candidate
        state.best_params = _copy(state.net.params)
        state.best_buffers = _copy(state.net.buffers)
    if out is not None and state.epoch == cfg.epochs:
        state.best_checkpoint().save(out / "best.ckpt")
    return TrainResult(state)


# --------------------------------------------------------------------- evaluation


def load_model(ckpt: Checkpoint) -> tuple[HactNet, FeatureStats | None, list[str]]:
    net = net_from_checkpoint(ckpt)
    stats_obj = ckpt.header.get("feature_stats")
    stats = FeatureStats.from_json(stats_obj) if stats_obj is not None else None
    return net, stats, list(ckpt.header.get("class_names") or [])


def evaluate(ckpt: Checkpoint, graphs: Sequence[HactGraph], labels: Sequence[int]) -> Metrics:
    net, stats, names = load_model(ckpt)
    check_feature_dims(graphs, net.d_cell, net.d_tissue)
    return evaluate_net(net, _standardize(graphs, stats), labels, names or None)


def best_net(result: TrainResult) -> HactNet:
    return net_from_checkpoint(result.state.best_checkpoint())


@dataclass
class SeedSummary:
    seeds: list[int]
    test_weighted_f1: list[float]
    test_accuracy: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.test_weighted_f1))

    @property
    def std(self) -> float:
        return float(np.std(self.test_weighted_f1))

    def to_json(self) -> dict:
        return {
            "seeds": self.seeds,
            "test_weighted_f1": self.test_weighted_f1,
            "test_accuracy": self.test_accuracy,
            "mean_weighted_f1": self.mean,
            "std_weighted_f1": self.std,
        }


def repeat_with_seeds(
    seeds: Sequence[int],
    train_data: tuple[Sequence[HactGraph], Sequence[int]],
    val_data: tuple[Sequence[HactGraph], Sequence[int]],
    test_data: tuple[Sequence[HactGraph], Sequence[int]],
    config: HactConfig,
    class_names: Sequence[str],
    out_dir=None,
    log_fn=None,
) -> SeedSummary:
    """Train once per seed and report test weighted F1 of each best-validation model."""
    f1s, accs = [], []
    for s in seeds:
        cfg = replace(copy.deepcopy(config), seed=int(s))
        run_dir = Path(out_dir) / f"seed{s}" if out_dir is not None else None
        result = train(*train_data, *val_data, cfg, class_names, out_dir=run_dir, log_fn=log_fn)
        m = evaluate(result.state.best_checkpoint(), *test_data)
        f1s.append(m.weighted_f1)
        accs.append(m.accuracy)
    return SeedSummary([int(s) for s in seeds], f1s, accs)


# ---------------------------------------------------------------- gradient check


@dataclass
class GradcheckResult:
    worst: float
    worst_param: str
    per_param: dict[str, float]
    seconds: float


def model_gradcheck(
    graphs: Sequence[HactGraph],
    labels: Sequence[int],
    config: HactConfig,
    n_classes: int,
    max_entries: int | None = 8,
    seed: int = 0,
    mode: str = "train",
) -> GradcheckResult:
    """Finite-difference check of the full loss on one batch of ``graphs``.

    Biases and normalization offsets are drawn away from their zero
    initialization first, so the check runs at a generic parameter point
    rather than at the symmetric one where ReLU inputs can sit on the kink.
    ``mode='eval'`` normalizes with running statistics; use it for single
    graphs, where batch statistics over two or three tissue rows make the
    loss nearly piecewise constant at finite-difference scale.
    """
    start = time.perf_counter()
    state = init_state(graphs, labels, replace(config, standardize_features=False), [str(i) for i in range(n_classes)])
    net = state.net
    rng = np.random.default_rng(seed)
    for name, p in net.params.items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.startswith("b") or leaf in ("beta", "gamma"):
            p += rng.normal(0.0, 0.3, p.shape)
    batch = collate(graphs)
    _, grads, _ = net.loss_and_grads(batch, labels, mode=mode, update_stats=False)
    report: dict[str, float] = {}
    worst = gradcheck(
        lambda: net.loss_and_grads(batch, labels, mode=mode, update_stats=False)[0],
        net.params,
        grads,
        max_entries=max_entries,
        rng=rng,
        report=report,
    )
    return GradcheckResult(worst, max(report, key=report.get), report, time.perf_counter() - start)
