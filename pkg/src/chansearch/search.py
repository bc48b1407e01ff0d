"""Alternating weight / architecture search with epoch-boundary reallocation.

Each step trains the weights on a batch from one half of the training data and
then the architecture parameters on a batch from the other half; gradients are
first-order (weights are held fixed during the architecture step).  At the end
of each epoch Gaussian stages are resized to follow their means.
"""

from __future__ import annotations

import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .cost import DEFAULT_LATENCY_COEFFICIENT, LatencyTable, SearchObjective, expected_network_flops, search_loss
from .data import Augment, Dataset
from .dynalloc import ResizeEvent, epoch_update
from .masking import ChannelOptions, GaussianSelector, GumbelSelector
from .optim import SGD, Adam, clip_grad_norm, cosine_lr
from .supernet import (ArchitectureSpec, ConcreteNet, NetConfig, Supernet, finalize, net_config_from_dict,
                       net_config_to_dict)

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class BudgetExceeded(RuntimeError):
    """The run stopped early on its epoch or wall-clock budget; state was persisted."""

    def __init__(self, message: str, epoch: int, reports=(), events=()):
        super().__init__(message)
        self.epoch = epoch
        self.reports = list(reports)
        self.events = list(events)


class NonFiniteLoss(FloatingPointError):
    def __init__(self, message: str, state: dict):
        super().__init__(message)
        self.state = state


@dataclass
class SearchConfig:
    epochs_search: int = 50
    epochs_train: int = 100
    batch_size: int = 96
    lam: float = 0.0
    seed: int = 0
    w_lr: float = 0.025
    w_momentum: float = 0.9
    w_weight_decay: float = 3e-4
    grad_clip: float = 5.0
    a_lr: float = 0.1
    a_betas: tuple[float, float] = (0.5, 0.999)
    a_weight_decay: float = 0.0
    dropout_end: float = 0.2
    tau_start: float = 5.0
    tau_end: float = 1.0
    warmup_epochs: int = 5
    update_mode: str = "alternating"
    reallocate: bool = True
    latency_coefficient: float = DEFAULT_LATENCY_COEFFICIENT
    latency_table: str | None = None
    budget_seconds: float | None = None
    stop_after_epoch: int | None = None

    def __post_init__(self):
        if self.epochs_search < 1 or self.epochs_train < 0:
            raise ValueError("epochs_search must be >= 1 and epochs_train >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.update_mode not in ("alternating", "simultaneous"):
            raise ValueError(f"update_mode must be alternating or simultaneous; got {self.update_mode!r}")
        if not 0.0 <= self.dropout_end < 1.0:
            raise ValueError("dropout_end must be in [0, 1)")
        self.a_betas = tuple(self.a_betas)

    def temperature(self, epoch: int) -> float:
        if self.epochs_search == 1:
            return self.tau_end
        return self.tau_start + (self.tau_end - self.tau_start) * epoch / (self.epochs_search - 1)


@dataclass
class EpochReport:
    epoch: int
    train_loss: float
    search_loss: float
    expected_flops: float
    stage_state: list[float]
    stage_fmax: list[int]
    events: list[dict]
    param_count: int
    tau: float
    dropout: float
    lr: float
    arch_active: bool
    seconds: float = 0.0
    alphas: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SearchResult:
    spec: ArchitectureSpec
    reports: list[EpochReport]
    events: list[ResizeEvent]
    net: Supernet
    initial_param_count: int

    @property
    def peak_param_count(self) -> int:
        return max([self.initial_param_count] + [r.param_count for r in self.reports])


def split_dataset(train_set: Dataset, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded shuffle into two disjoint halves (the first gets the odd sample)."""
    n = len(train_set)
    if n < 2:
        raise ValueError(f"need at least 2 samples to split; got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    half = (n + 1) // 2
    return train_set.subset(np.sort(perm[:half])), train_set.subset(np.sort(perm[half:]))


def make_optimizers(net: Supernet, cfg: SearchConfig) -> tuple[SGD, Adam]:
    opt_w = SGD(net.weight_params(), cfg.w_lr, cfg.w_momentum, cfg.w_weight_decay)
    opt_a = Adam(net.arch_params(), cfg.a_lr, cfg.a_betas, weight_decay=cfg.a_weight_decay)
    return opt_w, opt_a


def _check_finite(loss: T.Tensor, net: Supernet, objective: SearchObjective, where: str) -> None:
    if np.isfinite(loss.data).all():
        return
    state = {"where": where, "loss": repr(float(loss.data)), "components": objective.components,
             "stage_state": net.stage_state(), "stage_fmax": [s.F_max for s in net.stages],
             "max_abs_weight": {p.name: float(np.nanmax(np.abs(p.data))) for p in net.weight_params()}}
    raise NonFiniteLoss(f"non-finite loss in {where} step", state)


def _clamp_means(net: Supernet) -> None:
    for st in net.gaussian_stages():
        st.selector.clamp(st.F_max)


def search_step(net: Supernet, b_t: Dataset, b_s: Dataset, opt_w: SGD, opt_a: Adam | None,
                objective: SearchObjective, rng: np.random.Generator, grad_clip: float = 5.0,
                update_mode: str = "alternating") -> tuple[float, float]:
    """One weight update on ``b_t`` then one architecture update on ``b_s``.

    The weight step minimises cross-entropy only (the cost term does not depend
    on the weights).  ``opt_a=None`` evaluates the search loss without updating
    architecture parameters.  Returns ``(train_loss, search_loss)``.
    """
    if update_mode == "simultaneous":
        return _simultaneous_step(net, b_t, opt_w, opt_a, objective, rng, grad_clip)

    net.set_phase("weights")
    opt_w.zero_grad()
    logits = net.forward(b_t.x, "train", rng)
    loss_t = T.softmax_cross_entropy(logits, b_t.y)
    _check_finite(loss_t, net, objective, "weight")
    T.backward(loss_t)
    if grad_clip:
        clip_grad_norm(opt_w.params, grad_clip)
    opt_w.step()

    net.set_phase("arch" if opt_a is not None else "none")
    logits = net.forward(b_s.x, "search", rng)
    loss_s = search_loss(logits, b_s.y, net, objective)
    _check_finite(loss_s, net, objective, "architecture")
    if opt_a is not None:
        opt_a.zero_grad()
        T.backward(loss_s)
        opt_a.step()
        _clamp_means(net)
    net.set_phase("none")
    return float(loss_t.data), float(loss_s.data)


def _simultaneous_step(net, b_t, opt_w, opt_a, objective, rng, grad_clip):
    net.set_phase("all" if opt_a is not None else "weights")
    opt_w.zero_grad()
    if opt_a is not None:
        opt_a.zero_grad()
    logits = net.forward(b_t.x, "search", rng)
    loss = search_loss(logits, b_t.y, net, objective)
    _check_finite(loss, net, objective, "joint")
    T.backward(loss)
    if grad_clip:
        clip_grad_norm(opt_w.params, grad_clip)
    opt_w.step()
    if opt_a is not None:
        opt_a.step()
        _clamp_means(net)
    net.set_phase("none")
    return objective.components["ce"], float(loss.data)


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    perm = rng.permutation(n)
    steps = max(1, n // batch_size)
    return [perm[i * batch_size:(i + 1) * batch_size] for i in range(steps)]


def _alpha_rows(net: Supernet, epoch: int) -> list[dict]:
    rows = []
    for st, w in zip(net.stages, net.current_weights()):
        sel = st.selector
        if isinstance(sel, GaussianSelector):
            raw = np.exp(-0.5 * ((st.options.array() - sel.mu_value) / sel.sigma) ** 2)
            mu = sel.mu_value
        else:
            raw = sel.alphas.data
            mu = None
        for f, a, wk in zip(st.options, raw, w.data):
            rows.append({"epoch": epoch, "stage": st.index, "kind": sel.kind, "channels": int(f),
                         "alpha": float(a), "weight": float(wk), "mu": mu})
    return rows


# checkpointing ---------------------------------------------------------------

def save_checkpoint(path: str | Path, net: Supernet, opt_w: SGD, opt_a: Adam, rng: np.random.Generator,
                    meta: dict) -> None:
    arrays: dict[str, np.ndarray] = {}
    for name, p in net.parameters().items():
        arrays[f"param/{name}"] = p.data
    opt_meta = {}
    for tag, opt in (("w", opt_w), ("a", opt_a)):
        sd = opt.state_dict()
        steps = {}
        for pname, st in sd["state"].items():
            for key, val in st.items():
                if isinstance(val, np.ndarray):
                    arrays[f"opt/{tag}/{pname}/{key}"] = val
                else:
                    steps.setdefault(pname, {})[key] = val
        opt_meta[tag] = {"kind": sd["kind"], "lr": sd["lr"], "scalars": steps}
    stages = []
    for st in net.stages:
        sel = st.selector
        entry = {"options": list(st.options.values), "shrink_votes": st.shrink_votes, "kind": sel.kind}
        if isinstance(sel, GaussianSelector):
            entry["sigma"] = sel.sigma
        else:
            entry["temperature"] = sel.temperature
        stages.append(entry)
    full = dict(meta, version=CHECKPOINT_VERSION, rng=rng.bit_generator.state, optimizers=opt_meta,
                stages=stages, drop_prob=net.drop_prob)
    arrays["meta"] = np.frombuffer(json.dumps(full).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    with np.load(Path(path), allow_pickle=False) as z:
        arrays = {k: z[k] for k in z.files}
    meta = json.loads(arrays.pop("meta").tobytes().decode())
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {meta.get('version')!r}")
    return meta, arrays


def restore_supernet(meta: dict, arrays: dict[str, np.ndarray]) -> Supernet:
    net = Supernet(net_config_from_dict(meta["net_config"]), np.random.default_rng(0))
    params = net.parameters()
    for name, p in params.items():
        p.data = arrays[f"param/{name}"].astype(np.float64).copy()
    for st, entry in zip(net.stages, meta["stages"]):
        st.shrink_votes = entry["shrink_votes"]
        if isinstance(st.selector, GaussianSelector):
            st.selector.sigma = entry["sigma"]
        else:
            st.selector.temperature = entry["temperature"]
        st.set_options(ChannelOptions(tuple(entry["options"])))
    net.drop_prob = meta.get("drop_prob", 0.0)
    net._check_chain()
    return net


def _restore_optimizer(opt, tag: str, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    om = meta["optimizers"][tag]
    state: dict[str, dict] = {}
    prefix = f"opt/{tag}/"
    for key, val in arrays.items():
        if key.startswith(prefix):
            pname, buf = key[len(prefix):].rsplit("/", 1)
            state.setdefault(pname, {})[buf] = val.copy()
    for pname, scalars in om["scalars"].items():
        state.setdefault(pname, {}).update(scalars)
    opt.load_state_dict({"kind": om["kind"], "lr": om["lr"], "state": state})


def _rng_from_state(state: dict) -> np.random.Generator:
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng


# driver ------------------------------------------------------------------------

def run_search(config: SearchConfig, net_config: NetConfig, train_set: Dataset,
               out_dir: str | Path | None = None, resume: str | Path | None = None,
               augment: Augment | None = None, on_epoch=None) -> SearchResult:
    """Search widths on ``train_set``; persists a checkpoint per epoch if ``out_dir`` is set."""
    cfg = config
    d_t, d_s = split_dataset(train_set, cfg.seed)
    latency_table = LatencyTable.read(cfg.latency_table) if cfg.latency_table else None
    out = Path(out_dir) if out_dir is not None else None
    ckpt_path = out / "checkpoint.bin" if out is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    if resume is not None:
        meta, arrays = read_checkpoint(resume)
        net = restore_supernet(meta, arrays)
        opt_w, opt_a = make_optimizers(net, cfg)
        _restore_optimizer(opt_w, "w", meta, arrays)
        _restore_optimizer(opt_a, "a", meta, arrays)
        rng = _rng_from_state(meta["rng"])
        start_epoch = meta["epoch"]
        reports = [EpochReport(**r) for r in meta["reports"]]
        events = [ResizeEvent(e["stage"], e["old_F"], e["new_F"], e["epoch"]) for e in meta["events"]]
        objective = SearchObjective(cfg.lam, meta["objective_reference"], latency_table)
        initial_params = meta["initial_param_count"]
        log.info("resumed from %s at epoch %d", resume, start_epoch)
    else:
        rng = np.random.default_rng(cfg.seed)
        net = Supernet(net_config, rng)
        opt_w, opt_a = make_optimizers(net, cfg)
        objective = SearchObjective.for_net(net, cfg.lam, latency_table)
        start_epoch, reports, events = 0, [], []
        initial_params = net.param_count()
    net.set_phase("none")

    steps = max(1, min(len(d_t), len(d_s)) // cfg.batch_size)
    total_steps = cfg.epochs_search * steps
    t_start = time.monotonic()
    provenance = {"seed": cfg.seed, "lambda": cfg.lam, "epochs": cfg.epochs_search}

    def persist(epoch_done: int) -> None:
        if ckpt_path is None:
            return
        meta = {"epoch": epoch_done, "net_config": net_config_to_dict(net_config),
                "search_config": asdict(cfg), "reports": [r.to_dict() for r in reports],
                "events": [e.row() for e in events], "objective_reference": objective.reference,
                "initial_param_count": initial_params, "provenance": provenance}
        save_checkpoint(ckpt_path, net, opt_w, opt_a, rng, meta)

    for epoch in range(start_epoch, cfg.epochs_search):
        t0 = time.monotonic()
        tau = cfg.temperature(epoch)
        for st in net.stages:
            if isinstance(st.selector, GumbelSelector):
                st.selector.temperature = tau
        arch_active = epoch >= cfg.warmup_epochs
        idx_t = _batches(len(d_t), cfg.batch_size, rng)
        idx_s = _batches(len(d_s), cfg.batch_size, rng)
        tl, sl = [], []
        for s in range(steps):
            gstep = epoch * steps + s
            opt_w.lr = cosine_lr(gstep, total_steps, cfg.w_lr)
            net.drop_prob = cfg.dropout_end * gstep / total_steps
            b_t = d_t.subset(idx_t[s])
            b_s = d_s.subset(idx_s[s])
            if augment is not None and augment.active:
                b_t = Dataset(augment(b_t.x, rng), b_t.y)
                b_s = Dataset(augment(b_s.x, rng), b_s.y)
            a, b = search_step(net, b_t, b_s, opt_w, opt_a if arch_active else None, objective, rng,
                               cfg.grad_clip, cfg.update_mode)
            tl.append(a)
            sl.append(b)
        new_events = []
        if cfg.reallocate and net.gaussian_stages():
            new_events = epoch_update(net, epoch=epoch + 1, rng=rng, optimizers=(opt_w,))
            events.extend(new_events)
        exp_flops = float(expected_network_flops(net, net.current_weights()).data)
        rep = EpochReport(epoch + 1, float(np.mean(tl)), float(np.mean(sl)), exp_flops, net.stage_state(),
                          [st.F_max for st in net.stages], [e.row() for e in new_events], net.param_count(),
                          tau, net.drop_prob, opt_w.lr, arch_active, time.monotonic() - t0,
                          _alpha_rows(net, epoch + 1))
        reports.append(rep)
        log.info("epoch %d/%d train %.4f search %.4f E[flops] %.4g state %s", epoch + 1, cfg.epochs_search,
                 rep.train_loss, rep.search_loss, exp_flops, ["%.2f" % v for v in rep.stage_state])
        if on_epoch is not None:
            on_epoch(rep)
        persist(epoch + 1)
        if cfg.stop_after_epoch is not None and epoch + 1 >= cfg.stop_after_epoch and epoch + 1 < cfg.epochs_search:
            raise BudgetExceeded(f"stopped after epoch {epoch + 1} (epoch budget)", epoch + 1, reports, events)
        if cfg.budget_seconds is not None and time.monotonic() - t_start > cfg.budget_seconds \
                and epoch + 1 < cfg.epochs_search:
            raise BudgetExceeded(f"wall-clock budget of {cfg.budget_seconds}s exhausted after epoch {epoch + 1}",
                                 epoch + 1, reports, events)

    spec = finalize(net, provenance, cfg.latency_coefficient, latency_table)
    return SearchResult(spec, reports, events, net, initial_params)


# final training ----------------------------------------------------------------

@dataclass
class TrainResult:
    accuracy: float
    train_accuracy: float
    losses: list[float]
    net: ConcreteNet


def evaluate(net, data: Dataset, batch_size: int = 256) -> float:
    if len(data) == 0:
        return float("nan")
    correct = 0
    for i in range(0, len(data), batch_size):
        logits = net.forward(data.x[i:i + batch_size], "eval")
        correct += int((np.argmax(logits.data, axis=1) == data.y[i:i + batch_size]).sum())
    return correct / len(data)


def train_final(spec: ArchitectureSpec, config: SearchConfig, train_set: Dataset, test_set: Dataset,
                augment: Augment | None = None, seed: int | None = None) -> TrainResult:
    """Train the concrete network of ``spec`` from scratch and report test top-1 accuracy."""
    if train_set.x.shape[1:] != (spec.in_channels, *spec.input_hw):
        raise ValueError(f"spec expects inputs [{spec.in_channels},{spec.input_hw[0]},{spec.input_hw[1]}]; "
                         f"data has {list(train_set.x.shape[1:])}")
    if len(spec.channels) != len(spec.kernel_sizes) or len(spec.channels) != len(spec.strides):
        raise ValueError("spec stage lists have different lengths")
    cfg = config
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    net = ConcreteNet(spec, rng)
    for p in net.weight_params():
        p.requires_grad = True
    opt = SGD(net.weight_params(), cfg.w_lr, cfg.w_momentum, cfg.w_weight_decay)
    steps = max(1, len(train_set) // cfg.batch_size)
    total = cfg.epochs_train * steps
    losses = []
    for epoch in range(cfg.epochs_train):
        ep_loss = []
        for s, idx in enumerate(_batches(len(train_set), cfg.batch_size, rng)):
            gstep = epoch * steps + s
            opt.lr = cosine_lr(gstep, total, cfg.w_lr)
            net.drop_prob = cfg.dropout_end * gstep / total
            x = train_set.x[idx]
            if augment is not None and augment.active:
                x = augment(x, rng)
            opt.zero_grad()
            loss = T.softmax_cross_entropy(net.forward(x, "train", rng), train_set.y[idx])
            T.backward(loss)
            if cfg.grad_clip:
                clip_grad_norm(opt.params, cfg.grad_clip)
            opt.step()
            ep_loss.append(float(loss.data))
        losses.append(float(np.mean(ep_loss)))
    return TrainResult(evaluate(net, test_set), evaluate(net, train_set), losses, net)


def save_concrete(path: str | Path, net: ConcreteNet) -> None:
    arrays = {f"param/{k}": p.data for k, p in net.parameters().items()}
    arrays["spec"] = np.frombuffer(net.spec.to_json().encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_concrete(path: str | Path) -> ConcreteNet:
    with np.load(Path(path), allow_pickle=False) as z:
        arrays = {k: z[k] for k in z.files}
    spec = ArchitectureSpec.from_json(arrays.pop("spec").tobytes().decode())
    net = ConcreteNet(spec)
    for name, p in net.parameters().items():
        p.data = arrays[f"param/{name}"].copy()
    return net
