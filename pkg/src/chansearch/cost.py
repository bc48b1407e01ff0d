"""FLOPS accounting, expected (differentiable) cost and the search objective."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

if TYPE_CHECKING:
    from .supernet import Supernet

# seconds per FLOP; roughly what a small batch-1 net reaches on a datacenter GPU
DEFAULT_LATENCY_COEFFICIENT = 3.0e-12


def flops_conv(C, F, k: int, H_out: int, W_out: int):
    """Multiply-accumulate count times two for one conv layer and one sample."""
    return 2 * C * F * k * k * H_out * W_out


def concrete_flops(geometry: dict, widths: Sequence[int]) -> float:
    """FLOPS of stem, stages at ``widths`` (inputs truncated to the upstream width), head and classifier."""
    h, w = geometry["input_hw"]
    total = flops_conv(geometry["in_channels"], geometry["stem_channels"], 3, h, w)
    c_prev = geometry["stem_channels"]
    for width, k, s in zip(widths, geometry["kernel_sizes"], geometry["strides"]):
        h = (h + 2 * (k // 2) - k) // s + 1
        w = (w + 2 * (k // 2) - k) // s + 1
        total += flops_conv(c_prev, width, k, h, w)
        c_prev = width
    total += flops_conv(c_prev, geometry["head_channels"], 1, h, w)
    total += flops_conv(geometry["head_channels"], geometry["num_classes"], 1, 1, 1)
    return float(total)


def expected_cost(costs, weights, tol: float = 1e-6) -> Tensor:
    """``sum_k w_k cost_k``; ``weights`` must already be normalised."""
    weights = T.as_tensor(weights)
    total = float(weights.data.sum())
    if abs(total - 1.0) > tol:
        raise ValueError(f"expected_cost needs normalised weights; they sum to {total!r}")
    return T.sum_(weights * T.as_tensor(costs))


def expected_width(weights, options) -> Tensor:
    return T.sum_(T.as_tensor(weights) * options.array())


class LatencyTable:
    """Measured per-stage latencies, ``stage_id, channels, milliseconds`` rows.

    Widths between measured points are interpolated linearly; outside the
    measured span the nearest segment is extended.
    """

    def __init__(self, rows: Sequence[tuple[int, int, float]]):
        by_stage: dict[int, list[tuple[int, float]]] = {}
        for stage, ch, ms in rows:
            by_stage.setdefault(int(stage), []).append((int(ch), float(ms)))
        self.stages = {s: sorted(v) for s, v in by_stage.items()}

    @classmethod
    def read(cls, path: str | Path) -> "LatencyTable":
        rows = []
        with open(path, newline="") as fh:
            for rec in csv.reader(fh):
                if not rec or rec[0].strip().startswith("#"):
                    continue
                if rec[0].strip() == "stage_id":
                    continue
                if len(rec) != 3:
                    raise ValueError(f"latency table row needs 3 fields: {rec}")
                rows.append((int(rec[0]), int(rec[1]), float(rec[2])))
        if not rows:
            raise ValueError(f"latency table {path} has no rows")
        return cls(rows)

    def lookup(self, stage: int, channels) -> np.ndarray:
        pts = self.stages.get(stage)
        if not pts:
            raise KeyError(f"no latency rows for stage {stage}")
        xs = np.array([p[0] for p in pts], dtype=float)
        ys = np.array([p[1] for p in pts], dtype=float)
        c = np.asarray(channels, dtype=float)
        if len(xs) == 1:
            return np.full_like(c, ys[0] * 1.0) * (c / xs[0])
        out = np.interp(c, xs, ys)
        lo_slope = (ys[1] - ys[0]) / (xs[1] - xs[0])
        hi_slope = (ys[-1] - ys[-2]) / (xs[-1] - xs[-2])
        out = np.where(c < xs[0], ys[0] + (c - xs[0]) * lo_slope, out)
        out = np.where(c > xs[-1], ys[-1] + (c - xs[-1]) * hi_slope, out)
        return out


@dataclass
class CostTable:
    """Per-stage FLOPS of each option, with upstream widths frozen at their expectation."""

    stages: list[dict[int, float]]
    latency_coefficient: float = DEFAULT_LATENCY_COEFFICIENT
    lam: float = 0.0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("cost weight must be >= 0")


def build_cost_table(net: "Supernet", lam: float = 0.0,
                     latency_coefficient: float = DEFAULT_LATENCY_COEFFICIENT) -> CostTable:
    weights = net.current_weights()
    rows = []
    c_in = float(net.stem_channels)
    for st, w in zip(net.stages, weights):
        g = st.geometry
        rows.append({f: float(flops_conv(c_in, f, g.kernel_size, g.h_out, g.w_out)) for f in st.options})
        c_in = float(expected_width(w, st.options).data)
    return CostTable(rows, latency_coefficient, lam)


def expected_network_flops(net: "Supernet", weights: Sequence[Tensor]) -> Tensor:
    """Exact expectation of network FLOPS when stage widths are drawn independently."""
    total = T.as_tensor(net.fixed_flops())
    c_in = T.as_tensor(float(net.stem_channels))
    for st, w in zip(net.stages, weights):
        g = st.geometry
        costs = c_in * (st.options.array() * float(flops_conv(1, 1, g.kernel_size, g.h_out, g.w_out)))
        total = total + expected_cost(costs, w)
        c_in = expected_width(w, st.options)
    last = net.stages[-1].geometry if net.stages else None
    h, wd = (last.h_out, last.w_out) if last else (net.stem_h, net.stem_w)
    total = total + c_in * float(flops_conv(1, net.head_channels, 1, h, wd))
    return total


def expected_network_latency_ms(net: "Supernet", weights: Sequence[Tensor], table: LatencyTable) -> Tensor:
    total = T.as_tensor(0.0)
    for i, (st, w) in enumerate(zip(net.stages, weights)):
        total = total + expected_cost(table.lookup(i, st.options.array()), w)
    return total


@dataclass
class SearchObjective:
    """Cross-entropy plus ``lam`` times expected cost over a fixed reference cost.

    The reference is the cost of the supernet as first built (every stage at
    its kernel width) divided by its total number of searchable channels, so
    ``lam`` reads as the cross-entropy price of one average searchable channel.
    It is fixed at construction and does not follow later kernel resizes.
    """

    lam: float
    reference: float
    latency_table: LatencyTable | None = None
    components: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("cost weight must be >= 0")
        if not self.reference > 0:
            raise ValueError("reference cost must be positive")

    @classmethod
    def for_net(cls, net: "Supernet", lam: float, latency_table: LatencyTable | None = None):
        if latency_table is None:
            ref = net.full_flops()
        else:
            ref = float(sum(latency_table.lookup(i, st.F_max) for i, st in enumerate(net.stages)))
        channels = sum(st.F_max for st in net.stages) or 1
        return cls(lam, float(ref) / channels, latency_table)

    def cost_term(self, net: "Supernet", weights: Sequence[Tensor]) -> Tensor:
        if self.latency_table is None:
            raw = expected_network_flops(net, weights)
        else:
            raw = expected_network_latency_ms(net, weights, self.latency_table)
        return raw * (1.0 / self.reference)


def search_loss(logits, labels, net: "Supernet", objective: SearchObjective,
                weights: Sequence[Tensor] | None = None) -> Tensor:
    """Accuracy loss plus the weighted, normalised cost of the current selection.

    ``weights`` defaults to the per-stage option weights recorded by the last
    supernet forward, so the cost sees the same (possibly noisy) selection.
    """
    ce = T.softmax_cross_entropy(logits, labels)
    if objective.lam == 0.0:
        objective.components = {"ce": float(ce.data), "cost": 0.0}
        return ce
    if weights is None:
        weights = net.last_weights
    cost = objective.cost_term(net, weights)
    objective.components = {"ce": float(ce.data), "cost": float(cost.data)}
    return ce + cost * objective.lam
