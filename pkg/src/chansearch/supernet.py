"""Searchable network: fixed stem, masked conv stages, fixed head and classifier."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .cost import DEFAULT_LATENCY_COEFFICIENT, LatencyTable, concrete_flops, flops_conv
from .dynalloc import RangePolicy, gaussian_options, required_fmax
from .masking import (ChannelOptions, GaussianSelector, GumbelSelector, MaskBank, masked_forward,
                      selector_finalize, selector_weights)
from .tensor import Tensor

SPEC_VERSION = 1

# start, end, step per cell; 20 cells
_SMALL = [(24, 32, 8)] * 6 + [(48, 64, 8)] * 7 + [(96, 160, 16)] * 7
RANGE_PRESETS: dict[str, list[tuple[int, int, int]]] = {
    "dmask-small": _SMALL,
    "dmask-large": [(16, 160, 16)] * 20,
    "dmask-systolic": [(16, 200, 8)] * 20,
    # flexible search starts from the narrow ranges and moves them as needed
    "flexcharts": _SMALL,
}
PRESET_SELECTOR = {"dmask-small": "gumbel", "dmask-large": "gumbel", "dmask-systolic": "gumbel",
                   "flexcharts": "gaussian"}
# strides of the paper-scale preset: resolution halves where the ranges step up
_PAPER_STRIDES = [1] * 6 + [2] + [1] * 6 + [2] + [1] * 6


class SpecError(ValueError):
    """Malformed architecture spec or stage configuration."""


@dataclass
class StageSpec:
    start: int
    end: int
    step: int
    selector: str = "gumbel"
    stride: int = 1
    kernel_size: int = 3
    mu_init: float | None = None
    sigma: float | None = None

    def __post_init__(self):
        if self.start > self.end:
            raise SpecError(f"range start {self.start} > end {self.end}")
        if self.step < 1 or self.start < 1:
            raise SpecError(f"range needs start >= 1 and step >= 1; got {self.start}, {self.step}")
        if self.selector not in ("gumbel", "gaussian"):
            raise SpecError(f"unknown selector kind {self.selector!r}")
        if self.stride < 1 or self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise SpecError("stride must be >= 1 and kernel size odd and >= 1")


def enumerate_options(start: int, end: int, step: int) -> ChannelOptions:
    if start > end:
        raise SpecError(f"range start {start} > end {end}")
    if step < 1:
        raise SpecError("range step must be >= 1")
    return ChannelOptions(tuple(range(start, end + 1, step)))


def preset_stages(preset: str, num_stages: int = 20, scale: float = 1.0,
                  strides: Sequence[int] | None = None, kernel_size: int = 3) -> list[StageSpec]:
    """Stage specs from one of the range presets.

    With ``num_stages != 20`` stage ``i`` borrows cell ``floor(i * 20 / num_stages)``;
    ``scale`` shrinks every range (rounded, floored at 1) for desk-sized runs.
    """
    if preset not in RANGE_PRESETS:
        raise SpecError(f"unknown preset {preset!r}; choose from {sorted(RANGE_PRESETS)}")
    cells = RANGE_PRESETS[preset]
    if strides is None:
        strides = [_PAPER_STRIDES[(i * 20) // num_stages] for i in range(num_stages)]
    out = []
    for i in range(num_stages):
        s, e, st = cells[(i * 20) // num_stages]
        s, e, st = (max(1, int(round(v * scale))) for v in (s, e, st))
        out.append(StageSpec(s, e, st, PRESET_SELECTOR[preset], strides[i], kernel_size))
    return out


@dataclass
class NetConfig:
    in_channels: int = 3
    input_hw: tuple[int, int] = (16, 16)
    num_classes: int = 10
    stem_channels: int = 16
    head_channels: int = 32
    stages: list[StageSpec] = field(default_factory=lambda: preset_stages("dmask-small", 4, 0.25))
    margin_sigmas: float = 3.0
    max_channels: int | None = None
    normalize_gaussian: bool = True


def paper_net_config(preset: str = "flexcharts", num_classes: int = 10) -> NetConfig:
    return NetConfig(3, (32, 32), num_classes, 108, 256, preset_stages(preset, 20))


def _he(rng: np.random.Generator, shape) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)


@dataclass
class StageGeometry:
    kernel_size: int
    stride: int
    h_in: int
    w_in: int

    @property
    def padding(self) -> int:
        return self.kernel_size // 2

    @property
    def h_out(self) -> int:
        return T.conv_output_size(self.h_in, self.kernel_size, self.stride, self.padding)

    @property
    def w_out(self) -> int:
        return T.conv_output_size(self.w_in, self.kernel_size, self.stride, self.padding)


class Stage:
    """One searchable conv: kernel sized to ``F_max``, its mask bank and selector."""

    def __init__(self, index: int, spec: StageSpec, weight: Tensor, bias: Tensor,
                 options: ChannelOptions, selector, geometry: StageGeometry, policy: RangePolicy):
        self.index = index
        self.spec = spec
        self.weight = weight
        self.bias = bias
        self.selector = selector
        self.geometry = geometry
        self.policy = policy
        self.shrink_votes = 0
        self.set_options(options)

    @property
    def F_max(self) -> int:
        return self.weight.shape[0]

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]

    def set_options(self, options: ChannelOptions) -> None:
        self.options = options
        self.bank = MaskBank(self.F_max, options)

    def params(self) -> list[Tensor]:
        return [self.weight, self.bias]


class Supernet:
    def __init__(self, config: NetConfig, rng: np.random.Generator):
        cfg = config
        self.config = cfg
        self.in_channels = cfg.in_channels
        self.stem_h, self.stem_w = cfg.input_hw
        self.num_classes = cfg.num_classes
        self.stem_channels = cfg.stem_channels
        self.head_channels = cfg.head_channels
        self.drop_prob = 0.0
        self.last_weights: list[Tensor] = []

        self.stem_w_ = Tensor(_he(rng, (cfg.stem_channels, cfg.in_channels, 3, 3)), True, "stem.weight")
        self.stem_b = Tensor(np.zeros(cfg.stem_channels), True, "stem.bias")
        self.stages: list[Stage] = []
        c_prev, h, w = cfg.stem_channels, cfg.input_hw[0], cfg.input_hw[1]
        for i, sp in enumerate(cfg.stages):
            geom = StageGeometry(sp.kernel_size, sp.stride, h, w)
            policy = RangePolicy(sp.step, cfg.margin_sigmas, None, cfg.max_channels)
            if sp.selector == "gumbel":
                options = enumerate_options(sp.start, sp.end, sp.step)
                F_max = options.values[-1]
                sel = GumbelSelector.create(options.K, f"stages.{i}.alpha")
            else:
                mu0 = sp.mu_init if sp.mu_init is not None else 0.5 * (sp.start + sp.end)
                sigma = sp.sigma if sp.sigma is not None else float(sp.step)
                F_max = required_fmax(mu0, policy, sigma)
                options = gaussian_options(mu0, sigma, policy, F_max)
                sel = GaussianSelector.create(mu0, sigma, f"stages.{i}.mu", cfg.normalize_gaussian)
            weight = Tensor(_he(rng, (F_max, c_prev, sp.kernel_size, sp.kernel_size)), True, f"stages.{i}.weight")
            bias = Tensor(np.zeros(F_max), True, f"stages.{i}.bias")
            self.stages.append(Stage(i, sp, weight, bias, options, sel, geom, policy))
            c_prev, h, w = F_max, geom.h_out, geom.w_out
        self.head_w = Tensor(_he(rng, (cfg.head_channels, c_prev, 1, 1)), True, "head.weight")
        self.head_b = Tensor(np.zeros(cfg.head_channels), True, "head.bias")
        self.cls_w = Tensor(_he(rng, (cfg.num_classes, cfg.head_channels)), True, "classifier.weight")
        self.cls_b = Tensor(np.zeros(cfg.num_classes), True, "classifier.bias")
        self.out_hw = (h, w)
        self._check_chain()

    # registry ------------------------------------------------------------
    def weight_params(self) -> list[Tensor]:
        ps = [self.stem_w_, self.stem_b]
        for st in self.stages:
            ps += st.params()
        return ps + [self.head_w, self.head_b, self.cls_w, self.cls_b]

    def arch_params(self) -> list[Tensor]:
        return [p for st in self.stages for p in st.selector.params()]

    def parameters(self) -> dict[str, Tensor]:
        return {p.name: p for p in self.weight_params() + self.arch_params()}

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def set_phase(self, phase: str) -> None:
        """Choose which partition records gradients: ``weights``, ``arch``, ``all`` or ``none``."""
        w = phase in ("weights", "all")
        a = phase in ("arch", "all")
        for p in self.weight_params():
            p.requires_grad = w
        for p in self.arch_params():
            p.requires_grad = a

    def consumer_weight(self, index: int) -> Tensor:
        return self.stages[index + 1].weight if index + 1 < len(self.stages) else self.head_w

    def gaussian_stages(self) -> list[Stage]:
        return [s for s in self.stages if isinstance(s.selector, GaussianSelector)]

    def _check_chain(self) -> None:
        c_prev = self.stem_channels
        for st in self.stages:
            if st.c_in != c_prev:
                raise SpecError(f"stage {st.index} consumes {st.c_in} channels but receives {c_prev}")
            c_prev = st.F_max
        if self.head_w.shape[1] != c_prev:
            raise SpecError(f"head consumes {self.head_w.shape[1]} channels but receives {c_prev}")

    # forward ------------------------------------------------------------
    def current_weights(self, rng=None, noise: bool = False) -> list[Tensor]:
        return [selector_weights(st.selector, st.options, rng, noise) for st in self.stages]

    def forward(self, x, mode: str = "eval", rng: np.random.Generator | None = None) -> Tensor:
        if mode not in ("train", "search", "eval"):
            raise ValueError(f"unknown mode {mode!r}")
        x = T.as_tensor(x)
        if x.ndim != 4 or x.shape[1:] != (self.in_channels, self.stem_h, self.stem_w):
            raise T.DimensionError(f"input must be [B,{self.in_channels},{self.stem_h},{self.stem_w}]; got {x.shape}")
        h = T.relu(T.conv2d(x, self.stem_w_, self.stem_b, 1, 1))
        weights = []
        for st in self.stages:
            noisy = mode == "search" and isinstance(st.selector, GumbelSelector) and st.selector.noise_enabled
            wk = selector_weights(st.selector, st.options, rng, noise=noisy)
            if isinstance(st.selector, GaussianSelector) and not st.selector.normalize:
                # cost expectations still need a distribution
                weights.append(wk / T.sum_(wk))
            else:
                weights.append(wk)
            g = st.geometry
            y = T.relu(T.conv2d(h, st.weight, st.bias, g.stride, g.padding))
            h = masked_forward(y, wk, st.bank)
        h = T.relu(T.conv2d(h, self.head_w, self.head_b, 1, 0))
        pooled = T.dropout(T.global_avg_pool(h), self.drop_prob, mode != "eval", rng)
        self.last_weights = weights
        return T.linear(pooled, self.cls_w, self.cls_b)

    __call__ = forward

    # cost bookkeeping ----------------------------------------------------
    def fixed_flops(self) -> float:
        return float(flops_conv(self.in_channels, self.stem_channels, 3, self.stem_h, self.stem_w)
                     + flops_conv(self.head_channels, self.num_classes, 1, 1, 1))

    def full_flops(self) -> float:
        widths = [st.F_max for st in self.stages]
        return concrete_flops(self.geometry_dict(), widths)

    def geometry_dict(self) -> dict:
        return {"in_channels": self.in_channels, "input_hw": [self.stem_h, self.stem_w],
                "num_classes": self.num_classes, "stem_channels": self.stem_channels,
                "head_channels": self.head_channels,
                "kernel_sizes": [st.geometry.kernel_size for st in self.stages],
                "strides": [st.geometry.stride for st in self.stages]}

    def stage_state(self) -> list[float]:
        """Per stage: ``mu`` for Gaussian stages, the argmax option otherwise."""
        out = []
        for st in self.stages:
            if isinstance(st.selector, GaussianSelector):
                out.append(st.selector.mu_value)
            else:
                out.append(float(selector_finalize(st.selector, st.options)))
        return out


def build_supernet(config: NetConfig, rng: np.random.Generator) -> Supernet:
    return Supernet(config, rng)


# exported architecture -----------------------------------------------------

@dataclass
class ArchitectureSpec:
    channels: list[int]
    in_channels: int
    input_hw: list[int]
    num_classes: int
    stem_channels: int
    head_channels: int
    kernel_sizes: list[int]
    strides: list[int]
    flops: float
    latency_ms_est: float
    provenance: dict = field(default_factory=dict)

    def geometry_dict(self) -> dict:
        return {"in_channels": self.in_channels, "input_hw": list(self.input_hw),
                "num_classes": self.num_classes, "stem_channels": self.stem_channels,
                "head_channels": self.head_channels, "kernel_sizes": list(self.kernel_sizes),
                "strides": list(self.strides)}

    def to_dict(self) -> dict:
        return {
            "version": SPEC_VERSION,
            "stages": [{"channels": c, "kernel_size": k, "stride": s}
                       for c, k, s in zip(self.channels, self.kernel_sizes, self.strides)],
            "in_channels": self.in_channels,
            "input_hw": list(self.input_hw),
            "num_classes": self.num_classes,
            "stem_channels": self.stem_channels,
            "head_channels": self.head_channels,
            "flops": self.flops,
            "latency_ms_est": self.latency_ms_est,
            "provenance": self.provenance,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureSpec":
        if not isinstance(d, dict):
            raise SpecError("architecture spec must be a JSON object")
        if d.get("version") != SPEC_VERSION:
            raise SpecError(f"unsupported spec version {d.get('version')!r}; expected {SPEC_VERSION}")
        required = {"stages": list, "in_channels": int, "input_hw": list, "num_classes": int,
                    "stem_channels": int, "head_channels": int, "flops": (int, float),
                    "latency_ms_est": (int, float), "provenance": dict}
        for key, typ in required.items():
            if key not in d:
                raise SpecError(f"spec is missing field {key!r}")
            if not isinstance(d[key], typ) or isinstance(d[key], bool):
                raise SpecError(f"spec field {key!r} has type {type(d[key]).__name__}")
        extra = set(d) - set(required) - {"version"}
        if extra:
            raise SpecError(f"spec has unknown fields {sorted(extra)}")
        chans, ks, ss = [], [], []
        for i, st in enumerate(d["stages"]):
            if not isinstance(st, dict) or set(st) != {"channels", "kernel_size", "stride"}:
                raise SpecError(f"stages[{i}] must have exactly channels, kernel_size, stride")
            for key in ("channels", "kernel_size", "stride"):
                if not isinstance(st[key], int) or isinstance(st[key], bool) or st[key] < 1:
                    raise SpecError(f"stages[{i}].{key} must be a positive integer")
            chans.append(st["channels"])
            ks.append(st["kernel_size"])
            ss.append(st["stride"])
        if len(d["input_hw"]) != 2:
            raise SpecError("input_hw must have two entries")
        spec = cls(chans, d["in_channels"], list(d["input_hw"]), d["num_classes"], d["stem_channels"],
                   d["head_channels"], ks, ss, float(d["flops"]), float(d["latency_ms_est"]),
                   dict(d["provenance"]))
        recomputed = concrete_flops(spec.geometry_dict(), chans)
        if abs(recomputed - spec.flops) > 1e-9 * max(recomputed, 1.0):
            raise SpecError(f"spec flops {spec.flops:g} disagree with its geometry ({recomputed:g})")
        return spec

    @classmethod
    def from_json(cls, text: str) -> "ArchitectureSpec":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SpecError(f"spec is not valid JSON: {exc}") from exc
        return cls.from_dict(d)


def finalize(net: Supernet, provenance: dict | None = None,
             latency_coefficient: float = DEFAULT_LATENCY_COEFFICIENT,
             latency_table: LatencyTable | None = None) -> ArchitectureSpec:
    """Pick each stage's width and cost the resulting concrete network."""
    widths = [selector_finalize(st.selector, st.options) for st in net.stages]
    geom = net.geometry_dict()
    flops = concrete_flops(geom, widths)
    if latency_table is not None:
        latency = float(sum(latency_table.lookup(i, w) for i, w in enumerate(widths)))
    else:
        latency = flops * latency_coefficient * 1e3
    return ArchitectureSpec(widths, geom["in_channels"], geom["input_hw"], geom["num_classes"],
                            geom["stem_channels"], geom["head_channels"], geom["kernel_sizes"],
                            geom["strides"], float(flops), float(latency), dict(provenance or {}))


# concrete (mask-free) network ---------------------------------------------

class ConcreteNet:
    """Plain conv net at fixed widths; what a finalized spec trains as."""

    def __init__(self, spec: ArchitectureSpec, rng: np.random.Generator | None = None):
        self.spec = spec
        rng = rng if rng is not None else np.random.default_rng(0)
        self.drop_prob = 0.0
        self.stem_w = Tensor(_he(rng, (spec.stem_channels, spec.in_channels, 3, 3)), True, "stem.weight")
        self.stem_b = Tensor(np.zeros(spec.stem_channels), True, "stem.bias")
        self.layers: list[tuple[Tensor, Tensor, int, int]] = []
        c_prev = spec.stem_channels
        for i, (c, k, s) in enumerate(zip(spec.channels, spec.kernel_sizes, spec.strides)):
            self.layers.append((Tensor(_he(rng, (c, c_prev, k, k)), True, f"stages.{i}.weight"),
                                Tensor(np.zeros(c), True, f"stages.{i}.bias"), s, k))
            c_prev = c
        self.head_w = Tensor(_he(rng, (spec.head_channels, c_prev, 1, 1)), True, "head.weight")
        self.head_b = Tensor(np.zeros(spec.head_channels), True, "head.bias")
        self.cls_w = Tensor(_he(rng, (spec.num_classes, spec.head_channels)), True, "classifier.weight")
        self.cls_b = Tensor(np.zeros(spec.num_classes), True, "classifier.bias")

    @classmethod
    def from_supernet(cls, net: Supernet, widths: Sequence[int] | None = None) -> "ConcreteNet":
        """Inherit the supernet weights truncated to ``widths`` (default: finalized widths)."""
        spec = finalize(net)
        if widths is not None:
            spec.channels = list(widths)
        out = cls(spec)
        out.stem_w.data = net.stem_w_.data.copy()
        out.stem_b.data = net.stem_b.data.copy()
        c_prev = net.stem_channels
        for (w, b, _, _), st, c in zip(out.layers, net.stages, spec.channels):
            w.data = st.weight.data[:c, :c_prev].copy()
            b.data = st.bias.data[:c].copy()
            c_prev = c
        out.head_w.data = net.head_w.data[:, :c_prev].copy()
        out.head_b.data = net.head_b.data.copy()
        out.cls_w.data = net.cls_w.data.copy()
        out.cls_b.data = net.cls_b.data.copy()
        return out

    def parameters(self) -> dict[str, Tensor]:
        ps = [self.stem_w, self.stem_b]
        for w, b, _, _ in self.layers:
            ps += [w, b]
        ps += [self.head_w, self.head_b, self.cls_w, self.cls_b]
        return {p.name: p for p in ps}

    def weight_params(self) -> list[Tensor]:
        return list(self.parameters().values())

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def flops(self) -> float:
        return concrete_flops(self.spec.geometry_dict(), [w.shape[0] for w, _, _, _ in self.layers])

    def forward(self, x, mode: str = "eval", rng: np.random.Generator | None = None) -> Tensor:
        h = T.relu(T.conv2d(x, self.stem_w, self.stem_b, 1, 1))
        for w, b, s, k in self.layers:
            h = T.relu(T.conv2d(h, w, b, s, k // 2))
        h = T.relu(T.conv2d(h, self.head_w, self.head_b, 1, 0))
        pooled = T.dropout(T.global_avg_pool(h), self.drop_prob, mode != "eval", rng)
        return T.linear(pooled, self.cls_w, self.cls_b)

    __call__ = forward


def net_config_to_dict(cfg: NetConfig) -> dict:
    d = asdict(cfg)
    d["input_hw"] = list(cfg.input_hw)
    return d


def net_config_from_dict(d: dict) -> NetConfig:
    d = dict(d)
    stages = [StageSpec(**s) for s in d.pop("stages")]
    d["input_hw"] = tuple(d["input_hw"])
    return NetConfig(stages=stages, **d)
