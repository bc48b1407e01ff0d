"""Epoch-boundary kernel resizing for Gaussian-selector stages.

As ``mu`` drifts, the Gaussian scores at the far end of the option range stop
being negligible (or the top of the kernel stops being reachable).  At the end
of each epoch every Gaussian stage is re-sized to the smallest grid multiple
covering ``mu + margin * sigma``; trained weights of the surviving channels are
carried over verbatim and optimizer buffers follow them.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable

import numpy as np

from .masking import ChannelOptions, GaussianSelector, gaussian_weights

if TYPE_CHECKING:
    from .optim import Optimizer
    from .supernet import Stage, Supernet

log = logging.getLogger(__name__)

NEW_CHANNEL_SCALE = 1e-2
SHRINK_PATIENCE = 2
DESTRUCTIVE_WEIGHT = 0.01


@dataclass
class RangePolicy:
    step: int
    margin_sigmas: float = 3.0
    min_channels: int | None = None
    max_channels: int | None = None

    def __post_init__(self):
        if not self.margin_sigmas > 0:
            raise ValueError("margin_sigmas must be positive")
        if self.step < 1:
            raise ValueError("grid step must be >= 1")
        if self.min_channels is None:
            self.min_channels = self.step

    def to_dict(self) -> dict:
        return {"step": self.step, "margin_sigmas": self.margin_sigmas,
                "min_channels": self.min_channels, "max_channels": self.max_channels}


@dataclass(frozen=True)
class ResizeEvent:
    stage: int
    old_F: int
    new_F: int
    epoch: int

    @property
    def direction(self) -> str:
        return "grow" if self.new_F > self.old_F else "shrink"

    def row(self) -> dict:
        return {"epoch": self.epoch, "stage": self.stage, "old_F": self.old_F,
                "new_F": self.new_F, "direction": self.direction}


def required_fmax(mu: float, policy: RangePolicy, sigma: float) -> int:
    """Smallest grid multiple reaching ``mu + margin * sigma``, within [min, max]."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    top = mu + policy.margin_sigmas * sigma
    f = int(math.ceil(top / policy.step - 1e-9)) * policy.step
    f = max(f, policy.min_channels)
    if policy.max_channels is not None:
        f = min(f, policy.max_channels)
    return f


def gaussian_options(mu: float, sigma: float, policy: RangePolicy, F_max: int) -> ChannelOptions:
    """Grid multiples of ``step`` inside ``[max(min, mu - m*sigma), mu + m*sigma]``, capped at F_max."""
    lo = max(policy.min_channels, mu - policy.margin_sigmas * sigma)
    hi = min(mu + policy.margin_sigmas * sigma, F_max)
    s = policy.step
    first = int(math.ceil(lo / s - 1e-9)) * s
    vals = list(range(max(first, s), int(math.floor(hi / s + 1e-9)) * s + 1, s))
    if not vals:
        # window narrower than one grid step: fall back to the grid point nearest mu
        near = min(max(int(round(mu / s)) * s, s), (F_max // s) * s or F_max)
        vals = [near]
    return ChannelOptions(tuple(vals))


def _kernel_init(rng: np.random.Generator, shape: tuple[int, ...], scale: float) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return rng.standard_normal(shape) * math.sqrt(2.0 / fan_in) * scale


def _resize_axis(old: np.ndarray, new_len: int, axis: int, fill: np.ndarray | None) -> np.ndarray:
    shape = list(old.shape)
    shape[axis] = new_len
    if fill is None:
        out = np.zeros(shape)
    else:
        out = np.array(fill, dtype=np.float64)
    keep = min(old.shape[axis], new_len)
    sl = [slice(None)] * old.ndim
    sl[axis] = slice(0, keep)
    out[tuple(sl)] = old[tuple(sl)]
    return out


def resize_kernel(net: "Supernet", index: int, new_F: int, *, epoch: int,
                  rng: np.random.Generator, optimizers: Iterable["Optimizer"] = (),
                  options: ChannelOptions | None = None) -> ResizeEvent:
    """Re-allocate stage ``index`` with ``new_F`` output channels.

    The stage kernel/bias and the input axis of the consuming layer are resized;
    the overlapping slice is copied bit-exactly.  New kernel entries are drawn
    from the stage initialiser scaled by ``NEW_CHANNEL_SCALE``; new bias entries
    are zero.  Optimizer buffers keep the overlap and start at zero elsewhere.
    """
    stage = net.stages[index]
    old_F = stage.F_max
    if new_F < 1:
        raise ValueError(f"stage {index}: cannot resize to {new_F} channels")
    if new_F == old_F:
        raise ValueError(f"stage {index}: already has {old_F} channels")
    options = options or stage.options
    if options.values[-1] > new_F:
        options = ChannelOptions(tuple(v for v in options.values if v <= new_F) or (new_F,))
    if new_F < old_F:
        _refuse_destructive_shrink(stage, new_F)

    ev = ResizeEvent(index, old_F, int(new_F), epoch)
    log.info("resize stage %d: %d -> %d (%s) at epoch %d", index, old_F, new_F, ev.direction, epoch)

    w_old = stage.weight.data
    fresh = None
    if new_F > old_F:
        fresh = _kernel_init(rng, (new_F,) + w_old.shape[1:], NEW_CHANNEL_SCALE)
    stage.weight.data = _resize_axis(w_old, new_F, 0, fresh)
    stage.bias.data = _resize_axis(stage.bias.data, new_F, 0, None)

    consumer = net.consumer_weight(index)
    c_old = consumer.data
    fresh = None
    if new_F > old_F:
        shape = (c_old.shape[0], new_F) + c_old.shape[2:]
        fresh = _kernel_init(rng, shape, NEW_CHANNEL_SCALE)
    consumer.data = _resize_axis(c_old, new_F, 1, fresh)

    stage.set_options(options)
    for opt in optimizers:
        for p in (stage.weight, stage.bias, consumer):
            opt.resize_state(p.name, p.data.shape)
    return ev


def _refuse_destructive_shrink(stage: "Stage", new_F: int) -> None:
    sel = stage.selector
    if isinstance(sel, GaussianSelector):
        w = gaussian_weights(sel, stage.options)[1].data
    else:
        from .masking import gumbel_weights
        w = gumbel_weights(sel, noise=False).data
    live = [f for f, wk in zip(stage.options, w) if wk > DESTRUCTIVE_WEIGHT]
    if live and new_F < max(live):
        raise ValueError(f"stage {stage.index}: shrinking to {new_F} would cut option {max(live)} "
                         f"which still carries weight > {DESTRUCTIVE_WEIGHT}")


def epoch_update(net: "Supernet", policies: dict[int, RangePolicy] | None = None, *, epoch: int,
                 rng: np.random.Generator, optimizers: Iterable["Optimizer"] = ()) -> list[ResizeEvent]:
    """Track ``mu`` on every Gaussian stage; returns the resize events applied.

    Growing happens as soon as it is needed.  Shrinking waits until the target
    has sat at least one grid step below the current size for
    ``SHRINK_PATIENCE`` consecutive calls.
    """
    optimizers = list(optimizers)
    events = []
    for st in net.stages:
        if not isinstance(st.selector, GaussianSelector):
            continue
        policy = (policies or {}).get(st.index, st.policy)
        mu, sigma = st.selector.mu_value, st.selector.sigma
        target = required_fmax(mu, policy, sigma)
        new_F = st.F_max
        if target > st.F_max:
            new_F = target
            st.shrink_votes = 0
        elif target <= st.F_max - policy.step:
            st.shrink_votes += 1
            if st.shrink_votes >= SHRINK_PATIENCE:
                new_F = target
                st.shrink_votes = 0
        else:
            st.shrink_votes = 0
        options = gaussian_options(mu, sigma, policy, new_F)
        if new_F != st.F_max:
            events.append(resize_kernel(net, st.index, new_F, epoch=epoch, rng=rng,
                                        optimizers=optimizers, options=options))
        elif options != st.options:
            st.set_options(options)
        st.selector.clamp(st.F_max)
    return events
