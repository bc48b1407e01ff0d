"""Prefix channel masks and the two architecture selectors.

A stage with ``F_max`` output channels simulates a width-``f_k`` layer by
multiplying its activation with a prefix mask ``m_k`` (``f_k`` ones followed by
zeros).  The selectors turn architecture parameters into one weight per option:

* :class:`GumbelSelector` keeps one free logit per option and maps them through
  a (optionally noisy) Gumbel softmax.
* :class:`GaussianSelector` trains a single mean ``mu`` in channel units; the
  per-option score is a Gaussian bump centred on ``mu``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor


@dataclass(frozen=True)
class ChannelOptions:
    values: tuple[int, ...]

    def __post_init__(self):
        vals = tuple(int(v) for v in self.values)
        if not vals:
            raise ValueError("channel options must not be empty")
        if vals[0] < 1:
            raise ValueError(f"channel options must be >= 1; got {vals}")
        if any(b <= a for a, b in zip(vals, vals[1:])):
            raise ValueError(f"channel options must be strictly increasing; got {vals}")
        object.__setattr__(self, "values", vals)

    @property
    def K(self) -> int:
        return len(self.values)

    def array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)

    def __iter__(self):
        return iter(self.values)

    def __len__(self):
        return len(self.values)


def make_mask(F_max: int, f_k: int) -> np.ndarray:
    if not 1 <= f_k <= F_max:
        raise ValueError(f"mask width {f_k} outside [1, {F_max}]")
    m = np.zeros(F_max)
    m[:f_k] = 1.0
    return m


class MaskBank:
    """The K prefix masks of one stage, stored as a [K, F_max] matrix."""

    def __init__(self, F_max: int, options: ChannelOptions):
        if options.values[-1] > F_max:
            raise ValueError(f"largest option {options.values[-1]} exceeds F_max={F_max}")
        self.F_max = F_max
        self.options = options
        self.masks = np.stack([make_mask(F_max, f) for f in options])

    @property
    def K(self) -> int:
        return self.options.K

    def coefficients(self, weights) -> Tensor:
        """Collapse per-option weights into one per-channel coefficient vector."""
        weights = T.as_tensor(weights)
        if weights.shape != (self.K,):
            raise DimensionError(f"expected {self.K} option weights; got shape {weights.shape}")
        return T.matmul(weights, self.masks)


def masked_forward(y, weights, bank: MaskBank) -> Tensor:
    """Weighted sum of prefix-masked copies of ``y[B,F_max,H,W]``.

    Uses ``(sum_k w_k m_k) * y``: the masks are summed first, so the cost is one
    broadcast multiply regardless of K.
    """
    y = T.as_tensor(y)
    if y.ndim != 4 or y.shape[1] != bank.F_max:
        raise DimensionError(f"activation axis 1 has {y.shape[1] if y.ndim > 1 else '?'} channels; "
                             f"mask bank expects {bank.F_max}")
    coef = bank.coefficients(weights)
    return y * coef.reshape(1, bank.F_max, 1, 1)


def masked_forward_unfactored(y, weights, bank: MaskBank) -> Tensor:
    """Reference form ``sum_k w_k (m_k * y)``; K full-size multiplies."""
    y, weights = T.as_tensor(y), T.as_tensor(weights)
    out = None
    for k in range(bank.K):
        mk = bank.masks[k].reshape(1, bank.F_max, 1, 1)
        term = (y * mk) * T.reshape(_pick(weights, k), (1, 1, 1, 1))
        out = term if out is None else out + term
    return out


def _pick(t: Tensor, k: int) -> Tensor:
    onehot = np.zeros(t.shape[0])
    onehot[k] = 1.0
    return T.matmul(t, onehot.reshape(-1, 1)).reshape(())


# selectors -----------------------------------------------------------------

@dataclass
class GumbelSelector:
    alphas: Tensor
    temperature: float = 1.0
    noise_enabled: bool = True
    kind: str = field(default="gumbel", init=False)

    @classmethod
    def create(cls, K: int, name: str, temperature: float = 1.0) -> "GumbelSelector":
        return cls(Tensor(np.zeros(K), requires_grad=True, name=name), temperature)

    def params(self) -> list[Tensor]:
        return [self.alphas]


@dataclass
class GaussianSelector:
    mu: Tensor
    sigma: float
    normalize: bool = True
    kind: str = field(default="gaussian", init=False)

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive; got {self.sigma}")

    @classmethod
    def create(cls, mu: float, sigma: float, name: str, normalize: bool = True) -> "GaussianSelector":
        return cls(Tensor(np.array([float(mu)]), requires_grad=True, name=name), float(sigma), normalize)

    @property
    def mu_value(self) -> float:
        return float(self.mu.data[0])

    def params(self) -> list[Tensor]:
        return [self.mu]

    def clamp(self, F_max: int) -> None:
        self.mu.data = np.clip(self.mu.data, 1.0, float(F_max))


def gumbel_weights(sel: GumbelSelector, rng: np.random.Generator | None = None,
                   noise: bool | None = None) -> Tensor:
    """``softmax((alpha + G) / tau)`` with standard Gumbel ``G`` when noise is on."""
    if not sel.temperature > 0:
        raise ValueError(f"Gumbel temperature must be positive; got {sel.temperature}")
    use_noise = sel.noise_enabled if noise is None else noise
    logits = sel.alphas
    if use_noise:
        if rng is None:
            raise ValueError("Gumbel noise needs an explicit rng")
        u = rng.random(sel.alphas.shape)
        g = -np.log(-np.log(np.clip(u, 1e-300, 1.0 - 1e-16)))
        logits = logits + g
    return T.softmax(logits * (1.0 / sel.temperature))


def gaussian_raw(mu, sigma: float, options: ChannelOptions) -> Tensor:
    if len(options) == 0:
        raise ValueError("empty channel options")
    z = (T.as_tensor(options.array()) - T.as_tensor(mu)) * (1.0 / sigma)
    return T.exp(z * z * -0.5)


def gaussian_weights(sel: GaussianSelector, options: ChannelOptions) -> tuple[Tensor, Tensor]:
    """Return ``(raw, used)``: the Gaussian scores and the form fed to the masks.

    ``used`` is the normalised ``raw / sum(raw)`` unless normalisation is switched
    off on the selector, in which case it is ``raw`` itself.
    """
    raw = gaussian_raw(sel.mu, sel.sigma, options)
    if not sel.normalize:
        return raw, raw
    return raw, raw / T.sum_(raw)


def selector_weights(sel, options: ChannelOptions, rng=None, noise: bool = False) -> Tensor:
    if isinstance(sel, GumbelSelector):
        return gumbel_weights(sel, rng, noise=noise)
    return gaussian_weights(sel, options)[1]


def selector_finalize(sel, options: ChannelOptions) -> int:
    """Option with the largest score; ties go to the smaller channel count."""
    vals = options.array()
    if isinstance(sel, GumbelSelector):
        scores = sel.alphas.data
        if scores.shape != (len(vals),):
            raise DimensionError(f"selector has {scores.size} logits for {len(vals)} options")
        return int(vals[int(np.argmax(scores))])
    dist = np.abs(vals - sel.mu_value)
    return int(vals[int(np.argmin(dist))])
