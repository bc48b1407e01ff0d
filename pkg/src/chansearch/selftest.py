"""Quick invariant checks runnable without pytest (``chansearch selftest``)."""

from __future__ import annotations

import logging
from typing import Callable

import numpy as np

from . import tensor as T
from .cost import SearchObjective, search_loss
from .dynalloc import resize_kernel
from .masking import ChannelOptions, MaskBank, masked_forward, masked_forward_unfactored
from .optim import SGD
from .supernet import NetConfig, StageSpec, Supernet

log = logging.getLogger(__name__)


def _toy_net(seed: int = 0) -> Supernet:
    rng = np.random.default_rng(seed)
    cfg = NetConfig(3, (8, 8), 4, 6, 7, [StageSpec(8, 24, 8, "gumbel"),
                                         StageSpec(8, 16, 8, "gaussian", mu_init=12.0, sigma=6.0)])
    net = Supernet(cfg, rng)
    net.stages[0].selector.alphas.data = rng.standard_normal(net.stages[0].options.K)
    return net


def check_conv() -> str:
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 6, 5))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    got = T.conv2d(x, w, b, stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros_like(got)
    for n in range(2):
        for f in range(4):
            for i in range(got.shape[2]):
                for j in range(got.shape[3]):
                    ref[n, f, i, j] = (xp[n, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[f]).sum() + b[f]
    err = float(np.abs(got - ref).max())
    assert err < 1e-10, f"conv2d differs from the direct loop by {err:.3g}"
    return f"max abs error {err:.2g}"


def check_gradients(coords_per_param: int = 6) -> str:
    net = _toy_net()
    rng = np.random.default_rng(2)
    x = rng.standard_normal((4, 3, 8, 8))
    y = np.array([0, 1, 2, 3])
    obj = SearchObjective.for_net(net, 0.1)

    def loss():
        return search_loss(net.forward(x, "eval"), y, net, obj)

    net.set_phase("all")
    T.backward(loss())
    worst = 0.0
    for p in net.parameters().values():
        flat = rng.choice(p.size, size=min(coords_per_param, p.size), replace=False)
        for k in flat:
            i = np.unravel_index(k, p.shape)
            old = p.data[i]
            p.data[i] = old + 1e-5
            lp = float(loss().data)
            p.data[i] = old - 1e-5
            lm = float(loss().data)
            p.data[i] = old
            fd = (lp - lm) / 2e-5
            denom = max(abs(fd), abs(p.grad[i]), 1e-6)
            worst = max(worst, abs(fd - p.grad[i]) / denom)
    net.set_phase("none")
    assert worst < 1e-4, f"gradient mismatch: worst relative error {worst:.3g}"
    return f"worst relative error {worst:.2g}"


def check_masking(trials: int = 20) -> str:
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(trials):
        F = int(rng.integers(1, 17))
        K = int(rng.integers(1, min(F, 8) + 1))
        opts = ChannelOptions(tuple(sorted(rng.choice(np.arange(1, F + 1), K, replace=False).tolist())))
        bank = MaskBank(F, opts)
        y = rng.standard_normal((2, F, 3, 3))
        wts = rng.dirichlet(np.ones(K))
        a = masked_forward(y, wts, bank).data
        b = masked_forward_unfactored(y, wts, bank).data
        worst = max(worst, float(np.abs(a - b).max()))
    assert worst < 1e-9, f"factored masking differs by {worst:.3g}"
    return f"max abs difference {worst:.2g}"


def check_resize() -> str:
    net = _toy_net()
    st = net.stages[1]
    opt = SGD(net.weight_params(), 0.1)
    before = st.weight.data.copy()
    old_F = st.F_max
    resize_kernel(net, 1, old_F + 8, epoch=1, rng=np.random.default_rng(4), optimizers=[opt])
    assert np.array_equal(st.weight.data[:old_F], before), "grow altered surviving channels"
    resize_kernel(net, 1, old_F, epoch=2, rng=np.random.default_rng(5), optimizers=[opt])
    assert np.array_equal(st.weight.data, before), "shrink-grow round trip altered weights"
    net._check_chain()
    return f"{old_F} -> {old_F + 8} -> {old_F} exact"


CHECKS: dict[str, Callable[[], str]] = {
    "conv2d": check_conv,
    "gradients": check_gradients,
    "masking": check_masking,
    "resize": check_resize,
}


def run_all(echo=print) -> bool:
    ok = True
    for name, fn in CHECKS.items():
        try:
            detail = fn()
            echo(f"PASS {name}: {detail}")
        except Exception as e:  # report and continue with the rest
            ok = False
            echo(f"FAIL {name}: {e}")
    return ok
