"""Finite-difference verification of the end-to-end ELBO gradient."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .elbo import TrainConfig, meta_batch_elbo, param_gradients
from .networks import MetaKernelNet
from .rff import draw_noise
from .tasks import Task


def _total_elbo(net, tasks, cfg, noises, graph=None):
    graph = graph or ad.Graph()
    terms = meta_batch_elbo(graph, net, tasks, cfg, noises)
    total = terms[0].elbo
    for t in terms[1:]:
        total = total + t.elbo
    return graph, total


def check_elbo_gradients(net: MetaKernelNet, tasks: list[Task], cfg: TrainConfig, h: float = 1e-5,
                         directions: int = 2, seed: int = 0) -> dict[str, float]:
    """Worst relative error per parameter array between reverse mode and central differences.

    Each array is probed along ``directions`` random unit directions, so
    every entry of every group participates in the comparison.
    """
    rng = np.random.default_rng(seed)
    noises = [draw_noise(rng, cfg.num_bases, net.feature_dim) for _ in tasks]
    graph, total = _total_elbo(net, tasks, cfg, noises)
    params = net.named_parameters()
    grads = param_gradients(graph, total, params)

    def f():
        return _total_elbo(net, tasks, cfg, noises)[1].value.item()

    errors = {}
    for name, p in params.items():
        worst = 0.0
        for _ in range(directions):
            v = rng.standard_normal(p.shape)
            v /= np.linalg.norm(v)
            orig = p.copy()
            p += h * v
            fp = f()
            p[...] = orig - h * v
            fm = f()
            p[...] = orig
            fd = (fp - fm) / (2.0 * h)
            an = float(np.sum(grads[name] * v))
            worst = max(worst, abs(an - fd) / max(abs(an), abs(fd), 1e-12))
        errors[name] = worst
    return errors
