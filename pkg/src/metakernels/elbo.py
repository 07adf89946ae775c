"""ELBO objective, episodic meta-training and evaluation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import Node, ShapeError
from .networks import (
    MODES,
    FrequencyPosterior,
    MetaKernelNet,
    embed,
    infer_sequence,
    instance_pool,
    prior_from_query,
)
from .optim import AdamState, adam_step
from .rff import baseline_predict, draw_noise, fit_predict, reparameterize_sample
from .tasks import Task, class_labels

log = logging.getLogger(__name__)

PRIOR_AGGREGATIONS = ("mean-params", "mean-kl")


@dataclass
class TrainConfig:
    lr: float = 1e-4
    iterations: int = 20000
    episodes_per_iteration: int = 6
    num_bases: int = 256
    ridge: float = 1e-3
    beta: float = 1.0
    noise_std: float = 0.1
    mode: str = "vanilla-lstm"
    prior_aggregation: str = "mean-params"
    init_seed: int = 1
    sampling_seed: int = 2

    def validate(self):
        for name in ("lr", "ridge", "noise_std"):
            if getattr(self, name) < 0 or (name != "lr" and getattr(self, name) == 0):
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        for name in ("iterations", "episodes_per_iteration", "num_bases"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.prior_aggregation not in PRIOR_AGGREGATIONS:
            raise ValueError(f"prior_aggregation must be one of {PRIOR_AGGREGATIONS}")


@dataclass
class ELBOTerms:
    expected_log_lik: Node
    kl: Node
    elbo: Node
    beta: float
    predictions: Node | None = None
    posterior: FrequencyPosterior | None = None
    prior: FrequencyPosterior | None = None

    def floats(self) -> tuple[float, float, float]:
        return (self.elbo.value.item(), self.expected_log_lik.value.item(), self.kl.value.item())


def gaussian_kl(q: FrequencyPosterior, p: FrequencyPosterior) -> Node:
    """KL(q || p) between diagonal Gaussians, summed over all entries."""
    if q.mu.shape != p.mu.shape:
        raise ShapeError(f"KL between widths {q.mu.shape} and {p.mu.shape}")
    g = q.mu.graph
    p_mu, p_lv = ad.lift(p.mu, g), ad.lift(p.log_var, g)
    for lv in (q.log_var, p_lv):
        var = np.exp(lv.value)
        if not np.all(np.isfinite(var)) or np.any(var <= 0):
            raise ValueError("KL needs finite positive variances")
    inv_var_p = ad.exp(ad.negate(p_lv))
    ratio = ad.mul(ad.exp(q.log_var) + ad.square(q.mu - p_mu), inv_var_p)
    terms = p_lv - q.log_var + ratio - g.constant(np.ones(q.mu.shape))
    return ad.scale(ad.sum_(terms), 0.5)


def gaussian_kl_numpy(mu_q, var_q, mu_p, var_p) -> float:
    mu_q, var_q, mu_p, var_p = (np.asarray(a, dtype=np.float64) for a in (mu_q, var_q, mu_p, var_p))
    if np.any(var_q <= 0) or np.any(var_p <= 0):
        raise ValueError("KL needs positive variances")
    return float(0.5 * np.sum(np.log(var_p / var_q) + (var_q + (mu_q - mu_p) ** 2) / var_p - 1.0))


def expected_log_likelihood(targets, predictions, noise_std: float | None = None,
                            classification: bool = False) -> Node:
    """Single-sample log-likelihood of the query targets under one omega draw.

    Regression uses a Gaussian with fixed ``noise_std``; classification
    treats the ridge outputs as logits and ``targets`` as one-hot rows.
    """
    predictions = ad.lift(predictions)
    g = predictions.graph
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != predictions.shape:
        raise ShapeError(f"targets {targets.shape} vs predictions {predictions.shape}")
    if classification:
        return ad.sum_(ad.mul(g.constant(targets), ad.log_softmax_rows(predictions)))
    if noise_std is None or not noise_std > 0:
        raise ValueError(f"noise_std must be positive, got {noise_std}")
    resid = ad.sum_(ad.square(predictions - g.constant(targets)))
    const = -0.5 * targets.size * np.log(2.0 * np.pi * noise_std**2)
    return ad.scale(resid, -0.5 / noise_std**2) + g.constant(const)


def _aggregate_prior(prior: FrequencyPosterior) -> FrequencyPosterior:
    return FrequencyPosterior(ad.reshape(ad.mean(prior.mu, axis=0), (1, -1)),
                              ad.reshape(ad.mean(prior.log_var, axis=0), (1, -1)))


def _per_row(post: FrequencyPosterior, i: int) -> FrequencyPosterior:
    sl = (slice(i, i + 1), slice(None))
    return FrequencyPosterior(ad.slice_(post.mu, sl), ad.slice_(post.log_var, sl))


def meta_batch_elbo(graph: ad.Graph, net: MetaKernelNet, tasks: list[Task], cfg: TrainConfig,
                    noises: list[tuple[np.ndarray, np.ndarray]], state=None) -> list[ELBOTerms]:
    """ELBO terms for an ordered meta-batch; the inference state runs across it.

    ``noises`` holds one (eps, phase) pair per task; zero eps gives the
    posterior-mean kernel.
    """
    feats, pooled, reprs = [], [], []
    for task in tasks:
        zs = embed(net.embedding, graph.constant(task.support_x))
        zq = embed(net.embedding, graph.constant(task.query_x))
        pool = instance_pool(zs, class_labels(task))
        feats.append((zs, zq))
        pooled.append(pool)
        reprs.append(ad.reshape(ad.mean(pool, axis=0), (1, -1)))
    posteriors, _ = infer_sequence(net.inference, reprs, state)

    out = []
    for task, (zs, zq), pool, q, (eps, phase) in zip(tasks, feats, pooled, posteriors, noises):
        priors = prior_from_query(net.prior, zq, pool)
        if cfg.prior_aggregation == "mean-params":
            prior = _aggregate_prior(priors)
            kl = gaussian_kl(q, prior)
        else:
            prior = priors
            n_q = zq.shape[0]
            kl = ad.scale(ad.sum_(ad.concat([gaussian_kl(q, _per_row(priors, i)) for i in range(n_q)])), 1.0 / n_q)
        bases = reparameterize_sample(q, eps, phase)
        pred, _ = fit_predict(zs, task.support_y, zq, bases, cfg.ridge)
        ll = expected_log_likelihood(task.query_y, pred, cfg.noise_std, task.is_classification)
        elbo = ll - ad.scale(kl, cfg.beta)
        out.append(ELBOTerms(ll, kl, elbo, cfg.beta, pred, q, prior))
    return out


def episode_elbo(task: Task, net: MetaKernelNet, cfg: TrainConfig, rng: np.random.Generator | None = None,
                 noise=None, graph: ad.Graph | None = None) -> ELBOTerms:
    """ELBO for a single episode with a fresh inference state."""
    graph = graph or ad.Graph()
    if noise is None:
        noise = draw_noise(rng if rng is not None else np.random.default_rng(cfg.sampling_seed),
                           cfg.num_bases, net.feature_dim)
    return meta_batch_elbo(graph, net, [task], cfg, [noise])[0]


def param_gradients(graph: ad.Graph, loss: Node, params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    by_node = graph.backward(loss)
    lookup = {id(node.value): g for node, g in by_node.items()}
    return {name: lookup.get(id(arr), np.zeros_like(arr)) for name, arr in params.items()}


def sampling_rng(seed: int, stream: int, iteration: int, episode: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(stream), int(iteration), int(episode)]))


@dataclass
class IterationRecord:
    iteration: int
    elbo: float
    log_lik: float
    kl: float
    eval_metric: float | None = None


@dataclass
class TrainResult:
    net: MetaKernelNet
    optimizer: AdamState
    history: list[IterationRecord] = field(default_factory=list)


def training_step(net: MetaKernelNet, opt: AdamState, tasks: list[Task], cfg: TrainConfig,
                  iteration: int) -> IterationRecord:
    """One Adam step on the summed negative ELBO of a meta-batch."""
    graph = ad.Graph()
    noises = [draw_noise(sampling_rng(cfg.sampling_seed, 0, iteration, e), cfg.num_bases, net.feature_dim)
              for e in range(len(tasks))]
    terms = meta_batch_elbo(graph, net, tasks, cfg, noises)
    total = terms[0].elbo
    for t in terms[1:]:
        total = total + t.elbo
    loss = ad.negate(total)
    if not np.isfinite(loss.value.item()):
        raise ad.NonFiniteError(f"non-finite loss at iteration {iteration}")
    params = net.named_parameters()
    grads = param_gradients(graph, loss, params)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise ad.NonFiniteError(f"non-finite gradient for {name} at iteration {iteration}")
    adam_step(opt, params, grads)
    vals = np.array([t.floats() for t in terms])
    elbo, ll, kl = vals.mean(axis=0)
    return IterationRecord(iteration, float(elbo), float(ll), float(kl))


def meta_train(cfg: TrainConfig, net: MetaKernelNet, stream: Iterable[list[Task]],
               opt: AdamState | None = None, start_iteration: int = 0,
               on_iteration: Callable[[IterationRecord, MetaKernelNet, AdamState], None] | None = None) -> TrainResult:
    """Run the episodic loop over ``stream`` (one list of tasks per iteration)."""
    cfg.validate()
    opt = opt or AdamState(lr=cfg.lr)
    result = TrainResult(net, opt)
    for it, tasks in enumerate(stream, start=start_iteration):
        rec = training_step(net, opt, tasks, cfg, it)
        result.history.append(rec)
        if on_iteration is not None:
            on_iteration(rec, net, opt)
    return result


def predict_tasks(net: MetaKernelNet, tasks: list[Task], cfg: TrainConfig, mode: str = "sampled",
                  seed: int = 0, x_grids: list[np.ndarray] | None = None, start_index: int = 0) -> list[np.ndarray]:
    """Query predictions for each task, batched like training.

    ``mode`` is ``sampled``, ``mean`` (eps = 0) or ``baseline`` (untrained
    RFF on raw inputs).  With ``x_grids`` the predictions are made at those
    inputs instead of the task queries.
    """
    if mode not in ("sampled", "mean", "baseline"):
        raise ValueError(f"unknown evaluation mode {mode!r}")
    out = []
    batch = cfg.episodes_per_iteration
    for b0 in range(0, len(tasks), batch):
        chunk = tasks[b0:b0 + batch]
        if x_grids is not None:
            chunk = [Task(t.support_x, t.support_y, x_grids[b0 + i],
                          np.zeros((x_grids[b0 + i].shape[0], t.support_y.shape[1])), t.ways, t.shots, t.meta)
                     for i, t in enumerate(chunk)]
        rngs = [sampling_rng(seed, 1, start_index + b0 + i, 0) for i in range(len(chunk))]
        if mode == "baseline":
            for t, rng in zip(chunk, rngs):
                out.append(baseline_predict(t.support_x, t.support_y, t.query_x, cfg.num_bases, cfg.ridge, rng))
            continue
        noises = []
        for rng in rngs:
            eps, phase = draw_noise(rng, cfg.num_bases, net.feature_dim)
            noises.append((np.zeros_like(eps) if mode == "mean" else eps, phase))
        terms = meta_batch_elbo(ad.Graph(), net, chunk, cfg, noises)
        out.extend(t.predictions.value for t in terms)
    return out


def task_metric(task: Task, pred: np.ndarray) -> float:
    if task.is_classification:
        return float(np.mean(np.argmax(pred, axis=1) == np.argmax(task.query_y, axis=1)))
    return float(np.mean((pred - task.query_y) ** 2))


def evaluate(net: MetaKernelNet, tasks: list[Task], cfg: TrainConfig, mode: str = "sampled",
             seed: int = 0) -> dict:
    """Mean and std of per-task query MSE (regression) or accuracy (classification)."""
    if not tasks:
        raise ValueError("empty evaluation set")
    preds = predict_tasks(net, tasks, cfg, mode, seed)
    per_task = np.array([task_metric(t, p) for t, p in zip(tasks, preds)])
    return {
        "metric": "accuracy" if tasks[0].is_classification else "mse",
        "metric_mean": float(per_task.mean()),
        "metric_std": float(per_task.std()),
        "episodes": len(tasks),
        "mode": mode,
        "per_task": per_task,
    }
