"""Reparameterized random Fourier features and the kernel ridge base learner."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node, ShapeError
from .networks import FrequencyPosterior


class KernelSolveError(np.linalg.LinAlgError):
    pass


@dataclass
class SampledBases:
    omega: Node  # D x d
    phase: np.ndarray  # D, uniform in [0, 2 pi)

    @property
    def num_bases(self) -> int:
        return self.omega.shape[0]


@dataclass
class KernelRidgeSolution:
    alpha: Node
    ridge: float
    support_features: Node | None = None


def draw_noise(rng: np.random.Generator, num_bases: int, dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Standard-normal frequency noise and uniform phases for one episode."""
    eps = rng.standard_normal((num_bases, dim))
    phase = rng.uniform(0.0, 2.0 * np.pi, size=num_bases)
    return eps, phase


def reparameterize_sample(post: FrequencyPosterior, eps, phase) -> SampledBases:
    """omega_j = mu + sigma * eps_j, differentiable in mu and log_var."""
    eps = np.asarray(eps, dtype=np.float64)
    phase = np.asarray(phase, dtype=np.float64)
    if eps.ndim != 2 or eps.shape[1] != post.width:
        raise ShapeError(f"noise must be D x {post.width}, got {eps.shape}")
    if phase.shape != (eps.shape[0],):
        raise ShapeError(f"phase must have length {eps.shape[0]}, got {phase.shape}")
    D = eps.shape[0]
    sigma = ad.exp(ad.scale(post.log_var, 0.5))
    if not np.all(np.isfinite(sigma.value)):
        raise ad.NonFiniteError("posterior standard deviation is not finite")
    g = post.mu.graph
    omega = ad.broadcast_rows(post.mu, D) + ad.broadcast_rows(sigma, D) * g.constant(eps)
    return SampledBases(omega, phase)


def rff_feature_map(features, bases: SampledBases) -> Node:
    """z(x)_j = sqrt(2/D) cos(omega_j . x + b_j), one row per input."""
    omega = bases.omega
    features = ad.lift(features, omega.graph)
    if features.value.ndim != 2 or features.shape[1] != omega.shape[1]:
        raise ShapeError(f"features {features.shape} do not match frequency width {omega.shape[1]}")
    D = bases.num_bases
    proj = ad.matmul(features, ad.transpose(omega))
    proj = proj + ad.broadcast_rows(omega.graph.constant(bases.phase), features.shape[0])
    return ad.scale(ad.cos(proj), np.sqrt(2.0 / D))


def kernel_matrix(z_s) -> Node:
    z_s = ad.lift(z_s)
    return ad.matmul(z_s, ad.transpose(z_s))


def solve_krr(K, targets, ridge: float, support_features=None) -> KernelRidgeSolution:
    """alpha = (K + ridge I)^{-1} targets via Cholesky."""
    if not ridge > 0:
        raise ValueError(f"ridge must be positive, got {ridge}")
    K = ad.lift(K)
    g = K.graph
    targets = ad.lift(targets, g)
    n = K.shape[0]
    regularized = K + g.constant(ridge * np.eye(n))
    try:
        alpha = ad.spd_solve(regularized, targets)
    except np.linalg.LinAlgError as exc:
        raise KernelSolveError(f"K + {ridge} I is not positive definite: {exc}") from exc
    if support_features is not None:
        support_features = ad.lift(support_features, g)
    return KernelRidgeSolution(alpha, float(ridge), support_features)


def predict(sol: KernelRidgeSolution, z_q) -> Node:
    if sol.support_features is None:
        raise ValueError("solution carries no support features")
    z_s = sol.support_features
    z_q = ad.lift(z_q, z_s.graph)
    if z_q.value.ndim != 2 or z_q.shape[1] != z_s.shape[1]:
        raise ShapeError(f"query features {z_q.shape} do not match support features {z_s.shape}")
    return ad.matmul(ad.matmul(z_q, ad.transpose(z_s)), sol.alpha)


def fit_predict(support_features, support_y, query_features, bases: SampledBases, ridge: float):
    """Map both sets through the bases, fit ridge on support, predict the queries."""
    z_s = rff_feature_map(support_features, bases)
    z_q = rff_feature_map(query_features, bases)
    sol = solve_krr(kernel_matrix(z_s), support_y, ridge, support_features=z_s)
    return predict(sol, z_q), sol


def baseline_predict(support_x, support_y, query_x, num_bases: int, ridge: float,
                     rng: np.random.Generator, bandwidth: float = 1.0) -> np.ndarray:
    """Untrained RFF ridge regression on raw inputs with omega ~ N(0, bandwidth^-2 I)."""
    support_x = np.asarray(support_x, dtype=np.float64)
    d = support_x.shape[1]
    eps, phase = draw_noise(rng, num_bases, d)
    g = ad.Graph()
    bases = SampledBases(g.constant(eps / bandwidth), phase)
    pred, _ = fit_predict(g.constant(support_x), support_y, query_x, bases, ridge)
    return pred.value
