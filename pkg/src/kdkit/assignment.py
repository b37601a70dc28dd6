"""Per-pixel template assignment: exact vertex solver, entropy-smoothed
closed form, an independent iterative oracle, and the BN-ReLU surrogate.

The problem: given similarity scores a_k and a rejection threshold mu,
distribute unit mass over K template slots plus one rejection slot so that
q * mu + sum_k p_k * a_k is maximal (optionally entropy-regularized with
smoothness epsilon).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, batch_norm, relu


@dataclass
class AssignmentProblem:
    a: np.ndarray          # similarity scores, shape (K,)
    mu: float              # rejection threshold, same scale as a
    epsilon: float = 1.0   # smoothness, > 0 for the smoothed solver

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.float64)
        if self.a.ndim != 1 or self.a.size < 1:
            raise ValueError("AssignmentProblem: a must be a vector with K >= 1")


@dataclass
class AssignmentSolution:
    p: np.ndarray   # nonnegative, shape (K,)
    q: float        # rejection mass; q + sum(p) == 1

    def total_variation(self, other: "AssignmentSolution") -> float:
        full_a = np.append(self.p, self.q)
        full_b = np.append(other.p, other.q)
        return 0.5 * float(np.abs(full_a - full_b).sum())


def solve_hard(problem: AssignmentProblem) -> AssignmentSolution:
    """Exact maximizer of q*mu + sum p_k a_k over the extended simplex.

    The optimum is a vertex: all mass on the largest coefficient. Ties are
    broken rejection-first, then lowest kernel index.
    """
    a, mu = problem.a, problem.mu
    p = np.zeros_like(a)
    best = float(a.max())
    if mu >= best:
        return AssignmentSolution(p=p, q=1.0)
    p[int(np.argmax(a))] = 1.0
    return AssignmentSolution(p=p, q=0.0)


def solve_smooth(problem: AssignmentProblem) -> AssignmentSolution:
    """Closed-form entropy-smoothed assignment.

    p_k = exp(eps*a_k) / (exp(eps*mu) + sum exp(eps*a_k')), q the rejection
    share; stabilized by max subtraction.
    """
    if problem.epsilon <= 0:
        raise ValueError("solve_smooth: epsilon must be > 0")
    z = problem.epsilon * np.append(problem.a, problem.mu)
    z -= z.max()
    e = np.exp(z)
    e /= e.sum()
    return AssignmentSolution(p=e[:-1], q=float(e[-1]))


def oracle_smooth(problem: AssignmentProblem, tol: float = 1e-10,
                  max_iter: int = 100_000) -> AssignmentSolution:
    """Entropy-smoothed assignment by exponentiated-gradient ascent.

    Maximizes q*mu + p.a - (1/eps)(q log q + p.log p) on the extended simplex,
    iterating in log space until the gradient is constant across the support
    (first-order stationarity below ``tol``). Independent of the closed form.

    The natural curvature scale of the objective is 1/eps, so the step size is
    0.5 * eps (half the exactly-solving step), giving a uniform linear rate.
    """
    eps = problem.epsilon
    if eps <= 0:
        raise ValueError("oracle_smooth: epsilon must be > 0")
    c = np.append(problem.a, problem.mu)  # linear coefficients, rejection last
    n = c.size
    step = 0.5 * eps
    logw = np.full(n, -np.log(n))
    for _ in range(max_iter):
        grad = c - (logw + 1.0) / eps
        w = np.exp(logw)
        resid = float(np.max(np.abs(grad - (w * grad).sum())))
        if resid < tol:
            return AssignmentSolution(p=w[:-1], q=float(w[-1]))
        logw = logw + step * grad
        logw -= _logsumexp(logw)
    raise RuntimeError(f"oracle_smooth: no convergence after {max_iter} iterations")


def _logsumexp(z: np.ndarray) -> float:
    m = z.max()
    return m + np.log(np.exp(z - m).sum())


def bn_relu_assignment(a_batch, bn_state, mode: str = "train") -> Tensor:
    """BN-ReLU surrogate for the smoothed assignment.

    Whitens the similarity scores per channel and rectifies; the result is an
    unnormalized assignment weight, used as-is downstream (the normalizer is
    absorbed into the learnable output scale).
    """
    return relu(batch_norm(a_batch, bn_state, mode))


def normalized_bn_relu_assignment(a_batch, bn_state, mode: str = "train") -> np.ndarray:
    """Diagnostic-only normalized view: rows divided by their sum when positive."""
    p_hat = bn_relu_assignment(a_batch, bn_state, mode).data
    totals = p_hat.sum(axis=-1, keepdims=True)
    return np.where(totals > 0, p_hat / np.where(totals > 0, totals, 1.0), 0.0)


def taylor_gap(a_prime: float) -> float:
    """|exp(a') - (1 + a')|: the first-order linearization error of exp."""
    return float(abs(np.exp(a_prime) - (1.0 + a_prime)))
