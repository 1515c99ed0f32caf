"""
Numerical checks of the optimal-transport reading of the equivalence loss.

Forward problem: the earth mover's distance between two equally weighted
point sets under a quadratic cost, solved exactly (enumeration or the
Hungarian assignment) and approximately (entropic Sinkhorn with annealing).
Inverse problem: with the observed plan fixed to the transposed shuffle
matrix, the inverse-OT objective collapses to a squared Frobenius norm.
"""

import itertools
import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import logsumexp

from core import permutation
from core.permutation import Permutation

logger = logging.getLogger(__name__)

BRUTEFORCE_LIMIT = 8
COST_KINDS = ('quadratic', 'feature')


@dataclass
class CostMatrix:
    C: np.ndarray
    kind: str = 'quadratic'

    def __post_init__(self):
        self.C = np.asarray(self.C, dtype=np.float64)
        if self.C.ndim != 2:
            raise ValueError(f"Cost matrix must be 2-D, got shape {self.C.shape}")
        if self.kind not in COST_KINDS:
            raise ValueError(f"Unknown cost kind: {self.kind}")
        if np.any(self.C < 0):
            raise ValueError("Cost entries must be nonnegative")


@dataclass
class TransportPlan:
    T: np.ndarray
    cost: float
    converged: bool = True
    violation: float = 0.0
    iterations: int = 0
    epsilon: float = 0.0

    def marginals(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.T.sum(axis=1), self.T.sum(axis=0)


def _points(coords) -> np.ndarray:
    points = np.asarray(coords, dtype=np.float64)
    return points.reshape(-1, 1) if points.ndim == 1 else points


def quadratic_cost(P, Q) -> CostMatrix:
    """C[i, j] = ||P_i - Q_j||^2 between two equally sized point sets"""
    P, Q = _points(P), _points(Q)
    if P.shape != Q.shape:
        raise ValueError(f"Point sets must have the same shape, got {P.shape} and {Q.shape}")
    diff = P[:, None, :] - Q[None, :, :]
    return CostMatrix(np.sum(diff * diff, axis=-1), 'quadratic')


def emd_bruteforce(P, Q) -> TransportPlan:
    """
    Exact EMD with uniform 1/n marginals by enumerating all n! assignments

    Uniform marginals make some permutation plan optimal, so the minimum over
    permutations of (1/n) * sum_i C[i, sigma(i)] is the transport cost.
    """
    C = quadratic_cost(P, Q).C
    n = C.shape[0]
    if n > BRUTEFORCE_LIMIT:
        raise ValueError(f"emd_bruteforce enumerates n! plans and accepts n <= {BRUTEFORCE_LIMIT}, got n={n}; "
                         f"use sinkhorn or emd_assignment for larger sets")
    rows = np.arange(n)
    best_cost, best = math.inf, None
    for sigma in itertools.permutations(range(n)):
        cost = C[rows, sigma].sum() / n
        if cost < best_cost:
            best_cost, best = cost, sigma
    T = np.zeros((n, n))
    T[rows, best] = 1.0 / n
    return TransportPlan(T=T, cost=float(best_cost))


def emd_assignment(P, Q) -> TransportPlan:
    """Exact EMD with uniform marginals via the Hungarian assignment"""
    C = quadratic_cost(P, Q).C
    n = C.shape[0]
    rows, cols = linear_sum_assignment(C)
    T = np.zeros((n, n))
    T[rows, cols] = 1.0 / n
    return TransportPlan(T=T, cost=float(C[rows, cols].sum() / n))


def sinkhorn(C, epsilon: float, max_iters: int = 1000, tol: float = 1e-9,
             a: Optional[np.ndarray] = None, b: Optional[np.ndarray] = None,
             potentials: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> Tuple[TransportPlan, Tuple[np.ndarray, np.ndarray]]:
    """
    Entropic OT by alternating log-domain scaling of the dual potentials

    Args:
        C: (n, m) nonnegative cost matrix (array or CostMatrix)
        epsilon: Entropic regularization strength (> 0)
        max_iters: Iteration cap
        tol: Marginal violation accepted as convergence
        a, b: Source and target weights; uniform when omitted
        potentials: Warm-start (f, g)

    Returns:
        (plan, (f, g)); ``plan.converged`` is False when the cap was hit
    """
    C = C.C if isinstance(C, CostMatrix) else CostMatrix(C).C
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    n, m = C.shape
    a = np.full(n, 1.0 / n) if a is None else np.asarray(a, dtype=np.float64)
    b = np.full(m, 1.0 / m) if b is None else np.asarray(b, dtype=np.float64)
    log_a, log_b = np.log(a), np.log(b)
    f, g = (np.zeros(n), np.zeros(m)) if potentials is None else (potentials[0].copy(), potentials[1].copy())

    violation = math.inf
    iteration = 0
    for iteration in range(1, max_iters + 1):
        f = epsilon * (log_a - logsumexp((g[None, :] - C) / epsilon, axis=1))
        g = epsilon * (log_b - logsumexp((f[:, None] - C) / epsilon, axis=0))
        # columns are exact after the g update; rows carry the residual
        row_sums = np.exp(logsumexp((f[:, None] + g[None, :] - C) / epsilon, axis=1))
        violation = float(np.max(np.abs(row_sums - a)))
        if violation < tol:
            break

    T = np.exp((f[:, None] + g[None, :] - C) / epsilon)
    converged = violation < tol
    if not converged:
        logger.warning(f"Sinkhorn did not converge in {max_iters} iterations at epsilon={epsilon:.3g}: "
                       f"marginal violation {violation:.3e}")
    plan = TransportPlan(T=T, cost=float(np.sum(T * C)), converged=converged, violation=violation,
                         iterations=iteration, epsilon=epsilon)
    return plan, (f, g)


def sinkhorn_annealed(C, stages: int = 10, factor: float = 0.5, start: float = 0.02,
                      max_iters: int = 1000, tol: float = 1e-9) -> TransportPlan:
    """
    Sinkhorn over a geometric epsilon schedule, warm-starting each stage

    Epsilon starts at ``start`` times the largest cost entry and is multiplied
    by ``factor`` after every stage.
    """
    C = C.C if isinstance(C, CostMatrix) else CostMatrix(C).C
    if stages < 1 or not 0 < factor < 1:
        raise ValueError("Annealing needs stages >= 1 and 0 < factor < 1")
    scale = float(C.max()) or 1.0
    epsilon = start * scale
    potentials = None
    plan = None
    for _ in range(stages):
        plan, potentials = sinkhorn(C, epsilon, max_iters=max_iters, tol=tol, potentials=potentials)
        epsilon *= factor
    return plan


def inverse_ot_objective(F, F_prime, perm: Permutation) -> float:
    """
    sum_ij (P_sigma^T)_ij * ||F_i - F'_j||^2, the inverse-OT objective with the
    observed plan fixed to the transposed shuffle matrix
    """
    F = np.asarray(F, dtype=np.float64)
    F_prime = np.asarray(F_prime, dtype=np.float64)
    if F.shape != F_prime.shape or F.ndim != 2:
        raise ValueError(f"Feature maps must share one (n, k) shape, got {F.shape} and {F_prime.shape}")
    if perm.n != F.shape[0]:
        raise ValueError(f"Permutation of size {perm.n} for {F.shape[0]} rows")
    diff = F[:, None, :] - F_prime[None, :, :]
    distances = np.sum(diff * diff, axis=-1)
    return float(np.sum(permutation.to_matrix(perm).T * distances))


def matrix_form_check(F, F_prime, perm: Permutation) -> float:
    """|inverse-OT objective - ||apply(sigma, F) - F'||_F^2|"""
    objective = inverse_ot_objective(F, F_prime, perm)
    gap = permutation.apply(perm, np.asarray(F, dtype=np.float64)) - np.asarray(F_prime, dtype=np.float64)
    return abs(objective - float(np.sum(gap * gap)))


def random_coordinates(n: int, rng: np.random.Generator, dim: int = 2) -> np.ndarray:
    return rng.uniform(0.0, 1.0, size=(n, dim))


def shuffled_emd(coords: Sequence, perm: Permutation) -> float:
    """EMD between a point set and its own shuffle (zero by rematching)"""
    points = _points(coords)
    solver = emd_bruteforce if points.shape[0] <= BRUTEFORCE_LIMIT else emd_assignment
    return solver(points, permutation.apply(perm, points)).cost
