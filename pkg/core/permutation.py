"""
The shuffling operator and permutation-matrix algebra.

A permutation sigma acts on the leading axis: row i of the shuffled array
is row sigma[i] of the input, i.e. X_sigma = P_sigma X with
(P_sigma)[i, j] = 1 iff j == sigma[i].
"""

from dataclasses import dataclass
from typing import Sequence, Tuple, Union

import numpy as np

from core import autodiff as ad


@dataclass(frozen=True)
class Permutation:
    """Bijection on {0..n-1}, stored as its index list"""

    sigma: Tuple[int, ...]

    def __post_init__(self):
        sigma = tuple(int(i) for i in self.sigma)
        if sorted(sigma) != list(range(len(sigma))):
            raise ValueError(f"Not a permutation of 0..{len(sigma) - 1}: {sigma}")
        object.__setattr__(self, 'sigma', sigma)

    def __len__(self) -> int:
        return len(self.sigma)

    @property
    def n(self) -> int:
        return len(self.sigma)

    @classmethod
    def identity(cls, n: int) -> 'Permutation':
        return cls(tuple(range(n)))

    def is_identity(self) -> bool:
        return self.sigma == tuple(range(self.n))

    def compose(self, other: 'Permutation') -> 'Permutation':
        """(self o other), the permutation whose matrix is P_self @ P_other"""
        if self.n != other.n:
            raise ValueError(f"Cannot compose permutations of sizes {self.n} and {other.n}")
        return Permutation(tuple(other.sigma[i] for i in self.sigma))

    def as_array(self) -> np.ndarray:
        return np.asarray(self.sigma, dtype=np.intp)


def sample(n: int, rng: np.random.Generator) -> Permutation:
    """Uniform draw from S_n by a Fisher-Yates pass over the generator"""
    if n < 1:
        raise ValueError("Cannot sample a permutation of an empty index set")
    sigma = list(range(n))
    for i in range(n - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        sigma[i], sigma[j] = sigma[j], sigma[i]
    return Permutation(tuple(sigma))


def apply(perm: Permutation, X: Union[np.ndarray, ad.Tensor]):
    """Shuffle the leading axis of ``X``: row i of the result is row sigma(i)"""
    if not isinstance(X, ad.Tensor):
        X = np.asarray(X)
    n = X.shape[0] if X.ndim > 0 else 0
    if n != perm.n:
        raise ValueError(f"Permutation of size {perm.n} cannot shuffle {n} rows")
    if isinstance(X, ad.Tensor):
        return ad.gather(X, perm.sigma, axis=0)
    return X[perm.as_array()]


def inverse(perm: Permutation) -> Permutation:
    inv = np.empty(perm.n, dtype=np.intp)
    inv[perm.as_array()] = np.arange(perm.n)
    return Permutation(tuple(inv))


def to_matrix(perm: Permutation) -> np.ndarray:
    P = np.zeros((perm.n, perm.n))
    P[np.arange(perm.n), perm.as_array()] = 1.0
    return P


def from_sequence(sigma: Sequence[int]) -> Permutation:
    return Permutation(tuple(sigma))
