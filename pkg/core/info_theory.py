"""
Exact information quantities on finite joint distributions.

A joint is a probability table with named axes: 'x' (instance content),
'p' (instance positions) and 'y' (label). Entropies are in bits and
0 * log 0 is taken as 0.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Sequence, Tuple, Union

import numpy as np
from scipy.special import xlogy

logger = logging.getLogger(__name__)

NORMALIZATION_TOL = 1e-12


@dataclass
class DiscreteJoint:
    """Probability table over finite alphabets, one named axis per variable"""

    table: np.ndarray
    axes: Tuple[str, ...] = ('x', 'p', 'y')

    def __post_init__(self):
        self.table = np.asarray(self.table, dtype=np.float64)
        self.axes = tuple(self.axes)
        if self.table.ndim != len(self.axes):
            raise ValueError(f"Table of rank {self.table.ndim} does not match axes {self.axes}")
        if len(set(self.axes)) != len(self.axes):
            raise ValueError(f"Axis names must be distinct: {self.axes}")
        if np.any(self.table < 0):
            raise ValueError("Joint table has negative mass")
        total = float(self.table.sum())
        if abs(total - 1.0) > NORMALIZATION_TOL:
            raise ValueError(f"Joint table sums to {total!r}, not 1")

    @property
    def sizes(self) -> Dict[str, int]:
        return dict(zip(self.axes, self.table.shape))

    def marginal(self, keep: Sequence[str]) -> np.ndarray:
        """Marginal table over ``keep`` (in this joint's axis order)"""
        unknown = set(keep) - set(self.axes)
        if unknown:
            raise ValueError(f"Unknown axes {sorted(unknown)}; joint has {self.axes}")
        drop = tuple(i for i, name in enumerate(self.axes) if name not in keep)
        return self.table.sum(axis=drop)


def _entropy_bits(p: np.ndarray) -> float:
    return float(-np.sum(xlogy(p, p)) / math.log(2.0))


def entropy(joint: DiscreteJoint, target: Union[str, Sequence[str]]) -> float:
    targets = (target,) if isinstance(target, str) else tuple(target)
    return _entropy_bits(joint.marginal(targets))


def conditional_entropy(joint: DiscreteJoint, target: Union[str, Sequence[str]],
                        given: Union[str, Sequence[str]] = ()) -> float:
    """H(target | given) = H(target, given) - H(given), in bits"""
    targets = (target,) if isinstance(target, str) else tuple(target)
    givens = (given,) if isinstance(given, str) else tuple(given)
    if set(targets) & set(givens):
        raise ValueError("Target and conditioning variables overlap")
    joint_entropy = _entropy_bits(joint.marginal(targets + givens))
    if not givens:
        return joint_entropy
    return joint_entropy - _entropy_bits(joint.marginal(givens))


@dataclass
class ConditioningGain:
    h_y_given_x: float
    h_y_given_xp: float
    cmi: float


def conditioning_gain(joint: DiscreteJoint) -> ConditioningGain:
    """
    How much knowing positions P reduces label uncertainty beyond content X

    Returns:
        H(Y|X), H(Y|X,P) and their difference I(Y; P | X), which is
        nonnegative and zero iff P and Y are conditionally independent given X
    """
    if set(joint.axes) != {'x', 'p', 'y'}:
        raise ValueError(f"Need a joint over (x, p, y), got axes {joint.axes}")
    h_x = conditional_entropy(joint, 'y', ('x',))
    h_xp = conditional_entropy(joint, 'y', ('x', 'p'))
    return ConditioningGain(h_y_given_x=h_x, h_y_given_xp=h_xp, cmi=h_x - h_xp)


@dataclass
class HellmanResult:
    bayes_error: float
    bound: float
    holds: bool


def hellman_bound(joint: DiscreteJoint) -> HellmanResult:
    """
    Bayes error sum_x p(x) (1 - max_y p(y|x)) against the bound H(Y|X) / 2 (bits)
    """
    if not {'x', 'y'} <= set(joint.axes):
        raise ValueError(f"Need 'x' and 'y' axes, got {joint.axes}")
    xy = joint.marginal(('x', 'y'))
    if joint.axes.index('x') > joint.axes.index('y'):
        xy = xy.T
    bayes_error = float(1.0 - np.sum(xy.max(axis=1)))
    bound = 0.5 * conditional_entropy(joint, 'y', ('x',))
    return HellmanResult(bayes_error=bayes_error, bound=bound, holds=bayes_error <= bound + 1e-12)


# -- constructions -----------------------------------------------------------

def random_joint(rng: np.random.Generator, sizes: Sequence[int] = (3, 3, 2),
                 axes: Sequence[str] = ('x', 'p', 'y'), concentration: float = 1.0) -> DiscreteJoint:
    """Dirichlet draw over all cells"""
    weights = rng.dirichlet(np.full(int(np.prod(sizes)), concentration))
    return DiscreteJoint(weights.reshape(tuple(sizes)), tuple(axes))


def conditionally_independent_joint(rng: np.random.Generator, sizes: Sequence[int] = (3, 3, 2)) -> DiscreteJoint:
    """p(x, p, y) = p(x) p(p|x) p(y|x)"""
    nx, npos, ny = sizes
    p_x = rng.dirichlet(np.ones(nx))
    p_pos = rng.dirichlet(np.ones(npos), size=nx)
    p_y = rng.dirichlet(np.ones(ny), size=nx)
    table = p_x[:, None, None] * p_pos[:, :, None] * p_y[:, None, :]
    return DiscreteJoint(table / table.sum())


def builtin_joints() -> Dict[str, DiscreteJoint]:
    """Reference tables shown by the entropy demo"""
    copy_of_label = np.zeros((2, 2, 2))
    for x in range(2):
        for y in range(2):
            copy_of_label[x, y, y] = 0.25
    coin = np.full((2, 2, 2), 0.125)
    return {
        'binary-symmetric': DiscreteJoint(np.array([[0.4, 0.1], [0.1, 0.4]]), ('x', 'y')),
        'position-copies-label': DiscreteJoint(copy_of_label),
        'independent-coin': DiscreteJoint(coin),
    }


def parse_joint_table(text: str) -> DiscreteJoint:
    """
    Parse a plain-text joint table

    The first non-comment line holds the alphabet sizes (two numbers for an
    (x, y) joint, three for (x, p, y)); the remaining lines hold the
    probabilities in row-major order, separated by whitespace or commas.
    """
    sizes = None
    values = []
    for line_number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        tokens = line.replace(',', ' ').split()
        try:
            parsed = [int(t) for t in tokens] if sizes is None else [float(t) for t in tokens]
        except ValueError:
            raise ValueError(f"line {line_number}: cannot parse {line!r}") from None
        if sizes is None:
            if len(parsed) not in (2, 3) or min(parsed) < 1:
                raise ValueError(f"line {line_number}: need two or three positive alphabet sizes, got {line!r}")
            sizes = parsed
        else:
            values.extend(parsed)
    if sizes is None:
        raise ValueError("Joint table is empty")
    expected = int(np.prod(sizes))
    if len(values) != expected:
        raise ValueError(f"Alphabet sizes {sizes} need {expected} probabilities, got {len(values)}")
    axes = ('x', 'y') if len(sizes) == 2 else ('x', 'p', 'y')
    return DiscreteJoint(np.asarray(values).reshape(sizes), axes)


def load_joint_table(path: Union[str, Path]) -> DiscreteJoint:
    return parse_joint_table(Path(path).read_text(encoding='utf-8'))


def describe_joint(joint: DiscreteJoint) -> Dict[str, float]:
    """The quantities printed by the entropy demo"""
    summary = {'H(Y)': entropy(joint, 'y'), 'H(Y|X)': conditional_entropy(joint, 'y', ('x',))}
    if 'p' in joint.axes:
        gain = conditioning_gain(joint)
        summary.update({'H(Y|X,P)': gain.h_y_given_xp, 'I(Y;P|X)': gain.cmi})
    hellman = hellman_bound(joint)
    summary.update({'bayes_error': hellman.bayes_error, 'hellman_bound': hellman.bound})
    return summary
