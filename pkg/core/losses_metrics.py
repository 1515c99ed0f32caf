"""
Task losses and evaluation metrics for bag classification and discrete-time survival.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit
from scipy.stats import rankdata
from sklearn.metrics import accuracy_score, f1_score

from core import autodiff as ad
from core.autodiff import Tensor

logger = logging.getLogger(__name__)

PROB_CLAMP = 1e-7


@dataclass
class SurvivalRecord:
    """Observed (time, event) pair; ``bin_index`` is assigned by time_bins"""

    time: float
    event: int
    bin_index: Optional[int] = None

    def __post_init__(self):
        if self.time < 0:
            raise ValueError(f"Survival time must be nonnegative, got {self.time}")
        if self.event not in (0, 1):
            raise ValueError(f"Event indicator must be 0 or 1, got {self.event}")


# -- losses ------------------------------------------------------------------

def bce(logit, y: int) -> Tensor:
    """Binary cross-entropy on a logit: softplus(z) - y*z"""
    if y not in (0, 1):
        raise ValueError(f"Binary label must be 0 or 1, got {y}")
    z = ad.reshape(ad.as_tensor(logit), ())
    return ad.sub(ad.softplus(z), ad.scale(z, float(y)))


def cross_entropy(logits, y: int) -> Tensor:
    """Softmax cross-entropy of one C-way logit vector"""
    logits = ad.reshape(ad.as_tensor(logits), (-1,))
    if not 0 <= y < logits.shape[0]:
        raise ValueError(f"Class index {y} outside [0, {logits.shape[0]})")
    return ad.scale(ad.reshape(ad.gather(ad.log_softmax(logits), [y]), ()), -1.0)


def survival_nll(hazard_logits, bin_index: int, event: int, alpha: float = 0.0) -> Tensor:
    """
    Discrete-time survival negative log-likelihood

    With h_j = sigmoid(logit_j) clamped to [1e-7, 1 - 1e-7] and
    S(j) = prod_{k<=j} (1 - h_k):
        uncensored term  -e * [log S(j*-1) + log h_j*]
        censored term    -(1 - e) * log S(j*)
    and loss = (1 - alpha) * (both terms) + alpha * (uncensored term).

    Args:
        hazard_logits: J hazard logits
        bin_index: Bin j* of the record's time
        event: 1 if the event was observed, 0 if censored
        alpha: Weight moved onto the uncensored term

    Returns:
        Scalar loss tensor
    """
    logits = ad.reshape(ad.as_tensor(hazard_logits), (-1,))
    J = logits.shape[0]
    if not 0 <= bin_index < J:
        raise ValueError(f"Bin index {bin_index} outside [0, {J})")
    if event not in (0, 1):
        raise ValueError(f"Event indicator must be 0 or 1, got {event}")
    h = ad.clip(ad.sigmoid(logits), PROB_CLAMP, 1.0 - PROB_CLAMP)
    log_h = ad.log(h)
    log_s = ad.log(ad.sub(1.0, h))

    def _sum(t: Tensor, index: List[int]) -> Tensor:
        if not index:
            return ad.as_tensor(0.0, t)
        return ad.tensor_sum(ad.gather(t, index))

    uncensored = ad.scale(ad.add(_sum(log_s, list(range(bin_index))), _sum(log_h, [bin_index])), -float(event))
    censored = ad.scale(_sum(log_s, list(range(bin_index + 1))), -float(1 - event))
    total = ad.add(uncensored, censored)
    if alpha:
        total = ad.add(ad.scale(total, 1.0 - alpha), ad.scale(uncensored, alpha))
    return total


def survival_curve(hazard_logits: np.ndarray) -> np.ndarray:
    """S(j) = prod_{k<=j} (1 - h_k) for each bin"""
    h = np.clip(expit(np.asarray(hazard_logits, dtype=np.float64)), PROB_CLAMP, 1.0 - PROB_CLAMP)
    return np.cumprod(1.0 - h, axis=-1)


def risk_score(hazard_logits: np.ndarray) -> float:
    """Negative expected discrete survival, -sum_j S(j)"""
    logits = np.asarray(hazard_logits, dtype=np.float64).reshape(-1)
    if logits.size < 2:
        raise ValueError("Risk needs at least two hazard bins")
    return float(-np.sum(np.cumprod(1.0 - expit(logits))))


# -- binning -----------------------------------------------------------------

def time_bins(records: Sequence[SurvivalRecord], J: int) -> Tuple[np.ndarray, List[int]]:
    """
    Quantile bin edges of the uncensored times and the bin of every record

    Edges sit at the 1/J .. (J-1)/J quantiles; bin j covers (edge_{j-1}, edge_j],
    the first bin is open below and the last is closed above.

    Returns:
        (edges, bin indices); the indices are also written to ``record.bin_index``
    """
    if J < 2:
        raise ValueError(f"Need J >= 2 bins, got {J}")
    event_times = np.array([r.time for r in records if r.event == 1], dtype=np.float64)
    if event_times.size == 0:
        raise ValueError("Cannot place time bins without uncensored records")
    edges = np.quantile(event_times, np.arange(1, J) / J)
    if np.any(np.diff(edges) <= 0) or event_times.min() == event_times.max():
        raise ValueError(f"Degenerate time bins {edges.tolist()}: uncensored times are not spread enough for {J} bins")
    indices = assign_bins([r.time for r in records], edges)
    for record, j in zip(records, indices):
        record.bin_index = j
    return edges, indices


def assign_bins(times: Sequence[float], edges: np.ndarray) -> List[int]:
    return [int(j) for j in np.digitize(np.asarray(times, dtype=np.float64), edges, right=True)]


# -- metrics -----------------------------------------------------------------

def c_index(risks: Sequence[float], records: Sequence[SurvivalRecord]) -> float:
    """
    Concordance over comparable pairs (t_i < t_k, e_i = 1); risk ties count 0.5
    """
    risks = np.asarray(risks, dtype=np.float64)
    times = np.array([r.time for r in records], dtype=np.float64)
    events = np.array([r.event for r in records])
    if risks.shape != times.shape:
        raise ValueError(f"Got {risks.size} risks for {times.size} records")
    concordant = 0.0
    comparable = 0
    for i in np.flatnonzero(events == 1):
        later = times > times[i]
        count = int(later.sum())
        if count == 0:
            continue
        comparable += count
        concordant += float(np.sum(risks[i] > risks[later])) + 0.5 * float(np.sum(risks[i] == risks[later]))
    if comparable == 0:
        raise ValueError("No comparable pairs: c-index is undefined")
    return concordant / comparable


def auc_score(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Rank-statistic (Mann-Whitney) AUC with average ranks for ties"""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes among the labels")
    ranks = rankdata(scores)
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def binary_metrics(scores: Sequence[float], labels: Sequence[int]) -> Dict[str, float]:
    """
    Accuracy and F1 at threshold 0.5 plus AUC

    Args:
        scores: Sigmoid outputs in [0, 1]
        labels: Binary bag labels

    Returns:
        Dictionary with 'accuracy', 'f1' and 'auc' (NaN when AUC is undefined)
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    predictions = (scores >= 0.5).astype(int)
    results = {
        'accuracy': float(accuracy_score(labels, predictions)),
        'f1': float(f1_score(labels, predictions, zero_division=0)),
    }
    try:
        results['auc'] = auc_score(scores, labels)
    except ValueError as e:
        logger.warning(f"AUC not reported: {e}")
        results['auc'] = float('nan')
    return results


def multiclass_metrics(probabilities: np.ndarray, labels: Sequence[int]) -> Dict[str, float]:
    """Accuracy and macro-F1 of argmax predictions"""
    predictions = np.argmax(np.asarray(probabilities), axis=-1)
    labels = np.asarray(labels).astype(int)
    return {
        'accuracy': float(accuracy_score(labels, predictions)),
        'f1': float(f1_score(labels, predictions, average='macro', zero_division=0)),
    }
