"""
One-dimensional class activation maps.

With a global-average-pooling head, logit_c = mean_i(sum_l w_l^c F_i[l]) + b_c,
so the per-slot term CAM_i = sum_l w_l^c F_i[l] distributes the class
evidence over slots.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np

from core import autodiff as ad
from core.data_handler import Bag
from core.losses_metrics import auc_score
from core.nets import MILModel, squaring_index
from utils.file_operations import FileOperations

logger = logging.getLogger(__name__)

GAP_HEAD_VARIANTS = ('transformer', 'cnn', 'mean')


@dataclass
class CamResult:
    """Slot scores for one class; ``instance_scores`` are the first n (real) slots"""

    slot_scores: np.ndarray
    n: int
    m: int
    class_index: int
    bias: float

    @property
    def instance_scores(self) -> np.ndarray:
        return self.slot_scores[:self.n]

    @property
    def logit(self) -> float:
        return float(self.slot_scores.mean() + self.bias)

    @property
    def pad_count(self) -> int:
        return self.slot_scores.size - self.n


def cam(F, head_weights: Tuple[np.ndarray, np.ndarray], class_c: int, n: Optional[int] = None) -> CamResult:
    """
    CAM_i = sum_l W[l, c] * F_i[l] for every slot

    Args:
        F: (S, k) slot features
        head_weights: (W of shape (k, width), b of shape (width,))
        class_c: Class (head column) to explain
        n: Number of real instances; defaults to all slots

    Returns:
        CamResult whose slot mean plus bias reconstructs the class logit
    """
    F = np.asarray(F, dtype=np.float64)
    W, b = (np.asarray(a, dtype=np.float64) for a in head_weights)
    if F.ndim != 2 or W.ndim != 2 or W.shape[0] != F.shape[1]:
        raise ValueError(f"Head weights {W.shape} do not fit features {F.shape}")
    if not 0 <= class_c < W.shape[1]:
        raise ValueError(f"Class {class_c} outside the head's {W.shape[1]} outputs")
    slots = F.shape[0]
    n = slots if n is None else n
    if not 1 <= n <= slots:
        raise ValueError(f"Instance count {n} outside [1, {slots}]")
    m = int(np.ceil(np.sqrt(slots)))
    return CamResult(slot_scores=F @ W[:, class_c], n=n, m=m, class_index=class_c, bias=float(b[class_c]))


def cam_localization_auc(result: CamResult, instance_labels: Sequence[int]) -> float:
    """AUC of the real instances' CAM scores against their ground-truth labels"""
    labels = np.asarray(instance_labels).astype(int).reshape(-1)
    if labels.size != result.n:
        raise ValueError(f"Got {labels.size} instance labels for {result.n} instances")
    return auc_score(result.instance_scores, labels)


class CamExplainer:
    """Computes and exports class activation maps of a trained model"""

    def __init__(self, model: MILModel):
        if model.config.variant not in GAP_HEAD_VARIANTS:
            raise ValueError(f"CAM needs a global-average-pooling head; '{model.config.variant}' has none")
        self.model = model
        self.logger = logging.getLogger(__name__)

    def explain(self, bag: Bag, class_c: int = 0) -> CamResult:
        with ad.no_grad():
            F = self.model.forward_backbone(ad.Tensor(bag.features.astype(ad.get_default_dtype())))
        return cam(F.numpy(), self.model.head_weights(), class_c, n=bag.n)

    @staticmethod
    def score_grid(result: CamResult, bag: Bag) -> np.ndarray:
        """Scores laid out on the bag's coordinate grid (or the squaring grid when coordinates are absent)"""
        if bag.coords is not None:
            rows, cols = bag.coords[:, 0].astype(int), bag.coords[:, 1].astype(int)
            grid = np.full((rows.max() + 1, cols.max() + 1), np.nan)
            grid[rows, cols] = result.instance_scores
            return grid
        _, m, _ = squaring_index(result.n)
        grid = np.full(m * m, np.nan)
        grid[:result.n] = result.instance_scores
        return grid.reshape(m, m)

    def export(self, result: CamResult, bag: Bag, out_dir: Union[str, Path], stem: str = 'cam',
               png: bool = False) -> Dict[str, str]:
        """
        Write per-instance records (.jsonl), a portable graymap (.pgm) and optionally a PNG heatmap

        Returns:
            Mapping kind -> written path
        """
        out_dir = Path(out_dir)
        files = FileOperations(out_dir)
        records = []
        for i, score in enumerate(result.instance_scores):
            record = {'instance': i, 'score': float(score)}
            if bag.coords is not None:
                record['row'], record['col'] = int(bag.coords[i, 0]), int(bag.coords[i, 1])
            records.append(record)
        written = {'records': files.write_jsonl(records, out_dir / f"{stem}.jsonl")}

        grid = self.score_grid(result, bag)
        try:
            written['pgm'] = str(write_pgm(grid, out_dir / f"{stem}.pgm"))
            if png:
                written['png'] = str(write_png(grid, out_dir / f"{stem}.png"))
        except OSError as e:
            self.logger.error(f"Error writing CAM image: {str(e)}")
            raise
        self.logger.info(f"CAM exports: {', '.join(written.values())}")
        return written


def _to_gray(grid: np.ndarray) -> np.ndarray:
    finite = np.isfinite(grid)
    gray = np.zeros(grid.shape, dtype=np.uint8)
    if finite.any():
        lo, hi = grid[finite].min(), grid[finite].max()
        span = hi - lo if hi > lo else 1.0
        gray[finite] = np.round(255.0 * (grid[finite] - lo) / span).astype(np.uint8)
    return gray


def write_pgm(grid: np.ndarray, path: Union[str, Path]) -> Path:
    """Plain (P2) graymap; slots without an instance are black"""
    gray = _to_gray(grid)
    rows = [' '.join(str(v) for v in row) for row in gray]
    path = Path(path)
    path.write_text(f"P2\n{gray.shape[1]} {gray.shape[0]}\n255\n" + '\n'.join(rows) + '\n', encoding='ascii')
    return path


def write_png(grid: np.ndarray, path: Union[str, Path]) -> Path:
    import matplotlib
    matplotlib.use('Agg')
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 4))
    image = ax.imshow(np.ma.masked_invalid(grid), cmap='inferno')
    fig.colorbar(image, ax=ax, fraction=0.046)
    ax.set_xticks([])
    ax.set_yticks([])
    path = Path(path)
    fig.savefig(path, dpi=100, bbox_inches='tight')
    plt.close(fig)
    return path
