"""
Siamese training with the shuffling-equivalence regularizer.

Both branches share one set of parameters. The unshuffled branch sees the
bag laid out on its slots; the shuffled branch sees the same slots after a
random permutation. A permutation-equivariant backbone f satisfies
f(S[X]) = S[f(X)], and the equivalence loss penalizes the squared gap
between the two sides of that identity.
"""

import logging
import math
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit, softmax

from core import autodiff as ad
from core import permutation
from core.autodiff import Tensor
from core.data_handler import Bag
from core.losses_metrics import (assign_bins, bce, binary_metrics, c_index, cross_entropy,
                                 multiclass_metrics, risk_score, survival_nll, time_bins)
from core.nets import MILModel, ModelConfig
from core.permutation import Permutation

logger = logging.getLogger(__name__)

STEP_MODES = ('stacked', 'sequential')
LR_SCHEDULES = ('constant', 'cosine')
PERMUTATION_STREAM = 0x5045
ORDER_STREAM = 0x4F52


# -- objective ---------------------------------------------------------------

def equivalence_loss(F_unshuffled, F_shuffled, perm: Permutation) -> Tensor:
    """
    (1 / (2 m^2)) * ||F_shuffled - apply(perm, F_unshuffled)||_F^2

    Args:
        F_unshuffled: (m^2, k) slot features of the unshuffled branch
        F_shuffled: (m^2, k) slot features of the shuffled branch
        perm: Slot permutation fed to the shuffled branch

    Returns:
        Scalar loss tensor, differentiable through both branches
    """
    F_u = ad.as_tensor(F_unshuffled)
    F_s = ad.as_tensor(F_shuffled, F_u)
    if F_u.shape != F_s.shape or F_u.ndim != 2:
        raise ValueError(f"equivalence_loss: feature maps must share one (m^2, k) shape, "
                         f"got {F_u.shape} and {F_s.shape}")
    if perm.n != F_u.shape[0]:
        raise ValueError(f"equivalence_loss: permutation of size {perm.n} for {F_u.shape[0]} slots")
    gap = ad.sub(F_s, permutation.apply(perm, F_u))
    return ad.scale(ad.sq_norm(gap), 1.0 / (2.0 * F_u.shape[0]))


def final_loss(task_loss, eqv_loss, lam: float) -> Tensor:
    """task_loss + lambda * eqv_loss"""
    if lam < 0:
        raise ValueError(f"lambda must satisfy lambda >= 0, got {lam}")
    task = ad.as_tensor(task_loss)
    return ad.add(task, ad.scale(ad.as_tensor(eqv_loss, task), float(lam)))


# -- optimizer ---------------------------------------------------------------

@dataclass
class OptimizerState:
    lr: float = 5e-4
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-4
    step: int = 0
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)


def adamw_update(state: OptimizerState, params: Dict[str, np.ndarray], grads: Dict[str, Optional[np.ndarray]],
                 lr: Optional[float] = None) -> Dict[str, np.ndarray]:
    """
    One decoupled-weight-decay Adam step

    p <- p * (1 - lr * wd), then p <- p - lr * m_hat / (sqrt(v_hat) + eps)
    with bias-corrected moments. Missing gradients count as zero.

    Args:
        state: Moments and step counter, updated in place
        params: Parameter arrays by name
        grads: Gradient arrays by name (None allowed)
        lr: Learning rate for this step; defaults to ``state.lr``

    Returns:
        Updated parameter arrays by name
    """
    lr = state.lr if lr is None else lr
    beta1, beta2 = state.betas
    state.step += 1
    correction1 = 1.0 - beta1 ** state.step
    correction2 = 1.0 - beta2 ** state.step
    updated = OrderedDict()
    for name, p in params.items():
        g = grads.get(name)
        g = np.zeros_like(p) if g is None else np.asarray(g)
        if g.shape != p.shape:
            raise ValueError(f"adamw_update: gradient of {name} has shape {g.shape}, parameter has {p.shape}")
        m = state.first_moment.setdefault(name, np.zeros_like(p))
        v = state.second_moment.setdefault(name, np.zeros_like(p))
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * np.square(g)
        decayed = p * (1.0 - lr * state.weight_decay)
        updated[name] = (decayed - lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)).astype(p.dtype)
    return updated


class AdamW:
    """AdamW over a model's named parameter tensors"""

    def __init__(self, params: Dict[str, Tensor], lr: float = 5e-4, betas: Tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 1e-4):
        if lr <= 0:
            raise ValueError(f"Learning rate must be positive, got {lr}")
        if weight_decay < 0:
            raise ValueError(f"Weight decay must be nonnegative, got {weight_decay}")
        self.params = params
        self.state = OptimizerState(lr=lr, betas=tuple(betas), eps=eps, weight_decay=weight_decay)

    def step(self, lr: Optional[float] = None) -> None:
        values = OrderedDict((name, t.data) for name, t in self.params.items())
        grads = {name: t.grad for name, t in self.params.items()}
        for name, value in adamw_update(self.state, values, grads, lr).items():
            self.params[name].data = value

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()


def learning_rate(config: ModelConfig, epoch: int) -> float:
    """Per-epoch learning rate: optional linear warmup, then constant or cosine decay"""
    base = config.lr
    warmup = config.warmup_epochs
    if warmup and epoch < warmup:
        return base * (epoch + 1) / warmup
    if config.lr_schedule == 'constant':
        return base
    if config.lr_schedule == 'cosine':
        progress = (epoch - warmup) / max(1, config.epochs - warmup)
        return 0.5 * base * (1.0 + math.cos(math.pi * progress))
    raise ValueError(f"Unknown learning-rate schedule: {config.lr_schedule}")


# -- reports -----------------------------------------------------------------

@dataclass
class SiameseStepOutput:
    task_loss: float
    equivalence_loss: float
    total_loss: float
    logits_unshuffled: np.ndarray
    logits_shuffled: np.ndarray


@dataclass
class EpochRecord:
    epoch: int
    task_loss: float
    eqv_loss: float
    lr: float
    metrics: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        record = {'epoch': self.epoch, 'task_loss': self.task_loss, 'eqv_loss': self.eqv_loss, 'lr': self.lr}
        record.update(self.metrics)
        return record


@dataclass
class TrainReport:
    config: Dict[str, Any]
    epochs: List[EpochRecord] = field(default_factory=list)
    final_metrics: Dict[str, float] = field(default_factory=dict)
    bin_edges: Optional[List[float]] = None

    def to_records(self) -> List[Dict[str, Any]]:
        return [record.to_dict() for record in self.epochs]


# -- trainer -----------------------------------------------------------------

class SiameseTrainer:
    """
    Owns one model and its optimizer; runs Siamese steps, epochs and evaluation.
    """

    def __init__(self, model: MILModel, config: Optional[ModelConfig] = None):
        self.model = model
        self.config = config or model.config
        if self.config.step_mode not in STEP_MODES:
            raise ValueError(f"Unknown step mode: {self.config.step_mode}")
        if self.config.lr_schedule not in LR_SCHEDULES:
            raise ValueError(f"Unknown learning-rate schedule: {self.config.lr_schedule}")
        self.optimizer = AdamW(model.named_parameters(), lr=self.config.lr, betas=self.config.betas,
                               eps=self.config.adam_eps, weight_decay=self.config.weight_decay)
        self.bin_edges: Optional[np.ndarray] = None
        self.logger = logging.getLogger(__name__)

    # -- helpers ---------------------------------------------------------

    def _bag_tensor(self, bag: Bag) -> Tensor:
        if bag.n < 1:
            raise ValueError("Cannot train on an empty bag")
        return Tensor(bag.features.astype(ad.get_default_dtype()))

    def slot_count(self, bag: Bag) -> int:
        return len(self.model.slot_index(bag.n))

    def permutation_for(self, epoch: int, bag_index: int, slots: int) -> Permutation:
        """Slot permutation drawn from the (seed, epoch, bag index) stream"""
        seq = np.random.SeedSequence([self.config.seed, PERMUTATION_STREAM, epoch, bag_index])
        return permutation.sample(slots, np.random.Generator(np.random.PCG64(seq)))

    def task_loss(self, logits: Tensor, bag: Bag) -> Tensor:
        task = self.config.task
        if task == 'binary':
            if bag.label is None:
                raise ValueError("Binary task needs labelled bags")
            return bce(logits, int(bag.label))
        if task == 'multiclass':
            if bag.label is None:
                raise ValueError("Multiclass task needs labelled bags")
            return cross_entropy(logits, int(bag.label))
        if bag.survival is None or bag.survival.bin_index is None:
            raise ValueError("Survival task needs records with assigned time bins")
        return survival_nll(logits, bag.survival.bin_index, bag.survival.event, self.config.alpha)

    # -- steps -----------------------------------------------------------

    def branch_outputs(self, bag: Bag, perm: Permutation, mode: Optional[str] = None):
        """
        Run both branches and return (F_u, F_s, logits_u, logits_s)

        ``stacked`` evaluates the two slot arrays as one batch of two bags,
        ``sequential`` runs two separate forwards.
        """
        mode = mode or self.config.step_mode
        if mode not in STEP_MODES:
            raise ValueError(f"Unknown step mode: {mode}")
        X = self._bag_tensor(bag)
        slots_u = self.model.slots(X)
        slots_s = self.model.slots(X, perm)
        S, d = slots_u.shape
        if mode == 'stacked':
            batch = ad.concat([ad.reshape(slots_u, (1, S, d)), ad.reshape(slots_s, (1, S, d))], axis=0)
            F = self.model.features(batch)
            logits = self.model.head(F)
            k = F.shape[-1]
            F_u = ad.reshape(ad.gather(F, [0], axis=0), (S, k))
            F_s = ad.reshape(ad.gather(F, [1], axis=0), (S, k))
            logits_u = ad.reshape(ad.gather(logits, [0], axis=0), (-1,))
            logits_s = ad.reshape(ad.gather(logits, [1], axis=0), (-1,))
            return F_u, F_s, logits_u, logits_s

        F_u3 = self.model.features(ad.reshape(slots_u, (1, S, d)))
        F_s3 = self.model.features(ad.reshape(slots_s, (1, S, d)))
        logits_u = ad.reshape(self.model.head(F_u3), (-1,))
        logits_s = ad.reshape(self.model.head(F_s3), (-1,))
        return ad.reshape(F_u3, F_u3.shape[1:]), ad.reshape(F_s3, F_s3.shape[1:]), logits_u, logits_s

    def siamese_losses(self, bag: Bag, perm: Permutation, mode: Optional[str] = None):
        """Build (task, equivalence, total) loss tensors and both logit vectors without updating"""
        F_u, F_s, logits_u, logits_s = self.branch_outputs(bag, perm, mode)
        task = self.task_loss(logits_u, bag)
        if self.config.shuffled_task_loss:
            task = ad.scale(ad.add(task, self.task_loss(logits_s, bag)), 0.5)
        eqv = equivalence_loss(F_u, F_s, perm)
        total = ad.forward(final_loss, task, eqv, self.config.lam)
        return task, eqv, total, logits_u, logits_s

    def siamese_step(self, bag: Bag, perm: Optional[Permutation] = None, mode: Optional[str] = None,
                     lr: Optional[float] = None, rng: Optional[np.random.Generator] = None) -> SiameseStepOutput:
        """
        One Siamese update: both branches, one backward pass, one optimizer step

        Args:
            bag: Training bag
            perm: Slot permutation; sampled from ``rng`` (or a seed-0 stream) when omitted
            mode: 'stacked' or 'sequential'; defaults to the configured mode
            lr: Learning rate override for this step

        Returns:
            SiameseStepOutput with the three losses and both logit vectors
        """
        if perm is None:
            rng = rng or np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.config.seed])))
            perm = permutation.sample(self.slot_count(bag), rng)
        self.optimizer.zero_grad()
        task, eqv, total, logits_u, logits_s = self.siamese_losses(bag, perm, mode)
        ad.backward(total)
        self.optimizer.step(lr)
        return SiameseStepOutput(task_loss=task.item(), equivalence_loss=eqv.item(), total_loss=total.item(),
                                 logits_unshuffled=logits_u.numpy().copy(), logits_shuffled=logits_s.numpy().copy())

    def single_branch_step(self, bag: Bag, lr: Optional[float] = None) -> float:
        """Plain MIL update on the unshuffled bag only"""
        self.optimizer.zero_grad()
        X = self._bag_tensor(bag)
        loss = ad.forward(self.task_loss, self.model.logits(X), bag)
        ad.backward(loss)
        self.optimizer.step(lr)
        return loss.item()

    # -- loops -----------------------------------------------------------

    def prepare_survival(self, train_bags: Sequence[Bag], eval_bags: Sequence[Bag] = ()) -> None:
        """Place time bins on the training records and bin every evaluation record with the same edges"""
        edges, _ = time_bins([bag.survival for bag in train_bags], self.config.bins)
        self.bin_edges = edges
        for bag, j in zip(eval_bags, assign_bins([bag.survival.time for bag in eval_bags], edges)):
            bag.survival.bin_index = j
        self.logger.info(f"Survival bin edges: {np.round(edges, 4).tolist()}")

    def train(self, train_bags: Sequence[Bag], eval_bags: Sequence[Bag] = ()) -> TrainReport:
        """
        Epoch loop of Siamese steps over a seeded shuffled bag order

        Args:
            train_bags: Training bags
            eval_bags: Held-out bags evaluated every ``eval_every`` epochs and after the last one

        Returns:
            TrainReport with per-epoch mean losses and held-out metrics
        """
        if not train_bags:
            raise ValueError("Cannot train on an empty dataset")
        cfg = self.config
        if cfg.task == 'survival':
            self.prepare_survival(train_bags, eval_bags)
        report = TrainReport(config=cfg.to_dict(),
                             bin_edges=None if self.bin_edges is None else self.bin_edges.tolist())
        order_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, ORDER_STREAM])))

        for epoch in range(cfg.epochs):
            lr = learning_rate(cfg, epoch)
            task_losses, eqv_losses = [], []
            for bag_index in order_rng.permutation(len(train_bags)):
                bag = train_bags[int(bag_index)]
                perm = self.permutation_for(epoch, int(bag_index), self.slot_count(bag))
                out = self.siamese_step(bag, perm, lr=lr)
                task_losses.append(out.task_loss)
                eqv_losses.append(out.equivalence_loss)

            record = EpochRecord(epoch=epoch + 1, task_loss=float(np.mean(task_losses)),
                                 eqv_loss=float(np.mean(eqv_losses)), lr=lr)
            if eval_bags and ((epoch + 1) % cfg.eval_every == 0 or epoch + 1 == cfg.epochs):
                record.metrics = self.evaluate(eval_bags)
            report.epochs.append(record)
            self.logger.info(f"epoch {epoch + 1}/{cfg.epochs}: task {record.task_loss:.4f} "
                             f"eqv {record.eqv_loss:.6f} lr {lr:.2e}"
                             + ''.join(f" {k} {v:.4f}" for k, v in record.metrics.items()))
        if report.epochs and report.epochs[-1].metrics:
            report.final_metrics = dict(report.epochs[-1].metrics)
        return report

    def predict(self, bag: Bag) -> np.ndarray:
        with ad.no_grad():
            return self.model.logits(self._bag_tensor(bag)).numpy().copy()

    def evaluate(self, bags: Sequence[Bag]) -> Dict[str, float]:
        """
        Held-out metrics: accuracy/F1/AUC (binary), accuracy/macro-F1 (multiclass)
        or C-index (survival)
        """
        if not bags:
            raise ValueError("Cannot evaluate an empty bag list")
        logits = [self.predict(bag) for bag in bags]
        task = self.config.task
        if task == 'binary':
            return binary_metrics([float(expit(z[0])) for z in logits], [bag.label for bag in bags])
        if task == 'multiclass':
            return multiclass_metrics(softmax(np.stack(logits), axis=-1), [bag.label for bag in bags])
        risks = [risk_score(z) for z in logits]
        try:
            return {'c_index': c_index(risks, [bag.survival for bag in bags])}
        except ValueError as e:
            self.logger.warning(f"C-index not reported: {e}")
            return {'c_index': float('nan')}

    # -- timing ----------------------------------------------------------

    def time_step_modes(self, bag: Bag, steps: int = 200, warmup: int = 5) -> Dict[str, float]:
        """
        Median wall time per step of single-branch, stacked and sequential updates

        The three modes run interleaved, one step each per round, so drift in
        machine load affects them alike.

        Returns:
            Milliseconds per step for each mode plus the two dual/single ratios
        """
        if steps < 1:
            raise ValueError("steps must be positive")
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.config.seed, 0x424E])))
        slots = self.slot_count(bag)
        runners = {
            'single_ms': lambda: self.single_branch_step(bag),
            'stacked_ms': lambda: self.siamese_step(bag, permutation.sample(slots, rng), mode='stacked'),
            'sequential_ms': lambda: self.siamese_step(bag, permutation.sample(slots, rng), mode='sequential'),
        }
        samples: Dict[str, List[float]] = {name: [] for name in runners}
        for round_index in range(warmup + steps):
            for name, run in runners.items():
                start = time.perf_counter()
                run()
                if round_index >= warmup:
                    samples[name].append(time.perf_counter() - start)
        timings = {name: 1000.0 * float(np.median(values)) for name, values in samples.items()}
        timings['stacked_ratio'] = timings['stacked_ms'] / timings['single_ms']
        timings['sequential_ratio'] = timings['sequential_ms'] / timings['single_ms']
        self.logger.info(f"Step timing over {steps} steps: "
                         + ', '.join(f"{k} {v:.3f}" for k, v in timings.items()))
        return timings
