"""
Self-contained property suites run by the ``verify`` and ``ot-check`` commands.

Every suite draws its cases from a fixed seed, needs no dataset and reports
the worst observed error against its tolerance.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from core import autodiff as ad
from core import info_theory, ot_verify, permutation
from core.autodiff import Tensor
from core.interpret import cam
from core.jigsaw import equivalence_loss
from core.losses_metrics import survival_nll
from core.nets import (PPEG, AttentionPool, JigsawNet, MlpEmbed, ModelConfig, ParameterFactory, ResidualBlock,
                       SelfAttention, TransformerBlock, baseline_pool, sinusoidal_pe)

logger = logging.getLogger(__name__)


@dataclass
class SuiteResult:
    suite: str
    cases: int
    worst: float
    tolerance: float
    passed: bool
    detail: str = ''

    def to_dict(self) -> Dict[str, object]:
        return {'suite': self.suite, 'cases': self.cases, 'worst': self.worst,
                'tolerance': self.tolerance, 'passed': self.passed, 'detail': self.detail}


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, stream])))


def _away_from_zero(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.uniform(0.2, 1.5, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _leaf(values: np.ndarray) -> Tensor:
    return Tensor(values, requires_grad=True, dtype=np.float64)


def _random_perm(rng: np.random.Generator, n: int) -> permutation.Permutation:
    perm = permutation.sample(n, rng)
    while n > 1 and perm.is_identity():
        perm = permutation.sample(n, rng)
    return perm


# -- gradient checks ---------------------------------------------------------

GradCase = Tuple[Callable[..., Tensor], Callable[[np.random.Generator], List[Tensor]], Dict[str, object]]


def gradient_cases() -> Dict[str, GradCase]:
    """primitive name -> (operation, input builder, keyword arguments)"""
    normal = lambda *shape: (lambda rng: [_leaf(rng.normal(size=s)) for s in shape])
    return {
        'add': (ad.add, normal((3, 4), (4,)), {}),
        'sub': (ad.sub, normal((3, 4), (3, 4)), {}),
        'mul': (ad.mul, normal((3, 4), (3, 1)), {}),
        'scale': (ad.scale, normal((3, 4)), {'c': 1.7}),
        'matmul': (ad.matmul, normal((2, 3, 4), (4, 2)), {}),
        'transpose': (ad.transpose, normal((3, 4)), {}),
        'tanh': (ad.tanh, normal((3, 4)), {}),
        'relu': (ad.relu, lambda rng: [_leaf(_away_from_zero(rng, (3, 4)))], {}),
        'sigmoid': (ad.sigmoid, normal((3, 4)), {}),
        'softplus': (ad.softplus, normal((3, 4)), {}),
        'log': (ad.log, lambda rng: [_leaf(rng.uniform(0.5, 2.0, size=(3, 4)))], {}),
        'exp': (ad.exp, normal((3, 4)), {}),
        'clip': (ad.clip, lambda rng: [_leaf(_away_from_zero(rng, (3, 4)) * 2.0)], {'lower': -1.0, 'upper': 1.0}),
        'softmax': (ad.softmax, normal((3, 4)), {}),
        'log_softmax': (ad.log_softmax, normal((3, 4)), {}),
        'normalize': (ad.normalize, normal((2, 3, 4)), {'axes': (1,)}),
        'layer_norm': (ad.layer_norm, normal((3, 4), (4,), (4,)), {}),
        'conv2d': (ad.conv2d, normal((1, 3, 3, 2), (3, 3, 2, 2)), {}),
        'conv2d_depthwise': (ad.conv2d, normal((1, 4, 4, 2), (3, 3, 1, 2)), {'groups': 2}),
        'global_avg_pool': (ad.global_avg_pool, normal((2, 3, 3, 2)), {}),
        'reshape': (ad.reshape, normal((3, 4)), {'shape': (2, 6)}),
        'concat': (lambda a, b: ad.concat([a, b], axis=1), normal((3, 2), (3, 4)), {}),
        'gather': (ad.gather, normal((4, 3)), {'index': [2, 0, 2, 3, 1], 'axis': 0}),
        'sum': (ad.tensor_sum, normal((3, 4)), {'axis': 0}),
        'mean': (ad.mean, normal((3, 4)), {'axis': -1}),
        'max': (ad.max_reduce, normal((3, 4)), {'axis': 1}),
        'sq_norm': (ad.sq_norm, normal((3, 4)), {}),
        'equivalence_loss': (lambda a, b: equivalence_loss(a, b, permutation.Permutation((2, 0, 3, 1))),
                             normal((4, 3), (4, 3)), {}),
    }


def suite_grad_check(seed: int = 0, cases_per_primitive: int = 100,
                     overrides: Optional[Dict[str, Callable[..., Tensor]]] = None) -> SuiteResult:
    cases = gradient_cases()
    for name, op in (overrides or {}).items():
        if name not in cases:
            raise ValueError(f"No gradient case for primitive '{name}'")
        cases[name] = (op,) + cases[name][1:]
    rng = _rng(seed, 1)
    worst, worst_name, failing, count = 0.0, '', [], 0
    for name, (op, build, kwargs) in cases.items():
        for _ in range(cases_per_primitive):
            inputs = build(rng)
            err = ad.grad_check(lambda *xs: op(*xs, **kwargs), inputs)
            count += 1
            if err > worst:
                worst, worst_name = err, name
            if err >= 1e-4 and name not in failing:
                failing.append(name)
    detail = f"failing: {', '.join(failing)}" if failing else f"worst primitive: {worst_name}"
    return SuiteResult('grad_check', count, worst, 1e-4, not failing, detail)


def _substitute(owner, key, forward: Callable[[Tensor], Tensor]) -> Callable[[Tensor, Tensor], Tensor]:
    """forward(x) with ``w`` standing in for owner[key] (list slot) or owner.key (attribute)"""
    def get():
        return owner[key] if isinstance(key, int) else getattr(owner, key)

    def put(value):
        if isinstance(key, int):
            owner[key] = value
        else:
            setattr(owner, key, value)

    def run(x: Tensor, w: Tensor) -> Tensor:
        original = get()
        put(w)
        try:
            return forward(x)
        finally:
            put(original)
    return run


BlockCase = Tuple[Callable[..., Tensor], List[Tensor], float]


def block_gradient_cases(seed: int = 0) -> Dict[str, BlockCase]:
    """
    Reduced-size network blocks, checked against their input and one weight

    Returns:
        case name -> (operation, inputs, tolerance)
    """
    rng = _rng(seed, 10)
    factory = ParameterFactory(seed)
    embed = MlpEmbed(factory, 4, width=5)
    ppeg = PPEG(factory, 2)
    attention = SelfAttention(factory, 4, 3)
    block = TransformerBlock(factory, 4)
    residual = ResidualBlock(factory, 4)

    net = JigsawNet(ModelConfig(variant='transformer', input_dim=3, embed_dim=4, attn_dim=4, pe_mode='ppeg',
                                epochs=1, seed=seed))
    perm = permutation.Permutation((2, 0, 3, 1))

    def shuffle_gap(X: Tensor) -> Tensor:
        return equivalence_loss(net.forward_backbone(X), net.forward_backbone(X, perm), perm)

    fixed = lambda *shape: Tensor(rng.normal(size=shape), requires_grad=False, dtype=np.float64)
    return {
        'mlp_embed': (_substitute(embed.layer1, 'weight', embed.forward),
                      [_leaf(rng.normal(size=(3, 4))), embed.layer1.weight], 1e-5),
        'ppeg': (lambda grid: ppeg.forward(grid), [_leaf(rng.normal(size=(1, 4, 4, 2)))], 1e-5),
        'ppeg_kernel': (_substitute(ppeg.kernels, 2, ppeg.forward),
                        [fixed(1, 4, 4, 2), ppeg.kernels[2]], 1e-5),
        'self_attention': (_substitute(attention, 'W_Q', attention.forward),
                           [_leaf(rng.normal(size=(3, 4))), attention.W_Q], 1e-5),
        'transformer_block': (_substitute(block, 'W_O', block.forward),
                              [_leaf(rng.normal(size=(3, 4))), block.W_O], 1e-4),
        'residual_block': (lambda grid: residual.forward(grid), [_leaf(rng.normal(size=(1, 4, 4, 4)))], 1e-4),
        'residual_block_norm': (_substitute(residual, 'norm1_gamma', residual.forward),
                                [fixed(1, 4, 4, 4), residual.norm1_gamma], 1e-4),
        'equivalence_loss_backbone': (_substitute(net.ppeg.kernels, 2, shuffle_gap),
                                      [fixed(4, 3), net.ppeg.kernels[2]], 1e-4),
    }


def suite_block_grad_check(seed: int = 0) -> SuiteResult:
    """Finite-difference checks through whole blocks and the Siamese objective"""
    worst, failing, count = 0.0, [], 0
    for name, (op, inputs, tolerance) in block_gradient_cases(seed).items():
        err = ad.grad_check(op, inputs)
        count += 1
        worst = max(worst, err)
        if err >= tolerance:
            failing.append(name)
    detail = f"failing: {', '.join(failing)}" if failing else 'mlp_embed, ppeg, attention, blocks, shuffle gap'
    return SuiteResult('block_grad_check', count, worst, 1e-4, not failing, detail)


# -- permutation invariance and equivariance ---------------------------------

def suite_pooling_invariance(seed: int = 0, pairs: int = 200, d: int = 6) -> SuiteResult:
    """abmil, mean and max pooling and attention-then-average are order-blind"""
    rng = _rng(seed, 2)
    factory = ParameterFactory(seed)
    attention_pool = AttentionPool(factory, d, 5)
    block = TransformerBlock(factory, d)
    poolers = {
        'abmil': lambda X: attention_pool.forward(X)[0],
        'mean': lambda X: baseline_pool('mean', X),
        'max': lambda X: baseline_pool('max', X),
        'transformer_avg': lambda X: ad.mean(block.forward(X), axis=0),
    }
    worst = 0.0
    with ad.no_grad():
        for _ in range(pairs):
            n = int(rng.integers(2, 12))
            X = rng.normal(size=(n, d))
            perm = _random_perm(rng, n)
            for pool in poolers.values():
                diff = np.max(np.abs(pool(Tensor(X)).numpy() - pool(Tensor(permutation.apply(perm, X))).numpy()))
                worst = max(worst, float(diff))
    return SuiteResult('pooling_invariance', pairs * len(poolers), worst, 1e-8, worst < 1e-8,
                       'abmil, mean, max, transformer+average')


def suite_positional_encoding(seed: int = 0, pairs: int = 200, d: int = 8) -> SuiteResult:
    """Adding sinusoidal encodings before attention+average breaks order invariance"""
    rng = _rng(seed, 2)
    block = TransformerBlock(ParameterFactory(seed + 1), d)

    def encode_pool(X: np.ndarray) -> np.ndarray:
        return ad.mean(block.forward(Tensor(X + sinusoidal_pe(X.shape[0], d))), axis=0).numpy()

    broken = 0
    smallest = np.inf
    with ad.no_grad():
        for _ in range(pairs):
            n = int(rng.integers(4, 12))
            X = rng.normal(size=(n, d))
            perm = _random_perm(rng, n)
            diff = float(np.max(np.abs(encode_pool(X) - encode_pool(permutation.apply(perm, X)))))
            smallest = min(smallest, diff)
            broken += diff > 1e-3
    rate = broken / pairs
    return SuiteResult('positional_encoding_breaks_invariance', pairs, 1.0 - rate, 0.05, rate >= 0.95,
                       f"invariance broken on {rate:.1%} of pairs")


def suite_equivariance_identities(seed: int = 0, cases: int = 100, d: int = 5) -> SuiteResult:
    """
    Elementwise activations commute with shuffling, Gram matrices are shuffle
    invariant, P^T P = I and self-attention is shuffle equivariant
    """
    rng = _rng(seed, 3)
    attention = SelfAttention(ParameterFactory(seed + 2), d, d)
    activations = (np.tanh, lambda x: np.maximum(x, 0.0), lambda x: 1.0 / (1.0 + np.exp(-x)))
    exact_ok = True
    worst = 0.0
    with ad.no_grad():
        for _ in range(cases):
            n = int(rng.integers(2, 10))
            X = rng.normal(size=(n, d))
            perm = _random_perm(rng, n)
            P = permutation.to_matrix(perm)
            XP = permutation.apply(perm, X)
            exact_ok &= all(np.array_equal(act(XP), permutation.apply(perm, act(X))) for act in activations)
            exact_ok &= np.array_equal(P.T @ P, np.eye(n))
            worst = max(worst, float(np.max(np.abs(XP.T @ XP - X.T @ X))))
            shuffled = attention.forward(Tensor(XP)).numpy()
            worst = max(worst, float(np.max(np.abs(shuffled - permutation.apply(perm, attention.forward(Tensor(X)).numpy())))))
    passed = bool(exact_ok) and worst < 1e-10
    return SuiteResult('equivariance_identities', cases, worst, 1e-10, passed,
                       'activation commutation exact' if exact_ok else 'activation commutation NOT exact')


# -- optimal transport -------------------------------------------------------

def suite_ot_matrix_form(seed: int = 0, cases: int = 100) -> SuiteResult:
    rng = _rng(seed, 4)
    worst = 0.0
    for _ in range(cases):
        n = int(rng.integers(1, 17))
        k = int(rng.integers(1, 6))
        F, F_prime = rng.normal(size=(n, k)), rng.normal(size=(n, k))
        perm = permutation.sample(n, rng)
        worst = max(worst, ot_verify.matrix_form_check(F, F_prime, perm))
        objective = ot_verify.inverse_ot_objective(F, F_prime, perm)
        scaled = 2 * n * equivalence_loss(Tensor(F), Tensor(F_prime), perm).item()
        worst = max(worst, abs(scaled - objective))
    return SuiteResult('ot_matrix_form', cases, worst, 1e-9, worst < 1e-9,
                       'inverse-OT objective equals the scaled equivalence loss')


def suite_sinkhorn(seed: int = 0, cases: int = 20) -> SuiteResult:
    rng = _rng(seed, 5)
    worst = 0.0
    feasible = True
    for _ in range(cases):
        n = int(rng.integers(2, 7))
        P, Q = ot_verify.random_coordinates(n, rng), ot_verify.random_coordinates(n, rng)
        exact = ot_verify.emd_bruteforce(P, Q).cost
        hungarian = ot_verify.emd_assignment(P, Q).cost
        plan = ot_verify.sinkhorn_annealed(ot_verify.quadratic_cost(P, Q))
        rows, cols = plan.marginals()
        feasible &= bool(np.all(plan.T >= 0)) and np.allclose(rows, 1.0 / n, atol=1e-6) and np.allclose(cols, 1.0 / n, atol=1e-6)
        worst = max(worst, abs(plan.cost - exact) / max(exact, 1e-12), abs(hungarian - exact))
    return SuiteResult('sinkhorn_vs_bruteforce', cases, worst, 0.01, feasible and worst < 0.01,
                       'annealed Sinkhorn and Hungarian against enumeration')


def suite_emd_symmetry(seed: int = 0, cases: int = 30) -> SuiteResult:
    rng = _rng(seed, 6)
    worst = 0.0
    for _ in range(cases):
        n = int(rng.integers(1, 7))
        P, Q = ot_verify.random_coordinates(n, rng), ot_verify.random_coordinates(n, rng)
        worst = max(worst, abs(ot_verify.emd_bruteforce(P, Q).cost - ot_verify.emd_bruteforce(Q, P).cost))
        worst = max(worst, ot_verify.shuffled_emd(P, permutation.sample(n, rng)))
    return SuiteResult('emd_symmetry', cases, worst, 1e-12, worst < 1e-12,
                       'EMD symmetric and zero against a shuffled copy')


# -- information theory ------------------------------------------------------

def suite_conditioning_gain(seed: int = 0, random_cases: int = 1000, independent_cases: int = 100) -> SuiteResult:
    rng = _rng(seed, 7)
    lowest = np.inf
    monotone = True
    for _ in range(random_cases):
        sizes = tuple(int(s) for s in rng.integers(2, 5, size=3))
        joint = info_theory.random_joint(rng, sizes)
        gain = info_theory.conditioning_gain(joint)
        lowest = min(lowest, gain.cmi)
        monotone &= gain.h_y_given_xp <= gain.h_y_given_x + 1e-12 <= info_theory.entropy(joint, 'y') + 2e-12
    worst_equality = 0.0
    for _ in range(independent_cases):
        sizes = tuple(int(s) for s in rng.integers(2, 5, size=3))
        joint = info_theory.conditionally_independent_joint(rng, sizes)
        worst_equality = max(worst_equality, abs(info_theory.conditioning_gain(joint).cmi))
    passed = lowest >= -1e-12 and worst_equality < 1e-9 and bool(monotone)
    return SuiteResult('conditioning_gain', random_cases + independent_cases, worst_equality, 1e-9, passed,
                       f"min I(Y;P|X) = {lowest:.3e}")


def suite_hellman(seed: int = 0, cases: int = 1000) -> SuiteResult:
    rng = _rng(seed, 8)
    violations = 0
    worst = -np.inf
    for _ in range(cases):
        sizes = tuple(int(s) for s in rng.integers(2, 5, size=2))
        result = info_theory.hellman_bound(info_theory.random_joint(rng, sizes, axes=('x', 'y')))
        violations += not result.holds
        worst = max(worst, result.bayes_error - result.bound)
    tight = info_theory.hellman_bound(info_theory.DiscreteJoint(np.full((2, 2), 0.25), ('x', 'y')))
    tight_ok = abs(tight.bayes_error - 0.5) < 1e-12 and abs(tight.bound - 0.5) < 1e-12
    return SuiteResult('hellman_bound', cases + 1, worst, 1e-12, violations == 0 and tight_ok,
                       f"{violations} violations; uniform binary {'tight' if tight_ok else 'NOT tight'}")


# -- heads and losses ----------------------------------------------------------

def suite_cam_reconstruction(seed: int = 0, cases: int = 1000) -> SuiteResult:
    rng = _rng(seed, 9)
    worst = 0.0
    for _ in range(cases):
        slots, k, width = int(rng.integers(1, 26)), int(rng.integers(1, 9)), int(rng.integers(1, 4))
        F = rng.normal(size=(slots, k))
        W, b = rng.normal(size=(k, width)), rng.normal(size=width)
        c = int(rng.integers(0, width))
        logit = (F.mean(axis=0) @ W + b)[c]
        result = cam(F, (W, b), c)
        worst = max(worst, abs(result.logit - logit))
        alpha = float(rng.uniform(-2, 2))
        scaled = cam(F, (alpha * W, b), c).slot_scores
        worst = max(worst, float(np.max(np.abs(scaled - alpha * result.slot_scores))))
    return SuiteResult('cam_reconstruction', cases, worst, 1e-6, worst < 1e-6,
                       'slot mean + bias reproduces the logit; CAM linear in the head')


def suite_survival_limits() -> SuiteResult:
    """Near-certain predictions drive the survival loss to zero under clamping"""
    big = 40.0
    J = 4
    limits = [
        (np.array([big, -big, -big, -big]), 0, 1),
        (np.array([-big, -big, big, -big]), 2, 1),
        (np.full(J, -big), 3, 0),
        (np.full(J, -big), 1, 0),
    ]
    worst = max(survival_nll(Tensor(z), j, e).item() for z, j, e in limits)
    return SuiteResult('survival_limits', len(limits), worst, 1e-6, worst < 1e-6,
                       'certain event or survival gives zero loss')


SUITES: Dict[str, Callable[..., SuiteResult]] = {
    'grad_check': suite_grad_check,
    'block_grad_check': suite_block_grad_check,
    'pooling_invariance': suite_pooling_invariance,
    'positional_encoding_breaks_invariance': suite_positional_encoding,
    'equivariance_identities': suite_equivariance_identities,
    'ot_matrix_form': suite_ot_matrix_form,
    'sinkhorn_vs_bruteforce': suite_sinkhorn,
    'emd_symmetry': suite_emd_symmetry,
    'conditioning_gain': suite_conditioning_gain,
    'hellman_bound': suite_hellman,
    'cam_reconstruction': suite_cam_reconstruction,
    'survival_limits': suite_survival_limits,
}
OT_SUITES = ('ot_matrix_form', 'sinkhorn_vs_bruteforce', 'emd_symmetry')


def run_suites(names: Sequence[str] = tuple(SUITES), seed: int = 0,
               primitive_overrides: Optional[Dict[str, Callable[..., Tensor]]] = None) -> Tuple[pd.DataFrame, int]:
    """
    Run the named suites in double precision

    Args:
        names: Suites to run
        seed: Seed of every suite's case generator
        primitive_overrides: Replacement operations for the gradient-check cases

    Returns:
        (result table, exit status): 0 when every suite passed, 1 otherwise
    """
    previous = np.dtype(ad.get_default_dtype()).name
    ad.set_default_dtype('float64')
    results: List[SuiteResult] = []
    try:
        for name in names:
            if name not in SUITES:
                raise ValueError(f"Unknown verification suite: {name}")
            if name == 'grad_check':
                result = suite_grad_check(seed, overrides=primitive_overrides)
            elif name == 'survival_limits':
                result = suite_survival_limits()
            else:
                result = SUITES[name](seed)
            results.append(result)
            log = logger.info if result.passed else logger.error
            log(f"{'PASS' if result.passed else 'FAIL'} {result.suite}: {result.cases} cases, "
                f"worst {result.worst:.3e} (tol {result.tolerance:g}) {result.detail}")
    finally:
        ad.set_default_dtype(previous)
    table = pd.DataFrame([r.to_dict() for r in results])
    failed = [r.suite for r in results if not r.passed]
    if failed:
        logger.error(f"Verification failed: {', '.join(failed)}")
    return table, 1 if failed else 0


def run_verify(seed: int = 0, primitive_overrides: Optional[Dict[str, Callable[..., Tensor]]] = None
               ) -> Tuple[pd.DataFrame, int]:
    return run_suites(tuple(SUITES), seed, primitive_overrides)


def run_ot_check(seed: int = 0) -> Tuple[pd.DataFrame, int]:
    return run_suites(OT_SUITES, seed)
