"""
Network building blocks, the two jigsaw backbones and the baseline MIL aggregators.

Feature maps are channels-last. A bag of n instances is padded to m*m slots
(m = ceil(sqrt(n))) by repeating its leading instances, laid out row-major on
an m x m grid, and processed either by two transformer blocks over the
flattened slot sequence or by two residual convolution blocks on the grid.
Every block accepts an optional leading batch axis so the two Siamese
branches can be stacked into a single forward pass.
"""

import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field, fields, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from core import autodiff as ad
from core.autodiff import Tensor

logger = logging.getLogger(__name__)

JIGSAW_VARIANTS = ('transformer', 'cnn')
BASELINE_VARIANTS = ('abmil', 'mean', 'max')
PE_MODES = ('none', 'sinusoidal', 'ppeg')
TASKS = ('binary', 'multiclass', 'survival')
PPEG_KERNELS = (7, 5, 3)


@dataclass
class ModelConfig:
    """Architecture, objective and optimizer settings of one model"""

    variant: str = 'transformer'
    input_dim: int = 64
    embed_dim: int = 128
    attn_dim: int = 128
    lam: float = 1.0
    pe_mode: str = 'ppeg'
    task: str = 'binary'
    num_classes: int = 2
    bins: int = 4
    lr: float = 5e-4
    betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_decay: float = 1e-4
    epochs: int = 200
    step_mode: str = 'stacked'
    shuffled_task_loss: bool = False
    precision: str = 'float64'
    lr_schedule: str = 'constant'
    warmup_epochs: int = 0
    eval_every: int = 10
    alpha: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.variant not in JIGSAW_VARIANTS + BASELINE_VARIANTS:
            raise ValueError(f"Unknown variant: {self.variant}")
        if self.pe_mode not in PE_MODES:
            raise ValueError(f"Unknown positional-encoding mode: {self.pe_mode}")
        if self.task not in TASKS:
            raise ValueError(f"Unknown task: {self.task}")
        if self.lam < 0:
            raise ValueError(f"lambda must satisfy lambda >= 0, got {self.lam}")
        if self.task == 'survival' and self.bins < 2:
            raise ValueError(f"Survival head needs bins >= 2, got {self.bins}")
        if self.task == 'multiclass' and self.num_classes < 2:
            raise ValueError(f"Multiclass head needs classes >= 2, got {self.num_classes}")
        if self.input_dim < 1 or self.embed_dim < 1 or self.attn_dim < 1:
            raise ValueError("Dimensions must be positive")
        if self.pe_mode == 'sinusoidal' and self.embed_dim % 2:
            raise ValueError("Sinusoidal encoding needs an even embedding width")

    @property
    def head_width(self) -> int:
        if self.task == 'binary':
            return 1
        if self.task == 'multiclass':
            return self.num_classes
        return self.bins

    @property
    def hidden_dim(self) -> int:
        return max(1, self.input_dim // 2)

    def with_overrides(self, **changes) -> 'ModelConfig':
        return replace(self, **changes)

    def to_dict(self) -> Dict[str, object]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


# -- initialization ----------------------------------------------------------

class ParameterFactory:
    """Seed-deterministic parameter initializer: uniform in +-1/sqrt(fan_in), zero biases"""

    def __init__(self, seed: int):
        self.rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x4A4D])))

    def weight(self, shape: Sequence[int], fan_in: int) -> Tensor:
        bound = 1.0 / math.sqrt(fan_in)
        return Tensor(self.rng.uniform(-bound, bound, size=tuple(shape)), requires_grad=True)

    @staticmethod
    def zeros(shape: Sequence[int]) -> Tensor:
        return Tensor(np.zeros(tuple(shape)), requires_grad=True)

    @staticmethod
    def ones(shape: Sequence[int]) -> Tensor:
        return Tensor(np.ones(tuple(shape)), requires_grad=True)


class Block:
    """A named collection of parameter tensors and sub-blocks"""

    def __init__(self):
        self._params: 'OrderedDict[str, Tensor]' = OrderedDict()
        self._children: 'OrderedDict[str, Block]' = OrderedDict()

    def add_param(self, name: str, tensor: Tensor) -> Tensor:
        self._params[name] = tensor
        return tensor

    def add_child(self, name: str, block: 'Block') -> 'Block':
        self._children[name] = block
        return block

    def named_parameters(self, prefix: str = '') -> 'OrderedDict[str, Tensor]':
        out: 'OrderedDict[str, Tensor]' = OrderedDict()
        for name, tensor in self._params.items():
            out[prefix + name] = tensor
        for name, child in self._children.items():
            out.update(child.named_parameters(prefix + name + '.'))
        return out

    def zero_grad(self) -> None:
        for tensor in self.named_parameters().values():
            tensor.zero_grad()


# -- blocks ------------------------------------------------------------------

class Linear(Block):
    def __init__(self, factory: ParameterFactory, d_in: int, d_out: int, bias: bool = True):
        super().__init__()
        self.d_in = d_in
        self.weight = self.add_param('weight', factory.weight((d_in, d_out), d_in))
        self.bias = self.add_param('bias', factory.zeros((d_out,))) if bias else None

    def forward(self, X: Tensor) -> Tensor:
        if X.shape[-1] != self.d_in:
            raise ad.ShapeError('linear', f"expected width {self.d_in}, got {X.shape[-1]}")
        out = ad.matmul(X, self.weight)
        return ad.add(out, self.bias) if self.bias is not None else out


class MlpEmbed(Block):
    """Two linear+ReLU stages, d -> floor(d/2) -> embed width"""

    def __init__(self, factory: ParameterFactory, d: int, width: int = 128):
        super().__init__()
        self.layer1 = self.add_child('layer1', Linear(factory, d, max(1, d // 2)))
        self.layer2 = self.add_child('layer2', Linear(factory, max(1, d // 2), width))

    def forward(self, X: Tensor) -> Tensor:
        return ad.relu(self.layer2.forward(ad.relu(self.layer1.forward(X))))


class AttentionPool(Block):
    """Gated-free attention pooling: a = softmax(w^T tanh(V x_i)), z = sum_i a_i x_i"""

    def __init__(self, factory: ParameterFactory, d: int, attn_dim: int = 128):
        super().__init__()
        self.d = d
        self.V = self.add_param('V', factory.weight((attn_dim, d), d))
        self.W = self.add_param('W', factory.weight((attn_dim, 1), attn_dim))

    def forward(self, X: Tensor) -> Tuple[Tensor, Tensor]:
        if X.shape[-1] != self.d:
            raise ad.ShapeError('abmil_pool', f"expected width {self.d}, got {X.shape[-1]}")
        hidden = ad.tanh(ad.matmul(self.V, ad.transpose(X)))              # (..., L, n)
        scores = ad.matmul(ad.transpose(self.W), hidden)                    # (..., 1, n)
        weights = ad.softmax(scores)
        return ad.matmul(weights, X), weights                               # (..., 1, d)


class SelfAttention(Block):
    """Single-head scaled dot-product attention without positional information"""

    def __init__(self, factory: ParameterFactory, d: int, d_k: int):
        super().__init__()
        if d_k <= 0:
            raise ValueError("d_k must be positive")
        self.d_k = d_k
        self.W_Q = self.add_param('W_Q', factory.weight((d, d_k), d))
        self.W_K = self.add_param('W_K', factory.weight((d, d_k), d))
        self.W_V = self.add_param('W_V', factory.weight((d, d_k), d))

    def attention(self, X: Tensor) -> Tensor:
        Q = ad.matmul(X, self.W_Q)
        K = ad.matmul(X, self.W_K)
        return ad.softmax(ad.scale(ad.matmul(Q, ad.transpose(K)), 1.0 / math.sqrt(self.d_k)))

    def forward(self, X: Tensor) -> Tensor:
        return ad.matmul(self.attention(X), ad.matmul(X, self.W_V))


class TransformerBlock(Block):
    """Pre-norm block: X1 = X + Attn(LN(X)); X' = X1 + FFN(LN(X1))"""

    def __init__(self, factory: ParameterFactory, d: int, d_k: Optional[int] = None):
        super().__init__()
        d_k = d_k or d
        self.ln1_gamma = self.add_param('ln1_gamma', factory.ones((d,)))
        self.ln1_beta = self.add_param('ln1_beta', factory.zeros((d,)))
        self.attn = self.add_child('attn', SelfAttention(factory, d, d_k))
        self.W_O = self.add_param('W_O', factory.weight((d_k, d), d_k))
        self.ln2_gamma = self.add_param('ln2_gamma', factory.ones((d,)))
        self.ln2_beta = self.add_param('ln2_beta', factory.zeros((d,)))
        self.ffn1 = self.add_child('ffn1', Linear(factory, d, 4 * d))
        self.ffn2 = self.add_child('ffn2', Linear(factory, 4 * d, d))

    def forward(self, X: Tensor) -> Tensor:
        attended = ad.matmul(self.attn.forward(ad.layer_norm(X, self.ln1_gamma, self.ln1_beta)), self.W_O)
        X1 = ad.add(X, attended)
        hidden = ad.relu(self.ffn1.forward(ad.layer_norm(X1, self.ln2_gamma, self.ln2_beta)))
        return ad.add(X1, self.ffn2.forward(hidden))


class PPEG(Block):
    """Pyramid positional encoding: grid + DW7(grid) + DW5(grid) + DW3(grid), bias-free"""

    def __init__(self, factory: ParameterFactory, channels: int, kernels: Sequence[int] = PPEG_KERNELS):
        super().__init__()
        self.channels = channels
        self.kernels = [self.add_param(f'dw{k}', factory.weight((k, k, 1, channels), k * k))
                        for k in kernels]

    def forward(self, grid: Tensor) -> Tensor:
        if grid.shape[-1] != self.channels:
            raise ad.ShapeError('ppeg', f"expected {self.channels} channels, got {grid.shape[-1]}")
        out = grid
        for kernel in self.kernels:
            out = ad.add(out, ad.conv2d(grid, kernel, groups=self.channels))
        return out


class ResidualBlock(Block):
    """relu(grid + Norm(Conv3(relu(Norm(Conv3(grid)))))) with per-channel spatial normalization"""

    def __init__(self, factory: ParameterFactory, channels: int):
        super().__init__()
        self.channels = channels
        fan_in = 9 * channels
        self.conv1 = self.add_param('conv1', factory.weight((3, 3, channels, channels), fan_in))
        self.norm1_gamma = self.add_param('norm1_gamma', factory.ones((channels,)))
        self.norm1_beta = self.add_param('norm1_beta', factory.zeros((channels,)))
        self.conv2 = self.add_param('conv2', factory.weight((3, 3, channels, channels), fan_in))
        self.norm2_gamma = self.add_param('norm2_gamma', factory.ones((channels,)))
        self.norm2_beta = self.add_param('norm2_beta', factory.zeros((channels,)))

    def _norm(self, x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
        return ad.add(ad.mul(ad.normalize(x, axes=(1, 2)), gamma), beta)

    def forward(self, grid: Tensor) -> Tensor:
        if grid.shape[-1] != self.channels:
            raise ad.ShapeError('residual_block', f"expected {self.channels} channels, got {grid.shape[-1]}")
        h = ad.relu(self._norm(ad.conv2d(grid, self.conv1), self.norm1_gamma, self.norm1_beta))
        h = self._norm(ad.conv2d(h, self.conv2), self.norm2_gamma, self.norm2_beta)
        return ad.relu(ad.add(grid, h))


class ClassifierHead(Block):
    """Global average pooling over slots followed by a linear classifier"""

    def __init__(self, factory: ParameterFactory, d: int, width: int):
        super().__init__()
        self.linear = self.add_child('linear', Linear(factory, d, width))

    @property
    def weight(self) -> Tensor:
        return self.linear.weight

    @property
    def bias(self) -> Tensor:
        return self.linear.bias

    def forward(self, F: Tensor) -> Tensor:
        if F.shape[-2] == 0:
            raise ValueError("classify: feature map has no rows")
        return self.linear.forward(ad.mean(F, axis=-2))


# -- stateless helpers -------------------------------------------------------

def squaring_index(n: int) -> Tuple[List[int], int, int]:
    """
    Slot-to-instance map of the squaring layout

    Returns:
        (index, m, pad_count): slot s holds instance index[s]; the first n
        slots hold the bag in order, the remaining m*m - n repeat instances
        0, 1, ...
    """
    if n < 1:
        raise ValueError("Cannot square an empty bag")
    m = math.isqrt(n - 1) + 1
    pad = m * m - n
    return list(range(n)) + [i % n for i in range(pad)], m, pad


def squaring(X):
    """Reshape an (n, c) sequence into an (m, m, c) grid with duplicate padding"""
    n = X.shape[0]
    index, m, pad = squaring_index(n)
    if isinstance(X, Tensor):
        grid = ad.reshape(ad.gather(X, index, axis=0), (m, m, X.shape[-1]))
    else:
        grid = np.asarray(X)[index].reshape(m, m, X.shape[-1])
    return grid, m, pad


def sinusoidal_pe(n: int, c: int) -> np.ndarray:
    """PE[pos, 2i] = sin(pos / 10000^(2i/c)), PE[pos, 2i+1] = cos(pos / 10000^(2i/c))"""
    if c % 2:
        raise ValueError(f"Sinusoidal encoding needs an even width, got {c}")
    positions = np.arange(n, dtype=np.float64)[:, None]
    freqs = np.power(10000.0, -np.arange(0, c, 2, dtype=np.float64) / c)[None, :]
    pe = np.zeros((n, c))
    pe[:, 0::2] = np.sin(positions * freqs)
    pe[:, 1::2] = np.cos(positions * freqs)
    return pe


def baseline_pool(mode: str, X: Tensor) -> Tensor:
    """Columnwise mean or max over the instance axis"""
    if mode == 'mean':
        return ad.mean(X, axis=-2, keepdims=True)
    if mode == 'max':
        pooled = ad.max_reduce(X, axis=X.ndim - 2)
        return ad.reshape(pooled, pooled.shape[:-1] + (1, pooled.shape[-1]))
    raise ValueError(f"Unknown pooling mode: {mode}")


# -- models ------------------------------------------------------------------

class MILModel(Block):
    """
    Common interface of every model variant.

    ``slot_index(n)`` gives the slot layout of an n-instance bag, ``features``
    maps (B, S, d) slot inputs to (B, S, k) per-slot features f(.) and
    ``head`` maps those features to (B, width) logits.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config

    def slot_index(self, n: int) -> List[int]:
        raise NotImplementedError

    def features(self, slots: Tensor) -> Tensor:
        raise NotImplementedError

    def head(self, F: Tensor) -> Tensor:
        raise NotImplementedError

    def head_weights(self) -> Tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def slots(self, X: Tensor, perm=None) -> Tensor:
        """Lay the bag out on its slots (pad first), then optionally shuffle the slots"""
        index = np.asarray(self.slot_index(X.shape[0]))
        if perm is not None:
            if perm.n != index.size:
                raise ValueError(f"Slot permutation of size {perm.n} does not match {index.size} slots")
            index = index[perm.as_array()]
        return ad.gather(X, index, axis=0)

    def forward_backbone(self, X, perm=None) -> Tensor:
        """Per-slot features f(X) (or f(S[X]) given a slot permutation) of one bag"""
        X = ad.as_tensor(X)
        F = self.features(ad.reshape(self.slots(X, perm), (1, -1, X.shape[-1])))
        return ad.reshape(F, F.shape[1:])

    def logits(self, X, perm=None) -> Tensor:
        X = ad.as_tensor(X)
        F = self.features(ad.reshape(self.slots(X, perm), (1, -1, X.shape[-1])))
        return ad.reshape(self.head(F), (-1,))

    def cast(self, dtype) -> None:
        """Convert every parameter to ``dtype`` in place"""
        for tensor in self.named_parameters().values():
            tensor.data = tensor.data.astype(dtype)

    def state_dict(self) -> 'OrderedDict[str, np.ndarray]':
        return OrderedDict((name, t.data.copy()) for name, t in self.named_parameters().items())

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = sorted(set(params) - set(state))
        unexpected = sorted(set(state) - set(params))
        if missing or unexpected:
            raise ValueError(f"State mismatch: missing {missing}, unexpected {unexpected}")
        for name, tensor in params.items():
            value = np.asarray(state[name])
            if value.shape != tensor.shape:
                raise ValueError(f"Parameter {name}: expected shape {tensor.shape}, got {value.shape}")
            tensor.data = value.astype(tensor.data.dtype)


class JigsawNet(MILModel):
    """MLP embed -> squaring -> positional encoding -> transformer or residual backbone -> GAP head"""

    def __init__(self, config: ModelConfig):
        super().__init__(config)
        if config.variant not in JIGSAW_VARIANTS:
            raise ValueError(f"Unknown backbone variant: {config.variant}")
        factory = ParameterFactory(config.seed)
        width = config.embed_dim
        self.embed = self.add_child('embed', MlpEmbed(factory, config.input_dim, width))
        self.ppeg = self.add_child('ppeg', PPEG(factory, width)) if config.pe_mode == 'ppeg' else None
        if config.variant == 'transformer':
            self.blocks = [self.add_child(f'block{i}', TransformerBlock(factory, width)) for i in range(2)]
        else:
            self.blocks = [self.add_child(f'block{i}', ResidualBlock(factory, width)) for i in range(2)]
        self.classifier = self.add_child('head', ClassifierHead(factory, width, config.head_width))

    def slot_index(self, n: int) -> List[int]:
        return squaring_index(n)[0]

    def features(self, slots: Tensor) -> Tensor:
        batch, count = slots.shape[0], slots.shape[1]
        m = math.isqrt(count)
        if m * m != count:
            raise ValueError(f"Slot count {count} is not a perfect square")
        width = self.config.embed_dim
        H = self.embed.forward(slots)
        if self.config.pe_mode == 'sinusoidal':
            H = ad.add(H, ad.as_tensor(sinusoidal_pe(count, width), H))
        grid = ad.reshape(H, (batch, m, m, width))
        if self.ppeg is not None:
            grid = self.ppeg.forward(grid)

        if self.config.variant == 'transformer':
            seq = ad.reshape(grid, (batch, count, width))
            for block in self.blocks:
                seq = block.forward(seq)
            return seq
        for block in self.blocks:
            grid = block.forward(grid)
        return ad.reshape(grid, (batch, count, width))

    def head(self, F: Tensor) -> Tensor:
        return self.classifier.forward(F)

    def head_weights(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.classifier.weight.data, self.classifier.bias.data


class BaselineMIL(MILModel):
    """MLP embed -> permutation-invariant pooling (attention, mean or max) -> linear head"""

    def __init__(self, config: ModelConfig):
        super().__init__(config)
        if config.variant not in BASELINE_VARIANTS:
            raise ValueError(f"Unknown baseline variant: {config.variant}")
        factory = ParameterFactory(config.seed)
        width = config.embed_dim
        self.embed = self.add_child('embed', MlpEmbed(factory, config.input_dim, width))
        self.pool = self.add_child('pool', AttentionPool(factory, width, config.attn_dim)) \
            if config.variant == 'abmil' else None
        self.linear = self.add_child('head', Linear(factory, width, config.head_width))
        if config.pe_mode == 'ppeg':
            logger.warning(f"Baseline '{config.variant}' has no slot grid; PPEG is ignored")

    def slot_index(self, n: int) -> List[int]:
        if n < 1:
            raise ValueError("Cannot lay out an empty bag")
        return list(range(n))

    def features(self, slots: Tensor) -> Tensor:
        H = self.embed.forward(slots)
        if self.config.pe_mode == 'sinusoidal':
            H = ad.add(H, ad.as_tensor(sinusoidal_pe(slots.shape[-2], self.config.embed_dim), H))
        return H

    def pooled(self, F: Tensor) -> Tensor:
        if self.pool is not None:
            return self.pool.forward(F)[0]
        return baseline_pool(self.config.variant, F)

    def head(self, F: Tensor) -> Tensor:
        pooled = self.pooled(F)
        return self.linear.forward(ad.reshape(pooled, pooled.shape[:-2] + (pooled.shape[-1],)))

    def head_weights(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.linear.weight.data, self.linear.bias.data


def build_model(config: ModelConfig) -> MILModel:
    """Instantiate the model variant named by ``config.variant``"""
    if config.variant in JIGSAW_VARIANTS:
        model = JigsawNet(config)
    elif config.variant in BASELINE_VARIANTS:
        model = BaselineMIL(config)
    else:
        raise ValueError(f"Unknown variant: {config.variant}")
    model.cast(ad.get_default_dtype())
    count = sum(t.size for t in model.named_parameters().values())
    logger.debug(f"Built {config.variant} model with {count} parameters")
    return model
