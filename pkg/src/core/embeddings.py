"""
Embedding Numerics Module

Deterministic numeric kernels shared by the server and device actors:
named RNG streams, Xavier initialization, Adam with L2 weight decay and
inverse-CDF Laplace sampling.

All embeddings are float64 numpy arrays; the simulation is a pure function
of (config, master seed) because every random draw comes from a stream
derived from (seed, label).
"""

import hashlib
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
import structlog

from src.errors import NumericError

logger = structlog.get_logger(__name__)

EmbeddingVector = np.ndarray

_TINY = np.finfo(np.float64).tiny


# =============================================================================
# RNG Streams
# =============================================================================


class RngStream:
    """
    Labelled random stream.

    Identical (seed, label) pairs give identical sequences; distinct labels
    give independent streams, so draws never depend on scheduling order.
    """

    def __init__(self, seed: int, label: str):
        """
        Initialize a stream.

        Args:
            seed: 64-bit master seed
            label: Entity name (e.g. "device:42")
        """
        if seed < 0 or seed >= 2**64:
            raise ValueError(f"Seed must fit in 64 bits: {seed}")
        self.seed = seed
        self.label = label

        digest = hashlib.sha256(label.encode("utf-8")).digest()
        label_words = np.frombuffer(digest, dtype="<u4").tolist()
        entropy = [seed & 0xFFFFFFFF, seed >> 32, *label_words]
        self.generator = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))

    def child(self, name: str) -> "RngStream":
        """Independent sub-stream labelled "<label>/<name>" """
        return RngStream(self.seed, f"{self.label}/{name}")

    def uniform(self, low: float, high: float, size: int) -> np.ndarray:
        return self.generator.uniform(low, high, size)

    def random(self, size: int) -> np.ndarray:
        return self.generator.random(size)

    def normal(self, loc: np.ndarray, scale: np.ndarray) -> np.ndarray:
        return self.generator.normal(loc, scale)

    def integers(self, high: int) -> int:
        return int(self.generator.integers(high))

    def choice(self, population: np.ndarray, size: int) -> np.ndarray:
        """Sample without replacement"""
        return self.generator.choice(population, size=size, replace=False)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, label={self.label!r})"


# =============================================================================
# Initialization and Sampling
# =============================================================================


def check_finite(name: str, values: np.ndarray) -> np.ndarray:
    """Raise NumericError if any entry is NaN or infinite"""
    if not np.all(np.isfinite(values)):
        raise NumericError(f"Non-finite values in {name}")
    return values


def xavier_init(rng: RngStream, fan_in: int, fan_out: int, d: int) -> EmbeddingVector:
    """
    Xavier-uniform embedding.

    Args:
        rng: Stream owned by the caller
        fan_in: Fan-in of the embedding table
        fan_out: Fan-out of the embedding table
        d: Embedding dimension

    Returns:
        d entries i.i.d. uniform on [-a, a], a = sqrt(6 / (fan_in + fan_out))
    """
    if d <= 0:
        raise ValueError(f"Embedding dimension must be positive: {d}")
    if fan_in + fan_out < 1:
        raise ValueError(f"fan_in + fan_out must be >= 1: {fan_in} + {fan_out}")

    bound = float(np.sqrt(6.0 / (fan_in + fan_out)))
    return rng.uniform(-bound, bound, d)


def laplace_sample(rng: RngStream, scale: float, d: int) -> EmbeddingVector:
    """
    Draw d i.i.d. Laplace(0, scale) values by inverting the CDF.

    Args:
        rng: Stream owned by the caller
        scale: Noise scale (lambda), >= 0
        d: Number of values

    Returns:
        Noise vector; all zeros when scale == 0 (no draw is consumed)
    """
    if scale < 0:
        raise ValueError(f"Laplace scale must be >= 0: {scale}")
    if d <= 0:
        raise ValueError(f"Dimension must be positive: {d}")
    if scale == 0:
        return np.zeros(d)

    u = rng.random(d) - 0.5
    return -scale * np.sign(u) * np.log(np.maximum(1.0 - 2.0 * np.abs(u), _TINY))


# =============================================================================
# Adam
# =============================================================================


@dataclass(frozen=True)
class AdamState:
    """
    Adam optimizer state for one parameter (vector or block of vectors).

    Attributes:
        m: First-moment estimate
        v: Second-moment estimate
        t: Number of steps taken
        lr: Learning rate
        beta1: First-moment decay
        beta2: Second-moment decay
        eps: Denominator guard
        weight_decay: L2 coefficient folded into the gradient
    """

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.lr <= 0 or self.eps <= 0:
            raise ValueError("Adam lr and eps must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")

    @classmethod
    def zeros_like(
        cls,
        param: np.ndarray,
        lr: float = 0.001,
        weight_decay: float = 0.0,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ) -> "AdamState":
        return cls(
            m=np.zeros_like(param, dtype=np.float64),
            v=np.zeros_like(param, dtype=np.float64),
            lr=lr,
            beta1=beta1,
            beta2=beta2,
            eps=eps,
            weight_decay=weight_decay,
        )


def adam_step(
    param: np.ndarray, grad: np.ndarray, state: AdamState, lr: Optional[float] = None
) -> tuple[np.ndarray, AdamState]:
    """
    One Adam update with bias correction.

    Weight decay is L2-coupled: grad' = grad + weight_decay * param, applied
    before the moment updates. Works elementwise, so a block of vectors
    updates exactly like each vector on its own.

    Args:
        param: Current parameter
        grad: Loss gradient w.r.t. param
        state: Optimizer state for this parameter
        lr: Optional learning-rate override (0 leaves param unchanged)

    Returns:
        (new parameter, new state)
    """
    if param.shape != grad.shape or param.shape != state.m.shape:
        raise ValueError(
            f"Shape mismatch: param {param.shape}, grad {grad.shape}, state {state.m.shape}"
        )
    if np.any(np.isnan(grad)):
        raise NumericError("NaN in gradient")

    step_lr = state.lr if lr is None else lr
    g = grad + state.weight_decay * param if state.weight_decay else grad
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * (g * g)
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)

    new_param = param - step_lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_param, replace(state, m=m, v=v, t=t)
