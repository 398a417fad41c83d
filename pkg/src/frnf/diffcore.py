"""Parameter storage, Adam updates, and finite-difference gradient checks.

The scene network's computation graph is fixed, so there is no general
autodiff tape here: each graph stage owns a hand-written backward pass that
accumulates into ``ParamBlock.grads``. This module provides the shared
parameter container, the optimizer, and the numeric oracle used to verify
those hand-written passes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, NumericError

# Row count of every forward GEMM. BLAS kernels pick different reduction
# strategies depending on the row count, so running every product at one
# fixed, padded geometry keeps each output row bitwise independent of how
# points were batched together. Render and eval paths rely on this.
GEMM_CHUNK = 256


def chunked_matmul(x: np.ndarray, w: np.ndarray, chunk: int = GEMM_CHUNK) -> np.ndarray:
    """``x @ w`` computed in fixed-size row chunks (zero-padded final chunk)."""
    n = x.shape[0]
    out = np.empty((n, w.shape[1]), dtype=x.dtype)
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        if stop - start == chunk:
            np.matmul(x[start:stop], w, out=out[start:stop])
        else:
            buf = np.zeros((chunk, x.shape[1]), dtype=x.dtype)
            buf[: stop - start] = x[start:stop]
            out[start:stop] = np.matmul(buf, w)[: stop - start]
    return out


@dataclass
class ParamBlock:
    """One dense trainable matrix plus its gradient and Adam state."""

    name: str
    values: np.ndarray
    grads: np.ndarray
    adam_m: np.ndarray
    adam_v: np.ndarray
    step_count: int = 0

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    def zero_grad(self) -> None:
        self.grads[:] = 0.0

    def snapshot_values(self) -> np.ndarray:
        """Read-only deep copy of the values (no optimizer state)."""
        return self.values.copy()


@dataclass(frozen=True)
class AdamConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0 < self.beta1 < 1:
            raise ConfigError(f"beta1 must be in (0,1), got {self.beta1}")
        if not 0 < self.beta2 < 1:
            raise ConfigError(f"beta2 must be in (0,1), got {self.beta2}")
        if self.epsilon <= 0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")


def init_params(seed: int, rows: int, cols: int, scheme: str = "uniform_fanin") -> ParamBlock:
    """Create a block; ``uniform_fanin`` draws U(-1/sqrt(cols), +1/sqrt(cols))."""
    if rows < 1 or cols < 1:
        raise DimensionError(f"block dimensions must be >= 1, got {rows}x{cols}")
    if scheme == "zeros":
        values = np.zeros((rows, cols), dtype=np.float32)
    elif scheme == "uniform_fanin":
        bound = 1.0 / np.sqrt(cols)
        rng = np.random.default_rng(seed)
        values = rng.uniform(-bound, bound, size=(rows, cols)).astype(np.float32)
    else:
        raise ConfigError(f"unknown init scheme {scheme!r}")
    zeros = lambda: np.zeros((rows, cols), dtype=np.float32)
    return ParamBlock(name=f"block_{rows}x{cols}", values=values, grads=zeros(),
                      adam_m=zeros(), adam_v=zeros(), step_count=0)


def adam_step(block: ParamBlock, cfg: AdamConfig) -> ParamBlock:
    """Bias-corrected Adam update in place; clears grads afterwards."""
    g = block.grads
    if not np.all(np.isfinite(g)):
        raise NumericError(f"non-finite gradient in block {block.name!r}")
    t = block.step_count + 1
    block.adam_m = cfg.beta1 * block.adam_m + (1.0 - cfg.beta1) * g
    block.adam_v = cfg.beta2 * block.adam_v + (1.0 - cfg.beta2) * (g * g)
    m_hat = block.adam_m / (1.0 - cfg.beta1 ** t)
    v_hat = block.adam_v / (1.0 - cfg.beta2 ** t)
    block.values -= (cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon)).astype(
        block.values.dtype, copy=False
    )
    block.step_count = t
    block.zero_grad()
    return block


def finite_diff_check(
    loss: Callable[[], float],
    blocks: Sequence[ParamBlock],
    h: float = 1e-4,
    n_probes: int = 100,
    seed: int = 0,
    grad_fn: Callable[[], float] | None = None,
) -> float:
    """Compare analytic gradients against central differences.

    ``grad_fn`` (defaults to ``loss``) is called once at the base point and
    must populate ``block.grads`` as a side effect. ``loss`` is then used as
    a pure scalar oracle for the central differences; callers typically make
    it evaluate in float64 so the finite differences are not drowned by
    float32 forward noise. Returns the max relative error over ``n_probes``
    uniformly drawn parameter coordinates, with denominator
    max(|analytic|, |numeric|, 1e-8).
    """
    if h <= 0:
        raise ConfigError(f"h must be positive, got {h}")
    for b in blocks:
        b.zero_grad()
    (grad_fn or loss)()
    analytic = [b.grads.copy() for b in blocks]

    sizes = np.array([b.values.size for b in blocks])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    rng = np.random.default_rng(seed)
    coords = rng.integers(0, offsets[-1], size=n_probes)

    max_rel = 0.0
    for c in coords:
        bi = int(np.searchsorted(offsets, c, side="right") - 1)
        idx = int(c - offsets[bi])
        vals = blocks[bi].values
        orig = vals.flat[idx]
        hi = np.float64(orig) + h
        lo = np.float64(orig) - h
        vals.flat[idx] = hi
        loss_hi = float(loss())
        vals.flat[idx] = lo
        loss_lo = float(loss())
        vals.flat[idx] = orig
        # use the realized perturbation: storage may round hi/lo
        span = float(vals.dtype.type(hi)) - float(vals.dtype.type(lo))
        numeric = (loss_hi - loss_lo) / span
        a = float(analytic[bi].flat[idx])
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        max_rel = max(max_rel, rel)

    # leave blocks with the base-point analytic gradient
    for b, g in zip(blocks, analytic):
        b.grads[:] = g
    return max_rel


@dataclass
class GradAccumulator:
    """Convenience wrapper for zeroing/stepping a set of blocks together."""

    blocks: list[ParamBlock] = field(default_factory=list)

    def zero_all(self) -> None:
        for b in self.blocks:
            b.zero_grad()

    def step_all(self, cfg: AdamConfig) -> None:
        for b in self.blocks:
            adam_step(b, cfg)
