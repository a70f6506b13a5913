from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ris_estimation.errors import InputError

BN_MOMENTUM = 0.9
BN_EPSILON = 1e-5


@dataclass
class MacCounter:
    """Instrumented multiply-accumulate counter, keyed by module tag."""

    by_module: dict[str, int] = field(default_factory=lambda: defaultdict(int))

    def add(self, module: str, macs: int) -> None:
        self.by_module[module] += int(macs)

    @property
    def total(self) -> int:
        return int(sum(self.by_module.values()))

    def touched(self, prefix: str) -> list[str]:
        return sorted(k for k, v in self.by_module.items() if k.startswith(prefix) and v > 0)


def _count(counter: MacCounter | None, tag: str, macs: int) -> None:
    if counter is not None:
        counter.add(tag, macs)


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------


@dataclass
class ConvCache:
    columns: np.ndarray
    input_shape: tuple[int, ...]
    kernel_size: int


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    pad = k // 2
    padded = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    # windows[b, h, w, c, i, j] = padded[b, h + i, w + j, c]
    windows = sliding_window_view(padded, (k, k), axis=(1, 2))
    b, h, w, c = x.shape
    return windows.transpose(0, 1, 2, 4, 5, 3).reshape(b * h * w, k * k * c)


def conv2d_forward(
    x: np.ndarray,
    kernel: np.ndarray,
    bias: np.ndarray,
    counter: MacCounter | None = None,
    tag: str = "conv",
) -> tuple[np.ndarray, ConvCache]:
    if x.ndim != 4:
        raise InputError(f"Convolution input must be NHWC, got shape {x.shape}")
    k, _, c_in, c_out = kernel.shape
    if x.shape[-1] != c_in:
        raise InputError(f"Convolution expects {c_in} input channels, got {x.shape[-1]}")

    b, h, w, _ = x.shape
    columns = _im2col(x, k)
    out = columns @ kernel.reshape(k * k * c_in, c_out) + bias
    _count(counter, tag, b * h * w * k * k * c_in * c_out)
    return out.reshape(b, h, w, c_out), ConvCache(columns, x.shape, k)


def conv2d_backward(
    dout: np.ndarray, kernel: np.ndarray, cache: ConvCache
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (dx, dkernel, dbias)."""
    k = cache.kernel_size
    b, h, w, c_in = cache.input_shape
    c_out = kernel.shape[-1]
    pad = k // 2

    dout2d = dout.reshape(-1, c_out)
    dkernel = (cache.columns.T @ dout2d).reshape(kernel.shape)
    dbias = dout2d.sum(axis=0)

    dcols = (dout2d @ kernel.reshape(k * k * c_in, c_out).T).reshape(b, h, w, k, k, c_in)
    dpadded = np.zeros((b, h + 2 * pad, w + 2 * pad, c_in))
    for i in range(k):
        for j in range(k):
            dpadded[:, i : i + h, j : j + w, :] += dcols[:, :, :, i, j, :]
    return dpadded[:, pad : pad + h, pad : pad + w, :], dkernel, dbias


# ---------------------------------------------------------------------------
# Batch normalization
# ---------------------------------------------------------------------------


@dataclass
class BatchNormCache:
    normalized: np.ndarray
    inv_std: np.ndarray


@dataclass
class BatchStatistics:
    mean: np.ndarray
    var: np.ndarray
    count: int


def batchnorm_forward(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    train: bool,
    eps: float = BN_EPSILON,
) -> tuple[np.ndarray, BatchNormCache, BatchStatistics | None]:
    """
    Per-channel normalization over every axis but the last. Train mode uses the
    biased batch statistics and returns them; running buffers are never
    mutated here (see `update_running`).
    """
    axes = tuple(range(x.ndim - 1))
    if train:
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        stats = BatchStatistics(mean=mean, var=var, count=int(np.prod(x.shape[:-1])))
    else:
        mean, var, stats = running_mean, running_var, None

    inv_std = 1.0 / np.sqrt(var + eps)
    normalized = (x - mean) * inv_std
    return gamma * normalized + beta, BatchNormCache(normalized, inv_std), stats


def batchnorm_backward(
    dout: np.ndarray, gamma: np.ndarray, cache: BatchNormCache, train: bool = True
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (dx, dgamma, dbeta)."""
    axes = tuple(range(dout.ndim - 1))
    dgamma = (dout * cache.normalized).sum(axis=axes)
    dbeta = dout.sum(axis=axes)
    dnorm = dout * gamma

    if not train:
        return dnorm * cache.inv_std, dgamma, dbeta

    n = np.prod(dout.shape[:-1])
    dx = (cache.inv_std / n) * (
        n * dnorm
        - dnorm.sum(axis=axes)
        - cache.normalized * (dnorm * cache.normalized).sum(axis=axes)
    )
    return dx, dgamma, dbeta


def update_running(
    running: np.ndarray, batch: np.ndarray, momentum: float = BN_MOMENTUM
) -> np.ndarray:
    return momentum * running + (1.0 - momentum) * batch


# ---------------------------------------------------------------------------
# Pointwise and dense
# ---------------------------------------------------------------------------


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(dout: np.ndarray, out: np.ndarray) -> np.ndarray:
    return dout * (out > 0.0)


def dense_forward(
    x: np.ndarray,
    weight: np.ndarray,
    bias: np.ndarray,
    counter: MacCounter | None = None,
    tag: str = "dense",
) -> np.ndarray:
    if x.shape[-1] != weight.shape[0]:
        raise InputError(f"Dense layer expects {weight.shape[0]} inputs, got {x.shape[-1]}")
    _count(counter, tag, x.shape[0] * weight.shape[0] * weight.shape[1])
    return x @ weight + bias


def dense_backward(
    dout: np.ndarray, x: np.ndarray, weight: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (dx, dweight, dbias)."""
    return dout @ weight.T, x.T @ dout, dout.sum(axis=0)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(dprob: np.ndarray, prob: np.ndarray) -> np.ndarray:
    return prob * (dprob - (dprob * prob).sum(axis=-1, keepdims=True))


def glorot_uniform(shape: tuple[int, ...], fan_in: int, fan_out: int, rng) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)
