"""Small reverse-mode toolkit for the three fixed models.

Each block is a pair of functions: ``*_forward`` returns the output and a
cache, ``*_backward`` maps the upstream gradient to input/parameter
gradients. Models wire blocks by hand; there is no tape.

Arrays use a features-last convention: an affine map acts on the last axis,
the 1-D convolution and the softmax run along the last (time) axis.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import CorruptCheckpoint, ShapeMismatch, VersionMismatch


class ParamModule:
    """Named tensors stored in one flat float64 vector.

    The layout (names, shapes, offsets) is fixed at construction. Parameters
    are read-only; updates produce a new module via :meth:`with_flat`.
    """

    def __init__(self, spec: Sequence[tuple[str, tuple[int, ...]]], flat: np.ndarray | None = None):
        self.spec = tuple((name, tuple(int(s) for s in shape)) for name, shape in spec)
        self._offsets = {}
        off = 0
        for name, shape in self.spec:
            size = math.prod(shape)
            self._offsets[name] = (off, off + size, shape)
            off += size
        self.size = off
        flat = np.zeros(off) if flat is None else np.array(flat, dtype=np.float64, copy=True)
        if flat.shape != (off,):
            raise ShapeMismatch("parameter vector", (off,), flat.shape)
        flat.setflags(write=False)
        self.flat = flat

    def __getitem__(self, name: str) -> np.ndarray:
        lo, hi, shape = self._offsets[name]
        return self.flat[lo:hi].reshape(shape)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(n for n, _ in self.spec)

    def with_flat(self, flat: np.ndarray) -> "ParamModule":
        return type(self)._rebuild(self, flat)

    @classmethod
    def _rebuild(cls, old: "ParamModule", flat):
        new = cls.__new__(cls)
        ParamModule.__init__(new, old.spec, flat)
        for k, v in old.__dict__.items():
            if k not in new.__dict__:
                new.__dict__[k] = v
        return new

    def with_params(self, **tensors) -> "ParamModule":
        flat = self.flat.copy()
        for name, value in tensors.items():
            lo, hi, shape = self._offsets[name]
            value = np.asarray(value, dtype=np.float64)
            if value.shape != shape:
                raise ShapeMismatch(name, shape, value.shape)
            flat[lo:hi] = value.ravel()
        return self.with_flat(flat)

    def pack(self, grads: Mapping[str, np.ndarray]) -> np.ndarray:
        """Flatten a name -> gradient mapping into this module's layout."""
        out = np.zeros(self.size)
        for name, g in grads.items():
            lo, hi, shape = self._offsets[name]
            if np.shape(g) != shape:
                raise ShapeMismatch(f"gradient {name}", shape, np.shape(g))
            out[lo:hi] = np.ravel(g)
        return out

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: self[name].copy() for name in self.names}

    def digest(self) -> str:
        """SHA-256 of layout and parameter bytes."""
        h = hashlib.sha256(json.dumps(self.spec).encode())
        h.update(self.flat.astype("<f8").tobytes())
        return h.hexdigest()


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


# --- blocks --------------------------------------------------------------------


def affine_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray):
    """``y = x @ weight.T + bias`` over the last axis of ``x``."""
    if x.shape[-1] != weight.shape[1] or bias.shape != (weight.shape[0],):
        raise ShapeMismatch("affine input", (weight.shape[1],), x.shape[-1:])
    return x @ weight.T + bias, x


def affine_backward(cache, grad_y: np.ndarray, weight: np.ndarray):
    x = cache
    x2 = x.reshape(-1, x.shape[-1])
    g2 = grad_y.reshape(-1, grad_y.shape[-1])
    grad_w = g2.T @ x2
    grad_b = g2.sum(axis=0)
    grad_x = grad_y @ weight
    return grad_x, grad_w, grad_b


def _pad_time(x, half):
    """Zero-pad the last axis by ``half`` on both sides."""
    out = np.zeros(x.shape[:-1] + (x.shape[-1] + 2 * half,))
    out[..., half : half + x.shape[-1]] = x
    return out


def conv1d_forward(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray):
    """Depthwise same-padded cross-correlation along time.

    ``x [..., D, T]``, ``kernel [D, k]`` with odd ``k``, ``bias [D]``.
    ``y[d, t] = sum_j kernel[d, j] * x[d, t + j - (k-1)/2] + bias[d]`` with
    zero padding.
    """
    D, k = kernel.shape
    if k % 2 == 0:
        raise ShapeMismatch("conv kernel width (must be odd)", "odd", k)
    if x.shape[-2] != D or bias.shape != (D,):
        raise ShapeMismatch("conv input channels", D, x.shape[-2])
    half = (k - 1) // 2
    xp = _pad_time(x, half)
    cols = np.lib.stride_tricks.sliding_window_view(xp, k, axis=-1)  # [..., D, T, k]
    y = np.einsum("...dtk,dk->...dt", cols, kernel) + bias[:, None]
    return y, cols


def conv1d_backward(cache, grad_y: np.ndarray, kernel: np.ndarray):
    cols = cache
    D, k = kernel.shape
    half = (k - 1) // 2
    grad_kernel = np.einsum("ndtk,ndt->dk", cols.reshape((-1,) + cols.shape[-3:]), grad_y.reshape((-1,) + grad_y.shape[-2:]))
    grad_bias = grad_y.reshape(-1, D, grad_y.shape[-1]).sum(axis=(0, 2))
    # transpose of the correlation: correlate the padded upstream gradient with the flipped kernel
    gp = np.lib.stride_tricks.sliding_window_view(_pad_time(grad_y, half), k, axis=-1)
    grad_x = np.einsum("...dtk,dk->...dt", gp, kernel[:, ::-1])
    return grad_x, grad_kernel, grad_bias


def tanh_forward(x):
    y = np.tanh(x)
    return y, y


def tanh_backward(cache, grad_y):
    return grad_y * (1.0 - cache * cache)


def softmax_forward(x):
    """Softmax along the last axis, max-shifted."""
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)
    return y, y


def softmax_backward(cache, grad_y):
    y = cache
    return y * (grad_y - (grad_y * y).sum(axis=-1, keepdims=True))


def mse_forward(pred, target):
    if pred.shape != target.shape:
        raise ShapeMismatch("mse operands", pred.shape, target.shape)
    diff = pred - target
    return float(np.mean(diff * diff)), diff


def mse_backward(cache, grad_loss: float = 1.0):
    diff = cache
    return grad_loss * 2.0 * diff / diff.size


def linear_operator_forward(x, matrix):
    """Fixed (parameter-free) linear map over the last axis."""
    return x @ matrix.T


def linear_operator_backward(grad_y, matrix):
    return grad_y @ matrix


# --- optimizer -------------------------------------------------------------------


class SGD:
    """Plain gradient descent with optional heavy-ball momentum.

    ``v <- mu * v + g``; ``p <- p - lr * v``.
    """

    def __init__(self, lr: float, momentum: float = 0.0):
        if lr < 0:
            raise ValueError("learning rate must be nonnegative")
        if not 0.0 <= momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        self.lr = lr
        self.momentum = momentum
        self.velocity: np.ndarray | None = None

    def step(self, module: ParamModule, grad: np.ndarray) -> ParamModule:
        if grad.shape != module.flat.shape:
            raise ShapeMismatch("gradient", module.flat.shape, grad.shape)
        if self.velocity is None:
            self.velocity = np.zeros_like(grad)
        self.velocity = self.momentum * self.velocity + grad
        return module.with_flat(module.flat - self.lr * self.velocity)


def sgd_step(module: ParamModule, grad: np.ndarray, lr: float, momentum: float = 0.0, velocity=None):
    """Functional single step; returns ``(module, velocity)``."""
    v = np.zeros_like(grad) if velocity is None else velocity
    v = momentum * v + grad
    return module.with_flat(module.flat - lr * v), v


# --- gradient checking ------------------------------------------------------------


@dataclass(frozen=True)
class GradReport:
    analytic: np.ndarray
    numeric: np.ndarray
    max_rel_error: float


def relative_error(a: np.ndarray, n: np.ndarray) -> np.ndarray:
    return np.abs(a - n) / np.maximum(1e-8, np.abs(a) + np.abs(n))


def grad_check(
    loss_and_grad: Callable[[np.ndarray], tuple[float, np.ndarray]],
    theta: np.ndarray,
    step: float = 1e-5,
) -> GradReport:
    """Compare the analytic gradient at ``theta`` with central differences."""
    theta = np.array(theta, dtype=np.float64)
    _, analytic = loss_and_grad(theta.copy())
    numeric = np.empty_like(theta)
    for i in range(theta.size):
        plus = theta.copy()
        minus = theta.copy()
        plus[i] += step
        minus[i] -= step
        numeric[i] = (loss_and_grad(plus)[0] - loss_and_grad(minus)[0]) / (2.0 * step)
    err = relative_error(np.asarray(analytic, dtype=np.float64), numeric)
    return GradReport(np.asarray(analytic), numeric, float(err.max()) if err.size else 0.0)


# --- checkpoint format --------------------------------------------------------------
#
#   bytes 0-7    magic b"HINTSCKP"
#   bytes 8-11   format version, uint32 little-endian
#   bytes 12-15  header length n, uint32 little-endian
#   next n bytes UTF-8 JSON: {"meta": {...}, "tensors": [{"name", "shape"}, ...]}
#   remainder    tensors in header order, C order, little-endian float64
#

MAGIC = b"HINTSCKP"
FORMAT_VERSION = 1


def save_tensors(path, tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    header = {
        "meta": dict(meta or {}),
        "tensors": [{"name": k, "shape": list(np.shape(v))} for k, v in tensors.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with Path(path).open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for v in tensors.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:8] != MAGIC:
        raise CorruptCheckpoint(f"{path}: not a checkpoint (bad magic or truncated header)")
    version, n = struct.unpack("<II", data[8:16])
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"{path}: format version {version}, expected {FORMAT_VERSION}", FORMAT_VERSION, version)
    if len(data) < 16 + n:
        raise CorruptCheckpoint(f"{path}: truncated header")
    try:
        header = json.loads(data[16 : 16 + n])
    except ValueError as exc:
        raise CorruptCheckpoint(f"{path}: unreadable header ({exc})") from None
    offset = 16 + n
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(data):
            raise CorruptCheckpoint(f"{path}: truncated payload in tensor {entry['name']!r}")
        tensors[entry["name"]] = np.frombuffer(data, dtype="<f8", count=nbytes // 8, offset=offset).reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(data):
        raise CorruptCheckpoint(f"{path}: {len(data) - offset} trailing bytes")
    return tensors, header["meta"]
