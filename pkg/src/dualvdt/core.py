"""Differentiable array substrate.

Tensors are ``torch.Tensor`` (float64 by default) and reverse-mode gradients
come from torch autograd.  This module adds the pieces the model relies on
having pinned down: a portable counter-based RNG, a catalogue of checked
operations, a finite-difference gradient oracle and the binary parameter
payload used inside checkpoints.
"""

from __future__ import annotations

import math
import struct
from typing import BinaryIO, Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

DTYPE = torch.float64


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


def _shape(t) -> tuple:
    return tuple(t.shape)


# ---------------------------------------------------------------------------
# Randomness
# ---------------------------------------------------------------------------


class Rng:
    """Seeded generator backed by numpy's Philox4x64 counter-based bit generator.

    Draws are made in float64 on the host and converted to torch tensors, so a
    given seed yields the same sequence on every platform numpy supports.
    """

    ALGORITHM = "philox4x64-10"

    def __init__(self, seed: int = 0):
        if seed < 0 or seed >= 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.Philox(self.seed))

    def normal(self, shape, dtype=DTYPE) -> torch.Tensor:
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        return torch.from_numpy(self._gen.standard_normal(shape)).to(dtype)

    def uniform(self, shape, low=0.0, high=1.0, dtype=DTYPE) -> torch.Tensor:
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        return torch.from_numpy(self._gen.uniform(low, high, shape)).to(dtype)

    def integers(self, low: int, high: int, size) -> np.ndarray:
        """Integers in ``[low, high)``."""
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def get_state(self) -> dict:
        return self._gen.bit_generator.state

    def set_state(self, state: dict) -> None:
        self._gen.bit_generator.state = state

    def spawn(self, key: int) -> "Rng":
        """Independent child stream keyed by ``key`` (same seed, same key -> same stream)."""
        return Rng((self.seed * 1_000_003 + key + 1) % 2**64)


def gaussian_sample(rng: Rng, shape, mean=0.0, std=1.0) -> torch.Tensor:
    """``mean + std * eps`` with ``eps`` standard normal drawn from ``rng``."""
    std_t = torch.as_tensor(std, dtype=DTYPE)
    if bool((std_t < 0).any()):
        raise DomainError("gaussian_sample: std must be non-negative")
    eps = rng.normal(shape)
    return torch.as_tensor(mean, dtype=DTYPE) + std_t * eps


# ---------------------------------------------------------------------------
# Operation catalogue
# ---------------------------------------------------------------------------


def _broadcast(name, a, b):
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise ShapeError(f"{name}: cannot broadcast {_shape(a)} with {_shape(b)}") from None


def matmul(a, b):
    if a.dim() < 1 or b.dim() < 1 or a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise ShapeError(f"matmul: inner dimensions differ for {_shape(a)} and {_shape(b)}")
    return a @ b


def add(a, b):
    _broadcast("add", a, b)
    return a + b


def sub(a, b):
    _broadcast("sub", a, b)
    return a - b


def mul(a, b):
    _broadcast("mul", a, b)
    return a * b


def div(a, b):
    _broadcast("div", a, b)
    if bool((b == 0).any()):
        raise DomainError("div: zero in denominator")
    return a / b


def exp(x):
    return torch.exp(x)


def log(x):
    if bool((x <= 0).any()):
        raise DomainError("log: non-positive operand")
    return torch.log(x)


def sqrt(x):
    if bool((x < 0).any()):
        raise DomainError("sqrt: negative operand")
    return torch.sqrt(x)


def softmax(x, dim: int = -1):
    return torch.softmax(x, dim=dim)


def masked_fill(logits, mask, value: float = -math.inf):
    """Keep entries where ``mask`` is 1; set the rest to ``value`` (-inf by default)."""
    mask = torch.as_tensor(mask, dtype=torch.bool)
    _broadcast("masked_fill", logits, mask)
    return logits.masked_fill(~mask, value)


def conv1d(x, weight, bias=None, padding: int = 0):
    """``x`` is (batch, channels, length); ``weight`` is (out, in, kernel)."""
    if x.dim() != 3 or weight.dim() != 3 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv1d: input {_shape(x)} incompatible with weight {_shape(weight)}")
    return F.conv1d(x, weight, bias, padding=padding)


def concat(tensors: Sequence[torch.Tensor], dim: int = -1):
    ref = tensors[0]
    d = dim % ref.dim()
    for t in tensors[1:]:
        if t.dim() != ref.dim() or any(
            t.shape[j] != ref.shape[j] for j in range(ref.dim()) if j != d
        ):
            raise ShapeError(f"concat: {_shape(ref)} and {_shape(t)} differ off axis {dim}")
    return torch.cat(list(tensors), dim=dim)


def sum(x, dim=None):  # noqa: A001 - catalogue name
    return x.sum() if dim is None else x.sum(dim=dim)


def mean(x, dim=None):
    return x.mean() if dim is None else x.mean(dim=dim)


def softplus(x):
    return F.softplus(x)


def affine(x, weight, bias=None):
    """``x @ weight.T + bias`` with weight laid out (out, in)."""
    if x.shape[-1] != weight.shape[-1]:
        raise ShapeError(f"affine: input {_shape(x)} incompatible with weight {_shape(weight)}")
    return F.linear(x, weight, bias)


OPS: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "softmax": softmax,
    "masked_fill": masked_fill,
    "conv1d": conv1d,
    "concat": concat,
    "sum": sum,
    "mean": mean,
    "softplus": softplus,
    "affine": affine,
}


def op_set() -> dict[str, Callable]:
    return dict(OPS)


# ---------------------------------------------------------------------------
# Gradient oracle
# ---------------------------------------------------------------------------


def grad_check(fn: Callable[[torch.Tensor], torch.Tensor], point, step: float = 1e-5) -> float:
    """Max over coordinates of ``|analytic - central difference| / max(1, |analytic|)``.

    ``fn`` must map a tensor shaped like ``point`` to a scalar and must be
    deterministic (reset any RNG inside the closure).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x = torch.as_tensor(point, dtype=DTYPE).detach().clone().requires_grad_(True)
    out = fn(x)
    if out.numel() != 1:
        raise ShapeError(f"grad_check: function output must be scalar, got shape {_shape(out)}")
    (analytic,) = torch.autograd.grad(out, x, allow_unused=True)
    if analytic is None:
        analytic = torch.zeros_like(x)
    numeric = torch.zeros_like(x)
    flat = x.detach().clone().reshape(-1)
    with torch.no_grad():
        for j in range(flat.numel()):
            orig = flat[j].item()
            flat[j] = orig + step
            fp = fn(flat.reshape(x.shape)).item()
            flat[j] = orig - step
            fm = fn(flat.reshape(x.shape)).item()
            flat[j] = orig
            numeric.view(-1)[j] = (fp - fm) / (2 * step)
    err = (analytic - numeric).abs() / analytic.abs().clamp(min=1.0)
    return float(err.max()) if err.numel() else 0.0


def grad_check_params(
    loss_fn: Callable[[], torch.Tensor],
    params: Iterable[torch.nn.Parameter],
    step: float = 1e-5,
    max_coords: int | None = 16,
    rng: Rng | None = None,
) -> float:
    """Finite-difference check of ``loss_fn`` against every parameter in ``params``.

    At most ``max_coords`` coordinates per tensor are perturbed (chosen by
    ``rng``); ``None`` checks them all.
    """
    params = [p for p in params]
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    rng = rng or Rng(0)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, grads):
            g = torch.zeros_like(p) if g is None else g
            flat = p.view(-1)
            n = flat.numel()
            idx = range(n) if max_coords is None or n <= max_coords else rng.permutation(n)[:max_coords]
            for j in idx:
                j = int(j)
                orig = flat[j].item()
                flat[j] = orig + step
                fp = loss_fn().item()
                flat[j] = orig - step
                fm = loss_fn().item()
                flat[j] = orig
                num = (fp - fm) / (2 * step)
                a = g.reshape(-1)[j].item()
                worst = max(worst, abs(a - num) / max(1.0, abs(a)))
    return worst


# ---------------------------------------------------------------------------
# Parameter payload
# ---------------------------------------------------------------------------

# entry: u32 name length, utf-8 name, u32 ndim, u64 * ndim extents, f64 * count (row-major, LE)


def write_params(fh: BinaryIO, named: Iterable[tuple[str, torch.Tensor]]) -> None:
    named = list(named)
    fh.write(struct.pack("<I", len(named)))
    for name, t in named:
        arr = np.asarray(t.detach().cpu().numpy(), dtype="<f8", order="C")
        raw = name.encode("utf-8")
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.tobytes(order="C"))


def read_params(fh: BinaryIO) -> list[tuple[str, np.ndarray]]:
    def take(fmt):
        size = struct.calcsize(fmt)
        buf = fh.read(size)
        if len(buf) != size:
            raise ValueError("truncated parameter payload")
        return struct.unpack(fmt, buf)

    (count,) = take("<I")
    out = []
    for _ in range(count):
        (nlen,) = take("<I")
        name = fh.read(nlen).decode("utf-8")
        (ndim,) = take("<I")
        shape = take(f"<{ndim}Q") if ndim else ()
        n = int(np.prod(shape)) if ndim else 1
        buf = fh.read(8 * n)
        if len(buf) != 8 * n:
            raise ValueError(f"truncated values for parameter {name!r}")
        out.append((name, np.frombuffer(buf, dtype="<f8").reshape(shape).copy()))
    return out
