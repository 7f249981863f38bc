"""Tensor plumbing: reverse-mode gradients, a finite-difference oracle,
seeded RNG streams and the QTNS binary container.

Reverse-mode differentiation is delegated to torch autograd; everything
else here is small and explicit so it can be checked against the
central-difference oracle.
"""
from __future__ import annotations

import hashlib
import struct
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

DEFAULT_DTYPE = torch.float32

QTNS_MAGIC = b"QTNS"
QTNS_VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class ContractError(ValueError):
    """Raised when a caller violates an operation's precondition."""


class NumericError(ArithmeticError):
    """Raised when a computation produces NaN or Inf."""


def as_tensor(x, dtype: torch.dtype | None = None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    arr = np.asarray(x)
    if dtype is None:
        dtype = torch.float64 if arr.dtype == np.float64 else DEFAULT_DTYPE
    return torch.as_tensor(arr, dtype=dtype)


def check_finite(t: torch.Tensor, op: str) -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NumericError(f"non-finite value produced by {op}")
    return t


def _objective_name(fn) -> str:
    return getattr(fn, "__name__", type(fn).__name__)


def value_and_grad(objective: Callable[[torch.Tensor], torch.Tensor], at
                   ) -> tuple[torch.Tensor, torch.Tensor]:
    """Objective value (detached scalar) and its gradient with respect to ``at``."""
    x = as_tensor(at).detach().clone().requires_grad_(True)
    with torch.enable_grad():
        out = objective(x)
        if not isinstance(out, torch.Tensor) or out.numel() != 1:
            raise ContractError(
                f"objective {_objective_name(objective)} must return a scalar"
            )
        check_finite(out.detach(), _objective_name(objective))
        if not out.requires_grad:
            return out.detach().reshape(()), torch.zeros_like(x).detach()
        (g,) = torch.autograd.grad(out.reshape(()), x, allow_unused=True)
    if g is None:
        g = torch.zeros_like(x)
    return out.detach().reshape(()), g.detach()


def grad(objective: Callable[[torch.Tensor], torch.Tensor], at) -> torch.Tensor:
    """Return d objective / d at, same shape as ``at``.

    The objective must return a single-element tensor.
    """
    return value_and_grad(objective, at)[1]


def finite_diff_grad(
    objective: Callable[[torch.Tensor], torch.Tensor],
    at,
    h: float = 1e-5,
    *,
    batched: bool = False,
    chunk: int = 256,
) -> torch.Tensor:
    """Central-difference gradient estimate.

    With ``batched=True`` the objective receives a stack of perturbed
    points along a new leading axis and must return one value per point;
    this only changes how many points are evaluated per call.
    """
    if not h > 0:
        raise ContractError("finite difference step h must be > 0")
    x = as_tensor(at).detach()
    flat = x.reshape(-1)
    n = flat.numel()
    out = torch.empty(n, dtype=x.dtype)
    with torch.no_grad():
        if not batched:
            for i in range(n):
                xp = flat.clone()
                xm = flat.clone()
                xp[i] += h
                xm[i] -= h
                fp = float(objective(xp.reshape(x.shape)))
                fm = float(objective(xm.reshape(x.shape)))
                out[i] = (fp - fm) / (2 * h)
        else:
            for start in range(0, n, chunk):
                idx = torch.arange(start, min(start + chunk, n))
                base = flat.expand(len(idx), n).clone()
                rows = torch.arange(len(idx))
                plus = base.clone()
                plus[rows, idx] += h
                base[rows, idx] -= h
                fp = objective(plus.reshape(len(idx), *x.shape)).reshape(-1)
                fm = objective(base.reshape(len(idx), *x.shape)).reshape(-1)
                out[idx] = ((fp - fm) / (2 * h)).to(x.dtype)
    return out.reshape(x.shape)


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    """||a - b|| / max(||b||, tiny)."""
    a = as_tensor(a, torch.float64)
    b = as_tensor(b, torch.float64)
    denom = max(float(b.norm()), 1e-300)
    return float((a - b).norm()) / denom


def sign(t: torch.Tensor) -> torch.Tensor:
    # torch.sign already maps 0 -> 0; kept as a named op so the convention is explicit
    return torch.sign(t)


# --------------------------------------------------------------------- RNG


class RngStream:
    """Seeded random stream backed by numpy's PCG64 bit generator.

    Two streams built from the same seed produce identical draws. Child
    streams for parallel jobs are derived with :meth:`fork`.
    """

    algorithm = "numpy.PCG64"

    def __init__(self, seed: int):
        seed = int(seed)
        if not 0 <= seed < 2**64:
            raise ContractError("seed must be a 64-bit unsigned integer")
        self.seed = seed
        self._gen = np.random.Generator(np.random.PCG64(seed))

    def __repr__(self):
        return f"RngStream(seed={self.seed})"

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def fork(self, job_index: int) -> "RngStream":
        return RngStream(child_seed(self.seed, job_index))

    def random(self, shape=()) -> np.ndarray:
        return self._gen.random(shape)

    def integers(self, lo: int, hi: int, size=None):
        return self._gen.integers(lo, hi, size=size)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def child_seed(parent_seed: int, job_index: int) -> int:
    """sha256 over the two little-endian u64 values, first 8 bytes as u64."""
    digest = hashlib.sha256(
        struct.pack("<QQ", int(parent_seed), int(job_index))
    ).digest()
    return struct.unpack("<Q", digest[:8])[0]


def rng_uniform(stream: RngStream, lo: float, hi: float, shape: Sequence[int],
                dtype: torch.dtype = DEFAULT_DTYPE) -> torch.Tensor:
    """Draw Uniform[lo, hi) values; advancing ``stream`` is the only side effect."""
    if lo > hi:
        raise ContractError(f"rng_uniform requires lo <= hi, got {lo} > {hi}")
    u = stream.random(tuple(shape))
    vals = lo + (hi - lo) * u
    if hi > lo:
        # float rounding of lo + (hi-lo)*u may land exactly on hi
        vals = np.minimum(vals, np.nextafter(hi, lo))
    return torch.as_tensor(vals, dtype=dtype)


# -------------------------------------------------------------------- QTNS


def qtns_dumps(t) -> bytes:
    arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
    if arr.dtype == np.float64:
        arr = arr.astype("<f8")
    elif arr.dtype == np.float32:
        arr = arr.astype("<f4")
    else:
        raise ContractError(f"QTNS supports f32/f64 only, got {arr.dtype}")
    if arr.ndim > 255:
        raise ContractError("too many dimensions for QTNS")
    header = QTNS_MAGIC + struct.pack(
        "<BBBB", QTNS_VERSION, _DTYPE_CODES[arr.dtype], arr.ndim, 0
    )
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + dims + np.ascontiguousarray(arr).tobytes(order="C")


def qtns_loads(buf: bytes) -> torch.Tensor:
    if buf[:4] != QTNS_MAGIC:
        raise ValueError("not a QTNS container (bad magic)")
    version, code, ndim, reserved = struct.unpack("<BBBB", buf[4:8])
    if version != QTNS_VERSION:
        raise ValueError(f"unsupported QTNS version {version}")
    if code not in _CODE_DTYPES or reserved != 0:
        raise ValueError("corrupt QTNS header")
    shape = struct.unpack(f"<{ndim}I", buf[8 : 8 + 4 * ndim])
    dtype = _CODE_DTYPES[code]
    payload = buf[8 + 4 * ndim :]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(payload) != expected:
        raise ValueError(
            f"QTNS payload length {len(payload)} does not match shape {shape}"
        )
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
    return torch.from_numpy(arr.astype(dtype.newbyteorder("=")))


def save_qtns(path, t) -> None:
    Path(path).write_bytes(qtns_dumps(t))


def load_qtns(path) -> torch.Tensor:
    return qtns_loads(Path(path).read_bytes())
