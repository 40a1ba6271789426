"""Dense float64 tensors with a reverse-mode differentiation tape.

Everything in this package computes on `Tensor` values. Operations executed
while a `Tape` is active are recorded in execution order; `backward` replays
the tape in exact reverse order and accumulates gradients into every tensor
that requires them. `finite_diff_grad` is the independent central-difference
oracle used to validate every backward rule.

All values are float64. Every operation checks its output for NaN/Inf and
raises `NumericsError` on the first non-finite value, which is also how the
training loop detects divergence.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible with the operation's contract."""


class ContractError(ValueError):
    """An operation precondition (other than shape) was violated."""


class NumericsError(ArithmeticError):
    """A forward computation produced NaN/Inf or an invalid decomposition."""


class DecompositionError(NumericsError):
    """Matrix factorization failed (e.g. non-positive Cholesky pivot)."""


class Tensor:
    """A dense float64 array with an optional gradient slot.

    Tensors are immutable by convention once created; only the optimizer
    mutates parameter data in place, after the step's tape is discarded.
    """

    __slots__ = ("data", "requires_grad", "grad", "ste_tainted")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        # Filled by backward(); same shape as data when present.
        self.grad: Optional[np.ndarray] = None
        # Set by backward() when the gradient includes a straight-through
        # contribution and is therefore exempt from finite-difference equality.
        self.ste_tainted = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Arithmetic dunders and convenience methods (t, reshape, sum, ...) are
    # attached by hyperreid.ops at import time to avoid a module cycle.


_Backward = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class _Record:
    out: Tensor
    inputs: tuple
    backward: _Backward
    name: str
    ste: bool


class Tape:
    """Ordered record of executed operations for one backward pass.

    One tape per training step; the tape (and the graph it retains) is
    dropped after the optimizer update. Single-threaded by contract.
    """

    _stack: list["Tape"] = []

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> bool:
        Tape._stack.pop()
        return False

    @classmethod
    def active(cls) -> Optional["Tape"]:
        return cls._stack[-1] if cls._stack else None

    def record(self, out: Tensor, inputs: tuple, backward: _Backward,
               name: str, ste: bool = False) -> None:
        self.records.append(_Record(out, inputs, backward, name, ste))

    def __len__(self) -> int:
        return len(self.records)


class _suspend_tape:
    """Context manager that disables recording (pure forward evaluation)."""

    def __enter__(self):
        self._saved = Tape._stack
        Tape._stack = []
        return self

    def __exit__(self, *exc):
        Tape._stack = self._saved
        return False


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate gradients of everything on `tape` reachable from `loss`.

    Visits records in exact reverse execution order (a valid reverse
    topological order, since recording follows execution). Repeated calls
    without resetting grads accumulate. Tensors whose gradient includes a
    straight-through contribution get `ste_tainted` set.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    working: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    touched: dict[int, Tensor] = {id(loss): loss}
    tainted: set[int] = set()
    for rec in reversed(tape.records):
        g_out = working.get(id(rec.out))
        if g_out is None:
            continue
        out_tainted = id(rec.out) in tainted
        grads = rec.backward(g_out)
        for t, g in zip(rec.inputs, grads):
            if g is None or not isinstance(t, Tensor) or not t.requires_grad:
                continue
            if g.shape != t.data.shape:
                raise ShapeError(
                    f"{rec.name}: backward produced gradient of shape {g.shape} "
                    f"for input of shape {t.data.shape}")
            acc = working.get(id(t))
            working[id(t)] = g if acc is None else acc + g
            touched[id(t)] = t
            if out_tainted or rec.ste:
                tainted.add(id(t))
    for tid, t in touched.items():
        g = working[tid]
        t.grad = g if t.grad is None else t.grad + g
        if tid in tainted:
            t.ste_tainted = True


def finite_diff_grad(f: Callable[[Tensor], "Tensor | float"], x: Tensor,
                     h: float = 1e-5) -> Tensor:
    """Central-difference gradient oracle: (f(x+h*e_i) - f(x-h*e_i)) / 2h.

    `f` is evaluated with recording suspended, so it can be the same code
    path as the taped forward. Deliberately independent of backward().
    """
    base = np.array(x.data, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    with _suspend_tape():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = f(Tensor(base))
            flat[i] = orig - h
            lo = f(Tensor(base))
            flat[i] = orig
            hi = hi.item() if isinstance(hi, Tensor) else float(hi)
            lo = lo.item() if isinstance(lo, Tensor) else float(lo)
            gflat[i] = (hi - lo) / (2.0 * h)
    return Tensor(grad)


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Max absolute difference over the max absolute magnitude of either side."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(float(np.max(np.abs(a), initial=0.0)),
                float(np.max(np.abs(b), initial=0.0)), 1e-8)
    return float(np.max(np.abs(a - b), initial=0.0)) / scale


@dataclass
class Parameter:
    """A named learnable tensor with its momentum accumulator."""

    name: str
    value: Tensor
    momentum: np.ndarray = field(init=False)

    def __post_init__(self):
        if not isinstance(self.value, Tensor):
            self.value = Tensor(self.value)
        self.value.requires_grad = True
        self.momentum = np.zeros_like(self.value.data)

    @property
    def grad(self) -> Optional[np.ndarray]:
        return self.value.grad

    def zero_grad(self) -> None:
        self.value.grad = None
        self.value.ste_tainted = False


# ---------------------------------------------------------------------------
# Checkpoint records: per parameter, newline-terminated ASCII header lines
# (name, rank, one extent per dimension) followed immediately by the raw
# little-endian float64 payload. Records are concatenated in parameter order.
# ---------------------------------------------------------------------------

def save_parameters(path, params: Sequence[Parameter]) -> None:
    with open(path, "wb") as fh:
        for p in params:
            fh.write(p.name.encode("ascii") + b"\n")
            fh.write(str(p.value.ndim).encode("ascii") + b"\n")
            for extent in p.value.shape:
                fh.write(str(int(extent)).encode("ascii") + b"\n")
            fh.write(np.ascontiguousarray(p.value.data, dtype="<f8").tobytes())


def _read_line(buf: bytes, pos: int) -> tuple[str, int]:
    end = buf.index(b"\n", pos)
    return buf[pos:end].decode("ascii"), end + 1


def load_parameters(path) -> dict[str, np.ndarray]:
    """Read a checkpoint file back into {name: array}."""
    with open(path, "rb") as fh:
        buf = fh.read()
    out: dict[str, np.ndarray] = {}
    pos = 0
    while pos < len(buf):
        name, pos = _read_line(buf, pos)
        rank_s, pos = _read_line(buf, pos)
        rank = int(rank_s)
        shape = []
        for _ in range(rank):
            ext, pos = _read_line(buf, pos)
            shape.append(int(ext))
        count = int(np.prod(shape)) if shape else 1
        payload = np.frombuffer(buf, dtype="<f8", count=count, offset=pos)
        pos += count * 8
        out[name] = payload.reshape(shape).astype(np.float64)
    return out


def assign_parameters(params: Sequence[Parameter], values: dict[str, np.ndarray]) -> None:
    for p in params:
        if p.name not in values:
            raise ContractError(f"checkpoint is missing parameter {p.name!r}")
        arr = values[p.name]
        if arr.shape != p.value.shape:
            raise ShapeError(
                f"checkpoint shape {arr.shape} != parameter {p.name!r} shape {p.value.shape}")
        p.value.data = arr.copy()
