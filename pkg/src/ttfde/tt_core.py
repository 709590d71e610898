"""Tensor-train vectors and exact (rank-growing) arithmetic.

Cores are stored column-major in (left rank, mode, right rank) order, so the
horizontal and vertical flattenings are views rather than copies.
"""

from __future__ import annotations

import os
import struct
from typing import BinaryIO, Sequence, Union

import numpy as np

DENSE_CAP = 10**7
MAGIC = b"TTV1"


class TTShapeError(ValueError):
    """Raised when cores, ranks or mode sizes are inconsistent."""


def flatten_h(C: np.ndarray) -> np.ndarray:
    """Horizontal flattening, ``H[i, j + b*k] = C[i, j, k]``."""
    a, b, c = C.shape
    return C.reshape(a, b * c, order="F")


def flatten_v(C: np.ndarray) -> np.ndarray:
    """Vertical flattening, ``V[i + a*j, k] = C[i, j, k]``."""
    a, b, c = C.shape
    return C.reshape(a * b, c, order="F")


def unflatten(M: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    """Inverse of either flattening: copy the entries of ``M`` into a core of ``shape``."""
    return np.asfortranarray(np.reshape(M, tuple(shape), order="F"))


def check_ranks(ranks: Sequence[int], d: int) -> None:
    if len(ranks) != d + 1:
        raise TTShapeError(f"rank vector needs {d + 1} entries, got {len(ranks)}")
    if ranks[0] != 1 or ranks[-1] != 1:
        raise TTShapeError(f"boundary ranks must be 1, got {list(ranks)}")
    if any(int(r) < 1 for r in ranks):
        raise TTShapeError(f"ranks must be positive, got {list(ranks)}")


class TTVector:
    """A d-dimensional tensor held as a chain of order-3 cores.

    Values are treated as immutable: every operation returns a new object and
    the core arrays are marked read-only.
    """

    __slots__ = ("cores",)

    def __init__(self, cores: Sequence[np.ndarray]):
        if len(cores) == 0:
            raise TTShapeError("a TT vector needs at least one core")
        fixed = []
        for k, C in enumerate(cores):
            C = np.asarray(C, dtype=np.float64)
            if C.ndim != 3:
                raise TTShapeError(f"core {k} has {C.ndim} dimensions, expected 3")
            # read-only view; the caller's array keeps its own flags
            C = np.asfortranarray(C).view()
            C.flags.writeable = False
            fixed.append(C)
        for k in range(len(fixed) - 1):
            if fixed[k].shape[2] != fixed[k + 1].shape[0]:
                raise TTShapeError(
                    f"rank mismatch between cores {k} and {k + 1}: "
                    f"{fixed[k].shape} vs {fixed[k + 1].shape}"
                )
        if fixed[0].shape[0] != 1 or fixed[-1].shape[2] != 1:
            raise TTShapeError("boundary ranks must be 1")
        self.cores = tuple(fixed)

    @property
    def d(self) -> int:
        return len(self.cores)

    @property
    def mode_sizes(self) -> tuple[int, ...]:
        return tuple(C.shape[1] for C in self.cores)

    @property
    def ranks(self) -> tuple[int, ...]:
        return (1,) + tuple(C.shape[2] for C in self.cores)

    @property
    def max_rank(self) -> int:
        return max(self.ranks)

    def storage(self) -> int:
        """Number of stored floating point entries."""
        return sum(C.size for C in self.cores)

    def __repr__(self) -> str:
        return f"TTVector(mode_sizes={self.mode_sizes}, ranks={self.ranks})"

    def __add__(self, other: "TTVector") -> "TTVector":
        return tt_add(self, other)

    def __sub__(self, other: "TTVector") -> "TTVector":
        return tt_add(self, tt_scale(other, -1.0))

    def __mul__(self, a: float) -> "TTVector":
        return tt_scale(self, a)

    __rmul__ = __mul__

    def __neg__(self) -> "TTVector":
        return tt_scale(self, -1.0)


def tt_zeros(mode_sizes: Sequence[int]) -> TTVector:
    """Zero tensor with all ranks equal to one."""
    return TTVector([np.zeros((1, n, 1)) for n in mode_sizes])


def tt_ones(mode_sizes: Sequence[int]) -> TTVector:
    return TTVector([np.ones((1, n, 1)) for n in mode_sizes])


def tt_rank1(vectors: Sequence[np.ndarray]) -> TTVector:
    """Separable tensor ``v1 ⊗ v2 ⊗ ... ⊗ vd``."""
    return TTVector([np.asarray(v, dtype=np.float64).reshape(1, -1, 1) for v in vectors])


def tt_random(mode_sizes: Sequence[int], ranks: Sequence[int], rng) -> TTVector:
    """TT tensor with i.i.d. standard normal core entries.

    ``rng`` is a ``numpy.random.Generator`` or an integer seed.
    """
    d = len(mode_sizes)
    check_ranks(ranks, d)
    rng = np.random.default_rng(rng)
    return TTVector(
        [rng.standard_normal((ranks[k], mode_sizes[k], ranks[k + 1])) for k in range(d)]
    )


def tt_entry(f: TTVector, idx: Sequence[int]) -> float:
    if len(idx) != f.d:
        raise IndexError(f"expected {f.d} indices, got {len(idx)}")
    row = np.ones((1,))
    for C, i in zip(f.cores, idx):
        if not 0 <= i < C.shape[1]:
            raise IndexError(f"index {i} out of range for mode of size {C.shape[1]}")
        row = row @ C[:, i, :]
    return float(row[0])


def tt_to_dense(f: TTVector, cap: int = DENSE_CAP) -> np.ndarray:
    size = int(np.prod(f.mode_sizes, dtype=np.int64))
    if size > cap:
        raise MemoryError(f"dense tensor would hold {size} entries (cap {cap})")
    out = f.cores[0].reshape(f.cores[0].shape[1], -1)
    for C in f.cores[1:]:
        out = out @ C.reshape(C.shape[0], -1)
        out = out.reshape(-1, C.shape[2])
    return out.reshape(f.mode_sizes)


def _check_same_modes(f: TTVector, g: TTVector) -> None:
    if f.mode_sizes != g.mode_sizes:
        raise TTShapeError(f"mode sizes differ: {f.mode_sizes} vs {g.mode_sizes}")


def tt_add(f: TTVector, g: TTVector) -> TTVector:
    """Exact sum; interior cores are block diagonal, boundary cores concatenated."""
    _check_same_modes(f, g)
    d = f.d
    if d == 1:
        return TTVector([f.cores[0] + g.cores[0]])
    cores = []
    for k, (C, D) in enumerate(zip(f.cores, g.cores)):
        n = C.shape[1]
        if k == 0:
            W = np.concatenate([C, D], axis=2)
        elif k == d - 1:
            W = np.concatenate([C, D], axis=0)
        else:
            W = np.zeros((C.shape[0] + D.shape[0], n, C.shape[2] + D.shape[2]), order="F")
            W[: C.shape[0], :, : C.shape[2]] = C
            W[C.shape[0]:, :, C.shape[2]:] = D
        cores.append(W)
    return TTVector(cores)


def tt_sum(terms: Sequence[TTVector]) -> TTVector:
    out = terms[0]
    for t in terms[1:]:
        out = tt_add(out, t)
    return out


def tt_scale(f: TTVector, a: float) -> TTVector:
    cores = list(f.cores)
    cores[0] = a * cores[0]
    return TTVector(cores)


def tt_inner(f: TTVector, g: TTVector) -> float:
    _check_same_modes(f, g)
    W = np.ones((1, 1))
    for C, D in zip(f.cores, g.cores):
        # W[a, b] C[a, i, c] D[b, i, e] -> W'[c, e]
        T = np.tensordot(W, C, axes=(0, 0))
        W = np.tensordot(T, D, axes=([0, 1], [0, 1]))
    return float(W[0, 0])


def tt_norm(f: TTVector) -> float:
    return float(np.sqrt(max(tt_inner(f, f), 0.0)))


def save_tt(f: TTVector, fh: Union[BinaryIO, str, os.PathLike]) -> None:
    """Write the ``TTV1`` binary snapshot (little-endian int64 header, float64 cores)."""
    if isinstance(fh, (str, os.PathLike)):
        with open(fh, "wb") as out:
            return save_tt(f, out)
    header = [f.d, *f.mode_sizes, *f.ranks]
    fh.write(MAGIC)
    fh.write(struct.pack(f"<{len(header)}q", *header))
    for C in f.cores:
        fh.write(np.asarray(C, dtype="<f8").tobytes(order="F"))


def load_tt(fh: Union[BinaryIO, str, os.PathLike]) -> TTVector:
    if isinstance(fh, (str, os.PathLike)):
        with open(fh, "rb") as src:
            return load_tt(src)
    if fh.read(4) != MAGIC:
        raise ValueError("not a TTV1 snapshot")
    (d,) = struct.unpack("<q", fh.read(8))
    modes = struct.unpack(f"<{d}q", fh.read(8 * d))
    ranks = struct.unpack(f"<{d + 1}q", fh.read(8 * (d + 1)))
    check_ranks(ranks, d)
    cores = []
    for k in range(d):
        shape = (ranks[k], modes[k], ranks[k + 1])
        count = int(np.prod(shape))
        buf = fh.read(8 * count)
        if len(buf) != 8 * count:
            raise ValueError("truncated TTV1 snapshot")
        cores.append(np.frombuffer(buf, dtype="<f8").reshape(shape, order="F"))
    return TTVector(cores)
