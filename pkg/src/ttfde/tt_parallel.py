"""Block-distributed TT storage and the parallel truncation engine.

Each core ``C_k`` is split along its mode index into ``P`` slabs according to a
partition matrix; worker ``p`` holds slab ``p`` of every core. Orthogonalization
and truncation only communicate inside the tall-skinny QR (TSQR) and its
transposed wide-fat LQ (WFLQ) variant, which reduce along a binary tree whose
shape depends on ``P`` alone.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .comm import Comm, run_spmd
from .tt_core import TTShapeError, TTVector, flatten_h, flatten_v, tt_add, unflatten
from .tt_round import (
    TruncationReport,
    lq_dense,
    per_mode_eps,
    qr_dense,
    svd_trunc_dense,
)


class ReplicaDivergence(RuntimeError):
    """Redundant SVDs produced different results on different workers."""


@dataclass(frozen=True)
class PartitionMatrix:
    """``M[p, k]`` points of mode ``k`` stored on worker ``p``.

    Modes with ``distributed[k] == False`` are shorter than ``P`` and are
    replicated in full on every worker instead.
    """

    M: np.ndarray
    distributed: tuple[bool, ...]

    @property
    def P(self) -> int:
        return self.M.shape[0]

    @property
    def d(self) -> int:
        return self.M.shape[1]

    def offsets(self, k: int) -> np.ndarray:
        if not self.distributed[k]:
            return np.zeros(self.P + 1, dtype=int)
        return np.concatenate([[0], np.cumsum(self.M[:, k])])

    def mode_sizes(self) -> tuple[int, ...]:
        return tuple(
            int(self.M[:, k].sum()) if self.distributed[k] else int(self.M[0, k])
            for k in range(self.d)
        )

    def to_json(self) -> dict:
        return {"M": self.M.tolist(), "distributed": list(self.distributed)}


def partition(mode_sizes, P: int, replicate_short: bool = True) -> PartitionMatrix:
    """Near-even split; the remainder goes to the lowest worker indices."""
    if P < 1:
        raise ValueError("P must be at least 1")
    d = len(mode_sizes)
    M = np.zeros((P, d), dtype=int)
    dist = []
    for k, n in enumerate(mode_sizes):
        if n < P:
            if not replicate_short:
                raise ValueError(f"mode {k} has {n} points, fewer than P = {P}")
            M[:, k] = n
            dist.append(False)
            continue
        q, rem = divmod(n, P)
        M[:, k] = q
        M[:rem, k] += 1
        dist.append(True)
    return PartitionMatrix(M, tuple(dist))


@dataclass
class DistributedTT:
    partition: PartitionMatrix
    local_cores: list[list[np.ndarray]] = field(repr=False)

    @property
    def P(self) -> int:
        return self.partition.P

    @property
    def d(self) -> int:
        return self.partition.d

    @property
    def ranks(self) -> tuple[int, ...]:
        cores = self.local_cores[0]
        return (1,) + tuple(C.shape[2] for C in cores)

    @property
    def mode_sizes(self) -> tuple[int, ...]:
        return self.partition.mode_sizes()


def scatter(f: TTVector, part: PartitionMatrix) -> DistributedTT:
    if part.mode_sizes() != f.mode_sizes:
        raise TTShapeError(f"partition covers {part.mode_sizes()}, tensor has {f.mode_sizes}")
    local = []
    for p in range(part.P):
        blocks = []
        for k, C in enumerate(f.cores):
            if part.distributed[k]:
                off = part.offsets(k)
                blocks.append(np.asfortranarray(C[:, off[p]:off[p + 1], :]))
            else:
                blocks.append(np.asfortranarray(C).copy(order="F"))
        local.append(blocks)
    return DistributedTT(part, local)


def gather(g: DistributedTT) -> TTVector:
    cores = []
    for k in range(g.d):
        if g.partition.distributed[k]:
            cores.append(np.concatenate([g.local_cores[p][k] for p in range(g.P)], axis=1))
        else:
            cores.append(g.local_cores[0][k])
    return TTVector(cores)


def par_add(f: DistributedTT, g: DistributedTT) -> DistributedTT:
    """Blockwise TT sum; no communication."""
    if not np.array_equal(f.partition.M, g.partition.M):
        raise TTShapeError("operands use different partitions")
    local = [
        list(tt_add(TTVector(F), TTVector(G)).cores)
        for F, G in zip(f.local_cores, g.local_cores)
    ]
    return DistributedTT(f.partition, local)


def par_scale(f: DistributedTT, a: float) -> DistributedTT:
    local = [[a * blocks[0]] + list(blocks[1:]) for blocks in f.local_cores]
    return DistributedTT(f.partition, local)


# ---------------------------------------------------------------------------
# TSQR / WFLQ


def tsqr_tree(P: int) -> list[list[tuple[int, int]]]:
    """Reduction levels as ``(parent, child)`` pairs; the larger ID sends."""
    levels = []
    stride = 1
    while stride < P:
        pairs = [(p, p + stride) for p in range(0, P, 2 * stride) if p + stride < P]
        levels.append(pairs)
        stride *= 2
    return levels


def tsqr(comm: Comm, A: np.ndarray, tag="tsqr") -> tuple[np.ndarray, np.ndarray]:
    """Distributed QR of the row-stacked blocks ``A_p``; call on every worker.

    Returns this worker's block of ``Q`` and the replicated ``R``.
    """
    P, p = comm.size, comm.rank
    ncols = comm.allgather(A.shape[1], tag=(tag, "ncols"))
    if len(set(ncols)) != 1:
        raise ValueError(f"TSQR blocks have different column counts: {ncols}")
    Q_leaf, R = qr_dense(A)
    merged = []  # (stride, Q_node, rows contributed by this worker)
    sent_to = None
    stride = 1
    while stride < P:
        if p % (2 * stride) == stride:
            comm.send(R, p - stride, (tag, "up", stride))
            sent_to = (p - stride, stride)
            break
        if p % (2 * stride) == 0 and p + stride < P:
            R_child = comm.recv(p + stride, (tag, "up", stride))
            Q_node, R_new = qr_dense(np.vstack([R, R_child]))
            merged.append((stride, Q_node, R.shape[0]))
            R = R_new
        stride *= 2
    R = comm.bcast(R if p == 0 else None, root=0, tag=(tag, "R"))
    if sent_to is None:
        W = np.eye(R.shape[0])
    else:
        W = comm.recv(sent_to[0], (tag, "down", sent_to[1]))
    for stride, Q_node, top in reversed(merged):
        W_node = Q_node @ W
        comm.send(W_node[top:], p + stride, (tag, "down", stride))
        W = W_node[:top]
    return Q_leaf @ W, R


def wflq(comm: Comm, B: np.ndarray, tag="wflq") -> tuple[np.ndarray, np.ndarray]:
    """Distributed LQ of the column-concatenated blocks ``[B_1 | ... | B_P]``.

    Returns the replicated ``L`` and this worker's block of ``Q``.
    """
    Q, R = tsqr(comm, np.ascontiguousarray(B.T), tag=tag)
    return R.T, Q.T


# ---------------------------------------------------------------------------
# Orthogonalization and truncation (worker bodies)


def _qr_block(comm, A, distributed):
    return tsqr(comm, A) if distributed else qr_dense(A)


def _lq_block(comm, B, distributed):
    return wflq(comm, B) if distributed else lq_dense(B)


def _left_orth_worker(comm: Comm, cores, dist):
    cores = list(cores)
    for c in range(len(cores) - 1):
        a, m, _ = cores[c].shape
        Q, R = _qr_block(comm, flatten_v(cores[c]), dist[c])
        cores[c] = unflatten(Q, (a, m, Q.shape[1]))
        nxt = cores[c + 1]
        cores[c + 1] = unflatten(R @ flatten_h(nxt), (R.shape[0], nxt.shape[1], nxt.shape[2]))
    return cores


def _digest(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def _truncate_worker(comm: Comm, cores, dist, eps, max_rank, check_replicas):
    cores = _left_orth_worker(comm, cores, dist)
    d = len(cores)
    eps_hat = per_mode_eps(eps, d)
    discarded = 0.0
    for c in range(d - 1, 0, -1):
        _, m, b = cores[c].shape
        L, Q = _lq_block(comm, flatten_h(cores[c]), dist[c])
        U, s, Vt, r = svd_trunc_dense(L, eps_hat, max_rank)
        if check_replicas and comm.size > 1:
            digests = comm.allgather(_digest(U, s, Vt), tag=("svd-check", c))
            if len(set(digests)) != 1:
                raise ReplicaDivergence(f"replicated SVD of core {c + 1} diverged across workers")
        discarded += max(float(np.sum(L * L)) - float(s @ s), 0.0)
        cores[c] = unflatten(Vt @ Q, (r, m, b))
        prev = cores[c - 1]
        cores[c - 1] = unflatten(flatten_v(prev) @ (U * s), (prev.shape[0], prev.shape[1], r))
    return cores, discarded


def par_left_orthogonalize(g: DistributedTT) -> DistributedTT:
    dist = g.partition.distributed
    out, _ = run_spmd(g.P, _left_orth_worker, [(g.local_cores[p],) for p in range(g.P)], dist)
    return DistributedTT(g.partition, out)


def par_truncate(
    g: DistributedTT, eps: float, max_rank: int | None = None, check_replicas: bool = True
) -> tuple[DistributedTT, TruncationReport]:
    if g.d < 2:
        raise ValueError("truncation needs at least two cores")
    if not np.isfinite(eps) or eps < 0:
        raise ValueError(f"eps must be finite and non-negative, got {eps}")
    dist = g.partition.distributed
    res, _ = run_spmd(
        g.P,
        _truncate_worker,
        [(g.local_cores[p],) for p in range(g.P)],
        dist,
        eps,
        max_rank,
        check_replicas,
    )
    out = DistributedTT(g.partition, [r[0] for r in res])
    report = TruncationReport(
        input_ranks=g.ranks,
        output_ranks=out.ranks,
        requested_eps=float(eps),
        per_mode_eps=float(per_mode_eps(eps, g.d)),
        discarded_norm_estimate=float(np.sqrt(res[0][1])),
    )
    return out, report


# ---------------------------------------------------------------------------
# Stencil support: ghost cells and cumulative sums along a distributed mode


def _halo_worker(comm: Comm, block, width, periodic, distributed):
    P, p = comm.size, comm.rank
    m = block.shape[1]
    if width > m:
        raise ValueError(f"ghost width {width} exceeds block size {m} on worker {p}")
    if width == 0:
        return block.copy()
    if not distributed or P == 1:
        left = block[:, m - width:, :] if periodic else None
        right = block[:, :width, :] if periodic else None
    else:
        lo_nb = p - 1 if p > 0 else (P - 1 if periodic else None)
        hi_nb = p + 1 if p < P - 1 else (0 if periodic else None)
        if lo_nb is not None:
            comm.send(block[:, :width, :], lo_nb, ("halo", "to-lo"))
        if hi_nb is not None:
            comm.send(block[:, m - width:, :], hi_nb, ("halo", "to-hi"))
        left = comm.recv(lo_nb, ("halo", "to-hi")) if lo_nb is not None else None
        right = comm.recv(hi_nb, ("halo", "to-lo")) if hi_nb is not None else None
    if (left is None or right is None) and width >= m:
        raise ValueError("reflection needs more points than the ghost width")
    if left is None:
        # even reflection about the first node: zero normal derivative
        left = block[:, np.arange(width, 0, -1), :]
    if right is None:
        right = block[:, m - 2 - np.arange(width), :]
    return np.concatenate([left, block, right], axis=1)


def halo_exchange(g: DistributedTT, mode: int, width: int, bc: str = "periodic") -> list[np.ndarray]:
    """Extend every worker's mode-``mode`` slab by ``width`` ghost rows per side.

    Interior boundaries take neighbour data; the outer boundaries either wrap
    (``periodic``) or mirror the slab about the boundary node (``outflow``).
    """
    if bc not in ("periodic", "outflow"):
        raise ValueError(f"unknown boundary rule {bc!r}")
    out, _ = run_spmd(
        g.P,
        _halo_worker,
        [(g.local_cores[p][mode],) for p in range(g.P)],
        width,
        bc == "periodic",
        g.partition.distributed[mode],
    )
    return out


def stencil_coefficients(order: int, h: float) -> np.ndarray:
    if order == 1:
        return np.array([-1.0, 0.0, 1.0]) / (2 * h)
    if order == 2:
        return np.array([1.0, -2.0, 1.0]) / h**2
    raise ValueError("order must be 1 or 2")


def par_apply_stencil(g: DistributedTT, mode: int, h: float, order: int, bc: str) -> DistributedTT:
    """Centered second-order derivative along ``mode`` using ghost exchange."""
    w = stencil_coefficients(order, h)
    ext = halo_exchange(g, mode, 1, bc)
    local = []
    for p in range(g.P):
        E = ext[p]
        m = E.shape[1] - 2
        new = w[0] * E[:, 0:m] + w[1] * E[:, 1:m + 1] + w[2] * E[:, 2:m + 2]
        blocks = list(g.local_cores[p])
        blocks[mode] = np.asfortranarray(new)
        local.append(blocks)
    return DistributedTT(g.partition, local)


def _prefix_worker(comm: Comm, block, h, distributed):
    P, p = comm.size, comm.rank
    zero = np.zeros((block.shape[0], block.shape[2]))
    if not distributed or P == 1:
        offset, ghost = zero, None
    elif p == 0:
        offset, ghost = zero, None
    else:
        offset, ghost = comm.recv(p - 1, "prefix")
    vals = np.empty_like(block)
    run = offset if ghost is None else offset + 0.5 * h * (ghost + block[:, 0, :])
    vals[:, 0, :] = run
    for i in range(1, block.shape[1]):
        run = run + 0.5 * h * (block[:, i - 1, :] + block[:, i, :])
        vals[:, i, :] = run
    if distributed and p < P - 1:
        comm.send((vals[:, -1, :], block[:, -1, :]), p + 1, "prefix")
    return offset, vals


def prefix_pass(g: DistributedTT, mode: int, h: float) -> list[np.ndarray]:
    """Per-worker cumulative-trapezoid offsets along ``mode`` (forward chain).

    Worker ``p`` receives the running integral up to the last point of worker
    ``p-1`` together with that point's value.
    """
    res, _ = run_spmd(
        g.P, _prefix_worker, [(g.local_cores[p][mode],) for p in range(g.P)], h,
        g.partition.distributed[mode],
    )
    return [r[0] for r in res]


def par_cumtrapz(g: DistributedTT, mode: int, h: float) -> DistributedTT:
    res, _ = run_spmd(
        g.P, _prefix_worker, [(g.local_cores[p][mode],) for p in range(g.P)], h,
        g.partition.distributed[mode],
    )
    local = []
    for p in range(g.P):
        blocks = list(g.local_cores[p])
        blocks[mode] = np.asfortranarray(res[p][1])
        local.append(blocks)
    return DistributedTT(g.partition, local)
