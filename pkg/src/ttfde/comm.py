"""Minimal message-passing runtime: P logical workers as threads with mailboxes.

Workers share nothing except the mailboxes. Each worker runs the same function
(SPMD style) with its own :class:`Comm` handle. Messages are copied on send so
a worker can never observe another worker's buffers.
"""

from __future__ import annotations

import copy
import queue
import threading
from typing import Any, Callable

import numpy as np

_POLL = 0.05


class WorkerAborted(RuntimeError):
    """A peer failed; the collective operation was abandoned."""


class _World:
    def __init__(self, size: int):
        self.size = size
        self.boxes: dict[tuple[int, int, Any], queue.Queue] = {}
        self.lock = threading.Lock()
        self.abort = threading.Event()
        self.messages = 0

    def box(self, src: int, dst: int, tag: Any) -> queue.Queue:
        key = (src, dst, tag)
        with self.lock:
            if key not in self.boxes:
                self.boxes[key] = queue.Queue()
            return self.boxes[key]


def _copy(obj):
    if isinstance(obj, np.ndarray):
        return obj.copy()
    return copy.deepcopy(obj)


class Comm:
    def __init__(self, world: _World, rank: int):
        self._world = world
        self.rank = rank
        self.size = world.size

    def send(self, obj, dest: int, tag: Any = 0) -> None:
        if not 0 <= dest < self.size:
            raise ValueError(f"no worker {dest}")
        with self._world.lock:
            self._world.messages += 1
        self._world.box(self.rank, dest, tag).put(_copy(obj))

    def recv(self, source: int, tag: Any = 0):
        box = self._world.box(source, self.rank, tag)
        while True:
            try:
                return box.get(timeout=_POLL)
            except queue.Empty:
                if self._world.abort.is_set():
                    raise WorkerAborted(f"worker {self.rank}: peer failure while waiting on {source}")

    def bcast(self, obj=None, root: int = 0, tag: Any = "bcast"):
        # flat fan-out from the root; order-deterministic
        if self.rank == root:
            for p in range(self.size):
                if p != root:
                    self.send(obj, p, tag)
            return obj
        return self.recv(root, tag)

    def gather(self, obj, root: int = 0, tag: Any = "gather"):
        if self.rank == root:
            out = [None] * self.size
            out[root] = obj
            for p in range(self.size):
                if p != root:
                    out[p] = self.recv(p, tag)
            return out
        self.send(obj, root, tag)
        return None

    def allgather(self, obj, tag: Any = "allgather"):
        return self.bcast(self.gather(obj, 0, (tag, "g")), 0, (tag, "b"))


def run_spmd(P: int, fn: Callable[..., Any], per_worker_args=None, *shared) -> tuple[list, int]:
    """Run ``fn(comm, *worker_args, *shared)`` on ``P`` workers.

    Returns the per-worker results and the number of point-to-point messages
    exchanged. The first worker exception is re-raised after all workers stop.
    """
    if P < 1:
        raise ValueError("need at least one worker")
    world = _World(P)
    results: list = [None] * P
    errors: list = [None] * P

    def body(p):
        comm = Comm(world, p)
        args = per_worker_args[p] if per_worker_args is not None else ()
        try:
            results[p] = fn(comm, *args, *shared)
        except BaseException as exc:  # noqa: BLE001 - re-raised below
            errors[p] = exc
            world.abort.set()

    if P == 1:
        body(0)
    else:
        threads = [threading.Thread(target=body, args=(p,), daemon=True) for p in range(P)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    primary = [e for e in errors if e is not None and not isinstance(e, WorkerAborted)]
    if primary:
        raise primary[0]
    if any(e is not None for e in errors):
        raise next(e for e in errors if e is not None)
    return results, world.messages
