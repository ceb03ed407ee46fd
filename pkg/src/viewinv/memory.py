"""Dual dictionary queues, momentum-encoder maintenance and NN lookup.

Queue1 stores key embeddings, Queue2 the paired world codes; both share one
cursor so index ``i`` of each always originates from the same video. Stage-1
training only writes Queue1 (``enqueue``); stage 2 writes both
(``enqueue_pair``). All mutation happens from the single training thread;
reads between steps are safe.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import Tensor, nn

# float32-normalized vectors land well inside this window
NORM_TOL = 1e-4


def _check_unit(name: str, v: Tensor) -> None:
    norm = float(torch.linalg.vector_norm(v.detach().double()))
    if abs(norm - 1.0) > NORM_TOL:
        raise ValueError(f"{name} must be unit-norm, got |v| = {norm:.6f}")


class QueueState:
    """Index-aligned circular buffers of embeddings, world codes and source ids."""

    def __init__(self, capacity: int, embed_dim: int, code_dim: int, dtype=torch.float32):
        if capacity <= 0:
            raise ValueError(f"capacity must be positive, got {capacity}")
        self.capacity = int(capacity)
        self.queue1 = torch.zeros(self.capacity, embed_dim, dtype=dtype)
        self.queue2 = torch.zeros(self.capacity, code_dim, dtype=dtype)
        self.source_ids = np.full(self.capacity, -1, dtype=np.int64)
        self.cursor = 0
        self.filled = 0

    def enqueue(self, key: Tensor, source_id: int) -> None:
        """Write a key embedding at the cursor, leaving Queue2 untouched."""
        _check_unit("key", key)
        self.queue1[self.cursor] = key.detach().to(self.queue1.dtype)
        self.source_ids[self.cursor] = int(source_id)
        self.cursor = (self.cursor + 1) % self.capacity
        self.filled = min(self.filled + 1, self.capacity)

    def enqueue_pair(self, key: Tensor, code: Tensor, source_id: int) -> None:
        """Write an aligned (embedding, world code) pair at the cursor."""
        _check_unit("key", key)
        _check_unit("code", code)
        self.queue2[self.cursor] = code.detach().to(self.queue2.dtype)
        self.enqueue(key, source_id)

    def embeddings(self) -> Tensor:
        return self.queue1[: self.filled]

    def codes(self) -> Tensor:
        return self.queue2[: self.filled]

    def top1_neighbor(self, query: Tensor, exclude_source_id: int | None = None):
        """Index of the filled entry minimizing L2 distance to ``query``.

        Entries whose source id equals ``exclude_source_id`` are skipped.
        Returns ``None`` when no eligible entry exists (caller skips the 3D
        loss for that sample). Ties break toward the lowest index.
        """
        if self.filled == 0:
            return None
        q = query.detach().double().cpu().numpy()
        keys = self.queue1[: self.filled].double().cpu().numpy()
        d2 = ((keys - q[None, :]) ** 2).sum(axis=1)
        if exclude_source_id is not None:
            d2 = np.where(self.source_ids[: self.filled] == int(exclude_source_id), np.inf, d2)
        if not np.isfinite(d2).any():
            return None
        return int(np.argmin(d2))

    def state_dict(self) -> dict:
        return {
            "queue1": self.queue1.clone(),
            "queue2": self.queue2.clone(),
            "source_ids": self.source_ids.copy(),
            "cursor": self.cursor,
            "filled": self.filled,
            "capacity": self.capacity,
        }

    def load_state_dict(self, state: dict) -> None:
        if int(state["capacity"]) != self.capacity:
            raise ValueError("queue capacity mismatch")
        self.queue1 = state["queue1"].clone()
        self.queue2 = state["queue2"].clone()
        self.source_ids = np.asarray(state["source_ids"], dtype=np.int64).copy()
        self.cursor = int(state["cursor"])
        self.filled = int(state["filled"])


@torch.no_grad()
def momentum_update(query: nn.Module, key: nn.Module, momentum: float) -> None:
    """EMA update ``theta_k <- m * theta_k + (1 - m) * theta_q`` in place.

    Applies to every floating-point entry of the state dict; integer buffers
    (e.g. batch counters) are copied from the query side.
    """
    q_state = query.state_dict()
    k_state = key.state_dict()
    if q_state.keys() != k_state.keys():
        raise ValueError("parameter trees are not isomorphic")
    for name, q_val in q_state.items():
        k_val = k_state[name]
        if q_val.shape != k_val.shape:
            raise ValueError(f"shape mismatch for {name}")
        if torch.is_floating_point(k_val):
            k_val.mul_(momentum).add_(q_val, alpha=1.0 - momentum)
        else:
            k_val.copy_(q_val)
