"""Slow feature-extractor snapshots and the FIFO motion queue used for cross-video retrieval."""
from __future__ import annotations

import copy
import hashlib
import logging
from dataclasses import dataclass
from typing import Any

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError

log = logging.getLogger(__name__)


def prior_weights(similarities) -> np.ndarray:
    """Normalize top-K similarities into weights; non-positive scores fall back to uniform."""
    s = np.asarray(similarities, dtype=np.float64)
    if s.ndim != 1 or len(s) == 0:
        raise ShapeError("need a non-empty 1-D similarity vector")
    if np.any(s <= 0):
        log.info("non-positive similarity among top-%d; using uniform weights", len(s))
        return np.full(len(s), 1.0 / len(s))
    return s / s.sum()


@dataclass
class SlowExtractor:
    encoder: nn.Module
    snapshot_epoch: int

    @torch.no_grad()
    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        return self.encoder(x)[1]


def snapshot_extractor(encoder: nn.Module, epoch: int) -> SlowExtractor:
    """Deep copy of the encoder, frozen and in eval mode."""
    frozen = copy.deepcopy(encoder)
    frozen.eval()
    for p in frozen.parameters():
        p.requires_grad_(False)
    return SlowExtractor(frozen, epoch)


def parameter_hash(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@dataclass
class QueueHit:
    value: torch.Tensor
    key: torch.Tensor
    similarity: float
    video_id: int


class MotionQueue:
    """Fixed-capacity FIFO of (unit key, frozen value, video id) entries.

    Stored as a ring buffer; ``_stamp`` records insertion order so that eviction
    is oldest-first and ties in retrieval go to the newest entry.
    """

    def __init__(self, capacity: int, dim: int, dtype: torch.dtype = torch.float32):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.dim = dim
        self.keys = torch.zeros(capacity, dim, dtype=dtype)
        self.values = torch.zeros(capacity, dim, dtype=dtype)
        self.video_ids = torch.full((capacity,), -1, dtype=torch.long)
        self._stamp = torch.full((capacity,), -1, dtype=torch.long)
        self._count = 0

    def __len__(self) -> int:
        return min(self._count, self.capacity)

    @torch.no_grad()
    def enqueue(self, key: torch.Tensor, value: torch.Tensor, video_id) -> "MotionQueue":
        """Append one entry ([D] tensors) or a batch ([B, D] tensors with B ids)."""
        key = key.detach()
        value = value.detach()
        if key.ndim == 1:
            key, value = key[None], value[None]
            video_id = [video_id]
        if key.shape[-1] != self.dim or value.shape[-1] != self.dim or key.shape != value.shape:
            raise ShapeError(f"expected [*, {self.dim}] keys/values, got {tuple(key.shape)}, {tuple(value.shape)}")
        ids = torch.as_tensor(video_id, dtype=torch.long).reshape(-1)
        if len(ids) != len(key):
            raise ShapeError("one video id per entry is required")
        unit = F.normalize(key.to(self.keys.dtype), dim=-1)
        for b in range(len(key)):
            slot = self._count % self.capacity
            self.keys[slot] = unit[b]
            self.values[slot] = value[b].to(self.values.dtype)
            self.video_ids[slot] = ids[b]
            self._stamp[slot] = self._count
            self._count += 1
        return self

    def entries(self) -> list[tuple[torch.Tensor, torch.Tensor, int]]:
        """Oldest-first contents."""
        order = self._order_oldest_first()
        return [(self.keys[i], self.values[i], int(self.video_ids[i])) for i in order]

    def _order_oldest_first(self) -> torch.Tensor:
        n = len(self)
        if self._count <= self.capacity:
            return torch.arange(n)
        start = self._count % self.capacity
        return torch.cat([torch.arange(start, self.capacity), torch.arange(0, start)])

    @torch.no_grad()
    def search_topk(self, query: torch.Tensor, k: int, exclude_video: int | None = None) -> list[QueueHit]:
        return self.search_topk_batch(query[None], k, None if exclude_video is None else [exclude_video])[0]

    @torch.no_grad()
    def search_topk_batch(self, queries: torch.Tensor, k: int, exclude_videos=None) -> list[list[QueueHit]]:
        """Top-k entries by cosine similarity for each query row, newest first on ties."""
        if k < 1:
            raise ValueError("k must be >= 1")
        if queries.shape[-1] != self.dim:
            raise ShapeError(f"query dim {queries.shape[-1]} != queue dim {self.dim}")
        # newest-first column order makes the stable sort break ties by recency
        order = self._order_oldest_first().flip(0)
        keys, vids = self.keys[order], self.video_ids[order]
        q = F.normalize(queries.to(keys.dtype), dim=-1)
        sims = q @ keys.T
        if exclude_videos is not None:
            ex = torch.as_tensor(exclude_videos, dtype=torch.long).reshape(-1, 1)
            valid = vids[None, :] != ex
        else:
            valid = torch.ones_like(sims, dtype=torch.bool)
        masked = sims.masked_fill(~valid, float("-inf"))
        ranked = torch.sort(masked, dim=1, descending=True, stable=True).indices
        out = []
        for r in range(len(q)):
            hits = []
            for c in ranked[r, :k].tolist():
                if not valid[r, c]:
                    break
                slot = int(order[c])
                hits.append(QueueHit(self.values[slot], self.keys[slot], float(sims[r, c]), int(self.video_ids[slot])))
            out.append(hits)
        return out

    def state_dict(self) -> dict[str, Any]:
        return {
            "capacity": self.capacity, "dim": self.dim, "keys": self.keys.clone(), "values": self.values.clone(),
            "video_ids": self.video_ids.clone(), "stamp": self._stamp.clone(), "count": self._count,
        }

    @classmethod
    def from_state_dict(cls, state: dict[str, Any]) -> "MotionQueue":
        q = cls(state["capacity"], state["dim"], state["keys"].dtype)
        q.keys.copy_(state["keys"])
        q.values.copy_(state["values"])
        q.video_ids.copy_(state["video_ids"])
        q._stamp.copy_(state["stamp"])
        q._count = int(state["count"])
        return q
