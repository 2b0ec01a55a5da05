"""Sample packing: concatenate rendered dialogues into fixed-budget batches.

Samples are appended to the current batch while they fit and a new batch
opens when one does not (input order is never reshuffled). Segment ids
mark sample boundaries; positions restart at 0 per segment so rotary
phases match an unpacked forward pass, and the attention mask derived
from segment ids keeps samples from attending to each other.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..model import build_attention_mask

__all__ = ["PackedBatch", "pack_samples", "build_attention_mask"]


@dataclass
class PackedBatch:
    token_ids: np.ndarray  # int64, length L <= max_len
    segment_ids: np.ndarray  # int64, non-decreasing
    loss_mask: np.ndarray  # bool, true only at assistant-content tokens
    positions: np.ndarray  # int64, 0 at each segment start

    def __len__(self) -> int:
        return len(self.token_ids)

    def validate(self, max_len: int | None = None) -> None:
        n = len(self.token_ids)
        if not (len(self.segment_ids) == len(self.loss_mask) == len(self.positions) == n):
            raise ValueError("packed batch field lengths differ")
        if max_len is not None and n > max_len:
            raise ValueError(f"packed batch length {n} exceeds max_len {max_len}")
        starts = np.flatnonzero(np.diff(self.segment_ids, prepend=self.segment_ids[0] - 1))
        if not np.array_equal(np.flatnonzero(self.positions == 0), starts):
            raise ValueError("positions must be 0 exactly at segment starts")


def pack_samples(samples, max_len: int) -> list[PackedBatch]:
    """Pack (token_ids, loss_mask) pairs in input order.

    A sample goes into the batch currently being filled if it fits, else
    that batch is sealed and a new one starts. A single sample longer than
    max_len is an error.
    """
    batches: list[PackedBatch] = []
    cur_ids: list[np.ndarray] = []
    cur_mask: list[np.ndarray] = []
    cur_len = 0

    def seal():
        nonlocal cur_ids, cur_mask, cur_len
        if not cur_ids:
            return
        segment_ids = np.concatenate(
            [np.full(len(ids), seg, dtype=np.int64) for seg, ids in enumerate(cur_ids)]
        )
        positions = np.concatenate([np.arange(len(ids), dtype=np.int64) for ids in cur_ids])
        batch = PackedBatch(
            token_ids=np.concatenate(cur_ids),
            segment_ids=segment_ids,
            loss_mask=np.concatenate(cur_mask),
            positions=positions,
        )
        batch.validate(max_len)
        batches.append(batch)
        cur_ids, cur_mask, cur_len = [], [], 0

    for k, (ids, mask) in enumerate(samples):
        ids = np.asarray(ids, dtype=np.int64)
        mask = np.asarray(mask, dtype=bool)
        if len(ids) != len(mask):
            raise ValueError(f"sample {k}: ids and loss mask lengths differ")
        if len(ids) > max_len:
            raise ValueError(f"sample {k} has {len(ids)} tokens, over max_len {max_len}")
        if cur_len + len(ids) > max_len:
            seal()
        cur_ids.append(ids)
        cur_mask.append(mask)
        cur_len += len(ids)
    seal()
    return batches
