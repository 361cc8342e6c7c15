"""Time-aware chunking of a padded behavior sequence.

Positions are 0-based here.  Padding behaviors carry timestamp 0 and form a
contiguous prefix; they always end up in the padding chunk.  The valid part
is cut at its ``num_chunks - 1`` largest adjacent time gaps, so every
sequence yields exactly ``num_chunks`` valid chunk slots (some possibly
empty), which keeps batched chunk tensors rectangular.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def padding_length(times) -> int:
    """Number of leading zero timestamps; validates the padding/sort invariants."""
    t = np.asarray(times, dtype=np.int64)
    if t.ndim != 1:
        raise ValueError(f"behavior times must be 1-D, got shape {t.shape}")
    if t.size and t.min() < 0:
        raise ValueError("behavior times must be non-negative")
    nonzero = np.flatnonzero(t != 0)
    n_pad = int(nonzero[0]) if nonzero.size else int(t.size)
    valid = t[n_pad:]
    if np.any(valid == 0):
        raise ValueError("padding (zero) timestamps must form a contiguous prefix")
    if np.any(np.diff(valid) < 0):
        raise ValueError("valid behavior timestamps must be non-decreasing")
    return n_pad


@dataclass(frozen=True)
class ChunkPartition:
    """Segmentation of one sequence into a padding chunk and ``num_chunks`` valid chunks.

    ``starts`` has length ``num_chunks + 2``: chunk ``k`` (0 = padding chunk)
    covers positions ``starts[k]:starts[k + 1]``.
    """

    starts: tuple[int, ...]
    chunk_mean_time: tuple[float, ...]

    @property
    def num_chunks(self) -> int:
        return len(self.starts) - 2

    @property
    def length(self) -> int:
        return self.starts[-1]

    def chunk(self, k: int) -> range:
        return range(self.starts[k], self.starts[k + 1])

    @property
    def padding(self) -> range:
        return self.chunk(0)

    @property
    def valid_chunks(self) -> list[range]:
        return [self.chunk(k) for k in range(1, self.num_chunks + 1)]

    def chunk_ids(self) -> np.ndarray:
        """Valid-chunk index (0..num_chunks-1) per position, -1 inside the padding chunk."""
        ids = np.full(self.length, -1, dtype=np.int64)
        for k, r in enumerate(self.valid_chunks):
            ids[r.start:r.stop] = k
        return ids

    def last_index(self) -> np.ndarray:
        """Last position of each valid chunk, -1 for empty chunks."""
        return np.array([r.stop - 1 if len(r) else -1 for r in self.valid_chunks], dtype=np.int64)

    def nonempty(self) -> np.ndarray:
        return np.array([len(r) > 0 for r in self.valid_chunks], dtype=bool)


def time_chunk(times, num_chunks: int) -> ChunkPartition:
    if num_chunks < 1:
        raise ValueError("num_chunks must be >= 1")
    t = np.asarray(times, dtype=np.int64)
    length = int(t.size)
    if length < 1:
        raise ValueError("behavior sequence must be non-empty")
    n_pad = padding_length(t)

    cuts: list[int] = []
    if length - n_pad >= 2:
        gaps = np.diff(t[n_pad:])
        # stable sort on -gap keeps the earliest position first among ties
        order = np.argsort(-gaps, kind="stable")[: num_chunks - 1]
        cuts = sorted(int(n_pad + i + 1) for i in order)

    starts = [0, n_pad] if length > n_pad else [0, length]
    starts += cuts
    starts += [length] * (num_chunks + 2 - len(starts))

    means = []
    for k in range(num_chunks + 1):
        seg = t[starts[k]:starts[k + 1]]
        means.append(float(seg.mean()) if seg.size else 0.0)
    return ChunkPartition(tuple(starts), tuple(means))


def chunk_membership_mask(partition: ChunkPartition, query_index: int) -> np.ndarray:
    """Which valid chunks a query may attend in the global branch.

    Behavior queries see a chunk only once its last behavior is at or before
    the query; queries past the behavior part (candidates) see every
    non-empty chunk.
    """
    nonempty = partition.nonempty()
    if query_index >= partition.length:
        return nonempty
    return nonempty & (partition.last_index() <= query_index)


def transition_slots(partition: ChunkPartition, m: int) -> tuple[np.ndarray, np.ndarray]:
    """Fixed-size transition layout: ``m`` slots per valid chunk.

    Returns (index, valid) of length ``m * num_chunks``.  Each chunk fills its
    slots with its last ``min(m, len)`` positions in order; unused slots are
    marked invalid and point at position 0.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    index = np.zeros(m * partition.num_chunks, dtype=np.int64)
    valid = np.zeros(m * partition.num_chunks, dtype=bool)
    for k, r in enumerate(partition.valid_chunks):
        tail = list(r)[-m:]
        index[k * m:k * m + len(tail)] = tail
        valid[k * m:k * m + len(tail)] = True
    return index, valid


def transition_select(partition: ChunkPartition, m: int) -> list[int]:
    index, valid = transition_slots(partition, m)
    return [int(i) for i in index[valid]]
