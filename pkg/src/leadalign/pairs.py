"""Self-cut S-M pairs, batching, and the zero-mask input adaptation."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .ecg_store import ECGRecord
from .errors import DuplicateRecord, LengthMismatch

DEFAULT_CUT_LEAD = "I"


@dataclass(frozen=True)
class SMPair:
    record_id: str
    single_view: np.ndarray  # [1 x t]
    multi_view: np.ndarray   # [c x t]


@dataclass(frozen=True)
class PairBatch:
    pairs: tuple[SMPair, ...]

    @property
    def size(self) -> int:
        return len(self.pairs)

    @property
    def record_ids(self) -> list[str]:
        return [p.record_id for p in self.pairs]

    def single_array(self) -> np.ndarray:
        """Stacked single-lead views, ``[B x 1 x t]``."""
        return np.stack([p.single_view for p in self.pairs])

    def multi_array(self) -> np.ndarray:
        """Stacked multi-lead views, ``[B x c x t]``."""
        return np.stack([p.multi_view for p in self.pairs])


def self_cut(record: ECGRecord, cut_lead: str = DEFAULT_CUT_LEAD) -> SMPair:
    """Pair one lead of ``record`` with the full record.

    The single view is the raw row, with no augmentation of any kind.
    """
    row = record.lead_index(cut_lead)
    return SMPair(record_id=record.id,
                  single_view=record.samples[row:row + 1],
                  multi_view=record.samples)


def zero_mask(record: ECGRecord, keep_lead: str = DEFAULT_CUT_LEAD) -> ECGRecord:
    row = record.lead_index(keep_lead)
    masked = np.zeros_like(record.samples)
    masked[row] = record.samples[row]
    return record.replace(samples=masked)


def collate(records: Sequence[ECGRecord], cut_lead: str = DEFAULT_CUT_LEAD) -> PairBatch:
    if not records:
        raise ValueError("cannot collate an empty list of records")
    seen = set()
    for r in records:
        if r.id in seen:
            raise DuplicateRecord(f"record id {r.id!r} appears twice in one batch")
        seen.add(r.id)
    lengths = {r.num_samples for r in records}
    if len(lengths) > 1:
        raise LengthMismatch(f"records in a batch have different lengths: {sorted(lengths)}")
    return PairBatch(tuple(self_cut(r, cut_lead) for r in records))


def batch_indices(n: int, batch_size: int, rng: np.random.Generator | None = None,
                  drop_last: bool = True) -> Iterator[np.ndarray]:
    """Yield index batches over ``range(n)``, shuffled when ``rng`` is given."""
    order = rng.permutation(n) if rng is not None else np.arange(n)
    stop = n - n % batch_size if drop_last else n
    for start in range(0, stop, batch_size):
        yield order[start:start + batch_size]


def single_lead_array(records: Sequence[ECGRecord], cut_lead: str = DEFAULT_CUT_LEAD,
                      dtype=np.float32) -> np.ndarray:
    """Self-cut views of many records, ``[N x 1 x t]``."""
    return np.stack([self_cut(r, cut_lead).single_view for r in records]).astype(dtype, copy=False)


def multi_lead_array(records: Sequence[ECGRecord], dtype=np.float32) -> np.ndarray:
    return np.stack([r.samples for r in records]).astype(dtype, copy=False)
