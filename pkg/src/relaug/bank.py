"""Frozen memory bank of (relation embedding, one-hot predicate) pairs.

Built once from a pretrained encoder, capped per unique (subject, predicate,
object) triplet, then queried by exact top-k cosine similarity with the
global top-1 dropped so a query never trivially retrieves itself.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernels
from .core import RelationInstance, TripletKey
from .errors import BankError

log = logging.getLogger(__name__)

MAGIC = b"RABANK1"
_HEADER = struct.Struct("<7sIQI32s")  # magic, dim u32, count u64, cap u32, model hash


@dataclass(frozen=True, eq=False)
class BankEntry:
    key: np.ndarray  # float32, length dim
    value: int  # predicate index
    triplet: TripletKey
    source_id: int

    def __eq__(self, other):
        if not isinstance(other, BankEntry):
            return NotImplemented
        return ((self.value, self.triplet, self.source_id)
                == (other.value, other.triplet, other.source_id)
                and np.array_equal(self.key, other.key))

    def __post_init__(self):
        key = np.ascontiguousarray(self.key, dtype=np.float32)
        key.setflags(write=False)
        object.__setattr__(self, "key", key)
        if not np.all(np.isfinite(key)) or not np.any(key):
            raise ValueError("bank key must be finite and nonzero")


class MemoryBank:
    """Immutable store of bank entries with a precomputed key matrix."""

    def __init__(self, entries: Sequence[BankEntry], dim: int, cap: int,
                 model_hash: bytes = b"\x00" * 32):
        if len(model_hash) != 32:
            raise ValueError("model_hash must be 32 bytes")
        self.entries = tuple(entries)
        self.dim = int(dim)
        self.cap = int(cap)
        self.model_hash = bytes(model_hash)
        for e in self.entries:
            if e.key.shape[0] != self.dim:
                raise ValueError(f"entry from instance {e.source_id} has wrong key dim")
        if self.entries:
            keys = np.stack([e.key for e in self.entries]).astype(np.float64)
            self._unit_keys = kernels.unit_rows(keys)
            self.values = np.asarray([e.value for e in self.entries], dtype=np.int64)
        else:
            self._unit_keys = np.zeros((0, self.dim), dtype=np.float64)
            self.values = np.zeros(0, dtype=np.int64)
        self._unit_keys_t = np.ascontiguousarray(self._unit_keys.T)

    @property
    def count(self) -> int:
        return len(self.entries)

    def __len__(self) -> int:
        return len(self.entries)


def build_bank(model, data: Sequence[RelationInstance], cap: int,
               model_hash: bytes = b"\x00" * 32) -> MemoryBank:
    """Scan instances in order, keeping the first `cap` per unique triplet.

    Keys are the pretrained model's relation embeddings (pre-projection),
    stored as float32.  Background instances are skipped with a counted
    warning.
    """
    from .model import batch_embed  # deferred: model imports core only

    if cap < 1:
        raise ValueError("cap must be >= 1")
    labeled = []
    skipped = 0
    per_triplet: dict = {}
    for inst in data:
        trip = inst.triplet()
        if trip is None:
            skipped += 1
            continue
        if per_triplet.get(trip, 0) >= cap:
            continue
        per_triplet[trip] = per_triplet.get(trip, 0) + 1
        labeled.append(inst)
    if skipped:
        log.warning("build_bank: skipped %d background instances", skipped)
    embeddings = batch_embed(model, labeled)
    entries = [
        BankEntry(key=r.astype(np.float32), value=inst.predicate,
                  triplet=inst.triplet(), source_id=inst.id)
        for (_, r), inst in zip(embeddings, labeled)
    ]
    dim = entries[0].key.shape[0] if entries else model.cfg.proto_dim
    return MemoryBank(entries, dim=dim, cap=cap, model_hash=model_hash)


def query_batch(bank: MemoryBank, queries: np.ndarray, k: int):
    """Self-excluded top-k for a batch of raw query embeddings.

    Retrieves k+1 exact nearest by cosine, drops the global top-1 of each
    query, returns (idx, scores) of shape (B, min(k, count - 1)).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    queries = np.asarray(queries, dtype=np.float64)
    if queries.ndim != 2 or queries.shape[1] != bank.dim:
        raise ValueError(f"query dim {queries.shape} does not match bank dim {bank.dim}")
    if bank.count <= 1:
        b = queries.shape[0]
        return np.zeros((b, 0), dtype=np.int64), np.zeros((b, 0))
    unit_q = kernels.unit_rows(queries)
    idx, scores = kernels.cosine_topk(bank._unit_keys, unit_q, k + 1,
                                      unit_keys_t=bank._unit_keys_t)
    return idx[:, 1:], scores[:, 1:]


def query(bank: MemoryBank, q: np.ndarray, k: int):
    """Single-query wrapper: list of (BankEntry, cosine score)."""
    idx, scores = query_batch(bank, np.asarray(q, dtype=np.float64)[None, :], k)
    return [(bank.entries[i], float(s)) for i, s in zip(idx[0], scores[0])]


def save_bank(bank: MemoryBank, path) -> None:
    record = struct.Struct(f"<{bank.dim}fH3HQ")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, bank.dim, bank.count, bank.cap, bank.model_hash))
        for e in bank.entries:
            fh.write(record.pack(*e.key.tolist(), e.value,
                                 e.triplet.subj_class, e.triplet.predicate,
                                 e.triplet.obj_class, e.source_id))


def load_bank(path) -> MemoryBank:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise BankError(f"{path}: truncated header")
    magic, dim, count, cap, model_hash = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise BankError(f"{path}: bad magic {magic!r}")
    record = struct.Struct(f"<{dim}fH3HQ")
    expected = _HEADER.size + count * record.size
    if len(blob) != expected:
        raise BankError(f"{path}: expected {expected} bytes, found {len(blob)}")
    entries = []
    off = _HEADER.size
    for _ in range(count):
        fields = record.unpack_from(blob, off)
        off += record.size
        key = np.asarray(fields[:dim], dtype=np.float32)
        value, sc, pc, oc, source_id = fields[dim:]
        entries.append(BankEntry(key=key, value=value,
                                 triplet=TripletKey(sc, pc, oc), source_id=source_id))
    return MemoryBank(entries, dim=dim, cap=cap, model_hash=model_hash)
