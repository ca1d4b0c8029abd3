"""Domain types shared by every other module.

Vocabularies, label vectors, relation instances, the JSONL dataset format,
class-frequency propensity statistics and head/body/tail grouping.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .errors import DatasetError

PROPENSITY_EPS = 1e-8
_SUM_TOL = 1e-9


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PredicateVocabulary:
    """Predicate class names plus optional head/body/tail boundaries.

    group_bounds = (h, t) partitions the frequency-sorted class list into
    head = sorted[:h], body = sorted[h:t], tail = sorted[t:].
    """

    names: tuple
    group_bounds: Optional[tuple] = None

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        if len(self.names) < 2:
            raise ValueError("need at least 2 predicate classes")
        if len(set(self.names)) != len(self.names) or any(not n for n in self.names):
            raise ValueError("predicate names must be unique and nonempty")
        if self.group_bounds is not None:
            h, t = self.group_bounds
            if not (0 <= h <= t <= self.n_p):
                raise ValueError(f"invalid group bounds {self.group_bounds}")
            object.__setattr__(self, "group_bounds", (int(h), int(t)))

    @property
    def n_p(self) -> int:
        return len(self.names)


@dataclass(frozen=True)
class Vocabulary:
    """Predicate and entity vocabularies of one dataset."""

    predicates: PredicateVocabulary
    entities: tuple

    def __post_init__(self):
        object.__setattr__(self, "entities", tuple(self.entities))
        if len(set(self.entities)) != len(self.entities) or any(not n for n in self.entities):
            raise ValueError("entity names must be unique and nonempty")

    @property
    def n_entities(self) -> int:
        return len(self.entities)


@dataclass(frozen=True, eq=False)
class LabelDistribution:
    """Length-n_p nonnegative vector: one-hot, mixed, or all-zero (background)."""

    weights: np.ndarray

    def __eq__(self, other):
        return isinstance(other, LabelDistribution) and np.array_equal(self.weights, other.weights)

    def __post_init__(self):
        w = _readonly(self.weights)
        object.__setattr__(self, "weights", w)
        if w.ndim != 1:
            raise ValueError("weights must be a vector")
        if not np.all(np.isfinite(w)) or np.any(w < 0) or np.any(w > 1 + _SUM_TOL):
            raise ValueError("weights must be finite and in [0, 1]")
        s = float(w.sum())
        if s != 0.0 and abs(s - 1.0) > _SUM_TOL:
            raise ValueError(f"weights must sum to 0 or 1, got {s}")

    @classmethod
    def one_hot(cls, index: int, n_p: int) -> "LabelDistribution":
        w = np.zeros(n_p)
        w[index] = 1.0
        return cls(w)

    @classmethod
    def background(cls, n_p: int) -> "LabelDistribution":
        return cls(np.zeros(n_p))

    @classmethod
    def mixed(cls, gt: int, aug: int, lam: float, n_p: int) -> "LabelDistribution":
        w = np.zeros(n_p)
        w[gt] += lam
        w[aug] += 1.0 - lam
        return cls(w)

    @property
    def is_background(self) -> bool:
        return float(self.weights.sum()) == 0.0

    @property
    def is_one_hot(self) -> bool:
        return not self.is_background and float(self.weights.max()) == 1.0

    def argmax(self) -> int:
        return int(np.argmax(self.weights))


class TripletKey(NamedTuple):
    subj_class: int
    predicate: int
    obj_class: int


@dataclass(frozen=True, eq=False)
class RelationInstance:
    """One subject-predicate-object sample with pre-extracted features."""

    id: int
    scene_id: int
    subj_class: int
    obj_class: int
    subj_feat: np.ndarray
    obj_feat: np.ndarray
    union_feat: np.ndarray
    observed: LabelDistribution
    latent: Optional[frozenset] = None

    def __eq__(self, other):
        if not isinstance(other, RelationInstance):
            return NotImplemented
        return (
            (self.id, self.scene_id, self.subj_class, self.obj_class, self.latent)
            == (other.id, other.scene_id, other.subj_class, other.obj_class, other.latent)
            and self.observed == other.observed
            and np.array_equal(self.subj_feat, other.subj_feat)
            and np.array_equal(self.obj_feat, other.obj_feat)
            and np.array_equal(self.union_feat, other.union_feat)
        )

    def __post_init__(self):
        for name in ("subj_feat", "obj_feat", "union_feat"):
            object.__setattr__(self, name, _readonly(getattr(self, name)))
        dims = {self.subj_feat.shape, self.obj_feat.shape, self.union_feat.shape}
        if len(dims) != 1 or self.subj_feat.ndim != 1:
            raise ValueError(f"instance {self.id}: feature dimensions differ")
        for name in ("subj_feat", "obj_feat", "union_feat"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"instance {self.id}: non-finite {name}")
        if self.latent is not None:
            object.__setattr__(self, "latent", frozenset(int(i) for i in self.latent))
            if self.observed.is_one_hot and self.observed.argmax() not in self.latent:
                raise ValueError(f"instance {self.id}: observed class not in latent set")
        object.__setattr__(self, "_predicate",
                           self.observed.argmax() if self.observed.is_one_hot else None)

    @property
    def feat_dim(self) -> int:
        return self.subj_feat.shape[0]

    @property
    def predicate(self) -> Optional[int]:
        """Observed predicate index, or None for a background relation."""
        return self._predicate

    def triplet(self) -> Optional[TripletKey]:
        p = self.predicate
        return None if p is None else TripletKey(self.subj_class, p, self.obj_class)


@dataclass(frozen=True)
class PropensityTable:
    """Per-class observed frequency and its eps-clamped inverse."""

    frequency: np.ndarray
    inverse: np.ndarray = field(default=None)

    def __post_init__(self):
        f = _readonly(self.frequency)
        object.__setattr__(self, "frequency", f)
        if np.any(f < 0):
            raise ValueError("frequencies must be nonnegative")
        if self.inverse is None:
            inv = 1.0 / np.maximum(f, PROPENSITY_EPS)
            object.__setattr__(self, "inverse", _readonly(inv))
        else:
            object.__setattr__(self, "inverse", _readonly(self.inverse))
        if not np.all(np.isfinite(self.inverse)):
            raise ValueError("inverse propensities must be finite")

    @classmethod
    def from_counts(cls, counts: Sequence[int]) -> "PropensityTable":
        counts = np.asarray(counts, dtype=np.float64)
        total = counts.sum()
        if total <= 0:
            raise ValueError("no labeled instances")
        return cls(counts / total)


def compute_propensity(data: Sequence[RelationInstance], n_p: int) -> PropensityTable:
    """Class frequencies among labeled instances; background ones do not count."""
    counts = np.zeros(n_p, dtype=np.float64)
    for inst in data:
        p = inst.predicate
        if p is not None:
            counts[p] += 1
    if counts.sum() == 0:
        raise ValueError("compute_propensity: zero labeled instances")
    return PropensityTable(counts / counts.sum())


def group_classes(frequency: np.ndarray, head_frac: float = 0.5, tail_frac: float = 0.1) -> tuple:
    """Head/body/tail bounds over the frequency-sorted class list.

    Head: smallest prefix covering at least head_frac of the instance mass.
    Tail: smallest suffix covering at least tail_frac.  Ties in frequency are
    broken by ascending class index; tail never overlaps head.
    """
    if not (0.0 < head_frac < 1.0 and 0.0 < tail_frac < 1.0 and head_frac + tail_frac < 1.0):
        raise ValueError("fractions must lie in (0,1) with head_frac + tail_frac < 1")
    freq = np.asarray(frequency, dtype=np.float64)
    n = freq.shape[0]
    order = sorted_by_frequency(freq)
    sorted_freq = freq[order]
    total = sorted_freq.sum()
    cum = np.cumsum(sorted_freq)
    head_end = int(np.searchsorted(cum, head_frac * total - 1e-12) + 1)
    head_end = min(head_end, n - 1) if n > 1 else 1
    suffix = np.cumsum(sorted_freq[::-1])
    tail_len = int(np.searchsorted(suffix, tail_frac * total - 1e-12) + 1)
    tail_start = max(head_end, n - tail_len)
    return head_end, tail_start


def sorted_by_frequency(frequency: np.ndarray) -> np.ndarray:
    """Class indices sorted by descending frequency, ties by ascending index."""
    freq = np.asarray(frequency, dtype=np.float64)
    return np.lexsort((np.arange(freq.shape[0]), -freq))


def class_groups(frequency: np.ndarray, head_frac: float = 0.5, tail_frac: float = 0.1) -> tuple:
    """(head, body, tail) index arrays matching group_classes bounds."""
    order = sorted_by_frequency(frequency)
    h, t = group_classes(frequency, head_frac, tail_frac)
    return order[:h], order[h:t], order[t:]


# ---------------------------------------------------------------------------
# Dataset and vocabulary files


def load_vocab(path) -> Vocabulary:
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict) or "predicates" not in raw or "entities" not in raw:
        raise DatasetError(f"{path}: vocabulary file needs 'predicates' and 'entities'")
    return Vocabulary(PredicateVocabulary(tuple(raw["predicates"])), tuple(raw["entities"]))


def save_vocab(vocab: Vocabulary, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"predicates": list(vocab.predicates.names), "entities": list(vocab.entities)}, fh)
        fh.write("\n")


def vocab_hash(vocab: Vocabulary) -> str:
    import hashlib

    blob = json.dumps(
        {"predicates": list(vocab.predicates.names), "entities": list(vocab.entities)},
        sort_keys=True,
    ).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


_RECORD_FIELDS = {
    "id", "scene_id", "subj_class", "obj_class", "predicate",
    "subj_feat", "obj_feat", "union_feat", "latent",
}


def _instance_from_record(rec: dict, n_p: int, lineno: int) -> RelationInstance:
    missing = _RECORD_FIELDS - set(rec)
    if missing:
        raise DatasetError(f"line {lineno}: missing fields {sorted(missing)}")
    pred = rec["predicate"]
    if pred is None:
        observed = LabelDistribution.background(n_p)
    else:
        if not (0 <= int(pred) < n_p):
            raise DatasetError(f"line {lineno}: predicate {pred} out of range")
        observed = LabelDistribution.one_hot(int(pred), n_p)
    latent = rec["latent"]
    if latent is not None:
        latent = frozenset(int(i) for i in latent)
        if any(not (0 <= i < n_p) for i in latent):
            raise DatasetError(f"line {lineno}: latent index out of range")
    try:
        return RelationInstance(
            id=int(rec["id"]),
            scene_id=int(rec["scene_id"]),
            subj_class=int(rec["subj_class"]),
            obj_class=int(rec["obj_class"]),
            subj_feat=np.asarray(rec["subj_feat"], dtype=np.float64),
            obj_feat=np.asarray(rec["obj_feat"], dtype=np.float64),
            union_feat=np.asarray(rec["union_feat"], dtype=np.float64),
            observed=observed,
            latent=latent,
        )
    except (ValueError, TypeError) as exc:
        raise DatasetError(f"line {lineno}: {exc}") from exc


def load_dataset(path, vocab: PredicateVocabulary) -> list:
    """Read a JSONL dataset in file order, enforcing uniform feature dims."""
    instances = []
    dim = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
            inst = _instance_from_record(rec, vocab.n_p, lineno)
            if dim is None:
                dim = inst.feat_dim
            elif inst.feat_dim != dim:
                raise DatasetError(
                    f"instance {inst.id}: feature dim {inst.feat_dim} differs from {dim}"
                )
            instances.append(inst)
    return instances


def save_dataset(instances: Sequence[RelationInstance], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            rec = {
                "id": inst.id,
                "scene_id": inst.scene_id,
                "subj_class": inst.subj_class,
                "obj_class": inst.obj_class,
                "predicate": inst.predicate,
                "subj_feat": inst.subj_feat.tolist(),
                "obj_feat": inst.obj_feat.tolist(),
                "union_feat": inst.union_feat.tolist(),
                "latent": sorted(inst.latent) if inst.latent is not None else None,
            }
            fh.write(json.dumps(rec) + "\n")
