"""Seeded generator of a long-tailed relation benchmark with a latent oracle.

Predicates come in semantic clusters: one popular general predicate plus a
few fine-grained ones.  Every instance's latent label set contains its
cluster's general predicate and, with probability multi_prob, one or more
fine predicates.  The single observed annotation is drawn from the latent
set proportionally to a global Zipf popularity, so head classes soak up
annotations that latently co-reference tail classes - the bias the training
engine is meant to undo.  Features are cluster centroids plus per-fine
offsets plus Gaussian noise, giving retrieval a recoverable signal.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import LabelDistribution, PredicateVocabulary, RelationInstance, Vocabulary
from .rng import stream


@dataclass(frozen=True)
class GeneratorConfig:
    n_clusters: int = 6
    fine_per_cluster: int = 3
    zipf_s: float = 1.5
    n_scenes: int = 800
    relations_per_scene: int = 12
    noise_std: float = 0.15
    multi_prob: float = 0.5
    seed: int = 0
    feat_dim: int = 64
    pairs_per_cluster: int = 6
    offset_scale: float = 1.5  # fine-offset norm; must clear the noise floor
    extra_fine_prob: float = 0.1  # chance each additional fine joins a multi set
    distractor_prob: float = 0.0  # optional: foreign fine offset bleeding into features

    def __post_init__(self):
        if self.n_clusters < 1 or self.fine_per_cluster < 1:
            raise ValueError("need at least one cluster and one fine predicate")
        if self.zipf_s < 0 or not 0.0 <= self.multi_prob <= 1.0:
            raise ValueError("invalid skew or multi-label probability")
        if not 0.0 <= self.distractor_prob <= 1.0 or not 0.0 <= self.extra_fine_prob <= 1.0:
            raise ValueError("probabilities must lie in [0, 1]")

    @property
    def n_p(self) -> int:
        return self.n_clusters * (self.fine_per_cluster + 1)

    @property
    def n_entities(self) -> int:
        return 3 * self.n_clusters

    def general_predicate(self, cluster: int) -> int:
        return cluster

    def fine_predicate(self, cluster: int, j: int) -> int:
        return self.n_clusters + cluster * self.fine_per_cluster + j


def _popularity(cfg: GeneratorConfig) -> np.ndarray:
    ranks = np.arange(1, cfg.n_p + 1, dtype=np.float64)
    return 1.0 / ranks**cfg.zipf_s


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _centroids(cfg: GeneratorConfig, rng: np.random.Generator) -> np.ndarray:
    """Cluster centroids pairwise separated by at least 4 * noise_std."""
    min_sep = 4.0 * cfg.noise_std
    for _ in range(100):
        c = np.stack([2.0 * _unit(rng.normal(size=cfg.feat_dim)) for _ in range(cfg.n_clusters)])
        d = np.linalg.norm(c[:, None, :] - c[None, :, :], axis=2)
        np.fill_diagonal(d, np.inf)
        if d.min() >= min_sep:
            return c
    raise RuntimeError("could not place separated cluster centroids")


def _vocab(cfg: GeneratorConfig) -> Vocabulary:
    names = [f"general_{c}" for c in range(cfg.n_clusters)]
    for c in range(cfg.n_clusters):
        names += [f"fine_{c}_{j}" for j in range(cfg.fine_per_cluster)]
    entities = tuple(f"entity_{i}" for i in range(cfg.n_entities))
    return Vocabulary(PredicateVocabulary(tuple(names)), entities)


def generate(cfg: GeneratorConfig):
    """Returns (Vocabulary, instances with latent sets filled).

    Deterministic in cfg.seed; every observed label is a member of its latent
    set by construction.
    """
    rng = stream(cfg.seed, "synth")
    vocab = _vocab(cfg)
    pop = _popularity(cfg)
    centroids = _centroids(cfg, rng)
    offsets = rng.normal(size=(cfg.n_clusters, cfg.fine_per_cluster, cfg.feat_dim))
    offsets = cfg.offset_scale * offsets / np.linalg.norm(offsets, axis=2, keepdims=True)
    ent_vecs = rng.normal(size=(cfg.n_entities, cfg.feat_dim))
    ent_vecs = ent_vecs / np.linalg.norm(ent_vecs, axis=1, keepdims=True)
    # per-cluster pool of (subject, object) entity pairs so unique triplets repeat
    pairs = []
    for c in range(cfg.n_clusters):
        ents = [3 * c, 3 * c + 1, 3 * c + 2]
        grid = [(s, o) for s in ents for o in ents if s != o]
        picks = rng.choice(len(grid), size=min(cfg.pairs_per_cluster, len(grid)), replace=False)
        pairs.append([grid[i] for i in picks])

    n_total = cfg.n_scenes * cfg.relations_per_scene
    instances = []
    for i in range(n_total):
        cluster = int(rng.integers(cfg.n_clusters))
        latent = {cfg.general_predicate(cluster)}
        if rng.random() < cfg.multi_prob:
            n_extra = 1 + int(rng.binomial(cfg.fine_per_cluster - 1, cfg.extra_fine_prob))
            fines = rng.choice(cfg.fine_per_cluster, size=n_extra, replace=False)
            latent.update(cfg.fine_predicate(cluster, int(j)) for j in fines)
        latent_list = sorted(latent)
        weights = pop[latent_list] / pop[latent_list].sum()
        observed = int(latent_list[rng.choice(len(latent_list), p=weights)])
        subj, obj = pairs[cluster][int(rng.integers(len(pairs[cluster])))]
        signal = centroids[cluster].copy()
        for p in latent_list:
            if p >= cfg.n_clusters:
                c, j = divmod(p - cfg.n_clusters, cfg.fine_per_cluster)
                signal = signal + offsets[c, j]
        if rng.random() < cfg.distractor_prob:
            # visually ambiguous pair: a fine offset of the same cluster bleeds
            # into the features without entering the latent set
            distract = int(rng.integers(cfg.fine_per_cluster))
            signal = signal + 0.5 * offsets[cluster, distract]
        noise = rng.normal(0.0, cfg.noise_std, size=(3, cfg.feat_dim))
        instances.append(RelationInstance(
            id=i,
            scene_id=i // cfg.relations_per_scene,
            subj_class=subj,
            obj_class=obj,
            subj_feat=ent_vecs[subj] + 0.5 * centroids[cluster] + noise[0],
            obj_feat=ent_vecs[obj] + 0.5 * centroids[cluster] + noise[1],
            union_feat=signal + noise[2],
            observed=LabelDistribution.one_hot(observed, cfg.n_p),
            latent=frozenset(latent),
        ))
    return vocab, instances


def observation_oracle(cfg: GeneratorConfig, instances: Sequence[RelationInstance]) -> dict:
    """Exact per-class observation statistics implied by the latent sets.

    propensity[c] is the exact probability that class c, when latently
    present, ends up as the single observed annotation - the quantity the
    engine later estimates from observed frequencies.
    """
    pop = _popularity(cfg)
    expected = np.zeros(cfg.n_p)
    latent_count = np.zeros(cfg.n_p)
    for inst in instances:
        latent_list = sorted(inst.latent)
        weights = pop[latent_list] / pop[latent_list].sum()
        for p, w in zip(latent_list, weights):
            expected[p] += w
            latent_count[p] += 1
    with np.errstate(invalid="ignore", divide="ignore"):
        propensity = np.where(latent_count > 0, expected / np.maximum(latent_count, 1), 0.0)
    return {
        "expected_observed_frequency": (expected / len(instances)).tolist(),
        "latent_count": latent_count.astype(int).tolist(),
        "propensity": propensity.tolist(),
    }


@dataclass(frozen=True)
class BiasReport:
    latent_marginal: np.ndarray
    observed_frequency: np.ndarray
    total_variation: float


def observation_bias_report(data: Sequence[RelationInstance]) -> BiasReport:
    """Planted gap between the latent label marginal and observed frequencies."""
    if not data:
        raise ValueError("empty dataset")
    if any(inst.latent is None for inst in data):
        raise ValueError("bias report requires latent sets")
    n_p = data[0].observed.weights.shape[0]
    latent = np.zeros(n_p)
    observed = np.zeros(n_p)
    for inst in data:
        for p in inst.latent:
            latent[p] += 1
        p = inst.predicate
        if p is not None:
            observed[p] += 1
    latent /= latent.sum()
    observed /= observed.sum()
    tv = 0.5 * float(np.abs(latent - observed).sum())
    return BiasReport(latent_marginal=latent, observed_frequency=observed, total_variation=tv)


def split_by_scene(instances: Sequence[RelationInstance], train_frac: float = 0.8):
    """Deterministic train/test split on scene boundaries."""
    scenes = sorted({inst.scene_id for inst in instances})
    cut = set(scenes[: int(round(train_frac * len(scenes)))])
    train = [i for i in instances if i.scene_id in cut]
    test = [i for i in instances if i.scene_id not in cut]
    return train, test
