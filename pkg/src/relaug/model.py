"""Prototype encoder: relation embeddings and class prototypes in one space.

The encoder fuses subject/object features (each concatenated with a learned
entity-class embedding) into a relation embedding r, subtracts the union
context, and projects both r and the per-class prototype vectors through a
shared 2-layer MLP.  Classification is temperature-scaled cosine similarity
between the normalized projections.

All forward/backward passes are plain float64 numpy, batched over instances.
Gradients are closed-form over this fixed graph; the finite-difference tests
in tests/test_losses.py are the correctness contract.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .core import RelationInstance
from .errors import CheckpointError

CKPT_MAGIC = b"RACKPT1"


@dataclass(frozen=True)
class ModelConfig:
    n_entities: int
    n_p: int
    feat_dim: int = 64
    entity_dim: int = 32
    rel_dim: int = 64  # relation embedding width d
    word_dim: int = 32  # predicate word-embedding width d'
    hidden_dim: int = 64  # shared projection MLP hidden width
    fusion: str = "gated"  # "gated" (relu(x+y) - (x-y)^2) or "concat"
    gamma_init: float = 0.1
    feat_aug_mlp: bool = False

    def __post_init__(self):
        if self.fusion not in ("gated", "concat"):
            raise ValueError(f"unknown fusion {self.fusion!r}")

    def core_hash(self) -> str:
        """Hash of the architecture, ignoring optional strategy add-ons."""
        d = asdict(self)
        d.pop("feat_aug_mlp")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


@dataclass
class ModelParameters:
    """Trainable tensors keyed by name, plus the architecture config."""

    cfg: ModelConfig
    tensors: dict

    @property
    def gamma(self) -> float:
        return float(np.exp(self.tensors["log_gamma"]))

    def copy(self) -> "ModelParameters":
        return ModelParameters(self.cfg, {k: v.copy() for k, v in self.tensors.items()})


def _tensor_specs(cfg: ModelConfig):
    f, we, d, dw, h = cfg.feat_dim, cfg.entity_dim, cfg.rel_dim, cfg.word_dim, cfg.hidden_dim
    specs = [
        ("ent_embed", (cfg.n_entities, we), 0.02),
        ("subj_W", (d, f + we), None),
        ("subj_b", (d,), 0.0),
        ("obj_W", (d, f + we), None),
        ("obj_b", (d,), 0.0),
        ("union_W", (d, f), None),
        ("union_b", (d,), 0.0),
        ("pred_embed", (cfg.n_p, dw), 0.02),
        ("wp", (d, dw), None),
        ("proj_W1", (h, d), None),
        ("proj_b1", (h,), 0.0),
        ("proj_W2", (d, h), None),
        ("proj_b2", (d,), 0.0),
        ("log_gamma", (), float(np.log(cfg.gamma_init))),
    ]
    if cfg.fusion == "concat":
        specs += [("fuse_W", (d, 2 * d), None), ("fuse_b", (d,), 0.0)]
    if cfg.feat_aug_mlp:
        specs += [
            ("feataug_W1", (h, cfg.n_p), None),
            ("feataug_b1", (h,), 0.0),
            ("feataug_W2", (d, h), None),
            ("feataug_b2", (d,), 0.0),
        ]
    return specs


def _init_tensor(shape, scale, rng: np.random.Generator) -> np.ndarray:
    if scale is None:  # weight matrix: scaled by fan-in
        fan_in = shape[-1]
        return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)
    if shape == ():
        return np.array(float(scale))
    if scale == 0.0:
        return np.zeros(shape)
    return rng.normal(0.0, scale, size=shape)


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> ModelParameters:
    tensors = {name: _init_tensor(shape, scale, rng) for name, shape, scale in _tensor_specs(cfg)}
    return ModelParameters(cfg, tensors)


def ensure_feat_aug_params(model: ModelParameters, rng: np.random.Generator) -> ModelParameters:
    """Add the feature-augmentation MLP tensors when warm-starting without them."""
    if model.cfg.feat_aug_mlp and "feataug_W1" in model.tensors:
        return model
    cfg = replace(model.cfg, feat_aug_mlp=True)
    tensors = dict(model.tensors)
    for name, shape, scale in _tensor_specs(cfg):
        if name not in tensors:
            tensors[name] = _init_tensor(shape, scale, rng)
    return ModelParameters(cfg, tensors)


def zero_grads(model: ModelParameters) -> dict:
    return {k: np.zeros_like(v) for k, v in model.tensors.items()}


def add_grads(acc: dict, extra: dict) -> dict:
    for k, v in extra.items():
        acc[k] = acc[k] + v if k in acc else v
    return acc


# ---------------------------------------------------------------------------
# Batched forward / backward


@dataclass
class EmbedCache:
    sf: np.ndarray
    uf: np.ndarray
    sc: np.ndarray
    oc: np.ndarray
    xs: np.ndarray
    xo: np.ndarray
    vs: np.ndarray
    vo: np.ndarray
    q: Optional[np.ndarray]  # gated fusion pre-activation
    cat: Optional[np.ndarray]  # concat fusion input
    r: np.ndarray


@dataclass
class HeadCache:
    r: np.ndarray
    a1: np.ndarray
    z1: np.ndarray
    p: np.ndarray
    pn: np.ndarray
    r_bar: np.ndarray
    proto_in: np.ndarray  # W_p t_j rows
    pa1: np.ndarray
    pz1: np.ndarray
    pc: np.ndarray
    pcn: np.ndarray
    c_bar: np.ndarray
    sims: np.ndarray
    gamma: float
    logits: np.ndarray


@dataclass(frozen=True)
class ForwardOutput:
    """Single-instance forward pass: embedding, projections, cosine logits."""

    r: np.ndarray
    r_bar: np.ndarray
    c_bar: np.ndarray
    logits: np.ndarray
    cache: tuple = field(repr=False, compare=False, default=None)


def embed_batch(model: ModelParameters, sf, of, uf, sc, oc):
    """Relation embeddings for feature matrices; returns (r, EmbedCache)."""
    t = model.tensors
    sf = np.asarray(sf, dtype=np.float64)
    of = np.asarray(of, dtype=np.float64)
    uf = np.asarray(uf, dtype=np.float64)
    sc = np.asarray(sc, dtype=np.int64)
    oc = np.asarray(oc, dtype=np.int64)
    if sf.shape[1] != model.cfg.feat_dim:
        raise ValueError(f"feature dim {sf.shape[1]} != configured {model.cfg.feat_dim}")
    if sc.max(initial=-1) >= model.cfg.n_entities or oc.max(initial=-1) >= model.cfg.n_entities:
        raise ValueError("entity class index out of range")
    xs = np.concatenate([sf, t["ent_embed"][sc]], axis=1)
    xo = np.concatenate([of, t["ent_embed"][oc]], axis=1)
    vs = xs @ t["subj_W"].T + t["subj_b"]
    vo = xo @ t["obj_W"].T + t["obj_b"]
    u = uf @ t["union_W"].T + t["union_b"]
    if model.cfg.fusion == "gated":
        q = vs + vo
        diff = vs - vo
        fused = np.maximum(q, 0.0) - diff * diff
        cat = None
    else:
        cat = np.concatenate([vs, vo], axis=1)
        fused = cat @ t["fuse_W"].T + t["fuse_b"]
        q = None
    r = fused - u
    return r, EmbedCache(sf=sf, uf=uf, sc=sc, oc=oc, xs=xs, xo=xo, vs=vs, vo=vo,
                         q=q, cat=cat, r=r)


def embed_backward(model: ModelParameters, cache: EmbedCache, d_r: np.ndarray) -> dict:
    t = model.tensors
    grads = {}
    d_u = -d_r
    grads["union_W"] = d_u.T @ cache.uf
    grads["union_b"] = d_u.sum(axis=0)
    if model.cfg.fusion == "gated":
        gate = (cache.q > 0.0).astype(np.float64)
        diff = cache.vs - cache.vo
        d_vs = d_r * gate - 2.0 * diff * d_r
        d_vo = d_r * gate + 2.0 * diff * d_r
    else:
        grads["fuse_W"] = d_r.T @ cache.cat
        grads["fuse_b"] = d_r.sum(axis=0)
        d_cat = d_r @ t["fuse_W"]
        d = model.cfg.rel_dim
        d_vs, d_vo = d_cat[:, :d], d_cat[:, d:]
    grads["subj_W"] = d_vs.T @ cache.xs
    grads["subj_b"] = d_vs.sum(axis=0)
    grads["obj_W"] = d_vo.T @ cache.xo
    grads["obj_b"] = d_vo.sum(axis=0)
    d_xs = d_vs @ t["subj_W"]
    d_xo = d_vo @ t["obj_W"]
    f = model.cfg.feat_dim
    d_ent = np.zeros_like(t["ent_embed"])
    np.add.at(d_ent, cache.sc, d_xs[:, f:])
    np.add.at(d_ent, cache.oc, d_xo[:, f:])
    grads["ent_embed"] = d_ent
    return grads


def _normalize_rows(x: np.ndarray):
    n = np.linalg.norm(x, axis=1, keepdims=True)
    return x / n, n


def head_batch(model: ModelParameters, r: np.ndarray) -> HeadCache:
    """Shared projection of relation embeddings and prototypes, cosine logits."""
    t = model.tensors
    a1 = r @ t["proj_W1"].T + t["proj_b1"]
    z1 = np.maximum(a1, 0.0)
    p = z1 @ t["proj_W2"].T + t["proj_b2"]
    r_bar, pn = _normalize_rows(p)
    proto_in = t["pred_embed"] @ t["wp"].T
    pa1 = proto_in @ t["proj_W1"].T + t["proj_b1"]
    pz1 = np.maximum(pa1, 0.0)
    pc = pz1 @ t["proj_W2"].T + t["proj_b2"]
    c_bar, pcn = _normalize_rows(pc)
    sims = r_bar @ c_bar.T
    gamma = float(np.exp(t["log_gamma"]))
    logits = sims / gamma
    return HeadCache(r=r, a1=a1, z1=z1, p=p, pn=pn, r_bar=r_bar, proto_in=proto_in,
                     pa1=pa1, pz1=pz1, pc=pc, pcn=pcn, c_bar=c_bar, sims=sims,
                     gamma=gamma, logits=logits)


def _norm_backward(d_unit: np.ndarray, unit: np.ndarray, norm: np.ndarray) -> np.ndarray:
    return (d_unit - (d_unit * unit).sum(axis=1, keepdims=True) * unit) / norm


def head_backward(model: ModelParameters, hc: HeadCache, d_logits: np.ndarray,
                  d_cbar_extra: Optional[np.ndarray] = None,
                  d_rbar_extra: Optional[np.ndarray] = None):
    """Returns (param grads, d_r) for upstream accumulation."""
    t = model.tensors
    grads = {}
    d_sims = d_logits / hc.gamma
    grads["log_gamma"] = np.array(-(d_logits * hc.logits).sum())
    d_rbar = d_sims @ hc.c_bar
    d_cbar = d_sims.T @ hc.r_bar
    if d_rbar_extra is not None:
        d_rbar = d_rbar + d_rbar_extra
    if d_cbar_extra is not None:
        d_cbar = d_cbar + d_cbar_extra
    d_p = _norm_backward(d_rbar, hc.r_bar, hc.pn)
    d_pc = _norm_backward(d_cbar, hc.c_bar, hc.pcn)
    # relation-side projection
    grads["proj_W2"] = d_p.T @ hc.z1
    grads["proj_b2"] = d_p.sum(axis=0)
    d_z1 = d_p @ t["proj_W2"]
    d_a1 = d_z1 * (hc.a1 > 0.0)
    grads["proj_W1"] = d_a1.T @ hc.r
    grads["proj_b1"] = d_a1.sum(axis=0)
    d_r = d_a1 @ t["proj_W1"]
    # prototype-side projection (shared MLP: accumulate)
    grads["proj_W2"] = grads["proj_W2"] + d_pc.T @ hc.pz1
    grads["proj_b2"] = grads["proj_b2"] + d_pc.sum(axis=0)
    d_pz1 = d_pc @ t["proj_W2"]
    d_pa1 = d_pz1 * (hc.pa1 > 0.0)
    grads["proj_W1"] = grads["proj_W1"] + d_pa1.T @ hc.proto_in
    grads["proj_b1"] = grads["proj_b1"] + d_pa1.sum(axis=0)
    d_proto_in = d_pa1 @ t["proj_W1"]
    grads["wp"] = d_proto_in.T @ t["pred_embed"]
    grads["pred_embed"] = d_proto_in @ t["wp"]
    return grads, d_r


def _stack_features(data: Sequence[RelationInstance]):
    sf = np.stack([i.subj_feat for i in data])
    of = np.stack([i.obj_feat for i in data])
    uf = np.stack([i.union_feat for i in data])
    sc = np.asarray([i.subj_class for i in data], dtype=np.int64)
    oc = np.asarray([i.obj_class for i in data], dtype=np.int64)
    return sf, of, uf, sc, oc


def forward(model: ModelParameters, inst: RelationInstance) -> ForwardOutput:
    """Deterministic single-instance forward pass."""
    r, ec = embed_batch(model, *_stack_features([inst]))
    hc = head_batch(model, r)
    return ForwardOutput(r=r[0], r_bar=hc.r_bar[0], c_bar=hc.c_bar,
                         logits=hc.logits[0], cache=(ec, hc))


def predict(out: ForwardOutput) -> int:
    """Highest cosine-similarity class; ties resolve to the lowest index."""
    return int(np.argmax(out.logits))


def batch_embed(model: ModelParameters, data: Sequence[RelationInstance], chunk: int = 1024):
    """(id, relation embedding) for every instance, preserving order."""
    results = []
    for start in range(0, len(data), chunk):
        part = data[start:start + chunk]
        r, _ = embed_batch(model, *_stack_features(part))
        results.extend((inst.id, r[i].copy()) for i, inst in enumerate(part))
    return results


# ---------------------------------------------------------------------------
# Checkpoints: deterministic binary container with named float64 tensors


def save_checkpoint(model: ModelParameters, path, vocab_hash: str, meta: Optional[dict] = None) -> None:
    names = sorted(model.tensors)
    header = {
        "version": 1,
        "vocab_hash": vocab_hash,
        "config": asdict(model.cfg),
        "config_hash": model.cfg.core_hash(),
        "tensors": [{"name": n, "shape": list(np.shape(model.tensors[n]))} for n in names],
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(model.tensors[n], dtype="<f8").tobytes())


def load_checkpoint(path, expect_vocab_hash: Optional[str] = None):
    """Returns (ModelParameters, header dict); rejects a vocabulary mismatch."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    off = len(CKPT_MAGIC)
    (hlen,) = struct.unpack_from("<I", blob, off)
    off += 4
    try:
        header = json.loads(blob[off:off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    off += hlen
    if expect_vocab_hash is not None and header["vocab_hash"] != expect_vocab_hash:
        raise CheckpointError(
            f"{path}: vocabulary hash {header['vocab_hash'][:12]} does not match "
            f"expected {expect_vocab_hash[:12]}"
        )
    cfg = ModelConfig(**header["config"])
    tensors = {}
    for spec in header["tensors"]:
        shape = tuple(spec["shape"])
        n_items = int(np.prod(shape)) if shape else 1
        raw = blob[off:off + 8 * n_items]
        if len(raw) != 8 * n_items:
            raise CheckpointError(f"{path}: truncated tensor data for {spec['name']}")
        arr = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
        tensors[spec["name"]] = arr
        off += 8 * n_items
    return ModelParameters(cfg, tensors), header


def checkpoint_file_hash(path) -> bytes:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).digest()
