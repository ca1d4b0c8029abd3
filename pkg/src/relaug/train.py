"""Pipeline stages: data generation, pretraining, bank build, retrieval-
augmented training, evaluation, ablations, embedding export.

Every stage is deterministic in (config, seed): shuffling, initialization and
per-instance sampling all flow from named substreams, so rerunning a stage
reproduces its artifacts byte for byte.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import bank as bank_mod
from . import metrics as metrics_mod
from .augment import AugmentConfig, augment_instances, feat_aug_mlp, feat_aug_mlp_backward
from .config import RunConfig
from .core import compute_propensity, load_dataset, load_vocab, save_dataset, save_vocab, vocab_hash
from .errors import ConfigError, NonFiniteLossError
from .losses import batch_ips_value, batch_reg_terms, batch_target_ce
from .model import (
    ModelParameters,
    add_grads,
    checkpoint_file_hash,
    embed_backward,
    embed_batch,
    ensure_feat_aug_params,
    head_backward,
    head_batch,
    init_params,
    load_checkpoint,
    save_checkpoint,
    zero_grads,
    _stack_features,
)
from .rng import Substreams, stream
from .synth import generate, observation_oracle, split_by_scene

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Optimizer


def sgd_step(model: ModelParameters, grads: dict, velocity: dict, lr: float, momentum: float):
    for k in model.tensors:
        velocity[k] = momentum * velocity[k] + grads[k]
        model.tensors[k] = model.tensors[k] - lr * velocity[k]


# ---------------------------------------------------------------------------
# One training step


def _targets_from_predicates(batch, n_p: int, gt=None):
    if gt is None:
        gt = np.asarray([-1 if inst.predicate is None else inst.predicate for inst in batch],
                        dtype=np.int64)
    y = np.zeros((len(batch), n_p))
    active = gt >= 0
    rows = np.flatnonzero(active)
    y[rows, gt[rows]] = 1.0
    return y, active


def _vanilla_step(model, batch, rcfg: RunConfig, gt=None, prop=None):
    """Forward + closed-form backward with pure observed labels."""
    r, ec = embed_batch(model, *_stack_features(batch))
    hc = head_batch(model, r)
    y, active = _targets_from_predicates(batch, model.cfg.n_p, gt)
    ce, d_logits = batch_target_ce(hc.logits, y, active)
    r1, r2, d_cbar = batch_reg_terms(hc.c_bar, rcfg.loss)
    value = ce + rcfg.loss.reg1_weight * r1 + rcfg.loss.reg2_weight * r2
    grads = zero_grads(model)
    head_grads, d_r = head_backward(model, hc, d_logits, d_cbar_extra=d_cbar)
    add_grads(grads, head_grads)
    add_grads(grads, embed_backward(model, ec, d_r))
    stats = {"selected": 0, "labeled": int(active.sum()), "aug": [], "mixup_fallbacks": 0}
    if rcfg.loss.ips_enabled and prop is not None and gt is not None:
        stats["ips"] = batch_ips_value(hc.logits, gt, active, prop.inverse)
    return value, grads, stats


def _augmented_step(model, batch, the_bank, prop, rcfg: RunConfig, subs: Substreams,
                    epoch: int, select_all: bool, use_inverse: bool,
                    gt=None, ids=None):
    acfg: AugmentConfig = rcfg.aug
    ba = augment_instances(model, batch, the_bank, prop, acfg, subs, epoch,
                           select_all=select_all, use_inverse=use_inverse,
                           gt=gt, ids=ids)
    n_p = model.cfg.n_p
    b = len(batch)
    if acfg.strategy == "feat_aug":
        # feature enhancement keeps the pure observed labels
        y = np.zeros((b, n_p))
        labeled = ba.gt >= 0
        y[labeled, ba.gt[labeled]] = 1.0
        active = labeled
    else:
        y = ba.targets
        active = ba.active

    r_used = ba.r
    fa_cache = None
    row_scale = None
    mixup_fallbacks = 0
    if acfg.strategy == "feat_aug" and ba.retrieved_idx.shape[1] > 0:
        k_eff = ba.retrieved_idx.shape[1]
        mean_onehot = np.zeros((b, n_p))
        np.add.at(mean_onehot, (np.repeat(np.arange(b), k_eff),
                                the_bank.values[ba.retrieved_idx].ravel()), 1.0 / k_eff)
        delta, fa_cache = feat_aug_mlp(model, mean_onehot)
        r_used = ba.r + delta
    elif acfg.strategy == "mixup" and ba.retrieved_idx.shape[1] > 0:
        row_scale = np.ones(b)
        r_used = ba.r.copy()
        for i in np.flatnonzero(ba.is_multi):
            key = None
            for j in ba.retrieved_idx[i]:
                if the_bank.values[j] == ba.aug[i]:
                    key = the_bank.entries[j].key.astype(np.float64)
                    break
            if key is None:  # no retrieved entry of the sampled class: label-aug fallback
                mixup_fallbacks += 1
                continue
            r_used[i] = ba.lam[i] * ba.r[i] + (1.0 - ba.lam[i]) * key
            row_scale[i] = ba.lam[i]

    hc = head_batch(model, r_used)
    ce, d_logits = batch_target_ce(hc.logits, y, active)
    r1, r2, d_cbar = batch_reg_terms(hc.c_bar, rcfg.loss)
    value = ce + rcfg.loss.reg1_weight * r1 + rcfg.loss.reg2_weight * r2
    grads = zero_grads(model)
    head_grads, d_r = head_backward(model, hc, d_logits, d_cbar_extra=d_cbar)
    add_grads(grads, head_grads)
    if fa_cache is not None:
        add_grads(grads, feat_aug_mlp_backward(model, fa_cache, d_r))
    if row_scale is not None:
        d_r = d_r * row_scale[:, None]
    add_grads(grads, embed_backward(model, ba.embed_cache, d_r))
    stats = {"selected": ba.n_selected, "labeled": int(active.sum()),
             "aug": ba.aug[ba.is_multi], "mixup_fallbacks": mixup_fallbacks}
    if rcfg.loss.ips_enabled:
        stats["ips"] = batch_ips_value(hc.logits, ba.gt, active, prop.inverse)
    return value, grads, stats


def _dump_batch(rcfg: RunConfig, stage: str, epoch: int, batch, value: float) -> Path:
    rcfg.out.mkdir(parents=True, exist_ok=True)
    path = rcfg.out / f"diagnostic_{stage}_batch.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({
            "stage": stage,
            "epoch": epoch,
            "loss": repr(value),
            "instance_ids": [inst.id for inst in batch],
        }, fh, indent=2)
    return path


def train_loop(model: ModelParameters, data, prop, rcfg: RunConfig, *, stage: str,
               epochs: int, the_bank=None, select_all: bool = False,
               use_inverse: bool = True) -> list:
    """Run SGD for `epochs` over `data`, mutating `model`; returns epoch records.

    With aug.strategy == "none" (or no bank) every batch is a vanilla step,
    which is exactly the pretraining computation.
    """
    subs = Substreams(rcfg.seed)
    velocity = {k: np.zeros_like(v) for k, v in model.tensors.items()}
    vanilla = rcfg.aug.strategy == "none" or the_bank is None
    n = len(data)
    bs = rcfg.train.batch_size
    gt_all = np.asarray([-1 if inst.predicate is None else inst.predicate for inst in data],
                        dtype=np.int64)
    ids_all = np.asarray([inst.id for inst in data], dtype=np.int64)
    records = []
    for epoch in range(epochs):
        t0 = time.perf_counter()
        order = subs.stream("data", epoch).permutation(n)
        total_loss = 0.0
        total_ips = 0.0
        n_batches = 0
        n_selected = 0
        n_labeled = 0
        n_fallbacks = 0
        aug_hist = np.zeros(model.cfg.n_p, dtype=np.int64)
        for start in range(0, n, bs):
            sel = order[start:start + bs]
            batch = [data[i] for i in sel]
            if vanilla:
                value, grads, stats = _vanilla_step(model, batch, rcfg, gt=gt_all[sel],
                                                    prop=prop)
            else:
                value, grads, stats = _augmented_step(
                    model, batch, the_bank, prop, rcfg, subs, epoch,
                    select_all, use_inverse, gt=gt_all[sel], ids=ids_all[sel])
            if not np.isfinite(value):
                path = _dump_batch(rcfg, stage, epoch, batch, value)
                raise NonFiniteLossError(
                    f"{stage}: non-finite loss at epoch {epoch}; batch dumped to {path}",
                    dump_path=path)
            sgd_step(model, grads, velocity, rcfg.train.lr, rcfg.train.momentum)
            total_loss += value
            total_ips += stats.get("ips", 0.0)
            n_batches += 1
            n_selected += stats["selected"]
            n_labeled += stats["labeled"]
            n_fallbacks += stats["mixup_fallbacks"]
            if len(stats["aug"]):
                aug_hist += np.bincount(stats["aug"], minlength=model.cfg.n_p)
        elapsed = time.perf_counter() - t0
        record = {
            "epoch": epoch,
            "loss": total_loss / max(n_batches, 1),
            "selection_rate": n_selected / max(n_labeled, 1),
            "sec_per_100_batches": 100.0 * elapsed / max(n_batches, 1),
            "aug_hist": aug_hist.tolist(),
        }
        if rcfg.aug.strategy == "mixup":
            record["mixup_fallbacks"] = n_fallbacks
        if rcfg.loss.ips_enabled:
            record["ips_diagnostic"] = total_ips / max(n_batches, 1)
        records.append(record)
    return records


def _write_log(path: Path, records: Sequence[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


# ---------------------------------------------------------------------------
# Stage orchestration


def _check_manifest(rcfg: RunConfig, allow_mismatch: bool) -> None:
    """Refuse to mix artifacts produced under a different configuration."""
    path = rcfg.out / "manifest.json"
    run_hash = rcfg.hash()
    if path.exists():
        recorded = json.loads(path.read_text())["run_hash"]
        if recorded != run_hash:
            if not allow_mismatch:
                raise ConfigError(
                    f"{rcfg.out}: existing artifacts were produced with config "
                    f"{recorded[:12]}, current is {run_hash[:12]} "
                    f"(pass allow_mismatch/--allow-mismatch to override)")
            log.warning("config hash mismatch in %s (override active)", rcfg.out)
            return
    rcfg.out.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"run_hash": run_hash}, indent=2) + "\n")


def gen_data(rcfg: RunConfig, allow_mismatch: bool = False):
    """Generate the synthetic benchmark and write train/eval/vocab/oracle files."""
    _check_manifest(rcfg, allow_mismatch)
    gcfg = replace(rcfg.gen, seed=rcfg.seed, feat_dim=rcfg.model.feat_dim)
    vocab, instances = generate(gcfg)
    train, test = split_by_scene(instances, rcfg.train.train_frac)
    rcfg.out.mkdir(parents=True, exist_ok=True)
    save_dataset(train, rcfg.dataset_path)
    save_dataset(test, rcfg.eval_dataset_path)
    save_vocab(vocab, rcfg.vocab_path)
    with open(rcfg.oracle_path, "w", encoding="utf-8") as fh:
        json.dump(observation_oracle(gcfg, instances), fh)
        fh.write("\n")
    return rcfg.dataset_path


def _load_inputs(rcfg: RunConfig):
    vocab = load_vocab(rcfg.vocab_path)
    data = load_dataset(rcfg.dataset_path, vocab.predicates)
    prop = compute_propensity(data, vocab.predicates.n_p)
    return vocab, data, prop


def pretrain(rcfg: RunConfig, allow_mismatch: bool = False) -> Path:
    """Vanilla prototype training from seeded initialization."""
    _check_manifest(rcfg, allow_mismatch)
    vocab, data, prop = _load_inputs(rcfg)
    mcfg = rcfg.model.bind(vocab.n_entities, vocab.predicates.n_p)
    model = init_params(mcfg, stream(rcfg.seed, "init"))
    vanilla_cfg = replace(rcfg, aug=replace(rcfg.aug, strategy="none"))
    records = train_loop(model, data, prop, vanilla_cfg, stage="pretrain",
                         epochs=rcfg.train.pretrain_epochs)
    save_checkpoint(model, rcfg.pretrain_ckpt_path, vocab_hash(vocab),
                    meta={"stage": "pretrain", "run_hash": rcfg.hash(), "seed": rcfg.seed})
    _write_log(rcfg.out / "pretrain_log.jsonl", records)
    return rcfg.pretrain_ckpt_path


def build_bank_stage(rcfg: RunConfig, allow_mismatch: bool = False) -> Path:
    """Build and persist the frozen memory bank from the pretrained encoder."""
    _check_manifest(rcfg, allow_mismatch)
    vocab, data, _ = _load_inputs(rcfg)
    model, _ = load_checkpoint(rcfg.pretrain_ckpt_path, expect_vocab_hash=vocab_hash(vocab))
    the_bank = bank_mod.build_bank(model, data, rcfg.bank_cap,
                                   model_hash=checkpoint_file_hash(rcfg.pretrain_ckpt_path))
    bank_mod.save_bank(the_bank, rcfg.bank_path)
    return rcfg.bank_path


def train_ra(rcfg: RunConfig, variant: str = "full", tag: str = "ra",
             allow_mismatch: bool = False) -> Path:
    """Retrieval-augmented training, warm-started from the pretrained checkpoint.

    variant: "full", "no_select" (every instance treated as multi-labeled) or
    "no_ipss" (constant propensity scores in the sampling weights).
    """
    if variant not in ("full", "no_select", "no_ipss"):
        raise ConfigError(f"unknown ablation variant {variant!r}")
    _check_manifest(rcfg, allow_mismatch)
    vocab, data, prop = _load_inputs(rcfg)
    if not rcfg.bank_path.exists():
        raise ConfigError(f"memory bank missing at {rcfg.bank_path}; run build-bank first")
    the_bank = bank_mod.load_bank(rcfg.bank_path)
    if rcfg.train.cold_start:
        mcfg = rcfg.model.bind(vocab.n_entities, vocab.predicates.n_p)
        model = init_params(mcfg, stream(rcfg.seed, "init"))
    else:
        model, _ = load_checkpoint(rcfg.pretrain_ckpt_path, expect_vocab_hash=vocab_hash(vocab))
        if the_bank.model_hash != checkpoint_file_hash(rcfg.pretrain_ckpt_path):
            log.warning("bank was built from a different checkpoint than the warm start")
    if rcfg.aug.strategy == "feat_aug":
        model = ensure_feat_aug_params(model, stream(rcfg.seed, "init", "feat_aug"))
    records = train_loop(
        model, data, prop, rcfg, stage=tag, epochs=rcfg.train.ra_epochs,
        the_bank=the_bank,
        select_all=(variant == "no_select"),
        use_inverse=(variant != "no_ipss"))
    ckpt = rcfg.out / f"{tag}.ckpt"
    save_checkpoint(model, ckpt, vocab_hash(vocab),
                    meta={"stage": tag, "variant": variant, "run_hash": rcfg.hash(),
                          "seed": rcfg.seed})
    _write_log(rcfg.out / f"{tag}_log.jsonl", records)
    return ckpt


def evaluate_stage(rcfg: RunConfig, ckpt_path: Optional[Path] = None,
                   data_path: Optional[Path] = None, report_name: str = "eval",
                   allow_mismatch: bool = False) -> metrics_mod.EvalReport:
    """Evaluate a checkpoint on the held-out split; writes CSV, returns the report."""
    _check_manifest(rcfg, allow_mismatch)
    vocab = load_vocab(rcfg.vocab_path)
    ckpt_path = ckpt_path or rcfg.ra_ckpt_path
    model, _ = load_checkpoint(ckpt_path, expect_vocab_hash=vocab_hash(vocab))
    data = load_dataset(data_path or rcfg.eval_dataset_path, vocab.predicates)
    train_data = load_dataset(rcfg.dataset_path, vocab.predicates)
    frequency = compute_propensity(train_data, vocab.predicates.n_p).frequency
    report = metrics_mod.evaluate(model, data, rcfg.train.eval_ks,
                                  rcfg.train.head_frac, rcfg.train.tail_frac,
                                  frequency=frequency)
    rcfg.reports_dir.mkdir(parents=True, exist_ok=True)
    metrics_mod.write_report_csv(report, rcfg.reports_dir / f"{report_name}.csv")
    return report


ABLATION_VARIANTS = ("vanilla", "no_select", "no_ipss", "full")


def run_pipeline(rcfg: RunConfig, variant: str = "full"):
    """gen-data -> pretrain -> build-bank -> (train) -> eval for one seed."""
    gen_data(rcfg)
    pretrain(rcfg)
    if variant == "vanilla":
        return evaluate_stage(rcfg, ckpt_path=rcfg.pretrain_ckpt_path,
                              report_name="vanilla")
    build_bank_stage(rcfg)
    ckpt = train_ra(rcfg, variant=variant, tag="ra")
    return evaluate_stage(rcfg, ckpt_path=ckpt, report_name=variant)


def ablate(rcfg: RunConfig, seeds: Sequence[int]) -> Path:
    """Vanilla vs ablated vs full runs over seeds; writes a mean/std CSV."""
    results: dict = {v: {} for v in ABLATION_VARIANTS}
    for seed in seeds:
        sub = replace(rcfg, seed=int(seed), out=rcfg.out / "ablate" / f"seed{seed}")
        gen_data(sub)
        pretrain(sub)
        build_bank_stage(sub)
        reports = {"vanilla": evaluate_stage(sub, ckpt_path=sub.pretrain_ckpt_path,
                                             report_name="vanilla")}
        for variant in ("no_select", "no_ipss", "full"):
            ckpt = train_ra(sub, variant=variant, tag=f"ra_{variant}")
            reports[variant] = evaluate_stage(sub, ckpt_path=ckpt, report_name=variant)
        for variant, rep in reports.items():
            for k in rcfg.train.eval_ks:
                cell = results[variant].setdefault(k, {"R": [], "mR": [], "F": []})
                cell["R"].append(rep.r_at_k[k])
                cell["mR"].append(rep.mr_at_k[k])
                cell["F"].append(rep.f_at_k[k])
    rcfg.reports_dir.mkdir(parents=True, exist_ok=True)
    out_path = rcfg.reports_dir / "ablation.csv"
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "metric", "K", "mean", "std", "n_seeds"])
        for variant in ABLATION_VARIANTS:
            for k in rcfg.train.eval_ks:
                for metric in ("R", "mR", "F"):
                    vals = np.asarray(results[variant][k][metric])
                    writer.writerow([variant, metric, k,
                                     f"{vals.mean():.4f}", f"{vals.std():.4f}", len(vals)])
    return out_path


def export_embeddings(rcfg: RunConfig, ckpt_path: Optional[Path] = None,
                      data_path: Optional[Path] = None,
                      out_path: Optional[Path] = None) -> Path:
    """CSV of unit relation embeddings per instance plus prototype rows."""
    vocab = load_vocab(rcfg.vocab_path)
    model, _ = load_checkpoint(ckpt_path or rcfg.ra_ckpt_path,
                               expect_vocab_hash=vocab_hash(vocab))
    data = load_dataset(data_path or rcfg.dataset_path, vocab.predicates)
    r, _ = embed_batch(model, *_stack_features(data))
    hc = head_batch(model, r)
    out_path = out_path or (rcfg.reports_dir / "embeddings.csv")
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    d = hc.r_bar.shape[1]
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kind", "id", "class"] + [f"c{i}" for i in range(d)])
        for i, inst in enumerate(data):
            cls = inst.predicate if inst.predicate is not None else -1
            writer.writerow(["instance", inst.id, cls] + [f"{x:.8f}" for x in hc.r_bar[i]])
        for j in range(model.cfg.n_p):
            writer.writerow(["prototype", j, j] + [f"{x:.8f}" for x in hc.c_bar[j]])
    return Path(out_path)
