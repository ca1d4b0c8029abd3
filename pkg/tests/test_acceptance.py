"""Acceptance suite: one test per release criterion, printed pass/fail lines.

Run with `pytest tests/test_acceptance.py -v -s` to see the summary lines.
The end-to-end criteria train real pipelines on the default synthetic
benchmark and take several minutes on one CPU.
"""

import json
import time
from dataclasses import replace

import numpy as np
import pytest

from gradcheck import numeric_grads, relative_error
from relaug import train as stages
from relaug.augment import AugmentConfig, augment_instances, inconsistency, select
from relaug.bank import BankEntry, MemoryBank, load_bank, query_batch, save_bank
from relaug.config import RunConfig
from relaug.core import (
    LabelDistribution,
    PropensityTable,
    TripletKey,
    compute_propensity,
    load_dataset,
    load_vocab,
)
from relaug.losses import (
    LossConfig,
    distance_reg,
    final_loss,
    ips_loss,
    multi_proto_loss,
    proto_loss,
    similarity_reg,
)
from relaug.metrics import f_at_k
from relaug.model import ModelConfig, forward, init_params, load_checkpoint
from relaug.rng import Substreams, stream


def report(name: str, ok: bool, detail: str = "") -> None:
    print(f"ACCEPTANCE {name}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


# ---------------------------------------------------------------------------
# Criterion 1: gradient correctness


GRAD_CFG = ModelConfig(n_entities=4, n_p=5, feat_dim=6, entity_dim=4, rel_dim=8,
                       word_dim=4, hidden_dim=8)


def _random_point(seed, make_instance):
    rng = np.random.default_rng(seed)
    model = init_params(GRAD_CFG, rng)
    for name, t in model.tensors.items():
        if name == "log_gamma":
            model.tensors[name] = np.array(rng.normal(0.0, 0.3))
        else:
            model.tensors[name] = rng.normal(0.0, 0.6, size=t.shape)
    inst = make_instance(seed, predicate=int(rng.integers(5)), n_p=5, dim=6, seed=seed)
    return model, inst


def test_c1_gradient_correctness(make_instance):
    prop = PropensityTable(np.array([0.4, 0.25, 0.15, 0.1, 0.1]))
    observed = LabelDistribution.one_hot(1, 5)
    t0 = time.time()
    worst = 0.0
    for point in range(20):
        model, inst = _random_point(point, make_instance)
        out = forward(model, inst)
        # hinge margin placed away from the kink for this prototype set
        sq = ((out.c_bar[:, None, :] - out.c_bar[None, :, :]) ** 2).sum(axis=2)
        gp = float(sq.sum() / 5 + 3.0)
        cfg = LossConfig(gamma_prime=gp)
        cases = {
            "proto": (lambda m: proto_loss(m, forward(m, inst), 1),),
            "multi_proto": (lambda m: multi_proto_loss(m, forward(m, inst), 1, 3, 0.35),),
            "reg1": (lambda m: similarity_reg(m, forward(m, inst)),),
            "reg2": (lambda m: distance_reg(m, forward(m, inst), gp),),
            "ips": (lambda m: ips_loss(m, forward(m, inst), observed, prop),),
            "final": (lambda m: final_loss(m, forward(m, inst), 1, 3, 0.35, cfg),),
        }
        for name, (fn,) in cases.items():
            analytic = fn(model).grads
            numeric = numeric_grads(lambda m: fn(m).value, model, h=1e-5)
            err = relative_error(analytic, numeric)
            worst = max(worst, err)
            assert err <= 1e-4, f"{name} at point {point}: rel err {err:.2e}"
    elapsed = time.time() - t0
    report("1 gradient-correctness", worst <= 1e-4 and elapsed < 30.0,
           f"worst rel err {worst:.2e}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# Criterion 2: retrieval oracle equivalence


def test_c2_retrieval_oracle_equivalence():
    rng = np.random.default_rng(42)
    m, dim = 5000, 32
    keys = rng.normal(size=(m, dim)).astype(np.float32)
    keys[::97] = keys[0]  # exact duplicates exercise the index tie-break
    entries = [BankEntry(key=keys[i], value=int(rng.integers(8)),
                         triplet=TripletKey(0, int(rng.integers(8)), 0), source_id=i)
               for i in range(m)]
    bank = MemoryBank(entries, dim=dim, cap=10)
    queries = rng.normal(size=(1000, dim))
    unit_keys = keys.astype(np.float64)
    unit_keys /= np.linalg.norm(unit_keys, axis=1, keepdims=True)
    t0 = time.time()
    checked = 0
    for k in (1, 3, 5, 10, 20):
        idx, scores = query_batch(bank, queries, k)
        sims = (queries / np.linalg.norm(queries, axis=1, keepdims=True)) @ unit_keys.T
        for qi in range(queries.shape[0]):
            row = sims[qi]
            oracle = sorted(range(m), key=lambda i: (-row[i], i))[: k + 1]
            assert idx[qi].tolist() == oracle[1:], f"k={k} query {qi}"
            checked += 1
    elapsed = time.time() - t0
    report("2 retrieval-oracle-equivalence", elapsed < 30.0,
           f"{checked} query/k pairs exact, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# Criterion 3: F@K formula against printed table rows


def test_c3_f_at_k_reproduction():
    rows = [
        (62.2, 36.2, 45.7),
        (64.1, 39.1, 48.6),
        (48.3, 35.4, 40.9),
    ]
    deltas = [abs(f_at_k(r, mr) - expected) for r, mr, expected in rows]
    report("3 f-at-k-reproduction", all(d <= 0.1 for d in deltas),
           "deltas " + ", ".join(f"{d:.3f}" for d in deltas))


# ---------------------------------------------------------------------------
# Criterion 4: sampler statistics


def test_c4_sampler_statistics():
    from relaug.augment import categorical_from_uniform

    w = np.array([0.00931, 0.99069])
    w = w / w.sum()
    uni = stream(7, "acceptance-cat").random(size=100_000)
    cum = np.cumsum(w)
    draws = np.searchsorted(cum, uni, side="right")
    draws = np.minimum(draws, 1)
    freq = np.bincount(draws, minlength=2) / 100_000
    linf = float(np.abs(freq - w).max())
    spot = [categorical_from_uniform(w, float(u)) for u in uni[:200]]
    assert np.array_equal(spot, draws[:200])

    lam = stream(7, "acceptance-beta").beta(2.0, 2.0, size=100_000)
    mean_err = abs(float(lam.mean()) - 0.5)
    var_err = abs(float(lam.var()) - 0.05)
    report("4 sampler-statistics",
           linf <= 0.01 and mean_err <= 0.01 and var_err <= 0.005,
           f"categorical Linf {linf:.4f}, beta mean err {mean_err:.4f}, "
           f"var err {var_err:.4f}")


# ---------------------------------------------------------------------------
# Criterion 5: selection rule unit suite


def test_c5_selection_rule():
    checks = [
        inconsistency(1, [1, 1, 1]) == 0.0,
        abs(inconsistency(0, [0, 2, 2, 0, 2]) - 0.6) < 1e-12,
        inconsistency(3, [0, 1, 2]) == 1.0,
        select(0, [0, 2, 2, 0, 2], tau=0.3) is True,
        select(0, [0, 0, 1, 1, 1], tau=0.6) is True,  # d == tau goes multi
        select(1, [1, 1, 1], tau=0.3) is False,
    ]
    report("5 selection-rule", all(checks), f"{sum(checks)}/6 checks")


# ---------------------------------------------------------------------------
# Criterion 6: reduction identities


def test_c6_reduction_identities(make_instance, tmp_path):
    model, inst = _random_point(3, make_instance)
    out = forward(model, inst)
    a = multi_proto_loss(model, out, 1, 4, 1.0)
    b = proto_loss(model, out, 1)
    value_ok = abs(a.value - b.value) < 1e-12
    grads_ok = all(np.array_equal(a.grads[k], b.grads[k]) for k in a.grads)

    from test_train_cli import tiny_cfg

    cfg = tiny_cfg(tmp_path / "eq", pretrain_epochs=3, ra_epochs=3, cold_start=True)
    cfg = replace(cfg, aug=AugmentConfig(strategy="none"))
    stages.gen_data(cfg)
    stages.pretrain(cfg)
    stages.build_bank_stage(cfg)
    ra_ckpt = stages.train_ra(cfg, tag="ra_none")
    m1, _ = load_checkpoint(cfg.pretrain_ckpt_path)
    m2, _ = load_checkpoint(ra_ckpt)
    bits_ok = set(m1.tensors) == set(m2.tensors) and all(
        m1.tensors[k].tobytes() == m2.tensors[k].tobytes() for k in m1.tensors)
    report("6 reduction-identities", value_ok and grads_ok and bits_ok,
           f"lambda=1 identity {value_ok and grads_ok}, bitwise checkpoint {bits_ok}")


# ---------------------------------------------------------------------------
# Shared pipeline fixtures for the end-to-end criteria


ABLATION_SEEDS = (1, 2, 3, 4, 5)
DIRECTION_SEEDS = (1, 2, 3)
STRATEGY_SEEDS = (1, 2, 3)


@pytest.fixture(scope="module")
def ablation_runs(tmp_path_factory):
    """Default-config pipelines: all ablation variants for each seed."""
    root = tmp_path_factory.mktemp("ablation")
    results: dict = {}
    for seed in ABLATION_SEEDS:
        cfg = RunConfig(seed=seed, out=root / f"seed{seed}")
        stages.gen_data(cfg)
        stages.pretrain(cfg)
        stages.build_bank_stage(cfg)
        reports = {"vanilla": stages.evaluate_stage(
            cfg, ckpt_path=cfg.pretrain_ckpt_path, report_name="vanilla")}
        for variant in ("no_select", "no_ipss", "full"):
            ckpt = stages.train_ra(cfg, variant=variant, tag=f"ra_{variant}")
            reports[variant] = stages.evaluate_stage(cfg, ckpt_path=ckpt,
                                                     report_name=variant)
        results[seed] = {"cfg": cfg, "reports": reports}
    return results


def _means(results, variant, seeds):
    rows = np.array([
        (results[s]["reports"][variant].mr_at_k[50],
         results[s]["reports"][variant].r_at_k[50],
         results[s]["reports"][variant].f_at_k[50])
        for s in seeds
    ])
    return rows.mean(axis=0)


def test_c8_direction_match(ablation_runs):
    t0 = time.time()
    van = _means(ablation_runs, "vanilla", DIRECTION_SEEDS)
    full = _means(ablation_runs, "full", DIRECTION_SEEDS)
    dmr = full[0] - van[0]
    dr = full[1] - van[1]
    df = full[2] - van[2]
    ok = dmr > 0.0 and df > 0.0 and -dr < dmr
    report("8 direction-match", ok,
           f"mR {van[0]:.1f}->{full[0]:.1f} (+{dmr:.1f}), R {van[1]:.1f}->{full[1]:.1f} "
           f"({dr:+.1f}), F {van[2]:.1f}->{full[2]:.1f} (+{df:.1f}); "
           f"wall {time.time() - t0:.0f}s after shared pipelines")


def test_c9_ablation_ordering(ablation_runs):
    van = _means(ablation_runs, "vanilla", ABLATION_SEEDS)
    ns = _means(ablation_runs, "no_select", ABLATION_SEEDS)
    ni = _means(ablation_runs, "no_ipss", ABLATION_SEEDS)
    full = _means(ablation_runs, "full", ABLATION_SEEDS)
    f_order = full[2] >= ns[2] >= van[2] and full[2] >= ni[2] >= van[2]
    mr_strict = full[0] > ns[0] and full[0] > ni[0]
    report("9 ablation-ordering", f_order and mr_strict,
           f"F: full {full[2]:.1f} / no_select {ns[2]:.1f} / no_ipss {ni[2]:.1f} / "
           f"vanilla {van[2]:.1f}; mR: full {full[0]:.1f} vs {ns[0]:.1f}/{ni[0]:.1f}")


def test_c10_augmentation_recovery(ablation_runs):
    run = ablation_runs[1]
    cfg = run["cfg"]
    vocab = load_vocab(cfg.vocab_path)
    data = load_dataset(cfg.dataset_path, vocab.predicates)
    prop = compute_propensity(data, vocab.predicates.n_p)
    model, _ = load_checkpoint(cfg.pretrain_ckpt_path)
    bank = load_bank(cfg.bank_path)
    subs = Substreams(999)
    hits = total = 0
    for start in range(0, 4096, 128):
        batch = data[start:start + 128]
        ba = augment_instances(model, batch, bank, prop, cfg.aug, subs)
        for i in np.flatnonzero(ba.is_multi):
            total += 1
            hits += int(ba.aug[i]) in batch[i].latent
    precision = hits / total
    freq = prop.frequency
    chance = float(np.mean([freq[sorted(inst.latent)].sum() for inst in data]))
    report("10 augmentation-recovery", precision >= 2.0 * chance,
           f"precision {precision:.3f} vs chance {chance:.3f} "
           f"({precision / chance:.1f}x, {total} draws)")


@pytest.fixture(scope="module")
def strategy_runs(tmp_path_factory):
    """Default-config pipelines per strategy, sharing pretrain/bank per seed."""
    root = tmp_path_factory.mktemp("strategies")
    results: dict = {}
    for seed in STRATEGY_SEEDS:
        base = RunConfig(seed=seed, out=root / f"seed{seed}")
        stages.gen_data(base)
        stages.pretrain(base)
        stages.build_bank_stage(base)
        per_seed = {}
        for strategy in ("none", "feat_aug", "label_aug", "mixup"):
            cfg = replace(base, aug=replace(base.aug, strategy=strategy))
            ckpt = stages.train_ra(cfg, tag=f"ra_{strategy}", allow_mismatch=True)
            rep = stages.evaluate_stage(cfg, ckpt_path=ckpt, report_name=strategy,
                                        allow_mismatch=True)
            log = [json.loads(line)
                   for line in open(base.out / f"ra_{strategy}_log.jsonl")]
            per_seed[strategy] = {"report": rep, "log": log}
        results[seed] = per_seed
    return results


def test_c11_strategy_comparison(strategy_runs):
    means = {}
    for strategy in ("none", "feat_aug", "label_aug", "mixup"):
        means[strategy] = float(np.mean([
            strategy_runs[s][strategy]["report"].mr_at_k[50] for s in STRATEGY_SEEDS]))
    best = max(means, key=means.get)
    report("11 strategy-comparison", best == "label_aug",
           "mean mR@50 " + ", ".join(f"{k}={v:.1f}" for k, v in means.items()))


def test_c12_overhead_bound(strategy_runs):
    # steady state: the first epoch absorbs one-time JIT dispatch costs
    ratios = []
    for seed in STRATEGY_SEEDS:
        vanilla = np.mean([rec["sec_per_100_batches"]
                           for rec in strategy_runs[seed]["none"]["log"][1:]])
        ra = np.mean([rec["sec_per_100_batches"]
                      for rec in strategy_runs[seed]["label_aug"]["log"][1:]])
        ratios.append(ra / vanilla)
    mean_ratio = float(np.mean(ratios))
    report("12 overhead-bound", mean_ratio <= 1.5,
           "per-seed " + ", ".join(f"{r:.2f}" for r in ratios) +
           f"; mean {mean_ratio:.2f} (<= 1.5x)")


def test_c7_bank_invariants(ablation_runs, tmp_path):
    from collections import Counter

    cfg = ablation_runs[1]["cfg"]
    bank = load_bank(cfg.bank_path)
    counts = Counter(e.triplet for e in bank.entries)
    cap_ok = all(c <= 10 for c in counts.values())
    p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
    save_bank(bank, p1)
    save_bank(load_bank(p1), p2)
    roundtrip_ok = (p1.read_bytes() == p2.read_bytes()
                    and p1.read_bytes() == cfg.bank_path.read_bytes())
    report("7 bank-invariants", cap_ok and roundtrip_ok,
           f"{bank.count} entries, max per triplet "
           f"{max(counts.values())}, byte-identical round-trip {roundtrip_ok}")
