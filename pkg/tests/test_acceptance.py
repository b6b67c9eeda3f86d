"""Acceptance suite. Each test prints one PASS/FAIL line with its measurement."""

import json
import time
from pathlib import Path

import numpy as np
import pytest

from test_metrics import ap_sweep, aupro_dense, auroc_pairs, f1_sweep, random_case, smooth_case

from unimmad.bench import bench, grouped_serial_deviation
from unimmad.checkpoint import load_checkpoint
from unimmad.cmoe import ExpertBank, compose_kernel, count_parameters
from unimmad.config import Config
from unimmad.core import softmax
from unimmad.data import synth_dataset
from unimmad.data.rng import generator
from unimmad.metrics import aupro, auroc, average_precision, max_f1
from unimmad.model import UniMMAD
from unimmad.modelcheck import MicroProblem, model_gradcheck
from unimmad.objectives import anneal_factor
from unimmad.params import ParamStore
from unimmad.trainer import continue_train, evaluate, expert_load_cv, train, trainable_ratio


@pytest.fixture
def verdict(capsys):
    def emit(name: str, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        assert ok, detail
    return emit


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    """3 synthetic classes x 2 modalities at 64x64, plus a 4th class for continual training."""
    root = tmp_path_factory.mktemp("desk")
    old = synth_dataset(0, 3, out=root, task_id="synth")
    new = synth_dataset(0, 1, out=root, task_id="class3", first_class=3)
    return root, old, new


@pytest.fixture(scope="module")
def trained(desk):
    root, old, _ = desk
    cfg = Config(epochs=50, seed=0, out=str(root / "run"))
    t0 = time.perf_counter()
    ckpt = train(cfg, [old])
    return ckpt, time.perf_counter() - t0


def test_c01_parameter_efficiency(verdict):
    t0 = time.perf_counter()
    c = count_parameters(8, 32, 64, 64, (3,))
    per = {k: count_parameters(8, 32, 64, 64, (k,))["ratio"] for k in (1, 3, 5)}
    agg = count_parameters(8, 32, 64, 64, (1, 3, 5))
    dt = time.perf_counter() - t0
    ok = (c["moe_in_moe"], c["plain_moe"]) == (311_296, 1_179_648) and c["ratio"] == 311_296 / 1_179_648
    ok = ok and agg["moe_in_moe"] == sum(count_parameters(8, 32, 64, 64, (k,))["moe_in_moe"] for k in (1, 3, 5))
    ok = ok and dt < 1.0
    detail = (f"{c['moe_in_moe']}/{c['plain_moe']} = {c['ratio']:.5f} "
              f"({100 * (1 - c['ratio']):.1f}% fewer); per K_s "
              + ", ".join(f"{k}: {r:.5f}" for k, r in per.items()) + f"; 3-scale {agg['ratio']:.5f}; {dt:.3f} s")
    verdict("1 parameter efficiency", ok, detail)


def test_c02_grouped_vs_serial(verdict):
    t0 = time.perf_counter()
    r = grouped_serial_deviation(100, seed=0, dtype=np.float32)
    dt = time.perf_counter() - t0
    ok = r["configs"] == 100 and r["max_abs_deviation"] <= 1e-5 and dt < 30
    verdict("2 grouped vs serial", ok, f"max abs deviation {r['max_abs_deviation']:.3g} over 100 configs; {dt:.2f} s")


def test_c03_compose_oracle(verdict):
    t0 = time.perf_counter()
    mismatches = 0
    for b in range(50):
        rng = generator(b, "compose-oracle")
        n_exp, n_lead = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        o, i = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        bank = ExpertBank(ParamStore(np.float32), "b", n_exp, n_lead, o, i, (1, 3, 5), 4, rng)
        for k in (1, 3, 5):
            w = bank.W[k].data
            for leader in range(n_lead):
                sp = softmax(bank.S[k].data[leader], axis=0).data
                oracle = np.zeros(w.shape[1:], np.float32)
                for oc in range(o):
                    for e in range(n_exp):
                        oracle[oc] = oracle[oc] + sp[e, oc] * w[e, oc]
                mismatches += not np.array_equal(compose_kernel(bank, leader, k).data, oracle)
    dt = time.perf_counter() - t0
    verdict("3 kernel composition oracle", mismatches == 0 and dt < 10,
            f"{mismatches} bitwise mismatches over 50 banks; {dt:.2f} s")


def test_c04_gradients(verdict):
    t0 = time.perf_counter()
    errs = model_gradcheck(seed=0, eps=1e-6)
    dt = time.perf_counter() - t0
    ok = len(errs) == 8 and max(errs.values()) <= 1e-4 and dt < 300
    verdict("4 gradient correctness", ok,
            ", ".join(f"{k} {v:.2g}" for k, v in errs.items()) + f"; {dt:.1f} s")


def test_c05_stop_gradient(verdict):
    eps = 1e-6
    prob = MicroProblem(seed=1)
    grads = prob.tape_gradients()
    names = list(prob.model.params)
    rng = generator(1, "stop-gradient")
    d = {k: rng.standard_normal(prob.model.params[k].shape) for k in names}
    tape = sum(float(np.sum(grads[prob.model.params[k]] * d[k])) for k in names)
    frozen = prob.directional_fd(names, d, eps, frozen=True)
    live = prob.directional_fd(names, d, eps, frozen=False)
    delta = eps * abs(tape - frozen)
    verdict("5 stop-gradient semantics", delta <= 1e-10,
            f"|dloss| through modulation as seen by the tape {delta:.3g} "
            f"(modulation path if differentiated: {eps * abs(live - frozen):.3g})")


def test_c06a_annealing(verdict):
    got = [anneal_factor(e, 300) for e in (0, 150, 299)]
    verdict("6a annealing factor", got == [1.0, 0.25, (1 / 300) ** 2], f"{got}")


def test_c06b_load_balancing(desk, verdict, tmp_path):
    _, old, _ = desk
    rows, wins = [], 0
    for seed in range(5):
        cv = {}
        for moe in (True, False):
            cfg = Config(epochs=5, seed=seed, moe_loss=moe, out=str(tmp_path / f"s{seed}{moe}"))
            model, _, _ = load_checkpoint(train(cfg, [old]))
            cv[moe] = expert_load_cv(model, [old])
        wins += cv[True] < cv[False]
        rows.append(f"seed {seed}: {cv[True]:.4f} vs {cv[False]:.4f}")
    verdict("6b load balancing", wins >= 4, f"{wins}/5 seeds lower CV with the balancing loss; " + "; ".join(rows))


def test_c07_sparse_activation(verdict):
    cfg = Config()
    model = UniMMAD(cfg)
    rng = generator(0, "sparse")
    bundle = {m: rng.random((2, c, 64, 64)).astype(np.float32) for m, c in cfg.modalities}
    out = model.forward(bundle, trace=True)
    counts = sorted({len(e) for tr in out.traces.values() for e in tr.experts})
    groups = sorted({g for tr in out.traces.values() for g in tr.groups_per_conv})
    ok = len(out.traces) == 6 and counts == [3] and groups == [3]
    verdict("7 sparse activation", ok, f"expert kernels per (modality, level) {counts}, groups per conv {groups}")


def test_c08_cache(verdict):
    r = bench(Config(), iters=30, warmup=5, n_configs=10)
    diff, ratio = r["cache"]["max_abs_score_diff"], r["cache"]["latency_ratio"]
    soft = "met" if ratio <= 0.75 else "MISSED (soft)"
    verdict("8 cache transparency", diff <= 1e-6,
            f"max score diff {diff:.3g}; cached/uncached median latency {ratio:.2f} ({soft})")


def test_c09_end_to_end(trained, desk, verdict):
    ckpt, train_s = trained
    model, _, _ = load_checkpoint(ckpt)
    r = evaluate(model, [desk[1]])["tasks"]["synth"]
    auc_p, auc_i = r["pixel"]["AUC_P"], r["image"]["AUC_I"]
    verdict("9 end-to-end detection", auc_p >= 0.90 and auc_i >= 0.90 and train_s <= 900,
            f"pixel AUROC {auc_p:.4f}, image AUROC {auc_i:.4f}, AUPRO {r['pixel']['AUPRO']:.4f}; "
            f"training {train_s:.0f} s")


def test_c10_continual(trained, desk, verdict, tmp_path):
    root, old, new = desk
    ckpt, _ = trained
    before, _, _ = load_checkpoint(ckpt)
    n, total, ratio = trainable_ratio(before)
    base = evaluate(before, [old])["tasks"]["synth"]["pixel"]["AUC_P"]
    cfg = before.cfg.replace(out=str(tmp_path / "continual"))
    out, _ = continue_train(ckpt, [new], [old], cfg, replay_frac=0.01, epochs=10)
    after, _, _ = load_checkpoint(out)
    r = evaluate(after, [old, new])["tasks"]
    prev, fresh = r["synth"]["pixel"]["AUC_P"], r["class3"]["pixel"]["AUC_P"]
    drop = 100 * (base - prev)
    ok = ratio < 0.10 and drop < 8 and fresh >= 0.85
    verdict("10 continual protocol", ok,
            f"trainable {n}/{total} = {ratio:.4f}; previous task pixel AUROC {base:.4f} -> {prev:.4f} "
            f"({drop:+.2f} points drop); new task pixel AUROC {fresh:.4f}")


def test_c11_metric_oracles(verdict):
    rng = np.random.default_rng(11)
    exact = 0
    for _ in range(200):
        s, y = random_case(rng, int(rng.integers(2, 1001)))
        exact += (auroc(s, y) == auroc_pairs(s, y) and average_precision(s, y) == ap_sweep(s, y)
                  and max_f1(s, y) == f1_sweep(s, y))
    worst = 0.0
    for _ in range(20):
        scores, masks = smooth_case(rng)
        worst = max(worst, abs(aupro(scores, masks) - aupro_dense(scores, masks)))
    verdict("11 metric oracles", exact == 200 and worst <= 1e-3,
            f"{exact}/200 exact point-metric matches; AUPRO max deviation {worst:.3g}")


def test_c12_determinism(desk, verdict, tmp_path):
    _, old, _ = desk

    def run(tag):
        cfg = Config(epochs=2, seed=3, out=str(tmp_path / "run"))
        ckpt = train(cfg, [old])
        model, _, _ = load_checkpoint(ckpt)
        evaluate(model, [old], tmp_path / "run" / "report.json")
        files = {str(p.relative_to(tmp_path / "run")): p.read_bytes()
                 for p in sorted((tmp_path / "run").rglob("*")) if p.is_file()}
        Path(tmp_path / "run").rename(tmp_path / tag)
        return files

    a, b = run("a"), run("b")
    differing = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    report = json.loads(a["report.json"])
    verdict("12 determinism", not differing and len(a) > 5,
            f"{len(a)} files compared (checkpoint, loss log, report), differing: {differing or 'none'}; "
            f"mean pixel AUROC {report['mean']['AUC_P']:.4f}")
