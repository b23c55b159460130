"""Acceptance suite.  Each test ends in ``verdict`` which records a one-line
PASS/FAIL summary (echoed at the end of the session) and then asserts.

The continual-learning criteria share one set of desk-scale runs: five seeds
times three strategies, materialized once per seed into a shared data
directory.  Building them takes a few minutes on one core.
"""

import json
import time
import warnings
from dataclasses import replace

import numpy as np
import pytest

from uapcl import autodiff as ad
from uapcl.classifier import ClassifierSnapshot, load_checkpoint
from uapcl.continual import loss_lp, loss_lr
from uapcl.data import BONA_FIDE, FrozenExtractor, load_features
from uapcl.experiment import desk_experiment, joint_train, run_sequence, train_base
from uapcl.metrics import eer_from_scores
from uapcl.report import prior_domain_eers
from uapcl.uap import UapPool, fooling_rate, generate_uap

from conftest import ACCEPTANCE
from gradcases import SEEDS, classifier_case, op_cases
from oracles import eer_bruteforce

STRATEGIES = ("sft", "uap_feature", "uap_waveform")
ORDER = [1, 2, 3]


def verdict(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE.append(line)
    print(line)
    assert ok, detail


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    """{(strategy, seed): (report, run_dir, seconds)} plus the per-seed data dirs."""
    root = tmp_path_factory.mktemp("acceptance")
    out, data = {}, {}
    for seed in SEEDS:
        data[seed] = root / f"data_{seed}"
        for st in STRATEGIES:
            cfg = desk_experiment(seed, st, data_dir=str(data[seed]))
            t0 = time.perf_counter()
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                report = run_sequence(cfg, root / f"{st}_{seed}")
            out[st, seed] = (report, root / f"{st}_{seed}", time.perf_counter() - t0)
    return {"root": root, "runs": out, "data": data}


# ---------------------------------------------------------------- 1: gradients

def test_criterion_1_gradients():
    t0 = time.perf_counter()
    worst, where = 0.0, None
    for seed in SEEDS:
        for name, f, x in op_cases(seed):
            err = ad.grad_check(f, x)
            if err > worst:
                worst, where = err, f"{name}@{seed}"
        loss, params = classifier_case(seed)
        err = ad.params_grad_check(loss, list(params))
        if err > worst:
            worst, where = err, f"classifier@{seed}"
    took = time.perf_counter() - t0
    n_ops = len(op_cases(0))
    verdict(1, worst <= 1e-5 and took < 30.0,
            f"{n_ops} ops + classifier x {len(SEEDS)} seeds, max rel err {worst:.2e} ({where}), {took:.1f}s")


# ---------------------------------------------------------------- 2: EER

def test_criterion_2_eer_oracle():
    rng = np.random.default_rng(7)
    worst = 0.0
    for i in range(1000):
        n_b, n_s = rng.integers(1, 101, size=2)  # 2 to 200 scores per set
        if i % 3 == 0:
            bona, spoof = rng.integers(0, 8, n_b).astype(float), rng.integers(0, 8, n_s).astype(float)
        else:
            bona, spoof = rng.normal(0.4, 1, n_b), rng.normal(-0.4, 1, n_s)
        worst = max(worst, abs(eer_from_scores(bona, spoof) - eer_bruteforce(bona, spoof)))
    separated = eer_from_scores([2.0, 3.0], [0.0, 1.0])
    inverted = eer_from_scores([0.0, 1.0], [2.0, 3.0])
    verdict(2, worst <= 1e-12 and separated == 0.0 and inverted == 1.0,
            f"1000 sets, max |diff| {worst:.1e}; separated {separated}, inverted {inverted}")


# ---------------------------------------------------------------- 3: UAP invariants

def test_criterion_3_uap_invariants(runs):
    problems, n_gen, n_rec = [], 0, 0
    for seed in SEEDS:
        run = runs["runs"]["uap_feature", seed][1]
        data = runs["data"][seed]
        snap = load_checkpoint(run / "stage_1" / "model.ufckpt")
        extractor = FrozenExtractor.load(data / "extractor.uft")
        reals = [f for f in load_features(data / "domain_1" / "train.uffeat") if f.label == BONA_FIDE]
        cfg = desk_experiment(seed, "uap_feature").uap
        before = (snap.checksum(), extractor.checksum())
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            rec = generate_uap(snap, reals, replace(cfg, seed=seed + 100), stage_index=1)
        n_gen += 1
        if max(rec.history["linf"]) > cfg.epsilon:
            problems.append(f"seed {seed}: linf {max(rec.history['linf'])}")
        if (snap.checksum(), extractor.checksum()) != before:
            problems.append(f"seed {seed}: checksum changed")
        if rec.converged and rec.achieved_fooling_rate < cfg.sigma:
            problems.append(f"seed {seed}: converged at {rec.achieved_fooling_rate}")
        # every record a run stored obeys the same rules
        for st in ("uap_feature", "uap_waveform"):
            for r in UapPool.load(runs["runs"][st, seed][1] / "pool").records:
                n_rec += 1
                if np.abs(r.perturbation).max() > r.epsilon:
                    problems.append(f"{st} seed {seed} stage {r.stage_index}: over budget")
                if r.converged and r.achieved_fooling_rate < cfg.sigma:
                    problems.append(f"{st} seed {seed} stage {r.stage_index}: converged below sigma")
                if r.level == "feature":
                    teacher = load_checkpoint(runs["runs"][st, seed][1] / f"stage_{r.stage_index}" / "model.ufckpt")
                    own = [f for f in load_features(data / f"domain_{r.stage_index}" / "train.uffeat")
                           if f.label == BONA_FIDE]
                    if fooling_rate(teacher, own, r.perturbation) != r.achieved_fooling_rate:
                        problems.append(f"{st} seed {seed} stage {r.stage_index}: fooling rate not reproducible")
    verdict(3, not problems, f"{n_gen} fresh generations + {n_rec} stored records; "
            + ("; ".join(problems) if problems else "budget, checksums and threshold hold"))


# ---------------------------------------------------------------- 4: forgetting

def test_criterion_4_forgetting(runs):
    rises, slowest = [], 0.0
    for seed in SEEDS:
        report, _, took = runs["runs"]["sft", seed]
        rises.append(report.cell(1, 1) - report.cell(0, 1))  # rows are 0-based stages
        slowest = max(slowest, took)
    hits = sum(r >= 10.0 for r in rises)
    verdict(4, hits >= 4 and slowest < 600.0,
            f"SFT domain-1 EER rise per seed {[round(r, 1) for r in rises]} (>=10 on {hits}/5), "
            f"slowest run {slowest:.0f}s")


# ---------------------------------------------------------------- 5: retention

def test_criterion_5_retention(runs):
    strict, better_avg, rows = True, 0, []
    for seed in SEEDS:
        sft = runs["runs"]["sft", seed][0]
        uap = runs["runs"]["uap_feature", seed][0]
        p_sft, p_uap = prior_domain_eers(sft, ORDER), prior_domain_eers(uap, ORDER)
        strict &= all(u < s for u, s in zip(p_uap, p_sft))
        better_avg += uap.averages[-1] < sft.averages[-1]
        rows.append(f"s{seed}:{[round(x, 1) for x in p_uap]}<{[round(x, 1) for x in p_sft]}")
    verdict(5, strict and better_avg >= 4,
            f"prior-domain EER uap<sft at every stage on all seeds: {strict}; final average better on "
            f"{better_avg}/5; " + " ".join(rows))


# ---------------------------------------------------------------- 6: feature vs waveform

def test_criterion_6_feature_vs_waveform(runs):
    both, detail = 0, []
    for seed in SEEDS:
        feat = runs["runs"]["uap_feature", seed][0]
        wave = runs["runs"]["uap_waveform", seed][0]
        f_prior = float(np.mean(prior_domain_eers(feat, ORDER)))
        w_prior = float(np.mean(prior_domain_eers(wave, ORDER)))
        f_c, w_c = feat.embedding["normalized"], wave.embedding["normalized"]
        ok = f_prior <= w_prior and f_c < w_c
        both += ok
        detail.append(f"s{seed}:{f_prior:.1f}/{w_prior:.1f} centroid {f_c:.2f}/{w_c:.2f}")
    verdict(6, both >= 3, f"feature beats waveform on EER and centroid for {both}/5 seeds; " + " ".join(detail))


# ---------------------------------------------------------------- 7: reductions

def _checksums(run_dir, n):
    return [load_checkpoint(run_dir / f"stage_{t}" / "model.ufckpt").checksum() for t in range(1, n + 1)]


def test_criterion_7_reductions(runs):
    root, data = runs["root"], str(runs["data"][0])
    cfg = desk_experiment(0, "uap_feature", data_dir=data)
    cfg.stage = replace(cfg.stage, lam=0.0, pseudo=False)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        run_sequence(cfg, root / "lambda0")
    sft_dir = runs["runs"]["sft", 0][1]
    same_sft = _checksums(root / "lambda0", 3) == _checksums(sft_dir, 3)

    train_base(desk_experiment(0, "base", data_dir=data), 1, root / "base")
    joint_train(desk_experiment(0, "joint", data_dir=data), root / "joint", domains=[1])
    same_base = _checksums(root / "base", 1) == _checksums(root / "joint", 1)
    m_base, m_joint = (json.loads((root / r / "stage_1" / "metrics.json").read_text()) for r in ("base", "joint"))
    same_metrics = all(m_base[k] == m_joint[k] for k in ("eer", "dev_eer", "best_epoch", "final_loss"))

    snap = load_checkpoint(sft_dir / "stage_2" / "model.ufckpt")
    twin = ClassifierSnapshot.of(snap.params.copy(), 2)
    reals = [f for f in load_features(runs["data"][0] / "domain_1" / "eval.uffeat") if f.label == BONA_FIDE]
    losses = [abs(fn(snap.params, twin, reals, on).item()) for fn in (loss_lp, loss_lr)
              for on in ("embedding", "logit")]
    verdict(7, same_sft and same_base and same_metrics and max(losses) <= 1e-12,
            f"lambda=0 no-pseudo == sft: {same_sft}; joint[1] == base: {same_base} (metrics {same_metrics}); "
            f"max |L_lp|,|L_lr| {max(losses):.1e}")


# ---------------------------------------------------------------- 8: isolation

def test_criterion_8_isolation(runs):
    violations, n_runs, n_reads = [], 0, 0
    for (st, seed), (report, run, _) in sorted(runs["runs"].items()):
        n_runs += 1
        for t, dom in enumerate(ORDER, start=1):
            for line in (run / f"stage_{t}" / "audit.log").read_text().splitlines():
                e = json.loads(line)
                if e["phase"] != "train" or e["kind"] != "data":
                    continue
                n_reads += 1
                if e["stage"] != t or e["domain"] != dom:
                    violations.append(f"{st} s{seed} stage {t} read {e['path']}")
    verdict(8, not violations and n_reads > 0,
            f"{n_runs} runs, {n_reads} training reads, {len(violations)} from other stages' domains")


# ---------------------------------------------------------------- 9: determinism

def test_criterion_9_determinism(runs):
    root = runs["root"]
    first = runs["runs"]["uap_feature", 1][1]
    cfg = desk_experiment(1, "uap_feature", data_dir=str(runs["data"][1]))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        run_sequence(cfg, root / "repeat")
    names = [f"stage_{t}/metrics.json" for t in (1, 2, 3)] + ["report.csv", "report.json"]
    diff = [n for n in names if (first / n).read_bytes() != (root / "repeat" / n).read_bytes()]
    verdict(9, not diff, f"{len(names)} files compared byte for byte, differing: {diff or 'none'}")
