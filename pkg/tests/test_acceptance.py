"""Acceptance suite: ten numbered criteria, one test (and one pass/fail
line under pytest -v) each.

The heavyweight criteria tune against a frozen 20k-step backbone that is
built once and disk-cached (see conftest). Directional criteria share one
batch of tuned runs so the whole suite stays within a desktop-CPU budget.
"""

import math
import random
from collections import Counter
from fractions import Fraction

import numpy as np
import pytest

from tunelab import adaptation as A
from tunelab import backbone as B
from tunelab import corpus as C
from tunelab import metrics as M
from tunelab import ngrams as N
from tunelab import tensor as T
from tunelab import training as TR

SEEDS = (0, 1, 2)
FROZEN_LR = 5e-3
FULL_LR = 1e-3
TUNE_STEPS = 2000
PROMPT_K = 20


def remap_all_task():
    task = C.gen_task("table_to_text", 500, 7)
    spec = C.plan_transform("unfamiliar_remap_all", task, 5)
    return C.transform_inputs(task, spec)


def tune_once(backbone, task, mode, seed, steps=TUNE_STEPS, k=PROMPT_K,
              eval_every=250, lr=None):
    cfg = TR.TrainConfig(
        mode, batch_size=8,
        learning_rate=(FULL_LR if mode == "fine_tune" else FROZEN_LR)
        if lr is None else lr,
        total_steps=steps, eval_every=eval_every, prompt_length=k,
        decode_max_len=24, seed=seed)
    return TR.tune(backbone, task, cfg)


@pytest.fixture(scope="module")
def main_runs(acceptance_assets):
    """Criterion 6/7/10 share these: five modes x three seeds on the
    fully-remapped task."""
    backbone, _ = acceptance_assets
    task = remap_all_task()
    records = {}
    for mode in ("fine_tune", "prompt_tune", "input_tune", "input_tune_seq",
                 "adapter_only"):
        records[mode] = [tune_once(backbone, task, mode, s).record
                        for s in SEEDS]
    return records


def mean_best(records):
    return sum(r.best_dev_bleu for r in records) / len(records)


# --------------------------------------------------------------------------
# criterion 1: zero-init identity


@pytest.mark.acceptance
def test_criterion_01_zero_init_identity(acceptance_assets):
    backbone, _ = acceptance_assets
    rng = np.random.default_rng(101)
    ad_prompt = A.make_adaptation("prompt_tune", backbone, k=PROMPT_K, seed=3)
    ad_input = A.make_adaptation("input_tune", backbone, k=PROMPT_K, seed=3)
    with T.no_grad():
        for _ in range(100):
            x = rng.integers(5, backbone.config.vocab_size,
                             size=rng.integers(3, 13)).tolist()
            y = rng.integers(5, backbone.config.vocab_size,
                             size=rng.integers(2, 9)).tolist()
            lp = B.forward(backbone, A.compose_source(ad_prompt, backbone, x), y)
            li = B.forward(backbone, A.compose_source(ad_input, backbone, x), y)
            assert np.max(np.abs(lp.data - li.data)) <= 1e-10


# --------------------------------------------------------------------------
# criterion 2: gradient fidelity on the tiny configuration


@pytest.mark.acceptance
def test_criterion_02_gradient_fidelity():
    bb = B.init_backbone(B.BackboneConfig(
        "encoder_decoder", vocab_size=12, embed_dim=8, layers=1, heads=2,
        ffn_dim=16, max_positions=16, seed=0))
    bb.freeze_all()
    x, y = [5, 6, 7, 8], [9, 10]
    # Generic point for the check.  Zero-init matrices leave structurally
    # zero gradients elsewhere, so every trainable is randomized.  At
    # h=1e-5 the central-difference noise floor is ~6e-11 absolute, which
    # an elementwise relative check cannot absorb for gradient entries
    # smaller than ~1e-6; this fixed draw keeps every nonzero entry above
    # that resolution limit, and determinism keeps the point stable.
    rng = np.random.default_rng(9)
    for mode in ("prompt_tune", "input_tune"):
        ad = A.make_adaptation(mode, bb, k=2, seed=2)
        params = ad.named_params()
        trainable = A.trainable_set(ad, bb)
        for p in params.values():
            p.data[:] = rng.normal(0.0, 0.5, p.data.shape)

        def loss():
            return TR.example_loss(bb, ad, x, y)

        report = T.grad_check(loss, trainable, h=1e-5)
        assert set(report) == set(trainable)
        worst = max(report.values())
        assert worst < 1e-4, (mode, report)


# --------------------------------------------------------------------------
# criterion 3: frozen invariance over 500 steps


@pytest.mark.acceptance
def test_criterion_03_frozen_invariance(acceptance_assets):
    backbone, _ = acceptance_assets
    task = remap_all_task()
    snap = backbone.snapshot()
    for mode in ("prompt_tune", "input_tune", "adapter_only"):
        tune_once(backbone, task, mode, seed=0, steps=500, eval_every=500)
        for name in snap:
            assert np.array_equal(snap[name], backbone.params[name].data), \
                (mode, name)


# --------------------------------------------------------------------------
# criterion 4: relative-performance formula


@pytest.mark.acceptance
def test_criterion_04_relative_performance_values():
    assert M.relative_performance(29.6, 34.5) == pytest.approx(0.858, abs=5e-4)
    assert M.relative_performance(64.5, 68.1) == pytest.approx(0.947, abs=5e-4)


# --------------------------------------------------------------------------
# criterion 5: familiarity ordering across the transform ladder


@pytest.mark.acceptance
def test_criterion_05_familiarity_ordering():
    table = N.build_bigram_table(C.gen_pretrain_corpus(11, 5000))
    task = C.gen_task("table_to_text", 500, 7)
    fam = {}
    for kind in ("familiar_plus", "identity", "unfamiliar_remap_keys",
                 "unfamiliar_remap_all"):
        variant = C.transform_inputs(task, C.plan_transform(kind, task, 5))
        fam[kind] = N.corpus_familiarity(variant, table)
    margin = 0.05
    assert fam["familiar_plus"] > fam["identity"] + margin, fam
    assert fam["identity"] > fam["unfamiliar_remap_keys"] + margin, fam
    assert fam["unfamiliar_remap_keys"] > fam["unfamiliar_remap_all"] + margin, fam


# --------------------------------------------------------------------------
# criteria 6 and 7: directional tuning results on unfamiliar inputs


@pytest.mark.acceptance
def test_criterion_06_input_beats_prompt_on_unfamiliar(main_runs):
    it = mean_best(main_runs["input_tune"])
    pt = mean_best(main_runs["prompt_tune"])
    ft = mean_best(main_runs["fine_tune"])
    assert it > pt + 0.01, (it, pt)
    assert ft >= it - 0.02, (ft, it)


@pytest.mark.acceptance
def test_criterion_07_ablations_fall_behind(main_runs):
    it = mean_best(main_runs["input_tune"])
    assert it > mean_best(main_runs["input_tune_seq"])
    assert it > mean_best(main_runs["adapter_only"])


# --------------------------------------------------------------------------
# criterion 8: prompt-length sweep


@pytest.mark.acceptance
def test_criterion_08_prompt_length_sweep(acceptance_assets):
    backbone, _ = acceptance_assets
    task = remap_all_task()
    for k in (1, 10, 50, 100):
        means = {}
        for mode in ("input_tune", "prompt_tune"):
            records = [tune_once(backbone, task, mode, s, steps=1500, k=k,
                                 eval_every=500).record for s in (0, 1)]
            means[mode] = mean_best(records)
        assert means["input_tune"] >= means["prompt_tune"], (k, means)


# --------------------------------------------------------------------------
# criterion 9: metric oracles


def oracle_bleu(batch: M.EvalBatch) -> float:
    """Corpus BLEU recomputed with position loops and exact rationals."""
    matched = [0] * 4
    totals = [0] * 4
    hyp_len = 0
    ref_len = 0
    for hyp, refs in zip(batch.hypotheses, batch.references):
        hyp_len += len(hyp)
        best = None
        for r in refs:
            d = abs(len(r) - len(hyp))
            if best is None or d < best[0] or (d == best[0] and len(r) < best[1]):
                best = (d, len(r))
        ref_len += best[1]
        for order in range(1, 5):
            counts = Counter(tuple(hyp[i:i + order])
                             for i in range(len(hyp) - order + 1))
            totals[order - 1] += sum(counts.values())
            for gram, c in counts.items():
                cap = 0
                for r in refs:
                    seen = sum(1 for i in range(len(r) - order + 1)
                               if tuple(r[i:i + order]) == gram)
                    cap = max(cap, seen)
                matched[order - 1] += min(c, cap)
    if any(t == 0 for t in totals) or any(m == 0 for m in matched):
        return 0.0
    log_prec = sum(math.log(Fraction(m, t)) for m, t in zip(matched, totals)) / 4
    bp = 1.0 if hyp_len > ref_len else math.exp(1 - ref_len / max(hyp_len, 1))
    return bp * math.exp(log_prec)


def oracle_rouge_l(batch: M.EvalBatch, beta: float = 1.2) -> float:
    def lcs(a, b):
        from functools import lru_cache

        @lru_cache(maxsize=None)
        def rec(i, j):
            if i == 0 or j == 0:
                return 0
            if a[i - 1] == b[j - 1]:
                return rec(i - 1, j - 1) + 1
            return max(rec(i - 1, j), rec(i, j - 1))

        return rec(len(a), len(b))

    scores = []
    for hyp, refs in zip(batch.hypotheses, batch.references):
        best = 0.0
        for r in refs:
            l = lcs(tuple(hyp), tuple(r))
            if l == 0:
                continue
            p, rr = l / len(hyp), l / len(r)
            best = max(best, (1 + beta ** 2) * p * rr / (rr + beta ** 2 * p))
        scores.append(best)
    return sum(scores) / len(scores)


@pytest.mark.acceptance
def test_criterion_09_metric_oracles():
    rng = random.Random(909)
    for _ in range(200):
        n = rng.randint(1, 5)
        hyps, refs = [], []
        for _ in range(n):
            hyps.append([rng.randint(0, 2) for _ in range(rng.randint(1, 8))])
            refs.append([[rng.randint(0, 2) for _ in range(rng.randint(1, 8))]
                         for _ in range(rng.randint(1, 3))])
        batch = M.EvalBatch(hyps, refs)
        assert abs(M.bleu(batch) - oracle_bleu(batch)) <= 1e-9
        assert abs(M.rouge_l(batch) - oracle_rouge_l(batch)) <= 1e-9

    corpus = C.gen_pretrain_corpus(42, 800)
    table = N.build_bigram_table(corpus)
    recount: dict = {}
    for x, y in corpus.pairs:
        for seq in (x, y):
            for a, b in zip(seq, seq[1:]):
                if a >= C.N_RESERVED and b >= C.N_RESERVED:
                    recount[(a, b)] = recount.get((a, b), 0) + 1
    assert table.counts == recount
    assert table.total == sum(recount.values())


# --------------------------------------------------------------------------
# criterion 10: bit-identical reruns


@pytest.mark.acceptance
def test_criterion_10_rerun_determinism(acceptance_assets, main_runs):
    backbone, _ = acceptance_assets
    task = remap_all_task()
    # the cheapest run of criterion 6 is prompt tuning; repeat seed 0
    again = tune_once(backbone, task, "prompt_tune", seed=0).record
    original = main_runs["prompt_tune"][0]
    assert again.canonical_bytes() == original.canonical_bytes()
