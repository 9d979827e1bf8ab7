"""Acceptance gate: one test per release criterion, each printing a single
PASS/FAIL line.

These are slower, end-to-end checks; the per-module suites hold the fast
unit tests. Criteria are verified against independent oracles wherever a
derived quantity is involved (finite differences for gradients, exhaustive
partition search for clustering, brute-force scoring for metrics).
"""

import itertools
import math
import time

import numpy as np
import pytest
from sklearn.metrics import adjusted_rand_score

from treecap import autodiff as ad
from treecap.autodiff import Tensor, backward, gradcheck
from treecap.lexicon import Vocabulary
from treecap.model import (CaptionModel, ModelConfig, ToyEncoderConfig,
                           schedule_from_counts)
from treecap.prototypes import ClusterConfig, build_tree, kmeans
from treecap.synthetic import (PlantedTreeSpec, ToyWorld, enumerate_dataset,
                               gen_planted_embeddings, gen_toy_dataset,
                               single_concept_dataset)
from treecap.training import (TrainConfig, evaluate_cider, greedy_accuracy,
                              lambda_lr, pad_batch, scst_loss, train)

from test_metrics import _oracle_bleu, _oracle_cider_d, _random_corpus


def _verdict(name: str, ok: bool, detail: str = "") -> bool:
    status = "PASS" if ok else "FAIL"
    suffix = f" ({detail})" if detail else ""
    print(f"CRITERION {name}: {status}{suffix}")
    return ok


# -- 1. gradient suite ---------------------------------------------------------------

def _primitive_cases(rng):
    """One gradcheck case per call: (params, loss_fn) covering every op."""
    def t(*shape):
        return ad.Parameter(rng.normal(size=shape))

    def pos(*shape):
        return ad.Parameter(np.abs(rng.normal(size=shape)) + 0.5)

    a, b = t(2, 3), t(2, 3)
    row = t(3)                      # broadcasts against (2, 3)
    m1, m2 = t(2, 4), t(4, 3)
    bm1, bm2 = t(2, 3, 4), t(2, 4, 5)
    p, q = pos(2, 3), pos(2, 3)
    gain, bias = t(4), t(4)
    x4 = t(2, 4)
    w1, b1, w2, b2 = t(4, 6), t(6), t(6, 4), t(4)
    table = t(5, 3)
    logits = t(2, 3, 5)
    ids = rng.integers(0, 5, size=(2, 3))
    ids_pad = ids.copy()
    ids_pad[0, -1] = 0
    ln_w = rng.normal(size=(2, 4))
    return [
        ("add", [a, row], lambda: ((a + row) * (a + row)).sum()),
        ("sub", [a, b], lambda: ((a - b) ** 2).sum()),
        ("mul", [a, b], lambda: (a * b).sum()),
        ("div", [a, q], lambda: (a / q).sum()),
        ("neg", [a], lambda: ((-a) * b.data).sum()),
        ("exp", [a], lambda: ad.exp(a * 0.3).sum()),
        ("log", [p], lambda: ad.log(p).sum()),
        ("power", [p], lambda: (p ** 1.7).sum()),
        ("sqrt", [p], lambda: ad.sqrt(p).sum()),
        ("gelu", [a], lambda: ad.gelu(a).sum()),
        ("matmul", [m1, m2], lambda: (m1 @ m2).sum()),
        ("matmul_batched", [bm1, bm2], lambda: ((bm1 @ bm2) ** 2).sum()),
        ("sum_axis", [a], lambda: (a.sum(axis=0) ** 2).sum()),
        ("reshape", [a], lambda: (a.reshape((3, 2)) * b.data.T).sum()),
        ("transpose", [bm1],
         lambda: (ad.transpose(bm1, (1, 0, 2)) ** 2).sum()),
        ("take_rows", [table],
         lambda: (ad.take_rows(table, np.array([0, 2, 2, 4])) ** 2).sum()),
        ("gather_last", [logits],
         lambda: ad.gather_last(ad.log_softmax(logits), ids).sum()),
        ("softmax", [a], lambda: (ad.softmax(a) * b.data).sum()),
        ("log_softmax", [a], lambda: (ad.log_softmax(a) * b.data).sum()),
        ("layer_norm", [x4, gain, bias],
         lambda: (ad.layer_norm(x4, gain, bias) * ln_w).sum()),
        ("feed_forward", [x4, w1, b1, w2, b2],
         lambda: (ad.feed_forward(x4, w1, b1, w2, b2) ** 2).sum()),
        ("cross_entropy", [logits], lambda: ad.cross_entropy(logits, ids)),
        ("cross_entropy_pad", [logits],
         lambda: ad.cross_entropy(logits, ids_pad, pad_id=0)),
    ]


def _composite_cases():
    rng = np.random.default_rng(0)
    tree = build_tree(rng.normal(size=(10, 5)), [4, 2], ClusterConfig(seed=0))
    cases = []

    # aggregation block stack (cross-modal attention into prototypes)
    m = CaptionModel(ModelConfig(vocab_size=7, d_model=8, heads=2, d_ff=12,
                                 decoder_layers=1, max_len=8,
                                 pa_schedule=[2, 1], seed=0), tree)
    grids = Tensor(rng.normal(size=(1, 4, 8)))
    w = rng.normal(size=(1, 4, 8))
    cases.append(("cma_block", list(m.params.values()),
                  lambda: (m.aggregate(grids) * w).sum()))

    # one decoder layer under teacher forcing
    m2 = CaptionModel(ModelConfig(vocab_size=7, d_model=8, heads=2, d_ff=12,
                                  decoder_layers=1, max_len=8, seed=1))
    enh = Tensor(rng.normal(size=(1, 3, 8)))
    ids = np.array([[1, 3, 4, 2]])
    cases.append(("decoder_layer", list(m2.params.values()),
                  lambda: ad.cross_entropy(m2.decoder_logits(enh, ids[:, :-1]),
                                           ids[:, 1:])))

    # full pipeline: patch encoder -> aggregation -> decoder -> XE
    m3 = CaptionModel(ModelConfig(vocab_size=7, d_model=8, heads=2, d_ff=12,
                                  decoder_layers=1, max_len=8,
                                  pa_schedule=[2, 1],
                                  encoder=ToyEncoderConfig(8, 4), seed=2),
                      tree)
    img = rng.normal(size=(8, 8, 3))

    def full_loss():
        enhanced = m3.aggregate(m3.encode_image(img))
        return ad.cross_entropy(m3.decoder_logits(enhanced, ids[:, :-1]),
                                ids[:, 1:])

    cases.append(("full_model", list(m3.params.values()), full_loss))
    return cases


def test_criterion_gradient_suite():
    t0 = time.monotonic()
    failures = []
    for instance in range(20):
        rng = np.random.default_rng(1000 + instance)
        for name, params, loss_fn in _primitive_cases(rng):
            if not gradcheck(loss_fn, params, eps=1e-5, tol=1e-4).ok():
                failures.append(f"{name}#{instance}")
    for name, params, loss_fn in _composite_cases():
        if not gradcheck(loss_fn, params, eps=1e-5, tol=1e-4).ok():
            failures.append(name)
    elapsed = time.monotonic() - t0
    ok = not failures and elapsed < 120.0
    assert _verdict("gradient-suite", ok,
                    f"{len(failures)} failures, {elapsed:.1f}s")


# -- 2. clustering oracle -----------------------------------------------------------

def _brute_force_two_partition(X):
    n = len(X)
    best = np.inf
    for bits in itertools.product([0, 1], repeat=n - 1):
        labels = np.array((0,) + bits)
        if labels.max() == 0:
            continue
        cost = 0.0
        for lab in (0, 1):
            pts = X[labels == lab]
            if len(pts):
                cost += ((pts - pts.mean(axis=0)) ** 2).sum()
        best = min(best, cost)
    return best


def test_criterion_clustering_oracle():
    recovered = 0
    for seed in range(10):
        spec = PlantedTreeSpec(n_super=8, n_sub_per_super=5,
                               concepts_per_sub=10, d_emb=16,
                               separation=8.0, seed=seed)
        X, sub, sup = gen_planted_embeddings(spec)
        tree = build_tree(X, [40, 8], ClusterConfig(seed=0))
        fine = tree.concept_members
        coarse = tree.levels[1].parent_of[fine]
        if (adjusted_rand_score(sub, fine) >= 0.99
                and adjusted_rand_score(sup, coarse) >= 0.99):
            recovered += 1

    exact = 0
    rng = np.random.default_rng(7)
    for _ in range(100):
        n = int(rng.integers(3, 9))
        d = int(rng.integers(1, 4))
        X = rng.normal(size=(n, d))
        centers, assign = kmeans(X, 2, ClusterConfig(seed=0, n_init=16))
        distortion = float(((X - centers[assign]) ** 2).sum())
        optimum = _brute_force_two_partition(X)
        if abs(distortion - optimum) <= 1e-9 * max(1.0, optimum):
            exact += 1

    ok = recovered >= 9 and exact == 100
    assert _verdict("clustering-oracle", ok,
                    f"hierarchy {recovered}/10 seeds, small-instance "
                    f"{exact}/100 exact")


# -- 3. SCST estimator properties -------------------------------------------------------

def test_criterion_scst_properties():
    def fresh():
        return CaptionModel(ModelConfig(vocab_size=7, d_model=8, heads=2,
                                        d_ff=12, decoder_layers=1, max_len=8,
                                        seed=3))

    rng = np.random.default_rng(0)
    feats = rng.normal(size=(1, 4, 8))
    seqs = [[3, 4, 2], [5, 2], [3, 2]]

    def grads(rewards):
        m = fresh()
        loss = scst_loss(m, feats, [seqs], [rewards])
        m.zero_grad()
        backward(loss)
        return {k: p.grad for k, p in m.params.items()}

    g_const = grads([0.4, 0.4, 0.4])
    const_norm = math.sqrt(sum(float((g * g).sum())
                               for g in g_const.values()))

    g1 = grads([0.2, 0.9, 0.5])
    g2 = grads([0.2 + 3.0, 0.9 + 3.0, 0.5 + 3.0])
    shift = max(float(np.abs(g1[k] - g2[k]).max()) for k in g1)

    # k=2: compare the surrogate loss against a hand-assembled expression
    m = fresh()
    pair, rewards = [[3, 4, 2], [5, 2]], [0.9, 0.1]
    loss = scst_loss(m, feats, [pair], [rewards]).item()

    def seq_logp(seq):
        ids = pad_batch([seq])
        ids[0, len(seq) + 1] = 0
        with ad.no_grad():
            steps = m.generation_log_probs(m.aggregate(Tensor(feats)),
                                           ids).data[0]
        return float(steps[ids[0, 1:] != 0].sum())

    b = sum(rewards) / 2
    hand = sum(-(r - b) / 2 * seq_logp(s) for s, r in zip(pair, rewards))

    ok = (const_norm <= 1e-12 and shift <= 1e-12
          and abs(loss - hand) <= 1e-10)
    assert _verdict("scst-properties", ok,
                    f"const-norm {const_norm:.1e}, shift {shift:.1e}, "
                    f"k2-diff {abs(loss - hand):.1e}")


# -- 4. learning-rate schedule ------------------------------------------------------------

def test_criterion_lr_schedule():
    ok = True
    for base in (4e-4, 4e-5):
        for n in range(1, 41):
            expect = (n / 4.0 * base if n <= 3
                      else base if n <= 10
                      else 0.2 * base if n <= 12
                      else 0.04 * base)
            if not math.isclose(lambda_lr(n, base), expect, rel_tol=0,
                                abs_tol=1e-18):
                ok = False
    assert _verdict("lr-schedule", ok)


# -- 5. metric oracle ------------------------------------------------------------------------

def test_criterion_metric_oracle():
    from treecap.metrics import bleu, build_idf, cider_d

    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(3000 + seed)
        cands, refs = _random_corpus(rng)
        idf = build_idf(refs)
        for c, r in zip(cands, refs):
            worst = max(worst, abs(cider_d(c, r, idf)
                                   - _oracle_cider_d(c, r, refs)))
        worst = max(worst, abs(bleu(cands, refs) - _oracle_bleu(cands, refs)))

    refs1 = [[["a", "b", "c"]]]
    idf1 = build_idf(refs1)
    degenerate = cider_d(["a", "b", "c"], refs1[0], idf1)

    ok = worst <= 1e-9 and degenerate == 0.0
    assert _verdict("metric-oracle", ok,
                    f"max deviation {worst:.2e}, "
                    f"single-image cider {degenerate}")


# -- 6. toy end-to-end ---------------------------------------------------------------------------

def _e2e_run():
    world = ToyWorld(3, 2, feature_dim=64, noise_sigma=0.0, n_templates=1,
                     seed=0)
    train_set = enumerate_dataset(world)
    val_set = gen_toy_dataset(world, 1, 16)[1]
    vocab = Vocabulary.build([c for s in train_set for c in s.captions],
                             min_occurrences=0)
    tree = build_tree(world.concept_embeddings, [6, 3], ClusterConfig(seed=0),
                      concept_tokens=world.concepts)
    schedule = schedule_from_counts([3, 6], tree)
    model = CaptionModel(ModelConfig(vocab_size=len(vocab), d_model=64,
                                     heads=8, d_ff=128, decoder_layers=2,
                                     max_len=12, pa_schedule=schedule, seed=0),
                         tree)
    cfg = TrainConfig(xe_epochs=200, xe_batch_size=2, base_lr_other=1e-3,
                      patience=10_000, seed=0)
    train(model, train_set, val_set, vocab, cfg, stages=("xe",))
    acc = greedy_accuracy(model, val_set, vocab)
    return model, acc


def test_criterion_toy_end_to_end():
    t0 = time.monotonic()
    model_a, acc_a = _e2e_run()
    model_b, acc_b = _e2e_run()
    elapsed = time.monotonic() - t0
    identical = all(np.array_equal(p.data, model_b.params[k].data)
                    for k, p in model_a.params.items())
    ok = acc_a >= 0.99 and identical and elapsed / 2 < 600.0
    assert _verdict("toy-end-to-end", ok,
                    f"accuracy {acc_a:.3f}, rerun identical {identical}, "
                    f"{elapsed / 2:.0f}s per run")


# -- 7. ablation orderings -----------------------------------------------------------------------

def _sign_test_p(wins: int, trials: int) -> float:
    """One-sided binomial tail P(X >= wins) under p=1/2; ties count against."""
    return sum(math.comb(trials, i) for i in range(wins, trials + 1)) / 2 ** trials


def _ablation_scores():
    world = ToyWorld(4, 3, feature_dim=64, noise_sigma=0.0, n_templates=1,
                     seed=0)
    full = enumerate_dataset(world)
    idx = np.random.default_rng(7).permutation(len(full))
    train_set = [full[i] for i in idx[:60]]
    holdout = [full[i] for i in idx[60:]]
    vocab = Vocabulary.build([c for s in full for c in s.captions],
                             min_occurrences=0)
    tree = build_tree(world.concept_embeddings, [12, 4], ClusterConfig(seed=0),
                      concept_tokens=world.concepts)
    arms = {"c2f": [4, 12], "no_pa": [], "equal": [4, 4]}
    scores = {name: [] for name in arms}
    for seed in range(5):
        for name, counts in arms.items():
            schedule = schedule_from_counts(counts, tree) if counts else []
            model = CaptionModel(
                ModelConfig(vocab_size=len(vocab), d_model=64, heads=8,
                            d_ff=128, decoder_layers=2, max_len=12,
                            pa_schedule=schedule, prototype_mode="frozen",
                            seed=seed),
                tree if schedule else None)
            cfg = TrainConfig(xe_epochs=80, xe_batch_size=2,
                              base_lr_other=1e-3, patience=10_000, seed=seed)
            # per-epoch validation only sees a sliver of the holdout (it is
            # just for logging); the full holdout is scored once at the end
            train(model, train_set, holdout[:4], vocab, cfg, stages=("xe",))
            scores[name].append(evaluate_cider(model, holdout, vocab))
    return scores


@pytest.fixture(scope="module")
def ablation_scores():
    return _ablation_scores()


def test_criterion_ablation_pa_beats_none(ablation_scores):
    s = ablation_scores
    wins = sum(a > b for a, b in zip(s["c2f"], s["no_pa"]))
    p = _sign_test_p(wins, 5)
    ok = p <= 0.05
    assert _verdict("ablation-pa-vs-none", ok,
                    f"wins {wins}/5, p {p:.3f}, "
                    f"c2f {np.mean(s['c2f']):.3f} vs "
                    f"no-pa {np.mean(s['no_pa']):.3f}")


def test_criterion_ablation_coarse_to_fine_beats_equal(ablation_scores):
    s = ablation_scores
    wins = sum(a > b for a, b in zip(s["c2f"], s["equal"]))
    p = _sign_test_p(wins, 5)
    ok = p <= 0.05
    assert _verdict("ablation-c2f-vs-equal", ok,
                    f"wins {wins}/5, p {p:.3f}, "
                    f"c2f {np.mean(s['c2f']):.3f} vs "
                    f"equal {np.mean(s['equal']):.3f}")


# -- 8. interpretability --------------------------------------------------------------------------

def test_criterion_interpretability():
    world = ToyWorld(n_groups=10, concepts_per_group=1, feature_dim=64,
                     noise_sigma=0.5, n_templates=1, seed=0,
                     cells_per_concept=2, grid_h=5, grid_w=5)
    train_set, val_set = single_concept_dataset(world, 24)
    vocab = Vocabulary.build([c for s in train_set for c in s.captions],
                             min_occurrences=0)
    tree = build_tree(world.concept_embeddings, [10, 4], ClusterConfig(seed=0),
                      concept_tokens=world.concepts)
    schedule = schedule_from_counts([4, 10], tree)
    model = CaptionModel(ModelConfig(vocab_size=len(vocab), d_model=64,
                                     heads=8, d_ff=128, decoder_layers=1,
                                     max_len=12, pa_schedule=schedule, seed=0),
                         tree)
    cfg = TrainConfig(xe_epochs=60, xe_batch_size=2, base_lr_other=1e-3,
                      patience=10_000, seed=0)
    train(model, train_set, val_set, vocab, cfg, stages=("xe",))

    passed = 0
    for sample in val_set:
        ids = pad_batch([vocab.encode(sample.captions[0])])
        with ad.no_grad():
            enhanced = model.aggregate(Tensor(sample.features[None]))
            model.decoder_logits(enhanced, ids[:, :-1],
                                 collect_attention=True)
        attn = model.last_cross_attention[0]
        words = sample.captions[0].split()
        sample_ok = True
        for j, word in enumerate(words, start=1):
            if word not in world.concepts:
                continue
            c = world.concepts.index(word)
            mass = float(attn[j - 1, world.cell_of[c]].sum())
            if mass < 0.5:
                sample_ok = False
        passed += sample_ok
    frac = passed / len(val_set)
    ok = frac >= 0.8
    assert _verdict("interpretability", ok,
                    f"{passed}/{len(val_set)} samples with >=50% mass")
