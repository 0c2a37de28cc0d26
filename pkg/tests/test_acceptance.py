"""Acceptance criteria 1-9, one PASS/FAIL line each (see the terminal summary).

Criterion 7 trains twelve desk-scale models on the bundled synthetic corpus
and dominates the runtime; criterion 9 reuses one of those runs.
"""

import math
import statistics
import time

import numpy as np
import pytest

from ecoc_lm.codebook import (build_codebook, codeword_of_integer, decode, encode, hamming,
                              integer_of_codeword, random_codebook, span_log_mass,
                              span_max_logprob, token_distribution)
from ecoc_lm.config import RunConfig
from ecoc_lm.corpus import bundled
from ecoc_lm.network import LanguageModel, finite_difference_check, stacked_targets
from ecoc_lm.sampling import (COMPATIBLE, InputMixer, SamplerConfig, anneal_temperature,
                              binary_concrete_sample, gumbel_softmax_sample, MixtureSchedule,
                              schedule_value)
from ecoc_lm.training import read_metrics, run_train

from oracles import cumsum_floor_boundaries

SEEDS = (0, 1, 2)
# identical budget for every arm of criterion 7
DESK = dict(hidden=64, epochs=6, patience=0)


def brute_span(probs, lo, hi, gray):
    """Enumerate every integer in [lo, hi): (max log-prob, log total mass)."""
    n = len(probs)
    p = np.clip(probs, 1e-12, 1 - 1e-12)
    v = np.arange(lo, hi, dtype=np.int64)
    if gray:
        v = v ^ (v >> 1)
    bits = (v[:, None] >> np.arange(n - 1, -1, -1)) & 1
    scores = bits @ np.log(p) + (1 - bits) @ np.log1p(-p)
    top = scores.max()
    return top, top + math.log(np.exp(scores - top).sum())


def test_criterion_1_codebook_invariants(acceptance):
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    failures = []
    for case in range(50):
        vocab = int(rng.integers(2, 5001))
        n_bits = int(rng.integers(max(1, math.ceil(math.log2(vocab))), 65))
        mode = ("binary", "gray")[case % 2]
        weights = rng.random(vocab) + 1e-3 if case % 3 else None
        cb = (build_codebook(vocab, n_bits, span_weights=weights, mapping_mode=mode) if case % 3
              else random_codebook(vocab, n_bits, seed=case, mapping_mode=mode))
        b = cb.boundaries
        ok = b[0] == 0 and b[-1] == 1 << n_bits and all(x < y for x, y in zip(b, b[1:]))
        if weights is not None:
            want = cumsum_floor_boundaries(weights, n_bits)
            if all(x < y for x, y in zip(want, want[1:])):  # no repair needed
                ok &= list(b) == want
        for tok in range(vocab):
            lo, hi = cb.span(tok)
            ok &= decode(cb, encode(cb, tok)) == tok
            ok &= decode(cb, codeword_of_integer(hi - 1, n_bits, mode)) == tok
            ok &= integer_of_codeword(encode(cb, tok), mode) == lo
        if mode == "gray":
            for v in rng.integers(0, (1 << n_bits) - 1, 200, dtype=np.uint64).tolist():
                ok &= hamming(codeword_of_integer(v, n_bits, "gray"),
                              codeword_of_integer(v + 1, n_bits, "gray")) == 1
        if not ok:
            failures.append((vocab, n_bits, mode))
    seconds = time.perf_counter() - start
    ok = acceptance("1 codebook invariants", not failures and seconds < 10,
                    f"50 configs, failures={failures}", seconds)
    assert ok


def test_criterion_2_digit_dp_matches_enumeration(acceptance):
    rng = np.random.default_rng(202)
    start = time.perf_counter()
    worst = 0.0
    for case in range(200):
        n = int(rng.integers(1, 17))
        probs = rng.random(n)
        if case % 4 == 0:
            probs = np.where(rng.random(n) < 0.3, rng.choice([1e-15, 1 - 1e-15], n), probs)
        lo = int(rng.integers(0, 1 << n))
        hi = int(rng.integers(lo + 1, (1 << n) + 1))
        gray = bool(case % 2)
        mode = "gray" if gray else "binary"
        want_max, want_mass = brute_span(probs, lo, hi, gray)
        got = span_max_logprob(probs, (lo, hi), mode)
        worst = max(worst, abs(got.log_score - want_max),
                    abs(span_log_mass(probs, (lo, hi), mode) - want_mass))
    seconds = time.perf_counter() - start
    ok = acceptance("2 digit DP vs brute force", worst <= 1e-9 and seconds < 10,
                    f"200 cases, max |error|={worst:.2e}", seconds)
    assert ok


def test_criterion_3_normalization(acceptance):
    rng = np.random.default_rng(303)
    start = time.perf_counter()
    worst = 0.0
    for case in range(100):
        vocab = int(rng.integers(2, 300))
        n_bits = int(rng.integers(math.ceil(math.log2(vocab)), 65))
        cb = random_codebook(vocab, n_bits, seed=case, mapping_mode=("binary", "gray")[case % 2])
        probs = rng.random(n_bits)
        if case % 5 == 0:
            probs = rng.choice([0.0, 1.0, 0.5, 1e-9], n_bits)
        total = math.fsum(np.exp(token_distribution(probs, cb, "sum")))
        worst = max(worst, abs(total - 1.0))
    seconds = time.perf_counter() - start
    ok = acceptance("3 normalization", worst <= 1e-9 and seconds < 5,
                    f"100 cases, max |sum - 1|={worst:.2e}", seconds)
    assert ok


def toy_model(head):
    cb = random_codebook(8, 6, seed=1) if head == "ecoc" else None
    return LanguageModel(8, 6, 2, head, cb, dropout=0.2, seed=0, init_scale=0.5)


def test_criterion_4_gradient_checks(acceptance):
    rng = np.random.default_rng(404)
    inputs, targets = rng.integers(0, 8, (3, 5)), rng.integers(0, 8, (3, 5))
    start = time.perf_counter()
    errors = {}
    for name, head, strategy in [("ecoc", "ecoc", None), ("softmax", "softmax", None),
                                 ("hierarchical", "hierarchical", None),
                                 ("binary_concrete", "ecoc", "binary_concrete")]:
        m = toy_model(head)
        masks = m.sample_masks(3, np.random.default_rng(5))

        def loss():
            fn = None
            if strategy:
                mixer = InputMixer(SamplerConfig(strategy, tau_max=1.0, delta=1e-3), m, 10, 10)
                fn = mixer.window(inputs, np.random.default_rng(9))
            out, _, _ = m.unroll(inputs, m.init_state(3), masks, fn)
            return m.loss(out, stacked_targets(targets))

        errors[name] = finite_difference_check(m.params, loss, n_coords=80)
    seconds = time.perf_counter() - start
    worst = max(errors.values())
    detail = " ".join(f"{k}={v:.1e}" for k, v in errors.items())
    ok = acceptance("4 gradient checks", worst < 1e-4 and seconds < 60, detail, seconds)
    assert ok


def test_criterion_5_sampling_statistics(acceptance):
    rng = np.random.default_rng(505)
    start = time.perf_counter()
    worst = 0.0
    for logit_alpha, tau in [(-1.5, 0.1), (0.0, 0.5), (0.7, 1.0), (2.0, 2.5)]:
        z = binary_concrete_sample(np.full(10_000, logit_alpha), tau, rng)
        worst = max(worst, abs(np.mean(z > 0.5) - 1 / (1 + math.exp(-logit_alpha))))
    for logits in ([0.5, -0.3, 1.1], [2.0, 0.0, 0.0, -1.0, 1.0]):
        logits = np.array(logits)
        draws = gumbel_softmax_sample(np.tile(logits, (10_000, 1)), 0.05, rng)
        freq = np.bincount(draws.argmax(axis=1), minlength=len(logits)) / 10_000
        want = np.exp(logits) / np.exp(logits).sum()
        worst = max(worst, np.abs(freq - want).max())
    seconds = time.perf_counter() - start
    ok = acceptance("5 sampling statistics", worst <= 0.02 and seconds < 30,
                    f"max deviation={worst:.4f} over 10^4 draws", seconds)
    assert ok


def test_criterion_6_schedule_endpoints(acceptance):
    start = time.perf_counter()
    ok = True
    for total in (10, 40, 100):
        ok &= abs(anneal_temperature(0, total) - 0.01) <= 0.01
        ok &= abs(anneal_temperature(total, total) - 2.5) <= 0.01
        grid = np.linspace(0, total, 100)
        for tau_max, delta in [(0.25, total / 10), (1.0, 0.5), (0.5, total / 3)]:
            vals = [schedule_value(MixtureSchedule(tau_max, delta, total), e) for e in grid]
            ok &= bool(np.all(np.diff(vals) >= 0))
        ok &= bool(np.all(np.diff([anneal_temperature(e, total) for e in grid]) >= 0))
    seconds = time.perf_counter() - start
    ok = acceptance("6 schedule endpoints", ok and seconds < 1,
                    f"T(0)={anneal_temperature(0, 40):.4f} T(N)={anneal_temperature(40, 40):.4f}",
                    seconds)
    assert ok


# criterion 7: desk-scale training

ARMS = {
    "softmax": dict(head="softmax"),
    "ecoc_embedding": dict(head="ecoc", ordering="embedding"),
    "ecoc_random": dict(head="ecoc", ordering="random"),
    "ecoc_clvms": dict(head="ecoc", ordering="embedding", strategy="clvms", tau_max=0.25),
}


def desk_config(root, arm, seed, tag=""):
    return RunConfig(**DESK, **ARMS[arm], seed=seed, output_dir=str(root / f"{arm}-s{seed}{tag}"))


@pytest.fixture(scope="module")
def desk_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    runs, start = {}, time.perf_counter()
    for arm in ARMS:
        for seed in SEEDS:
            result = run_train(desk_config(root, arm, seed), log=lambda _: None)
            valid = [r for r in result.records if r["split"] == "valid"]
            train = [r for r in result.records if r["split"] == "train"]
            runs[arm, seed] = dict(best=result.best_valid_perplexity, run_dir=result.run_dir,
                                   exposure=float(np.mean([r["exposure"] for r in train])),
                                   final=valid[-1]["perplexity"])
    return dict(root=root, runs=runs, seconds=time.perf_counter() - start)


def median_best(desk_runs, arm):
    return statistics.median(desk_runs["runs"][arm, s]["best"] for s in SEEDS)


def test_criterion_7a_ecoc_near_softmax(acceptance, desk_runs):
    sm, ec = median_best(desk_runs, "softmax"), median_best(desk_runs, "ecoc_embedding")
    ratio = ec / sm
    ok = acceptance("7a ecoc within 15% of softmax", ratio <= 1.15,
                    f"median valid ppl softmax={sm:.2f} ecoc={ec:.2f} ratio={ratio:.3f}",
                    desk_runs["seconds"])
    assert ok


def test_criterion_7b_embedding_beats_random(acceptance, desk_runs):
    emb, rnd = median_best(desk_runs, "ecoc_embedding"), median_best(desk_runs, "ecoc_random")
    ok = acceptance("7b embedding <= random", emb <= rnd,
                    f"median valid ppl embedding={emb:.2f} random={rnd:.2f}", 0.0)
    assert ok


def test_criterion_7c_clvms_no_degradation(acceptance, desk_runs):
    tf, cl = median_best(desk_runs, "ecoc_embedding"), median_best(desk_runs, "ecoc_clvms")
    runs = desk_runs["runs"]
    exposure_up = all(runs["ecoc_clvms", s]["exposure"] > runs["ecoc_embedding", s]["exposure"]
                      for s in SEEDS)
    ok = acceptance("7c clvms within 5% of tf", cl <= 1.05 * tf and exposure_up,
                    f"median valid ppl tf={tf:.2f} clvms={cl:.2f} ratio={cl / tf:.3f} "
                    f"exposure={statistics.median(runs['ecoc_clvms', s]['exposure'] for s in SEEDS):.4f}",
                    0.0)
    assert ok


def test_criterion_8_degeneracy(acceptance, tmp_path):
    toy = dict(train=str(bundled("toy.train.txt")), valid=str(bundled("toy.valid.txt")),
               test=str(bundled("toy.valid.txt")), hidden=16, bptt=10, batch_size=4,
               eval_batch_size=4, epochs=2, optimizer="adam", lr=0.01, clip=1.0)
    start = time.perf_counter()
    mismatched = []
    for head in ("ecoc", "softmax", "hierarchical"):
        base = run_train(RunConfig(**toy, head=head, output_dir=str(tmp_path / f"{head}-tf")),
                         log=lambda _: None)
        want = [r["loss"] for r in base.records]
        for strategy in sorted(s for s, heads in COMPATIBLE.items()
                               if head in heads and s != "teacher_forcing"):
            run = run_train(RunConfig(**toy, head=head, strategy=strategy, tau_max=0.0,
                                      output_dir=str(tmp_path / f"{head}-{strategy}")),
                            log=lambda _: None)
            same = ([r["loss"] for r in run.records] == want and
                    (run.run_dir / "best.ckpt").read_bytes() ==
                    (base.run_dir / "best.ckpt").read_bytes())
            if not same:
                mismatched.append(f"{head}/{strategy}")
    seconds = time.perf_counter() - start
    ok = acceptance("8 degeneracy", not mismatched and seconds < 300,
                    f"mismatched={mismatched or 'none'}", seconds)
    assert ok


def test_criterion_9_reproducibility(acceptance, desk_runs):
    # rerun the sampler-heavy arm and compare with the first run
    start = time.perf_counter()
    first = desk_runs["runs"]["ecoc_clvms", 0]["run_dir"]
    second = run_train(desk_config(desk_runs["root"], "ecoc_clvms", 0, "-again"),
                       log=lambda _: None).run_dir
    ckpts = sorted(p.relative_to(first) for p in first.rglob("*.ckpt"))
    same_ckpt = all((first / p).read_bytes() == (second / p).read_bytes() for p in ckpts)

    def metrics(run):
        return [{k: v for k, v in r.items() if k != "seconds"}
                for r in read_metrics(run / "metrics.txt")]

    same_metrics = metrics(first) == metrics(second)
    ok = acceptance("9 reproducibility", same_ckpt and same_metrics and len(ckpts) > 1,
                    f"{len(ckpts)} checkpoints identical={same_ckpt} metrics identical={same_metrics}",
                    time.perf_counter() - start)
    assert ok
