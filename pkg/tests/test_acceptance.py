"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The lines are printed by the tests and repeated in an "acceptance criteria"
section at the end of the pytest run.
"""

import csv
import itertools
import math
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from oracles import path_sums, pool_safe, random_frame_probs, recognizer_gradcheck, relu_safe
from scenetext import ctc, nn
from scenetext.cli import run_e2e
from scenetext.dataset import WORDS, SynthConfig, synth_generate, synth_word_crops, write_image
from scenetext.detector import DetectConfig, detect, pixel_accuracy
from scenetext.evaluation import (
    e2e_metrics,
    f_measure,
    localization_eval,
    localization_metrics,
    match_detections,
)
from scenetext.geometry import QuadBox
from scenetext.lexicon import CorrectionPolicy, Lexicon, bk_build, bk_query, correct, edit_distance
from scenetext.recognizer import DecodeConfig, RecognizerTrainConfig, train_recognizer, word_accuracy

DATA = Path(__file__).parent / "data"


# 1 ---------------------------------------------------------------------------


def test_01_published_f_measures(acceptance):
    with open(DATA / "published_scores.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    worst, bad = 0.0, []
    for row in rows:
        p, r, f_pub = (float(row[k]) for k in ("precision", "recall", "f_measure"))
        dev = abs(f_measure(p, r) - f_pub)
        worst = max(worst, dev)
        if dev > 5e-4:
            bad.append(f"{row['method']} {row['setting']}".strip())
    n_loc = sum(r["table"] == "localization" for r in rows)
    acceptance(1, not bad and n_loc == 9 and len(rows) == 30,
               f"f_measure reproduces {len(rows) - len(bad)}/{len(rows)} published rows "
               f"(9 localization, 21 end-to-end), max deviation {worst:.2e} <= 5e-4"
               + (f"; off: {bad}" if bad else ""))


# 2 ---------------------------------------------------------------------------


def test_02_ctc_matches_path_enumeration(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    targets = [seq for n in range(4) for seq in itertools.product((1, 2, 3), repeat=n)]
    worst, checks = 0.0, 0
    for t_len in range(1, 7):
        for _ in range(10):
            probs = random_frame_probs(rng, t_len, 4)
            sums = path_sums(probs)
            for target in targets:
                loss, _, _ = ctc.ctc_loss(probs, target)
                worst = max(worst, abs(math.exp(-loss) - sums.get(target, 0.0)))
                checks += 1
    elapsed = time.perf_counter() - t0
    acceptance(2, worst <= 1e-10 and elapsed < 30,
               f"exp(-ctc_loss) vs brute-force path sum on {checks} (matrix, target) pairs, T<=6, "
               f"3-char alphabet, |target|<=3: max abs error {worst:.1e} <= 1e-10 in {elapsed:.1f}s")


# 3 ---------------------------------------------------------------------------


def test_03_ctc_probabilities_sum_to_one(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    worst, n = 0.0, 0
    for t_len in range(1, 5):
        for k in (2, 3):
            for _ in range(10):
                probs = random_frame_probs(rng, t_len, k, peaked=bool(rng.integers(2)))
                total = 0.0
                for length in range(t_len + 1):
                    for target in itertools.product(range(1, k), repeat=length):
                        total += math.exp(-ctc.ctc_loss(probs, target)[0])
                worst = max(worst, abs(total - 1.0))
                n += 1
    elapsed = time.perf_counter() - t0
    acceptance(3, worst <= 1e-9 and elapsed < 10,
               f"sum over all label sequences of CTC probability, {n} matrices with T<=4, K<=3: "
               f"max |sum - 1| = {worst:.1e} <= 1e-9 in {elapsed:.1f}s")


# 4 ---------------------------------------------------------------------------


def _layer_cases():
    """(name, layer factory, input factory); factories take a seeded rng."""
    return [
        ("Linear", lambda r: nn.Linear(5, 4, rng=r), lambda r: r.standard_normal((3, 5))),
        ("Conv2d 3x3 same", lambda r: nn.Conv2d(2, 3, 3, rng=r), lambda r: r.standard_normal((2, 2, 6, 5))),
        ("Conv2d stride 2", lambda r: nn.Conv2d(2, 3, 3, stride=2, pad=1, rng=r),
         lambda r: r.standard_normal((1, 2, 7, 7))),
        ("Conv2d 1x3 collapse", lambda r: nn.Conv2d(3, 2, (2, 3), pad=(0, 1), rng=r),
         lambda r: r.standard_normal((2, 3, 2, 5))),
        ("ReLU", lambda r: nn.ReLU(), lambda r: relu_safe(r, (3, 7))),
        ("Sigmoid", lambda r: nn.Sigmoid(), lambda r: 3 * r.standard_normal((3, 7))),
        ("Tanh", lambda r: nn.Tanh(), lambda r: 2 * r.standard_normal((3, 7))),
        ("MaxPool2d 2x2", lambda r: nn.MaxPool2d(2), lambda r: pool_safe(r, (2, 2, 4, 6))),
        ("MaxPool2d 2x1", lambda r: nn.MaxPool2d((2, 1)), lambda r: pool_safe(r, (1, 3, 4, 5))),
        ("Upsample2d", lambda r: nn.Upsample2d(2), lambda r: r.standard_normal((1, 2, 3, 4))),
        ("Softmax", lambda r: nn.Softmax(), lambda r: r.standard_normal((4, 6))),
        ("SoftmaxCrossEntropy", lambda r: nn.SoftmaxCrossEntropy(r.integers(0, 6, size=4)),
         lambda r: r.standard_normal((4, 6))),
        ("LSTM", lambda r: nn.LSTM(3, 4, rng=r), lambda r: r.standard_normal((5, 2, 3))),
        ("LSTM reverse", lambda r: nn.LSTM(3, 4, reverse=True, rng=r), lambda r: r.standard_normal((5, 2, 3))),
        ("BiLSTM", lambda r: nn.BiLSTM(3, 4, rng=r), lambda r: r.standard_normal((4, 2, 3))),
    ]


def _with_random_biases(layer, rng):
    if not layer.params:
        return layer
    return layer.with_params({k: v + 0.1 * rng.standard_normal(v.shape) for k, v in layer.params.items()})


def _lstm_step_check(seed):
    rng = np.random.default_rng(seed)
    layer = _with_random_biases(nn.LSTM(3, 5, rng=rng), rng)
    arrays = {"x": rng.standard_normal(3), "h": rng.standard_normal(5), "c": rng.standard_normal(5),
              **layer.params}
    rh, rc = rng.standard_normal(5), rng.standard_normal(5)

    def loss(a):
        h, c, _ = nn.lstm_step(a["x"], a["h"], a["c"], {k: a[k] for k in ("wx", "wh", "b")})
        return np.concatenate([rh * h, rc * c])

    _, _, cache = nn.lstm_step(arrays["x"], arrays["h"], arrays["c"], layer.params)
    dx, dh, dc, grads = nn.lstm_step_backward(cache, rh, rc)
    return nn.check_gradients(loss, arrays, {"x": dx, "h": dh, "c": dc, **grads}, eps=1e-4)


def test_04_gradient_suite(acceptance):
    t0 = time.perf_counter()
    seeds = 20
    worst = {}
    for name, make_layer, make_input in _layer_cases():
        errs = []
        for seed in range(seeds):
            rng = np.random.default_rng(1000 + seed)
            layer = _with_random_biases(make_layer(rng), rng)
            errs.append(nn.finite_diff_check(layer, make_input(rng), eps=1e-4, seed=seed).max_rel_err)
        worst[name] = (max(errs), len(errs))
    step_errs = [_lstm_step_check(seed).max_rel_err for seed in range(seeds)]
    worst["lstm_step"] = (max(step_errs), len(step_errs))

    rec_errs, redrawn, seed = [], 0, 0
    while len(rec_errs) < seeds:
        report, crossed = recognizer_gradcheck(seed, eps=1e-4)
        seed += 1
        if crossed:
            redrawn += 1
            continue
        rec_errs.append(report.max_rel_err)
    worst["full recognizer"] = (max(rec_errs), len(rec_errs))
    elapsed = time.perf_counter() - t0

    overall = max(e for e, _ in worst.values())
    ok = overall <= 1e-4 and all(n >= 20 for _, n in worst.values()) and elapsed < 300
    for name, (e, n) in worst.items():
        print(f"    {name:22s} seeds={n:2d} max_rel_err={e:.2e}")
    acceptance(4, ok, f"{len(worst)} gradient checks x >=20 seeds (eps 1e-4): max relative error "
                      f"{overall:.2e} <= 1e-4; full recognizer T<=6, {redrawn} instance(s) redrawn "
                      f"because a probe crossed a ReLU/max-pool switch; {elapsed:.0f}s < 300s")


# 5 ---------------------------------------------------------------------------


@pytest.mark.slow
def test_05_recognizer_overfit(acceptance):
    t0 = time.perf_counter()
    results = []
    for seed in (0, 1, 2):
        data = synth_word_crops(20, seed=seed)
        model = train_recognizer(data, RecognizerTrainConfig(epochs=2000, seed=seed))
        results.append((seed, word_accuracy(model, data), len(model.history) - 1))
    elapsed = time.perf_counter() - t0
    ok = all(acc == 1.0 and ep <= 2000 for _, acc, ep in results) and elapsed < 1200
    detail = ", ".join(f"seed {s}: C.R.W. {acc:.2f} after {ep} epochs" for s, acc, ep in results)
    acceptance(5, ok, f"20 synthetic word images, {detail}; {elapsed:.0f}s < 1200s")


# 6 ---------------------------------------------------------------------------


@pytest.mark.slow
def test_06_detector_overfit(acceptance, synth_scenes, trained_detector):
    model, train_time = trained_detector
    accs = [pixel_accuracy(model, img, mask) for img, _, mask, _ in synth_scenes]
    gts = {ann.image_id: ann.boxes for _, ann, _, _ in synth_scenes}
    dets = {ann.image_id: detect(img, model) for img, ann, _, _ in synth_scenes}
    rep = localization_eval(gts, dets, iou_thresh=0.5)
    ok = min(accs) >= 0.98 and rep.precision == 1.0 and rep.recall == 1.0 and train_time < 1200
    acceptance(6, ok, f"10 synthetic 64x64 scenes: min pixel accuracy {min(accs):.4f} >= 0.98, "
                      f"localization P={rep.precision:.3f} R={rep.recall:.3f} at IoU 0.5 "
                      f"({rep.matched}/{rep.counted_gt} words); training {train_time:.0f}s < 1200s")


# 7 ---------------------------------------------------------------------------


def _distractors(rng, n):
    letters = list("abcdefghijklmnopqrstuvwxyz")
    return ["".join(rng.choice(letters, size=int(rng.integers(3, 7)))) for _ in range(n)]


@pytest.mark.slow
def test_07_end_to_end(acceptance, tmp_path, synth_scenes, trained_detector, e2e_recognizer):
    det, _ = trained_detector
    rec, _, rec_time = e2e_recognizer
    images = {}
    for img, ann, _, _ in synth_scenes:
        path = tmp_path / f"{ann.image_id}.pgm"
        write_image(path, img)
        images[ann.image_id] = path
    gts = {ann.image_id: ann.boxes for _, ann, _, _ in synth_scenes}
    rng = np.random.default_rng(7)
    t0 = time.perf_counter()

    # strong: each image gets its own words plus distractors, shuffled
    strong = {}
    for image_id, boxes in gts.items():
        words = [b.transcription for b in boxes] + list(rng.choice(WORDS, size=10, replace=False))
        strong[image_id] = Lexicon(list(rng.permutation(words)))
    run = run_e2e(images, det, rec, DetectConfig(), DecodeConfig(), "strong", strong, CorrectionPolicy())
    strong_rep = e2e_metrics(gts, {a.image_id: a.boxes for a in run.annotations}, "strong")

    # generic: no per-image list, one vocabulary padded with random distractors
    generic = Lexicon(list(WORDS) + _distractors(rng, 500))
    run_g = run_e2e(images, det, rec, DetectConfig(), DecodeConfig(), "generic", generic, CorrectionPolicy())
    generic_rep = e2e_metrics(gts, {a.image_id: a.boxes for a in run_g.annotations}, "generic")
    elapsed = time.perf_counter() - t0

    ok = (not run.failures and not run_g.failures and strong_rep.f_measure == 1.0
          and generic_rep.f_measure >= 0.8 and elapsed < 300)
    acceptance(7, ok, f"synthetic e2e: strong per-image lexicons F={strong_rep.f_measure:.3f} (= 1.0), "
                      f"generic {len(generic)}-word vocabulary F={generic_rep.f_measure:.3f} (>= 0.8); "
                      f"pipeline {elapsed:.1f}s < 300s beyond training (recognizer {rec_time:.0f}s)")


# 8 ---------------------------------------------------------------------------


def test_08_beam_matches_exhaustive(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(8)
    n, wrong = 0, 0
    for t_len in range(1, 6):
        for k in range(2, 5):
            for i in range(10):
                probs = random_frame_probs(rng, t_len, k, peaked=bool(i % 2))
                sums = path_sums(probs)
                best = max(sums, key=sums.get)
                top = ctc.beam_decode(probs, beam_width=64)[0]
                n += 1
                wrong += top.labels != best or abs(math.exp(top.score) - sums[best]) > 1e-12
    fixture = np.array([[0.6, 0.4], [0.6, 0.4]])
    beam = ctc.beam_decode(fixture, beam_width=64)[0]
    greedy = ctc.greedy_decode(fixture)
    fixture_ok = beam.labels == (1,) and abs(math.exp(beam.score) - 0.64) < 1e-12 and greedy.labels == ()
    elapsed = time.perf_counter() - t0
    acceptance(8, wrong == 0 and fixture_ok and elapsed < 30,
               f"beam (width 64) top-1 equals exhaustive argmax on {n - wrong}/{n} instances with T<=5, K<=4; "
               f"blank-merge fixture: beam 'a' P={math.exp(beam.score):.2f}, greedy "
               f"'{'a' * len(greedy.labels)}'; {elapsed:.1f}s")


# 9 ---------------------------------------------------------------------------


def _rand_word(rng, alphabet="abcdef", lo=0, hi=7):
    return "".join(rng.choice(list(alphabet), size=int(rng.integers(lo, hi + 1))))


def test_09_lexicon_properties(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(9)
    mismatches, queries = 0, 0
    for _ in range(50):
        words = [_rand_word(rng, lo=1) for _ in range(int(rng.integers(1, 201)))]
        lex = bk_build(words)
        keys = list(dict.fromkeys(words))
        for _ in range(10):
            q, max_d = _rand_word(rng), int(rng.integers(0, 4))
            scan = sorted(((w, edit_distance(q, w)) for w in keys if edit_distance(q, w) <= max_d),
                          key=lambda wd: wd[1])
            mismatches += bk_query(lex, q, max_d) != scan
            queries += 1

    axiom_fail = 0
    for _ in range(1000):
        a, b, c = (_rand_word(rng, "abc", 0, 6) for _ in range(3))
        ab, ba = edit_distance(a, b), edit_distance(b, a)
        axiom_fail += (ab != ba) or ((ab == 0) != (a == b)) or edit_distance(a, c) > ab + edit_distance(b, c)

    idem_fail, changed = 0, 0
    for _ in range(40):
        lex = bk_build([_rand_word(rng, lo=1) for _ in range(int(rng.integers(1, 60)))])
        policy = CorrectionPolicy(float(rng.choice([0.2, 0.4, 0.6, 1.0])))
        for _ in range(25):
            raw = _rand_word(rng, "abcdefAB")
            once = correct(raw, lex, policy)
            changed += once != raw
            idem_fail += correct(once, lex, policy) != once
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and axiom_fail == 0 and idem_fail == 0 and elapsed < 30
    acceptance(9, ok, f"BK-tree == linear scan on {queries - mismatches}/{queries} queries over 50 lexicons "
                      f"(<=200 words); metric axioms hold on {1000 - axiom_fail}/1000 triples; correct() "
                      f"idempotent on {1000 - idem_fail}/1000 inputs ({changed} corrected); {elapsed:.1f}s")


# 10 --------------------------------------------------------------------------


def _rect(x0, y0, x1, y1, text=None):
    return QuadBox.from_rect(x0, y0, x1, y1, text)


def test_10_protocol_fixtures(acceptance):
    t0 = time.perf_counter()
    checks = {}

    # a detection inside a don't-care region is neither rewarded nor penalised
    m = match_detections([_rect(0, 0, 40, 40, "###"), _rect(50, 0, 70, 10, "w")],
                         [_rect(5, 5, 20, 20), _rect(50, 0, 70, 10)])
    r = localization_metrics([m])
    checks["don't-care ignore"] = ((r.precision, r.recall, r.f_measure), (1.0, 1.0, 1.0))

    # two detections on one GT: the better one matches, the other is a false positive
    m = match_detections([_rect(0, 0, 10, 10)], [_rect(0, 0, 10, 6), _rect(0, 0, 10, 9)])
    r = localization_metrics([m])
    checks["one-to-one greedy"] = ((r.precision, r.recall, r.f_measure, m.pairs), (0.5, 1.0, 2 / 3, [(0, 1)]))

    # 3 counted GT, 2 counted detections, 1 match
    m = match_detections([_rect(0, 0, 9, 9), _rect(20, 0, 29, 9), _rect(40, 0, 49, 9)],
                         [_rect(0, 0, 9, 9), _rect(60, 60, 69, 69)])
    r = localization_metrics([m])
    checks["micro P/R arithmetic"] = ((r.precision, r.recall, r.f_measure), (0.5, 1 / 3, 0.4))

    gts = {"a": [_rect(0, 0, 20, 10, "Hello"), _rect(30, 0, 50, 10, "World")]}
    r = e2e_metrics(gts, {"a": [_rect(0, 0, 20, 10, "Hello"), _rect(30, 0, 50, 10, "Word")]})
    checks["wrong-transcription rejection"] = ((r.precision, r.recall, r.f_measure), (0.5, 0.5, 0.5))
    r = e2e_metrics(gts, {"a": [_rect(0, 0, 20, 10, "hELLO"), _rect(30, 0, 50, 10, " world ")]})
    checks["case-insensitive acceptance"] = ((r.precision, r.recall, r.f_measure), (1.0, 1.0, 1.0))

    failed = [name for name, (got, want) in checks.items()
              if not all(math.isclose(g, w, rel_tol=0, abs_tol=1e-15) if isinstance(g, float) else g == w
                         for g, w in zip(got, want))]
    elapsed = time.perf_counter() - t0
    acceptance(10, not failed and elapsed < 5,
               f"{len(checks) - len(failed)}/{len(checks)} hand-derived protocol fixtures give the expected "
               f"P/R/F ({', '.join(checks)})" + (f"; failed: {failed}" if failed else ""))


# 11 --------------------------------------------------------------------------


@pytest.mark.slow
def test_11_detection_runtime(acceptance, tmp_path, trained_detector):
    model, _ = trained_detector
    model_path = tmp_path / "det.npz"
    model.save(model_path)
    scene = synth_generate(SynthConfig(n_images=1, image_size=(480, 640), words_per_image=(5, 5),
                                       scale_range=(2, 6), seed=11))[0][0]
    img_dir = tmp_path / "images"
    img_dir.mkdir()
    write_image(img_dir / "big.pgm", scene)
    env = dict(os.environ, OMP_NUM_THREADS="1", OPENBLAS_NUM_THREADS="1", MKL_NUM_THREADS="1",
               NUMEXPR_NUM_THREADS="1", VECLIB_MAXIMUM_THREADS="1")
    t0 = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "scenetext.cli", "detect", "--data", str(img_dir),
                           "--model", str(model_path), "--output", str(tmp_path / "res")],
                          env=env, capture_output=True, text=True)
    elapsed = time.perf_counter() - t0
    lines = (tmp_path / "res" / "res_big.txt").read_text().splitlines() if proc.returncode == 0 else []
    acceptance(11, proc.returncode == 0 and elapsed < 60,
               f"single-threaded CLI detection of a 640x480 image: {elapsed:.1f}s < 60s "
               f"(exit {proc.returncode}, {len(lines)} boxes)")
