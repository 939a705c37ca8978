"""Acceptance gate: ten end-to-end criteria, each reported as one PASS/FAIL line."""

import math
import time
from fractions import Fraction

import numpy as np
import pytest
import torch

from helpers import combine_brute_force, gradient_matches
from sseg.checkpoint import load_model
from sseg.data import LabeledImage, synth_dataset
from sseg.evaluation import WITH_BACKGROUND, WITHOUT_BACKGROUND, EvalReport, accumulate, accumulate_labels
from sseg.inference import combine, encode_classes, predict
from sseg.labels import ClassVocabulary
from sseg.losses import (LossWeights, contrastive_loss, cost_matrix, dice_loss, focal_loss, mask_loss,
                         onehot_labels, total_loss)
from sseg.matching import brute_force_match, hungarian
from sseg.model import ModelConfig, l2_normalize
from sseg.pseudomask import ColorPositionExtractor, generate_pseudo_masks, kmeans, oracle_miou
from sseg.selftrain import StudentConfig, generate_labels, load_student, train_student
from sseg.train import DataConfig, PseudoConfig, TrainConfig, read_log, train

D = torch.float64


def t(x):
    return torch.as_tensor(np.asarray(x), dtype=D)


# 1 ---------------------------------------------------------------------------


def test_c1_matching_oracle(criterion):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    bad = 0
    for i in range(500):
        n = int(rng.integers(1, 8))
        k = int(rng.integers(1, n + 1))
        if i % 2:
            costs = rng.integers(0, 4, (k, n)).astype(float)  # frequent ties
        else:
            costs = rng.normal(size=(k, n))
        fast, slow = hungarian(costs), brute_force_match(costs)
        if fast.total_cost != slow.total_cost or sorted(fast.pairs) != sorted(slow.pairs):
            bad += 1
    elapsed = time.perf_counter() - start
    criterion.record(1, "hungarian == brute force on 500 matrices, < 5 s", bad == 0 and elapsed < 5.0,
                     f"(mismatches={bad}, {elapsed:.2f}s)")


# 2 ---------------------------------------------------------------------------


def _mask_total_instance(rng):
    n = int(rng.integers(2, 5))
    logits = t(rng.normal(scale=2, size=(n, 3, 3)))
    labels = torch.as_tensor(rng.integers(0, int(rng.integers(1, n + 1)), (3, 3)))
    labels = torch.unique(labels, return_inverse=True)[1].reshape(3, 3)
    with torch.no_grad():
        assignment = hungarian(cost_matrix(logits, onehot_labels(labels)).numpy())
    return logits, labels, assignment


def test_c2_gradient_checks(criterion):
    rng = np.random.default_rng(7)
    start = time.perf_counter()
    passed = dict(dice=0, focal=0, contrastive=0, mask=0, total=0)
    worst = 0.0
    for _ in range(20):
        logits = t(rng.normal(scale=2, size=(4, 4)))
        target = t(rng.integers(0, 2, (4, 4)))
        checks = {
            "dice": (lambda x: dice_loss(torch.sigmoid(x), target), [logits]),
            "focal": (lambda x: focal_loss(x, target), [logits]),
        }
        b = int(rng.integers(2, 6))
        v, w, s = t(rng.normal(size=(b, 3))), t(rng.normal(size=(b, 3))), t(rng.uniform(0.2, 2.0))
        checks["contrastive"] = (lambda a, c, sig: contrastive_loss(l2_normalize(a), l2_normalize(c), sig)[2],
                                 [v, w, s])
        ml, labels, assignment = _mask_total_instance(rng)
        checks["mask"] = (lambda x: mask_loss(x, labels, assignment)[0], [ml])
        weights = LossWeights(lambda_mask=0.7, lambda_contrastive=1.3)
        checks["total"] = (lambda x, a, c, sig: total_loss(
            mask_loss(x, labels, assignment, weights)[0],
            contrastive_loss(l2_normalize(a), l2_normalize(c), sig)[2], weights), [ml, v, w, s])
        for name, (fn, inputs) in checks.items():
            ok, err = gradient_matches(fn, inputs, rtol=1e-4)
            passed[name] += ok
            worst = max(worst, err)
    elapsed = time.perf_counter() - start
    ok = all(v == 20 for v in passed.values()) and elapsed < 60
    criterion.record(2, "finite-difference gradients (20 each, rtol 1e-4), < 60 s", ok,
                     f"({passed}, worst rel err {worst:.2e}, {elapsed:.1f}s)")


# 3 ---------------------------------------------------------------------------


def test_c3_contrastive_closed_forms(criterion):
    errs = []
    for b in (2, 8, 64):
        v = l2_normalize(torch.ones(b, 8, dtype=D))
        errs.append(abs(float(contrastive_loss(v, v, 0.07)[2]) - 2 * math.log(b)))
    e = torch.eye(2, dtype=D)
    ortho = float(contrastive_loss(e, e, 1.0)[2])
    ok = max(errs) <= 1e-6 and abs(ortho - 0.626524) <= 1e-5
    criterion.record(3, "contrastive closed forms", ok,
                     f"(uniform max err {max(errs):.1e}, orthonormal {ortho:.6f})")


# 4 ---------------------------------------------------------------------------


def test_c4_combination_oracle(criterion):
    rng = np.random.default_rng(11)
    bad = 0
    for _ in range(100):
        n, c = int(rng.integers(1, 9)), int(rng.integers(1, 7))
        logits = rng.normal(scale=3, size=(n, 16, 16))
        probs = rng.dirichlet(np.ones(c), size=n)
        scores, labels = combine(logits, probs)
        ref_scores, ref_labels = combine_brute_force(logits, probs)
        bad += not (np.array_equal(scores, ref_scores) and np.array_equal(labels, ref_labels))
    criterion.record(4, "combine == brute force on 100 instances (exact)", bad == 0, f"(mismatches={bad})")


# 5 ---------------------------------------------------------------------------


def test_c5_kmeans_properties(criterion):
    rng = np.random.default_rng(5)
    monotone = deterministic = 0
    for i in range(100):
        pts = rng.normal(size=(int(rng.integers(10, 80)), int(rng.integers(1, 6))))
        k = int(rng.integers(1, 8))
        a = kmeans(pts, k, seed=i)
        monotone += bool(np.all(np.diff(a.inertia_history) <= 0))
        b = kmeans(pts, k, seed=i)
        deterministic += np.array_equal(a.assignments, b.assignments) and np.array_equal(a.centroids, b.centroids)
    example = kmeans(np.array([0.0, 1.0, 10.0, 11.0]), 2)
    cents = sorted(example.centroids[:, 0].tolist())
    ok = monotone == 100 and deterministic == 100 and cents == [0.5, 10.5]
    criterion.record(5, "k-means monotone inertia, 1-D example, determinism", ok,
                     f"(monotone {monotone}/100, deterministic {deterministic}/100, centroids {cents})")


# 6 ---------------------------------------------------------------------------


def test_c6_pseudomask_oracle(criterion):
    _, labeled = synth_dataset(0, 50, 64)
    extractor = ColorPositionExtractor()
    scores = []
    for item in labeled:
        k = len(np.unique(item.labels)) + 2
        scores.append(oracle_miou(generate_pseudo_masks(item.image, extractor, k, image_id=item.id), item))
    mean = float(np.mean(scores))
    criterion.record(6, "pseudo-mask oracle mIoU >= 0.90 over 50 images", mean >= 0.90,
                     f"(mean {mean:.4f}, min {min(scores):.4f})")


# 7 / 8 -----------------------------------------------------------------------

TEACHER_CONFIG = TrainConfig(
    seed=0, epochs=80, batch_size=32, base_lr=1e-3, warmup_epochs=2.0, weight_decay=0.05,
    model=ModelConfig(n_queries=16, embed_dim=64, decoder_layers=2, text_layers=2, context_length=16,
                      backbone_channels=(32, 64), mask_stride=4, proj_dim=64, n_heads=4,
                      masked_attention=True),
    data=DataConfig(image_size=64, augment=False),
    pseudo=PseudoConfig(k=8, source="source"))


def _miou(segment, labeled, names):
    report = EvalReport(names, WITHOUT_BACKGROUND)
    for item in labeled:
        accumulate(segment(item.image), item, report)
    return report


@pytest.fixture(scope="module")
def teacher_run(tmp_path_factory):
    pairs, labeled = synth_dataset(0, 250, 64)
    out = tmp_path_factory.mktemp("teacher")
    start = time.perf_counter()
    path = train(TEACHER_CONFIG, pairs[:200], out)
    elapsed = time.perf_counter() - start
    model, vocab, _, _ = load_model(path)
    names = labeled[0].class_names
    classes = ClassVocabulary(names[1:])
    embs = encode_classes(classes, model, vocab)
    segment = lambda img: predict(img, model, vocab, classes, class_embs=embs)
    return dict(pairs=pairs, labeled=labeled, model=model, vocab=vocab, classes=classes, names=names,
                elapsed=elapsed, train_report=_miou(segment, labeled[:200], names),
                test_report=_miou(segment, labeled[200:], names), log=read_log(out / "train_log.jsonl"))


def test_c7_end_to_end_overfit(criterion, teacher_run):
    tr, te = teacher_run["train_report"].miou, teacher_run["test_report"].miou
    elapsed = teacher_run["elapsed"]
    ok = te >= 0.50 and tr >= 0.80 and elapsed < 15 * 60
    criterion.record(7, "tiny model: held-out mIoU >= 0.50, train >= 0.80, < 15 min", ok,
                     f"(train {tr:.4f}, held-out {te:.4f}, {elapsed:.0f}s)")


def test_c8_self_training(criterion, teacher_run, tmp_path):
    run = teacher_run
    items = [(p.id, p.image) for p in run["pairs"][:200]]
    manifest, summary = generate_labels(run["model"], run["vocab"], items, run["classes"], None,
                                        tmp_path / "labels")
    assert summary["written"] == 200
    student = load_student(train_student(manifest, StudentConfig(), tmp_path / "student"))
    report = _miou(lambda img: student.predict(img, drop_background=True), run["labeled"][200:], run["names"])
    teacher = run["test_report"].miou
    delta = report.miou - teacher
    criterion.record(8, "student held-out mIoU >= teacher - 0.05", delta >= -0.05,
                     f"(teacher {teacher:.4f}, student {report.miou:.4f}, delta {100 * delta:+.1f} points)")


# 9 ---------------------------------------------------------------------------


def test_c9_determinism_and_resume(criterion, tmp_path):
    pairs, _ = synth_dataset(3, 8, 32)
    cfg = TrainConfig(seed=1, epochs=3, batch_size=4, base_lr=1e-3, warmup_epochs=1.0, dtype="float64",
                      checkpoint_every=1,
                      model=ModelConfig(n_queries=6, embed_dim=16, decoder_layers=1, text_layers=1,
                                        context_length=10, backbone_channels=(8, 16), proj_dim=16,
                                        n_heads=2, masked_attention=True),
                      data=DataConfig(image_size=32), pseudo=PseudoConfig(k=4))
    keys = ("total", "mask", "dice", "focal", "i2t", "t2i", "contrastive", "lr", "grad_norm", "temperature")
    streams = []
    for name in ("a", "b"):
        train(cfg, pairs, tmp_path / name)
        streams.append([[r[k] for k in keys] for r in read_log(tmp_path / name / "train_log.jsonl")])
    mid = train(cfg, pairs, tmp_path / "part", max_steps=3)
    train(cfg, pairs, tmp_path / "resumed", resume=mid)
    resumed = [[r[k] for k in keys] for r in read_log(tmp_path / "resumed" / "train_log.jsonl")]
    _, _, _, fa = load_model(tmp_path / "a" / "final.sseg")
    _, _, _, fr = load_model(tmp_path / "resumed" / "final.sseg")
    same_params = fa.keys() == fr.keys() and all(np.array_equal(fa[k], fr[k]) for k in fa)
    ok = streams[0] == streams[1] and resumed == streams[0][3:] and same_params
    criterion.record(9, "bitwise float64 loss stream, resume == uninterrupted", ok,
                     f"(steps {len(streams[0])}, resumed from step 3)")


# 10 --------------------------------------------------------------------------


def test_c10_protocol_example(criterion):
    names = ["background", "A", "B"]
    results = {}
    for protocol in (WITH_BACKGROUND, WITHOUT_BACKGROUND):
        gt = LabeledImage(np.zeros((2, 2, 3), np.uint8), np.array([[1, 1], [2, 2]]), names)
        seg = accumulate_labels(EvalReport(names, protocol), np.array([[1, 2], [2, 2]]), gt.labels)
        results[protocol] = seg.miou
    ok = all(v == float(Fraction(7, 12)) for v in results.values())
    criterion.record(10, "hand-counted 2x2 example mIoU == 7/12 under both protocols", ok, f"({results})")
