import numpy as np
import pytest

from sseg.data import (Vocabulary, read_label_png, synth_dataset, write_class_names, write_image,
                       write_label_png, write_manifest)
from sseg.errors import InputError
from sseg.evaluation import WITH_BACKGROUND, WITHOUT_BACKGROUND, EvalReport, accumulate_labels
from sseg.labels import ClassVocabulary
from sseg.model import ModelConfig, init_params
from sseg.selftrain import StudentConfig, compare, generate_labels, load_student, poly_lr, train_student
from sseg.train import read_log

TEACHER = ModelConfig(n_queries=6, embed_dim=16, decoder_layers=1, text_layers=1, context_length=8,
                      vocab_size=12, backbone_channels=(8, 16), mask_stride=4, proj_dim=8, n_heads=2)
NAMES = ["background", "ball", "leaf", "box", "sun", "gift", "tent"]


@pytest.fixture(scope="module")
def teacher():
    vocab = Vocabulary(NAMES[1:])
    return init_params(TEACHER, 0), vocab


def _gt_manifest(root, n=8, size=32):
    """GT labels rewritten with background as the last class."""
    _, labeled = synth_dataset(0, n, size)
    fg = len(NAMES) - 1
    records = []
    for i, item in enumerate(labeled):
        lab = np.where(item.labels == 0, fg, item.labels - 1)
        rec = {"id": f"g{i}", "image": f"images/g{i}.png", "labels": f"labels/g{i}.png", "text": ""}
        write_image(root / rec["image"], item.image)
        write_label_png(root / rec["labels"], lab)
        records.append(rec)
    write_class_names(root / "classes.txt", NAMES[1:] + ["background"])
    write_manifest(root / "manifest.jsonl", records)
    return root / "manifest.jsonl", labeled


def test_generate_labels_cardinality_and_range(tmp_path, teacher):
    model, vocab = teacher
    pairs, _ = synth_dataset(1, 5, 32)
    classes = ClassVocabulary(NAMES[1:])
    manifest, summary = generate_labels(model, vocab, [(p.id, p.image) for p in pairs], classes, 0.5,
                                        tmp_path)
    assert summary == {"written": 5, "failed": 0, "failed_ids": []}
    assert len(manifest.read_text().splitlines()) == 5
    assert (tmp_path / "classes.txt").read_text().split() == NAMES[1:] + ["background"]
    for p in pairs:
        lab = read_label_png(tmp_path / "labels" / f"{p.id}.png")
        assert lab.shape == (32, 32) and lab.max() <= len(classes)


def test_generate_labels_is_byte_identical(tmp_path, teacher):
    model, vocab = teacher
    pairs, _ = synth_dataset(2, 3, 32)
    items = [(p.id, p.image) for p in pairs]
    classes = ClassVocabulary(NAMES[1:])
    generate_labels(model, vocab, items, classes, None, tmp_path / "a")
    generate_labels(model, vocab, items, classes, None, tmp_path / "b")
    files = sorted(f.relative_to(tmp_path / "a") for f in (tmp_path / "a").rglob("*") if f.is_file())
    assert files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert (tmp_path / "a" / "classes.txt").read_text().split() == NAMES[1:]


def test_generate_labels_skips_bad_images(tmp_path, teacher):
    model, vocab = teacher
    good = synth_dataset(0, 1, 32)[0][0]
    items = [("bad", np.zeros((32, 32), np.uint8)), (good.id, good.image)]
    _, summary = generate_labels(model, vocab, items, ClassVocabulary(NAMES[1:]), None, tmp_path)
    assert summary["written"] == 1 and summary["failed_ids"] == ["bad"]


def test_poly_lr():
    assert poly_lr(0, 1.0, 4, 10) == 0.25
    assert poly_lr(3, 1.0, 4, 10) == 1.0
    assert poly_lr(4, 1.0, 4, 10) == 1.0
    assert poly_lr(7, 1.0, 4, 10) == 0.5


def test_student_overfits_small_set(tmp_path):
    manifest, labeled = _gt_manifest(tmp_path / "data")
    cfg = StudentConfig(epochs=150, batch_size=8, base_lr=1e-3, warmup_iters=10, augment=False, image_size=32)
    path = train_student(manifest, cfg, tmp_path / "out")
    log = read_log(tmp_path / "out" / "student_log.jsonl")
    assert len(log) == 150
    assert np.mean([r["loss"] for r in log[-10:]]) < 0.5 * np.mean([r["loss"] for r in log[:10]])
    student = load_student(path)
    assert student.foreground_names() == NAMES[1:] and student.background_index == 6
    correct = total = 0
    for item in labeled:
        seg = student.predict(item.image)
        assert seg.legend.names == NAMES[1:]
        truth = np.where(item.labels == 0, 6, item.labels - 1)
        correct += int((seg.labels == truth).sum())
        total += truth.size
    assert correct / total >= 0.95
    assert (student.predict(labeled[0].image, drop_background=True).labels != 6).all()


def test_student_rejects_misplaced_background(tmp_path):
    manifest, _ = _gt_manifest(tmp_path, n=2)
    write_class_names(tmp_path / "classes.txt", ["background"] + NAMES[1:])
    with pytest.raises(InputError):
        train_student(manifest, StudentConfig(epochs=1), tmp_path / "out")


def test_student_is_deterministic(tmp_path):
    manifest, _ = _gt_manifest(tmp_path / "data", n=4)
    cfg = StudentConfig(epochs=2, batch_size=2, dtype="float64", image_size=32)
    a = train_student(manifest, cfg, tmp_path / "a")
    b = train_student(manifest, cfg, tmp_path / "b")
    assert a.read_bytes() == b.read_bytes()


def _report(protocol, pred, gt):
    return accumulate_labels(EvalReport(NAMES, protocol), np.array(pred), np.array(gt))


def test_compare_zero_antisymmetric_and_mismatch():
    gt = [[0, 1], [2, 2]]
    a = _report(WITH_BACKGROUND, [[0, 1], [2, 1]], gt)
    b = _report(WITH_BACKGROUND, [[0, 1], [2, 2]], gt)
    same = compare(a, a)
    assert same["miou_delta"] == 0 and all(v in (0, None) for v in same["per_class_delta"].values())
    ab, ba = compare(a, b), compare(b, a)
    assert ab["miou_delta"] == pytest.approx(-ba["miou_delta"])
    assert ab["miou_delta"] > 0
    for k, v in ab["per_class_delta"].items():
        assert v is None or v == pytest.approx(-ba["per_class_delta"][k])
    with pytest.raises(InputError):
        compare(a, _report(WITHOUT_BACKGROUND, [[0, 1], [2, 2]], gt))
    with pytest.raises(InputError):
        compare(a, accumulate_labels(EvalReport(NAMES[::-1]), np.array(gt), np.array(gt)))
