"""Self-training: label the unlabeled training images with a trained model over the
target class list, then fit a closed-vocabulary student on those labels."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import checkpoint as ckpt
from .config import save_config
from .data import (IGNORE_VALUE, crop_resize, normalize_image, random_resized_crop_box,
                   read_class_names, read_image, read_label_png, read_manifest_records,
                   write_class_names, write_image, write_label_png, write_manifest)
from .errors import ConfigError, InputError, SSegError
from .evaluation import EvalReport
from .inference import encode_classes, predict
from .labels import BACKGROUND, ClassVocabulary, SegmentationMap
from .model import ConvPyramid, PixelDecoder
from .pseudomask import pad_to_multiple

log = logging.getLogger(__name__)


# ----------------------------------------------------------------------------
# label generation


def generate_labels(model, vocab, images: Iterable, classes: ClassVocabulary, tau, out_dir,
                    caption_mode="content_words"):
    """Predict a label map for every ``(image_id, image)`` and write a labeled dataset.

    Output: ``images/<id>.png``, ``labels/<id>.png``, ``classes.txt`` and
    ``manifest.jsonl``. Label index ``len(classes)`` is the background when ``tau`` is
    given. Returns ``(manifest_path, summary)``.
    """
    out = Path(out_dir)
    class_embs = encode_classes(classes, model, vocab, caption_mode)
    records = []
    failed = []
    for image_id, image in images:
        try:
            seg = predict(image, model, vocab, classes, tau, caption_mode, class_embs=class_embs)
            rec = {"id": image_id, "image": f"images/{image_id}.png",
                   "labels": f"labels/{image_id}.png", "text": " ".join(classes.names)}
            write_image(out / rec["image"], image)
            write_label_png(out / rec["labels"], seg.labels)
            records.append(rec)
        except (SSegError, OSError, ValueError) as exc:
            log.warning("skipping %s: %s", image_id, exc)
            failed.append(image_id)
    names = list(classes.names) + ([BACKGROUND] if tau is not None else [])
    write_class_names(out / "classes.txt", names)
    manifest = out / "manifest.jsonl"
    write_manifest(manifest, records)
    summary = {"written": len(records), "failed": len(failed), "failed_ids": failed}
    if failed:
        log.warning("label generation skipped %d of %d images", len(failed),
                    len(failed) + len(records))
    return manifest, summary


# ----------------------------------------------------------------------------
# student


@dataclass
class StudentConfig:
    backbone_channels: tuple = (32, 64)
    embed_dim: int = 64
    mask_stride: int = 4
    seed: int = 0
    epochs: int = 40
    batch_size: int = 16
    base_lr: float = 1e-4
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    warmup_iters: int = 50
    poly_power: float = 1.0
    grad_clip: float = 1.0
    augment: bool = True
    crop_scale_min: float = 0.5
    image_size: int = 64
    dtype: str = "float32"

    def __post_init__(self):
        self.backbone_channels = tuple(int(c) for c in self.backbone_channels)
        if self.base_lr <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("student needs base_lr > 0, epochs >= 1, batch_size >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")

    @property
    def torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32

    def to_dict(self):
        d = asdict(self)
        d["backbone_channels"] = list(self.backbone_channels)
        return d


class StudentModel(nn.Module):
    """Convolutional pyramid + top-down decoder + per-pixel linear classifier."""

    def __init__(self, config: StudentConfig, class_names, background_index=None):
        super().__init__()
        self.config = config
        self.class_names = list(class_names)
        self.background_index = background_index
        self.backbone = ConvPyramid(config.backbone_channels)
        self.decoder = PixelDecoder(config.backbone_channels, config.embed_dim, config.mask_stride)
        self.classifier = nn.Conv2d(config.embed_dim, len(self.class_names), 1)

    @property
    def input_multiple(self):
        return math.lcm(2 ** len(self.config.backbone_channels), self.config.mask_stride)

    def forward(self, images):
        H, W = images.shape[-2:]
        logits = self.classifier(self.decoder(self.backbone(images), (H, W)))
        return F.interpolate(logits, size=(H, W), mode="bilinear", align_corners=False)

    def foreground_names(self):
        return [n for i, n in enumerate(self.class_names) if i != self.background_index]

    def predict(self, image, drop_background=False) -> SegmentationMap:
        """Label map in the teacher's index convention (background = |foreground|)."""
        H, W = image.shape[:2]
        padded = pad_to_multiple(np.asarray(image), self.input_multiple)
        x = torch.from_numpy(normalize_image(padded)[None]).to(self.classifier.weight.dtype)
        with torch.no_grad():
            logits = self(x)[0, :, :H, :W]
        if self.background_index is not None and drop_background:
            logits = logits.clone()
            logits[self.background_index] = -torch.inf
        labels = logits.argmax(dim=0).numpy()
        fg = ClassVocabulary(self.foreground_names())
        if self.background_index is None:
            return SegmentationMap(labels, fg)
        # student classes are fg names followed by background, same as the teacher output
        return SegmentationMap(labels, fg, self.background_index)


def poly_lr(step, base_lr, warmup, total, power=1.0):
    if warmup > 0 and step < warmup:
        return base_lr * (step + 1) / warmup
    if total <= warmup:
        return base_lr
    return base_lr * (1.0 - (step - warmup) / max(1, total - warmup)) ** power


def load_labeled_manifest(manifest):
    base = Path(manifest).parent
    names = read_class_names(base / "classes.txt")
    items = []
    for rec in read_manifest_records(manifest):
        if "labels" not in rec:
            raise InputError(f"record {rec.get('id')!r} has no labels")
        items.append((read_image(base / rec["image"]), read_label_png(base / rec["labels"])))
    return names, items


def train_student(manifest, config: StudentConfig, out_dir, on_step=None) -> Path:
    """Per-pixel cross-entropy training on generated labels; returns the checkpoint path."""
    names, items = load_labeled_manifest(manifest)
    if not items:
        raise InputError("label manifest is empty")
    bg = names.index(BACKGROUND) if BACKGROUND in names else None
    if bg is not None and bg != len(names) - 1:
        raise InputError("background must be the last class of a generated label set")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(config, out / "student.cfg")
    dtype = config.torch_dtype
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        model = StudentModel(config, names, bg).to(dtype)
    decay = [p for p in model.parameters() if p.ndim >= 2]
    no_decay = [p for p in model.parameters() if p.ndim < 2]
    opt = torch.optim.AdamW([{"params": decay, "weight_decay": config.weight_decay},
                             {"params": no_decay, "weight_decay": 0.0}],
                            lr=config.base_lr, betas=(config.beta1, config.beta2), foreach=False)
    n = len(items)
    spe = math.ceil(n / config.batch_size)
    total = spe * config.epochs
    size = config.image_size
    with open(out / "student_log.jsonl", "w", encoding="utf-8") as logf:
        for step in range(total):
            epoch, pos = divmod(step, spe)
            perm = np.random.default_rng([config.seed, 0, epoch]).permutation(n)
            idx = perm[pos * config.batch_size:(pos + 1) * config.batch_size]
            xs, ys = [], []
            for slot, i in enumerate(idx):
                img, lab = items[i]
                if config.augment:
                    rng = np.random.default_rng([config.seed, 1, step, slot])
                    box = random_resized_crop_box(img.shape[0], img.shape[1], rng,
                                                  (config.crop_scale_min, 1.0))
                else:
                    box = (0, 0, img.shape[0], img.shape[1])
                if config.augment or img.shape[:2] != (size, size):
                    img = crop_resize(img, box, size)
                    lab = crop_resize(lab, box, size, resample=0)
                xs.append(normalize_image(img))
                ys.append(lab.astype(np.int64))
            x = torch.from_numpy(np.stack(xs)).to(dtype)
            y = torch.from_numpy(np.stack(ys))
            lr = poly_lr(step, config.base_lr, config.warmup_iters, total, config.poly_power)
            for g in opt.param_groups:
                g["lr"] = lr
            loss = F.cross_entropy(model(x), y, ignore_index=IGNORE_VALUE)
            if not torch.isfinite(loss):
                raise SSegError(f"student loss became non-finite at step {step}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if config.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            opt.step()
            rec = {"step": step, "epoch": epoch, "lr": lr, "loss": float(loss.detach())}
            logf.write(json.dumps(rec) + "\n")
            if on_step is not None:
                on_step(rec)
    meta = {"class_names": names, "background_index": bg, "steps": total}
    path = out / "student.sseg"
    ckpt.save_checkpoint(path, model, None, opt, meta, kind="student")
    return path


def load_student(path) -> StudentModel:
    header, arrays = ckpt.read_container(path)
    if header.get("kind") != "student":
        raise InputError(f"{path}: not a student checkpoint")
    meta = header["meta"]
    config = StudentConfig(**header["config"])
    model = StudentModel(config, meta["class_names"], meta["background_index"]).to(config.torch_dtype)
    ckpt.load_state(model, arrays)
    return model


def compare(teacher: EvalReport, student: EvalReport) -> dict:
    """Per-class and mIoU deltas (student minus teacher)."""
    if teacher.protocol != student.protocol:
        raise InputError("reports use different protocols")
    if teacher.class_names != student.class_names:
        raise InputError("reports use different class lists")
    per_class = {}
    for name, t, s in zip(teacher.class_names, teacher.iou_per_class, student.iou_per_class):
        per_class[name] = None if t is None or s is None else s - t
    return {"protocol": teacher.protocol, "teacher_miou": teacher.miou,
            "student_miou": student.miou, "miou_delta": student.miou - teacher.miou,
            "per_class_delta": per_class}
