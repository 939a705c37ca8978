"""Open-vocabulary prediction: classify each mask feature against encoded class
names, fuse mask-class pairs into a per-pixel map, optional background threshold."""

from __future__ import annotations

import colorsys
import logging
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .data import Vocabulary, extract_words, normalize_image, tokenize, write_image, write_label_png
from .errors import InputError
from .labels import BACKGROUND, ClassVocabulary, SegmentationMap
from .model import SSegModel
from .pseudomask import pad_to_multiple

log = logging.getLogger(__name__)

BACKGROUND_COLOR = (0, 0, 0)


def encode_classes(classes: ClassVocabulary, model: SSegModel, vocab: Vocabulary,
                   caption_mode="content_words") -> torch.Tensor:
    """Unit-norm text embedding per class prompt, shape (|C|, proj_dim)."""
    ids, eos = [], []
    for name, prompt in zip(classes.names, classes.prompts()):
        words = extract_words(prompt, caption_mode) or extract_words(prompt, "keep_all")
        if not words or all(w not in vocab for w in words):
            log.warning("class %r tokenizes to unknown tokens only", name)
        tok = tokenize(words, vocab, model.config.context_length)
        ids.append(tok.ids)
        eos.append(tok.eos_index)
    with torch.no_grad():
        feats = model.forward_text(torch.from_numpy(np.stack(ids)), torch.tensor(eos))
        return model.project_text(feats)


def classify_masks(mask_features, class_embs, model: SSegModel) -> torch.Tensor:
    """Per-mask class distribution: softmax(cos(proj(feature), class) / temperature)."""
    with torch.no_grad():
        emb = model.project_masks(mask_features)
        sims = emb @ class_embs.to(emb.dtype).T
        return torch.softmax(sims / model.temperature, dim=-1)


def class_probabilities(mask_features, class_embs, temperature):
    """Same as :func:`classify_masks` for already-projected unit features."""
    sims = mask_features @ class_embs.T
    return torch.softmax(sims / temperature, dim=-1)


def combine(mask_logits, class_probs, output_size=None):
    """Per-pixel class scores sum_n sigmoid(mask_n) * p_n(c) and their argmax.

    Returns ``(scores, labels)`` with scores (h, w, |C|) as float64 numpy. Accumulation
    runs over masks in index order. With ``output_size`` the scores are resized
    bilinearly before the argmax.
    """
    logits = np.asarray(mask_logits, dtype=np.float64)
    probs = np.asarray(class_probs, dtype=np.float64)
    if logits.shape[0] != probs.shape[0]:
        raise InputError("mask and class-probability counts differ")
    masses = 1.0 / (1.0 + np.exp(-logits))
    scores = np.zeros(logits.shape[1:] + (probs.shape[1],))
    for n in range(logits.shape[0]):
        scores += masses[n][..., None] * probs[n][None, None, :]
    if output_size is not None and tuple(output_size) != scores.shape[:2]:
        t = torch.from_numpy(scores.transpose(2, 0, 1))[None]
        scores = F.interpolate(t, size=tuple(output_size), mode="bilinear",
                               align_corners=False)[0].numpy().transpose(1, 2, 0)
    return scores, scores.argmax(axis=-1)  # argmax keeps the lowest index on ties


def background_threshold(scores, tau, background_index=None):
    """Label pixels whose renormalized top class probability is below ``tau`` as background.

    Returns ``(labels, probs)``; ``background_index`` defaults to |C|.
    """
    if not 0.0 <= tau <= 1.0:
        raise InputError("tau must lie in [0, 1]")
    scores = np.asarray(scores, dtype=np.float64)
    c = scores.shape[-1]
    total = scores.sum(axis=-1, keepdims=True)
    probs = np.divide(scores, total, out=np.full_like(scores, 1.0 / c), where=total > 0)
    labels = probs.argmax(axis=-1)
    bg = c if background_index is None else background_index
    labels = np.where(probs.max(axis=-1) < tau, bg, labels)
    return labels, probs


def predict(image, model: SSegModel, vocab: Vocabulary, classes: ClassVocabulary,
            tau: Optional[float] = None, caption_mode="content_words",
            class_embs=None) -> SegmentationMap:
    """Full test-time pipeline for one uint8 HxWx3 image."""
    H, W = image.shape[:2]
    padded = pad_to_multiple(np.asarray(image), model.config.input_multiple)
    x = torch.from_numpy(normalize_image(padded)[None]).to(model.log_temperature.dtype)
    if class_embs is None:
        class_embs = encode_classes(classes, model, vocab, caption_mode)
    with torch.no_grad():
        out = model.forward_image(x)
        probs = classify_masks(out.mask_features[0], class_embs, model)
    scores, labels = combine(out.mask_logits[0].numpy(), probs.numpy(), padded.shape[:2])
    scores = scores[:H, :W]
    labels = labels[:H, :W]
    bg = None
    if tau is not None:
        bg = len(classes)
        labels, _ = background_threshold(scores, tau, bg)
    return SegmentationMap(labels, classes, bg, scores)


# ----------------------------------------------------------------------------
# rendering


def default_palette(n_classes, with_background=True) -> dict[int, tuple[int, int, int]]:
    """Deterministic, well separated colors; background (index n_classes) is black."""
    pal = {}
    for i in range(n_classes):
        h = (i * 0.618033988749895) % 1.0
        s = 0.65 + 0.35 * ((i // 7) % 2)
        r, g, b = colorsys.hsv_to_rgb(h, s, 0.95)
        pal[i] = (int(r * 255), int(g * 255), int(b * 255))
    if len(set(pal.values())) != len(pal):
        raise InputError("palette generator produced duplicate colors")
    if with_background:
        pal[n_classes] = BACKGROUND_COLOR
    return pal


def render(seg: SegmentationMap, palette=None):
    """Color image (H, W, 3) uint8 and legend text for a segmentation map."""
    if palette is None:
        palette = default_palette(len(seg.legend), seg.background_index is not None)
        if seg.background_index is not None and seg.background_index != len(seg.legend):
            palette[seg.background_index] = palette.pop(len(seg.legend))
    used = np.unique(seg.labels)
    needed = set(range(len(seg.legend))) | set(int(u) for u in used)
    if seg.background_index is not None:
        needed.add(seg.background_index)
    missing = sorted(needed - set(palette))
    if missing:
        raise InputError(f"palette has no color for indices {missing}")
    if len({tuple(palette[i]) for i in needed}) != len(needed):
        raise InputError("palette colors must be distinct")
    lut = np.zeros((max(needed) + 1, 3), dtype=np.uint8)
    for i in needed:
        lut[i] = palette[i]
    names = seg.names_with_background()
    legend = "".join(f"{i}\t{names[i]}\t{','.join(str(v) for v in palette[i])}\n"
                     for i in sorted(needed))
    return lut[seg.labels], legend


def parse_legend(text):
    """Legend text -> list of (index, name, (r, g, b))."""
    rows = []
    for line in text.splitlines():
        if not line.strip():
            continue
        idx, name, rgb = line.split("\t")
        rows.append((int(idx), name, tuple(int(v) for v in rgb.split(","))))
    return rows


def decode_render(color_image, legend_text):
    """Invert :func:`render`: color image + legend -> label map."""
    rows = parse_legend(legend_text)
    img = np.asarray(color_image)
    labels = np.full(img.shape[:2], -1, dtype=np.int64)
    for idx, _, rgb in rows:
        labels[np.all(img == np.array(rgb, dtype=img.dtype), axis=-1)] = idx
    if (labels < 0).any():
        raise InputError("color image contains colors missing from the legend")
    return labels


def write_prediction(seg: SegmentationMap, out_prefix):
    """Write ``<prefix>_labels.png``, ``<prefix>_color.png`` and ``<prefix>_legend.txt``."""
    out_prefix = Path(out_prefix)
    out_prefix.parent.mkdir(parents=True, exist_ok=True)
    color, legend = render(seg)
    write_label_png(f"{out_prefix}_labels.png", seg.labels)
    write_image(f"{out_prefix}_color.png", color)
    Path(f"{out_prefix}_legend.txt").write_text(legend, encoding="utf-8")
    return out_prefix


def read_prediction(prefix) -> SegmentationMap:
    from .data import read_label_png

    rows = parse_legend(Path(f"{prefix}_legend.txt").read_text(encoding="utf-8"))
    names = {i: n for i, n, _ in rows}
    bg = next((i for i, n, _ in rows if n == BACKGROUND), None)
    fg = [names[i] for i in sorted(names) if i != bg]
    labels = read_label_png(f"{prefix}_labels.png")
    return SegmentationMap(labels, ClassVocabulary(fg), bg)
