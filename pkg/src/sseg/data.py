"""Image-caption data: manifests, caption filtering, tokenization,
augmentation and the synthetic shapes dataset."""

from __future__ import annotations

import json
import os
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

from .errors import ConfigError, InputError, ParseError, RecordError

IGNORE_VALUE = 255

# Function words dropped by the ``content_words`` filter.
STOP_WORDS = frozenset("""
a an the this that these those some any each every all both either neither
no not nor and or but so yet for of to in on at by from with without into
onto upon over under above below between among through during before after
about against along around across behind beside besides near off out up
down than then there here where when while as if because until unless
though although is are was were be been being am do does did doing done
have has had having will would shall should can could may might must
i me my mine we us our ours you your yours he him his she her hers it its
they them their theirs what which who whom whose why how very too also
just only own same such other another more most less least much many
few several one two three s t
""".split())

_WORD_RE = re.compile(r"[a-z0-9]+(?:'[a-z0-9]+)?")


@dataclass
class ImageTextPair:
    id: str
    image: np.ndarray
    caption: str

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise InputError(f"{self.id}: image must be HxWx3, got {self.image.shape}")
        if self.image.shape[0] < 8 or self.image.shape[1] < 8:
            raise InputError(f"{self.id}: image smaller than 8x8")
        if not self.caption.strip():
            raise InputError(f"{self.id}: empty caption")


@dataclass
class CaptionTokens:
    ids: np.ndarray
    eos_index: int
    context_length: int = 77


@dataclass
class LabeledImage:
    image: np.ndarray
    labels: np.ndarray
    class_names: list[str]
    ignore_value: int = IGNORE_VALUE
    id: str = ""

    def __post_init__(self):
        if self.labels.shape != self.image.shape[:2]:
            raise InputError(
                f"label shape {self.labels.shape} != image shape {self.image.shape[:2]}")
        valid = (self.labels < len(self.class_names)) | (self.labels == self.ignore_value)
        if not np.all(valid & (self.labels >= 0)):
            raise InputError("label map holds values outside the class list")


# --------------------------------------------------------------------------
# image / label-map IO


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def write_image(path, image: np.ndarray):
    _atomic_save(Image.fromarray(np.asarray(image, dtype=np.uint8), mode="RGB"), path)


def read_label_png(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "P"):
            raise InputError(f"{path}: label PNG must be single-channel, got mode {im.mode}")
        return np.asarray(im, dtype=np.uint8).astype(np.int64)


def write_label_png(path, labels: np.ndarray):
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 255:
        raise InputError("label values must fit in 8 bits")
    _atomic_save(Image.fromarray(labels.astype(np.uint8), mode="L"), path)


def _atomic_save(im: Image.Image, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    im.save(tmp, format="PNG")
    os.replace(tmp, path)


# --------------------------------------------------------------------------
# manifests


def _manifest_records(manifest_path) -> Iterator[tuple[int, dict]]:
    with open(manifest_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON ({exc.msg})", line=lineno) from None
            if not isinstance(rec, dict) or not isinstance(rec.get("image"), str):
                raise ParseError("record needs a string 'image' field", line=lineno)
            yield lineno, rec


def _record_id(rec, lineno):
    return str(rec.get("id", Path(rec["image"]).stem or f"line{lineno}"))


def load_pairs(manifest_path) -> Iterator[ImageTextPair]:
    """Lazily yield the image-caption pairs of a JSON-lines manifest, in file order."""
    base = Path(manifest_path).parent
    for lineno, rec in _manifest_records(manifest_path):
        if not isinstance(rec.get("text"), str):
            raise ParseError("record needs a string 'text' field", line=lineno)
        rid = _record_id(rec, lineno)
        yield ImageTextPair(rid, _load_record_image(base, rec, rid), rec["text"])


def load_labeled(manifest_path, class_names=None) -> Iterator[LabeledImage]:
    """Yield LabeledImage records of a manifest whose records carry a ``labels`` path."""
    base = Path(manifest_path).parent
    if class_names is None:
        class_names = read_class_names(base / "classes.txt")
    for lineno, rec in _manifest_records(manifest_path):
        rid = _record_id(rec, lineno)
        if "labels" not in rec:
            raise ParseError(f"record {rid!r} has no 'labels' field", line=lineno)
        lab_path = base / rec["labels"]
        try:
            labels = read_label_png(lab_path)
        except (OSError, ValueError) as exc:
            raise RecordError(rid, f"cannot read label map {lab_path}: {exc}") from None
        yield LabeledImage(_load_record_image(base, rec, rid), labels, list(class_names), id=rid)


def _load_record_image(base, rec, rid):
    path = base / rec["image"]
    try:
        return read_image(path)
    except (OSError, ValueError) as exc:
        raise RecordError(rid, f"cannot read image {path}: {exc}") from None


def read_manifest_records(manifest_path) -> list[dict]:
    return [rec for _, rec in _manifest_records(manifest_path)]


def write_manifest(path, records: Sequence[dict]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    os.replace(tmp, path)


def read_class_names(path) -> list[str]:
    """One class name per line; blank lines skipped. A comma list is accepted too."""
    text = Path(path).read_text(encoding="utf-8")
    if "\n" not in text.strip() and "," in text:
        return [n.strip() for n in text.split(",") if n.strip()]
    return [ln.strip() for ln in text.splitlines() if ln.strip()]


def write_class_names(path, names):
    Path(path).write_text("".join(f"{n}\n" for n in names), encoding="utf-8")


# --------------------------------------------------------------------------
# captions


def extract_words(caption: str, mode: str = "content_words") -> list[str]:
    words = _WORD_RE.findall(caption.lower())
    if mode == "keep_all":
        return words
    if mode == "content_words":
        return [w for w in words if w not in STOP_WORDS]
    raise ConfigError(f"unknown caption mode {mode!r}")


class Vocabulary:
    PAD, START, EOS, UNK = "<pad>", "<start>", "<eos>", "<unk>"
    SPECIALS = (PAD, START, EOS, UNK)

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tokens[:4] != list(self.SPECIALS):
            tokens = list(self.SPECIALS) + [t for t in tokens if t not in self.SPECIALS]
        if len(set(tokens)) != len(tokens):
            raise ConfigError("vocabulary has duplicate tokens")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    pad_id = 0
    start_id = 1
    eos_id = 2
    unk_id = 3

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, word):
        return word in self.index

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def id(self, word: str) -> int:
        return self.index.get(word, self.unk_id)

    @classmethod
    def build(cls, captions, max_size=8192, mode="content_words") -> "Vocabulary":
        """Word-level vocabulary of the most frequent words, ties broken alphabetically."""
        if max_size < len(cls.SPECIALS):
            raise ConfigError("vocabulary size must leave room for the special tokens")
        counts = Counter()
        for cap in captions:
            counts.update(extract_words(cap, mode))
        ranked = sorted(counts, key=lambda w: (-counts[w], w))
        return cls(list(cls.SPECIALS) + ranked[: max_size - len(cls.SPECIALS)])


def tokenize(words: Sequence[str], vocab: Vocabulary, context_length: int = 77) -> CaptionTokens:
    if context_length < 3:
        raise ConfigError("context_length must be at least 3")
    body = [vocab.id(w) for w in words][: context_length - 2]
    seq = [vocab.start_id] + body + [vocab.eos_id]
    eos_index = len(seq) - 1
    ids = np.full(context_length, vocab.pad_id, dtype=np.int64)
    ids[: len(seq)] = seq
    return CaptionTokens(ids, eos_index, context_length)


def tokenize_caption(caption, vocab, context_length=77, mode="content_words"):
    return tokenize(extract_words(caption, mode), vocab, context_length)


# --------------------------------------------------------------------------
# augmentation


def random_resized_crop_box(height, width, rng, scale=(0.5, 1.0), ratio=(3 / 4, 4 / 3)):
    """Pick a crop box (top, left, h, w) covering ``scale`` of the source area."""
    area = height * width
    log_ratio = np.log(ratio)
    for _ in range(10):
        target = area * rng.uniform(*scale)
        aspect = float(np.exp(rng.uniform(*log_ratio)))
        w = int(round(np.sqrt(target * aspect)))
        h = int(round(np.sqrt(target / aspect)))
        if 0 < w <= width and 0 < h <= height:
            top = int(rng.integers(0, height - h + 1))
            left = int(rng.integers(0, width - w + 1))
            return top, left, h, w
    return 0, 0, height, width


def crop_resize(image, box, out_size, resample=Image.BILINEAR):
    top, left, h, w = box
    if image.ndim == 2:
        im = Image.fromarray(np.asarray(image, dtype=np.uint8), mode="L")
    else:
        im = Image.fromarray(np.asarray(image, dtype=np.uint8), mode="RGB")
    im = im.resize((out_size, out_size), resample=resample, box=(left, top, left + w, top + h))
    return np.asarray(im).copy()


def augment(image, out_size, rng, scale=(0.5, 1.0), ratio=(3 / 4, 4 / 3)):
    """Random-resized crop to ``out_size`` x ``out_size`` with bilinear resampling."""
    if out_size < 8:
        raise ConfigError("out_size must be at least 8")
    box = random_resized_crop_box(image.shape[0], image.shape[1], rng, scale, ratio)
    return crop_resize(image, box, out_size)


# --------------------------------------------------------------------------
# synthetic shapes dataset


@dataclass(frozen=True)
class ShapeClass:
    name: str
    color: tuple[int, int, int]
    kind: str  # circle | square | triangle


DEFAULT_PALETTE = (
    ShapeClass("background", (90, 90, 90), "none"),
    ShapeClass("ball", (220, 40, 40), "circle"),
    ShapeClass("leaf", (40, 180, 60), "triangle"),
    ShapeClass("box", (40, 80, 220), "square"),
    ShapeClass("sun", (235, 210, 40), "circle"),
    ShapeClass("gift", (200, 60, 200), "square"),
    ShapeClass("tent", (40, 205, 215), "triangle"),
)

_CAPTION_TEMPLATES = (
    "a picture of {}",
    "there is {} in this image",
    "{} on a plain backdrop",
    "photo showing {}",
    "{}",
)


def _shape_mask(kind, size, cy, cx, r):
    yy, xx = np.mgrid[:size, :size]
    if kind == "circle":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if kind == "square":
        return (np.abs(yy - cy) <= r * 0.85) & (np.abs(xx - cx) <= r * 0.85)
    if kind == "triangle":
        # upright isosceles triangle with apex at the top
        top, bottom = cy - r, cy + r
        half = (yy - top) / (2.0 * r) * r
        return (yy >= top) & (yy <= bottom) & (np.abs(xx - cx) <= half)
    raise ConfigError(f"unknown shape kind {kind!r}")


def _join_names(names):
    if len(names) == 1:
        return names[0]
    return ", ".join(names[:-1]) + " and " + names[-1]


def synth_dataset(seed, n_images, image_size=64, class_palette=DEFAULT_PALETTE,
                  noise_std=6.0, min_visible=0.6):
    """Deterministic images of 1-5 colored shapes with captions naming the visible classes.

    Returns ``(pairs, labeled)`` in matching order; class 0 of the palette is the
    background.
    """
    if n_images <= 0:
        raise ConfigError("n_images must be positive")
    palette = list(class_palette)
    if len(palette) < 2:
        raise ConfigError("palette needs a background and at least one class")
    if len({p.color for p in palette}) != len(palette) or len({p.name for p in palette}) != len(palette):
        raise ConfigError("palette names and colors must be distinct")
    names = [p.name for p in palette]
    filler = {w for t in _CAPTION_TEMPLATES for w in extract_words(t.format(""), "keep_all")}
    if filler & set(names):
        raise ConfigError("class names collide with caption template words")
    rng = np.random.default_rng(seed)
    pairs, labeled = [], []
    s = image_size
    for idx in range(n_images):
        labels = np.zeros((s, s), dtype=np.int64)
        n_shapes = int(rng.integers(1, 6))
        for _ in range(n_shapes):
            cls = int(rng.integers(1, len(palette)))
            for _attempt in range(20):
                r = rng.uniform(0.15, 0.28) * s
                cy, cx = rng.uniform(r, s - r, size=2)
                mask = _shape_mask(palette[cls].kind, s, cy, cx, r)
                trial = labels.copy()
                trial[mask] = cls
                # every earlier shape must keep a good part of its pixels visible
                if mask.sum() >= 12 and _shapes_visible(labels, trial, min_visible):
                    labels = trial
                    break
        image = np.empty((s, s, 3), dtype=np.float64)
        for c, p in enumerate(palette):
            image[labels == c] = p.color
        image += rng.normal(0.0, noise_std, size=image.shape)
        image = np.clip(np.rint(image), 0, 255).astype(np.uint8)
        present = [names[c] for c in sorted(set(np.unique(labels).tolist()) - {0})]
        order = rng.permutation(len(present))
        caption = _CAPTION_TEMPLATES[int(rng.integers(len(_CAPTION_TEMPLATES)))].format(
            _join_names([present[i] for i in order]))
        iid = f"synth{idx:05d}"
        pairs.append(ImageTextPair(iid, image, caption))
        labeled.append(LabeledImage(image, labels, names, id=iid))
    return pairs, labeled


def _shapes_visible(before, after, min_visible):
    for c in np.unique(before):
        if c == 0:
            continue
        if (after == c).sum() < min_visible * (before == c).sum():
            return False
    return True


def write_dataset(out_dir, pairs, labeled=None, class_names=None):
    """Write pairs (and optional label maps) as PNGs plus ``manifest.jsonl``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for i, pair in enumerate(pairs):
        rec = {"id": pair.id, "image": f"images/{pair.id}.png", "text": pair.caption}
        write_image(out / rec["image"], pair.image)
        if labeled is not None:
            rec["labels"] = f"labels/{pair.id}.png"
            write_label_png(out / rec["labels"], labeled[i].labels)
        records.append(rec)
    write_manifest(out / "manifest.jsonl", records)
    names = class_names or (labeled[0].class_names if labeled else None)
    if names:
        write_class_names(out / "classes.txt", names)
    return out / "manifest.jsonl"


def normalize_image(image: np.ndarray) -> np.ndarray:
    """uint8 HxWx3 -> float CxHxW scaled to roughly zero mean, unit spread."""
    x = np.asarray(image, dtype=np.float64) / 255.0
    return ((x - 0.5) / 0.25).transpose(2, 0, 1)


@dataclass
class Batch:
    """Stacked training inputs: images (B,3,H,W), tokens (B,L), eos (B,), pseudo (B,H',W')."""
    images: np.ndarray
    token_ids: np.ndarray
    eos_index: np.ndarray
    pseudo: list = field(default_factory=list)
    ids: list = field(default_factory=list)
