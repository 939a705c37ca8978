"""Class-agnostic pseudo-masks from K-means over backbone feature tokens."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from .data import read_label_png, write_label_png
from .errors import InputError, SSegError
from .evaluation import EvalReport, WITH_BACKGROUND, accumulate_labels, miou

log = logging.getLogger(__name__)

# k-means++ restarts used by the pseudo-mask generator
N_INIT = 3


@dataclass
class FeatureTokens:
    grid: np.ndarray  # h x w x d
    stride: int


@dataclass
class PseudoMaskSet:
    label_map: np.ndarray
    k: int


@dataclass
class KMeansResult:
    assignments: np.ndarray
    centroids: np.ndarray
    inertia: float
    n_iter: int = 0
    inertia_history: list = field(default_factory=list)


class FeatureExtractor(Protocol):
    id: str
    stride: int

    def __call__(self, image: np.ndarray) -> FeatureTokens: ...


class ColorPositionExtractor:
    """Per-patch mean RGB, RGB standard deviation and weighted (row, col) position; d = 8."""

    def __init__(self, stride=2, position_weight=0.1):
        self.stride = int(stride)
        self.position_weight = float(position_weight)

    @property
    def id(self):
        return f"colorpos-s{self.stride}-w{self.position_weight:g}"

    def __call__(self, image):
        s = self.stride
        H, W = image.shape[:2]
        if H % s or W % s:
            raise InputError(f"image {H}x{W} is not a multiple of stride {s}")
        h, w = H // s, W // s
        patches = (np.asarray(image, dtype=np.float64) / 255.0).reshape(h, s, w, s, 3)
        mean = patches.mean(axis=(1, 3))
        std = patches.std(axis=(1, 3))
        rows, cols = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
        pos = self.position_weight * np.stack([rows, cols], axis=-1)
        return FeatureTokens(np.concatenate([mean, std, pos], axis=-1), s)


class TorchScriptExtractor:
    """Adapter for an externally supplied self-supervised ViT exported with TorchScript.

    The module receives a normalized ``(1, 3, H, W)`` float tensor and must return either
    patch tokens ``(1, h*w [+1], d)`` (a leading class token is dropped) or a feature map
    ``(1, d, h, w)``.
    """

    def __init__(self, path, stride=8, mean=(0.485, 0.456, 0.406), std=(0.229, 0.224, 0.225),
                 module=None):
        import torch

        self._torch = torch
        self.path = str(path)
        self.stride = int(stride)
        self.mean = np.asarray(mean, dtype=np.float32)
        self.std = np.asarray(std, dtype=np.float32)
        self.module = module if module is not None else torch.jit.load(self.path, map_location="cpu")
        self.module.eval()

    @property
    def id(self):
        return f"ts-{Path(self.path).stem}-s{self.stride}"

    def __call__(self, image):
        torch = self._torch
        H, W = image.shape[:2]
        h, w = H // self.stride, W // self.stride
        x = (np.asarray(image, dtype=np.float32) / 255.0 - self.mean) / self.std
        with torch.no_grad():
            out = self.module(torch.from_numpy(x.transpose(2, 0, 1).copy())[None])
        out = out.detach().cpu().numpy().astype(np.float64)
        if out.ndim == 4:
            grid = out[0].transpose(1, 2, 0)
        elif out.ndim == 3:
            tokens = out[0]
            if tokens.shape[0] == h * w + 1:
                tokens = tokens[1:]
            if tokens.shape[0] != h * w:
                raise InputError(f"backbone returned {tokens.shape[0]} tokens, expected {h * w}")
            grid = tokens.reshape(h, w, -1)
        else:
            raise InputError(f"unsupported backbone output shape {out.shape}")
        return FeatureTokens(grid, self.stride)


def pad_to_multiple(image, stride):
    H, W = image.shape[:2]
    ph, pw = (-H) % stride, (-W) % stride
    if ph == 0 and pw == 0:
        return image
    pad = ((0, ph), (0, pw)) + ((0, 0),) * (image.ndim - 2)
    return np.pad(image, pad, mode="edge")


def extract_features(image, backbone: FeatureExtractor, image_id="") -> FeatureTokens:
    padded = pad_to_multiple(np.asarray(image), backbone.stride)
    try:
        return backbone(padded)
    except SSegError:
        raise
    except Exception as exc:
        raise SSegError(f"backbone {backbone.id} failed on image {image_id!r}: {exc}") from exc


# --------------------------------------------------------------------------
# K-means


def _sq_dists(points, centroids):
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _kmeanspp(points, k, rng):
    n = len(points)
    centroids = [points[int(rng.integers(n))]]
    closest = _sq_dists(points, centroids[0][None])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=closest / total))
        centroids.append(points[idx])
        closest = np.minimum(closest, _sq_dists(points, points[idx][None])[:, 0])
    return np.array(centroids)


def _assign(points, centroids):
    d = _sq_dists(points, centroids)
    assign = d.argmin(axis=1)
    best = d[np.arange(len(points)), assign]
    k = len(centroids)
    counts = np.bincount(assign, minlength=k)
    for c in np.flatnonzero(counts == 0):
        # refill with the point farthest from its centroid, never emptying a cluster
        movable = counts[assign] > 1
        cand = np.where(movable, best, -1.0)
        idx = int(cand.argmax())
        counts[assign[idx]] -= 1
        assign[idx] = c
        counts[c] += 1
        best[idx] = 0.0
        centroids[c] = points[idx]
    return assign, float(best.sum())


def kmeans(points, k, seed=0, max_iters=100, tol=1e-6, n_init=1) -> KMeansResult:
    """Lloyd iterations from a k-means++ start; deterministic given ``seed``.

    With ``n_init > 1`` the run with the lowest final inertia among ``n_init``
    independent k-means++ starts is returned (first one wins ties).
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points[:, None]
    n = len(points)
    if k < 1 or n < k:
        raise InputError(f"k-means needs 1 <= k <= n points (k={k}, n={n})")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, n_init)):
        res = _lloyd(points, _kmeanspp(points, k, rng), max_iters, tol)
        if best is None or res.inertia < best.inertia:
            best = res
    return best


def _lloyd(points, centroids, max_iters, tol):
    k = len(centroids)
    history = []
    n_iter = 0
    for n_iter in range(1, max_iters + 1):
        assign, inertia = _assign(points, centroids)
        history.append(inertia)
        new = np.stack([points[assign == c].mean(axis=0) for c in range(k)])
        shift = float(np.sqrt(((new - centroids) ** 2).sum(axis=1)).max())
        centroids = new
        if shift < tol:
            break
    assign, inertia = _assign(points, centroids)
    history.append(inertia)
    return KMeansResult(assign, centroids, inertia, n_iter, history)


# --------------------------------------------------------------------------
# pseudo-masks


def upsample_labels(label_map, target_h, target_w):
    label_map = np.asarray(label_map)
    h, w = label_map.shape
    if target_h < h or target_w < w:
        raise InputError("upsample target must not be smaller than the source")
    rows = np.arange(target_h) * h // target_h
    cols = np.arange(target_w) * w // target_w
    return label_map[rows[:, None], cols[None, :]]


def canonical_relabel(label_map):
    """Renumber labels 0, 1, ... by first occurrence in a row-major scan."""
    flat = np.asarray(label_map).ravel()
    uniq, first = np.unique(flat, return_index=True)
    order = uniq[np.argsort(first)]
    lookup = np.empty(int(uniq.max()) + 1, dtype=np.int64)
    lookup[order] = np.arange(len(order))
    return lookup[label_map]


def generate_pseudo_masks(image, backbone: FeatureExtractor, k=8, seed=0, image_id="",
                          max_iters=100, tol=1e-6, n_init=N_INIT) -> PseudoMaskSet:
    H, W = image.shape[:2]
    feats = extract_features(image, backbone, image_id)
    h, w, d = feats.grid.shape
    if h * w < k:
        raise InputError(f"image {image_id!r} yields {h * w} tokens, fewer than k={k}")
    res = kmeans(feats.grid.reshape(-1, d), k, seed, max_iters, tol, n_init)
    token_map = res.assignments.reshape(h, w)
    full = upsample_labels(token_map, h * feats.stride, w * feats.stride)[:H, :W]
    labels = canonical_relabel(full)
    return PseudoMaskSet(labels, int(labels.max()) + 1)


def oracle_relabel(pseudo: PseudoMaskSet, gt_labels, n_classes, ignore_value=255):
    """Give each pseudo-segment the ground-truth class it overlaps most (ties -> lower index)."""
    seg = np.asarray(pseudo.label_map)
    gt = np.asarray(gt_labels)
    if seg.shape != gt.shape:
        raise InputError(f"pseudo-mask shape {seg.shape} != ground truth shape {gt.shape}")
    valid = gt != ignore_value
    n_seg = int(seg.max()) + 1
    votes = np.bincount(seg[valid] * n_classes + gt[valid], minlength=n_seg * n_classes)
    votes = votes.reshape(n_seg, n_classes)
    seg_class = votes.argmax(axis=1)  # argmax returns the first maximum
    return seg_class[seg]


def oracle_miou(pseudo: PseudoMaskSet, gt) -> float:
    n = len(gt.class_names)
    relabeled = oracle_relabel(pseudo, gt.labels, n, gt.ignore_value)
    report = EvalReport(list(gt.class_names), WITH_BACKGROUND, background_class=None)
    accumulate_labels(report, relabeled, gt.labels, gt.ignore_value)
    return miou(report)


# --------------------------------------------------------------------------
# disk cache


class PseudoMaskCache:
    """Label-PNG cache laid out as ``<root>/<backbone_id>/k<k>[-s<seed>][-n<n_init>]/<id>.png``."""

    def __init__(self, root, backbone: FeatureExtractor, k=8, seed=0, n_init=N_INIT):
        self.root = Path(root)
        self.backbone = backbone
        self.k = k
        self.seed = seed
        self.n_init = n_init
        kdir = f"k{k}" if seed == 0 else f"k{k}-s{seed}"
        if n_init != N_INIT:
            kdir += f"-n{n_init}"
        self.dir = self.root / backbone.id / kdir

    def path(self, image_id):
        return self.dir / f"{image_id}.png"

    def get(self, image_id, image) -> PseudoMaskSet:
        p = self.path(image_id)
        if p.exists():
            labels = read_label_png(p)
            return PseudoMaskSet(labels, int(labels.max()) + 1)
        pm = generate_pseudo_masks(image, self.backbone, self.k, self.seed, image_id,
                                   n_init=self.n_init)
        write_label_png(p, pm.label_map)
        return pm
