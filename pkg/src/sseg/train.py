"""Joint training from pseudo-masks and captions."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from . import checkpoint as ckpt
from .config import dump_config, save_config
from .data import (ImageTextPair, Vocabulary, crop_resize, extract_words, normalize_image,
                   random_resized_crop_box, tokenize)
from .errors import ConfigError, InputError, NonFiniteLossError
from .losses import LossReport, LossWeights, contrastive_loss, cost_matrix, mask_loss, onehot_labels, total_loss
from .matching import hungarian
from .model import ModelConfig, SSegModel, init_params
from .pseudomask import (ColorPositionExtractor, PseudoMaskCache, TorchScriptExtractor,
                         canonical_relabel, generate_pseudo_masks)

log = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class DataConfig:
    image_size: int = 64
    augment: bool = True
    crop_scale_min: float = 0.5
    caption_mode: str = "content_words"
    vocab_size: int = 8192


@dataclass
class PseudoConfig:
    k: int = 8
    backbone: str = "colorpos"  # colorpos | path to a TorchScript ViT
    stride: int = 2
    position_weight: float = 0.1
    seed: int = 0
    n_init: int = 3
    cache_dir: str = ""
    source: str = "crop"  # crop: cluster the augmented view; source: cluster the full image, then crop


@dataclass
class TrainConfig:
    seed: int = 0
    epochs: int = 30
    batch_size: int = 32
    optimizer: str = "adamw"
    base_lr: float = 5e-4
    min_lr: float = 0.0
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    schedule: str = "cosine"
    warmup_epochs: float = 2.0
    grad_clip: float = 1.0
    dtype: str = "float32"
    checkpoint_every: int = 0  # steps; 0 = once per epoch
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    data: DataConfig = field(default_factory=DataConfig)
    pseudo: PseudoConfig = field(default_factory=PseudoConfig)

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be positive")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2 (contrastive negatives)")
        if self.optimizer != "adamw":
            raise ConfigError(f"unsupported optimizer {self.optimizer!r}")
        if self.schedule != "cosine":
            raise ConfigError(f"unsupported schedule {self.schedule!r}")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(DTYPES)}")
        if self.pseudo.source not in ("crop", "source"):
            raise ConfigError("pseudo.source must be 'crop' or 'source'")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")

    @property
    def torch_dtype(self):
        return DTYPES[self.dtype]


def lr_at(step, base_lr, warmup_steps, total_steps, min_lr=0.0):
    """Linear warmup from 0, then cosine decay to ``min_lr`` at ``total_steps``."""
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    if total_steps <= warmup_steps:
        return base_lr
    progress = min(1.0, (step - warmup_steps) / (total_steps - warmup_steps))
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * progress))


def make_backbone(pc: PseudoConfig):
    if pc.backbone == "colorpos":
        return ColorPositionExtractor(pc.stride, pc.position_weight)
    return TorchScriptExtractor(pc.backbone, pc.stride)


def majority_pool(labels, cell):
    """Downsample a label map by ``cell`` using the per-cell majority (ties -> lower label)."""
    H, W = labels.shape
    if H % cell or W % cell:
        raise InputError(f"label map {H}x{W} not divisible by {cell}")
    k = int(labels.max()) + 1
    h, w = H // cell, W // cell
    blocks = labels.reshape(h, cell, w, cell).transpose(0, 2, 1, 3).reshape(h, w, cell * cell)
    counts = (blocks[..., None] == np.arange(k)).sum(axis=2)
    return counts.argmax(axis=-1)


# ----------------------------------------------------------------------------
# state


@dataclass
class TrainState:
    model: SSegModel
    optimizer: torch.optim.Optimizer
    vocab: Vocabulary
    step: int = 0
    total_steps: int = 0
    warmup_steps: int = 0


def make_optimizer(model, config: TrainConfig):
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        (decay if p.ndim >= 2 else no_decay).append(p)
    groups = [{"params": decay, "weight_decay": config.weight_decay},
              {"params": no_decay, "weight_decay": 0.0}]
    return torch.optim.AdamW(groups, lr=config.base_lr, betas=(config.beta1, config.beta2),
                             eps=1e-8, foreach=False)


def init_state(config: TrainConfig, vocab: Vocabulary, n_samples: int) -> TrainState:
    mc = config.model
    if mc.vocab_size != len(vocab):
        mc = type(mc)(**{**mc.to_dict(), "vocab_size": len(vocab)})
    model = init_params(mc, config.seed, config.torch_dtype)
    spe = steps_per_epoch(n_samples, config.batch_size)
    return TrainState(model, make_optimizer(model, config), vocab, 0, spe * config.epochs,
                      int(round(config.warmup_epochs * spe)))


def steps_per_epoch(n, batch_size):
    return math.ceil(n / batch_size)


# ----------------------------------------------------------------------------
# batches


@dataclass
class TrainBatch:
    images: torch.Tensor  # (B, 3, H, W)
    token_ids: torch.Tensor  # (B, L)
    eos_index: torch.Tensor  # (B,)
    pseudo: list  # per image (h', w') int maps at mask resolution, labels 0..K-1
    ids: list = field(default_factory=list)


class PseudoProvider:
    """Pseudo-masks for full images, memoized in memory and optionally on disk."""

    def __init__(self, pc: PseudoConfig):
        self.pc = pc
        self.backbone = make_backbone(pc)
        self.disk = (PseudoMaskCache(pc.cache_dir, self.backbone, pc.k, pc.seed, pc.n_init)
                     if pc.cache_dir else None)
        self.memo = {}

    def full(self, image_id, image):
        if image_id not in self.memo:
            if self.disk is not None:
                self.memo[image_id] = self.disk.get(image_id, image).label_map
            else:
                self.memo[image_id] = self.compute(image, image_id)
        return self.memo[image_id]

    def compute(self, image, image_id=""):
        return generate_pseudo_masks(image, self.backbone, self.pc.k, self.pc.seed, image_id,
                                     n_init=self.pc.n_init).label_map


def build_batch(pairs: Sequence[ImageTextPair], tokens, indices, step, config: TrainConfig,
                provider: PseudoProvider) -> TrainBatch:
    size = config.data.image_size
    mstride = config.model.mask_stride
    images, ids, eos, pseudo = [], [], [], []
    for slot, i in enumerate(indices):
        pair = pairs[i]
        img = pair.image
        rng = np.random.default_rng([config.seed, 1, step, slot])
        full_view = not config.data.augment
        if full_view:
            box = (0, 0, img.shape[0], img.shape[1])
        else:
            box = random_resized_crop_box(img.shape[0], img.shape[1], rng,
                                          (config.data.crop_scale_min, 1.0))
        view = img if full_view and img.shape[:2] == (size, size) else crop_resize(img, box, size)
        if full_view or config.pseudo.source == "source":
            lab = provider.full(pair.id, img)
            if lab.shape != (size, size) or not full_view:
                lab = crop_resize(lab, box, size, resample=0)  # nearest
        else:
            lab = provider.compute(view, pair.id)
        pm = canonical_relabel(majority_pool(lab, mstride))
        images.append(normalize_image(view))
        ids.append(tokens[i].ids)
        eos.append(tokens[i].eos_index)
        pseudo.append(pm)
    dt = config.torch_dtype
    return TrainBatch(torch.from_numpy(np.stack(images)).to(dt), torch.from_numpy(np.stack(ids)),
                      torch.tensor(eos), pseudo, [pairs[i].id for i in indices])


def batch_indices(n, batch_size, seed, step):
    spe = steps_per_epoch(n, batch_size)
    epoch, pos = divmod(step, spe)
    perm = np.random.default_rng([seed, 0, epoch]).permutation(n)
    return perm[pos * batch_size:(pos + 1) * batch_size], epoch


# ----------------------------------------------------------------------------
# one step


def compute_losses(model: SSegModel, batch: TrainBatch, weights: LossWeights):
    """Forward pass, per-image matching and all loss terms (tensors)."""
    out = model.forward_image(batch.images)
    masks, dices, focals = [], [], []
    for b, pm in enumerate(batch.pseudo):
        logits = out.mask_logits[b]
        onehot = onehot_labels(pm).to(logits.dtype)
        with torch.no_grad():
            costs = cost_matrix(logits.detach(), onehot, weights)
        if not torch.isfinite(costs).all():
            raise FloatingPointError(f"non-finite matching cost for image {b}")
        assignment = hungarian(costs.double().numpy())
        m, d, f = mask_loss(logits, pm, assignment, weights)
        masks.append(m)
        dices.append(d)
        focals.append(f)
    mask = torch.stack(masks).mean()
    visual = model.project_visual(out.mask_features)
    text = model.project_text(model.forward_text(batch.token_ids, batch.eos_index))
    i2t, t2i, con = contrastive_loss(visual, text, model.temperature)
    total = total_loss(mask, con, weights)
    parts = dict(mask=mask, dice=torch.stack(dices).mean(), focal=torch.stack(focals).mean(),
                 i2t=i2t, t2i=t2i, contrastive=con, total=total)
    return total, parts


def train_step(batch: TrainBatch, state: TrainState, config: TrainConfig):
    """One AdamW update. Returns ``(state, LossReport, extras)``."""
    model, opt = state.model, state.optimizer
    lr = lr_at(state.step, config.base_lr, state.warmup_steps, state.total_steps, config.min_lr)
    for group in opt.param_groups:
        group["lr"] = lr
    try:
        total, parts = compute_losses(model, batch, config.loss)
    except FloatingPointError as exc:
        raise NonFiniteLossError(state.step, lr, {"total": float("nan"), "matching_cost": float("nan")}) from exc
    values = {k: float(v.detach()) for k, v in parts.items()}
    if not all(math.isfinite(v) for v in values.values()):
        raise NonFiniteLossError(state.step, lr, values)
    opt.zero_grad(set_to_none=True)
    total.backward()
    params = [p for p in model.parameters() if p.grad is not None]
    max_norm = config.grad_clip if config.grad_clip > 0 else float("inf")
    grad_norm = float(torch.nn.utils.clip_grad_norm_(params, max_norm))
    if not math.isfinite(grad_norm):
        opt.zero_grad(set_to_none=True)
        raise NonFiniteLossError(state.step, lr, {**values, "grad_norm": grad_norm})
    opt.step()
    model.clamp_temperature()
    state.step += 1
    report = LossReport(**values)
    return state, report, {"lr": lr, "grad_norm": grad_norm, "temperature": float(model.temperature.detach())}


# ----------------------------------------------------------------------------
# full loop


def build_vocab_and_tokens(pairs, config: TrainConfig, vocab: Optional[Vocabulary] = None):
    if vocab is None:
        vocab = Vocabulary.build((p.caption for p in pairs), config.data.vocab_size,
                                 config.data.caption_mode)
    tokens = [tokenize(extract_words(p.caption, config.data.caption_mode), vocab,
                       config.model.context_length) for p in pairs]
    return vocab, tokens


def save_train_checkpoint(path, state: TrainState, config: TrainConfig):
    meta = {"step": state.step, "total_steps": state.total_steps,
            "warmup_steps": state.warmup_steps, "train_config": dump_config(config)}
    return ckpt.save_checkpoint(path, state.model, state.vocab, state.optimizer, meta)


def load_train_state(path, config: TrainConfig, n_samples: int) -> TrainState:
    model, vocab, header, arrays = ckpt.load_model(path)
    opt = make_optimizer(model, config)
    ckpt.load_state(model, arrays, opt)
    meta = header["meta"]
    spe = steps_per_epoch(n_samples, config.batch_size)
    total = spe * config.epochs
    if meta.get("total_steps") != total:
        raise ConfigError(f"checkpoint was made for {meta.get('total_steps')} total steps, "
                          f"this run has {total}")
    return TrainState(model, opt, vocab, int(meta["step"]), total, int(meta["warmup_steps"]))


def train(config: TrainConfig, dataset: Sequence[ImageTextPair], out_dir, resume=None,
          max_steps: Optional[int] = None, on_step: Optional[Callable] = None) -> Path:
    """Run the full schedule (or up to ``max_steps``) and return the last checkpoint path.

    Writes ``config.cfg``, ``train_log.jsonl`` (one record per step) and checkpoints
    ``ckpt_step<N>.sseg`` / ``final.sseg`` into ``out_dir``.
    """
    pairs = list(dataset)
    if not pairs:
        raise InputError("training dataset is empty")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(config, out / "config.cfg")
    if resume is not None:
        state = load_train_state(resume, config, len(pairs))
        vocab, tokens = build_vocab_and_tokens(pairs, config, state.vocab)
    else:
        vocab, tokens = build_vocab_and_tokens(pairs, config)
        state = init_state(config, vocab, len(pairs))
    provider = PseudoProvider(config.pseudo)
    spe = steps_per_epoch(len(pairs), config.batch_size)
    every = config.checkpoint_every or spe
    stop = state.total_steps if max_steps is None else min(state.total_steps, max_steps)
    log_path = out / "train_log.jsonl"
    last = None
    with open(log_path, "a" if resume is not None else "w", encoding="utf-8") as logf:
        while state.step < stop:
            t0 = time.perf_counter()
            idx, epoch = batch_indices(len(pairs), config.batch_size, config.seed, state.step)
            batch = build_batch(pairs, tokens, idx, state.step, config, provider)
            step = state.step
            state, report, extra = train_step(batch, state, config)
            rec = {"step": step, "epoch": epoch, **extra, **report.as_dict(),
                   "seconds": round(time.perf_counter() - t0, 4)}
            logf.write(json.dumps(rec) + "\n")
            logf.flush()
            if on_step is not None:
                on_step(rec)
            if state.step % every == 0 and state.step < state.total_steps:
                prev = last
                last = save_train_checkpoint(out / f"ckpt_step{state.step}.sseg", state, config)
                if prev is not None and Path(prev) != Path(last):
                    Path(prev).unlink(missing_ok=True)  # keep only the newest periodic one
    if state.step >= state.total_steps:
        last = save_train_checkpoint(out / "final.sseg", state, config)
    elif last is None or not Path(last).name.endswith(f"step{state.step}.sseg"):
        last = save_train_checkpoint(out / f"ckpt_step{state.step}.sseg", state, config)
    return Path(last)


def read_log(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
