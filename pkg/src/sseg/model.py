"""Query-based mask predictor without a classifier branch, plus the text encoder
and the two projection heads that share a learnable temperature."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, InputError


@dataclass
class ModelConfig:
    n_queries: int = 64
    embed_dim: int = 256
    decoder_layers: int = 6
    text_layers: int = 12
    context_length: int = 77
    vocab_size: int = 8192
    backbone_channels: tuple = (64, 128, 256)
    mask_stride: int = 4
    proj_dim: int = 256
    n_heads: int = 8
    ffn_mult: int = 4
    init_temperature: float = 0.07
    sigma_min: float = 0.01
    sigma_max: float = 100.0
    masked_attention: bool = False  # each query attends only inside its current mask

    def __post_init__(self):
        self.backbone_channels = tuple(int(c) for c in self.backbone_channels)
        ints = [self.n_queries, self.embed_dim, self.decoder_layers, self.text_layers,
                self.context_length, self.vocab_size, self.mask_stride, self.proj_dim,
                self.n_heads, self.ffn_mult, *self.backbone_channels]
        if not self.backbone_channels or min(ints) < 1:
            raise ConfigError("all model dimensions must be >= 1")
        if self.embed_dim % self.n_heads:
            raise ConfigError("embed_dim must be divisible by n_heads")
        if not self.sigma_min <= self.init_temperature <= self.sigma_max:
            raise ConfigError("init_temperature outside [sigma_min, sigma_max]")

    @property
    def backbone_stride(self):
        return 2 ** len(self.backbone_channels)

    @property
    def input_multiple(self):
        """Input sides must be multiples of this."""
        return math.lcm(self.backbone_stride, self.mask_stride)

    def to_dict(self):
        d = asdict(self)
        d["backbone_channels"] = list(self.backbone_channels)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class MaskOutputs:
    mask_logits: torch.Tensor  # (B, N, h, w)
    mask_features: torch.Tensor  # (B, N, D)
    per_pixel: torch.Tensor = field(default=None, repr=False)


def l2_normalize(x, eps=1e-8):
    return x / torch.clamp(x.norm(dim=-1, keepdim=True), min=eps)


def _norm(c):
    return nn.GroupNorm(math.gcd(8, c), c)


class ConvPyramid(nn.Module):
    """Strided convolution stages; stage i emits features at stride 2**(i+1)."""

    def __init__(self, channels, in_channels=3):
        super().__init__()
        stages = []
        prev = in_channels
        for c in channels:
            stages.append(nn.Sequential(
                nn.Conv2d(prev, c, 3, stride=2, padding=1), _norm(c), nn.ReLU(),
                nn.Conv2d(c, c, 3, padding=1), _norm(c), nn.ReLU()))
            prev = c
        self.stages = nn.ModuleList(stages)
        self.channels = tuple(channels)

    def forward(self, x):
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class PixelDecoder(nn.Module):
    """Top-down feature pyramid with 1x1 lateral projections, output at ``mask_stride``."""

    def __init__(self, channels, dim, mask_stride):
        super().__init__()
        self.lateral = nn.ModuleList(nn.Conv2d(c, dim, 1) for c in channels)
        self.smooth = nn.ModuleList(
            nn.Sequential(nn.Conv2d(dim, dim, 3, padding=1), _norm(dim), nn.ReLU())
            for _ in channels[:-1])
        self.out = nn.Conv2d(dim, dim, 3, padding=1)
        self.mask_stride = mask_stride

    def forward(self, feats, image_hw):
        y = self.lateral[-1](feats[-1])
        for i in range(len(feats) - 2, -1, -1):
            lat = self.lateral[i](feats[i])
            y = lat + F.interpolate(y, size=lat.shape[-2:], mode="nearest")
            y = self.smooth[i](y)
        size = (image_hw[0] // self.mask_stride, image_hw[1] // self.mask_stride)
        if tuple(y.shape[-2:]) != size:
            y = F.interpolate(y, size=size, mode="bilinear", align_corners=False)
        return self.out(y)


def sine_position_encoding(h, w, dim, dtype=torch.float32):
    """2-D sinusoidal encoding, (h*w, dim); half the channels encode rows, half columns."""
    if dim % 4:
        raise ConfigError("embed_dim must be divisible by 4 for 2-D sine encodings")
    quarter = dim // 4
    freqs = 1.0 / (10000 ** (torch.arange(quarter, dtype=torch.float64) / quarter))
    ys = torch.arange(h, dtype=torch.float64)[:, None] * freqs[None]
    xs = torch.arange(w, dtype=torch.float64)[:, None] * freqs[None]
    ey = torch.cat([ys.sin(), ys.cos()], dim=1)[:, None, :].expand(h, w, 2 * quarter)
    ex = torch.cat([xs.sin(), xs.cos()], dim=1)[None, :, :].expand(h, w, 2 * quarter)
    return torch.cat([ey, ex], dim=-1).reshape(h * w, dim).to(dtype)


def _mlp(dims):
    layers = []
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        layers.append(nn.Linear(a, b))
        if i < len(dims) - 2:
            layers.append(nn.ReLU())
    return nn.Sequential(*layers)


class SSegModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = c = config
        d = c.embed_dim
        self.backbone = ConvPyramid(c.backbone_channels)
        self.pixel_decoder = PixelDecoder(c.backbone_channels, d, c.mask_stride)
        self.memory_proj = nn.Conv2d(c.backbone_channels[-1], d, 1)
        self.query_embed = nn.Parameter(torch.randn(c.n_queries, d) * 0.02)
        layer = nn.TransformerDecoderLayer(d, c.n_heads, c.ffn_mult * d, dropout=0.0,
                                           batch_first=True)
        self.decoder = nn.TransformerDecoder(layer, c.decoder_layers, norm=nn.LayerNorm(d))
        self.mask_embed = _mlp([d, d, d, d])

        self.token_embedding = nn.Parameter(torch.randn(c.vocab_size, d) * 0.02)
        self.text_pos = nn.Parameter(torch.randn(c.context_length, d) * 0.01)
        tlayer = nn.TransformerEncoderLayer(d, c.n_heads, c.ffn_mult * d, dropout=0.0,
                                            activation="gelu", batch_first=True, norm_first=True)
        self.text_transformer = nn.TransformerEncoder(tlayer, c.text_layers,
                                                      enable_nested_tensor=False)
        self.text_ln = nn.LayerNorm(d)

        self.visual_proj = _mlp([d, d, c.proj_dim])
        self.text_proj = _mlp([d, d, c.proj_dim])
        self.log_temperature = nn.Parameter(torch.tensor(math.log(c.init_temperature)))

    @property
    def temperature(self):
        return self.log_temperature.exp()

    def clamp_temperature(self):
        with torch.no_grad():
            self.log_temperature.clamp_(math.log(self.config.sigma_min),
                                        math.log(self.config.sigma_max))

    # ------------------------------------------------------------------
    def forward_image(self, images) -> MaskOutputs:
        single = images.dim() == 3
        if single:
            images = images[None]
        if images.dim() != 4 or images.shape[1] != 3:
            raise InputError(f"expected (B, 3, H, W) images, got {tuple(images.shape)}")
        H, W = images.shape[-2:]
        m = self.config.input_multiple
        if H % m or W % m:
            raise InputError(f"image size {H}x{W} must be a multiple of {m}; pad first")
        feats = self.backbone(images)
        per_pixel = self.pixel_decoder(feats, (H, W))
        mem = self.memory_proj(feats[-1])
        b, d, h, w = mem.shape
        pos = sine_position_encoding(h, w, d, mem.dtype)
        memory = mem.flatten(2).transpose(1, 2) + pos[None]
        q = self.query_embed[None].expand(b, -1, -1)
        for layer in self.decoder.layers:
            attn_mask = self._attention_mask(q, per_pixel, (h, w)) if self.config.masked_attention else None
            q = layer(q, memory, memory_mask=attn_mask)
        mask_features = self.decoder.norm(q)
        logits = self._mask_logits(mask_features, per_pixel)
        if single:
            return MaskOutputs(logits[0], mask_features[0], per_pixel[0])
        return MaskOutputs(logits, mask_features, per_pixel)

    def _mask_logits(self, mask_features, per_pixel):
        return torch.einsum("bnd,bdhw->bnhw", self.mask_embed(mask_features), per_pixel)

    def _attention_mask(self, q, per_pixel, size):
        """Block memory positions outside each query's current mask (sigmoid < 0.5)."""
        with torch.no_grad():
            logits = self._mask_logits(self.decoder.norm(q), per_pixel)
            logits = F.interpolate(logits, size=size, mode="bilinear", align_corners=False)
            blocked = (logits < 0).flatten(2)
            blocked[blocked.all(dim=-1)] = False  # an empty mask attends everywhere
        return blocked.repeat_interleave(self.config.n_heads, dim=0)

    def forward_text(self, token_ids, eos_index):
        """Text feature at the end-of-sequence position; accepts (L,) or (B, L) ids."""
        token_ids = torch.as_tensor(token_ids)
        eos_index = torch.as_tensor(eos_index)
        single = token_ids.dim() == 1
        if single:
            token_ids, eos_index = token_ids[None], eos_index.reshape(1)
        L = token_ids.shape[1]
        if L > self.config.context_length:
            raise InputError("token sequence longer than the context length")
        x = self.token_embedding[token_ids] + self.text_pos[:L][None]
        causal = torch.triu(torch.full((L, L), float("-inf"), dtype=x.dtype), diagonal=1)
        x = self.text_transformer(x, mask=causal, is_causal=True)
        x = self.text_ln(x)
        out = x[torch.arange(x.shape[0]), eos_index]
        return out[0] if single else out

    def project_visual(self, mask_features):
        """Mean over the N mask features, MLP, L2-normalize. (N, D) or (B, N, D)."""
        return l2_normalize(self.visual_proj(mask_features.mean(dim=-2)))

    def project_masks(self, mask_features):
        """Per-mask projection used at inference: each feature projected on its own."""
        return l2_normalize(self.visual_proj(mask_features))

    def project_text(self, text_feature):
        return l2_normalize(self.text_proj(text_feature))

    def text_groups(self):
        """Names of parameters belonging to the text branch."""
        return [n for n, _ in self.named_parameters()
                if n.startswith(("token_embedding", "text_pos", "text_transformer", "text_ln", "text_proj"))]


def init_params(config: ModelConfig, seed=0, dtype=torch.float32) -> SSegModel:
    """Build a freshly initialized model; identical for identical seeds."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = SSegModel(config)
    return model.to(dtype)


def forward_image(image, model: SSegModel) -> MaskOutputs:
    return model.forward_image(image)


def forward_text(tokens, model: SSegModel):
    return model.forward_text(torch.as_tensor(tokens.ids), tokens.eos_index)


def project_visual(mask_features, model: SSegModel):
    return model.project_visual(mask_features)


def project_text(text_feature, model: SSegModel):
    return model.project_text(text_feature)


def images_to_tensor(images, dtype=torch.float32):
    """Stack uint8 HxWx3 images into a normalized (B, 3, H, W) tensor."""
    from .data import normalize_image

    arr = np.stack([normalize_image(im) for im in images])
    return torch.from_numpy(arr).to(dtype)
