"""Image encoder: strided-conv backbone, multi-scale fusion, global self-attention."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import nn
from . import tensor as T
from .config import EncoderConfig
from .tensor import ShapeError, Tensor


@dataclass
class EncodedImage:
    features: Tensor  # (h, w, d)
    source_id: str = ""
    config_hash: str = ""


def sine_position_encoding(h, w, d, temperature=10000.0):
    """Fixed 2-D sine/cosine encoding, (h*w, d): first half rows, second half columns."""
    if d % 4:
        raise ValueError(f"2-D sine encodings need d divisible by 4, got {d}")
    half = d // 2
    scale = 2 * math.pi
    y = (np.arange(1, h + 1, dtype=np.float64) / (h + 1e-6)) * scale
    x = (np.arange(1, w + 1, dtype=np.float64) / (w + 1e-6)) * scale
    dim_t = temperature ** (2 * (np.arange(half) // 2) / half)
    py = y[:, None] / dim_t
    px = x[:, None] / dim_t
    py = np.where(np.arange(half) % 2 == 0, np.sin(py), np.cos(py))
    px = np.where(np.arange(half) % 2 == 0, np.sin(px), np.cos(px))
    pos = np.concatenate(
        [np.broadcast_to(py[:, None, :], (h, w, half)), np.broadcast_to(px[None, :, :], (h, w, half))], axis=-1
    )
    return pos.reshape(h * w, d).astype(np.float32)


class Backbone(nn.Module):
    """Four blocks of [3x3 stride-2 conv, ReLU, 3x3 conv, ReLU]."""

    def __init__(self, widths, rng):
        cin = 3
        self.blocks = []
        for c in widths:
            blk = nn.Module()
            blk.conv1 = nn.Conv2d(cin, c, 3, rng, stride=2)
            blk.conv2 = nn.Conv2d(c, c, 3, rng)
            self.blocks.append(blk)
            cin = c

    def __call__(self, x):
        outs = []
        for blk in self.blocks:
            x = T.relu(blk.conv2(T.relu(blk.conv1(x))))
            outs.append(x)
        return outs[1:]  # strides 4, 8, 16


class EncoderLayer(nn.Module):
    """Pre-norm transformer encoder layer; positions go into queries and keys."""

    def __init__(self, d, heads, hidden, dropout, rng):
        self.norm1 = nn.LayerNorm(d)
        self.attn = nn.MultiHeadAttention(d, heads, rng)
        self.norm2 = nn.LayerNorm(d)
        self.ffn = nn.FeedForward(d, hidden, rng)
        self.p = dropout

    def __call__(self, x, pos, rng):
        train = self.training and rng is not None
        y = self.norm1(x)
        x = x + T.dropout(self.attn(y, y, y, q_pos=pos, k_pos=pos), self.p, train, rng)
        x = x + T.dropout(self.ffn(self.norm2(x)), self.p, train, rng)
        return x


class ImageEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig, rng, attention=True, output_norm=False):
        cfg.validate()
        self.cfg = cfg
        self.backbone = Backbone(cfg.backbone_widths, rng)
        self.project = nn.Conv2d(sum(cfg.backbone_widths[1:]), cfg.channels, 1, rng)
        self.layers = [
            EncoderLayer(cfg.channels, cfg.heads, cfg.ffn_hidden, cfg.dropout, rng) for _ in range(cfg.layers if attention else 0)
        ]
        # pre-norm stacks leave the residual stream unnormalised; close with one LayerNorm
        self.norm = nn.LayerNorm(cfg.channels) if output_norm and self.layers else None
        self._pos = Tensor(sine_position_encoding(cfg.feature_size, cfg.feature_size, cfg.channels), dtype=np.float32)

    @property
    def pos(self):
        return self._pos

    def backbone_forward(self, image):
        size = self.cfg.input_size
        if image.shape[-3:] != (size, size, 3):
            raise ShapeError(f"expected image (..., {size}, {size}, 3), got {image.shape}")
        return self.backbone(image)

    def fuse_and_project(self, scales):
        if len(scales) != 3:
            raise ShapeError(f"expected 3 scale maps, got {len(scales)}")
        h = self.cfg.feature_size
        resized = [T.bilinear_resize(s, h, h) for s in scales]
        return self.project(T.concat(resized, axis=-1))

    def global_self_attention(self, x, rng=None):
        h, w, d = x.shape[-3:]
        lead = x.shape[:-3]
        tokens = x.reshape(lead + (h * w, d))
        pos = self._pos if (h, w) == (self.cfg.feature_size,) * 2 else Tensor(sine_position_encoding(h, w, d))
        for layer in self.layers:
            tokens = layer(tokens, pos, rng)
        if self.norm is not None:
            tokens = self.norm(tokens)
        return tokens.reshape(lead + (h, w, d))

    def __call__(self, image, rng=None):
        """(H_IN, W_IN, 3) or (B, H_IN, W_IN, 3) -> (..., h, w, d)."""
        return self.global_self_attention(self.fuse_and_project(self.backbone_forward(image)), rng)


# module-level forms of the encoder operations
def backbone_forward(image, encoder: ImageEncoder):
    return encoder.backbone_forward(image)


def fuse_and_project(scales, encoder: ImageEncoder):
    return encoder.fuse_and_project(scales)


def global_self_attention(x, encoder: ImageEncoder, rng=None, source_id=""):
    feats = encoder.global_self_attention(x, rng)
    return EncodedImage(feats, source_id=source_id, config_hash=_cfg_hash(encoder.cfg))


def _cfg_hash(cfg):
    return hashlib.sha1(json.dumps(asdict(cfg), sort_keys=True).encode()).hexdigest()[:12]


def encode(image, encoder: ImageEncoder, rng=None, source_id=""):
    return EncodedImage(encoder(image, rng), source_id=source_id, config_hash=_cfg_hash(encoder.cfg))
