"""The full counter: encoder -> prototypes -> correlation + max -> density head."""

from __future__ import annotations

import numpy as np

from . import nn
from . import tensor as T
from .config import ModelConfig
from .decode import DensityMap, RegressionHead, estimate_count, match_and_fuse
from .encoder import ImageEncoder
from .ope import PrototypeExtractor, as_box_array
from .tensor import Tensor


class LowShotCounter(nn.Module):
    def __init__(self, cfg: ModelConfig, seed=0):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.encoder = ImageEncoder(cfg.encoder, rng, attention=cfg.variant != "no_att",
                                    output_norm=cfg.output_norm)
        self.ope = PrototypeExtractor(cfg, rng)
        self.head = RegressionHead(cfg.encoder.channels, cfg.decoder_widths, rng, cfg.leaky_slope)
        self._dropout_rng = np.random.default_rng(seed + 1)

    @property
    def dropout_rng(self):
        return self._dropout_rng

    def encode(self, images):
        rng = self._dropout_rng if self.training else None
        return self.encoder(_as_batch(images), rng)

    def prototypes(self, feats, boxes, iterations=None):
        boxes = _normalise_boxes(boxes, feats.shape[0])
        return self.ope(feats, boxes, self.encoder.pos, iterations)

    def densities(self, feats, proto_list):
        """Density maps (B, H, W) for each prototype tensor, decoded in one pass."""
        fused = [match_and_fuse(feats, p) for p in proto_list]
        b = feats.shape[0]
        stacked = fused[0] if len(fused) == 1 else T.concat(fused, axis=0)
        maps = self.head(stacked)
        if len(fused) == 1:
            return [maps]
        return [maps[i * b : (i + 1) * b] for i in range(len(fused))]

    def forward(self, images, boxes, aux=True, iterations=None):
        """Return ``(final, aux_maps, prototype_set)``.

        ``final`` is (B, H_IN, W_IN); ``aux_maps`` lists the maps decoded from
        intermediate iterations 1..L-1 (empty when ``aux`` is False).
        """
        feats = self.encode(images)
        ps = self.prototypes(feats, boxes, iterations)
        wanted = ps.intermediates if aux else [ps.prototypes]
        maps = self.densities(feats, wanted)
        return maps[-1], maps[:-1], ps

    __call__ = forward

    def predict(self, image, boxes=()):
        """Single image (H_IN, W_IN, 3) in [0, 1] -> (DensityMap, count). Eval mode."""
        was = self.training
        self.eval()
        try:
            with T.no_grad():
                final, _, _ = self.forward(image, [boxes] if len(boxes) else None, aux=False)
        finally:
            self.train(was)
        dm = DensityMap(Tensor(final.data[0]))
        return dm, estimate_count(dm)

    def predict_batch(self, images, boxes):
        was = self.training
        self.eval()
        try:
            with T.no_grad():
                final, _, _ = self.forward(images, boxes, aux=False)
        finally:
            self.train(was)
        return final.data


def _as_batch(images):
    x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=np.float32))
    if x.ndim == 3:
        x = x.reshape((1,) + x.shape)
    return x


def _normalise_boxes(boxes, batch):
    if boxes is None:
        return None
    boxes = list(boxes)
    if len(boxes) != batch:
        raise ValueError(f"got exemplar lists for {len(boxes)} images, batch has {batch}")
    if all(len(b) == 0 for b in boxes):
        return None
    return [as_box_array(b) for b in boxes]


def predict(image, boxes, model: LowShotCounter):
    return model.predict(image, boxes)
