"""Object prototype extraction.

Exemplar boxes become shape queries (an MLP over box width/height) and
appearance queries (RoI-pooled encoder features). An iterative block then
adapts the prototypes:

    Q'  = MHA(LN(Q), QA, QA) + Q          exemplar appearance
    Q'' = MHA(LN(Q'), F, F) + Q'          image-wide features (keys get positions)
    Q   = FFN(LN(Q'')) + Q''

starting from the shape queries. Each iteration's Q is read out through a
shared output LayerNorm (when ``output_norm`` is set) to give that
iteration's prototypes; the residual stream itself stays unnormalised.
Zero-shot mode drops the first step and starts
from trainable objectness queries. All tensors carry a leading batch axis B;
queries are (B, n*s*s, d).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class ExemplarBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        for v in (self.x1, self.y1, self.x2, self.y2):
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"box coordinates must lie in [0, 1], got {self.as_tuple()}")
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ValueError(f"degenerate box {self.as_tuple()}")

    @property
    def width(self):
        return self.x2 - self.x1

    @property
    def height(self):
        return self.y2 - self.y1

    def as_tuple(self):
        return (self.x1, self.y1, self.x2, self.y2)

    def hflip(self):
        return ExemplarBox(1.0 - self.x2, self.y1, 1.0 - self.x1, self.y2)


@dataclass
class PrototypeSet:
    prototypes: Tensor  # (B, n, s, s, d)
    intermediates: list = field(default_factory=list)  # L tensors, each (B, n, s, s, d)
    mode: str = "few-shot"

    @property
    def n(self):
        return self.prototypes.shape[-4]


def as_box_array(boxes):
    arr = np.asarray([b.as_tuple() if isinstance(b, ExemplarBox) else tuple(b) for b in boxes], dtype=np.float64)
    arr = arr.reshape(-1, 4)
    for b in arr:
        ExemplarBox(*b)  # validates
    return arr


class AdaptBlock(nn.Module):
    def __init__(self, d, heads, hidden, rng):
        self.norm_a = nn.LayerNorm(d)
        self.attn_a = nn.MultiHeadAttention(d, heads, rng)
        self.norm_f = nn.LayerNorm(d)
        self.attn_f = nn.MultiHeadAttention(d, heads, rng)
        self.norm_o = nn.LayerNorm(d)
        self.ffn = nn.FeedForward(d, hidden, rng)

    def appearance_step(self, q, qa):
        return self.attn_a(self.norm_a(q), qa, qa) + q

    def image_step(self, q, feats, pos):
        return self.attn_f(self.norm_f(q), feats, feats, k_pos=pos) + q

    def ffn_step(self, q):
        return self.ffn(self.norm_o(q)) + q


class PrototypeExtractor(nn.Module):
    def __init__(self, cfg, rng):
        d = cfg.encoder.channels
        s = cfg.prototype_size
        self.s = s
        self.d = d
        self.iterations = cfg.iterations
        self.variant = cfg.variant
        self.shape_mlp = [nn.Linear(2, cfg.shape_hidden, rng), nn.Linear(cfg.shape_hidden, d, rng), nn.Linear(d, s * s * d, rng)]
        n_blocks = 1 if cfg.shared_iterations else cfg.iterations
        heads, hidden = cfg.encoder.heads, cfg.encoder.ffn_hidden
        self.blocks = [AdaptBlock(d, heads, hidden, rng) for _ in range(n_blocks)]
        self.out_norm = nn.LayerNorm(d) if cfg.output_norm else None
        self.objectness = nn.Parameter(rng.standard_normal((cfg.zero_shot_queries, s, s, d)) * 0.1)
        if cfg.variant == "pre_shape":
            self.shape_template = nn.Parameter(rng.standard_normal((s, s, d)) * 0.1)

    def block(self, i):
        return self.blocks[i if len(self.blocks) > 1 else 0]

    # -- queries ------------------------------------------------------------
    def shape_query(self, wh):
        """``wh`` (..., 2) normalised widths/heights -> (..., s, s, d)."""
        x = wh
        for layer in self.shape_mlp:
            x = T.relu(layer(x))
        return x.reshape(wh.shape[:-1] + (self.s, self.s, self.d))

    def appearance_query(self, feats, boxes):
        """``feats`` (h, w, d), ``boxes`` (n, 4) -> (n, s, s, d)."""
        return T.roi_pool(feats, boxes, self.s)

    def _queries(self, feats, boxes):
        b = feats.shape[0]
        n = boxes[0].shape[0]
        for bx in boxes:
            if bx.shape[0] != n:
                raise ShapeError("every image in a batch needs the same number of exemplars")
        qa = T.stack([self.appearance_query(feats[i], boxes[i]) for i in range(b)])  # B, n, s, s, d
        if self.variant == "pre_shape":
            qs = T.stack([self.shape_template] * n)
            qs = T.stack([qs] * b)
        else:
            wh = np.stack([np.stack([bx[:, 2] - bx[:, 0], bx[:, 3] - bx[:, 1]], axis=-1) for bx in boxes])
            qs = self.shape_query(Tensor(wh))
        return qs, qa

    # -- adaptation ---------------------------------------------------------
    def adapt(self, q_shape, q_app, feats, pos, iterations=None, mode="attention"):
        """Run the iterative adaptation.

        ``mode``: "attention" (all three steps every iteration), "sum" (first
        iteration's appearance step replaced by Q^A + Q^S), "skip" (appearance
        step never run; ``q_shape`` is the starting Q').
        """
        L = iterations or self.iterations
        b = feats.shape[0]
        h, w, d = feats.shape[1:]
        f_tokens = feats.reshape(b, h * w, d)
        n = q_shape.shape[1] if q_shape is not None else q_app.shape[1]
        s = self.s
        q = q_shape.reshape(b, n * s * s, d)
        qa = None if q_app is None else q_app.reshape(b, n * s * s, d)
        if mode == "attention" and (qa is None or qa.shape != q.shape):
            raise ShapeError("shape and appearance query counts differ")
        inter = []
        for it in range(L):
            blk = self.block(it)
            if mode == "attention" or (mode == "sum" and it > 0):
                q = blk.appearance_step(q, qa)
            elif mode == "sum":
                q = q + qa
            q = blk.image_step(q, f_tokens, pos)
            q = blk.ffn_step(q)
            out = self.out_norm(q) if self.out_norm is not None else q
            inter.append(out.reshape(b, n, s, s, d))
        return inter

    def __call__(self, feats, boxes, pos, iterations=None):
        """``feats`` (B, h, w, d); ``boxes``: list of B (n, 4) arrays, or None for zero-shot."""
        b = feats.shape[0]
        if boxes is None or len(boxes[0]) == 0:
            queries = T.stack([self.objectness] * b)
            inter = self.adapt(queries, None, feats, pos, iterations, mode="skip")
            return PrototypeSet(inter[-1], inter, "zero-shot")
        q_shape, q_app = self._queries(feats, boxes)
        if self.variant == "no_ope":
            return PrototypeSet(q_app, [q_app], "few-shot")
        if self.variant == "no_shape":
            inter = self.adapt(q_app, None, feats, pos, iterations, mode="skip")
        elif self.variant == "sum":
            inter = self.adapt(q_shape, q_app, feats, pos, iterations, mode="sum")
        else:
            inter = self.adapt(q_shape, q_app, feats, pos, iterations)
        return PrototypeSet(inter[-1], inter, "few-shot")


# single-image operation forms --------------------------------------------------
def _batch1(features):
    f = features.features if hasattr(features, "features") else features
    return f.reshape((1,) + f.shape) if f.ndim == 3 else f


def shape_query(box, extractor: PrototypeExtractor):
    box = box if isinstance(box, ExemplarBox) else ExemplarBox(*box)
    q = extractor.shape_query(Tensor([[box.width, box.height]]))
    return q.reshape(q.shape[1:])


def appearance_query(encoded, box, extractor: PrototypeExtractor):
    box = box if isinstance(box, ExemplarBox) else ExemplarBox(*box)
    f = encoded.features if hasattr(encoded, "features") else encoded
    return T.roi_pool(f, box.as_tuple(), extractor.s)


def _squeeze_set(ps):
    def sq(t):
        return t.reshape(t.shape[1:])

    return PrototypeSet(sq(ps.prototypes), [sq(t) for t in ps.intermediates], ps.mode)


def iterative_adapt(shape_qs, appearance_qs, encoded, extractor: PrototypeExtractor, pos, L=None):
    """Stacked (n, s, s, d) queries for one image -> PrototypeSet with (n, s, s, d) entries."""
    if shape_qs.shape[0] != appearance_qs.shape[0]:
        raise ShapeError(f"{shape_qs.shape[0]} shape queries vs {appearance_qs.shape[0]} appearance queries")
    f = _batch1(encoded)
    add_b = lambda t: t.reshape((1,) + t.shape)  # noqa: E731
    inter = extractor.adapt(add_b(shape_qs), add_b(appearance_qs), f, pos, L)
    return _squeeze_set(PrototypeSet(inter[-1], inter, "few-shot"))


def simple_sum_variant(shape_qs, appearance_qs, encoded, extractor: PrototypeExtractor, pos, L=None):
    if shape_qs.shape[0] != appearance_qs.shape[0]:
        raise ShapeError(f"{shape_qs.shape[0]} shape queries vs {appearance_qs.shape[0]} appearance queries")
    f = _batch1(encoded)
    add_b = lambda t: t.reshape((1,) + t.shape)  # noqa: E731
    inter = extractor.adapt(add_b(shape_qs), add_b(appearance_qs), f, pos, L, mode="sum")
    return _squeeze_set(PrototypeSet(inter[-1], inter, "few-shot"))


def zero_shot_adapt(encoded, extractor: PrototypeExtractor, pos, L=None):
    f = _batch1(encoded)
    q = extractor.objectness.reshape((1,) + extractor.objectness.shape)
    inter = extractor.adapt(q, None, f, pos, L, mode="skip")
    return _squeeze_set(PrototypeSet(inter[-1], inter, "zero-shot"))
