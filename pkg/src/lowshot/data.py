"""Synthetic scenes, PPM images and line-delimited JSON annotations.

On disk a dataset directory holds ``manifest.json``, one ``<split>.jsonl``
per split and ``images/<id>.ppm``. Each annotation line is
``{"id", "image", "category", "points": [[x, y], ...], "boxes": [[x1, y1, x2, y2], ...]}``
with coordinates normalised to [0, 1]; ``image`` is relative to the dataset
directory.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .ope import ExemplarBox

SHAPES = ("disc", "square", "triangle", "ring")
PALETTE = (
    (0.90, 0.20, 0.20),
    (0.20, 0.75, 0.25),
    (0.20, 0.35, 0.95),
    (0.95, 0.85, 0.15),
    (0.85, 0.25, 0.85),
    (0.15, 0.85, 0.90),
    (0.98, 0.55, 0.10),
    (0.95, 0.95, 0.95),
)


class InfeasibleSpec(ValueError):
    pass


class AnnotationError(ValueError):
    pass


@dataclass
class Scene:
    id: str
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    points: np.ndarray  # (k, 2) normalised (x, y)
    boxes: np.ndarray  # (e, 4) normalised exemplar boxes
    category: str = ""
    distractors: list = field(default_factory=list)

    @property
    def count(self):
        return len(self.points)

    def validate(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise AnnotationError(f"scene {self.id}: image must be (H, W, 3), got {self.image.shape}")
        pts = np.asarray(self.points).reshape(-1, 2)
        if np.any(pts < 0) or np.any(pts > 1):
            raise AnnotationError(f"scene {self.id}: points outside [0, 1]")
        if len(self.boxes) > len(pts):
            raise AnnotationError(f"scene {self.id}: {len(self.boxes)} exemplars but only {len(pts)} points")
        for b in self.boxes:
            try:
                ExemplarBox(*b)
            except ValueError as e:
                raise AnnotationError(f"scene {self.id}: {e}") from None
            inside = np.sum((pts[:, 0] >= b[0]) & (pts[:, 0] <= b[2]) & (pts[:, 1] >= b[1]) & (pts[:, 1] <= b[3]))
            if inside != 1:
                raise AnnotationError(f"scene {self.id}: exemplar {list(b)} encloses {inside} points, expected 1")
        return self

    def hflip(self):
        pts = self.points.copy()
        pts[:, 0] = 1.0 - pts[:, 0]
        boxes = self.boxes.copy()
        boxes[:, [0, 2]] = 1.0 - self.boxes[:, [2, 0]]
        return Scene(self.id, np.ascontiguousarray(self.image[:, ::-1]), pts, boxes, self.category, list(self.distractors))


@dataclass(frozen=True)
class GeneratorConfig:
    image_size: int = 128
    shapes: tuple = SHAPES
    n_colors: int = 8
    size_range: tuple = (9.0, 18.0)  # pixels, per-scene base size
    size_jitter: float = 0.15
    aspect_range: tuple = (0.6, 1.6)  # per-instance width / height
    count_range: tuple = (3, 40)
    regime: str = "sparse"  # sparse: no overlap; dense: up to 50% overlap
    distractor_categories: tuple = (0, 1)
    distractor_count: tuple = (1, 6)
    exemplars: int = 3
    n_train: int = 800
    n_val: int = 100
    n_test: int = 100
    split_fractions: tuple = (0.5, 0.25, 0.25)
    noise: float = 0.03

    @property
    def max_overlap(self):
        return 0.0 if self.regime == "sparse" else 0.5


def categories(cfg):
    return [f"{s}-{c}" for s in cfg.shapes for c in range(cfg.n_colors)]


def split_categories(cfg, seed):
    """Disjoint category lists for train / val / test."""
    cats = categories(cfg)
    order = np.random.default_rng([seed, 7]).permutation(len(cats))
    cats = [cats[i] for i in order]
    n_tr = int(round(cfg.split_fractions[0] * len(cats)))
    n_va = int(round(cfg.split_fractions[1] * len(cats)))
    out = {"train": cats[:n_tr], "val": cats[n_tr : n_tr + n_va], "test": cats[n_tr + n_va :]}
    for k, v in out.items():
        if not v:
            raise InfeasibleSpec(f"split {k} received no categories")
    return out


# -- rendering -----------------------------------------------------------------
def _mask(shape, cx, cy, w, h, yy, xx):
    dx = (xx - cx) / (w / 2.0)
    dy = (yy - cy) / (h / 2.0)
    if shape == "disc":
        return dx * dx + dy * dy <= 1.0
    if shape == "square":
        return (np.abs(dx) <= 1.0) & (np.abs(dy) <= 1.0)
    if shape == "ring":
        r = dx * dx + dy * dy
        return (r <= 1.0) & (r >= 0.35)
    if shape == "triangle":
        # apex up, base at the bottom edge of the box
        t = (dy + 1.0) / 2.0
        return (dy >= -1.0) & (dy <= 1.0) & (np.abs(dx) <= t)
    raise ValueError(f"unknown shape {shape!r}")


def _overlap(a, b):
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    small = min((a[2] - a[0]) * (a[3] - a[1]), (b[2] - b[0]) * (b[3] - b[1]))
    return iw * ih / small


def _place(rng, sizes, size, placed, max_overlap, tries=400):
    out = []
    for w, h in sizes:
        for _ in range(tries):
            cx = rng.uniform(w / 2, size - w / 2)
            cy = rng.uniform(h / 2, size - h / 2)
            box = (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)
            if all(_overlap(box, p) <= max_overlap for p in placed):
                placed.append(box)
                out.append(box)
                break
        else:
            raise InfeasibleSpec(
                f"could not place {len(sizes)} objects of ~{w:.1f}x{h:.1f}px in a {size}px image "
                f"with overlap <= {max_overlap:.0%}"
            )
    return out


OCCUPANCY = 0.3  # max fraction of the image covered by object boxes


def _base_size(rng, cfg, n_total):
    lo, hi = cfg.size_range
    cap = np.sqrt(OCCUPANCY * cfg.image_size**2 / max(n_total, 1)) / (1 + cfg.size_jitter)
    hi = max(lo, min(hi, cap))
    return rng.uniform(lo, hi)


def _instance_sizes(rng, cfg, n, base):
    scale = base * (1 + rng.uniform(-cfg.size_jitter, cfg.size_jitter, n))
    aspect = np.exp(rng.uniform(np.log(cfg.aspect_range[0]), np.log(cfg.aspect_range[1]), n))
    return list(zip(scale * np.sqrt(aspect), scale / np.sqrt(aspect)))


def _check_feasible(cfg):
    lo = cfg.size_range[0] * (1 - cfg.size_jitter)
    most = cfg.count_range[1] + cfg.distractor_categories[1] * cfg.distractor_count[1]
    need = most * lo * lo * (1 - cfg.max_overlap)
    if need > 0.5 * cfg.image_size**2:
        raise InfeasibleSpec(
            f"{cfg.count_range[1]} objects of >= {lo:.1f}px cannot fit in {cfg.image_size}px "
            f"with overlap <= {cfg.max_overlap:.0%}"
        )
    if cfg.count_range[0] < cfg.exemplars:
        raise InfeasibleSpec("minimum count is below the exemplar count")


def render_scene(cfg, rng, category, pool, scene_id):
    size = cfg.image_size
    shape, color = category.rsplit("-", 1)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    c0, c1 = rng.uniform(0.0, 0.45, 3), rng.uniform(0.0, 0.45, 3)
    angle = rng.uniform(0, 2 * np.pi)
    ramp = (xx * np.cos(angle) + yy * np.sin(angle)) / size
    ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-6)
    img = c0 + (c1 - c0) * ramp[..., None]

    n = int(rng.integers(cfg.count_range[0], cfg.count_range[1] + 1))
    others = [c for c in pool if c != category]
    k = int(rng.integers(cfg.distractor_categories[0], cfg.distractor_categories[1] + 1))
    k = min(k, len(others))
    distractors = [others[i] for i in rng.choice(len(others), size=k, replace=False)] if k else []
    counts = [int(rng.integers(cfg.distractor_count[0], cfg.distractor_count[1] + 1)) for _ in distractors]
    base = _base_size(rng, cfg, n + sum(counts))
    placed = []
    objs = [(category, w, h, True) for w, h in _instance_sizes(rng, cfg, n, base)]
    for dc, m in zip(distractors, counts):
        # distractor categories get their own size so size alone does not identify the target
        dbase = _base_size(rng, cfg, n + sum(counts))
        objs += [(dc, w, h, False) for w, h in _instance_sizes(rng, cfg, m, dbase)]
    order = rng.permutation(len(objs))
    objs = [objs[i] for i in order]
    boxes = _place(rng, [(o[1], o[2]) for o in objs], size, placed, cfg.max_overlap)

    targets = []
    for (cat, w, h, is_target), box in zip(objs, boxes):
        shp, col = cat.rsplit("-", 1)
        cx, cy = (box[0] + box[2]) / 2, (box[1] + box[3]) / 2
        rgb = np.clip(np.array(PALETTE[int(col) % len(PALETTE)]) + rng.uniform(-0.06, 0.06, 3), 0, 1)
        img[_mask(shp, cx, cy, w, h, yy, xx)] = rgb
        if is_target:
            targets.append(box)
    img = img + rng.normal(0, cfg.noise, img.shape)
    img = np.round(np.clip(img, 0, 1) * 255) / 255  # 8-bit exact so PPM round-trips

    pts = np.array([[(b[0] + b[2]) / 2 / size, (b[1] + b[3]) / 2 / size] for b in targets])
    nboxes = np.clip(np.array(targets) / size, 0, 1)
    # exemplars must each enclose exactly one annotated point
    eligible = []
    for i, b in enumerate(nboxes):
        inside = np.sum((pts[:, 0] >= b[0]) & (pts[:, 0] <= b[2]) & (pts[:, 1] >= b[1]) & (pts[:, 1] <= b[3]))
        if inside == 1:
            eligible.append(i)
    if len(eligible) < cfg.exemplars:
        return None
    pick = rng.choice(eligible, size=cfg.exemplars, replace=False)
    return Scene(scene_id, img.astype(np.float32), pts, nboxes[np.sort(pick)], category, distractors)


def _make_scene(args):
    cfg, seed, split, index, pool = args
    rng = np.random.default_rng([seed, index, {"train": 0, "val": 1, "test": 2}[split]])
    last = None
    for _ in range(50):
        category = pool[int(rng.integers(len(pool)))]
        try:
            scene = render_scene(cfg, rng, category, pool, f"{split}-{index:05d}")
        except InfeasibleSpec as e:
            last = e
            continue
        if scene is not None:
            return scene.validate()
    raise InfeasibleSpec(f"could not draw a valid scene for {split}-{index}: {last}")


def worker_count():
    try:
        return max(1, int(os.environ.get("LOCA_THREADS", "1")))
    except ValueError:
        return 1


def synth_generate(cfg: GeneratorConfig = GeneratorConfig(), seed=0, workers=None):
    """Generate ``{"train": [...], "val": [...], "test": [...]}``; deterministic per seed."""
    _check_feasible(cfg)
    cats = split_categories(cfg, seed)
    jobs = []
    for split, n in (("train", cfg.n_train), ("val", cfg.n_val), ("test", cfg.n_test)):
        jobs += [(cfg, seed, split, i, cats[split]) for i in range(n)]
    workers = workers or worker_count()
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers) as ex:
            scenes = list(ex.map(_make_scene, jobs, chunksize=16))
    else:
        scenes = [_make_scene(j) for j in jobs]
    out = {"train": [], "val": [], "test": []}
    for s in scenes:
        out[s.id.split("-")[0]].append(s)
    return out


# -- PPM -----------------------------------------------------------------------
def write_ppm(path, image):
    arr = np.clip(np.round(np.asarray(image) * 255), 0, 255).astype(np.uint8)
    h, w = arr.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(arr.tobytes())


def read_ppm(path):
    with open(path, "rb") as f:
        data = f.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P6":
        raise AnnotationError(f"{path}: not a binary PPM (magic {tokens[0]!r})")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise AnnotationError(f"{path}: only 8-bit PPM is supported")
    pos += 1
    raw = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos)
    return raw.reshape(h, w, 3).astype(np.float32) / 255.0


def resize_image(img, size):
    if img.shape[:2] == (size, size):
        return img
    return kernels.resize_fwd(np.ascontiguousarray(img[None], dtype=np.float32), size, size)[0]


# -- annotations ---------------------------------------------------------------
def scene_record(scene, image_rel):
    rec = {
        "id": scene.id,
        "image": image_rel,
        "category": scene.category,
        "points": np.round(np.asarray(scene.points, dtype=np.float64), 10).tolist(),
        "boxes": np.round(np.asarray(scene.boxes, dtype=np.float64), 10).tolist(),
    }
    if scene.distractors:
        rec["distractors"] = list(scene.distractors)
    return rec


def write_dataset(root, splits, meta=None):
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    counts = {}
    for split, scenes in splits.items():
        scenes = sorted(scenes, key=lambda s: s.id)
        with open(os.path.join(root, f"{split}.jsonl"), "w") as f:
            for s in scenes:
                rel = f"images/{s.id}.ppm"
                write_ppm(os.path.join(root, rel), s.image)
                f.write(json.dumps(scene_record(s, rel)) + "\n")
        counts[split] = len(scenes)
    with open(os.path.join(root, "manifest.json"), "w") as f:
        json.dump({"splits": counts, **(meta or {})}, f, indent=2, sort_keys=True)
    return counts


def parse_record(line, lineno, source):
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as e:
        raise AnnotationError(f"{source}:{lineno}: {e.msg}") from None
    for key in ("id", "image", "points", "boxes"):
        if key not in rec:
            raise AnnotationError(f"{source}:{lineno}: missing field {key!r}")
    try:
        pts = np.asarray(rec["points"], dtype=np.float64).reshape(-1, 2)
        boxes = np.asarray(rec["boxes"], dtype=np.float64).reshape(-1, 4)
    except ValueError:
        raise AnnotationError(f"{source}:{lineno}: points must be [x, y] pairs and boxes [x1, y1, x2, y2]") from None
    return rec, pts, boxes


def load_dataset(path, split=None, image_size=None):
    """Load a ``.jsonl`` file, or ``split`` from a dataset directory."""
    if os.path.isdir(path):
        if split is None:
            raise ValueError("loading a dataset directory needs a split name")
        root, jsonl = path, os.path.join(path, f"{split}.jsonl")
    else:
        root, jsonl = os.path.dirname(os.path.abspath(path)), path
        split = split or os.path.splitext(os.path.basename(path))[0]
    scenes = []
    try:
        fh = open(jsonl)
    except OSError as e:
        raise OSError(f"cannot read annotations {jsonl}: {e}") from e
    with fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec, pts, boxes = parse_record(line, lineno, jsonl)
            img = read_ppm(os.path.join(root, rec["image"]))
            if image_size:
                img = resize_image(img, image_size)
            scene = Scene(str(rec["id"]), img, pts, boxes, str(rec.get("category", "")), list(rec.get("distractors", [])))
            try:
                scene.validate()
            except AnnotationError as e:
                raise AnnotationError(f"{jsonl}:{lineno}: {e}") from None
            scenes.append(scene)
    manifest = os.path.join(root, "manifest.json")
    if os.path.exists(manifest):
        with open(manifest) as f:
            expected = json.load(f).get("splits", {}).get(split)
        if expected is not None and expected != len(scenes):
            raise AnnotationError(f"{jsonl}: manifest lists {expected} scenes, parsed {len(scenes)}")
    return scenes
