"""TriScenes: a synthetic segmentation dataset whose scenes need either small
or large receptive fields, plus loading, augmentation and batching.

Scene regimes
-------------
local
    Large coloured regions, small checker-textured shapes and straight
    ribbons. Every pixel's class can be read off its own colour.
context
    One large region enclosing a neutral-grey patch. The patch is labelled
    with the enclosing region's class, so its class is only recoverable by
    looking past the patch border. Patch classes cycle through all K
    classes, which keeps any colour-only classifier at chance on them.
mixed
    Each scene picks ``local`` or ``context`` with equal probability.

On disk a dataset split is ``manifest.json`` + ``images/NNNN.ppm`` +
``labels/NNNN.pgm``.
"""
from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .loss import IGNORE_INDEX
from .netpbm import NetpbmError, read_pgm, read_ppm, write_pgm, write_ppm

FORMAT_VERSION = 1
REGIMES = ("local", "context", "mixed")
GRAY = (0.5, 0.5, 0.5)
_SPLIT_CODES = {"train": 0, "val": 1, "test": 2}


class DatasetError(ValueError):
    pass


@dataclass
class Sample:
    image: np.ndarray       # (3, H, W) float32 in [0, 1]
    labels: np.ndarray      # (H, W) uint8, class ids or IGNORE_INDEX
    regime: str = ""
    ambiguous: np.ndarray | None = None   # (H, W) bool, grey-patch pixels

    def __post_init__(self):
        if self.image.shape[1:] != self.labels.shape:
            raise DatasetError(f"image {self.image.shape[1:]} and labels {self.labels.shape} differ")


@dataclass
class DatasetManifest:
    root: Path
    num_classes: int
    entries: list            # dicts with image, label, regime
    seed: int = 0
    size: int = 0
    regime: str = "mixed"
    split: str = "train"
    version: int = FORMAT_VERSION

    def to_json(self) -> str:
        doc = {"version": self.version, "generator": "triscenes", "K": self.num_classes,
               "seed": self.seed, "size": self.size, "regime": self.regime,
               "split": self.split, "entries": self.entries}
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    def __len__(self):
        return len(self.entries)


def palette(k: int) -> np.ndarray:
    """(K, 3) class colours. Class 0 is a dark background; the rest are
    saturated hues, so none of them is close to the neutral grey."""
    cols = [(0.12, 0.14, 0.18)]
    for i in range(k - 1):
        cols.append(colorsys.hsv_to_rgb(i / (k - 1), 0.8, 0.9))
    return np.array(cols, dtype=np.float64)


# ---------------------------------------------------------------------------
# generation

def scene_plan(n: int, regime: str, seed: int, k: int, split: str = "train"):
    """Per-scene (regime, context_class). Context classes are dealt round-robin
    from successive random permutations of all K classes."""
    if regime not in REGIMES:
        raise ValueError(f"regime must be one of {REGIMES}")
    code = _SPLIT_CODES.get(split, 9)
    rng = np.random.default_rng([seed, code, 1 << 20])
    plan, deck = [], []
    for i in range(n):
        r = regime
        if regime == "mixed":
            r = "local" if rng.random() < 0.5 else "context"
        cls = -1
        if r == "context":
            if not deck:
                deck = list(rng.permutation(k))
            cls = int(deck.pop())
        plan.append((r, cls))
    return plan


def _fill(canvas, labels, mask, color, cls, texture=None):
    canvas[mask] = color if texture is None else texture[mask]
    labels[mask] = cls


def _rect_mask(size, y0, x0, h, w):
    m = np.zeros((size, size), bool)
    m[max(y0, 0):y0 + h, max(x0, 0):x0 + w] = True
    return m


def _ellipse_mask(size, cy, cx, ry, rx):
    yy, xx = np.mgrid[0:size, 0:size]
    return ((yy + 0.5 - cy) / ry) ** 2 + ((xx + 0.5 - cx) / rx) ** 2 <= 1.0


def _ribbon_mask(size, rng, width):
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    angle = rng.choice([0.0, np.pi / 2, np.pi / 4, -np.pi / 4]) + rng.uniform(-0.15, 0.15)
    c = rng.uniform(0.25, 0.75) * size
    # signed distance to a line through (c, c) with direction `angle`
    dist = -(yy - c) * np.cos(angle) + (xx - c) * np.sin(angle)
    return np.abs(dist) <= width / 2


def _draw_local(size, k, pal, rng, canvas, labels):
    for _ in range(rng.integers(1, 3)):
        cls = int(rng.integers(1, k))
        h, w = rng.integers(int(0.3 * size), int(0.55 * size) + 1, size=2)
        y0, x0 = rng.integers(-h // 4, size - 3 * h // 4), rng.integers(-w // 4, size - 3 * w // 4)
        if rng.random() < 0.5:
            m = _rect_mask(size, y0, x0, h, w)
        else:
            m = _ellipse_mask(size, y0 + h / 2, x0 + w / 2, h / 2, w / 2)
        _fill(canvas, labels, m, pal[cls], cls)
    if rng.random() < 0.7:
        cls = int(rng.integers(1, k))
        width = rng.uniform(0.12, 0.16) * size
        _fill(canvas, labels, _ribbon_mask(size, rng, width), pal[cls], cls)
    yy, xx = np.mgrid[0:size, 0:size]
    checker = ((yy // 2 + xx // 2) % 2).astype(bool)
    for _ in range(rng.integers(1, 4)):
        cls = int(rng.integers(1, k))
        s = int(rng.integers(max(int(0.2 * size), 2), max(int(0.3 * size), 3) + 1))
        y0, x0 = rng.integers(0, size - s + 1, size=2)
        m = _rect_mask(size, y0, x0, s, s) if rng.random() < 0.5 else \
            _ellipse_mask(size, y0 + s / 2, x0 + s / 2, s / 2, s / 2)
        tex = np.where(checker[..., None], pal[cls], 0.6 * pal[cls])
        _fill(canvas, labels, m, pal[cls], cls, texture=tex)


def _draw_context(size, k, pal, rng, canvas, labels, cls, ambiguous):
    side = int(rng.integers(int(0.7 * size), int(0.85 * size) + 1))
    y0, x0 = rng.integers(0, size - side + 1, size=2)
    if cls != 0:
        _fill(canvas, labels, _rect_mask(size, y0, x0, side, side), pal[cls], cls)
    # patch must span more than 3 feature-map cells at output stride 8
    p = int(rng.integers(max(int(0.4 * size), 3 * 8 + 1), max(int(0.45 * size), 3 * 8 + 1) + 1))
    p = min(p, side - 2)
    margin = (side - p) // 2
    jitter = max(margin // 3, 0)
    py = y0 + margin + int(rng.integers(-jitter, jitter + 1))
    px = x0 + margin + int(rng.integers(-jitter, jitter + 1))
    m = _rect_mask(size, py, px, p, p)
    _fill(canvas, labels, m, GRAY, cls)
    ambiguous |= m


def render_scene(size: int, k: int, regime: str, context_class: int, rng) -> Sample:
    """Draw one scene. Returns a Sample with float image and exact labels."""
    pal = palette(k)
    canvas = np.empty((size, size, 3))
    canvas[:] = pal[0]
    labels = np.zeros((size, size), np.uint8)
    ambiguous = np.zeros((size, size), bool)
    if regime == "local":
        _draw_local(size, k, pal, rng, canvas, labels)
    else:
        _draw_context(size, k, pal, rng, canvas, labels, context_class, ambiguous)
    canvas = canvas * rng.uniform(0.9, 1.1) + rng.normal(0, 0.04, canvas.shape)
    image = np.clip(canvas, 0, 1).transpose(2, 0, 1).astype(np.float32)
    return Sample(image, labels, regime, ambiguous)


def generate_samples(n: int, size: int, k: int, regime: str, seed: int, split: str = "train"):
    if size % 8 or size < 8:
        raise ValueError(f"size {size} must be a positive multiple of 8")
    if k < 3:
        raise ValueError("need K >= 3 classes")
    code = _SPLIT_CODES.get(split, 9)
    for i, (r, cls) in enumerate(scene_plan(n, regime, seed, k, split)):
        yield render_scene(size, k, r, cls, np.random.default_rng([seed, code, i]))


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)


def generate_triscenes(n: int, size: int, k: int, regime: str, seed: int, out_dir,
                       split: str = "train") -> DatasetManifest:
    """Write ``n`` scenes plus manifest.json under ``out_dir``."""
    root = Path(out_dir)
    try:
        (root / "images").mkdir(parents=True, exist_ok=True)
        (root / "labels").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DatasetError(f"cannot create dataset directory {root}: {e.strerror}") from e
    entries = []
    for i, s in enumerate(generate_samples(n, size, k, regime, seed, split)):
        img_rel, lab_rel = f"images/{i:04d}.ppm", f"labels/{i:04d}.pgm"
        write_ppm(root / img_rel, to_uint8(s.image).transpose(1, 2, 0))
        write_pgm(root / lab_rel, s.labels)
        entries.append({"image": img_rel, "label": lab_rel, "regime": s.regime})
    man = DatasetManifest(root, k, entries, seed, size, regime, split)
    (root / "manifest.json").write_text(man.to_json(), encoding="utf-8")
    return man


# ---------------------------------------------------------------------------
# loading

def load_dataset(path) -> DatasetManifest:
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.is_file():
        raise DatasetError(f"{mpath}: manifest not found")
    try:
        doc = json.loads(mpath.read_text(encoding="utf-8"))
        man = DatasetManifest(root, int(doc["K"]), list(doc["entries"]), int(doc.get("seed", 0)),
                              int(doc.get("size", 0)), doc.get("regime", ""),
                              doc.get("split", ""), int(doc["version"]))
    except (ValueError, KeyError, TypeError) as e:
        raise DatasetError(f"{mpath}: malformed manifest ({e})") from e
    if man.version != FORMAT_VERSION:
        raise DatasetError(f"{mpath}: unsupported version {man.version}")
    for e in man.entries:
        for key in ("image", "label"):
            if not (root / e[key]).is_file():
                raise DatasetError(f"{root / e[key]}: missing file")
    return man


def load_sample(man: DatasetManifest, entry) -> Sample:
    if isinstance(entry, int):
        entry = man.entries[entry]
    try:
        rgb = read_ppm(man.root / entry["image"])
        lab = read_pgm(man.root / entry["label"])
    except NetpbmError as e:
        raise DatasetError(str(e)) from e
    if rgb.shape[:2] != lab.shape:
        raise DatasetError(f"{entry['image']}: image {rgb.shape[:2]} and label {lab.shape} sizes differ")
    bad = (lab >= man.num_classes) & (lab != IGNORE_INDEX)
    if bad.any():
        raise DatasetError(f"{entry['label']}: label value {int(lab[bad][0])} >= K={man.num_classes}")
    image = rgb.transpose(2, 0, 1).astype(np.float32) / 255.0
    return Sample(image, lab, entry.get("regime", ""))


def load_all(man: DatasetManifest) -> list:
    return [load_sample(man, e) for e in man.entries]


# ---------------------------------------------------------------------------
# augmentation and batching

@dataclass
class AugmentConfig:
    scale_choices: tuple = (0.75, 1.0, 1.25)
    crop_size: tuple = (64, 64)
    hflip_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.crop_size, int):
            self.crop_size = (self.crop_size, self.crop_size)
        self.crop_size = tuple(self.crop_size)
        if self.crop_size[0] % 8 or self.crop_size[1] % 8:
            raise ValueError("crop size must be divisible by 8")


def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Bilinear (half-pixel centre) interpolation matrix, (n_out, n_in)."""
    src = np.clip((np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5, 0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w1 = src - i0
    a = np.zeros((n_out, n_in))
    np.add.at(a, (np.arange(n_out), i0), 1 - w1)
    np.add.at(a, (np.arange(n_out), i1), w1)
    return a


def nearest_index(n_in: int, n_out: int) -> np.ndarray:
    return np.minimum(((np.arange(n_out) + 0.5) * (n_in / n_out)).astype(int), n_in - 1)


def rescale(s: Sample, factor: float) -> Sample:
    h, w = s.labels.shape
    nh, nw = max(int(round(h * factor)), 1), max(int(round(w * factor)), 1)
    if (nh, nw) == (h, w):
        return s
    img = (resize_matrix(h, nh) @ s.image.astype(np.float64) @ resize_matrix(w, nw).T).astype(np.float32)
    iy, ix = nearest_index(h, nh), nearest_index(w, nw)
    amb = None if s.ambiguous is None else s.ambiguous[np.ix_(iy, ix)]
    return Sample(img, s.labels[np.ix_(iy, ix)], s.regime, amb)


def crop(s: Sample, top: int, left: int, size) -> Sample:
    """Crop ``size`` from (top, left), padding image with 0 and labels with
    the ignore index wherever the window leaves the sample."""
    ch, cw = size
    h, w = s.labels.shape
    img = np.zeros((3, ch, cw), np.float32)
    lab = np.full((ch, cw), IGNORE_INDEX, np.uint8)
    amb = np.zeros((ch, cw), bool)
    y0, x0 = max(top, 0), max(left, 0)
    y1, x1 = min(top + ch, h), min(left + cw, w)
    if y1 > y0 and x1 > x0:
        img[:, y0 - top:y1 - top, x0 - left:x1 - left] = s.image[:, y0:y1, x0:x1]
        lab[y0 - top:y1 - top, x0 - left:x1 - left] = s.labels[y0:y1, x0:x1]
        if s.ambiguous is not None:
            amb[y0 - top:y1 - top, x0 - left:x1 - left] = s.ambiguous[y0:y1, x0:x1]
    return Sample(img, lab, s.regime, amb if s.ambiguous is not None else None)


def hflip(s: Sample) -> Sample:
    amb = None if s.ambiguous is None else s.ambiguous[:, ::-1].copy()
    return Sample(s.image[:, :, ::-1].copy(), s.labels[:, ::-1].copy(), s.regime, amb)


def augment(s: Sample, cfg: AugmentConfig, rng) -> Sample:
    """Random scale, then random crop (padding if needed), then random flip."""
    factor = float(cfg.scale_choices[rng.integers(len(cfg.scale_choices))])
    s = rescale(s, factor)
    ch, cw = cfg.crop_size
    h, w = s.labels.shape
    top = int(rng.integers(0, h - ch + 1)) if h >= ch else 0
    left = int(rng.integers(0, w - cw + 1)) if w >= cw else 0
    s = crop(s, top, left, (ch, cw))
    if rng.random() < cfg.hflip_prob:
        s = hflip(s)
    return s


def sample_rng(base_seed: int, epoch: int, index: int):
    """Per-sample generator; the same triple always gives the same stream."""
    return np.random.default_rng([base_seed, epoch, index])


def make_batch(samples) -> tuple[np.ndarray, np.ndarray]:
    """Stack samples into (N, 3, H, W) images and (N, H, W) labels."""
    if not samples:
        raise ValueError("empty batch")
    shape = samples[0].labels.shape
    for s in samples:
        if s.labels.shape != shape:
            raise ValueError(f"sample sizes differ: {shape} vs {s.labels.shape}")
    return (np.stack([s.image for s in samples]).astype(np.float32),
            np.stack([s.labels for s in samples]))
