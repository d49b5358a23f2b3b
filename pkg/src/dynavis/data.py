"""Synthetic scenes for training and evaluation.

Images imitate the statistics that matter here: a smooth grayscale
background occupying >95% of the pixels, with a handful of small colored
geometric targets scattered on top.  A category is a (shape, color) pair
-- five shapes times five colors -- and every target in a scene shares
one category, so the scene label (dominant category by area) is
unambiguous.  Pixels are quantized to uint8 levels at creation time,
which makes PNG save/load an exact round trip.

Change pairs reuse the same renderer: the second image adds and/or
removes one or two targets and the ground-truth mask is the union of the
affected footprints.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass

import matplotlib.image as mpimg
import numpy as np

from .rng import SeedStream

SHAPES = ("square", "disc", "triangle", "cross", "diamond")
PALETTE = np.array([
    (220, 40, 40),    # red
    (40, 180, 60),    # green
    (50, 90, 220),    # blue
    (230, 200, 50),   # yellow
    (200, 60, 200),   # magenta
], dtype=np.float64) / 255.0

NUM_CATEGORIES = len(SHAPES) * len(PALETTE)


def category_name(cat: int) -> str:
    return f"{SHAPES[cat // len(PALETTE)]}-{['red','green','blue','yellow','magenta'][cat % len(PALETTE)]}"


def shape_mask(shape: str, s: int) -> np.ndarray:
    """Boolean footprint of a shape on an s x s grid."""
    i, j = np.mgrid[0:s, 0:s]
    c = (s - 1) / 2.0
    if shape == "square":
        return np.ones((s, s), dtype=bool)
    if shape == "disc":
        return (i - c) ** 2 + (j - c) ** 2 <= (s / 2.0 - 0.2) ** 2
    if shape == "triangle":
        return np.abs(j - c) <= (i + 1) * (c + 0.5) / s
    if shape == "cross":
        t = max(1, s // 3)
        return (np.abs(i - c) < t / 2.0 + 0.5) | (np.abs(j - c) < t / 2.0 + 0.5)
    if shape == "diamond":
        return np.abs(i - c) + np.abs(j - c) <= c + 0.3
    raise ValueError(f"unknown shape {shape!r}")


def smooth_background(rng: np.random.Generator, size: int) -> np.ndarray:
    """Low-frequency grayscale field in roughly [0.1, 0.7]."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    field = np.zeros((size, size))
    for _ in range(3):
        fx, fy = rng.uniform(0.5, 2.0, size=2)
        ph = rng.uniform(0, 2 * np.pi, size=2)
        field += rng.uniform(0.3, 1.0) * np.cos(2 * np.pi * (fx * xx + ph[0])) \
            * np.cos(2 * np.pi * (fy * yy + ph[1]))
    field /= max(1e-6, np.abs(field).max())
    return np.clip(0.4 + 0.25 * field, 0.1, 0.7)


@dataclass
class Target:
    cat: int
    row: int
    col: int
    size: int

    @property
    def box(self) -> tuple[int, int, int, int]:
        """(x0, y0, x1, y1), exclusive upper edge, pixel units."""
        return (self.col, self.row, self.col + self.size, self.row + self.size)

    def footprint(self, size: int) -> np.ndarray:
        m = np.zeros((size, size), dtype=bool)
        m[self.row:self.row + self.size, self.col:self.col + self.size] = \
            shape_mask(SHAPES[self.cat // len(PALETTE)], self.size)
        return m


@dataclass
class Scene:
    image: np.ndarray            # (H, W, 3) float32, uint8-quantized values
    label: int                   # dominant category by painted area
    targets: list[Target]

    @property
    def boxes(self) -> np.ndarray:
        if not self.targets:
            return np.zeros((0, 4), dtype=np.float64)
        return np.array([t.box for t in self.targets], dtype=np.float64)

    @property
    def categories(self) -> np.ndarray:
        return np.array([t.cat for t in self.targets], dtype=np.int64)


def quantize(img: np.ndarray) -> np.ndarray:
    """Snap to the uint8 grid (and [0,1]) so PNG round-trips exactly."""
    q = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    return (q.astype(np.float32) / 255.0)


def render(size: int, bg: np.ndarray, targets: list[Target],
           rng: np.random.Generator | None = None) -> np.ndarray:
    img = np.repeat(bg[:, :, None], 3, axis=2)
    for t in targets:
        m = t.footprint(size)
        gain = 1.0 if rng is None else rng.uniform(0.85, 1.0)
        img[m] = PALETTE[t.cat % len(PALETTE)] * gain
    return quantize(img)


def _place(rng: np.random.Generator, size: int, s: int,
           taken: list[Target], tries: int = 100) -> tuple[int, int] | None:
    for _ in range(tries):
        r = int(rng.integers(1, size - s - 1))
        c = int(rng.integers(1, size - s - 1))
        ok = all(r + s + 1 <= t.row or t.row + t.size + 1 <= r or
                 c + s + 1 <= t.col or t.col + t.size + 1 <= c for t in taken)
        if ok:
            return r, c
    return None


def _place_resampling(rng: np.random.Generator, size: int, sizes,
                      taken: list[Target]) -> Target | None:
    """Try each placement 100 times, resampling the size on failure."""
    for attempt in range(3):
        s = int(sizes[rng.integers(0, len(sizes))])
        pos = _place(rng, size, s, taken)
        if pos is not None:
            return Target(-1, pos[0], pos[1], s)
        logging.getLogger(__name__).warning(
            "placement failed after 100 tries (size %d, attempt %d); resampling",
            s, attempt + 1)
    return None


def _footprint_area(targets: list[Target], size: int) -> int:
    return int(sum(t.footprint(size).sum() for t in targets))


def make_scene(rng: np.random.Generator, size: int = 64, categories=range(5),
               max_targets: int = 4, target_sizes=(5, 6, 7)) -> Scene:
    """One image: smooth background plus 1..max_targets same-category targets.

    Placement respects a 5% foreground budget, so target count can fall
    short of the draw on small canvases (but never below one).
    """
    if size < 64:
        raise ValueError("images are at least 64 px on a side")
    categories = list(categories)
    cat = int(categories[rng.integers(0, len(categories))])
    n = int(rng.integers(1, max_targets + 1))
    budget = 0.05 * size * size
    bg = smooth_background(rng, size)
    targets: list[Target] = []
    area = 0
    for _ in range(n):
        sizes = [s for s in target_sizes if area + s * s <= budget]
        if not sizes:
            break
        t = _place_resampling(rng, size, sizes, targets)
        if t is None:
            break
        t.cat = cat
        targets.append(t)
        area = _footprint_area(targets, size)
    assert targets, "failed to place any target"
    img = render(size, bg, targets, rng)
    areas = np.zeros(NUM_CATEGORIES)
    for t in targets:
        areas[t.cat] += t.footprint(size).sum()
    return Scene(image=img, label=int(areas.argmax()), targets=targets)


def make_change_pair(rng: np.random.Generator, size: int = 64, categories=range(5),
                     edit_sizes=(8, 9, 10),
                     n_edits: int | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(image_a, image_b, mask): b differs by added/removed targets.

    ``n_edits`` defaults to a draw from {1, 2}; passing 0 yields an
    identical pair with an all-zero mask.  Edited targets come from
    ``edit_sizes`` (a bit larger than the classification targets); the
    mask is the union of their footprints.  Both images stay under the 5%
    foreground budget, which limits how many adds fit on a 64 px canvas --
    with edits requested, at least one always happens.
    """
    categories = list(categories)
    budget = 0.05 * size * size
    bg = smooth_background(rng, size)

    def sample_target(taken: list[Target]) -> Target | None:
        t = _place_resampling(rng, size, edit_sizes, taken)
        if t is not None:
            t.cat = int(categories[rng.integers(0, len(categories))])
        return t

    # base content shared by both images, leaving headroom for one add
    targets_a: list[Target] = []
    n_base = int(rng.integers(1, 3))
    head = max(s * s for s in edit_sizes)
    for _ in range(n_base):
        t = sample_target(targets_a)
        if t is None or _footprint_area(targets_a + [t], size) + head > budget:
            continue
        targets_a.append(t)

    targets_b = list(targets_a)
    changed: list[Target] = []
    if n_edits is None:
        n_edits = int(rng.integers(1, 3))
    for e in range(n_edits):
        # removals only touch targets present in image a, so an edit never
        # cancels a target added by an earlier edit
        removable = [i for i, t in enumerate(targets_b)
                     if any(t is u for u in targets_a)]
        want_remove = bool(removable) and rng.uniform() < 0.5
        if not want_remove:
            t = sample_target(targets_a + targets_b)
            fits = t is not None and _footprint_area(targets_b + [t], size) <= budget
            if fits:
                targets_b.append(t)
                changed.append(t)
                continue
            want_remove = bool(removable)
        if want_remove:
            k = removable[int(rng.integers(0, len(removable)))]
            changed.append(targets_b.pop(k))
    if n_edits > 0 and not changed:  # empty base and no room to add: force one add
        t = sample_target(targets_b)
        assert t is not None
        targets_b.append(t)
        changed.append(t)

    img_a = render(size, bg, targets_a)
    img_b = render(size, bg, targets_b)
    mask = np.zeros((size, size), dtype=bool)
    for t in changed:
        mask |= t.footprint(size)
    for ts in (targets_a, targets_b):
        frac = _footprint_area(ts, size) / (size * size)
        assert frac <= 0.05 + 1e-9, f"foreground fraction {frac:.3f} exceeds 5%"
    return img_a, img_b, mask


def make_dataset(stream: SeedStream, n: int, **kw) -> list[Scene]:
    """n scenes, each from its own child stream (order-independent)."""
    return [make_scene(stream.child("scene", i).generator(), **kw) for i in range(n)]


def make_change_dataset(stream: SeedStream, n: int, **kw):
    return [make_change_pair(stream.child("pair", i).generator(), **kw) for i in range(n)]


# ---------------------------------------------------------------------------
# model input conversion and batching


def to_model_input(images: np.ndarray) -> np.ndarray:
    """(B, H, W, 3) in [0,1] -> (B, 3, H, W) in [-1, 1], float32."""
    x = np.asarray(images, dtype=np.float32)
    if x.ndim == 3:
        x = x[None]
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2)) * 2.0 - 1.0


def epoch_batches(n: int, batch_size: int, rng: np.random.Generator | None = None):
    """Index batches covering range(n) once, shuffled when rng is given."""
    order = np.arange(n) if rng is None else rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


# ---------------------------------------------------------------------------
# on-disk formats


def save_png(path: str, img: np.ndarray):
    """Write a [0,1] float image (or bool mask) as 8-bit PNG."""
    if img.dtype == bool:
        img = img.astype(np.float32)
    arr = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    mpimg.imsave(path, arr, vmin=0, vmax=255, cmap="gray" if arr.ndim == 2 else None)


def load_png(path: str) -> np.ndarray:
    """Read a PNG back to (H, W, 3) float32 in [0,1]."""
    arr = mpimg.imread(path)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    return np.asarray(arr[:, :, :3], dtype=np.float32)


def write_annotations(path: str, entries: list[tuple[str, np.ndarray, np.ndarray]]):
    """Lines of ``image_path x0 y0 x1 y1 category_id``; '#' starts a comment."""
    with open(path, "w", encoding="utf-8") as f:
        f.write("# image_path x0 y0 x1 y1 category_id\n")
        for image_path, boxes, cats in entries:
            for box, cat in zip(boxes, cats):
                x0, y0, x1, y1 = box
                f.write(f"{image_path} {x0:g} {y0:g} {x1:g} {y1:g} {int(cat)}\n")


def read_annotations(path: str) -> list[tuple[str, np.ndarray, np.ndarray]]:
    """Parse an annotation file, grouping boxes by image path (insertion order)."""
    grouped: dict[str, list] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 6:
                raise ValueError(f"{path}:{lineno}: expected 6 fields, got {len(parts)}")
            try:
                box = [float(v) for v in parts[1:5]]
                cat = int(parts[5])
            except ValueError as e:
                raise ValueError(f"{path}:{lineno}: {e}") from None
            if box[2] <= box[0] or box[3] <= box[1]:
                raise ValueError(f"{path}:{lineno}: degenerate box {box}")
            grouped.setdefault(parts[0], []).append((box, cat))
    out = []
    for image_path, items in grouped.items():
        boxes = np.array([b for b, _ in items], dtype=np.float64)
        cats = np.array([c for _, c in items], dtype=np.int64)
        out.append((image_path, boxes, cats))
    return out


def write_labels(path: str, entries: list[tuple[str, int]]):
    with open(path, "w", encoding="utf-8") as f:
        f.write("# image_path label\n")
        for image_path, label in entries:
            f.write(f"{image_path} {int(label)}\n")


def read_labels(path: str) -> list[tuple[str, int]]:
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 2 fields, got {len(parts)}")
            out.append((parts[0], int(parts[1])))
    return out


def write_scene_dataset(out_dir: str, scenes: list[Scene]) -> None:
    """images/NNNNN.png + labels.txt + annotations.txt under out_dir."""
    img_dir = os.path.join(out_dir, "images")
    os.makedirs(img_dir, exist_ok=True)
    labels, anns = [], []
    for i, sc in enumerate(scenes):
        rel = os.path.join("images", f"{i:05d}.png")
        save_png(os.path.join(out_dir, rel), sc.image)
        labels.append((rel, sc.label))
        if len(sc.targets):
            anns.append((rel, sc.boxes, sc.categories))
    write_labels(os.path.join(out_dir, "labels.txt"), labels)
    write_annotations(os.path.join(out_dir, "annotations.txt"), anns)


def read_scene_dataset(root: str):
    """Returns (images (N,H,W,3) float32, labels (N,), annotation list)."""
    labels = read_labels(os.path.join(root, "labels.txt"))
    images = np.stack([load_png(os.path.join(root, rel)) for rel, _ in labels])
    y = np.array([lab for _, lab in labels], dtype=np.int64)
    ann_path = os.path.join(root, "annotations.txt")
    anns = read_annotations(ann_path) if os.path.exists(ann_path) else []
    return images, y, anns


def write_change_dataset(out_dir: str, pairs) -> None:
    """a/NNNNN.png, b/NNNNN.png, mask/NNNNN.png under out_dir."""
    for sub in ("a", "b", "mask"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    for i, (img_a, img_b, mask) in enumerate(pairs):
        save_png(os.path.join(out_dir, "a", f"{i:05d}.png"), img_a)
        save_png(os.path.join(out_dir, "b", f"{i:05d}.png"), img_b)
        save_png(os.path.join(out_dir, "mask", f"{i:05d}.png"), mask)


def read_change_dataset(root: str):
    names = sorted(os.listdir(os.path.join(root, "a")))
    a = np.stack([load_png(os.path.join(root, "a", n)) for n in names])
    b = np.stack([load_png(os.path.join(root, "b", n)) for n in names])
    masks = np.stack([load_png(os.path.join(root, "mask", n))[:, :, 0] > 0.5 for n in names])
    return a, b, masks
