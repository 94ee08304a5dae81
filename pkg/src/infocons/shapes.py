"""Synthetic labelled point clouds and the ``.xyz`` text format.

Every shape is a union of parametric surface parts.  Points are allocated to
parts in proportion to part area (largest-remainder rounding) and then drawn
uniformly by area inside each part, so a cloud is a stratified uniform sample
of the whole surface.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffcore import make_rng
from .maps import ScoreMap
from .textio import read_kv, write_kv

DEFAULT_CLASSES = ("sphere", "cube", "cylinder", "cone", "pot_plant", "chair_like")


@dataclass
class PointCloud:
    points: np.ndarray
    label: int | None = None
    part_ids: np.ndarray | None = None
    scores: ScoreMap | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError(f"points must be N x 3, got {self.points.shape}")

    @property
    def n(self):
        return self.points.shape[0]

    def subset(self, keep):
        keep = np.asarray(keep)
        parts = None if self.part_ids is None else self.part_ids[keep]
        return PointCloud(self.points[keep], self.label, parts)


@dataclass
class LabeledDataset:
    train_points: np.ndarray
    train_labels: np.ndarray
    test_points: np.ndarray
    test_labels: np.ndarray
    class_names: tuple
    seed: int
    jitter: float = 0.01
    train_parts: np.ndarray | None = None
    test_parts: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    @property
    def n_points(self):
        return self.train_points.shape[1] if len(self.train_points) else self.test_points.shape[1]

    def clouds(self, split):
        pts, labels, parts = self._split(split)
        return [PointCloud(p, int(y), None if parts is None else parts[i])
                for i, (p, y) in enumerate(zip(pts, labels))]

    def _split(self, split):
        if split == "train":
            return self.train_points, self.train_labels, self.train_parts
        if split == "test":
            return self.test_points, self.test_labels, self.test_parts
        raise ValueError(f"unknown split {split!r}")


# -- surface samplers ----------------------------------------------------------
# each returns (area, sampler(rng, n) -> n x 3)

def _sphere_part(radius=1.0, center=(0, 0, 0), lower_half=False):
    area = 4 * np.pi * radius**2 * (0.5 if lower_half else 1.0)

    def sample(rng, n):
        if lower_half:
            v = rng.standard_normal((n, 3))
        else:
            # antipodal pairs: each point stays uniform and the centroid is exactly zero
            half = rng.standard_normal(((n + 1) // 2, 3))
            v = np.vstack([half, -half])[:n]
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        if lower_half:
            v[:, 2] = -np.abs(v[:, 2])
        return radius * v + np.asarray(center)
    return area, sample


def _ball_part(radius, center):
    # volume filling; area term is the bounding sphere's, used only for allocation
    area = 4 * np.pi * radius**2

    def sample(rng, n):
        v = rng.standard_normal((n, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        r = radius * rng.random(n) ** (1 / 3)
        return v * r[:, None] + np.asarray(center)
    return area, sample


def _rect_part(origin, u, v):
    """Parallelogram origin + a*u + b*v for a, b in [0, 1]."""
    origin, u, v = map(np.asarray, (origin, u, v))
    area = float(np.linalg.norm(np.cross(u, v)))

    def sample(rng, n):
        ab = rng.random((n, 2))
        return origin + ab[:, :1] * u + ab[:, 1:] * v
    return area, sample


def _disk_part(radius, z, center_xy=(0.0, 0.0)):
    area = np.pi * radius**2

    def sample(rng, n):
        r = radius * np.sqrt(rng.random(n))
        t = 2 * np.pi * rng.random(n)
        return np.column_stack([center_xy[0] + r * np.cos(t), center_xy[1] + r * np.sin(t), np.full(n, z)])
    return area, sample


def _tube_part(radius, z0, z1, center_xy=(0.0, 0.0)):
    area = 2 * np.pi * radius * (z1 - z0)

    def sample(rng, n):
        t = 2 * np.pi * rng.random(n)
        z = z0 + (z1 - z0) * rng.random(n)
        return np.column_stack([center_xy[0] + radius * np.cos(t), center_xy[1] + radius * np.sin(t), z])
    return area, sample


def _cone_lateral(radius, height, z0):
    slant = np.hypot(radius, height)
    area = np.pi * radius * slant

    def sample(rng, n):
        # area density grows linearly with distance from the apex
        s = np.sqrt(rng.random(n))
        t = 2 * np.pi * rng.random(n)
        r = radius * s
        return np.column_stack([r * np.cos(t), r * np.sin(t), z0 + height * (1 - s)])
    return area, sample


def _torus_part(major, minor):
    area = 4 * np.pi**2 * major * minor

    def sample(rng, n):
        # rejection on the tube angle: area element ~ (major + minor cos v)
        out = np.empty((0, 2))
        while len(out) < n:
            u = 2 * np.pi * rng.random(2 * n)
            v = 2 * np.pi * rng.random(2 * n)
            w = rng.random(2 * n) * (major + minor)
            keep = w < major + minor * np.cos(v)
            out = np.vstack([out, np.column_stack([u[keep], v[keep]])])
        u, v = out[:n, 0], out[:n, 1]
        rr = major + minor * np.cos(v)
        return np.column_stack([rr * np.cos(u), rr * np.sin(u), minor * np.sin(v)])
    return area, sample


def _parts_for(kind, rng):
    """Surface parts for ``kind`` with mild per-instance size variation."""
    var = lambda lo, hi: float(rng.uniform(lo, hi))  # noqa: E731
    if kind == "sphere":
        return [_sphere_part(1.0)]
    if kind == "cube":
        a, b, c = var(0.9, 1.1), var(0.9, 1.1), var(0.9, 1.1)
        o = -0.5 * np.array([a, b, c])
        ex, ey, ez = np.array([a, 0, 0]), np.array([0, b, 0]), np.array([0, 0, c])
        return [_rect_part(o, ex, ey), _rect_part(o + ez, ex, ey),
                _rect_part(o, ex, ez), _rect_part(o + ey, ex, ez),
                _rect_part(o, ey, ez), _rect_part(o + ex, ey, ez)]
    if kind == "cylinder":
        r, h = var(0.4, 0.6), var(1.4, 1.8)
        return [_tube_part(r, -h / 2, h / 2), _disk_part(r, -h / 2), _disk_part(r, h / 2)]
    if kind == "cone":
        r, h = var(0.5, 0.7), var(1.2, 1.6)
        return [_cone_lateral(r, h, -h / 2), _disk_part(r, -h / 2)]
    if kind == "pot_plant":
        bowl = var(0.45, 0.55)
        return [_sphere_part(bowl, lower_half=True),
                _ball_part(var(0.4, 0.5), (0.0, 0.0, bowl + var(0.15, 0.3)))]
    if kind == "chair_like":
        w, d, back, leg = var(0.9, 1.1), var(0.9, 1.1), var(0.8, 1.1), var(0.6, 0.9)
        legs = [_tube_part(0.04, -leg, 0.0, (sx * (w / 2 - 0.05), sy * (d / 2 - 0.05)))
                for sx in (-1, 1) for sy in (-1, 1)]
        return [_rect_part((-w / 2, -d / 2, 0.0), (w, 0, 0), (0, d, 0)),
                _rect_part((-w / 2, -d / 2, 0.0), (w, 0, 0), (0, 0, back)),
                *legs]
    if kind == "torus":
        return [_torus_part(var(0.7, 0.8), var(0.2, 0.3))]
    raise ValueError(f"unknown shape kind {kind!r}; known: {', '.join(SHAPE_KINDS)}")


SHAPE_KINDS = ("sphere", "cube", "cylinder", "cone", "pot_plant", "chair_like", "torus")

# part ids reported per kind (several surfaces can share one semantic part)
_PART_GROUPS = {
    "pot_plant": [0, 1],
    "chair_like": [0, 1, 2, 2, 2, 2],
}


def _allocate(areas, n):
    """Largest-remainder split of ``n`` proportional to ``areas``."""
    areas = np.asarray(areas, dtype=np.float64)
    exact = n * areas / areas.sum()
    counts = np.floor(exact).astype(np.int64)
    short = n - counts.sum()
    order = np.lexsort((np.arange(len(areas)), -(exact - counts)))
    counts[order[:short]] += 1
    return counts


def generate_shape(kind, n, rng, jitter=0.01, label=None):
    if n < 8:
        raise ValueError(f"n must be >= 8, got {n}")
    if jitter < 0:
        raise ValueError("jitter must be >= 0")
    parts = _parts_for(kind, rng)
    counts = _allocate([a for a, _ in parts], n)
    groups = _PART_GROUPS.get(kind, [0] * len(parts))
    pts, ids = [], []
    for (area, sample), c, g in zip(parts, counts, groups):
        if c:
            pts.append(sample(rng, int(c)))
            ids.append(np.full(int(c), g, dtype=np.int64))
    points = np.vstack(pts)
    if jitter:
        points = points + jitter * rng.standard_normal(points.shape)
    pc = PointCloud(points, label, np.concatenate(ids))
    return normalize_unit_sphere(pc)


def normalize_unit_sphere(pc):
    """Centre on the centroid and scale the farthest point to norm one."""
    pts = pc.points - pc.points.mean(axis=0)
    radius = np.linalg.norm(pts, axis=1).max()
    if not radius > 0:
        raise ValueError("degenerate cloud: all points coincide, scale undefined")
    return PointCloud(pts / radius, pc.label, pc.part_ids, pc.scores)


def make_dataset(classes=DEFAULT_CLASSES, per_class_train=500, per_class_test=100,
                 n_points=256, jitter=0.01, seed=0):
    """Balanced dataset; cloud ``i`` of a split has label ``i % len(classes)``.

    Each cloud draws from its own stream keyed by (seed, split, index), so the
    splits never share noise and any single cloud can be regenerated alone.
    """
    classes = tuple(classes)
    for kind in classes:
        if kind not in SHAPE_KINDS:
            raise ValueError(f"unknown shape kind {kind!r}")

    def build(split_code, count):
        pts = np.empty((count, n_points, 3))
        parts = np.empty((count, n_points), dtype=np.int64)
        labels = np.arange(count) % len(classes)
        for i in range(count):
            rng = make_rng(np.random.SeedSequence(seed, spawn_key=(split_code, i)))
            pc = generate_shape(classes[labels[i]], n_points, rng, jitter)
            pts[i], parts[i] = pc.points, pc.part_ids
        return pts, labels, parts

    tr_p, tr_y, tr_parts = build(0, per_class_train * len(classes))
    te_p, te_y, te_parts = build(1, per_class_test * len(classes))
    return LabeledDataset(tr_p, tr_y, te_p, te_y, classes, seed, jitter, tr_parts, te_parts)


# -- file formats ----------------------------------------------------------------

def save_xyz(path, pc, scores=None):
    """One point per line ``x y z [score]``, nine significant digits."""
    pts = pc.points if isinstance(pc, PointCloud) else np.asarray(pc)
    if scores is not None:
        s = scores.scores if isinstance(scores, ScoreMap) else np.asarray(scores)
        if s.shape[0] != pts.shape[0]:
            raise ValueError(f"{s.shape[0]} scores for {pts.shape[0]} points")
        rows = np.column_stack([pts, s])
    else:
        rows = pts
    text = "\n".join(" ".join(f"{v:.9g}" for v in row) for row in rows)
    Path(path).write_text(text + "\n", encoding="ascii")


def load_xyz(path):
    rows, width = [], None
    for lineno, line in enumerate(Path(path).read_text(encoding="ascii").splitlines(), 1):
        if not line.strip():
            continue
        fields = line.split()
        if len(fields) not in (3, 4) or (width is not None and len(fields) != width):
            raise ValueError(f"{path}:{lineno}: expected 3 or 4 columns consistently, got {len(fields)}")
        try:
            rows.append([float(f) for f in fields])
        except ValueError:
            raise ValueError(f"{path}:{lineno}: non-numeric field in {line!r}") from None
        width = len(fields)
    if not rows:
        raise ValueError(f"{path}: empty point file")
    arr = np.array(rows)
    pc = PointCloud(arr[:, :3])
    if width == 4:
        pc.scores = ScoreMap(arr[:, 3], method="file")
    return pc


def save_dataset(ds, out_dir):
    out = Path(out_dir)
    for split in ("train", "test"):
        (out / split).mkdir(parents=True, exist_ok=True)
        pts, labels, _ = ds._split(split)
        for i, (p, y) in enumerate(zip(pts, labels)):
            save_xyz(out / split / f"{i:05d}_{ds.class_names[y]}.xyz", p)
    write_kv(out / "manifest.txt", {
        "kind": "dataset",
        "classes": list(ds.class_names),
        "train_count": len(ds.train_labels),
        "test_count": len(ds.test_labels),
        "per_class_train": len(ds.train_labels) // len(ds.class_names),
        "per_class_test": len(ds.test_labels) // len(ds.class_names),
        "points": ds.n_points,
        "jitter": float(ds.jitter),
        "seed": ds.seed,
    })


def load_dataset(path):
    root = Path(path)
    meta = read_kv(root / "manifest.txt")
    classes = tuple(meta["classes"].split(","))

    def read(split):
        files = sorted((root / split).glob("*.xyz"))
        pts = np.stack([load_xyz(f).points for f in files]) if files else np.empty((0, int(meta["points"]), 3))
        labels = np.array([classes.index(f.stem.split("_", 1)[1]) for f in files], dtype=np.int64)
        return pts, labels

    tr_p, tr_y = read("train")
    te_p, te_y = read("test")
    return LabeledDataset(tr_p, tr_y, te_p, te_y, classes, int(meta["seed"]), float(meta["jitter"]))
