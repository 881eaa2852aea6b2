"""Synthetic shape clouds, the binary cloud format and dataset indices.

Cloud file layout (little-endian): magic ``PCJ1``, u32 point count, then
``n * 3`` float32 coordinates. The index is UTF-8 text::

    pcjepa-index v1
    #class 0 sphere
    clouds/sphere_0000.pcj<TAB>0<TAB>train
"""
from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from pointjepa.errors import FormatError, InvalidArgument

CLOUD_MAGIC = b"PCJ1"
INDEX_HEADER = "pcjepa-index v1"
CLASS_NAMES = ("sphere", "cube", "cylinder", "cone", "torus", "plane")
SYMMETRIC = frozenset({"sphere", "cube", "cylinder", "torus", "plane"})


@dataclass(frozen=True)
class ShapeClass:
    """A parametric surface. ``params`` depend on ``kind``:

    sphere: radius; cube: (sx, sy, sz) edge lengths; cylinder: (radius, height);
    cone: (radius, height); torus: (major, minor); plane: (width, depth).
    """

    kind: str
    params: tuple = field(default=())

    def __post_init__(self):
        if self.kind not in CLASS_NAMES:
            raise InvalidArgument(f"unknown shape kind {self.kind!r}")
        if any(not (p > 0 and math.isfinite(p)) for p in self.params):
            raise InvalidArgument(f"shape parameters must be positive, got {self.params}")
        if self.kind == "torus" and len(self.params) == 2 and self.params[1] >= self.params[0]:
            raise InvalidArgument("torus minor radius must be below the major radius")


_DEFAULT_PARAMS = {
    "sphere": (1.0,),
    "cube": (1.0, 1.0, 1.0),
    "cylinder": (0.5, 1.5),
    "cone": (0.6, 1.4),
    "torus": (1.0, 0.3),
    "plane": (2.0, 1.2),
}


def _params(shape: ShapeClass) -> tuple:
    return shape.params or _DEFAULT_PARAMS[shape.kind]


def _unit_vectors(n, rng):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _disk(n, radius, rng):
    r = radius * np.sqrt(rng.uniform(size=n))
    a = rng.uniform(0, 2 * np.pi, size=n)
    return r * np.cos(a), r * np.sin(a)


def cube_faces(params):
    """Areas of the six faces as pairs (-x, +x, -y, +y, -z, +z)."""
    sx, sy, sz = params
    return np.array([sy * sz, sy * sz, sx * sz, sx * sz, sx * sy, sx * sy])


def _sample_surface(shape: ShapeClass, n: int, rng) -> np.ndarray:
    p = _params(shape)
    kind = shape.kind
    if kind == "sphere":
        return p[0] * _unit_vectors(n, rng)
    if kind == "cube":
        half = np.array(p) / 2
        areas = cube_faces(p)
        face = rng.choice(6, size=n, p=areas / areas.sum())
        pts = rng.uniform(-half, half, size=(n, 3))
        axis = face // 2
        sign = np.where(face % 2 == 0, -1.0, 1.0)
        pts[np.arange(n), axis] = sign * half[axis]
        return pts
    if kind == "cylinder":
        r, h = p
        areas = np.array([2 * np.pi * r * h, np.pi * r * r, np.pi * r * r])
        part = rng.choice(3, size=n, p=areas / areas.sum())
        a = rng.uniform(0, 2 * np.pi, size=n)
        z = rng.uniform(-h / 2, h / 2, size=n)
        pts = np.stack([r * np.cos(a), r * np.sin(a), z], axis=1)
        cap = part > 0
        dx, dy = _disk(int(cap.sum()), r, rng)
        pts[cap, 0], pts[cap, 1] = dx, dy
        pts[cap, 2] = np.where(part[cap] == 1, -h / 2, h / 2)
        return pts
    if kind == "cone":
        r, h = p
        slant = math.hypot(r, h)
        areas = np.array([np.pi * r * slant, np.pi * r * r])
        part = rng.choice(2, size=n, p=areas / areas.sum())
        # lateral area density grows linearly with distance from the apex
        s = np.sqrt(rng.uniform(size=n))
        a = rng.uniform(0, 2 * np.pi, size=n)
        pts = np.stack([s * r * np.cos(a), s * r * np.sin(a), h - s * h], axis=1)
        base = part == 1
        dx, dy = _disk(int(base.sum()), r, rng)
        pts[base, 0], pts[base, 1], pts[base, 2] = dx, dy, 0.0
        return pts
    if kind == "torus":
        big, small = p
        out = np.empty((0, 3))
        # rejection on the tube angle for uniform area
        while out.shape[0] < n:
            m = 2 * (n - out.shape[0]) + 16
            u = rng.uniform(0, 2 * np.pi, size=m)
            v = rng.uniform(0, 2 * np.pi, size=m)
            keep = rng.uniform(size=m) * (big + small) <= big + small * np.cos(v)
            u, v = u[keep], v[keep]
            ring = big + small * np.cos(v)
            out = np.concatenate(
                [out, np.stack([ring * np.cos(u), ring * np.sin(u), small * np.sin(v)], axis=1)]
            )
        return out[:n]
    w, d = p
    return np.stack(
        [rng.uniform(-w / 2, w / 2, size=n), rng.uniform(-d / 2, d / 2, size=n), np.zeros(n)], axis=1
    )


def normalize_cloud(pts: np.ndarray) -> np.ndarray:
    pts = pts - pts.mean(axis=0)
    r = np.linalg.norm(pts, axis=1).max()
    return pts / r if r > 0 else pts


def gen_shape(shape: ShapeClass, n: int, rng: np.random.Generator, jitter: float = 0.0,
              rotate: bool = False) -> np.ndarray:
    """Sample ``n`` surface points, optionally rotate and jitter, then center and scale to the unit ball."""
    if n < 1:
        raise InvalidArgument("n must be >= 1")
    if jitter < 0:
        raise InvalidArgument("jitter must be non-negative")
    if shape.kind in SYMMETRIC:
        # antithetic pairs put the centroid exactly on the shape's center
        half = _sample_surface(shape, (n + 1) // 2, rng)
        pts = np.concatenate([half, -half])[:n]
    else:
        pts = _sample_surface(shape, n, rng)
    if rotate:
        pts = pts @ Rotation.random(random_state=rng).as_matrix().T
    if jitter > 0:
        pts = pts + rng.normal(0.0, jitter, size=pts.shape)
    # center/scale in float64, then re-center the float32 result
    out = normalize_cloud(pts).astype(np.float32)
    return out - out.mean(axis=0, dtype=np.float64).astype(np.float32)


def random_shape(kind: str, rng: np.random.Generator) -> ShapeClass:
    """Per-object random proportions so classes differ by topology, not just by aspect."""
    if kind == "sphere":
        return ShapeClass(kind, (1.0,))
    if kind == "cube":
        return ShapeClass(kind, tuple(rng.uniform(0.6, 1.4, size=3)))
    if kind == "cylinder":
        return ShapeClass(kind, (1.0, float(rng.uniform(1.0, 3.0))))
    if kind == "cone":
        return ShapeClass(kind, (1.0, float(rng.uniform(1.0, 3.0))))
    if kind == "torus":
        return ShapeClass(kind, (1.0, float(rng.uniform(0.2, 0.5))))
    return ShapeClass(kind, (1.0, float(rng.uniform(0.4, 1.0))))


# Cloud files --------------------------------------------------------------------

def encode_cloud(points) -> bytes:
    pts = np.ascontiguousarray(points, dtype="<f4")
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise InvalidArgument(f"expected (n, 3) points, got {pts.shape}")
    return CLOUD_MAGIC + struct.pack("<I", pts.shape[0]) + pts.tobytes()


def decode_cloud(buf: bytes) -> np.ndarray:
    if len(buf) < 8:
        raise FormatError("cloud file is truncated")
    if buf[:4] != CLOUD_MAGIC:
        raise FormatError("not a cloud file (bad magic)")
    (n,) = struct.unpack("<I", buf[4:8])
    if n < 1:
        raise FormatError("cloud file holds no points")
    if len(buf) != 8 + 12 * n:
        raise FormatError(f"cloud file size {len(buf)} does not match {n} points")
    pts = np.frombuffer(buf, dtype="<f4", offset=8).reshape(n, 3).astype(np.float32)
    if not np.all(np.isfinite(pts)):
        raise FormatError("cloud file has non-finite coordinates")
    return pts


def write_cloud(path, points):
    with open(path, "wb") as fh:
        fh.write(encode_cloud(points))


def read_cloud(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_cloud(fh.read())


# Dataset index ------------------------------------------------------------------

@dataclass(frozen=True)
class IndexEntry:
    path: str
    label: int
    split: str


@dataclass(frozen=True)
class DatasetIndex:
    entries: tuple
    classes: tuple
    root: str = "."

    def __post_init__(self):
        paths = [e.path for e in self.entries]
        if len(set(paths)) != len(paths):
            raise FormatError("duplicate paths in dataset index")
        for e in self.entries:
            if not 0 <= e.label < len(self.classes):
                raise FormatError(f"label {e.label} outside class table")
            if e.split not in ("train", "test"):
                raise FormatError(f"unknown split {e.split!r}")

    def split(self, name: str) -> list:
        return [e for e in self.entries if e.split == name]

    def resolve(self, entry: IndexEntry) -> str:
        return os.path.join(self.root, entry.path)

    def load(self, name: str):
        """Clouds and labels of one split, in index order."""
        entries = self.split(name)
        clouds = [read_cloud(self.resolve(e)) for e in entries]
        return clouds, np.array([e.label for e in entries], dtype=np.int64)


def format_index(index: DatasetIndex) -> str:
    lines = [INDEX_HEADER]
    lines += [f"#class {i} {name}" for i, name in enumerate(index.classes)]
    lines += [f"{e.path}\t{e.label}\t{e.split}" for e in index.entries]
    return "\n".join(lines) + "\n"


def parse_index(text: str, root: str = ".") -> DatasetIndex:
    lines = text.splitlines()
    if not lines or lines[0].strip() != INDEX_HEADER:
        raise FormatError("missing index header")
    classes: dict = {}
    entries = []
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        if line.startswith("#class "):
            parts = line.split(maxsplit=2)
            if len(parts) != 3:
                raise FormatError(f"line {ln}: bad class line")
            classes[int(parts[1])] = parts[2]
            continue
        if line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise FormatError(f"line {ln}: expected path<TAB>label<TAB>split")
        try:
            entries.append(IndexEntry(parts[0], int(parts[1]), parts[2]))
        except ValueError as e:
            raise FormatError(f"line {ln}: {e}") from e
    if sorted(classes) != list(range(len(classes))):
        raise FormatError("class ids must be 0..K-1")
    return DatasetIndex(tuple(entries), tuple(classes[i] for i in range(len(classes))), root)


def write_index(path, index: DatasetIndex):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_index(index))


def read_index(path) -> DatasetIndex:
    with open(path, encoding="utf-8") as fh:
        return parse_index(fh.read(), root=str(Path(path).parent))


def build_dataset(out_dir, per_class: int = 100, n_points: int = 1024, split_ratio: float = 0.8,
                  seed: int = 0, jitter: float = 0.01, rotate: bool = True,
                  classes=CLASS_NAMES) -> DatasetIndex:
    """Write ``per_class`` clouds of each class plus ``index.txt`` under ``out_dir``.

    The first ``round(per_class * split_ratio)`` objects of each class form the
    train split.
    """
    if per_class < 1 or n_points < 1:
        raise InvalidArgument("per_class and n_points must be positive")
    if not 0 <= split_ratio <= 1:
        raise InvalidArgument("split_ratio must lie in [0, 1]")
    out = Path(out_dir)
    (out / "clouds").mkdir(parents=True, exist_ok=True)
    n_train = int(math.floor(per_class * split_ratio + 0.5))
    root = np.random.SeedSequence(seed)
    entries = []
    for label, (kind, ss) in enumerate(zip(classes, root.spawn(len(classes)))):
        rng = np.random.default_rng(ss)
        for i in range(per_class):
            pts = gen_shape(random_shape(kind, rng), n_points, rng, jitter=jitter, rotate=rotate)
            rel = f"clouds/{kind}_{i:04d}.pcj"
            write_cloud(out / rel, pts)
            entries.append(IndexEntry(rel, label, "train" if i < n_train else "test"))
    index = DatasetIndex(tuple(entries), tuple(classes), str(out))
    write_index(out / "index.txt", index)
    return index
