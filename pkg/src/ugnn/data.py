"""Volumes on disk, preprocessing, and synthetic branching-tube trees.

File layout for a case stored at ``case.segv``::

    case.segv             image, dtype f32
    case.ref/.roi/.exc    reference, ROI and exclusion masks, dtype u8
    case.centreline.csv   "branch_id,parent_id,z,y,x" rows

Each ``.segv``-style file is one ASCII header line
``SEGV1 <u8|f32> <d> <h> <w> <sz> <sy> <sx>`` followed by the raw
little-endian payload in z-major order.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial import ConvexHull

from .rng import substream

MAGIC = "SEGV1"
_DTYPES = {"u8": np.dtype("<u1"), "f32": np.dtype("<f4")}
MASK_SUFFIXES = {"reference": ".ref", "roi": ".roi", "exclusion": ".exc"}


class VolumeFormatError(ValueError):
    pass


@dataclass
class Centreline:
    """Ordered axis points; consecutive points of one branch are neighbours."""

    points: np.ndarray                      # (n, 3) int (z, y, x)
    branch: np.ndarray                      # (n,) branch id per point
    parent: np.ndarray                      # (n,) parent branch id, -1 for the root

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.int64).reshape(-1, 3)
        self.branch = np.asarray(self.branch, dtype=np.int64).reshape(-1)
        self.parent = np.asarray(self.parent, dtype=np.int64).reshape(-1)
        if not (len(self.points) == len(self.branch) == len(self.parent)):
            raise ValueError("centreline arrays differ in length")

    def __len__(self):
        return len(self.points)

    @property
    def branch_ids(self) -> np.ndarray:
        return np.unique(self.branch)

    def parents(self) -> dict[int, int]:
        return {int(b): int(p) for b, p in zip(self.branch, self.parent)}

    def shifted(self, offset) -> "Centreline":
        return Centreline(self.points - np.asarray(offset), self.branch, self.parent)

    def select(self, keep: np.ndarray) -> "Centreline":
        return Centreline(self.points[keep], self.branch[keep], self.parent[keep])


@dataclass
class Volume:
    image: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    reference: np.ndarray | None = None
    roi: np.ndarray | None = None
    exclusion: np.ndarray | None = None
    centreline: Centreline | None = None
    name: str = ""

    def __post_init__(self):
        self.spacing = tuple(float(s) for s in self.spacing)
        for attr in MASK_SUFFIXES:
            m = getattr(self, attr)
            if m is not None:
                if m.shape != self.image.shape:
                    raise ValueError(f"{attr} mask shape {m.shape} differs from image {self.image.shape}")
                setattr(self, attr, np.asarray(m).astype(np.uint8))

    @property
    def shape(self) -> tuple:
        return self.image.shape

    def masks(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in MASK_SUFFIXES if getattr(self, k) is not None}


# ---------------------------------------------------------------------------
# I/O


def write_grid(path, array: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> None:
    array = np.asarray(array)
    if array.ndim != 3:
        raise ValueError("only 3-D grids can be written")
    if array.dtype == np.uint8 or array.dtype == bool:
        tag, payload = "u8", array.astype("<u1")
    elif np.issubdtype(array.dtype, np.floating):
        tag, payload = "f32", array.astype("<f4")
    else:
        raise VolumeFormatError(f"unsupported dtype {array.dtype}")
    d, h, w = array.shape
    header = f"{MAGIC} {tag} {d} {h} {w} {' '.join(repr(float(s)) for s in spacing)}\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(payload).tobytes())


def read_grid(path) -> tuple[np.ndarray, tuple]:
    raw = Path(path).read_bytes()
    end = raw.find(b"\n")
    if end < 0:
        raise VolumeFormatError(f"{path}: missing header line")
    fields = raw[:end].decode("ascii", errors="replace").split()
    if not fields or fields[0] != MAGIC:
        raise VolumeFormatError(f"{path}: bad magic {fields[:1]}")
    if len(fields) != 8:
        raise VolumeFormatError(f"{path}: header needs 8 fields, got {len(fields)}")
    tag = fields[1]
    if tag not in _DTYPES:
        raise VolumeFormatError(f"{path}: unsupported dtype {tag!r}")
    dims = tuple(int(v) for v in fields[2:5])
    spacing = tuple(float(v) for v in fields[5:8])
    dtype = _DTYPES[tag]
    expected = int(np.prod(dims)) * dtype.itemsize
    payload = raw[end + 1:]
    if len(payload) != expected:
        raise VolumeFormatError(f"{path}: payload has {len(payload)} bytes, header implies {expected}")
    arr = np.frombuffer(payload, dtype=dtype).reshape(dims)
    return (arr.astype(np.float32) if tag == "f32" else arr.astype(np.uint8)), spacing


def _centreline_path(path: Path) -> Path:
    return path.with_suffix(".centreline.csv")


def write_volume(path, vol: Volume) -> None:
    path = Path(path)
    write_grid(path, vol.image.astype(np.float32), vol.spacing)
    for attr, suffix in MASK_SUFFIXES.items():
        m = getattr(vol, attr)
        if m is not None:
            write_grid(path.with_suffix(suffix), m.astype(np.uint8), vol.spacing)
    if vol.centreline is not None:
        cl = vol.centreline
        with open(_centreline_path(path), "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["branch_id", "parent_id", "z", "y", "x"])
            for b, p, (z, y, x) in zip(cl.branch, cl.parent, cl.points):
                wr.writerow([int(b), int(p), int(z), int(y), int(x)])


def read_centreline(path) -> Centreline:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return Centreline(np.zeros((0, 3)), [], [])
    return Centreline([[int(r["z"]), int(r["y"]), int(r["x"])] for r in rows],
                      [int(r["branch_id"]) for r in rows], [int(r["parent_id"]) for r in rows])


def read_volume(path) -> Volume:
    path = Path(path)
    image, spacing = read_grid(path)
    masks = {}
    for attr, suffix in MASK_SUFFIXES.items():
        p = path.with_suffix(suffix)
        if p.exists():
            m, _ = read_grid(p)
            if m.shape != image.shape:
                raise VolumeFormatError(f"{p}: grid {m.shape} differs from image {image.shape}")
            masks[attr] = m
    cl_path = _centreline_path(path)
    centreline = read_centreline(cl_path) if cl_path.exists() else None
    return Volume(image, spacing, centreline=centreline, name=path.stem, **masks)


# ---------------------------------------------------------------------------
# preprocessing


def crop_to_bbox(vol: Volume, margin: int = 0) -> Volume:
    """Crop every grid to the ROI bounding box grown by ``margin`` voxels."""
    if vol.roi is None or not vol.roi.any():
        raise ValueError("crop_to_bbox needs a non-empty ROI mask")
    idx = np.argwhere(vol.roi)
    lo = np.maximum(idx.min(axis=0) - margin, 0)
    hi = np.minimum(idx.max(axis=0) + 1 + margin, vol.shape)
    sl = tuple(slice(a, b) for a, b in zip(lo, hi))
    masks = {k: m[sl].copy() for k, m in vol.masks().items()}
    cl = None
    if vol.centreline is not None:
        inside = ((vol.centreline.points >= lo) & (vol.centreline.points < hi)).all(axis=1)
        cl = vol.centreline.select(inside).shifted(lo)
    return Volume(vol.image[sl].copy(), vol.spacing, centreline=cl, name=vol.name, **masks)


def tile_offsets(length: int, window: int, overlap: float = 0.0) -> list[int]:
    """Window start offsets ``round(i * stride)``; the last window ends at ``length``."""
    if window > length:
        raise ValueError(f"window {window} larger than extent {length}")
    if not 0.0 <= overlap < 1.0:
        raise ValueError("overlap fraction must lie in [0, 1)")
    stride = window * (1.0 - overlap)
    offsets = []
    i = 0
    while True:
        z = int(math.floor(i * stride + 0.5))
        if z + window >= length:
            last = length - window
            if not offsets or offsets[-1] != last:
                offsets.append(last)
            return offsets
        if not offsets or offsets[-1] != z:
            offsets.append(z)
        i += 1


@dataclass
class Patch:
    offset: tuple
    image: np.ndarray
    masks: dict = field(default_factory=dict)


def sliding_window_patches(vol: Volume, patch_dims, axial_overlap_fraction: float = 0.0) -> list[Patch]:
    """Axial (z) sliding window; each patch spans the full in-plane extent."""
    pd, ph, pw = patch_dims
    d, h, w = vol.shape
    if pd > d or ph > h or pw > w:
        raise ValueError(f"patch {tuple(patch_dims)} larger than volume {vol.shape}")
    if (ph, pw) != (h, w):
        raise ValueError("in-plane patch extent must equal the (cropped) volume in-plane extent")
    patches = []
    for z in tile_offsets(d, pd, axial_overlap_fraction):
        sl = slice(z, z + pd)
        patches.append(Patch((z, 0, 0), vol.image[sl], {k: m[sl] for k, m in vol.masks().items()}))
    return patches


# ---------------------------------------------------------------------------
# rigid augmentation


@dataclass(frozen=True)
class RigidParams:
    angles: tuple = (0.0, 0.0, 0.0)         # degrees about the z, y and x axes
    translation: tuple = (0.0, 0.0, 0.0)    # voxels (z, y, x)
    flip: bool = False                      # mirror the x axis

    @property
    def is_identity(self) -> bool:
        return not self.flip and not any(self.angles) and not any(self.translation)

    def inverse_matrix(self) -> np.ndarray:
        return rotation_matrix(self.angles).T


def rotation_matrix(angles) -> np.ndarray:
    """Rotation acting on (z, y, x) vectors: about z, then y, then x."""
    az, ay, ax = np.deg2rad(angles)
    rz = np.array([[1, 0, 0], [0, np.cos(az), -np.sin(az)], [0, np.sin(az), np.cos(az)]])
    ry = np.array([[np.cos(ay), 0, np.sin(ay)], [0, 1, 0], [-np.sin(ay), 0, np.cos(ay)]])
    rx = np.array([[np.cos(ax), -np.sin(ax), 0], [np.sin(ax), np.cos(ax), 0], [0, 0, 1]])
    r = rx @ ry @ rz
    # quarter turns land exactly on the grid instead of a hair outside it
    snap = np.rint(r)
    return np.where(np.abs(r - snap) < 1e-12, snap, r)


def sample_rigid_params(rng: np.random.Generator, max_angle: float = 10.0, max_shift: float = 8.0,
                        flip: bool = True) -> RigidParams:
    return RigidParams(tuple(rng.uniform(-max_angle, max_angle, 3)),
                       tuple(rng.uniform(-max_shift, max_shift, 3)),
                       bool(flip and rng.random() < 0.5))


def rigid_augment(image: np.ndarray, masks: dict, params: RigidParams) -> tuple[np.ndarray, dict]:
    """Rotate/translate/flip about the grid centre.

    The image is resampled trilinearly, masks by nearest neighbour so they
    stay binary.  Samples falling outside the grid read as zero.
    """
    if params.is_identity:
        return image.copy(), {k: m.copy() for k, m in masks.items()}
    shape = np.array(image.shape, dtype=float)
    centre = (shape - 1) / 2
    flip = np.diag([1.0, 1.0, -1.0 if params.flip else 1.0])
    flip_off = np.array([0.0, 0.0, shape[2] - 1 if params.flip else 0.0])
    rinv = params.inverse_matrix()
    matrix = flip @ rinv
    offset = flip @ (centre - rinv @ (centre + np.asarray(params.translation, float))) + flip_off
    out = ndimage.affine_transform(image, matrix, offset=offset, order=1, mode="constant", cval=0.0)
    out_masks = {k: ndimage.affine_transform(m, matrix, offset=offset, order=0, mode="constant", cval=0)
                 for k, m in masks.items()}
    return out.astype(image.dtype), out_masks


# ---------------------------------------------------------------------------
# synthetic trees


@dataclass(frozen=True)
class SynthTreeParams:
    dims: tuple = (48, 48, 48)
    generations: int = 4
    branching: int = 2
    root_radius: float = 3.0
    radius_decay: float = 0.75
    length_range: tuple = (0.35, 0.45)     # root length as a fraction of depth
    length_decay: float = 0.7
    angle_spread: float = 35.0              # degrees between child and parent axis
    noise: float = 0.05
    texture: float = 0.08
    roi_margin: int = 3
    spacing: tuple = (1.0, 1.0, 1.0)
    on_overflow: str = "shrink"             # or "error"
    seed: int = 0

    def __post_init__(self):
        if min(self.dims) < 32 and self.generations >= 3:
            raise ValueError("three or more generations need a grid of at least 32^3")
        if self.root_radius * self.radius_decay ** (self.generations - 1) < 1.0 - 1e-9:
            raise ValueError("terminal branch radius would fall below one voxel")
        if self.on_overflow not in ("shrink", "error"):
            raise ValueError("on_overflow must be 'shrink' or 'error'")

    @property
    def expected_branches(self) -> int:
        """Branch count of the complete tree (no pruned subtrees)."""
        return sum(self.branching ** g for g in range(self.generations))


class TreeDoesNotFit(ValueError):
    pass


@dataclass
class _Branch:
    bid: int
    parent: int
    generation: int
    start: np.ndarray
    end: np.ndarray
    radius: float


def _perpendicular(v: np.ndarray, rng) -> np.ndarray:
    a = rng.normal(size=3)
    a -= a.dot(v) * v
    return a / np.linalg.norm(a)


def _rotate(v, axis, angle):
    # Rodrigues rotation of v about unit axis
    return v * np.cos(angle) + np.cross(axis, v) * np.sin(angle) + axis * axis.dot(v) * (1 - np.cos(angle))


def _grow(params: SynthTreeParams, rng) -> list[_Branch]:
    dims = np.array(params.dims, float)
    depth = dims[0]
    start = np.array([params.root_radius + 1.0, (dims[1] - 1) / 2, (dims[2] - 1) / 2])
    root_len = rng.uniform(*params.length_range) * depth
    branches = [_Branch(0, -1, 0, start, start + np.array([root_len, 0.0, 0.0]), params.root_radius)]
    frontier = [(branches[0], np.array([1.0, 0.0, 0.0]), root_len)]
    for gen in range(1, params.generations):
        nxt = []
        radius = params.root_radius * params.radius_decay ** gen
        for parent, direction, plen in frontier:
            axis = _perpendicular(direction, rng)
            twist = rng.uniform(0, 2 * np.pi)
            for c in range(params.branching):
                phi = twist + 2 * np.pi * c / params.branching
                spin_axis = _rotate(axis, direction, phi)
                spread = np.deg2rad(params.angle_spread) * rng.uniform(0.8, 1.2)
                d = _rotate(direction, spin_axis, spread)
                d /= np.linalg.norm(d)
                length = plen * params.length_decay * rng.uniform(0.85, 1.15)
                length = _fit_length(parent.end, d, length, radius, dims, params.on_overflow)
                if length < 2 * radius + 1:
                    continue
                b = _Branch(len(branches), parent.bid, gen, parent.end, parent.end + d * length, radius)
                branches.append(b)
                nxt.append((b, d, length))
        frontier = nxt
    return branches


def _fit_length(origin, direction, length, radius, dims, mode) -> float:
    lo = np.full(3, radius + 0.5)
    hi = dims - 1 - radius - 0.5
    limit = length
    for ax in range(3):
        if direction[ax] > 1e-12:
            limit = min(limit, (hi[ax] - origin[ax]) / direction[ax])
        elif direction[ax] < -1e-12:
            limit = min(limit, (lo[ax] - origin[ax]) / direction[ax])
    if limit < length - 1e-9 and mode == "error":
        raise TreeDoesNotFit("branch leaves the grid; increase dims or set on_overflow='shrink'")
    return max(limit, 0.0)


def _rasterize(branches: list[_Branch], dims) -> tuple[np.ndarray, np.ndarray, list]:
    mask = np.zeros(dims, dtype=bool)
    root = np.zeros(dims, dtype=bool)
    zz, yy, xx = np.meshgrid(*[np.arange(n) for n in dims], indexing="ij")
    grid = np.stack([zz, yy, xx], axis=-1).astype(float)
    rows = []
    for b in branches:
        seg = b.end - b.start
        seglen = float(np.linalg.norm(seg))
        lo = np.maximum(np.floor(np.minimum(b.start, b.end) - b.radius - 1), 0).astype(int)
        hi = np.minimum(np.ceil(np.maximum(b.start, b.end) + b.radius + 2), dims).astype(int)
        sub = tuple(slice(a, c) for a, c in zip(lo, hi))
        p = grid[sub] - b.start
        t = np.clip((p @ seg) / max(seglen ** 2, 1e-12), 0.0, 1.0)
        dist = np.linalg.norm(p - t[..., None] * seg, axis=-1)
        tube = dist <= b.radius
        mask[sub] |= tube
        if b.generation == 0:
            root[sub] |= tube
        n = max(2, int(np.ceil(seglen)) + 1)
        pts = np.rint(b.start + np.linspace(0, 1, n)[:, None] * seg).astype(np.int64)
        keep = np.ones(len(pts), bool)
        keep[1:] = (pts[1:] != pts[:-1]).any(axis=1)
        for q in pts[keep]:
            rows.append((b.bid, b.parent, *q))
    return mask, root, rows


def _convex_roi(mask: np.ndarray, margin: int) -> np.ndarray:
    grown = ndimage.binary_dilation(mask, ndimage.generate_binary_structure(3, 1), iterations=margin)
    hull = ConvexHull(np.argwhere(grown))
    coords = np.indices(mask.shape).reshape(3, -1).T
    inside = (coords @ hull.equations[:, :3].T + hull.equations[:, 3] <= 1e-9).all(axis=1)
    return inside.reshape(mask.shape) | grown


def generate_synthetic_tree(params: SynthTreeParams) -> Volume:
    """Tapering tube tree with a CT-like image (dark lumen, bright wall).

    Deterministic for a given ``params`` (seed included).
    """
    rng = substream(params.seed, "synthesis")
    branches = _grow(params, rng)
    mask, root, rows = _rasterize(branches, params.dims)
    ball = ndimage.generate_binary_structure(3, 1)
    wall = ndimage.binary_dilation(mask, ball, iterations=1) & ~mask
    image = np.full(params.dims, 0.35)
    image[wall] = 0.85
    image[mask] = 0.1
    image = ndimage.gaussian_filter(image, 0.7)
    texture = ndimage.gaussian_filter(rng.normal(size=params.dims), 3.0)
    texture /= max(np.abs(texture).max(), 1e-12)
    image += params.texture * texture + params.noise * rng.normal(size=params.dims)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    roi = _convex_roi(mask, params.roi_margin)
    arr = np.array(rows, dtype=np.int64).reshape(-1, 5)
    cl = Centreline(arr[:, 2:], arr[:, 0], arr[:, 1])
    return Volume(image, params.spacing, reference=mask, roi=roi, exclusion=root, centreline=cl,
                  name=f"synth_{params.seed}")


def count_branches(vol: Volume) -> int:
    return 0 if vol.centreline is None else len(vol.centreline.branch_ids)


def pad_volume(image: np.ndarray, before, after, mode: str = "reflect") -> np.ndarray:
    return np.pad(image, list(zip(before, after)), mode=mode)


def with_masks(vol: Volume, **masks) -> Volume:
    return replace(vol, **masks)


def standardize_intensity(image: np.ndarray) -> np.ndarray:
    """Zero mean, unit variance over the whole volume (network input scale).

    A constant image maps to zeros.
    """
    img = np.asarray(image, dtype=np.float64)
    std = img.std()
    if std < 1e-12:
        return np.zeros(img.shape, dtype=np.float32)
    return ((img - img.mean()) / std).astype(np.float32)
