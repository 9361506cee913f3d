"""Project a sparse model into per-view multi-channel feature maps.

A feature map holds, per pixel, the attributes of the nearest projected 3D
point.  Channel order is fixed: depth, color, sift, scale, orientation.

Encodings used for the network input:

* depth: ``(d - d_min) / (d_max - d_min + 1e-8)`` over the occupied cells of
  the map; the metric depth is kept separately in ``raw_depth``.
* color: ``byte / 127.5 - 1`` (matches the generator's tanh range).
* sift: ``byte / 255``.
* scale: ``log2(scale)``; orientation: ``(sin θ, cos θ)``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, NamedTuple, Optional, Sequence

import numpy as np

from .colmap_io import DESCRIPTOR_SIZE, CameraIntrinsics, SparseModel, quat_to_rotmat
from .errors import EmptyKeypointSet, MalformedRecord, MissingAttribute, UnknownImageId

Z_NEAR = 1e-4
DEPTH_EPS = 1e-8
TRAIN_SIZES = (296, 394, 512)
TRAIN_CROP = 256

_WIDTHS = (("depth", 1), ("color", 3), ("sift", DESCRIPTOR_SIZE), ("scale", 1), ("orientation", 2))
_ALIASES = {
    "z": "depth", "depth": "depth",
    "c": "color", "color": "color", "rgb": "color",
    "d": "sift", "sift": "sift", "desc": "sift",
    "s": "scale", "scale": "scale",
    "o": "orientation", "orientation": "orientation",
}


@dataclass(frozen=True)
class ChannelSchema:
    depth: bool = True
    color: bool = False
    sift: bool = False
    scale: bool = False
    orientation: bool = False

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("channel schema must enable at least one channel group")
        if (self.scale or self.orientation) and (self.depth or self.color):
            raise ValueError("scale/orientation channels are only valid for single-image keypoint maps")

    @classmethod
    def parse(cls, text: str) -> "ChannelSchema":
        """``"z,c,d"`` style flags (also accepts long names)."""
        flags = {}
        for tok in text.replace("+", ",").split(","):
            tok = tok.strip().lower()
            if not tok:
                continue
            if tok not in _ALIASES:
                raise ValueError(f"unknown channel {tok!r}")
            flags[_ALIASES[tok]] = True
        return cls(**{name: flags.get(name, False) for name, _ in _WIDTHS})

    @property
    def n(self) -> int:
        return sum(w for name, w in _WIDTHS if getattr(self, name))

    @property
    def single_image(self) -> bool:
        """Carries keypoint-only channels (scale or orientation)."""
        return self.scale or self.orientation

    def slices(self) -> dict:
        """Channel range per enabled group."""
        out, start = {}, 0
        for name, w in _WIDTHS:
            if getattr(self, name):
                out[name] = slice(start, start + w)
                start += w
        return out

    def __str__(self):
        short = {"depth": "z", "color": "c", "sift": "d", "scale": "s", "orientation": "o"}
        return ",".join(short[name] for name, _ in _WIDTHS if getattr(self, name))


@dataclass(frozen=True)
class ViewSpec:
    qvec: tuple
    tvec: tuple
    intrinsics: CameraIntrinsics
    out_width: int
    out_height: int

    def __post_init__(self):
        if self.out_width <= 0 or self.out_height <= 0:
            raise ValueError("output dimensions must be positive")

    @classmethod
    def from_image(cls, model: SparseModel, image_id: int, size: Optional[tuple] = None) -> "ViewSpec":
        """View of a registered image; ``size=(w, h)`` rescales the intrinsics."""
        if image_id not in model.images:
            raise UnknownImageId(f"image id {image_id} is not in the model")
        img = model.images[image_id]
        cam = model.cameras[img.camera_id]
        view = cls(img.qvec, img.tvec, cam, cam.width, cam.height)
        if size is not None:
            view = view.resized(*size)
        return view

    def resized(self, width: int, height: int) -> "ViewSpec":
        """Rescale to ``width`` x ``height``; aspect changes use the width factor."""
        s = width / self.out_width
        return replace(self, intrinsics=self.intrinsics.rescaled(s, width, height), out_width=width, out_height=height)

    def rotation(self) -> np.ndarray:
        return quat_to_rotmat(self.qvec)

    def camera_center(self) -> np.ndarray:
        return -self.rotation().T @ np.asarray(self.tvec, float)


class Projection(NamedTuple):
    row: int
    col: int
    depth: float
    point3d_id: int


@dataclass
class Projections:
    """Vectorized projection result; ``index`` points into ``model.arrays()``."""

    rows: np.ndarray
    cols: np.ndarray
    depth: np.ndarray
    point_ids: np.ndarray
    index: np.ndarray
    height: int
    width: int

    def __len__(self):
        return len(self.rows)

    def __iter__(self) -> Iterator[Projection]:
        for r, c, d, p in zip(self.rows.tolist(), self.cols.tolist(), self.depth.tolist(), self.point_ids.tolist()):
            yield Projection(r, c, d, p)


@dataclass
class FeatureMap:
    schema: ChannelSchema
    data: np.ndarray  # H x W x n float32
    occupancy: np.ndarray  # H x W bool
    raw_depth: np.ndarray  # H x W float64, 0 where unoccupied
    point_ids: np.ndarray  # H x W int64, -1 where unoccupied

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def M(self) -> int:
        return int(self.occupancy.sum())

    @classmethod
    def empty(cls, schema: ChannelSchema, height: int, width: int) -> "FeatureMap":
        return cls(
            schema,
            np.zeros((height, width, schema.n), np.float32),
            np.zeros((height, width), bool),
            np.zeros((height, width), np.float64),
            np.full((height, width), -1, np.int64),
        )

    def keep_only(self, keep: np.ndarray) -> "FeatureMap":
        """Copy with every cell outside ``keep`` cleared in all fields."""
        keep = keep & self.occupancy
        return FeatureMap(
            self.schema,
            np.where(keep[..., None], self.data, np.float32(0)),
            keep.copy(),
            np.where(keep, self.raw_depth, 0.0),
            np.where(keep, self.point_ids, -1),
        )

    def chw(self) -> np.ndarray:
        return np.ascontiguousarray(self.data.transpose(2, 0, 1))


# ---------------------------------------------------------------------------


def distort_project(xyz_cam: np.ndarray, cam: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Pixel coordinates (u, v) of camera-frame points (z assumed > 0)."""
    x = xyz_cam[:, 0] / xyz_cam[:, 2]
    y = xyz_cam[:, 1] / xyz_cam[:, 2]
    k = cam.radial
    if k:
        d = 1.0 + k * (x * x + y * y)
        x, y = x * d, y * d
    fx, fy = cam.focal
    cx, cy = cam.principal_point
    return fx * x + cx, fy * y + cy


def pixel_index(coord: np.ndarray) -> np.ndarray:
    """Nearest integer, ties rounded up."""
    return np.floor(coord + 0.5)


def world_to_camera(xyz: np.ndarray, R: np.ndarray, t) -> np.ndarray:
    """``R @ p + t`` per row, summed left to right in plain float64 arithmetic.

    Spelled out rather than a matrix product so results do not depend on the
    BLAS kernel (fused multiply-adds would change the last bit).
    """
    xyz = np.asarray(xyz, np.float64).reshape(-1, 3)
    x, y, z = xyz[:, 0:1], xyz[:, 1:2], xyz[:, 2:3]
    return x * R[:, 0] + y * R[:, 1] + z * R[:, 2] + np.asarray(t, np.float64)


def project_points(model: SparseModel, view: ViewSpec, z_near: float = Z_NEAR) -> Projections:
    arr = model.arrays()
    R = view.rotation()
    cam_pts = world_to_camera(arr["xyz"], R, view.tvec)
    front = np.nonzero(cam_pts[:, 2] > z_near)[0]
    u, v = distort_project(cam_pts[front], view.intrinsics)
    col, row = pixel_index(u), pixel_index(v)
    ok = (col >= 0) & (col < view.out_width) & (row >= 0) & (row < view.out_height)
    idx = front[ok]
    return Projections(
        rows=row[ok].astype(np.int64),
        cols=col[ok].astype(np.int64),
        depth=cam_pts[idx, 2],
        point_ids=arr["ids"][idx],
        index=idx,
        height=view.out_height,
        width=view.out_width,
    )


def normalize_depth(depth: np.ndarray) -> np.ndarray:
    if depth.size == 0:
        return depth.astype(np.float32)
    lo, hi = depth.min(), depth.max()
    return ((depth - lo) / (hi - lo + DEPTH_EPS)).astype(np.float32)


def rasterize(proj: Projections, model: SparseModel, schema: ChannelSchema) -> FeatureMap:
    """Keep, per pixel, the projection nearest to the camera (ties: lower id)."""
    if schema.single_image:
        raise ValueError("scale/orientation schemas are built with featuremap_from_keypoints")
    H, W = proj.height, proj.width
    fmap = FeatureMap.empty(schema, H, W)
    if len(proj) == 0:
        return fmap
    pix = proj.rows * W + proj.cols
    order = np.lexsort((proj.point_ids, proj.depth, pix))
    _, first = np.unique(pix[order], return_index=True)
    win = order[first]
    rows, cols = proj.rows[win], proj.cols[win]
    depth = proj.depth[win]
    src = proj.index[win]
    arr = model.arrays()

    fmap.occupancy[rows, cols] = True
    fmap.raw_depth[rows, cols] = depth
    fmap.point_ids[rows, cols] = proj.point_ids[win]
    sl = schema.slices()
    if "depth" in sl:
        fmap.data[rows, cols, sl["depth"]] = normalize_depth(depth)[:, None]
    if "color" in sl:
        fmap.data[rows, cols, sl["color"]] = arr["rgb"][src].astype(np.float32) / np.float32(127.5) - 1
    if "sift" in sl:
        missing = ~arr["has_descriptor"][src]
        if missing.any():
            bad = proj.point_ids[win][missing][:5].tolist()
            raise MissingAttribute(f"schema needs SIFT but points {bad} have no descriptor")
        fmap.data[rows, cols, sl["sift"]] = arr["descriptors"][src].astype(np.float32) / np.float32(255)
    return fmap


def render_view(model: SparseModel, view: ViewSpec, schema: ChannelSchema) -> FeatureMap:
    return rasterize(project_points(model, view), model, schema)


def apply_dropout(fmap: FeatureMap, keep_ratio: float, seed) -> FeatureMap:
    """Keep exactly ``round(keep_ratio * M)`` occupied cells, chosen uniformly."""
    if not 0 < keep_ratio <= 1:
        raise ValueError("keep_ratio must be in (0, 1]")
    cells = np.flatnonzero(fmap.occupancy)
    n_keep = int(np.floor(keep_ratio * len(cells) + 0.5))
    rng = np.random.default_rng(seed)
    chosen = rng.choice(cells, size=n_keep, replace=False)
    keep = np.zeros(fmap.occupancy.size, bool)
    keep[chosen] = True
    return fmap.keep_only(keep.reshape(fmap.occupancy.shape))


# ---------------------------------------------------------------------------
# single-image keypoints


@dataclass
class KeypointSet:
    xy: np.ndarray  # K x 2
    scale: np.ndarray  # K
    orientation: np.ndarray  # K, radians
    descriptors: np.ndarray  # K x 128 uint8
    width: int
    height: int

    def __post_init__(self):
        if len(self.xy):
            c, r = pixel_index(self.xy[:, 0]), pixel_index(self.xy[:, 1])
            if ((c < 0) | (c >= self.width) | (r < 0) | (r >= self.height)).any():
                raise ValueError("keypoints must lie inside the image")

    def __len__(self):
        return len(self.xy)


def load_keypoints(path, width: int, height: int) -> KeypointSet:
    """Text file, one keypoint per line: ``x y scale orientation d0 .. d127``."""
    path = Path(path)
    rows = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        tok = line.split()
        if len(tok) != 4 + DESCRIPTOR_SIZE:
            raise MalformedRecord(path, f"line {lineno}", f"expected {4 + DESCRIPTOR_SIZE} fields, got {len(tok)}")
        try:
            rows.append([float(t) for t in tok])
        except ValueError as exc:
            raise MalformedRecord(path, f"line {lineno}", str(exc)) from None
    a = np.array(rows, np.float64).reshape(-1, 4 + DESCRIPTOR_SIZE)
    desc = a[:, 4:]
    if ((desc < 0) | (desc > 255) | (desc != np.round(desc))).any():
        raise MalformedRecord(path, "descriptors", "descriptor values must be integers in 0..255")
    return KeypointSet(a[:, :2], a[:, 2], a[:, 3], desc.astype(np.uint8), width, height)


def featuremap_from_keypoints(kps: KeypointSet, schema: ChannelSchema) -> FeatureMap:
    if schema.depth or schema.color:
        raise ValueError("keypoint maps cannot carry depth or color channels")
    if len(kps) == 0:
        raise EmptyKeypointSet("no keypoints to rasterize")
    H, W = kps.height, kps.width
    fmap = FeatureMap.empty(schema, H, W)
    rows = pixel_index(kps.xy[:, 1]).astype(np.int64)
    cols = pixel_index(kps.xy[:, 0]).astype(np.int64)
    # last keypoint in the list wins a shared pixel
    pix = (rows * W + cols)[::-1]
    _, first_rev = np.unique(pix, return_index=True)
    win = len(pix) - 1 - first_rev
    r, c = rows[win], cols[win]
    fmap.occupancy[r, c] = True
    fmap.point_ids[r, c] = win
    sl = schema.slices()
    if "sift" in sl:
        fmap.data[r, c, sl["sift"]] = kps.descriptors[win].astype(np.float32) / np.float32(255)
    if "scale" in sl:
        fmap.data[r, c, sl["scale"]] = np.log2(kps.scale[win])[:, None]
    if "orientation" in sl:
        th = kps.orientation[win]
        fmap.data[r, c, sl["orientation"]] = np.stack([np.sin(th), np.cos(th)], axis=1)
    return fmap


# ---------------------------------------------------------------------------
# augmentation


def crop_view(view: ViewSpec, scale: float, offset: tuple, crop: int = TRAIN_CROP) -> ViewSpec:
    """Rescale by ``scale`` then crop a ``crop``² window at ``offset=(row, col)``."""
    oy, ox = offset
    intr = view.intrinsics.rescaled(scale, crop, crop, shift=(ox, oy))
    return replace(view, intrinsics=intr, out_width=crop, out_height=crop)


def augment_params(view: ViewSpec, seed, sizes: Sequence[int] = TRAIN_SIZES, crop: int = TRAIN_CROP):
    """Draw ``(scale, (row_offset, col_offset))`` for :func:`augment_view`."""
    rng = np.random.default_rng(seed)
    target = int(rng.choice(np.asarray(sizes)))
    scale = target / min(view.out_width, view.out_height)
    new_w = int(round(view.out_width * scale))
    new_h = int(round(view.out_height * scale))
    if min(new_w, new_h) < crop:
        raise ValueError(f"resized view {new_w}x{new_h} is smaller than the {crop} crop")
    oy = int(rng.integers(0, new_h - crop + 1))
    ox = int(rng.integers(0, new_w - crop + 1))
    return scale, (oy, ox)


def augment_view(view: ViewSpec, seed, sizes: Sequence[int] = TRAIN_SIZES, crop: int = TRAIN_CROP) -> ViewSpec:
    scale, offset = augment_params(view, seed, sizes, crop)
    return crop_view(view, scale, offset, crop)


# ---------------------------------------------------------------------------
# debug dump

_DUMP_HEADER = struct.Struct("<4I")


def write_featuremap_dump(fmap: FeatureMap, path) -> None:
    """Flat dump: uint32 H, W, n, M then H*W*n float32, row-major."""
    with open(path, "wb") as f:
        f.write(_DUMP_HEADER.pack(fmap.height, fmap.width, fmap.schema.n, fmap.M))
        f.write(np.ascontiguousarray(fmap.data, dtype="<f4").tobytes())


def read_featuremap_dump(path) -> tuple[np.ndarray, int]:
    raw = Path(path).read_bytes()
    if len(raw) < _DUMP_HEADER.size:
        raise MalformedRecord(path, "byte 0", "file shorter than the dump header")
    H, W, n, M = _DUMP_HEADER.unpack_from(raw)
    expected = _DUMP_HEADER.size + 4 * H * W * n
    if len(raw) != expected:
        raise MalformedRecord(path, f"byte {_DUMP_HEADER.size}", f"expected {expected} bytes, found {len(raw)}")
    data = np.frombuffer(raw, "<f4", offset=_DUMP_HEADER.size).reshape(H, W, n)
    return data, M
