"""Reading and writing COLMAP sparse models plus the descriptor sidecar.

Supported: ``cameras``/``images``/``points3D`` in ``.txt`` and ``.bin``
(little-endian COLMAP layout) and ``descriptors.bin``, a flat file of
``(uint64 point3d_id, 128 x uint8)`` records.

Only the SIMPLE_PINHOLE, PINHOLE and SIMPLE_RADIAL camera models are
accepted; anything else raises :class:`UnsupportedCameraModel`.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import (
    DanglingReference,
    DuplicatePointId,
    IoFailure,
    MalformedRecord,
    MissingFile,
    TruncatedRecord,
    UnsupportedCameraModel,
)

log = logging.getLogger(__name__)

CAMERA_MODELS = {
    # name: (COLMAP model id, number of params)
    "SIMPLE_PINHOLE": (0, 3),
    "PINHOLE": (1, 4),
    "SIMPLE_RADIAL": (2, 4),
}
CAMERA_MODEL_BY_ID = {mid: name for name, (mid, _) in CAMERA_MODELS.items()}

DESCRIPTOR_SIZE = 128
SIDECAR_RECORD = 8 + DESCRIPTOR_SIZE
SIDECAR_NAME = "descriptors.bin"
_SIDECAR_DTYPE = np.dtype([("id", "<u8"), ("desc", "u1", (DESCRIPTOR_SIZE,))])

# ‖q‖ deviations below this are left alone so that write→parse is bit-exact
_QUAT_RENORM_TOL = 1e-12


@dataclass(frozen=True)
class CameraIntrinsics:
    camera_id: int
    model: str
    width: int
    height: int
    params: tuple

    @property
    def focal(self) -> tuple[float, float]:
        if self.model == "PINHOLE":
            return self.params[0], self.params[1]
        return self.params[0], self.params[0]

    @property
    def principal_point(self) -> tuple[float, float]:
        if self.model == "PINHOLE":
            return self.params[2], self.params[3]
        return self.params[1], self.params[2]

    @property
    def radial(self) -> float:
        return self.params[3] if self.model == "SIMPLE_RADIAL" else 0.0

    def check(self, require_principal_inside: bool = True) -> None:
        """Raise ``ValueError`` describing the first violated invariant."""
        if self.model not in CAMERA_MODELS:
            raise UnsupportedCameraModel(f"camera {self.camera_id}: model {self.model!r}")
        nparams = CAMERA_MODELS[self.model][1]
        if len(self.params) != nparams:
            raise ValueError(
                f"camera {self.camera_id}: {self.model} takes {nparams} params, got {len(self.params)}"
            )
        if not all(math.isfinite(p) for p in self.params):
            raise ValueError(f"camera {self.camera_id}: non-finite parameter")
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"camera {self.camera_id}: non-positive image size")
        fx, fy = self.focal
        if fx <= 0 or fy <= 0:
            raise ValueError(f"camera {self.camera_id}: focal length must be > 0")
        cx, cy = self.principal_point
        if require_principal_inside and not (0 <= cx < self.width and 0 <= cy < self.height):
            raise ValueError(f"camera {self.camera_id}: principal point outside image")

    def rescaled(self, factor: float, width: int, height: int, shift=(0.0, 0.0)) -> "CameraIntrinsics":
        """Scale focal/principal point by ``factor`` then subtract ``shift=(dx, dy)``."""
        p = list(self.params)
        if self.model == "PINHOLE":
            p[0] *= factor
            p[1] *= factor
            p[2] = p[2] * factor - shift[0]
            p[3] = p[3] * factor - shift[1]
        else:
            p[0] *= factor
            p[1] = p[1] * factor - shift[0]
            p[2] = p[2] * factor - shift[1]
        return replace(self, width=int(width), height=int(height), params=tuple(p))


def quat_to_rotmat(q) -> np.ndarray:
    """Rotation matrix for a unit quaternion ``(qw, qx, qy, qz)``."""
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * y * y - 2 * z * z, 2 * x * y - 2 * w * z, 2 * z * x + 2 * w * y],
            [2 * x * y + 2 * w * z, 1 - 2 * x * x - 2 * z * z, 2 * y * z - 2 * w * x],
            [2 * z * x - 2 * w * y, 2 * y * z + 2 * w * x, 1 - 2 * x * x - 2 * y * y],
        ]
    )


def normalize_quat(q) -> tuple:
    n2 = sum(c * c for c in q)
    if not math.isfinite(n2) or n2 == 0.0:
        raise ValueError("quaternion has zero or non-finite norm")
    if abs(n2 - 1.0) <= _QUAT_RENORM_TOL:
        return tuple(float(c) for c in q)
    n = math.sqrt(n2)
    return tuple(float(c) / n for c in q)


@dataclass(frozen=True)
class ImagePose:
    image_id: int
    qvec: tuple  # (qw, qx, qy, qz), world -> camera
    tvec: tuple
    camera_id: int
    name: str
    observations: tuple = ()  # (x, y, point3d_id | None)

    def rotation(self) -> np.ndarray:
        return quat_to_rotmat(self.qvec)


@dataclass(frozen=True)
class Point3D:
    point3d_id: int
    xyz: tuple
    rgb: tuple
    error: float
    track: tuple = ()  # (image_id, point2d_idx)
    descriptor: Optional[bytes] = None


@dataclass
class SparseModel:
    cameras: dict = field(default_factory=dict)
    images: dict = field(default_factory=dict)
    points: dict = field(default_factory=dict)
    _arrays: Optional[dict] = field(default=None, compare=False, repr=False)

    def validate(self) -> None:
        """Check referential integrity; raises :class:`DanglingReference`."""
        for cam_id, cam in self.cameras.items():
            if cam.camera_id != cam_id:
                raise DanglingReference(f"camera key {cam_id} holds camera {cam.camera_id}")
        for img_id, img in self.images.items():
            if img.image_id != img_id:
                raise DanglingReference(f"image key {img_id} holds image {img.image_id}")
            if img.camera_id not in self.cameras:
                raise DanglingReference(f"image {img_id} references missing camera {img.camera_id}")
            for _, _, pid in img.observations:
                if pid is not None and pid not in self.points:
                    raise DanglingReference(f"image {img_id} observes missing point {pid}")
        for pid, pt in self.points.items():
            if pt.point3d_id != pid:
                raise DanglingReference(f"point key {pid} holds point {pt.point3d_id}")
            for img_id, idx in pt.track:
                img = self.images.get(img_id)
                if img is None:
                    raise DanglingReference(f"point {pid} track references missing image {img_id}")
                if idx >= len(img.observations):
                    raise DanglingReference(
                        f"point {pid} track references observation {idx} of image {img_id}"
                        f" which has {len(img.observations)}"
                    )
            if pt.descriptor is not None and len(pt.descriptor) != DESCRIPTOR_SIZE:
                raise ValueError(f"point {pid}: descriptor must be {DESCRIPTOR_SIZE} bytes")

    def arrays(self) -> dict:
        """Column view of the points: ids, xyz, rgb, descriptors, has_descriptor."""
        if self._arrays is None:
            pts = list(self.points.values())
            n = len(pts)
            desc = np.zeros((n, DESCRIPTOR_SIZE), np.uint8)
            has = np.zeros(n, bool)
            for i, p in enumerate(pts):
                if p.descriptor is not None:
                    desc[i] = np.frombuffer(p.descriptor, np.uint8)
                    has[i] = True
            self._arrays = {
                "ids": np.array([p.point3d_id for p in pts], np.int64),
                "xyz": np.array([p.xyz for p in pts], np.float64).reshape(n, 3),
                "rgb": np.array([p.rgb for p in pts], np.uint8).reshape(n, 3),
                "descriptors": desc,
                "has_descriptor": has,
            }
        return self._arrays

    def descriptor_coverage(self) -> float:
        if not self.points:
            return 0.0
        return sum(p.descriptor is not None for p in self.points.values()) / len(self.points)


# ---------------------------------------------------------------------------
# text format


def _fmt(x: float) -> str:
    return repr(float(x))


def _read_lines(path: Path) -> list[str]:
    try:
        return path.read_text().splitlines()
    except UnicodeDecodeError as exc:
        raise MalformedRecord(path, "text", f"not valid UTF-8 ({exc.reason})") from None


def _parse_cameras_text(path: Path) -> dict:
    cameras = {}
    for lineno, line in enumerate(_read_lines(path), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        tok = line.split()
        try:
            cam_id, model = int(tok[0]), tok[1]
            width, height = int(tok[2]), int(tok[3])
            params = tuple(float(t) for t in tok[4:])
        except (IndexError, ValueError) as exc:
            raise MalformedRecord(path, f"line {lineno}", f"bad camera record: {exc}") from None
        _add_camera(cameras, CameraIntrinsics(cam_id, model, width, height, params), path, f"line {lineno}")
    return cameras


def _add_camera(cameras, cam, path, location):
    if cam.model not in CAMERA_MODELS:
        raise UnsupportedCameraModel(f"{path}:{location}: camera model {cam.model!r} is not supported")
    try:
        cam.check()
    except UnsupportedCameraModel:
        raise
    except ValueError as exc:
        raise MalformedRecord(path, location, str(exc)) from None
    if cam.camera_id in cameras:
        raise MalformedRecord(path, location, f"duplicate camera id {cam.camera_id}")
    cameras[cam.camera_id] = cam


def _parse_images_text(path: Path) -> dict:
    images = {}
    lines = _read_lines(path)
    i = 0
    while i < len(lines):
        line = lines[i].strip()
        lineno = i + 1
        i += 1
        if not line or line.startswith("#"):
            continue
        tok = line.split(maxsplit=9)
        try:
            image_id = int(tok[0])
            qvec = normalize_quat([float(t) for t in tok[1:5]])
            tvec = tuple(float(t) for t in tok[5:8])
            camera_id = int(tok[8])
            name = tok[9]
        except (IndexError, ValueError) as exc:
            raise MalformedRecord(path, f"line {lineno}", f"bad image record: {exc}") from None
        obs_line = lines[i] if i < len(lines) else ""
        i += 1
        otok = obs_line.split()
        if len(otok) % 3:
            raise MalformedRecord(path, f"line {lineno + 1}", "POINTS2D entries must be (X, Y, POINT3D_ID) triples")
        try:
            obs = tuple(
                (float(otok[j]), float(otok[j + 1]), _opt_id(int(otok[j + 2])))
                for j in range(0, len(otok), 3)
            )
        except ValueError as exc:
            raise MalformedRecord(path, f"line {lineno + 1}", f"bad POINTS2D entry: {exc}") from None
        if image_id in images:
            raise MalformedRecord(path, f"line {lineno}", f"duplicate image id {image_id}")
        images[image_id] = ImagePose(image_id, qvec, tvec, camera_id, name, obs)
    return images


def _opt_id(pid: int):
    return None if pid < 0 else pid


def _parse_points_text(path: Path) -> dict:
    points = {}
    for lineno, line in enumerate(_read_lines(path), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        tok = line.split()
        try:
            pid = int(tok[0])
            xyz = tuple(float(t) for t in tok[1:4])
            rgb = tuple(int(t) for t in tok[4:7])
            error = float(tok[7])
            rest = tok[8:]
            if len(xyz) != 3 or len(rgb) != 3 or len(rest) % 2:
                raise ValueError("wrong field count")
            if not all(0 <= c <= 255 for c in rgb):
                raise ValueError("color outside 0..255")
            track = tuple((int(rest[j]), int(rest[j + 1])) for j in range(0, len(rest), 2))
        except (IndexError, ValueError) as exc:
            raise MalformedRecord(path, f"line {lineno}", f"bad point record: {exc}") from None
        if pid in points:
            raise MalformedRecord(path, f"line {lineno}", f"duplicate point id {pid}")
        points[pid] = Point3D(pid, xyz, rgb, error, track)
    return points


def _write_text(model: SparseModel, directory: Path) -> None:
    with open(directory / "cameras.txt", "w") as f:
        f.write("# Camera list with one line of data per camera:\n")
        f.write("#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n")
        for cam in model.cameras.values():
            params = " ".join(_fmt(p) for p in cam.params)
            f.write(f"{cam.camera_id} {cam.model} {cam.width} {cam.height} {params}\n")
    with open(directory / "images.txt", "w") as f:
        f.write("# Image list with two lines of data per image:\n")
        f.write("#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n")
        f.write("#   POINTS2D[] as (X, Y, POINT3D_ID)\n")
        for img in model.images.values():
            pose = " ".join(_fmt(v) for v in (*img.qvec, *img.tvec))
            f.write(f"{img.image_id} {pose} {img.camera_id} {img.name}\n")
            f.write(
                " ".join(f"{_fmt(x)} {_fmt(y)} {-1 if pid is None else pid}" for x, y, pid in img.observations)
                + "\n"
            )
    with open(directory / "points3D.txt", "w") as f:
        f.write("# 3D point list with one line of data per point:\n")
        f.write("#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)\n")
        for pt in model.points.values():
            xyz = " ".join(_fmt(v) for v in pt.xyz)
            rgb = " ".join(str(int(c)) for c in pt.rgb)
            track = "".join(f" {i} {j}" for i, j in pt.track)
            f.write(f"{pt.point3d_id} {xyz} {rgb} {_fmt(pt.error)}{track}\n")


# ---------------------------------------------------------------------------
# binary format


class _Cursor:
    def __init__(self, path: Path, data: bytes):
        self.path = path
        self.data = data
        self.pos = 0

    def take(self, fmt: str, what: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise MalformedRecord(
                self.path, f"byte {self.pos}", f"unexpected end of file reading {what} ({size} bytes needed)"
            )
        vals = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return vals

    def count(self, what: str, min_record: int) -> int:
        at = self.pos
        (n,) = self.take("<Q", what)
        if n * min_record > len(self.data) - self.pos:
            raise MalformedRecord(self.path, f"byte {at}", f"{what} = {n} exceeds the remaining file size")
        return n

    def cstring(self, what: str) -> str:
        end = self.data.find(b"\x00", self.pos)
        if end < 0:
            raise MalformedRecord(self.path, f"byte {self.pos}", f"unterminated {what}")
        raw = self.data[self.pos:end]
        try:
            s = raw.decode("utf-8")
        except UnicodeDecodeError:
            raise MalformedRecord(self.path, f"byte {self.pos}", f"{what} is not valid UTF-8") from None
        self.pos = end + 1
        return s

    def finish(self) -> None:
        if self.pos != len(self.data):
            raise MalformedRecord(
                self.path, f"byte {self.pos}", f"{len(self.data) - self.pos} trailing bytes after last record"
            )


def _read_bytes(path: Path) -> bytes:
    try:
        return path.read_bytes()
    except FileNotFoundError:
        raise MissingFile(str(path)) from None


def _parse_cameras_bin(path: Path) -> dict:
    cur = _Cursor(path, _read_bytes(path))
    cameras = {}
    for _ in range(cur.count("camera count", 24)):
        at = cur.pos
        cam_id, model_id, width, height = cur.take("<iiQQ", "camera header")
        if model_id not in CAMERA_MODEL_BY_ID:
            raise UnsupportedCameraModel(f"{path}:byte {at}: camera model id {model_id} is not supported")
        model = CAMERA_MODEL_BY_ID[model_id]
        params = cur.take(f"<{CAMERA_MODELS[model][1]}d", "camera params")
        _add_camera(cameras, CameraIntrinsics(cam_id, model, width, height, tuple(params)), path, f"byte {at}")
    cur.finish()
    return cameras


def _parse_images_bin(path: Path) -> dict:
    cur = _Cursor(path, _read_bytes(path))
    images = {}
    for _ in range(cur.count("image count", 73)):
        at = cur.pos
        image_id, qw, qx, qy, qz, tx, ty, tz, camera_id = cur.take("<idddddddi", "image header")
        try:
            qvec = normalize_quat((qw, qx, qy, qz))
        except ValueError as exc:
            raise MalformedRecord(path, f"byte {at}", str(exc)) from None
        name = cur.cstring("image name")
        n_obs = cur.count("POINTS2D count", 24)
        raw = np.frombuffer(cur.data, dtype=[("x", "<f8"), ("y", "<f8"), ("id", "<i8")], count=n_obs, offset=cur.pos)
        cur.pos += 24 * n_obs
        obs = tuple((float(x), float(y), _opt_id(int(pid))) for x, y, pid in raw.tolist())
        if image_id in images:
            raise MalformedRecord(path, f"byte {at}", f"duplicate image id {image_id}")
        images[image_id] = ImagePose(image_id, qvec, (tx, ty, tz), camera_id, name, obs)
    cur.finish()
    return images


def _parse_points_bin(path: Path) -> dict:
    cur = _Cursor(path, _read_bytes(path))
    points = {}
    for _ in range(cur.count("point count", 51)):
        at = cur.pos
        pid, x, y, z, r, g, b, error = cur.take("<QdddBBBd", "point record")
        n_track = cur.count("track length", 8)
        tr = np.frombuffer(cur.data, dtype="<u4", count=2 * n_track, offset=cur.pos).reshape(-1, 2)
        cur.pos += 8 * n_track
        if pid in points:
            raise MalformedRecord(path, f"byte {at}", f"duplicate point id {pid}")
        points[pid] = Point3D(pid, (x, y, z), (r, g, b), error, tuple(map(tuple, tr.tolist())))
    cur.finish()
    return points


def _write_bin(model: SparseModel, directory: Path) -> None:
    with open(directory / "cameras.bin", "wb") as f:
        f.write(struct.pack("<Q", len(model.cameras)))
        for cam in model.cameras.values():
            f.write(struct.pack("<iiQQ", cam.camera_id, CAMERA_MODELS[cam.model][0], cam.width, cam.height))
            f.write(struct.pack(f"<{len(cam.params)}d", *cam.params))
    with open(directory / "images.bin", "wb") as f:
        f.write(struct.pack("<Q", len(model.images)))
        for img in model.images.values():
            f.write(struct.pack("<idddddddi", img.image_id, *img.qvec, *img.tvec, img.camera_id))
            f.write(img.name.encode("utf-8") + b"\x00")
            f.write(struct.pack("<Q", len(img.observations)))
            obs = np.array(
                [(x, y, -1 if pid is None else pid) for x, y, pid in img.observations],
                dtype=[("x", "<f8"), ("y", "<f8"), ("id", "<i8")],
            )
            f.write(obs.tobytes())
    with open(directory / "points3D.bin", "wb") as f:
        f.write(struct.pack("<Q", len(model.points)))
        for pt in model.points.values():
            f.write(struct.pack("<QdddBBBd", pt.point3d_id, *pt.xyz, *pt.rgb, pt.error))
            f.write(struct.pack("<Q", len(pt.track)))
            f.write(np.asarray(pt.track, dtype="<u4").reshape(-1).tobytes())


# ---------------------------------------------------------------------------
# public API

_FILES = ("cameras", "images", "points3D")


def detect_format(directory) -> str:
    directory = Path(directory)
    if not directory.is_dir():
        raise MissingFile(f"model directory {directory} does not exist")
    for fmt, ext in (("binary", ".bin"), ("text", ".txt")):
        if all((directory / f"{name}{ext}").is_file() for name in _FILES):
            return fmt
    raise MissingFile(f"{directory}: no complete cameras/images/points3D set (.bin or .txt)")


def parse_model(directory, format: str = "auto") -> SparseModel:
    """Load a COLMAP model directory into a cross-checked :class:`SparseModel`.

    If ``descriptors.bin`` sits next to the model it is attached as well.
    """
    directory = Path(directory)
    if format == "auto":
        format = detect_format(directory)
    ext = {"text": ".txt", "binary": ".bin"}.get(format)
    if ext is None:
        raise ValueError(f"unknown model format {format!r}")
    paths = [directory / f"{name}{ext}" for name in _FILES]
    for p in paths:
        if not p.is_file():
            raise MissingFile(str(p))
    if format == "text":
        cameras = _parse_cameras_text(paths[0])
        images = _parse_images_text(paths[1])
        points = _parse_points_text(paths[2])
    else:
        cameras = _parse_cameras_bin(paths[0])
        images = _parse_images_bin(paths[1])
        points = _parse_points_bin(paths[2])
    model = SparseModel(cameras, images, points)
    model.validate()
    sidecar = directory / SIDECAR_NAME
    if sidecar.is_file():
        model, _ = attach_descriptors(model, parse_descriptor_sidecar(sidecar))
    return model


def write_model(model: SparseModel, directory, format: str = "binary") -> None:
    """Serialize ``model``; a descriptor sidecar is written only if any point has one."""
    model.validate()
    for cam in model.cameras.values():
        cam.check()
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        if format == "text":
            _write_text(model, directory)
        elif format == "binary":
            _write_bin(model, directory)
        else:
            raise ValueError(f"unknown model format {format!r}")
        descs = {pid: p.descriptor for pid, p in model.points.items() if p.descriptor is not None}
        sidecar = directory / SIDECAR_NAME
        if descs:
            write_descriptor_sidecar(descs, sidecar)
        elif sidecar.exists():
            sidecar.unlink()
    except OSError as exc:
        raise IoFailure(f"writing model to {directory}: {exc}") from exc


def parse_descriptor_sidecar(path) -> dict:
    """Read ``descriptors.bin`` into ``{point3d_id: 128-byte descriptor}``."""
    path = Path(path)
    raw = _read_bytes(path)
    if len(raw) % SIDECAR_RECORD:
        raise TruncatedRecord(
            f"{path}: size {len(raw)} is not a multiple of {SIDECAR_RECORD}"
            f" (last record has {len(raw) % SIDECAR_RECORD} bytes)"
        )
    recs = np.frombuffer(raw, dtype=_SIDECAR_DTYPE)
    out = {}
    for i, (pid, desc) in enumerate(zip(recs["id"].tolist(), recs["desc"])):
        if pid in out:
            raise DuplicatePointId(f"{path}: point {pid} repeated at record {i}")
        out[pid] = desc.tobytes()
    return out


def write_descriptor_sidecar(descriptors: dict, path) -> None:
    recs = np.zeros(len(descriptors), dtype=_SIDECAR_DTYPE)
    for i, (pid, desc) in enumerate(descriptors.items()):
        if len(desc) != DESCRIPTOR_SIZE:
            raise ValueError(f"point {pid}: descriptor must be {DESCRIPTOR_SIZE} bytes")
        recs[i] = (pid, np.frombuffer(bytes(desc), np.uint8))
    Path(path).write_bytes(recs.tobytes())


def attach_descriptors(model: SparseModel, sidecar: dict) -> tuple[SparseModel, int]:
    """Return a copy of ``model`` with descriptors set, plus the count of unknown ids."""
    unknown = sum(1 for pid in sidecar if pid not in model.points)
    if unknown:
        log.warning("descriptor sidecar has %d ids not present in the model", unknown)
    if len(sidecar) == unknown:
        return model, unknown
    points = {
        pid: replace(pt, descriptor=bytes(sidecar[pid])) if pid in sidecar else pt
        for pid, pt in model.points.items()
    }
    return SparseModel(dict(model.cameras), dict(model.images), points), unknown
