"""Geometric point visibility: min-filter splatting and mesh z-buffering.

Labels are stored in a ternary grid (:data:`UNOCCUPIED`, :data:`VISIBLE`,
:data:`OCCLUDED`).  Pixel ``(r, c)`` samples the ray through pixel-center
coordinates ``(u, v) = (c, r)``, the same convention the point rasterizer uses.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionMismatch, MalformedRecord
from .render import Z_NEAR, ChannelSchema, FeatureMap, ViewSpec, render_view

UNOCCUPIED, VISIBLE, OCCLUDED = 0, 1, 2


@dataclass
class VisibilityMask:
    labels: np.ndarray  # H x W int8

    @classmethod
    def from_visible(cls, occupancy: np.ndarray, visible: np.ndarray) -> "VisibilityMask":
        labels = np.where(occupancy, np.where(visible, VISIBLE, OCCLUDED), UNOCCUPIED).astype(np.int8)
        return cls(labels)

    @property
    def occupancy(self) -> np.ndarray:
        return self.labels != UNOCCUPIED

    @property
    def visible(self) -> np.ndarray:
        return self.labels == VISIBLE

    @property
    def occluded(self) -> np.ndarray:
        return self.labels == OCCLUDED

    @property
    def shape(self):
        return self.labels.shape


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # V x 3
    triangles: np.ndarray  # T x 3

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, np.int64).reshape(-1, 3)

    @classmethod
    def empty(cls) -> "TriangleMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), np.int64))

    def validated(self) -> "TriangleMesh":
        """Check index range and drop zero-area triangles."""
        t = self.triangles
        if t.size and (t.min() < 0 or t.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")
        if not np.isfinite(self.vertices).all():
            raise ValueError("non-finite mesh vertex")
        v = self.vertices[t]
        area2 = np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)
        return TriangleMesh(self.vertices, t[area2 > 0])

    def __len__(self):
        return len(self.triangles)


# ---------------------------------------------------------------------------
# VisibSparse


def min_filter(depth: np.ndarray, occupancy: np.ndarray, k: int = 3) -> np.ndarray:
    """k x k minimum over occupied cells; unoccupied cells count as +inf."""
    if k < 1 or k % 2 == 0:
        raise ValueError("kernel size must be a positive odd integer")
    d = np.where(occupancy, depth, np.inf)
    r = k // 2
    padded = np.pad(d, r, constant_values=np.inf)
    return sliding_window_view(padded, (k, k)).min(axis=(-1, -2))


def visib_sparse(fmap: FeatureMap, k: int = 3, tau: float = 0.05) -> VisibilityMask:
    """A point is visible if its depth exceeds the local minimum by at most ``tau``."""
    filtered = min_filter(fmap.raw_depth, fmap.occupancy, k)
    visible = fmap.raw_depth <= (1.0 + tau) * filtered
    return VisibilityMask.from_visible(fmap.occupancy, visible)


# ---------------------------------------------------------------------------
# mesh z-buffer


def pixel_rays(view: ViewSpec) -> tuple[np.ndarray, np.ndarray]:
    """Undistorted normalized coordinates (x/z, y/z) of every pixel center."""
    cam = view.intrinsics
    fx, fy = cam.focal
    cx, cy = cam.principal_point
    rows = np.arange(view.out_height, dtype=np.float64)
    cols = np.arange(view.out_width, dtype=np.float64)
    xd = np.broadcast_to((cols - cx) / fx, (view.out_height, view.out_width))
    yd = np.broadcast_to(((rows - cy) / fy)[:, None], (view.out_height, view.out_width))
    k = cam.radial
    if not k:
        return xd.copy(), yd.copy()
    # invert r_d = r (1 + k r^2) by Newton iteration on the radius
    rd = np.hypot(xd, yd)
    r = rd.copy()
    for _ in range(30):
        f = r * (1 + k * r * r) - rd
        r = r - f / (1 + 3 * k * r * r)
    scale = np.divide(r, rd, out=np.ones_like(rd), where=rd > 0)
    return xd * scale, yd * scale


def _clip_near(poly: np.ndarray, z_near: float) -> np.ndarray:
    """Clip a camera-space polygon to z >= z_near (Sutherland-Hodgman, one plane)."""
    out = []
    n = len(poly)
    for i in range(n):
        a, b = poly[i], poly[(i + 1) % n]
        ina, inb = a[2] >= z_near, b[2] >= z_near
        if ina:
            out.append(a)
        if ina != inb:
            s = (z_near - a[2]) / (b[2] - a[2])
            p = a + s * (b - a)
            p[2] = z_near
            out.append(p)
    return np.array(out)


def rasterize_mesh(mesh: TriangleMesh, view: ViewSpec, z_near: float = Z_NEAR):
    """Depth buffer (+inf where uncovered) and the index of the winning triangle (-1)."""
    H, W = view.out_height, view.out_width
    depth = np.full((H, W), np.inf)
    tri_id = np.full((H, W), -1, np.int64)
    if len(mesh) == 0:
        return depth, tri_id
    R = view.rotation()
    vc = mesh.vertices @ R.T + np.asarray(view.tvec, float)
    xn, yn = pixel_rays(view)
    cam = view.intrinsics
    pinhole = not cam.radial
    fx, fy = cam.focal
    cx, cy = cam.principal_point

    for t, tri in enumerate(mesh.triangles):
        pts = vc[tri]
        if (pts[:, 2] < z_near).all():
            continue
        if (pts[:, 2] < z_near).any():
            poly = _clip_near(pts, z_near)
            if len(poly) < 3:
                continue
            fans = [poly[[0, i, i + 1]] for i in range(1, len(poly) - 1)]
        else:
            fans = [pts]
        for p in fans:
            px, py, iz = p[:, 0] / p[:, 2], p[:, 1] / p[:, 2], 1.0 / p[:, 2]
            area = (px[1] - px[0]) * (py[2] - py[0]) - (px[2] - px[0]) * (py[1] - py[0])
            if area == 0:
                continue
            if pinhole:
                c0 = max(int(np.floor(cx + fx * px.min())), 0)
                c1 = min(int(np.ceil(cx + fx * px.max())), W - 1)
                r0 = max(int(np.floor(cy + fy * py.min())), 0)
                r1 = min(int(np.ceil(cy + fy * py.max())), H - 1)
                if c0 > c1 or r0 > r1:
                    continue
                rr, cc = np.mgrid[r0:r1 + 1, c0:c1 + 1]
                rr, cc = rr.ravel(), cc.ravel()
            else:
                box = (xn >= px.min()) & (xn <= px.max()) & (yn >= py.min()) & (yn <= py.max())
                rr, cc = np.nonzero(box)
                if rr.size == 0:
                    continue
            x, y = xn[rr, cc], yn[rr, cc]
            l0 = ((px[1] - x) * (py[2] - y) - (px[2] - x) * (py[1] - y)) / area
            l1 = ((px[2] - x) * (py[0] - y) - (px[0] - x) * (py[2] - y)) / area
            l2 = 1.0 - l0 - l1
            inside = (l0 >= 0) & (l1 >= 0) & (l2 >= 0)
            if not inside.any():
                continue
            rr, cc = rr[inside], cc[inside]
            z = 1.0 / (l0[inside] * iz[0] + l1[inside] * iz[1] + l2[inside] * iz[2])
            closer = z < depth[rr, cc]
            depth[rr[closer], cc[closer]] = z[closer]
            tri_id[rr[closer], cc[closer]] = t
    return depth, tri_id


def render_mesh_depth(mesh: TriangleMesh, view: ViewSpec) -> np.ndarray:
    """Per-pixel minimum camera-space z over the triangles covering the pixel center."""
    return rasterize_mesh(mesh, view)[0]


def visib_dense(fmap: FeatureMap, buffer: np.ndarray, eps: float = 0.01) -> VisibilityMask:
    if buffer.shape != fmap.occupancy.shape:
        raise DimensionMismatch(f"depth buffer {buffer.shape} vs feature map {fmap.occupancy.shape}")
    visible = fmap.raw_depth <= (1.0 + eps) * buffer
    return VisibilityMask.from_visible(fmap.occupancy, visible)


def generate_visibility_labels(dataset, schema: ChannelSchema = ChannelSchema(), eps: float = 0.01):
    """``dataset`` is a sequence of ``(model, mesh, views)``; one labeled map per view."""
    out = []
    for model, mesh, views in dataset:
        mesh = mesh.validated()
        for view in views:
            fmap = render_view(model, view, schema)
            out.append((fmap, visib_dense(fmap, render_mesh_depth(mesh, view), eps)))
    return out


def raycast(mesh: TriangleMesh, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Nearest positive ray parameter t per ray (Möller–Trumbore), +inf on a miss."""
    origins = np.broadcast_to(np.asarray(origins, float), dirs.shape)
    best = np.full(len(dirs), np.inf)
    tri = mesh.vertices[mesh.triangles]
    for v0, v1, v2 in tri:
        e1, e2 = v1 - v0, v2 - v0
        pvec = np.cross(dirs, e2)
        det = pvec @ e1
        ok = np.abs(det) > 1e-15
        inv = np.divide(1.0, det, out=np.zeros_like(det), where=ok)
        tvec = origins - v0
        u = np.einsum("ij,ij->i", tvec, pvec) * inv
        qvec = np.cross(tvec, e1)
        v = np.einsum("ij,ij->i", dirs, qvec) * inv
        t = (qvec @ e2) * inv
        hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 0)
        best = np.where(hit & (t < best), t, best)
    return best


# ---------------------------------------------------------------------------
# mesh files


def load_mesh(path) -> TriangleMesh:
    path = Path(path)
    if path.suffix.lower() == ".ply":
        return _load_ply(path)
    if path.suffix.lower() == ".obj":
        return _load_obj(path)
    raise ValueError(f"unsupported mesh format {path.suffix!r} (use .ply or .obj)")


def _load_ply(path: Path) -> TriangleMesh:
    lines = path.read_text().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise MalformedRecord(path, "line 1", "missing 'ply' magic")
    n_vert = n_face = None
    i = 1
    while i < len(lines):
        tok = lines[i].split()
        i += 1
        if not tok:
            continue
        if tok[0] == "format" and tok[1] != "ascii":
            raise MalformedRecord(path, f"line {i}", "only ASCII PLY is supported")
        if tok[0] == "element" and tok[1] == "vertex":
            n_vert = int(tok[2])
        elif tok[0] == "element" and tok[1] == "face":
            n_face = int(tok[2])
        elif tok[0] == "end_header":
            break
    if n_vert is None:
        raise MalformedRecord(path, "header", "no vertex element")
    verts, faces = [], []
    try:
        for j in range(n_vert):
            verts.append([float(t) for t in lines[i + j].split()[:3]])
        i += n_vert
        for j in range(n_face or 0):
            tok = [int(t) for t in lines[i + j].split()]
            if tok[0] != 3:
                raise MalformedRecord(path, f"line {i + j + 1}", "only triangular faces are supported")
            faces.append(tok[1:4])
    except (IndexError, ValueError) as exc:
        raise MalformedRecord(path, f"line {i + 1}", str(exc)) from None
    return TriangleMesh(np.array(verts), np.array(faces)).validated()


def _load_obj(path: Path) -> TriangleMesh:
    verts, faces = [], []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        tok = line.split()
        if not tok or tok[0].startswith("#"):
            continue
        try:
            if tok[0] == "v":
                verts.append([float(t) for t in tok[1:4]])
            elif tok[0] == "f":
                if len(tok) != 4:
                    raise ValueError("only triangular faces are supported")
                idx = [int(t.split("/")[0]) for t in tok[1:]]
                faces.append([j - 1 if j > 0 else len(verts) + j for j in idx])
        except ValueError as exc:
            raise MalformedRecord(path, f"line {lineno}", str(exc)) from None
    return TriangleMesh(np.array(verts), np.array(faces)).validated()


def write_mesh(mesh: TriangleMesh, path) -> None:
    path = Path(path)
    if path.suffix.lower() == ".obj":
        with open(path, "w") as f:
            for v in mesh.vertices:
                f.write("v " + " ".join(repr(float(c)) for c in v) + "\n")
            for t in mesh.triangles:
                f.write("f " + " ".join(str(int(i) + 1) for i in t) + "\n")
        return
    with open(path, "w") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {len(mesh.vertices)}\nproperty double x\nproperty double y\nproperty double z\n")
        f.write(f"element face {len(mesh.triangles)}\nproperty list uchar int vertex_indices\nend_header\n")
        for v in mesh.vertices:
            f.write(" ".join(repr(float(c)) for c in v) + "\n")
        for t in mesh.triangles:
            f.write("3 " + " ".join(str(int(i)) for i in t) + "\n")
