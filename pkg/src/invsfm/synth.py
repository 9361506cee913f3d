"""Synthetic scenes with exactly known geometry, visibility and appearance.

A scene is a few textured planar surfaces (two parallel planes, or a box in
front of a back wall) observed by a small ring of pinhole cameras.  Points
are sampled on the surfaces; a point is observed by a camera when it is in
frame and the ray to it hits nothing nearer.  Colors and descriptors come
from a per-surface sinusoidal texture, so the target images rendered from
the mesh agree with the point attributes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .colmap_io import (
    DESCRIPTOR_SIZE,
    CameraIntrinsics,
    ImagePose,
    Point3D,
    SparseModel,
    write_model,
)
from .render import ViewSpec, distort_project
from .visibility import TriangleMesh, pixel_rays, rasterize_mesh, raycast, write_mesh

LAYOUTS = ("two-plane", "box")
BACKGROUND = 0.5
_DESC_GRID = (6, 7)
_DESC_STEP = 0.06


@dataclass(frozen=True)
class SynthParams:
    layout: str = "two-plane"
    n_points: int = 4000
    n_views: int = 5
    image_size: int = 64
    focal_ratio: float = 0.9

    def __post_init__(self):
        if self.layout not in LAYOUTS:
            raise ValueError(f"layout must be one of {LAYOUTS}")
        if self.n_points < 1 or self.n_views < 1 or self.image_size < 1:
            raise ValueError("point count, view count and image size must be positive")


@dataclass
class Surface:
    """A planar quad ``origin + a*u + b*v`` for ``a, b`` in [0, 1]."""

    origin: np.ndarray
    u: np.ndarray
    v: np.ndarray
    freq: np.ndarray  # (3, 3) spatial frequency per color channel
    phase: np.ndarray  # (3,)

    def corners(self) -> np.ndarray:
        o, u, v = self.origin, self.u, self.v
        return np.array([o, o + u, o + u + v, o + v])

    @property
    def area(self) -> float:
        return float(np.linalg.norm(np.cross(self.u, self.v)))

    def texture(self, xyz: np.ndarray) -> np.ndarray:
        """RGB in [0.05, 0.95] at world points (N, 3)."""
        arg = 2 * np.pi * (xyz @ self.freq.T) + self.phase
        return 0.5 + 0.45 * np.sin(arg)


@dataclass
class SynthScene:
    params: SynthParams
    model: SparseModel
    mesh: TriangleMesh
    surfaces: list
    tri_surface: np.ndarray  # surface index of each mesh triangle
    images: dict = field(default_factory=dict)  # image_id -> H x W x 3 in [0, 1]

    def views(self) -> list:
        return [ViewSpec.from_image(self.model, i) for i in sorted(self.model.images)]


def _surface(rng, origin, u, v) -> Surface:
    freq = rng.normal(size=(3, 3))
    freq *= rng.uniform(0.4, 1.2, size=(3, 1)) / np.linalg.norm(freq, axis=1, keepdims=True)
    return Surface(np.asarray(origin, float), np.asarray(u, float), np.asarray(v, float),
                   freq, rng.uniform(0, 2 * np.pi, 3))


def _layout_two_plane(rng) -> list:
    zb = rng.uniform(5.0, 6.0)
    back = _surface(rng, (-4.0, -4.0, zb), (8.0, 0, 0), (0, 8.0, 0))
    zf = rng.uniform(2.5, 3.5)
    w, h = rng.uniform(1.0, 1.8, 2)
    x0, y0 = rng.uniform(-1.2, 1.2 - w), rng.uniform(-1.2, 1.2 - h)
    front = _surface(rng, (x0, y0, zf), (w, 0, 0), (0, h, 0))
    return [back, front]


def _layout_box(rng) -> list:
    zb = rng.uniform(6.0, 7.0)
    out = [_surface(rng, (-5.0, -5.0, zb), (10.0, 0, 0), (0, 10.0, 0))]
    side = rng.uniform(1.2, 1.8)
    center = np.array([rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(3.2, 3.8)])
    angle = rng.uniform(-0.6, 0.6)
    c, s = np.cos(angle), np.sin(angle)
    R = np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]]) * side
    ex, ey, ez = R.T  # box edge vectors
    lo = center - (ex + ey + ez) / 2
    faces = [
        (lo, ex, ey), (lo + ez, ey, ex),
        (lo, ey, ez), (lo + ex, ez, ey),
        (lo, ez, ex), (lo + ey, ex, ez),
    ]
    out += [_surface(rng, o, u, v) for o, u, v in faces]
    return out


def _mesh(surfaces) -> tuple[TriangleMesh, np.ndarray]:
    verts, tris, owner = [], [], []
    for k, s in enumerate(surfaces):
        base = 4 * k
        verts.append(s.corners())
        tris += [(base, base + 1, base + 2), (base, base + 2, base + 3)]
        owner += [k, k]
    return TriangleMesh(np.concatenate(verts), np.array(tris, np.int64)), np.array(owner, np.int64)


def _look_at(center: np.ndarray, target: np.ndarray) -> np.ndarray:
    """World->camera rotation for a camera at ``center`` looking at ``target`` (y down)."""
    z = target - center
    z /= np.linalg.norm(z)
    x = np.cross((0.0, 1.0, 0.0), z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z])


def rotmat_to_quat(R: np.ndarray) -> tuple:
    """Unit quaternion (w, x, y, z) with w >= 0 for a rotation matrix."""
    m = np.asarray(R, float)
    tr = np.trace(m)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    else:
        i = int(np.argmax(np.diag(m)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = 2.0 * np.sqrt(1.0 + m[i, i] - m[j, j] - m[k, k])
        q = [0.0] * 4
        q[0] = (m[k, j] - m[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (m[j, i] + m[i, j]) / s
        q[1 + k] = (m[k, i] + m[i, k]) / s
    q = np.array(q)
    q /= np.linalg.norm(q)
    if q[0] < 0:
        q = -q
    return tuple(float(c) for c in q)


def _descriptors(surface: Surface, xyz: np.ndarray) -> np.ndarray:
    """128 bytes of local appearance: texture sampled on a small tangent-plane grid."""
    tu = surface.u / np.linalg.norm(surface.u)
    tv = surface.v / np.linalg.norm(surface.v)
    gy, gx = _DESC_GRID
    a = (np.arange(gx) - (gx - 1) / 2) * _DESC_STEP
    b = (np.arange(gy) - (gy - 1) / 2) * _DESC_STEP
    offs = (a[None, :, None] * tu + b[:, None, None] * tv).reshape(-1, 3)
    samples = surface.texture((xyz[:, None, :] + offs[None]).reshape(-1, 3))
    samples = samples.reshape(len(xyz), -1)  # 3 * gx * gy values
    lum = samples.reshape(len(xyz), -1, 3).mean(axis=2).reshape(len(xyz), gy, gx)
    grad = np.stack([lum[:, :, -1].mean(1) - lum[:, :, 0].mean(1), lum[:, -1].mean(1) - lum[:, 0].mean(1)], 1)
    vals = np.concatenate([samples, 0.5 + grad], axis=1)[:, :DESCRIPTOR_SIZE]
    return np.clip(np.round(vals * 255), 0, 255).astype(np.uint8)


def render_target(scene_surfaces, mesh, tri_surface, view: ViewSpec) -> np.ndarray:
    """Textured mesh image (H, W, 3) in [0, 1]; uncovered pixels are gray."""
    depth, tri = rasterize_mesh(mesh, view)
    img = np.full((view.out_height, view.out_width, 3), BACKGROUND)
    hit = tri >= 0
    if not hit.any():
        return img
    xn, yn = pixel_rays(view)
    z = depth[hit]
    cam = np.stack([xn[hit] * z, yn[hit] * z, z], axis=1)
    world = (cam - np.asarray(view.tvec, float)) @ view.rotation()
    surf = tri_surface[tri[hit]]
    colors = np.empty((len(z), 3))
    for k, s in enumerate(scene_surfaces):
        sel = surf == k
        if sel.any():
            colors[sel] = s.texture(world[sel])
    img[hit] = colors
    return img


def make_scene(params: SynthParams = SynthParams(), seed: int = 0) -> SynthScene:
    """Generate a scene; equal ``(params, seed)`` give identical scenes."""
    rng = np.random.default_rng(seed)
    surfaces = _layout_two_plane(rng) if params.layout == "two-plane" else _layout_box(rng)
    mesh, tri_surface = _mesh(surfaces)

    # points, area-weighted over surfaces
    areas = np.array([s.area for s in surfaces])
    owner = rng.choice(len(surfaces), size=params.n_points, p=areas / areas.sum())
    ab = rng.uniform(0.0, 1.0, size=(params.n_points, 2))
    xyz = np.empty((params.n_points, 3))
    rgb = np.empty((params.n_points, 3), np.uint8)
    desc = np.empty((params.n_points, DESCRIPTOR_SIZE), np.uint8)
    for k, s in enumerate(surfaces):
        sel = owner == k
        xyz[sel] = s.origin + ab[sel, :1] * s.u + ab[sel, 1:] * s.v
        rgb[sel] = np.round(s.texture(xyz[sel]) * 255).astype(np.uint8)
        desc[sel] = _descriptors(s, xyz[sel])

    size = params.image_size
    f = params.focal_ratio * size
    cam = CameraIntrinsics(1, "PINHOLE", size, size, (f, f, (size - 1) / 2, (size - 1) / 2))
    look = np.array([0.0, 0.0, max(s.origin[2] for s in surfaces)])
    ring = rng.uniform(0.3, 0.6)
    phase = rng.uniform(0, 2 * np.pi)

    images, tracks = {}, {pid: [] for pid in range(1, params.n_points + 1)}
    for k in range(params.n_views):
        ang = phase + 2 * np.pi * k / params.n_views
        center = np.array([ring * np.cos(ang), ring * np.sin(ang), rng.uniform(-0.3, 0.3)])
        R = _look_at(center, look + rng.normal(scale=0.2, size=3))
        qvec = rotmat_to_quat(R)
        R = ViewSpec(qvec, (0, 0, 0), cam, size, size).rotation()  # exactly what readers will use
        tvec = tuple(float(c) for c in -R @ center)
        pc = xyz @ R.T + tvec
        front = pc[:, 2] > 1e-3
        u = np.full(params.n_points, -1.0)
        v = np.full(params.n_points, -1.0)
        u[front], v[front] = distort_project(pc[front], cam)
        inside = front & (u >= -0.5) & (u < size - 0.5) & (v >= -0.5) & (v < size - 0.5)
        cand = np.flatnonzero(inside)
        t = raycast(mesh, center, xyz[cand] - center)
        seen = cand[t >= 1.0 - 1e-9]
        image_id = k + 1
        obs = []
        for i in seen:
            tracks[i + 1].append((image_id, len(obs)))
            obs.append((float(u[i]), float(v[i]), int(i + 1)))
        images[image_id] = ImagePose(image_id, qvec, tvec, 1, f"view_{image_id:03d}.png", tuple(obs))

    points = {
        pid: Point3D(pid, tuple(float(c) for c in xyz[pid - 1]), tuple(int(c) for c in rgb[pid - 1]),
                     float(rng.uniform(0.1, 1.0)), tuple(tracks[pid]), desc[pid - 1].tobytes())
        for pid in range(1, params.n_points + 1)
    }
    model = SparseModel({1: cam}, images, points)
    scene = SynthScene(params, model, mesh, surfaces, tri_surface)
    for view_id, view in zip(sorted(images), scene.views()):
        scene.images[view_id] = render_target(surfaces, mesh, tri_surface, view)
    return scene


def save_scene(scene: SynthScene, directory) -> None:
    """Write ``sparse/`` (binary model + descriptor sidecar), ``mesh.ply`` and ``images/*.png``."""
    from PIL import Image

    directory = Path(directory)
    (directory / "sparse").mkdir(parents=True, exist_ok=True)
    (directory / "images").mkdir(exist_ok=True)
    write_model(scene.model, directory / "sparse", format="binary")
    write_mesh(scene.mesh, directory / "mesh.ply")
    for image_id, img in scene.images.items():
        name = scene.model.images[image_id].name
        Image.fromarray(to_uint8(img)).save(directory / "images" / name)


def to_uint8(img: np.ndarray) -> np.ndarray:
    """[0, 1] floats to bytes by ``round(v * 255)``."""
    return np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
