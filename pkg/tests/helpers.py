"""Shared generators and independent reference implementations for the tests."""

from __future__ import annotations

import math

import numpy as np

from invsfm.colmap_io import CameraIntrinsics, ImagePose, Point3D, SparseModel
from invsfm.nn.tensor import Tensor


# ---------------------------------------------------------------------------
# random reconstructions


def random_quat(rng) -> tuple:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    return tuple(float(c) for c in q)


def random_camera(rng, camera_id: int) -> CameraIntrinsics:
    model = ["SIMPLE_PINHOLE", "PINHOLE", "SIMPLE_RADIAL"][rng.integers(3)]
    w, h = int(rng.integers(16, 2000)), int(rng.integers(16, 2000))
    f = float(rng.uniform(10, 3000))
    cx, cy = float(rng.uniform(0, w)), float(rng.uniform(0, h))
    if model == "SIMPLE_PINHOLE":
        params = (f, cx, cy)
    elif model == "PINHOLE":
        params = (f, float(rng.uniform(10, 3000)), cx, cy)
    else:
        params = (f, cx, cy, float(rng.normal(scale=0.1)))
    return CameraIntrinsics(camera_id, model, w, h, params)


def random_model(rng, max_cams=3, max_images=6, max_points=40, descriptors=None) -> SparseModel:
    """A referentially consistent model with arbitrary ids, values and tracks.

    ``descriptors`` is True (all points), False (none) or None (random subset).
    """
    cam_ids = rng.choice(10_000, size=int(rng.integers(1, max_cams + 1)), replace=False) + 1
    cameras = {int(c): random_camera(rng, int(c)) for c in cam_ids}
    n_pts = int(rng.integers(0, max_points + 1))
    pids = [int(p) for p in rng.choice(2**40, size=n_pts, replace=False) + 1]
    img_ids = rng.choice(2**31 - 1, size=int(rng.integers(0, max_images + 1)), replace=False) + 1
    images, tracks = {}, {p: [] for p in pids}
    for iid in (int(i) for i in img_ids):
        obs = []
        for _ in range(int(rng.integers(0, 12))):
            pid = None
            if pids and rng.random() < 0.7:
                pid = pids[int(rng.integers(len(pids)))]
                tracks[pid].append((iid, len(obs)))
            obs.append((float(rng.uniform(-10, 3000)), float(rng.uniform(-10, 3000)), pid))
        name = f"img_{iid}_{'é' if rng.random() < 0.2 else ''}{int(rng.integers(1000))}.jpg"
        images[iid] = ImagePose(iid, random_quat(rng), tuple(float(v) for v in rng.normal(scale=5, size=3)),
                                int(rng.choice(cam_ids)), name, tuple(obs))
    points = {}
    for pid in pids:
        if descriptors is None:
            has = rng.random() < 0.5
        else:
            has = descriptors
        desc = rng.integers(0, 256, 128, dtype=np.uint8).tobytes() if has else None
        points[pid] = Point3D(pid, tuple(float(v) for v in rng.normal(scale=10, size=3)),
                              tuple(int(v) for v in rng.integers(0, 256, 3)), float(rng.uniform(0, 4)),
                              tuple(tracks[pid]), desc)
    return SparseModel(cameras, images, points)


def scene_model(rng, n_points: int, size: int = 128, radial: float = 0.0, descriptors=True):
    """One camera (image id 1) and a cloud spread in front of and behind it."""
    f = float(rng.uniform(0.6, 1.4) * size)
    if radial:
        cam = CameraIntrinsics(1, "SIMPLE_RADIAL", size, size, (f, size / 2 - 0.5, size / 2 - 0.5, radial))
    else:
        cam = CameraIntrinsics(1, "PINHOLE", size, size, (f, f * 1.1, size / 2 - 0.5, size / 2 - 0.5))
    xyz = np.column_stack([rng.uniform(-4, 4, n_points), rng.uniform(-4, 4, n_points), rng.uniform(-1, 8, n_points)])
    # a share of exact duplicate depths per pixel exercises the id tie-break
    dup = rng.random(n_points) < 0.1
    xyz[dup] = xyz[rng.integers(0, n_points, dup.sum())]
    q = random_quat(rng) if rng.random() < 0.5 else (1.0, 0.0, 0.0, 0.0)
    R = quat_matrix(q)
    t = rng.normal(size=3)
    pids = rng.choice(10**6, size=n_points, replace=False) + 1
    points = {}
    # xyz are camera-frame coordinates; store the world points that map onto them
    for pid, p in zip(pids.tolist(), (xyz - t) @ R):
        desc = rng.integers(0, 256, 128, dtype=np.uint8).tobytes() if descriptors else None
        points[pid] = Point3D(pid, tuple(float(v) for v in p), tuple(int(v) for v in rng.integers(0, 256, 3)),
                              0.5, (), desc)
    image = ImagePose(1, q, tuple(float(v) for v in t), 1, "view.png", ())
    return SparseModel({1: cam}, {1: image}, points)


def quat_matrix(q) -> np.ndarray:
    """Rotation matrix from (w, x, y, z), written out independently."""
    w, x, y, z = q
    return np.array([
        [w * w + x * x - y * y - z * z, 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), w * w - x * x + y * y - z * z, 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), w * w - x * x - y * y + z * z],
    ])


# ---------------------------------------------------------------------------
# rendering oracles


def brute_force_render(model: SparseModel, view, schema):
    """Per point, scalar projection; per pixel, the minimum (depth, id) wins.

    Returns occupancy, raw depth, point ids and the H x W x n data grid.
    """
    cam = view.intrinsics
    # the rotation is checked separately against an independent formula; here
    # each coordinate is accumulated left to right in scalar float64
    R = view.rotation().tolist()
    t = [float(v) for v in view.tvec]
    best = {}
    for pid, pt in model.points.items():
        px, py, pz = pt.xyz
        pc = [px * R[i][0] + py * R[i][1] + pz * R[i][2] + t[i] for i in range(3)]
        if not pc[2] > 1e-4:
            continue
        x, y = pc[0] / pc[2], pc[1] / pc[2]
        k = cam.radial
        if k:
            d = 1 + k * (x * x + y * y)
            x, y = x * d, y * d
        fx, fy = cam.focal
        cx, cy = cam.principal_point
        u, v = fx * x + cx, fy * y + cy
        c, r = math.floor(u + 0.5), math.floor(v + 0.5)
        if not (0 <= c < view.out_width and 0 <= r < view.out_height):
            continue
        key = (pc[2], pid)
        if (r, c) not in best or key < best[(r, c)]:
            best[(r, c)] = key
    H, W = view.out_height, view.out_width
    occ = np.zeros((H, W), bool)
    depth = np.zeros((H, W))
    ids = np.full((H, W), -1, np.int64)
    for (r, c), (d, pid) in best.items():
        occ[r, c], depth[r, c], ids[r, c] = True, d, pid
    data = np.zeros((H, W, schema.n), np.float32)
    if best:
        dmin, dmax = depth[occ].min(), depth[occ].max()
        for (r, c), (d, pid) in best.items():
            pt = model.points[pid]
            vals = []
            if schema.depth:
                vals.append(np.float32((d - dmin) / (dmax - dmin + 1e-8)))
            if schema.color:
                vals += [np.float32(v) / np.float32(127.5) - 1 for v in pt.rgb]
            if schema.sift:
                vals += list(np.frombuffer(pt.descriptor, np.uint8).astype(np.float32) / np.float32(255))
            data[r, c] = vals
    return occ, depth, ids, data


def nested_min_filter(depth, occupancy, k):
    H, W = depth.shape
    r = k // 2
    out = np.full((H, W), np.inf)
    for i in range(H):
        for j in range(W):
            for di in range(-r, r + 1):
                for dj in range(-r, r + 1):
                    a, b = i + di, j + dj
                    if 0 <= a < H and 0 <= b < W and occupancy[a, b] and depth[a, b] < out[i, j]:
                        out[i, j] = depth[a, b]
    return out


def scalar_moller_trumbore(orig, d, v0, v1, v2, eps=1e-15):
    e1 = [v1[i] - v0[i] for i in range(3)]
    e2 = [v2[i] - v0[i] for i in range(3)]
    cross = lambda a, b: [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
    dot = lambda a, b: a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
    p = cross(d, e2)
    det = dot(e1, p)
    if abs(det) <= eps:
        return math.inf
    inv = 1.0 / det
    s = [orig[i] - v0[i] for i in range(3)]
    u = dot(s, p) * inv
    if u < 0 or u > 1:
        return math.inf
    q = cross(s, e1)
    v = dot(d, q) * inv
    if v < 0 or u + v > 1:
        return math.inf
    t = dot(e2, q) * inv
    return t if t > 0 else math.inf


# ---------------------------------------------------------------------------
# finite differences


def fd_relative_error(loss_fn, tensors, rng, h=1e-5, per_tensor=6) -> float:
    """``||g_analytic - g_numeric|| / max(||.||, ||.||)`` over sampled entries.

    ``loss_fn()`` must rebuild the graph from the current ``tensors`` data.
    """
    for t in tensors:
        t.grad = None
    loss = loss_fn()
    loss.backward()
    ga, gn = [], []
    for t in tensors:
        grad = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        picks = rng.choice(flat.size, size=min(per_tensor, flat.size), replace=False)
        for i in picks:
            old = flat[i]
            flat[i] = old + h
            up = loss_fn().item()
            flat[i] = old - h
            down = loss_fn().item()
            flat[i] = old
            gn.append((up - down) / (2 * h))
            ga.append(grad.reshape(-1)[i])
    ga, gn = np.array(ga), np.array(gn)
    scale = max(np.linalg.norm(ga), np.linalg.norm(gn))
    return 0.0 if scale == 0 else float(np.linalg.norm(ga - gn) / scale)


def leaf(rng, *shape, lo=-1.0, hi=1.0) -> Tensor:
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def raycast_labels(model, mesh, view, fmap, eps=0.01):
    """Per occupied pixel, cast a ray from the camera center to its winning point.

    The point is visible when no triangle is hit before ``t = 1 / (1 + eps)``,
    which is the ray-parameter form of the relative depth tolerance.
    Returns the occupied mask and the visible mask.
    """
    center = view.camera_center().tolist()
    tris = [[mesh.vertices[i].tolist() for i in tri] for tri in mesh.triangles]
    visible = np.zeros(fmap.occupancy.shape, bool)
    for r, c in zip(*np.nonzero(fmap.occupancy)):
        p = model.points[int(fmap.point_ids[r, c])].xyz
        d = [p[i] - center[i] for i in range(3)]
        t = min((scalar_moller_trumbore(center, d, *tri) for tri in tris), default=math.inf)
        visible[r, c] = t >= 1.0 / (1.0 + eps)
    return fmap.occupancy.copy(), visible
