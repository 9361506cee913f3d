"""Image and visibility metrics, sparsity sweeps and report tables."""

from __future__ import annotations

import csv
import math
import zlib
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import OccupancyMismatch, ShapeMismatch, TooSmall
from .nets import NetworkBundle, forward_visibnet, run_cascade, to_unit, visible_probability
from .nn.tensor import DEFAULT_DTYPE, Tensor, no_grad
from .render import apply_dropout
from .visibility import VisibilityMask, visib_dense, visib_sparse

SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
DEFAULT_RATIOS = (0.2, 0.6, 1.0)
CSV_COLUMNS = ("sample_id", "schema", "visibility_mode", "sparsity", "mae", "ssim", "visib_acc")


def mae(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"mae: shapes {a.shape} and {b.shape} differ")
    return float(np.abs(a - b).mean())


def gaussian_window(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable 2-D correlation, keeping only windows fully inside the image."""
    k = len(g)
    H, W = img.shape
    rows = sum(g[i] * img[i:H - k + 1 + i] for i in range(k))
    return sum(g[j] * rows[:, j:W - k + 1 + j] for j in range(k))


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """Mean SSIM (Gaussian 11x11 window, sigma 1.5, K1 0.01, K2 0.03), averaged over channels.

    Only window positions lying entirely inside the image are averaged.
    """
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"ssim: shapes {a.shape} and {b.shape} differ")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.shape[0] < SSIM_WIN or a.shape[1] < SSIM_WIN:
        raise TooSmall(f"ssim needs images of at least {SSIM_WIN}x{SSIM_WIN}, got {a.shape[:2]}")
    g = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    vals = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx, my = _filter_valid(x, g), _filter_valid(y, g)
        sxx = _filter_valid(x * x, g) - mx * mx
        syy = _filter_valid(y * y, g) - my * my
        sxy = _filter_valid(x * y, g) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        vals.append((num / den).mean())
    return float(np.mean(vals))


def visibility_accuracy(pred: VisibilityMask, truth: VisibilityMask) -> float:
    """Fraction of occupied cells whose labels agree (1.0 when nothing is occupied)."""
    if pred.shape != truth.shape or not np.array_equal(pred.occupancy, truth.occupancy):
        raise OccupancyMismatch("prediction and ground truth cover different cells")
    occ = truth.occupancy
    if not occ.any():
        return 1.0
    return float((pred.labels[occ] == truth.labels[occ]).mean())


# ---------------------------------------------------------------------------
# reports


@dataclass(frozen=True)
class MetricRow:
    sample_id: str
    schema: str
    visibility_mode: str
    sparsity: float
    mae: float
    ssim: float
    visib_acc: float  # nan when the mode makes no visibility decision


@dataclass
class MetricReport:
    rows: list = field(default_factory=list)

    def groups(self) -> dict:
        out = defaultdict(list)
        for r in self.rows:
            out[(r.schema, r.visibility_mode, r.sparsity)].append(r)
        return dict(out)

    def aggregate(self) -> dict:
        """(schema, mode, sparsity) -> {"mae", "ssim", "visib_acc", "count"} means."""
        agg = {}
        for key, rows in self.groups().items():
            agg[key] = {
                "mae": float(np.mean([r.mae for r in rows])),
                "ssim": float(np.mean([r.ssim for r in rows])),
                "visib_acc": float(np.mean([r.visib_acc for r in rows])),
                "count": len(rows),
            }
        return agg

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_COLUMNS)
            for r in self.rows:
                w.writerow([r.sample_id, r.schema, r.visibility_mode, repr(r.sparsity),
                            repr(r.mae), repr(r.ssim), repr(r.visib_acc)])

    @classmethod
    def read_csv(cls, path) -> "MetricReport":
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
                raise ValueError(f"report columns must be {CSV_COLUMNS}")
            rows = [MetricRow(d["sample_id"], d["schema"], d["visibility_mode"], float(d["sparsity"]),
                              float(d["mae"]), float(d["ssim"]), float(d["visib_acc"])) for d in reader]
        return cls(rows)

    def table(self) -> str:
        """One line per (schema, mode); MAE and SSIM columns per sparsity level."""
        agg = self.aggregate()
        ratios = sorted({k[2] for k in agg})
        variants = sorted({k[:2] for k in agg})
        head = ["schema", "visibility"] + [f"MAE@{r:.0%}" for r in ratios] + [f"SSIM@{r:.0%}" for r in ratios]
        head.append("acc")
        lines = [head]
        for schema, mode in variants:
            cells = [schema, mode]
            for metric in ("mae", "ssim"):
                for r in ratios:
                    v = agg.get((schema, mode, r))
                    cells.append("-" if v is None else f"{v[metric]:.4f}")
            accs = [agg[(schema, mode, r)]["visib_acc"] for r in ratios if (schema, mode, r) in agg]
            cells.append("-" if all(math.isnan(a) for a in accs) else f"{np.nanmean(accs):.4f}")
            lines.append(cells)
        widths = [max(len(row[i]) for row in lines) for i in range(len(head))]
        fmt = lambda row: "  ".join(c.rjust(w) for c, w in zip(row, widths))
        out = [fmt(lines[0]), "  ".join("-" * w for w in widths)]
        out += [fmt(row) for row in lines[1:]]
        return "\n".join(out)


# ---------------------------------------------------------------------------
# evaluation drivers


def _keep_mask(fmap, truth):
    """Ground-truth labels restricted to the cells still occupied in ``fmap``."""
    if truth is None:
        return None
    return VisibilityMask(np.where(fmap.occupancy, truth.labels, 0).astype(truth.labels.dtype))


def evaluate_sample(bundle: NetworkBundle, sample, mode: str, sparsity: float = 1.0, seed: int = 0,
                    sparse_k: int = 3, sparse_tau: float = 0.05, dense_eps: float = 0.01) -> MetricRow:
    """Drop points, estimate visibility by ``mode``, invert and score one sample."""
    fmap = apply_dropout(sample.fmap, sparsity, [int(seed), _stable_id(sample.sample_id)])
    truth = _keep_mask(fmap, sample.mask)
    x = fmap.chw()[None].astype(DEFAULT_DTYPE)
    pred = None
    if mode == "net":
        with no_grad():
            bundle.visibnet.eval()
            prob = visible_probability(forward_visibnet(bundle.visibnet, Tensor(x)))[0, 0]
        pred = VisibilityMask.from_visible(fmap.occupancy, prob >= 0.5)
        vis = "net"
    elif mode == "sparse":
        pred = visib_sparse(fmap, sparse_k, sparse_tau)
        vis = pred.visible[None]
    elif mode == "dense":
        if sample.buffer is None:
            raise ValueError("dense visibility needs a mesh depth buffer for every sample")
        pred = visib_dense(fmap, sample.buffer, dense_eps)
        vis = pred.visible[None]
    elif mode == "implicit":
        vis = "implicit"
    else:
        raise ValueError(f"unknown visibility mode {mode!r}")
    _, final = run_cascade(bundle, x, vis)
    img = to_unit(final)[0]
    acc = visibility_accuracy(pred, truth) if (pred is not None and truth is not None) else math.nan
    return MetricRow(sample.sample_id, str(bundle.schema), mode, float(sparsity),
                     mae(img, sample.target), ssim(img, sample.target), acc)


def _stable_id(sample_id: str) -> int:
    return zlib.crc32(str(sample_id).encode())


def evaluate(bundle: NetworkBundle, samples: Sequence, modes: Sequence[str] = ("net",),
             ratios: Sequence[float] = (1.0,), seed: int = 0) -> MetricReport:
    rows = [evaluate_sample(bundle, s, m, r, seed) for m in modes for r in ratios for s in samples]
    return MetricReport(rows)


def sparsity_sweep(bundle: NetworkBundle, samples: Sequence, ratios: Sequence[float] = DEFAULT_RATIOS,
                   modes: Sequence[str] = ("net",), seed: int = 0) -> MetricReport:
    """Per ratio: seeded dropout, inversion, metrics; one row per sample, ratio and mode."""
    return evaluate(bundle, samples, modes, ratios, seed)


__all__ = [
    "CSV_COLUMNS", "DEFAULT_RATIOS", "MetricReport", "MetricRow", "evaluate", "evaluate_sample",
    "gaussian_window", "mae", "sparsity_sweep", "ssim", "visibility_accuracy",
]
