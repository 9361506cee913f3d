"""Training data, configuration and the three-stage training schedule.

Stages run in order: VisibNet alone, then CoarseNet on VisibNet-culled maps
with VisibNet frozen, then RefineNet against the conditional discriminator
with both earlier networks frozen.  Batches are a pure function of
``(seed, stage, step)`` so a resumed run sees exactly the batches an
uninterrupted run would have.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DivergedLoss, StageOrderViolation
from .nets import (
    NetworkBundle,
    checksum,
    cull_batch,
    forward_coarsenet,
    forward_refinenet,
    forward_visibnet,
    loss_coarse,
    loss_discriminator,
    loss_refine,
    loss_visib,
)
from .nn.optim import AdamState, adam_step
from .nn.tensor import DEFAULT_DTYPE, Tensor, no_grad
from .render import ChannelSchema, FeatureMap, ViewSpec, augment_params, crop_view, render_view
from .visibility import TriangleMesh, VisibilityMask, render_mesh_depth, visib_dense

log = logging.getLogger(__name__)

STAGES = ("visib", "coarse", "refine")
STAGE_NETS = {"visib": "visibnet", "coarse": "coarsenet", "refine": "refinenet"}
VISIBILITY_MODES = ("net", "implicit")


@dataclass
class TrainConfig:
    alpha: float = 0.01
    beta: float = 0.001
    lr: float = 1e-4
    batch_size: int = 4
    iterations: dict = field(default_factory=lambda: {"visib": 500, "coarse": 500, "refine": 500})
    seed: int = 0
    schema: str = "z,c,d"
    width: float = 1.0
    image_size: int = 256
    augment_sizes: tuple = ()  # empty: views are resized straight to image_size
    visibility: str = "net"  # how CoarseNet/RefineNet inputs are culled during training
    threshold: float = 0.5
    verify_every: int = 1  # checksum cadence for frozen and alternating networks
    label_eps: float = 0.01

    def __post_init__(self):
        self.iterations = {**{s: 0 for s in STAGES}, **dict(self.iterations)}
        self.augment_sizes = tuple(int(s) for s in self.augment_sizes)
        self.validate()

    def validate(self) -> None:
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if self.lr <= 0 or self.batch_size < 1:
            raise ValueError("lr must be positive and batch_size at least 1")
        if set(self.iterations) - set(STAGES) or any(int(v) < 0 for v in self.iterations.values()):
            raise ValueError(f"iterations must map {STAGES} to non-negative counts")
        if self.visibility not in VISIBILITY_MODES:
            raise ValueError(f"training visibility must be one of {VISIBILITY_MODES}")
        if self.width <= 0 or self.image_size <= 0:
            raise ValueError("width and image_size must be positive")
        ChannelSchema.parse(self.schema)

    @property
    def channel_schema(self) -> ChannelSchema:
        return ChannelSchema.parse(self.schema)

    def to_json(self) -> str:
        d = asdict(self)
        d["augment_sizes"] = list(self.augment_sizes)
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# data


@dataclass
class Sample:
    fmap: FeatureMap
    target: Optional[np.ndarray] = None  # H x W x 3 in [0, 1]
    mask: Optional[VisibilityMask] = None
    sample_id: str = ""
    buffer: Optional[np.ndarray] = None  # mesh depth buffer, for dense visibility


@dataclass
class Batch:
    x: np.ndarray  # (N, n, H, W)
    occupancy: np.ndarray  # (N, H, W) bool
    visible: Optional[np.ndarray]  # (N, H, W) uint8
    target: Optional[np.ndarray]  # (N, 3, H, W) in [-1, 1]


def make_batch(samples: Sequence[Sample], dtype=DEFAULT_DTYPE) -> Batch:
    x = np.stack([s.fmap.chw() for s in samples]).astype(dtype)
    occ = np.stack([s.fmap.occupancy for s in samples])
    vis = None
    if all(s.mask is not None for s in samples):
        vis = np.stack([s.mask.visible for s in samples]).astype(np.uint8)
    tgt = None
    if all(s.target is not None for s in samples):
        tgt = (np.stack([s.target.transpose(2, 0, 1) for s in samples]) * 2 - 1).astype(dtype)
    return Batch(x, occ, vis, tgt)


class StaticDataset:
    """Pre-rendered samples; augmentation is not applied."""

    def __init__(self, samples: Sequence[Sample]):
        self.samples = list(samples)

    def __len__(self):
        return len(self.samples)

    def get(self, index: int, seed) -> Sample:
        return self.samples[index]


def resample_image(img: np.ndarray, width: int, height: int) -> np.ndarray:
    """Bilinear resize of an H x W x 3 float image."""
    from PIL import Image

    if img.shape[1] == width and img.shape[0] == height:
        return img
    chans = [np.asarray(Image.fromarray(img[..., c].astype(np.float32), mode="F").resize((width, height), Image.BILINEAR))
             for c in range(img.shape[2])]
    return np.clip(np.stack(chans, axis=2).astype(np.float64), 0.0, 1.0)


class SceneDataset:
    """Views of one reconstruction, rendered on demand.

    With ``augment_sizes`` each draw rescales the view so its smaller side is
    one of the sizes and takes a random ``crop``² window; otherwise views are
    resized straight to ``crop`` x ``crop``.  Visibility labels come from the
    mesh when one is given.
    """

    def __init__(self, model, views: Sequence[ViewSpec], schema: ChannelSchema, crop: int,
                 images: Optional[Sequence[np.ndarray]] = None, mesh: Optional[TriangleMesh] = None,
                 augment_sizes: Sequence[int] = (), label_eps: float = 0.01):
        self.model, self.views, self.schema, self.crop = model, list(views), schema, crop
        self.images = list(images) if images is not None else None
        self.mesh = mesh.validated() if mesh is not None else None
        self.augment_sizes, self.label_eps = tuple(augment_sizes), label_eps

    def __len__(self):
        return len(self.views)

    def get(self, index: int, seed) -> Sample:
        view = self.views[index]
        img = self.images[index] if self.images is not None else None
        if self.augment_sizes:
            scale, (oy, ox) = augment_params(view, seed, self.augment_sizes, self.crop)
            out = crop_view(view, scale, (oy, ox), self.crop)
            if img is not None:
                w = int(round(view.out_width * scale))
                h = int(round(view.out_height * scale))
                img = resample_image(img, w, h)[oy:oy + self.crop, ox:ox + self.crop]
        else:
            out = view.resized(self.crop, self.crop)
            if img is not None:
                img = resample_image(img, self.crop, self.crop)
        fmap = render_view(self.model, out, self.schema)
        mask = buffer = None
        if self.mesh is not None:
            buffer = render_mesh_depth(self.mesh, out)
            mask = visib_dense(fmap, buffer, self.label_eps)
        return Sample(fmap, img, mask, f"{index}", buffer)


def batch_stream(dataset, batch_size: int, seed: int) -> Callable[[str, int], Batch]:
    """``stream(stage, step)`` -> Batch, deterministic in ``(seed, stage, step)``."""

    def stream(stage: str, step: int) -> Batch:
        key = [int(seed), STAGES.index(stage) if stage in STAGES else 9, int(step)]
        rng = np.random.default_rng(key)
        n = len(dataset)
        idx = rng.choice(n, size=batch_size, replace=n < batch_size)
        return make_batch([dataset.get(int(i), key + [k]) for k, i in enumerate(idx)])

    return stream


def scene_samples(scene, schema: ChannelSchema, eps: float = 0.01) -> list:
    """One labeled, targeted sample per view of a synthetic scene at native size."""
    out = []
    for image_id, view in zip(sorted(scene.model.images), scene.views()):
        fmap = render_view(scene.model, view, schema)
        buffer = render_mesh_depth(scene.mesh, view)
        mask = visib_dense(fmap, buffer, eps)
        out.append(Sample(fmap, scene.images[image_id], mask, f"{image_id}", buffer))
    return out


# ---------------------------------------------------------------------------
# stages


@dataclass
class StageResult:
    stage: str
    history: list  # generator / network loss per iteration
    adam: AdamState
    disc_history: list = field(default_factory=list)
    disc_adam: Optional[AdamState] = None
    frozen_before: dict = field(default_factory=dict)
    frozen_after: dict = field(default_factory=dict)


def _finite(value: float, stage: str, step: int) -> float:
    if not math.isfinite(value):
        raise DivergedLoss(f"{stage} loss became {value} at iteration {step}")
    return value


def _require(bundle: NetworkBundle, stage: str, config: TrainConfig) -> None:
    need = {"visib": [], "coarse": ["visib"], "refine": ["visib", "coarse"]}[stage]
    if config.visibility == "implicit":
        need = [s for s in need if s != "visib"]
    missing = [s for s in need if s not in bundle.trained]
    if missing:
        raise StageOrderViolation(f"stage {stage!r} needs trained {missing} first")


def _frozen(bundle: NetworkBundle, names) -> dict:
    return {n: checksum(getattr(bundle, n)) for n in names}


def _verify(bundle: NetworkBundle, expected: dict, what: str) -> None:
    now = _frozen(bundle, expected)
    changed = [n for n in expected if now[n] != expected[n]]
    if changed:
        raise RuntimeError(f"{what}: frozen networks {changed} were modified")


def _culled(bundle: NetworkBundle, batch: Batch, config: TrainConfig) -> np.ndarray:
    if config.visibility == "implicit":
        return batch.x
    with no_grad():
        pred = forward_visibnet(bundle.visibnet, Tensor(batch.x))
    return cull_batch(batch.x, pred, config.threshold)


def _adam(config: TrainConfig, state: Optional[AdamState]) -> AdamState:
    return state if state is not None else AdamState(lr=config.lr)


def train_visibnet(bundle: NetworkBundle, stream, config: TrainConfig, start: int = 0,
                   adam: Optional[AdamState] = None, history: Optional[list] = None,
                   on_step: Optional[Callable] = None) -> StageResult:
    net = bundle.visibnet.train()
    net.freeze_stats(False)
    state = _adam(config, adam)
    hist = list(history or [])
    for step in range(start, config.iterations["visib"]):
        b = stream("visib", step)
        if b.visible is None:
            raise ValueError("VisibNet training needs visibility labels")
        loss = loss_visib(forward_visibnet(net, Tensor(b.x)), b.visible, b.occupancy)
        hist.append(_finite(loss.item(), "visib", step))
        net.zero_grad()
        loss.backward()
        adam_step(net.parameters(), state)
        if on_step:
            on_step(step, hist[-1])
    net.eval()
    bundle.trained.add("visib")
    return StageResult("visib", hist, state)


def train_coarsenet(bundle: NetworkBundle, stream, config: TrainConfig, start: int = 0,
                    adam: Optional[AdamState] = None, history: Optional[list] = None,
                    on_step: Optional[Callable] = None) -> StageResult:
    _require(bundle, "coarse", config)
    bundle.visibnet.eval()
    frozen = _frozen(bundle, ["visibnet", "extractor"])
    net = bundle.coarsenet.train()
    net.freeze_stats(False)
    state = _adam(config, adam)
    hist = list(history or [])
    for step in range(start, config.iterations["coarse"]):
        b = stream("coarse", step)
        x = _culled(bundle, b, config)
        loss = loss_coarse(forward_coarsenet(net, Tensor(x)), Tensor(b.target), bundle.extractor, config.alpha)
        hist.append(_finite(loss.item(), "coarse", step))
        net.zero_grad()
        loss.backward()
        adam_step(net.parameters(), state)
        if config.verify_every and (step + 1) % config.verify_every == 0:
            _verify(bundle, frozen, f"coarse step {step}")
        if on_step:
            on_step(step, hist[-1])
    net.eval()
    after = _frozen(bundle, frozen)
    _verify(bundle, frozen, "coarse stage")
    bundle.trained.add("coarse")
    return StageResult("coarse", hist, state, frozen_before=frozen, frozen_after=after)


def train_refinenet(bundle: NetworkBundle, stream, config: TrainConfig, start: int = 0,
                    adam: Optional[AdamState] = None, disc_adam: Optional[AdamState] = None,
                    history: Optional[list] = None, disc_history: Optional[list] = None,
                    on_step: Optional[Callable] = None) -> StageResult:
    """Alternate one discriminator update and one generator update per iteration.

    Even stream steps feed the discriminator and odd steps the generator, so
    the two updates never share a batch.
    """
    _require(bundle, "refine", config)
    bundle.visibnet.eval()
    bundle.coarsenet.eval()
    frozen = _frozen(bundle, ["visibnet", "coarsenet", "extractor"])
    gen, disc, fx = bundle.refinenet.train(), bundle.discriminator.train(), bundle.extractor
    g_state, d_state = _adam(config, adam), _adam(config, disc_adam)
    hist, dhist = list(history or []), list(disc_history or [])
    verify = config.verify_every

    def inputs(step):
        b = stream("refine", step)
        x = _culled(bundle, b, config)
        with no_grad():
            coarse = forward_coarsenet(bundle.coarsenet, Tensor(x))
        return b, x, coarse

    for it in range(start, config.iterations["refine"]):
        check = verify and (it + 1) % verify == 0
        # discriminator update; generator runs without touching its BN statistics
        b, x, coarse = inputs(2 * it)
        g_sum = checksum(gen) if check else None
        gen.freeze_stats(True)
        with no_grad():
            fake = forward_refinenet(gen, Tensor(x), coarse)
        gen.freeze_stats(False)
        disc.freeze_stats(False)
        d_loss = loss_discriminator(disc, x, Tensor(b.target), fake, fx)
        dhist.append(_finite(d_loss.item(), "discriminator", it))
        disc.zero_grad()
        d_loss.backward()
        adam_step(disc.parameters(), d_state)
        if check and checksum(gen) != g_sum:
            raise RuntimeError(f"discriminator update at iteration {it} modified RefineNet")

        # generator update; discriminator statistics stay fixed
        b, x, coarse = inputs(2 * it + 1)
        d_sum = checksum(disc) if check else None
        disc.freeze_stats(True)
        out = forward_refinenet(gen, Tensor(x), coarse)
        g_loss = loss_refine(out, Tensor(b.target), x, disc, fx, config.alpha, config.beta)
        hist.append(_finite(g_loss.item(), "refine", it))
        gen.zero_grad()
        disc.zero_grad()
        g_loss.backward()
        adam_step(gen.parameters(), g_state)
        disc.zero_grad()
        disc.freeze_stats(False)
        if check:
            if checksum(disc) != d_sum:
                raise RuntimeError(f"generator update at iteration {it} modified the discriminator")
            _verify(bundle, frozen, f"refine step {it}")
        if on_step:
            on_step(it, hist[-1], dhist[-1])
    gen.eval()
    disc.eval()
    after = _frozen(bundle, frozen)
    _verify(bundle, frozen, "refine stage")
    bundle.trained.add("refine")
    return StageResult("refine", hist, g_state, dhist, d_state, frozen, after)


TRAINERS = {"visib": train_visibnet, "coarse": train_coarsenet, "refine": train_refinenet}


# ---------------------------------------------------------------------------
# loss logs


def write_loss_csv(result: StageResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if result.disc_history:
            w.writerow(["iteration", "loss", "disc_loss"])
            for i, (g, d) in enumerate(zip(result.history, result.disc_history)):
                w.writerow([i, repr(float(g)), repr(float(d))])
        else:
            w.writerow(["iteration", "loss"])
            for i, g in enumerate(result.history):
                w.writerow([i, repr(float(g))])


def read_loss_csv(path) -> tuple[list, list]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    hist = [float(r["loss"]) for r in rows]
    dhist = [float(r["disc_loss"]) for r in rows if "disc_loss" in r and r["disc_loss"] not in (None, "")]
    return hist, dhist


__all__ = [
    "Batch", "STAGES", "Sample", "SceneDataset", "StageResult", "StaticDataset", "TRAINERS",
    "TrainConfig", "batch_stream", "make_batch", "read_loss_csv", "resample_image", "scene_samples",
    "train_coarsenet", "train_refinenet", "train_visibnet", "write_loss_csv",
]
