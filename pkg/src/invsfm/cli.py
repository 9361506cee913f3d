"""Command-line entry point: ``invsfm <command> [flags]``.

Exit codes: 0 success, 1 input error, 2 runtime failure.  A ``--config``
JSON file overrides any flag of the same name; training hyperparameters
(alpha, beta, lr, iterations, ...) are read from it too.  The log level
comes from the ``INVSFM_LOG`` environment variable.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .colmap_io import parse_model
from .errors import DivergedLoss, InvSfmError, MissingFile
from .nets import NetworkBundle, build_bundle, invert
from .nn.checkpoint import load_adam, load_module, save_adam, save_module
from .nn.optim import AdamState
from .render import (
    ChannelSchema,
    ViewSpec,
    apply_dropout,
    render_view,
    write_featuremap_dump,
)
from .synth import LAYOUTS, SynthParams, make_scene, save_scene, to_uint8
from .trajectory import interpolate, load_trajectory
from .train import (
    STAGE_NETS,
    STAGES,
    TRAINERS,
    SceneDataset,
    StageResult,
    TrainConfig,
    batch_stream,
    read_loss_csv,
    write_loss_csv,
)
from .visibility import load_mesh, render_mesh_depth, visib_dense, visib_sparse

log = logging.getLogger("invsfm")

CONFIG_NAME = "config.json"
VISIBILITY_CHOICES = ("implicit", "sparse", "dense", "net")


class InputError(InvSfmError):
    """Bad command-line usage detected after parsing."""


# ---------------------------------------------------------------------------
# helpers


def _save_png(img: np.ndarray, path) -> None:
    from PIL import Image

    arr = img if img.dtype == np.uint8 else to_uint8(img)
    Image.fromarray(arr).save(path)


def _load_png(path) -> np.ndarray:
    from PIL import Image

    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), np.float64) / 255.0
    except FileNotFoundError:
        raise MissingFile(str(path)) from None


def _parse_size(text):
    if text is None:
        return None
    try:
        w, h = (int(v) for v in str(text).lower().split("x"))
    except ValueError:
        raise InputError(f"size must look like WIDTHxHEIGHT, got {text!r}") from None
    return w, h


def _parse_pose(text):
    vals = [float(v) for v in str(text).replace(",", " ").split()]
    if len(vals) != 7:
        raise InputError("--pose needs 7 numbers: qw qx qy qz tx ty tz")
    return tuple(vals[:4]), tuple(vals[4:])


def _model(args):
    if not args.model:
        raise InputError("--model is required")
    return parse_model(args.model)


def _view(args, model) -> ViewSpec:
    size = _parse_size(args.size)
    if args.pose is not None:
        q, t = _parse_pose(args.pose)
        cam_id = args.camera_id if args.camera_id is not None else min(model.cameras)
        if cam_id not in model.cameras:
            raise InputError(f"camera id {cam_id} is not in the model")
        cam = model.cameras[cam_id]
        view = ViewSpec(q, t, cam, cam.width, cam.height)
        return view.resized(*size) if size else view
    if args.image_id is None:
        raise InputError("give --image-id or --pose")
    return ViewSpec.from_image(model, args.image_id, size)


def _train_config(args) -> TrainConfig:
    cfg = dict(args.train_overrides)
    for key in ("schema", "seed"):
        if getattr(args, key, None) is not None and key not in cfg:
            cfg[key] = getattr(args, key)
    return TrainConfig.from_dict(cfg)


def _ckpt(directory: Path, net: str) -> Path:
    return directory / f"{net}.ckpt"


def load_bundle(directory) -> tuple[NetworkBundle, TrainConfig]:
    """Rebuild the networks from ``config.json`` and load every checkpoint present."""
    directory = Path(directory)
    path = directory / CONFIG_NAME
    if not path.exists():
        raise MissingFile(str(path))
    config = TrainConfig.load(path)
    bundle = build_bundle(config.channel_schema, config.seed, config.width, config.image_size)
    ext = _ckpt(directory, "extractor")
    if ext.exists():
        load_module(bundle.extractor, ext)
    for stage in STAGES:
        net = STAGE_NETS[stage]
        if _ckpt(directory, net).exists():
            load_module(getattr(bundle, net), _ckpt(directory, net))
            bundle.trained.add(stage)
    if _ckpt(directory, "discriminator").exists():
        load_module(bundle.discriminator, _ckpt(directory, "discriminator"))
    for net in bundle.networks().values():
        net.eval()
    return bundle, config


def _views_and_images(args, model, need_images: bool):
    ids = sorted(model.images) if args.image_id is None else [args.image_id]
    views = [ViewSpec.from_image(model, i) for i in ids]
    images = None
    if args.images:
        images = [_load_png(Path(args.images) / model.images[i].name) for i in ids]
    elif need_images:
        raise InputError("--images is required")
    return ids, views, images


# ---------------------------------------------------------------------------
# commands


def cmd_inspect(args) -> int:
    model = _model(args)
    arr = model.arrays()
    n_obs = sum(len(im.observations) for im in model.images.values())
    print(f"cameras: {len(model.cameras)}")
    print(f"images: {len(model.images)}")
    print(f"points: {len(model.points)}")
    print(f"observations: {n_obs}")
    print(f"descriptor coverage: {100.0 * model.descriptor_coverage():.1f}%")
    if len(model.points):
        lo, hi = arr["xyz"].min(axis=0), arr["xyz"].max(axis=0)
        print("bounding box: [{:.4g} {:.4g} {:.4g}] - [{:.4g} {:.4g} {:.4g}]".format(*lo, *hi))
    else:
        print("bounding box: empty")
    return 0


def cmd_render(args) -> int:
    model = _model(args)
    view = _view(args, model)
    schema = ChannelSchema.parse(args.schema)
    fmap = render_view(model, view, schema)
    if args.keep is not None and args.keep < 1.0:
        fmap = apply_dropout(fmap, args.keep, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_featuremap_dump(fmap, out / "featuremap.bin")
    _save_png(np.where(fmap.occupancy, 255, 0).astype(np.uint8), out / "occupancy.png")
    print(f"M: {fmap.M}")
    return 0


def cmd_visibility(args) -> int:
    model = _model(args)
    view = _view(args, model)
    fmap = render_view(model, view, ChannelSchema())
    method = args.visibility or "sparse"
    if method == "sparse":
        mask = visib_sparse(fmap, args.k, args.tau)
    elif method == "dense":
        if not args.mesh:
            raise InputError("--visibility dense requires --mesh")
        mask = visib_dense(fmap, render_mesh_depth(load_mesh(args.mesh).validated(), view), args.eps)
    else:
        raise InputError("visibility command supports --visibility sparse or dense")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    vis = np.zeros(mask.shape, np.uint8)
    vis[mask.visible] = 255
    vis[mask.occluded] = 128
    _save_png(vis, out / "visibility.png")
    print(f"occupied: {int(mask.occupancy.sum())}")
    print(f"visible: {int(mask.visible.sum())}")
    print(f"occluded: {int(mask.occluded.sum())}")
    return 0


def cmd_train(args) -> int:
    if args.stage not in STAGES:
        raise InputError(f"--stage must be one of {STAGES}")
    config = _train_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg_path = out / CONFIG_NAME
    if cfg_path.exists():
        saved = TrainConfig.load(cfg_path)
        if (saved.schema, saved.width, saved.image_size, saved.seed) != (
                config.schema, config.width, config.image_size, config.seed):
            raise InputError(f"{cfg_path} was written for a different schema/width/size/seed")
    cfg_path.write_text(config.to_json() + "\n")
    bundle, _ = load_bundle(out)
    if not _ckpt(out, "extractor").exists():
        save_module(bundle.extractor, _ckpt(out, "extractor"))

    model = _model(args)
    mesh = load_mesh(args.mesh) if args.mesh else None
    if args.stage == "visib" and mesh is None:
        raise InputError("training VisibNet needs --mesh for visibility labels")
    _, views, images = _views_and_images(args, model, need_images=args.stage != "visib")
    dataset = SceneDataset(model, views, config.channel_schema, config.image_size, images, mesh,
                           config.augment_sizes, config.label_eps)
    stream = batch_stream(dataset, config.batch_size, config.seed)

    stage, net_name = args.stage, STAGE_NETS[args.stage]
    loss_path = out / f"loss_{stage}.csv"
    adam_path = out / f"{net_name}.adam"
    disc_adam_path = out / "discriminator.adam"
    hist, dhist = [], []
    g_state, d_state = AdamState(lr=config.lr), AdamState(lr=config.lr)
    if args.resume and loss_path.exists() and adam_path.exists():
        hist, dhist = read_loss_csv(loss_path)
        g_state = load_adam(adam_path, g_state)
        if stage == "refine":
            d_state = load_adam(disc_adam_path, d_state)
        log.info("resuming %s at iteration %d", stage, len(hist))
    elif stage in bundle.trained:
        # retraining from scratch starts from the seeded initial weights
        fresh = build_bundle(config.channel_schema, config.seed, config.width, config.image_size)
        setattr(bundle, net_name, getattr(fresh, net_name))
        if stage == "refine":
            bundle.discriminator = fresh.discriminator
    bundle.trained.discard(stage)
    start = len(hist)

    def snapshot():
        save_module(getattr(bundle, net_name), _ckpt(out, net_name))
        save_adam(g_state, adam_path)
        if stage == "refine":
            save_module(bundle.discriminator, _ckpt(out, "discriminator"))
            save_adam(d_state, disc_adam_path)
        write_loss_csv(StageResult(stage, hist, g_state, dhist), loss_path)

    def on_step(step, loss, d_loss=None):
        hist.append(loss)
        if d_loss is not None:
            dhist.append(d_loss)
        if args.checkpoint_every and (step + 1) % args.checkpoint_every == 0:
            log.info("%s iteration %d loss %.6g", stage, step, loss)
            snapshot()

    kwargs = {"start": start, "history": list(hist), "adam": g_state, "on_step": on_step}
    if stage == "refine":
        kwargs.update(disc_adam=d_state, disc_history=list(dhist))
    TRAINERS[stage](bundle, stream, config, **kwargs)
    snapshot()
    final = hist[-1] if hist else float("nan")
    print(f"{stage}: {len(hist)} iterations, final loss {final:.6g}")
    return 0


def _inversion_views(args, bundle, config, model):
    size = _parse_size(args.size) or (config.image_size, config.image_size)
    ids = sorted(model.images) if args.image_id is None else [args.image_id]
    return ids, [ViewSpec.from_image(model, i, size) for i in ids], size


def _visibility_for(args, fmap, view, mesh):
    mode = args.visibility or "net"
    if mode in ("net", "implicit"):
        return mode
    if mode == "sparse":
        return visib_sparse(fmap, args.k, args.tau)
    if mesh is None:
        raise InputError("--visibility dense requires --mesh")
    return visib_dense(fmap, render_mesh_depth(mesh, view), args.eps)


def _check_trained(bundle, mode):
    need = ["coarse", "refine"] + (["visib"] if mode == "net" else [])
    missing = [s for s in need if s not in bundle.trained]
    if missing:
        raise MissingFile(f"checkpoints for {missing} not found")


def cmd_invert(args) -> int:
    bundle, config = load_bundle(args.checkpoints)
    _check_trained(bundle, args.visibility or "net")
    model = _model(args)
    mesh = load_mesh(args.mesh).validated() if args.mesh else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ids, views, _ = _inversion_views(args, bundle, config, model)
    for image_id, view in zip(ids, views):
        fmap = render_view(model, view, bundle.schema)
        if args.keep is not None and args.keep < 1.0:
            fmap = apply_dropout(fmap, args.keep, [args.seed, image_id])
        img = invert(bundle, fmap, _visibility_for(args, fmap, view, mesh))
        name = Path(model.images[image_id].name).stem + ".png"
        _save_png(img, out / name)
        print(out / name)
    return 0


def cmd_evaluate(args) -> int:
    from .metrics import MetricReport, evaluate_sample
    from .train import Sample

    bundle, config = load_bundle(args.checkpoints)
    model = _model(args)
    modes = [m.strip() for m in (args.visibility or "net").split(",")]
    for m in modes:
        if m not in VISIBILITY_CHOICES:
            raise InputError(f"unknown visibility mode {m!r}")
        _check_trained(bundle, m)
    ratios = [float(r) for r in str(args.keep if args.keep is not None else "1.0").split(",")]
    mesh = load_mesh(args.mesh).validated() if args.mesh else None
    if "dense" in modes and mesh is None:
        raise InputError("--visibility dense requires --mesh")
    if not args.images:
        raise InputError("--images is required")
    ids, views, size = _inversion_views(args, bundle, config, model)
    samples = []
    for image_id, view in zip(ids, views):
        from .train import resample_image

        fmap = render_view(model, view, bundle.schema)
        target = resample_image(_load_png(Path(args.images) / model.images[image_id].name), *size)
        buffer = mask = None
        if mesh is not None:
            buffer = render_mesh_depth(mesh, view)
            mask = visib_dense(fmap, buffer, args.eps)
        samples.append(Sample(fmap, target, mask, str(image_id), buffer))
    rows = [evaluate_sample(bundle, s, m, r, args.seed, args.k, args.tau, args.eps)
            for m in modes for r in ratios for s in samples]
    report = MetricReport(rows)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.write_csv(out)
    print(report.table())
    return 0


def cmd_tour(args) -> int:
    bundle, config = load_bundle(args.checkpoints)
    _check_trained(bundle, args.visibility or "net")
    model = _model(args)
    if not args.trajectory:
        raise InputError("--trajectory is required")
    spec = load_trajectory(args.trajectory)
    mesh = load_mesh(args.mesh).validated() if args.mesh else None
    cam_id = args.camera_id if args.camera_id is not None else min(model.cameras)
    if cam_id not in model.cameras:
        raise InputError(f"camera id {cam_id} is not in the model")
    cam = model.cameras[cam_id]
    size = _parse_size(args.size) or (config.image_size, config.image_size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    frames = interpolate(spec)
    digits = max(4, len(str(len(frames) - 1)))
    for k, (q, t) in enumerate(frames):
        view = ViewSpec(q, t, cam, cam.width, cam.height).resized(*size)
        fmap = render_view(model, view, bundle.schema)
        img = invert(bundle, fmap, _visibility_for(args, fmap, view, mesh))
        _save_png(img, out / f"frame_{k:0{digits}d}.png")
    print(f"frames: {len(frames)}")
    return 0


def cmd_synth(args) -> int:
    params = SynthParams(args.layout, args.points, args.views, args.image_size)
    scene = make_scene(params, args.seed)
    save_scene(scene, args.out)
    print(f"points: {len(scene.model.points)}")
    print(f"images: {len(scene.model.images)}")
    return 0


COMMANDS = {
    "inspect": cmd_inspect,
    "render": cmd_render,
    "visibility": cmd_visibility,
    "train": cmd_train,
    "invert": cmd_invert,
    "evaluate": cmd_evaluate,
    "tour": cmd_tour,
    "synth": cmd_synth,
}


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="invsfm", description="Invert SfM point clouds into images.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON file whose entries override flags")
        sp.add_argument("--model", help="reconstruction directory (text or binary)")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", default=".")

    def view(sp):
        sp.add_argument("--image-id", type=int, dest="image_id")
        sp.add_argument("--pose", help="explicit world->camera pose 'qw,qx,qy,qz,tx,ty,tz'")
        sp.add_argument("--camera-id", type=int, dest="camera_id")
        sp.add_argument("--size", help="output size WIDTHxHEIGHT")

    def vis(sp, default=None):
        sp.add_argument("--visibility", default=default)
        sp.add_argument("--mesh")
        sp.add_argument("--k", type=int, default=3, help="VisibSparse window")
        sp.add_argument("--tau", type=float, default=0.05, help="VisibSparse tolerance")
        sp.add_argument("--eps", type=float, default=0.01, help="VisibDense tolerance")

    sp = sub.add_parser("inspect", help="summarize a reconstruction")
    common(sp)

    sp = sub.add_parser("render", help="render a feature map dump and occupancy image")
    common(sp)
    view(sp)
    sp.add_argument("--schema", default="z,c,d")
    sp.add_argument("--keep", type=float)

    sp = sub.add_parser("visibility", help="estimate per-point visibility for one view")
    common(sp)
    view(sp)
    vis(sp, "sparse")

    sp = sub.add_parser("train", help="train one stage of the cascade")
    common(sp)
    sp.add_argument("--stage", required=False, default=None)
    sp.add_argument("--images")
    sp.add_argument("--mesh")
    sp.add_argument("--image-id", type=int, dest="image_id")
    sp.add_argument("--schema")
    sp.add_argument("--resume", action="store_true")
    sp.add_argument("--checkpoint-every", type=int, default=0, dest="checkpoint_every")

    for name, help_ in (("invert", "invert feature maps into images"),
                        ("evaluate", "score inversions against images"),
                        ("tour", "render and invert frames along a trajectory")):
        sp = sub.add_parser(name, help=help_)
        common(sp)
        view(sp)
        vis(sp)
        sp.add_argument("--checkpoints", required=False)
        sp.add_argument("--keep", type=str if name == "evaluate" else float)
        if name == "evaluate":
            sp.add_argument("--images")
        if name == "tour":
            sp.add_argument("--trajectory")

    sp = sub.add_parser("synth", help="generate a synthetic scene")
    common(sp)
    sp.add_argument("--layout", choices=LAYOUTS, default="two-plane")
    sp.add_argument("--points", type=int, default=4000)
    sp.add_argument("--views", type=int, default=5)
    sp.add_argument("--image-size", type=int, default=64, dest="image_size")
    return p


def _apply_config(args) -> None:
    args.train_overrides = {}
    if not getattr(args, "config", None):
        return
    path = Path(args.config)
    if not path.exists():
        raise MissingFile(str(path))
    try:
        cfg = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise InputError(f"{path}: top level must be an object")
    train_keys = set(TrainConfig.__dataclass_fields__)
    for key, val in cfg.items():
        attr = key.replace("-", "_")
        if attr in train_keys:
            args.train_overrides[attr] = val
        if hasattr(args, attr) and attr != "config":
            setattr(args, attr, val)
        elif attr not in train_keys:
            raise InputError(f"{path}: unknown key {key!r}")


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("INVSFM_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code else 0
    try:
        _apply_config(args)
        return COMMANDS[args.command](args)
    except DivergedLoss as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (InvSfmError, ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - report anything else as a runtime failure
        print(f"error: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
