"""VisibNet / CoarseNet / RefineNet U-Nets, the conditional discriminator,
the fixed perceptual feature extractor, and the three training objectives.

Architecture (channel counts at ``width=1``):

* encoder  CE256-CE256-CE256-CE512-CE512-CE512  (4x4 conv, stride 2, BN, ReLU)
* decoder  CD512-CD512-CD512-CD256-CD256-CD256  (2x nearest upsample, 3x3 conv, BN, act)
* tail     C128-C64-C32-C_out                    (3x3 conv, BN, act; last: tanh, no BN)
* discriminator CA256x3-CA512x3-FC1024x3-FC2     (3x3 conv, 2x2 max pool, BN, leaky ReLU)

Encoder outputs at H/2 .. H/32 are concatenated onto the decoder input of
the same resolution; the H/64 bottleneck feeds the first CD directly.
Extractor taps are injected into the discriminator where resolutions match:
tap 1 (H/2) before stage 2, tap 2 (H/4) before stage 3, tap 3 (H/8) before stage 4.
"""

from __future__ import annotations

import hashlib
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import BadDimensions, ShapeMismatch
from .nn import functional as F
from .nn.layers import BatchNorm2d, Conv2d, Linear, Module
from .nn.tensor import DEFAULT_DTYPE, Tensor, no_grad
from .render import ChannelSchema, FeatureMap

ENCODER = (256, 256, 256, 512, 512, 512)
DECODER = (512, 512, 512, 256, 256, 256)
TAIL = (128, 64, 32)
DISC_CONV = (256, 256, 256, 512, 512, 512)
DISC_FC = (1024, 1024, 1024)
TAPS = (64, 128, 256)
LEAKY_SLOPE = 0.2
MULTIPLE = 2 ** len(ENCODER)
LOG_EPS = 1e-12


def scaled(channels: int, width: float) -> int:
    return max(1, int(round(channels * width)))


def _act(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return F.relu(x)
    if kind == "leaky_relu":
        return F.leaky_relu(x, LEAKY_SLOPE)
    raise ValueError(f"unknown activation {kind!r}")


class ConvBlock(Module):
    def __init__(self, cin, cout, kernel, stride, act, upsample=False, pool=False, norm=True):
        self.conv = Conv2d(cin, cout, kernel, stride)
        self.bn = BatchNorm2d(cout) if norm else None
        self.act, self.upsample, self.pool = act, upsample, pool

    def forward(self, x: Tensor) -> Tensor:
        if self.upsample:
            x = F.upsample_nearest2x(x)
        x = self.conv(x)
        if self.pool:
            x = F.maxpool2x2(x)
        if self.bn is not None:
            x = self.bn(x)
        return F.tanh(x) if self.act == "tanh" else _act(x, self.act)


class UNet(Module):
    def __init__(self, cin: int, cout: int, decoder_act: str = "relu", width: float = 1.0):
        enc = [scaled(c, width) for c in ENCODER]
        dec = [scaled(c, width) for c in DECODER]
        tail = [scaled(c, width) for c in TAIL]
        self.cin, self.cout = cin, cout
        self.encoder = []
        prev = cin
        for c in enc:
            self.encoder.append(ConvBlock(prev, c, 4, 2, "relu"))
            prev = c
        self.decoder = []
        for k, c in enumerate(dec):
            # decoder stage k > 0 sees its predecessor concatenated with the
            # encoder output at the same resolution
            skip = enc[len(enc) - 1 - k] if k > 0 else 0
            self.decoder.append(ConvBlock(prev + skip, c, 3, 1, decoder_act, upsample=True))
            prev = c
        self.tail = []
        for c in tail:
            self.tail.append(ConvBlock(prev, c, 3, 1, decoder_act))
            prev = c
        self.tail.append(ConvBlock(prev, cout, 3, 1, "tanh", norm=False))

    def forward(self, x: Tensor, keep_bottleneck: bool = False):
        if x.shape[1] != self.cin:
            raise ShapeMismatch(f"U-Net expects {self.cin} input channels, got {x.shape[1]}")
        feats = []
        for block in self.encoder:
            x = block(x)
            feats.append(x)
        bottleneck = x
        for k, block in enumerate(self.decoder):
            if k > 0:
                x = F.concat([x, feats[len(feats) - 1 - k]])
            x = block(x)
        for block in self.tail:
            x = block(x)
        return (x, bottleneck) if keep_bottleneck else x


class FeatureExtractor(Module):
    """Fixed three-tap convolutional pyramid standing in for VGG16 relu1_1/2_2/3_3.

    Tap shapes for an H x W image: (64, H/2, W/2), (128, H/4, W/4),
    (256, H/8, W/8).  Weights never receive updates.
    """

    def __init__(self):
        self.stages = [Conv2d(3, TAPS[0], 4, 2), Conv2d(TAPS[0], TAPS[1], 4, 2), Conv2d(TAPS[1], TAPS[2], 4, 2)]

    def freeze(self) -> "FeatureExtractor":
        for p in self.parameters():
            p.requires_grad = False
        return self

    def forward(self, image: Tensor) -> list[Tensor]:
        taps, x = [], image
        for conv in self.stages:
            x = F.relu(conv(x))
            taps.append(x)
        return taps


class Discriminator(Module):
    def __init__(self, cin: int, image_size: int, width: float = 1.0):
        if image_size % MULTIPLE:
            raise BadDimensions(f"discriminator input size must be a multiple of {MULTIPLE}")
        convs = [scaled(c, width) for c in DISC_CONV]
        fcs = [scaled(c, width) for c in DISC_FC]
        self.image_size = image_size
        inject = {1: TAPS[0], 2: TAPS[1], 3: TAPS[2]}
        self.stages = []
        prev = cin
        for k, c in enumerate(convs):
            self.stages.append(ConvBlock(prev + inject.get(k, 0), c, 3, 1, "leaky_relu", pool=True))
            prev = c
        side = image_size // MULTIPLE
        prev = prev * side * side
        self.fc = []
        for c in fcs:
            self.fc.append(Linear(prev, c))
            prev = c
        self.out = Linear(prev, 2)

    def forward(self, cond: Tensor, image: Tensor, taps: list[Tensor]) -> Tensor:
        """Logits (N, 2); column 1 is "real"."""
        if image.shape[2] != self.image_size or image.shape[3] != self.image_size:
            raise ShapeMismatch(f"discriminator built for {self.image_size}², got {image.shape[2:]}")
        x = F.concat([cond, image])
        for k, stage in enumerate(self.stages):
            if 1 <= k <= 3:
                x = F.concat([x, taps[k - 1]])
            x = stage(x)
        x = F.flatten(x)
        for fc in self.fc:
            x = F.leaky_relu(fc(x), LEAKY_SLOPE)
        return self.out(x)


@dataclass
class NetworkBundle:
    schema: ChannelSchema
    visibnet: UNet
    coarsenet: UNet
    refinenet: UNet
    discriminator: Discriminator
    extractor: FeatureExtractor
    width: float = 1.0
    image_size: int = 256
    trained: set = field(default_factory=set)

    def networks(self) -> dict:
        return {
            "visibnet": self.visibnet,
            "coarsenet": self.coarsenet,
            "refinenet": self.refinenet,
            "discriminator": self.discriminator,
            "extractor": self.extractor,
        }


def _net_seed(seed: int, name: str) -> int:
    return zlib.crc32(f"{seed}:{name}".encode())


def build_bundle(schema: ChannelSchema, seed: int, width: float = 1.0, image_size: int = 256,
                 dtype=DEFAULT_DTYPE) -> NetworkBundle:
    """Construct all networks with Xavier-initialized weights derived from ``seed``."""
    n = schema.n
    bundle = NetworkBundle(
        schema=schema,
        visibnet=UNet(n, 1, "relu", width),
        coarsenet=UNet(n, 3, "relu", width),
        refinenet=UNet(n + 3, 3, "leaky_relu", width),
        discriminator=Discriminator(n + 3, image_size, width),
        extractor=FeatureExtractor(),
        width=width,
        image_size=image_size,
    )
    for name, net in bundle.networks().items():
        net.init_parameters(_net_seed(seed, name), dtype)
    bundle.extractor.freeze()
    bundle.extractor.eval()
    return bundle


def checksum(module: Module) -> str:
    """SHA-256 over every parameter and buffer (name, dtype, shape, bytes)."""
    h = hashlib.sha256()
    for name, arr in sorted(module.state_dict().items()):
        arr = np.ascontiguousarray(arr)
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# forward passes


def _check_dims(x: Tensor) -> None:
    H, W = x.shape[2], x.shape[3]
    if H % MULTIPLE or W % MULTIPLE:
        raise BadDimensions(f"spatial size {H}x{W} must be divisible by {MULTIPLE}")


def as_input(maps) -> Tensor:
    """Stack feature maps (or pass through an (N, n, H, W) array/tensor)."""
    if isinstance(maps, Tensor):
        return maps
    if isinstance(maps, FeatureMap):
        maps = [maps]
    if isinstance(maps, np.ndarray):
        return Tensor(maps)
    return Tensor(np.stack([m.chw() for m in maps]))


def forward_visibnet(net: UNet, maps) -> Tensor:
    """(N, 1, H, W) tanh field; visible probability is ``(out + 1) / 2``."""
    x = as_input(maps)
    _check_dims(x)
    return net(x)


def forward_coarsenet(net: UNet, maps) -> Tensor:
    x = as_input(maps)
    _check_dims(x)
    return net(x)


def forward_refinenet(net: UNet, maps, coarse: Tensor) -> Tensor:
    x = as_input(maps)
    _check_dims(x)
    if coarse.shape[0] != x.shape[0] or coarse.shape[2:] != x.shape[2:] or coarse.shape[1] != 3:
        raise ShapeMismatch(f"coarse image {coarse.shape} does not match feature map {x.shape}")
    return net(F.concat([x, coarse]))


def forward_discriminator(disc: Discriminator, maps, image: Tensor, fx: FeatureExtractor) -> Tensor:
    """P(real) per sample, shape (N,)."""
    x = as_input(maps)
    if image.shape[0] != x.shape[0] or image.shape[2:] != x.shape[2:]:
        raise ShapeMismatch(f"image {image.shape} does not match feature map {x.shape}")
    p = F.softmax(disc(x, image, fx(image)))
    return _column(p, 1)


def _column(t: Tensor, j: int) -> Tensor:
    sel = np.zeros((t.shape[1], 1), t.dtype)
    sel[j] = 1
    return F.linear(t, Tensor(sel.T)).reshape(t.shape[0])


# ---------------------------------------------------------------------------
# objectives


def _batched(arr: np.ndarray, ndim: int) -> np.ndarray:
    arr = np.asarray(arr)
    return arr[None] if arr.ndim == ndim - 1 else arr


def loss_visib(pred: Tensor, visible: np.ndarray, occupancy: np.ndarray) -> Tensor:
    """Cross-entropy on tanh outputs, summed over occupied cells, mean over the batch.

    ``visible`` holds 1 for visible and 0 for occluded; ``pred`` is (N, 1, H, W)
    or (H, W).
    """
    if pred.ndim == 2:
        pred = pred.reshape(1, 1, *pred.shape)
    N = pred.shape[0]
    u = _batched(visible, 3).astype(pred.dtype).reshape(pred.shape)
    occ = _batched(occupancy, 3).astype(bool).reshape(pred.shape)
    p_vis = ((pred + 1.0) * 0.5).clamp(LOG_EPS, None)
    p_occ = ((1.0 - pred) * 0.5).clamp(LOG_EPS, None)
    ll = p_vis.log() * (u * occ) + p_occ.log() * ((1 - u) * occ)
    return -(ll.sum() * (1.0 / N))


def perceptual(out: Tensor, target: Tensor, fx: FeatureExtractor) -> Tensor:
    total = None
    with no_grad():
        tgt_taps = fx(target)
    for a, b in zip(fx(out), tgt_taps):
        d = a - b
        term = (d * d).mean()
        total = term if total is None else total + term
    return total


def loss_coarse(out: Tensor, target: Tensor, fx: FeatureExtractor, alpha: float) -> Tensor:
    """Mean absolute error plus ``alpha`` times the per-tap mean squared feature error."""
    target = target if isinstance(target, Tensor) else Tensor(np.asarray(target, out.dtype))
    l1 = (out - target).abs().mean()
    if alpha == 0:
        return l1
    return l1 + perceptual(out, target, fx) * alpha


def _log_real(disc, maps, image, fx):
    return F.log_softmax(disc(as_input(maps), image, fx(image)))


def loss_refine(out: Tensor, target, maps, disc: Discriminator, fx: FeatureExtractor,
                alpha: float, beta: float) -> Tensor:
    """Generator objective: L1 + alpha * perceptual + beta * [log D(x) + log(1 - D(R))]."""
    target = target if isinstance(target, Tensor) else Tensor(np.asarray(target, out.dtype))
    total = loss_coarse(out, target, fx, alpha)
    if beta == 0:
        return total
    with no_grad():
        log_d_real = float(_log_real(disc, maps, target, fx).data[:, 1].mean())
    log_fake = _log_real(disc, maps, out, fx)
    log_one_minus = _column(log_fake, 0).mean()
    return total + (log_one_minus + log_d_real) * beta


def loss_discriminator(disc: Discriminator, maps, real, fake: Tensor, fx: FeatureExtractor) -> Tensor:
    """Cross-entropy of real (label 1) vs synthesized (label 0) images, batch mean."""
    real = real if isinstance(real, Tensor) else Tensor(np.asarray(real, fake.dtype))
    fake = Tensor(fake.data)
    lr = _column(_log_real(disc, maps, real, fx), 1)
    lf = _column(_log_real(disc, maps, fake, fx), 0)
    return -((lr.mean() + lf.mean()))


# ---------------------------------------------------------------------------
# culling and full inversion


def visible_probability(pred) -> np.ndarray:
    data = pred.data if isinstance(pred, Tensor) else np.asarray(pred)
    return (data + 1.0) / 2.0


def cull(fmap: FeatureMap, pred, threshold: float = 0.5) -> FeatureMap:
    """Clear cells whose predicted visible-probability is below ``threshold``."""
    prob = visible_probability(pred).reshape(fmap.occupancy.shape)
    return fmap.keep_only(prob >= threshold)


def cull_batch(x: np.ndarray, pred, threshold: float = 0.5) -> np.ndarray:
    keep = visible_probability(pred) >= threshold  # (N, 1, H, W)
    return np.where(keep, x, np.zeros((), x.dtype))


def run_cascade(bundle: NetworkBundle, x: np.ndarray, visibility="net", refine: bool = True):
    """Eval-mode cascade on an (N, n, H, W) batch; returns (coarse, final) tensors in [-1, 1].

    ``visibility`` is ``"net"`` (cull with VisibNet), ``"implicit"`` (no culling),
    or a boolean keep-mask of shape (N, H, W) from a geometric method.
    """
    for net in (bundle.visibnet, bundle.coarsenet, bundle.refinenet):
        net.eval()
    with no_grad():
        xt = Tensor(x)
        _check_dims(xt)
        if isinstance(visibility, str) and visibility == "net":
            x = cull_batch(x, forward_visibnet(bundle.visibnet, xt))
        elif isinstance(visibility, np.ndarray):
            x = np.where(visibility[:, None], x, np.zeros((), x.dtype))
        elif visibility != "implicit":
            raise ValueError(f"unknown visibility mode {visibility!r}")
        xt = Tensor(x)
        coarse = forward_coarsenet(bundle.coarsenet, xt)
        final = forward_refinenet(bundle.refinenet, xt, coarse) if refine else coarse
    return coarse, final


def to_unit(img: Tensor | np.ndarray) -> np.ndarray:
    """(N, 3, H, W) in [-1, 1] -> (N, H, W, 3) in [0, 1]."""
    data = img.data if isinstance(img, Tensor) else img
    return np.clip((data.transpose(0, 2, 3, 1) + 1.0) / 2.0, 0.0, 1.0)


def invert(bundle: NetworkBundle, fmap: FeatureMap, visibility="net") -> np.ndarray:
    """Feature map -> H x W x 3 image in [0, 1] through cull, CoarseNet, RefineNet.

    ``visibility`` may also be a :class:`VisibilityMask` from a geometric method.
    """
    if hasattr(visibility, "visible"):
        visibility = visibility.visible[None]
    x = fmap.chw()[None].astype(DEFAULT_DTYPE)
    _, final = run_cascade(bundle, x, visibility)
    return to_unit(final)[0]
