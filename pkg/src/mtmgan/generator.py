"""Toy style-based generator/discriminator with configurable MTM placement.

The generator maps a latent z through a 2-layer MLP to an intermediate
latent, then runs synthesis blocks from a learned 4x4 constant up to the
final resolution. Each block holds two style-modulated 3x3 convolutions;
the first (post-upsample) one is replaceable by an MTM layer according to
the low/mid/high resolution grouping. Video mode drives each MTM layer's
offset styles from the content latent concatenated with a per-frame
motion code, while main-conv styles see the content latent only.

Parameters live in flat name->array dicts. Every parameter is drawn from
its own name-seeded stream, so two configs sharing a seed draw identical
values for the parameters they share (the basis for baseline-vs-MTM
comparisons).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Tape
from .convops import modulated_conv2d
from .deform import MtmLayer, mtm_forward, offset_channels
from .errors import ConfigError, ShapeError
from .rng import Rng, named_stream

LOW_RESOLUTIONS = (4, 8)
MID_RESOLUTIONS = (16,)
HIGH_RESOLUTIONS = (32,)
GROUPS = ("low", "mid", "high")


@dataclass(frozen=True)
class GeneratorConfig:
    resolution: int = 32
    channels: int = 512
    z_dim: int = 64
    w_dim: int = 64
    m_dim: int = 16
    mtm_groups: tuple[str, ...] = ()
    img_channels: int = 1
    video: bool = False
    frames: int = 4

    def __post_init__(self):
        if self.resolution not in (16, 32):
            raise ConfigError(f"final resolution must be 16 or 32, got {self.resolution}")
        for g in self.mtm_groups:
            if g not in GROUPS:
                raise ConfigError(f"unknown mtm group {g!r}")
        if len(set(self.mtm_groups)) != len(self.mtm_groups):
            raise ConfigError("duplicate mtm group")
        for f in ("channels", "z_dim", "w_dim", "m_dim", "img_channels", "frames"):
            if getattr(self, f) < 1:
                raise ConfigError(f"{f} must be >= 1")

    @property
    def resolutions(self) -> list[int]:
        out = []
        r = 4
        while r <= self.resolution:
            out.append(r)
            r *= 2
        return out

    def group_of(self, res: int) -> str:
        if res in LOW_RESOLUTIONS:
            return "low"
        if res in MID_RESOLUTIONS:
            return "mid"
        return "high"

    def uses_mtm(self, res: int) -> bool:
        return self.group_of(res) in self.mtm_groups

    @property
    def offset_style_dim(self) -> int:
        return self.w_dim + self.m_dim if self.video else self.w_dim


def _randn(stream: Rng, shape: tuple, scale: float = 1.0) -> np.ndarray:
    size = int(np.prod(shape))
    return stream.normal_array(size).reshape(shape) * scale


def init_generator_state(cfg: GeneratorConfig, seed: int) -> dict[str, np.ndarray]:
    c = cfg.channels
    k = 3
    p: dict[str, np.ndarray] = {}

    def draw(name, shape, scale=1.0):
        p[name] = _randn(named_stream(seed, "g." + name), shape, scale)

    draw("mapping.fc0.w", (cfg.z_dim, cfg.w_dim), cfg.z_dim ** -0.5)
    p["mapping.fc0.b"] = np.zeros(cfg.w_dim)
    draw("mapping.fc1.w", (cfg.w_dim, cfg.w_dim), cfg.w_dim ** -0.5)
    p["mapping.fc1.b"] = np.zeros(cfg.w_dim)
    draw("const", (1, c, 4, 4))

    for res in cfg.resolutions:
        for conv in ("convA", "convB"):
            base = f"b{res}.{conv}"
            draw(f"{base}.w", (c, c, k, k), (c * k * k) ** -0.5)
            p[f"{base}.b"] = np.zeros(c)
            draw(f"{base}.aff.w", (cfg.w_dim, c), cfg.w_dim ** -0.5)
            p[f"{base}.aff.b"] = np.ones(c)
        if cfg.uses_mtm(res):
            base = f"b{res}.convA.off"
            p[f"{base}.head_w"] = np.zeros((offset_channels(k), c, k, k))
            p[f"{base}.head_b"] = np.zeros(offset_channels(k))
            draw(f"{base}.aff.w", (cfg.offset_style_dim, c),
                 cfg.offset_style_dim ** -0.5)
            p[f"{base}.aff.b"] = np.ones(c)

    draw("torgb.w", (cfg.img_channels, c, 1, 1), c ** -0.5)
    p["torgb.b"] = np.zeros(cfg.img_channels)
    return p


def init_discriminator_state(cfg: GeneratorConfig, seed: int,
                             in_channels: int | None = None,
                             prefix: str = "d") -> dict[str, np.ndarray]:
    c = cfg.channels
    k = 3
    ic = cfg.img_channels if in_channels is None else in_channels
    p: dict[str, np.ndarray] = {}

    def draw(name, shape, scale=1.0):
        p[name] = _randn(named_stream(seed, prefix + "." + name), shape, scale)

    draw("conv_in.w", (c, ic, k, k), (ic * k * k) ** -0.5)
    p["conv_in.b"] = np.zeros(c)
    res = cfg.resolution
    while res >= 4:
        draw(f"conv{res}.w", (c, c, k, k), (c * k * k) ** -0.5)
        p[f"conv{res}.b"] = np.zeros(c)
        res //= 2
    draw("dense.w", (c * 16, 1), (c * 16) ** -0.5)
    p["dense.b"] = np.zeros(1)
    return p


def as_nodes(tape: Tape, params: dict[str, np.ndarray]) -> dict[str, Node]:
    """Lift a parameter dict onto a tape as leaves (sorted for stable ids)."""
    return {name: ad.leaf(tape, params[name]) for name in sorted(params)}


# --- forward passes ---------------------------------------------------------

def mapping_nodes(sn: dict[str, Node], z: Node) -> Node:
    x = ad.leaky_relu(ad.badd(ad.matmul(z, sn["mapping.fc0.w"]),
                              sn["mapping.fc0.b"]))
    return ad.leaky_relu(ad.badd(ad.matmul(x, sn["mapping.fc1.w"]),
                                 sn["mapping.fc1.b"]))


def _affine(sn: dict[str, Node], base: str, x: Node) -> Node:
    return ad.badd(ad.matmul(x, sn[base + ".w"]), sn[base + ".b"])


def synthesis_block_nodes(sn: dict[str, Node], feat: Node, wlat: Node,
                          res: int, cfg: GeneratorConfig,
                          m: Node | None = None, first: bool = False,
                          offsets_enabled: bool = True) -> tuple[Node, Node | None]:
    if not first:
        feat = ad.upsample2x(feat)
    base = f"b{res}"
    style_a = _affine(sn, f"{base}.convA.aff", wlat)
    offs = None
    if cfg.uses_mtm(res):
        off_in = wlat if m is None else ad.concat_cols(wlat, m)
        off_style = _affine(sn, f"{base}.convA.off.aff", off_in)
        layer = MtmLayer(
            main_w=sn[f"{base}.convA.w"], main_b=sn[f"{base}.convA.b"],
            main_aff_w=sn[f"{base}.convA.aff.w"], main_aff_b=sn[f"{base}.convA.aff.b"],
            head_w=sn[f"{base}.convA.off.head_w"], head_b=sn[f"{base}.convA.off.head_b"],
            off_aff_w=sn[f"{base}.convA.off.aff.w"], off_aff_b=sn[f"{base}.convA.off.aff.b"],
            offsets_enabled=offsets_enabled)
        y, offs = mtm_forward(layer, feat, style_a, off_style)
    else:
        y = modulated_conv2d(feat, sn[f"{base}.convA.w"], style_a,
                             sn[f"{base}.convA.b"])
    feat = ad.leaky_relu(y)
    style_b = _affine(sn, f"{base}.convB.aff", wlat)
    feat = ad.leaky_relu(modulated_conv2d(feat, sn[f"{base}.convB.w"], style_b,
                                          sn[f"{base}.convB.b"]))
    return feat, offs


def generator_nodes(sn: dict[str, Node], z: Node, cfg: GeneratorConfig,
                    m: Node | None = None, offsets_enabled: bool = True
                    ) -> tuple[Node, dict[str, Node]]:
    """Full synthesis pass; returns (image node, offset fields by layer name)."""
    if z.shape[1] != cfg.z_dim:
        raise ShapeError(f"latent must be (n, {cfg.z_dim}), got {z.shape}")
    if cfg.video and m is None:
        raise ShapeError("video-mode generator needs motion codes")
    n = z.shape[0]
    wlat = mapping_nodes(sn, z)
    feat = ad.broadcast_to(sn["const"], (n,) + sn["const"].shape[1:])
    offsets: dict[str, Node] = {}
    for i, res in enumerate(cfg.resolutions):
        feat, offs = synthesis_block_nodes(sn, feat, wlat, res, cfg, m,
                                           first=(i == 0),
                                           offsets_enabled=offsets_enabled)
        if offs is not None:
            offsets[f"b{res}.convA"] = offs
    img = ad.conv2d(feat, sn["torgb.w"])
    img = ad.badd(img, ad.reshape(sn["torgb.b"], (1, cfg.img_channels, 1, 1)))
    return ad.tanh(img), offsets


def discriminator_nodes(sn: dict[str, Node], img: Node,
                        cfg: GeneratorConfig) -> Node:
    """Logits (n,) from conv + leaky_relu stacks with mean-pool downsampling."""
    if img.shape[2] != cfg.resolution or img.shape[3] != cfg.resolution:
        raise ShapeError(
            f"discriminator expects {cfg.resolution}x{cfg.resolution} input, "
            f"got {img.shape}")
    n = img.shape[0]
    x = ad.leaky_relu(ad.badd(ad.conv2d(img, sn["conv_in.w"]),
                              ad.reshape(sn["conv_in.b"], (1, -1, 1, 1))))
    res = cfg.resolution
    while res > 4:
        x = ad.leaky_relu(ad.badd(ad.conv2d(x, sn[f"conv{res}.w"]),
                                  ad.reshape(sn[f"conv{res}.b"], (1, -1, 1, 1))))
        x = ad.mean_pool2x(x)
        res //= 2
    x = ad.leaky_relu(ad.badd(ad.conv2d(x, sn["conv4.w"]),
                              ad.reshape(sn["conv4.b"], (1, -1, 1, 1))))
    flat = ad.reshape(x, (n, cfg.channels * 16))
    logit = ad.badd(ad.matmul(flat, sn["dense.w"]), sn["dense.b"])
    return ad.reshape(logit, (n,))


# --- motion codes -----------------------------------------------------------

def motion_walk(rng: Rng, n: int, frames: int, m_dim: int,
                momentum: float = 0.9, drive: float = 0.1) -> np.ndarray:
    """Smoothed random walk m_{t+1} = momentum*m_t + drive*xi_t; (T, n, m_dim)."""
    out = np.empty((frames, n, m_dim))
    m = rng.normal_array(n * m_dim).reshape(n, m_dim)
    out[0] = m
    for t in range(1, frames):
        xi = rng.normal_array(n * m_dim).reshape(n, m_dim)
        m = momentum * m + drive * xi
        out[t] = m
    return out


# --- plain-array entry points ------------------------------------------------

def generate(z: np.ndarray, state: dict[str, np.ndarray], cfg: GeneratorConfig,
             m: np.ndarray | None = None, offsets_enabled: bool = True
             ) -> np.ndarray:
    """Images in [-1, 1] of shape (n, img_channels, R, R)."""
    t = Tape()
    sn = {name: ad.constant(t, v) for name, v in state.items()}
    if cfg.video and m is None:
        m = np.zeros((z.shape[0], cfg.m_dim))
    mn = None if m is None else ad.constant(t, m)
    img, _ = generator_nodes(sn, ad.constant(t, z), cfg, mn, offsets_enabled)
    return img.value


def generate_with_offsets(z: np.ndarray, state: dict[str, np.ndarray],
                          cfg: GeneratorConfig, m: np.ndarray | None = None,
                          offsets_enabled: bool = True
                          ) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    t = Tape()
    sn = {name: ad.constant(t, v) for name, v in state.items()}
    if cfg.video and m is None:
        m = np.zeros((z.shape[0], cfg.m_dim))
    mn = None if m is None else ad.constant(t, m)
    img, offs = generator_nodes(sn, ad.constant(t, z), cfg, mn, offsets_enabled)
    return img.value, {k: v.value for k, v in offs.items()}


def generate_video(z_content: np.ndarray, motion: np.ndarray | int,
                   frames: int, state: dict[str, np.ndarray],
                   cfg: GeneratorConfig, offsets_enabled: bool = True
                   ) -> tuple[np.ndarray, list[dict[str, np.ndarray]]]:
    """Frames (T, n, c, R, R) sharing content z; offsets vary per frame.

    motion: explicit codes (T, n, m_dim) or an integer seed for the walk.
    """
    if frames < 1:
        raise ShapeError("frames must be >= 1")
    if not cfg.video:
        raise ConfigError("generator config is not in video mode")
    n = z_content.shape[0]
    if isinstance(motion, (int, np.integer)):
        codes = motion_walk(Rng(int(motion)), n, frames, cfg.m_dim)
    else:
        codes = np.asarray(motion, dtype=np.float64)
        if codes.shape != (frames, n, cfg.m_dim):
            raise ShapeError(
                f"motion codes must be {(frames, n, cfg.m_dim)}, got {codes.shape}")
    imgs = []
    all_offs = []
    for tfr in range(frames):
        img, offs = generate_with_offsets(z_content, state, cfg, codes[tfr],
                                          offsets_enabled)
        imgs.append(img)
        all_offs.append(offs)
    return np.stack(imgs), all_offs


def discriminate(img: np.ndarray, state: dict[str, np.ndarray],
                 cfg: GeneratorConfig) -> np.ndarray:
    t = Tape()
    sn = {name: ad.constant(t, v) for name, v in state.items()}
    return discriminator_nodes(sn, ad.constant(t, img), cfg).value


def mtm_layer_names(state: dict[str, np.ndarray]) -> list[str]:
    """Block conv layers carrying an offset branch, e.g. 'b8.convA'."""
    out = []
    for name in sorted(state):
        if name.endswith(".off.head_w"):
            out.append(name[:-len(".off.head_w")])
    return out


def baseline_config(cfg: GeneratorConfig) -> GeneratorConfig:
    return replace(cfg, mtm_groups=())
