"""Regular and style-modulated convolution operators on the tape.

The modulated path follows the StyleGAN2 ModConv recipe: per-input-channel
scaling of the kernel by a style vector, then per-output-channel
demodulation so each effective kernel has (near-)unit norm.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .errors import ShapeError

DEMOD_EPS = 1e-8


@dataclass(frozen=True)
class ConvSpec:
    """Stride-1, zero-padded, dilation-1 convolution with an odd kernel."""
    kernel: int = 3

    def __post_init__(self):
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ShapeError(f"kernel size must be odd and positive, got {self.kernel}")

    @property
    def pad(self) -> int:
        return (self.kernel - 1) // 2

    @property
    def taps(self) -> list[tuple[int, int]]:
        """Row-major tap grid offsets, e.g. the 9 pairs over [-1,0,1]^2."""
        r = range(-self.pad, self.pad + 1)
        return [(dy, dx) for dy in r for dx in r]


def conv2d(x: Node, w: Node, bias: Node | None = None) -> Node:
    """Plain convolution, output spatial size equals input."""
    y = ad.conv2d(x, w)
    if bias is not None:
        co = y.shape[1]
        y = ad.badd(y, ad.reshape(bias, (1, co, 1, 1)))
    return y


def modulate_demodulate(w: Node, styles: Node, eps: float = DEMOD_EPS) -> Node:
    """Per-sample effective kernels: scale by style, renormalize per output.

    w: (c_out, c_in, k, k); styles: (n, c_in). Returns (n, c_out, c_in, k, k).
    """
    if eps <= 0:
        raise ShapeError("eps must be positive")
    co, ci, k, _ = w.shape
    if styles.value.ndim != 2 or styles.shape[1] != ci:
        raise ShapeError(f"styles must be (n, {ci}), got {styles.shape}")
    n = styles.shape[0]
    wm = ad.bmul(ad.reshape(w, (1, co, ci, k, k)),
                 ad.reshape(styles, (n, 1, ci, 1, 1)))
    ssq = ad.sum_to(ad.mul(wm, wm), (n, co, 1, 1, 1))
    return ad.bmul(wm, ad.rsqrt(ad.sadd(ssq, eps)))


def modulated_conv2d(x: Node, w: Node, styles: Node,
                     bias: Node | None = None, eps: float = DEMOD_EPS) -> Node:
    """Convolution with per-sample demodulated kernels; bias added after."""
    if styles.shape[0] != x.shape[0]:
        raise ShapeError(
            f"one style vector per sample: batch {x.shape[0]} vs {styles.shape[0]}")
    wd = modulate_demodulate(w, styles, eps)
    return conv2d(x, wd, bias)


# --- raw-array conveniences (tests, tools) ----------------------------------

def conv2d_raw(x: np.ndarray, w: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    t = ad.Tape()
    b = None if bias is None else ad.constant(t, bias)
    return conv2d(ad.constant(t, x), ad.constant(t, w), b).value


def modulate_demodulate_raw(w: np.ndarray, styles: np.ndarray,
                            eps: float = DEMOD_EPS) -> np.ndarray:
    t = ad.Tape()
    return modulate_demodulate(ad.constant(t, w), ad.constant(t, styles), eps).value


def modulated_conv2d_raw(x: np.ndarray, w: np.ndarray, styles: np.ndarray,
                         bias: np.ndarray | None = None,
                         eps: float = DEMOD_EPS) -> np.ndarray:
    t = ad.Tape()
    b = None if bias is None else ad.constant(t, bias)
    return modulated_conv2d(ad.constant(t, x), ad.constant(t, w),
                            ad.constant(t, styles), b, eps).value
