"""Deformable convolution with latent-modulated offset prediction.

The composite layer (`mtm_forward`) predicts per-location, per-tap 2D
displacements with a style-modulated convolution head, then aggregates
bilinear samples at the displaced tap positions. A freshly initialized
layer has an all-zero offset head, so it behaves exactly like the plain
modulated convolution it replaces.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import Node
from .convops import DEMOD_EPS, ConvSpec, modulate_demodulate, modulated_conv2d
from .errors import ShapeError


def offset_channels(k: int) -> int:
    """Two scalars (dy, dx) per tap; 18 for a 3x3 kernel."""
    return 2 * k * k


def bilinear_sample(x: np.ndarray, sample: tuple[int, int, float, float]) -> float:
    """Bilinear probe of x[b, c] at fractional (qy, qx); zero outside the map."""
    b, c, qy, qx = sample
    if x.ndim != 4:
        raise ShapeError(f"expected rank-4 input, got {x.shape}")
    return kernels.bilinear_sample_point(x[b, c], float(qy), float(qx))


def deform_conv2d(x: Node, w: Node, offsets: Node,
                  bias: Node | None = None, spec: ConvSpec | None = None) -> Node:
    """Deformable convolution: sample x at tap + offset, then accumulate.

    offsets: (n, 2*k*k, h, w) with per-tap (dy, dx) channel pairs in pixel
    units. w may be shared (c_out, c_in, k, k) or per-sample rank 5.
    """
    k = w.shape[-1]
    if spec is not None and spec.kernel != k:
        raise ShapeError(f"spec kernel {spec.kernel} != weight kernel {k}")
    n, _, h, wd = x.shape
    want = (n, offset_channels(k), h, wd)
    if offsets.shape != want:
        raise ShapeError(f"offset field must be {want}, got {offsets.shape}")
    y = ad.deform_conv2d_node(x, w, offsets)
    if bias is not None:
        co = y.shape[1]
        y = ad.badd(y, ad.reshape(bias, (1, co, 1, 1)))
    return y


def predict_offsets(x: Node, offset_style: Node, head_w: Node,
                    head_b: Node | None = None, eps: float = DEMOD_EPS) -> Node:
    """Style-modulated offset head: demodulation on, no output activation."""
    k = int(round(np.sqrt(head_w.shape[0] // 2)))
    if head_w.shape[0] != offset_channels(k):
        raise ShapeError(
            f"offset head must output 2*k*k channels, got {head_w.shape[0]}")
    return modulated_conv2d(x, head_w, offset_style, head_b, eps)


@dataclass
class MtmLayer:
    """Modulated-transformation layer: main conv plus an offset branch.

    Fields hold numpy arrays or tape nodes (the latter when training).
    """
    main_w: object                # (c_out, c_in, k, k)
    main_b: object                # (c_out,)
    main_aff_w: object            # (w_dim, c_in)
    main_aff_b: object            # (c_in,)
    head_w: object                # (2*k*k, c_in, k, k)
    head_b: object                # (2*k*k,)
    off_aff_w: object             # (style_in, c_in)
    off_aff_b: object             # (c_in,)
    offsets_enabled: bool = True

    @property
    def kernel(self) -> int:
        return self.main_w.shape[-1]

    def validate(self):
        k = self.kernel
        if self.head_w.shape[0] != offset_channels(k):
            raise ShapeError(
                f"offset head outputs {self.head_w.shape[0]} channels, "
                f"expected {offset_channels(k)}")


def mtm_forward(layer: MtmLayer, x: Node, main_style: Node,
                offset_style: Node) -> tuple[Node, Node]:
    """Predict offsets, then run the deformable main convolution.

    Returns (output, offset_field). With offsets_enabled False the
    predicted field is replaced by zeros after prediction.
    """
    layer.validate()
    t = x.tape
    offsets = predict_offsets(x, offset_style,
                              _as_node(t, layer.head_w),
                              _as_node(t, layer.head_b))
    if not layer.offsets_enabled:
        offsets = ad.constant(t, np.zeros(offsets.shape))
    wd = modulate_demodulate(_as_node(t, layer.main_w), main_style)
    y = deform_conv2d(x, wd, offsets, _as_node(t, layer.main_b))
    return y, offsets


def _as_node(tape: ad.Tape, v) -> Node:
    return v if isinstance(v, Node) else ad.constant(tape, v)


def mtm_param_count(layer: MtmLayer) -> tuple[int, int]:
    """Exact (main, offset-branch) parameter counts, affines included."""
    def size(v) -> int:
        return int(v.value.size if isinstance(v, Node) else v.size)
    main = (size(layer.main_w) + size(layer.main_b)
            + size(layer.main_aff_w) + size(layer.main_aff_b))
    off = (size(layer.head_w) + size(layer.head_b)
           + size(layer.off_aff_w) + size(layer.off_aff_b))
    return main, off
