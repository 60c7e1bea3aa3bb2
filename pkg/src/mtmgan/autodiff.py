"""Reverse-mode tape over numpy values, with differentiable backward passes.

Every operation appends a node to a :class:`Tape`. Backward rules are
themselves written in terms of taped operations, so sweeping the tape a
second time yields second-order gradients (as needed by gradient-penalty
regularizers). The exceptions are the deformable-sampling ops, whose
backward rules come from compiled kernels and stop at first order; asking
for their second derivative raises :class:`TapeError` instead of silently
returning zeros.

Values are float64 numpy arrays of any rank (scalars are 0-d arrays).
Same-shape ops (`add`, `mul`) reject mismatched shapes; broadcasting only
happens through the explicitly named `badd`/`bmul`/`sum_to` ops.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import kernels
from .errors import NumericError, ShapeError, TapeError


class Tape:
    """Append-only DAG of recorded operations in creation order."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)


class Node:
    __slots__ = ("tape", "idx", "value", "op", "parents", "bwd")

    def __init__(self, tape: Tape, value: np.ndarray, op: str,
                 parents: tuple["Node", ...],
                 bwd: Callable[["Node", "Node"], list["Node | None"]] | None):
        self.tape = tape
        self.idx = len(tape.nodes)
        self.value = value
        self.op = op
        self.parents = parents
        self.bwd = bwd
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"<Node {self.idx} {self.op} {self.value.shape}>"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __sub__(self, other):
        return add(self, neg(other))


def record(tape: Tape, op: str, parents: Sequence[Node], value,
           bwd: Callable | None = None) -> Node:
    """Append a node; parents must already live on the same tape."""
    for p in parents:
        if p.tape is not tape or p.idx >= len(tape.nodes) or tape.nodes[p.idx] is not p:
            raise TapeError(f"input node {p!r} is not on this tape")
    return Node(tape, np.asarray(value, dtype=np.float64), op, tuple(parents), bwd)


def leaf(tape: Tape, value) -> Node:
    return record(tape, "leaf", (), value)


def constant(tape: Tape, value) -> Node:
    return record(tape, "const", (), value)


def _opaque(tape: Tape, value, op: str) -> Node:
    """First-order-only gradient value; differentiating it again raises."""
    def no_bwd(out, g):
        raise TapeError(f"second-order gradient unsupported through {op}")
    return record(tape, op, (), value, no_bwd)


# --- arithmetic -------------------------------------------------------------

def add(a: Node, b: Node) -> Node:
    if a.shape != b.shape:
        raise ShapeError(f"add shapes differ: {a.shape} vs {b.shape}")
    return record(a.tape, "add", (a, b), a.value + b.value,
                  lambda out, g: [g, g])


def neg(a: Node) -> Node:
    return record(a.tape, "neg", (a,), -a.value, lambda out, g: [neg(g)])


def mul(a: Node, b: Node) -> Node:
    if a.shape != b.shape:
        raise ShapeError(f"mul shapes differ: {a.shape} vs {b.shape}")
    return record(a.tape, "mul", (a, b), a.value * b.value,
                  lambda out, g: [mul(g, b), mul(g, a)])


def smul(a: Node, s: float) -> Node:
    s = float(s)
    return record(a.tape, "smul", (a,), a.value * s,
                  lambda out, g: [smul(g, s)])


def sadd(a: Node, s: float) -> Node:
    s = float(s)
    return record(a.tape, "sadd", (a,), a.value + s, lambda out, g: [g])


def badd(a: Node, b: Node) -> Node:
    """Broadcasting add; gradients are reduced back to each operand's shape."""
    val = a.value + b.value
    return record(a.tape, "badd", (a, b), val,
                  lambda out, g: [sum_to(g, a.shape), sum_to(g, b.shape)])


def bmul(a: Node, b: Node) -> Node:
    """Broadcasting multiply with gradient unbroadcast."""
    val = a.value * b.value
    return record(a.tape, "bmul", (a, b), val,
                  lambda out, g: [sum_to(bmul(g, b), a.shape),
                                  sum_to(bmul(g, a), b.shape)])


def sum_to(a: Node, shape: tuple) -> Node:
    """Sum over broadcast axes so the result has the requested shape."""
    shape = tuple(shape)
    if a.shape == shape:
        return a
    val = a.value
    if len(shape) < val.ndim:
        lead = tuple(range(val.ndim - len(shape)))
        val = val.sum(axis=lead)
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and val.shape[i] != 1)
    if axes:
        val = val.sum(axis=axes, keepdims=True)
    if val.shape != shape:
        raise ShapeError(f"cannot reduce {a.shape} to {shape}")
    return record(a.tape, "sum_to", (a,), val,
                  lambda out, g: [broadcast_to(g, a.shape)])


def broadcast_to(a: Node, shape: tuple) -> Node:
    shape = tuple(shape)
    if a.shape == shape:
        return a
    return record(a.tape, "broadcast", (a,),
                  np.broadcast_to(a.value, shape).copy(),
                  lambda out, g: [sum_to(g, a.shape)])


def reshape(a: Node, shape: tuple) -> Node:
    shape = tuple(shape)
    return record(a.tape, "reshape", (a,), a.value.reshape(shape),
                  lambda out, g: [reshape(g, a.shape)])


def sum_all(a: Node) -> Node:
    return record(a.tape, "sum", (a,), np.float64(a.value.sum()),
                  lambda out, g: [broadcast_to(reshape(g, (1,) * a.value.ndim), a.shape)])


def mean_all(a: Node) -> Node:
    return smul(sum_all(a), 1.0 / a.value.size)


def concat_cols(a: Node, b: Node) -> Node:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat_cols needs (n,*) pairs, got {a.shape}, {b.shape}")
    da = a.shape[1]
    return record(a.tape, "concat", (a, b),
                  np.concatenate([a.value, b.value], axis=1),
                  lambda out, g: [slice_cols(g, 0, da),
                                  slice_cols(g, da, da + b.shape[1])])


def slice_cols(a: Node, lo: int, hi: int) -> Node:
    def bwd(out, g):
        return [pad_cols(g, lo, a.shape[1])]
    return record(a.tape, "slice_cols", (a,), a.value[:, lo:hi].copy(), bwd)


def pad_cols(a: Node, lo: int, total: int) -> Node:
    def fwd():
        out = np.zeros((a.shape[0], total), dtype=np.float64)
        out[:, lo:lo + a.shape[1]] = a.value
        return out
    return record(a.tape, "pad_cols", (a,), fwd(),
                  lambda out, g: [slice_cols(g, lo, lo + a.shape[1])])


# --- nonlinearities ---------------------------------------------------------

def leaky_relu(a: Node, slope: float = 0.2) -> Node:
    mask = np.where(a.value >= 0.0, 1.0, slope)
    def bwd(out, g):
        return [bmul(g, constant(a.tape, mask))]
    return record(a.tape, "leaky_relu", (a,),
                  np.where(a.value >= 0.0, a.value, slope * a.value), bwd)


def tanh(a: Node) -> Node:
    def bwd(out, g):
        one = constant(a.tape, np.ones(out.shape))
        return [mul(g, add(one, neg(mul(out, out))))]
    return record(a.tape, "tanh", (a,), np.tanh(a.value), bwd)


def sin(a: Node) -> Node:
    return record(a.tape, "sin", (a,), np.sin(a.value),
                  lambda out, g: [mul(g, cos(a))])


def cos(a: Node) -> Node:
    return record(a.tape, "cos", (a,), np.cos(a.value),
                  lambda out, g: [neg(mul(g, sin(a)))])


def sqrt(a: Node) -> Node:
    def bwd(out, g):
        return [mul(g, smul(rsqrt(a), 0.5))]
    return record(a.tape, "sqrt", (a,), np.sqrt(a.value), bwd)


def rsqrt(a: Node) -> Node:
    """a ** -0.5 elementwise."""
    def bwd(out, g):
        return [smul(mul(g, mul(out, mul(out, out))), -0.5)]
    return record(a.tape, "rsqrt", (a,), 1.0 / np.sqrt(a.value), bwd)


def sigmoid(a: Node) -> Node:
    val = np.where(a.value >= 0,
                   1.0 / (1.0 + np.exp(-np.abs(a.value))),
                   np.exp(-np.abs(a.value)) / (1.0 + np.exp(-np.abs(a.value))))
    def bwd(out, g):
        one = constant(a.tape, np.ones(out.shape))
        return [mul(g, mul(out, add(one, neg(out))))]
    return record(a.tape, "sigmoid", (a,), val, bwd)


def softplus(a: Node) -> Node:
    """ln(1 + e^a), evaluated stably on both branches."""
    v = a.value
    val = np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v)))
    return record(a.tape, "softplus", (a,), val,
                  lambda out, g: [mul(g, sigmoid(a))])


# --- linear algebra ---------------------------------------------------------

def matmul(a: Node, b: Node) -> Node:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes incompatible: {a.shape} x {b.shape}")
    def bwd(out, g):
        return [matmul(g, transpose(b)), matmul(transpose(a), g)]
    return record(a.tape, "matmul", (a, b),
                  kernels.matmul(np.ascontiguousarray(a.value),
                                 np.ascontiguousarray(b.value)), bwd)


def transpose(a: Node) -> Node:
    return record(a.tape, "transpose", (a,),
                  np.ascontiguousarray(a.value.T),
                  lambda out, g: [transpose(g)])


# --- spatial ops ------------------------------------------------------------

def upsample2x(a: Node) -> Node:
    if a.value.ndim != 4:
        raise ShapeError(f"upsample2x needs rank 4, got {a.shape}")
    val = a.value.repeat(2, axis=2).repeat(2, axis=3)
    return record(a.tape, "upsample2x", (a,), val,
                  lambda out, g: [pool_sum2x(g)])


def pool_sum2x(a: Node) -> Node:
    n, c, h, w = a.shape
    if h % 2 or w % 2:
        raise ShapeError(f"pool_sum2x needs even spatial dims, got {a.shape}")
    r = a.value.reshape(n, c, h // 2, 2, w // 2, 2)
    val = ((r[:, :, :, 0, :, 0] + r[:, :, :, 0, :, 1])
           + r[:, :, :, 1, :, 0]) + r[:, :, :, 1, :, 1]
    return record(a.tape, "pool_sum2x", (a,), val,
                  lambda out, g: [upsample2x(g)])


def mean_pool2x(a: Node) -> Node:
    return smul(pool_sum2x(a), 0.25)


def conv2d(x: Node, w: Node) -> Node:
    """Stride-1 same-size convolution; w rank 4 shared or rank 5 per-sample."""
    if x.value.ndim != 4:
        raise ShapeError(f"conv2d input must be rank 4, got {x.shape}")
    if w.value.ndim not in (4, 5):
        raise ShapeError(f"conv2d weight must be rank 4 or 5, got {w.shape}")
    ci = w.shape[-3]
    if x.shape[1] != ci:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape[1]} vs kernel {ci}")
    if w.value.ndim == 5 and w.shape[0] != x.shape[0]:
        raise ShapeError(f"per-sample kernels need batch {x.shape[0]}, got {w.shape[0]}")
    k = w.shape[-1]
    per_sample = w.value.ndim == 5

    def bwd(out, g):
        gx = conv2d(g, kernel_swap_flip(w))
        gw = conv2d_wgrad(x, g, k, per_sample)
        return [gx, gw]

    return record(x.tape, "conv2d", (x, w),
                  kernels.conv2d_raw(x.value, w.value), bwd)


def kernel_swap_flip(w: Node) -> Node:
    return record(w.tape, "kswapflip", (w,), kernels.kernel_swap_flip(w.value),
                  lambda out, g: [kernel_swap_flip(g)])


def conv2d_wgrad(x: Node, g: Node, k: int, per_sample: bool) -> Node:
    def bwd(out, u):
        return [conv2d(g, kernel_swap_flip(u)), conv2d(x, u)]
    return record(x.tape, "conv2d_wgrad", (x, g),
                  kernels.conv2d_grad_w(x.value, g.value, k, per_sample), bwd)


def deform_conv2d_node(x: Node, w: Node, off: Node) -> Node:
    """Deformable convolution; first-order gradients only."""
    def bwd(out, g):
        gx_v, gw_v, goff_v = kernels.deform_conv2d_grads(
            x.value, w.value, off.value, g.value)
        t = x.tape
        return [mul_opaque(g, gx_v, t, "deform_gx"),
                mul_opaque(g, gw_v, t, "deform_gw"),
                mul_opaque(g, goff_v, t, "deform_goff")]
    return record(x.tape, "deform_conv2d", (x, w, off),
                  kernels.deform_conv2d_raw(x.value, w.value, off.value), bwd)


def mul_opaque(g: Node, value: np.ndarray, tape: Tape, op: str) -> Node:
    """Wrap a kernel-computed gradient; differentiating it again raises."""
    def no_bwd(out, gg):
        raise TapeError(f"second-order gradient unsupported through {op}")
    return record(tape, op, (g,), value, no_bwd)


def bilinear_probe(x: Node, b: int, c: int, qy: Node, qx: Node) -> Node:
    """Scalar bilinear sample of x[b, c] at fractional (qy, qx)."""
    xmap = x.value[b, c]
    h, w = xmap.shape
    qyv = float(qy.value)
    qxv = float(qx.value)
    val = kernels.bilinear_sample_point(xmap, qyv, qxv)

    def bwd(out, g):
        iy, ix = int(np.floor(qyv)), int(np.floor(qxv))
        fy, fx = qyv - iy, qxv - ix
        def at(r, cc):
            return float(xmap[r, cc]) if 0 <= r < h and 0 <= cc < w else 0.0
        gx = np.zeros_like(x.value)
        for (r, cc, wt) in ((iy, ix, (1 - fy) * (1 - fx)),
                            (iy, ix + 1, (1 - fy) * fx),
                            (iy + 1, ix, fy * (1 - fx)),
                            (iy + 1, ix + 1, fy * fx)):
            if 0 <= r < h and 0 <= cc < w:
                gx[b, c, r, cc] = wt
        dy = ((at(iy + 1, ix) - at(iy, ix)) * (1 - fx)
              + (at(iy + 1, ix + 1) - at(iy, ix + 1)) * fx)
        dx = ((at(iy, ix + 1) - at(iy, ix)) * (1 - fy)
              + (at(iy + 1, ix + 1) - at(iy + 1, ix)) * fy)
        t = x.tape
        return [mul_opaque(g, gx * g.value, t, "bilinear_gx"),
                mul_opaque(g, np.float64(dy * g.value), t, "bilinear_gqy"),
                mul_opaque(g, np.float64(dx * g.value), t, "bilinear_gqx")]

    return record(x.tape, "bilinear_probe", (x, qy, qx), np.float64(val), bwd)


# --- backward sweep ---------------------------------------------------------

def backward(loss: Node, leaves: Sequence[Node],
             create_graph: bool = False) -> dict[int, Node]:
    """Reverse sweep from a scalar loss; returns node-id -> gradient node.

    Backward arithmetic is recorded on the same tape, so the returned
    gradients are differentiable nodes (the `create_graph` flag is kept
    for call-site clarity; recording always happens).
    """
    if loss.value.ndim != 0:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss.tape
    for lf in leaves:
        if lf.tape is not tape:
            raise TapeError("leaf is not on the loss's tape")

    # restrict the sweep to ancestors of the loss
    needed = np.zeros(loss.idx + 1, dtype=bool)
    needed[loss.idx] = True
    for i in range(loss.idx, -1, -1):
        if needed[i]:
            for p in tape.nodes[i].parents:
                needed[p.idx] = True

    grads: dict[int, Node] = {loss.idx: constant(tape, np.float64(1.0))}
    for i in range(loss.idx, -1, -1):
        if not needed[i] or i not in grads:
            continue
        node = tape.nodes[i]
        if node.bwd is None or not node.parents:
            continue
        pgrads = node.bwd(node, grads[i])
        for p, pg in zip(node.parents, pgrads):
            if pg is None:
                continue
            if pg.shape != p.shape:
                raise TapeError(
                    f"backward of {node.op} produced shape {pg.shape} "
                    f"for parent of shape {p.shape}")
            if p.idx in grads:
                grads[p.idx] = add(grads[p.idx], pg)
            else:
                grads[p.idx] = pg

    out: dict[int, Node] = {}
    for lf in leaves:
        out[lf.idx] = grads.get(lf.idx) or constant(tape, np.zeros(lf.shape))
    return out


def grad_value(gmap: dict[int, Node], leaf_node: Node) -> np.ndarray:
    return gmap[leaf_node.idx].value


# --- verification oracle ----------------------------------------------------

def finite_diff_check(f: Callable[[list[Node]], Node],
                      point: Sequence[np.ndarray],
                      eps: float = 1e-5) -> float:
    """Max relative error between taped gradients of f and central differences.

    f receives freshly created leaves (one per input array) on a new tape
    and must return a scalar node.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    point = [np.asarray(p, dtype=np.float64) for p in point]

    tape = Tape()
    leaves = [leaf(tape, p) for p in point]
    loss = f(leaves)
    if not np.isfinite(loss.value):
        raise NumericError("function is non-finite at the test point")
    gmap = backward(loss, leaves, create_graph=False)
    analytic = [grad_value(gmap, lf) for lf in leaves]

    def eval_at(arrays: list[np.ndarray]) -> float:
        t = Tape()
        out = f([leaf(t, a) for a in arrays])
        v = float(out.value)
        if not np.isfinite(v):
            raise NumericError("function became non-finite during perturbation")
        return v

    worst = 0.0
    for ai, base in enumerate(point):
        flat = base.reshape(-1)
        for j in range(flat.size):
            bumped = [p.copy() for p in point]
            bumped[ai].reshape(-1)[j] = flat[j] + eps
            fp = eval_at(bumped)
            bumped[ai].reshape(-1)[j] = flat[j] - eps
            fm = eval_at(bumped)
            numeric = (fp - fm) / (2.0 * eps)
            a = float(analytic[ai].reshape(-1)[j])
            err = abs(a - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
