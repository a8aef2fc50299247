"""Dense array engine with reverse-mode differentiation.

A ``Tensor`` wraps a row-major numpy array (float32 or float64) and records
the operations applied to it on a dynamic graph. ``backward`` walks that
graph once in reverse topological order and accumulates gradients into the
leaf tensors. The primitive set is deliberately small: exactly what a
bottleneck-fused attention segmentation model needs, each primitive with a
hand-written adjoint that is verified against central differences.

Convolution, pooling and upsampling delegate to :mod:`ctxseg.kernels`.
"""

from __future__ import annotations

import contextlib
import struct

import numpy as np

from . import kernels

_EPS_LOG = 1e-12  # floor inside log() of probability inputs


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested operation."""


class GraphError(RuntimeError):
    """Misuse of the recording/backward machinery."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (memory-fill / eval passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_dtype(dtype):
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise TypeError(f"tensor dtype must be float32 or float64, got {dt}")
    return dt


class Tensor:
    """Array node. Leaves created with ``requires_grad=True`` are parameters."""

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(_as_dtype(dtype), copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = np.asarray(arr, order="C")  # keeps 0-d scalars 0-d
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.parents = ()
        self.backward_fn = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    # light operator sugar used across the package
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def param(data, dtype=np.float32, name=None):
    """Leaf tensor marked as a trainable parameter."""
    return Tensor(data, requires_grad=True, dtype=dtype, name=name)


def constant(data, dtype=None):
    """Leaf tensor that never receives gradients (memory views, targets)."""
    return Tensor(data, requires_grad=False, dtype=dtype)


def _node(data, parents, backward_fn):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
    return out


def _check_same_dtype(op, a, b):
    if a.data.dtype != b.data.dtype:
        raise TypeError(f"{op}: mixed dtypes {a.data.dtype} vs {b.data.dtype}")


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    _check_same_dtype("matmul", a, b)

    def bwd(gy):
        return gy @ b.data.T, a.data.T @ gy

    return _node(a.data @ b.data, (a, b), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: {a.shape} vs {b.shape}")
    _check_same_dtype("add", a, b)

    def bwd(gy):
        return gy, gy

    return _node(a.data + b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}")
    _check_same_dtype("mul", a, b)

    def bwd(gy):
        return gy * b.data, gy * a.data

    return _node(a.data * b.data, (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)

    def bwd(gy):
        return (gy * c,)

    return _node(a.data * c, (a,), bwd)


def relu(a: Tensor) -> Tensor:
    def bwd(gy):
        return (gy * (a.data > 0),)

    return _node(np.maximum(a.data, 0), (a,), bwd)


def concat(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat: empty input list")
    ref = list(tensors[0].shape)
    for t in tensors[1:]:
        s = list(t.shape)
        if len(s) != len(ref) or any(s[i] != ref[i] for i in range(len(ref)) if i != axis):
            raise ShapeError(f"concat: ragged shapes {[tuple(x.shape) for x in tensors]} on axis {axis}")
        _check_same_dtype("concat", tensors[0], t)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(gy):
        slicer = [slice(None)] * gy.ndim
        outs = []
        for i in range(len(sizes)):
            slicer[axis] = slice(offsets[i], offsets[i + 1])
            outs.append(gy[tuple(slicer)])
        return tuple(outs)

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, bwd)


def softmax_lastdim(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(gy):
        dot = (gy * y).sum(axis=-1, keepdims=True)
        return (y * (gy - dot),)

    return _node(y, (a,), bwd)


def masked_fill(a: Tensor, mask, value: float) -> Tensor:
    m = np.asarray(mask)
    if m.shape != a.shape:
        raise ShapeError(f"masked_fill: mask {m.shape} vs data {a.shape}")
    keep = m != 0

    def bwd(gy):
        return (gy * keep,)

    return _node(np.where(keep, a.data, a.data.dtype.type(value)), (a,), bwd)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: x {x.shape}, w {w.shape} (want NCHW / OIHW)")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input channels {x.shape[1]} != kernel channels {w.shape[1]}")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d: bias {b.shape} vs out channels {w.shape[0]}")
    kh, kw = w.shape[2], w.shape[3]
    if (kh, kw) not in ((1, 1), (3, 3)):
        raise ShapeError(f"conv2d: unsupported kernel {kh}x{kw} (only 1x1 and 3x3)")
    if stride not in (1, 2):
        raise ShapeError(f"conv2d: unsupported stride {stride}")
    _check_same_dtype("conv2d", x, w)
    recording = _grad_enabled and (x.requires_grad or w.requires_grad or b.requires_grad)
    cache = {} if recording else None
    y = kernels.conv2d_forward(x.data, w.data, b.data, stride, pad, cache=cache)

    def bwd(gy):
        return kernels.conv2d_backward(
            x.data, w.data, stride, pad, np.ascontiguousarray(gy), cache=cache
        )

    return _node(y, (x, w, b), bwd)


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2."""
    if x.data.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"maxpool2d: {x.shape} not NCHW with even spatial dims")
    y, idx = kernels.maxpool2d_forward(x.data)

    def bwd(gy):
        return (kernels.maxpool2d_backward(x.shape, idx, np.ascontiguousarray(gy)),)

    return _node(y, (x,), bwd)


def adaptive_avgpool(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if x.data.ndim != 4 or x.shape[2] % out_h or x.shape[3] % out_w:
        raise ShapeError(f"adaptive_avgpool: {x.shape} not divisible into {out_h}x{out_w}")

    def bwd(gy):
        return (kernels.avgpool_backward(x.shape, out_h, out_w, np.ascontiguousarray(gy)),)

    return _node(kernels.avgpool_forward(x.data, out_h, out_w), (x,), bwd)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    if x.data.ndim != 4 or factor < 1:
        raise ShapeError(f"upsample_nearest: {x.shape} factor {factor}")

    def bwd(gy):
        return (kernels.upsample_backward(x.shape, factor, np.ascontiguousarray(gy)),)

    return _node(kernels.upsample_forward(x.data, factor), (x,), bwd)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"linear: x {x.shape}, w {w.shape}, b {b.shape}")
    _check_same_dtype("linear", x, w)

    def bwd(gy):
        return gy @ w.data.T, x.data.T @ gy, gy.sum(axis=0)

    return _node(x.data @ w.data + b.data, (x, w, b), bwd)


def broadcast_expand(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        np.broadcast_shapes(x.shape, shape)
    except ValueError as exc:
        raise ShapeError(f"broadcast_expand: {x.shape} -> {shape}") from exc
    pad = len(shape) - x.data.ndim
    if pad < 0:
        raise ShapeError(f"broadcast_expand: {x.shape} -> {shape}")
    summed_axes = tuple(range(pad)) + tuple(
        pad + i for i, s in enumerate(x.shape) if s == 1 and shape[pad + i] != 1
    )

    def bwd(gy):
        g = gy.sum(axis=summed_axes, keepdims=False) if summed_axes else gy
        return (g.reshape(x.shape),)

    return _node(np.ascontiguousarray(np.broadcast_to(x.data, shape)), (x,), bwd)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)

    def bwd(gy):
        return (gy.reshape(x.shape),)

    return _node(x.data.reshape(shape), (x,), bwd)


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose: {x.shape} not 2-D")

    def bwd(gy):
        return (gy.T,)

    return _node(x.data.T.copy(), (x,), bwd)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim < 1 or not (0 <= start <= stop <= x.shape[0]):
        raise ShapeError(f"slice_rows: [{start}:{stop}] of {x.shape}")

    def bwd(gy):
        g = np.zeros_like(x.data)
        g[start:stop] = gy
        return (g,)

    return _node(x.data[start:stop].copy(), (x,), bwd)


def tsum(x: Tensor) -> Tensor:
    def bwd(gy):
        return (np.full_like(x.data, gy),)

    return _node(x.data.sum(), (x,), bwd)


def cross_entropy_pixels(logits: Tensor, target_ids) -> Tensor:
    """Mean per-pixel cross entropy; ``logits`` NCHW, ``target_ids`` N,H,W ints."""
    t = np.asarray(target_ids).astype(np.intp, copy=False)
    if logits.data.ndim != 4 or t.shape != (logits.shape[0], logits.shape[2], logits.shape[3]):
        raise ShapeError(f"cross_entropy_pixels: logits {logits.shape}, targets {t.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n, _, h, w = logits.shape
    picked = np.take_along_axis(logp, t[:, None], axis=1)[:, 0]
    npix = n * h * w
    loss = -picked.sum() / npix

    def bwd(gy):
        p = np.exp(logp)
        np.put_along_axis(p, t[:, None], np.take_along_axis(p, t[:, None], axis=1) - 1.0, axis=1)
        return (p * (gy / npix),)

    return _node(np.asarray(loss, dtype=logits.dtype), (logits,), bwd)


def cross_entropy_dist(pred: Tensor, target: Tensor) -> Tensor:
    """Mean cross entropy between probability rows: -sum(target * log pred)."""
    if pred.shape != target.shape:
        raise ShapeError(f"cross_entropy_dist: {pred.shape} vs {target.shape}")
    p = pred.data.reshape(-1, pred.shape[-1])
    q = target.data.reshape(-1, target.shape[-1])
    rows = p.shape[0]
    logp = np.log(p + _EPS_LOG)
    loss = -(q * logp).sum() / rows

    def bwd(gy):
        gp = -(q / (p + _EPS_LOG)) * (gy / rows)
        gq = -logp * (gy / rows)
        return gp.reshape(pred.shape), gq.reshape(target.shape)

    return _node(np.asarray(loss, dtype=pred.dtype), (pred, target), bwd)


# ---------------------------------------------------------------------------
# string dispatcher
# ---------------------------------------------------------------------------

def apply(op_kind: str, inputs, attrs=None) -> Tensor:
    """Apply a primitive by name. ``attrs`` carries the non-tensor arguments."""
    attrs = attrs or {}
    ins = [x if isinstance(x, Tensor) else Tensor(x) for x in inputs]
    if op_kind == "matmul":
        return matmul(*ins)
    if op_kind == "add":
        return add(*ins)
    if op_kind == "mul":
        return mul(*ins)
    if op_kind == "scale":
        return scale(ins[0], attrs["value"])
    if op_kind == "relu":
        return relu(ins[0])
    if op_kind == "concat":
        return concat(ins, attrs["axis"])
    if op_kind == "softmax_lastdim":
        return softmax_lastdim(ins[0])
    if op_kind == "masked_fill":
        return masked_fill(ins[0], attrs["mask"], attrs.get("value", -1e30))
    if op_kind == "conv2d":
        return conv2d(*ins, stride=attrs.get("stride", 1), pad=attrs.get("pad", 0))
    if op_kind == "maxpool2d":
        return maxpool2d(ins[0])
    if op_kind == "adaptive_avgpool":
        return adaptive_avgpool(ins[0], attrs["out_h"], attrs["out_w"])
    if op_kind == "upsample_nearest":
        return upsample_nearest(ins[0], attrs["factor"])
    if op_kind == "linear":
        return linear(*ins)
    if op_kind == "broadcast_expand":
        return broadcast_expand(ins[0], attrs["shape"])
    if op_kind == "reshape":
        return reshape(ins[0], attrs["shape"])
    if op_kind == "transpose":
        return transpose(ins[0])
    if op_kind == "slice_rows":
        return slice_rows(ins[0], attrs["start"], attrs["stop"])
    if op_kind == "sum":
        return tsum(ins[0])
    if op_kind == "cross_entropy_pixels":
        return cross_entropy_pixels(ins[0], attrs["target_ids"])
    if op_kind == "cross_entropy_dist":
        return cross_entropy_dist(*ins)
    raise ValueError(f"unknown op_kind {op_kind!r}")


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _toposort(root: Tensor):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params=None):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    If ``params`` is given their ``.grad`` buffers are zero-initialized
    first, so parameters not reachable from ``loss`` end up with exact
    zero gradients.
    """
    if loss.data.shape != ():
        raise GraphError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    if params is not None:
        for p in params:
            p.zero_grad()
    grads = {id(loss): np.ones((), dtype=loss.dtype)}
    for node in reversed(_toposort(loss)):
        gy = grads.pop(id(node), None)
        if gy is None or not node.requires_grad:
            continue
        if node.backward_fn is None:  # leaf
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += gy
            continue
        for parent, g in zip(node.parents, node.backward_fn(gy)):
            if not parent.requires_grad or g is None:
                continue
            acc = grads.get(id(parent))
            # out-of-place accumulation: bwd closures may hand out views of
            # gy (concat) or the same array twice (add), so never mutate g
            grads[id(parent)] = g.astype(parent.dtype, copy=False) if acc is None else acc + g


# ---------------------------------------------------------------------------
# verification oracle
# ---------------------------------------------------------------------------

def grad_check(op_kind, inputs, attrs=None, eps: float = 1e-5, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``op_kind`` may be a primitive name or any callable mapping a list of
    tensors to one tensor. The output is contracted with a fixed random
    weighting to a scalar, so the full Jacobian is exercised.
    """
    rng = np.random.default_rng(seed)
    arrays = [np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64) for x in inputs]
    if callable(op_kind):
        fn = op_kind
    else:
        fn = lambda ts: apply(op_kind, ts, attrs)  # noqa: E731

    def run(arrs, want_grad):
        ts = [Tensor(a, requires_grad=want_grad) for a in arrs]
        out = fn(ts)
        if not hasattr(run, "w"):
            run.w = rng.standard_normal(out.shape)
        s = tsum(mul(out, constant(run.w))) if out.shape != () else mul(out, constant(np.array(1.0)))
        return s, ts

    s, ts = run(arrays, True)
    backward(s)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in ts]

    worst = 0.0
    for i, a in enumerate(arrays):
        flat = a.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            fp = run(arrays, False)[0].item()
            flat[j] = orig - eps
            fm = run(arrays, False)[0].item()
            flat[j] = orig
            numeric = (fp - fm) / (2 * eps)
            ana = analytic[i].reshape(-1)[j]
            err = abs(ana - numeric) / (abs(ana) + 1e-12)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def sgd_momentum_step(params, grads, velocities, lr: float, momentum: float):
    """One SGD step: v <- momentum*v + g; p <- p - lr*v. Mutates in place."""
    if not 0 <= momentum < 1 or lr <= 0:
        raise ValueError(f"sgd_momentum_step: lr={lr}, momentum={momentum}")
    for p, g, v in zip(params, grads, velocities, strict=True):
        if p.shape != g.shape or v.shape != g.shape:
            raise ShapeError(f"sgd_momentum_step: param {p.shape}, grad {g.shape}, velocity {v.shape}")
        v *= momentum
        v += g
        p -= lr * v


class SGD:
    """Momentum SGD over a list of parameter tensors; velocity persists."""

    def __init__(self, params, lr: float, momentum: float = 0.9):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocities = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr=None):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        sgd_momentum_step(
            [p.data for p in self.params], grads, self.velocities,
            self.lr if lr is None else lr, self.momentum,
        )

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


# ---------------------------------------------------------------------------
# parameter snapshots
# ---------------------------------------------------------------------------

_MAGIC_PARAMS = b"VVWT"


def save_params(path, named_params):
    """Write named parameter arrays: magic, version, count, then per entry
    name(u16 length + bytes), rank(u8), dims(u32 each), f32 little-endian data."""
    with open(path, "wb") as f:
        f.write(_MAGIC_PARAMS)
        f.write(struct.pack("<II", 1, len(named_params)))
        for name, arr in named_params:
            data = np.ascontiguousarray(arr, dtype="<f4")
            enc = name.encode("utf-8")
            f.write(struct.pack("<H", len(enc)))
            f.write(enc)
            f.write(struct.pack("<B", data.ndim))
            for d in data.shape:
                f.write(struct.pack("<I", d))
            f.write(data.tobytes())


def load_params(path):
    """Read a parameter snapshot back into an ordered {name: float32 array} dict."""
    with open(path, "rb") as f:
        if f.read(4) != _MAGIC_PARAMS:
            raise ValueError(f"{path}: not a parameter snapshot")
        version, count = struct.unpack("<II", f.read(8))
        if version != 1:
            raise ValueError(f"{path}: unsupported snapshot version {version}")
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<B", f.read(1))
            dims = struct.unpack(f"<{rank}I", f.read(4 * rank)) if rank else ()
            n = int(np.prod(dims)) if dims else 1
            out[name] = np.frombuffer(f.read(4 * n), dtype="<f4").reshape(dims).copy()
        return out
