"""A small reverse-mode autodiff engine over NumPy arrays.

Only the operations the region ensemble network needs are provided. Each op
builds its output with :func:`_node`, attaching a closure that maps the output
gradient to input gradients; :meth:`Tensor.backward` replays those closures in
reverse topological order.
"""
from __future__ import annotations

import contextlib

import numpy as np

from renet import kernels

__all__ = [
    "GraphError",
    "RngStream",
    "ShapeError",
    "Tensor",
    "add",
    "average",
    "concat",
    "conv2d",
    "default_dtype",
    "dropout",
    "float64_mode",
    "flatten",
    "grad_check",
    "linear",
    "maxpool2d",
    "mul",
    "no_grad",
    "relu",
    "slice_region",
    "tensor_sum",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for an operation."""


class GraphError(RuntimeError):
    """Misuse of the computation graph (non-scalar loss, double backward...)."""


_state = {"dtype": np.float32, "grad": True}


def default_dtype():
    return _state["dtype"]


@contextlib.contextmanager
def float64_mode():
    """Create new tensors as 64-bit floats inside the block (gradient checks)."""
    prev = _state["dtype"]
    _state["dtype"] = np.float64
    try:
        yield
    finally:
        _state["dtype"] = prev


@contextlib.contextmanager
def no_grad():
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


class RngStream:
    """Counter-based random stream.

    Each draw call uses a fresh Philox generator keyed by ``seed`` with the call
    index in the high counter word, so ``(seed, counter)`` fully determines the
    next draw regardless of what ran before or on which thread.
    """

    def __init__(self, seed, counter=0):
        if seed < 0:
            raise ValueError("seed must be non-negative")
        self.seed = int(seed)
        self.counter = int(counter)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, counter={self.counter})"

    def generator(self):
        bitgen = np.random.Philox(key=self.seed, counter=[0, 0, 0, self.counter])
        self.counter += 1
        return np.random.Generator(bitgen)

    def spawn(self, *keys):
        """Independent child stream derived from this seed and integer keys."""
        state = np.random.SeedSequence([self.seed, *[int(k) for k in keys]]).generate_state(2, np.uint64)
        return RngStream(int(state[0]) << 64 | int(state[1]))

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator().uniform(low, high, size)

    def normal(self, scale, size, dtype=np.float32):
        out = self.generator().standard_normal(size, dtype=dtype)
        out *= out.dtype.type(scale)
        return out

    def permutation(self, n):
        return self.generator().permutation(n)


class Tensor:
    """N-d array (rank <= 4) with an optional gradient buffer."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype or _state["dtype"])
        if arr.ndim > 4:
            raise ShapeError(f"rank {arr.ndim} exceeds the supported maximum of 4")
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._parents = ()
        self._backward = None
        self._done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    __radd__ = __add__
    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, Tensor(-1.0, dtype=self.dtype))

    def __sub__(self, other):
        return add(self, -_as_tensor(other, self.dtype))

    def sum(self):
        return tensor_sum(self)

    def backward(self):
        """Accumulate d(self)/d(t) into ``t.grad`` for every reachable leaf."""
        if self.data.size != 1:
            raise GraphError(f"backward needs a scalar loss, got shape {self.shape}")
        if self._done:
            raise GraphError("backward already ran on this graph; rebuild it first")
        if not self.requires_grad:
            raise GraphError("loss does not depend on any tensor requiring grad")

        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
                continue
            node.grad = g
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg
            node._backward = None
            node._done = True
        self._done = True


def _as_tensor(x, dtype):
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _node(data, parents, backward):
    out = Tensor.__new__(Tensor)
    out.data = data
    out._done = False
    track = _state["grad"] and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out.grad = None
    out._parents = tuple(parents) if track else ()
    out._backward = backward if track else None
    return out


def _require(cond, msg):
    if not cond:
        raise ShapeError(msg)


def add(a, b):
    _require(a.shape == b.shape, f"add: shape mismatch {a.shape} vs {b.shape}")
    return _node(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a, b):
    """Elementwise product; ``b`` may be a scalar tensor."""
    _require(b.ndim == 0 or a.shape == b.shape, f"mul: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        gb = g * ad
        return g * bd, (gb.sum() if bd.ndim == 0 else gb)

    return _node(ad * bd, (a, b), backward)


def tensor_sum(x):
    shape = x.shape
    return _node(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                 lambda g: (np.broadcast_to(g, shape).copy(),))


def flatten(x):
    """Collapse all but the batch axis."""
    shape = x.shape
    return _node(x.data.reshape(shape[0], -1), (x,), lambda g: (g.reshape(shape),))


def relu(x):
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def linear(x, weight, bias):
    """``x @ weight.T + bias`` with ``x`` of shape (batch, D), weight (O, D)."""
    _require(x.ndim == 2, f"linear: input must be batch x D, got rank {x.ndim}")
    _require(weight.ndim == 2, f"linear: weight must be O x D, got rank {weight.ndim}")
    _require(x.shape[1] == weight.shape[1],
             f"linear: input dimension D={x.shape[1]} does not match weight D={weight.shape[1]}")
    _require(bias.shape == (weight.shape[0],),
             f"linear: bias length {bias.shape} does not match output dimension {weight.shape[0]}")
    xd, wd = x.data, weight.data

    def backward(g):
        return g @ wd, g.T @ xd, g.sum(axis=0)

    return _node(xd @ wd.T + bias.data, (x, weight, bias), backward)


def conv2d(x, weight, bias, stride=1, pad=0):
    """Direct 2D cross-correlation of NCHW input with OIHW weights."""
    _require(x.ndim == 4, f"conv2d: input must be N x C x H x W, got rank {x.ndim}")
    _require(weight.ndim == 4, f"conv2d: weight must be outC x inC x kH x kW, got rank {weight.ndim}")
    n, c, h, w = x.shape
    oc, ic, kh, kw = weight.shape
    _require(c == ic, f"conv2d: input channels C={c} do not match weight inC={ic}")
    _require(bias.shape == (oc,), f"conv2d: bias length {bias.shape} does not match outC={oc}")
    if stride < 1 or pad < 0:
        raise ValueError(f"conv2d: need stride >= 1 and pad >= 0, got stride={stride} pad={pad}")
    _require(h + 2 * pad >= kh, f"conv2d: kernel height kH={kh} exceeds padded input height {h + 2 * pad}")
    _require(w + 2 * pad >= kw, f"conv2d: kernel width kW={kw} exceeds padded input width {w + 2 * pad}")
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1

    cols = kernels.im2col(x.data, kh, kw, stride, pad)
    wmat = weight.data.reshape(oc, -1)
    out = wmat @ cols
    out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(oc, n, oh, ow).transpose(1, 0, 2, 3))

    def backward(g):
        gmat = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(oc, -1)
        gw = (gmat @ cols.T).reshape(weight.shape)
        gx = kernels.col2im(np.ascontiguousarray(wmat.T @ gmat), n, c, h, w, kh, kw, stride, pad)
        return gx, gw, gmat.sum(axis=1)

    return _node(out, (x, weight, bias), backward)


def maxpool2d(x, k=2, stride=2):
    _require(x.ndim == 4, f"maxpool2d: input must be N x C x H x W, got rank {x.ndim}")
    n, c, h, w = x.shape
    if k < 1 or stride < 1:
        raise ValueError(f"maxpool2d: need k >= 1 and stride >= 1, got k={k} stride={stride}")
    _require(k <= h and k <= w, f"maxpool2d: window {k}x{k} exceeds input {h}x{w}")
    out, idx = kernels.maxpool_forward(x.data, k, stride)
    return _node(out, (x,), lambda g: (kernels.maxpool_backward(np.ascontiguousarray(g), idx, h, w),))


def dropout(x, rate, training, rng=None):
    """Inverted dropout: survivors are scaled by 1/(1-rate) at training time."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an RngStream")
    keep = rng.generator().random(x.shape) >= rate
    mask = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - rate))
    return _node(x.data * mask, (x,), lambda g: (g * mask,))


def concat(inputs, axis=1):
    inputs = list(inputs)
    _require(len(inputs) > 0, "concat: empty input list")
    if len(inputs) == 1:
        return inputs[0]
    ref = inputs[0].shape
    for t in inputs[1:]:
        _require(t.ndim == len(ref), f"concat: rank mismatch {t.shape} vs {ref}")
        for ax, (a, b) in enumerate(zip(ref, t.shape)):
            _require(ax == axis or a == b, f"concat: size mismatch on axis {ax}: {a} vs {b}")
    bounds = np.cumsum([t.shape[axis] for t in inputs])[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, bounds, axis=axis))

    return _node(np.concatenate([t.data for t in inputs], axis=axis), inputs, backward)


def slice_region(x, row, col, h, w):
    """Copy of the spatial window ``[row:row+h, col:col+w]`` of an NCHW tensor."""
    _require(x.ndim == 4, f"slice_region: input must be N x C x H x W, got rank {x.ndim}")
    H, W = x.shape[2:]
    if row < 0 or col < 0 or h < 1 or w < 1 or row + h > H or col + w > W:
        raise ShapeError(f"slice_region: window rows {row}..{row + h - 1}, cols {col}..{col + w - 1} "
                         f"outside feature map {H}x{W}")
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[:, :, row:row + h, col:col + w] = g
        return (gx,)

    return _node(np.ascontiguousarray(x.data[:, :, row:row + h, col:col + w]), (x,), backward)


def average(inputs):
    """Elementwise mean of equally shaped tensors."""
    inputs = list(inputs)
    _require(len(inputs) > 0, "average: empty input list")
    if len(inputs) == 1:
        return inputs[0]
    for t in inputs[1:]:
        _require(t.shape == inputs[0].shape, f"average: shape mismatch {t.shape} vs {inputs[0].shape}")
    k = len(inputs)
    acc = np.stack([t.data for t in inputs]).astype(np.float64).sum(axis=0) / k
    out = acc.astype(inputs[0].dtype)
    scale = inputs[0].dtype.type(1.0 / k)
    return _node(out, inputs, lambda g: tuple(g * scale for _ in inputs))


def grad_check(f, inputs, eps=1e-5):
    """Max relative error between analytic and central-difference gradients.

    ``f(*inputs)`` must return a scalar tensor. The error for each entry is
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    """
    for t in inputs:
        t.requires_grad = True
        t.grad = np.zeros_like(t.data)
    loss = f(*inputs)
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("grad_check: loss is not finite")
    loss.backward()
    worst = 0.0
    with no_grad():
        for t in inputs:
            analytic = t.grad.copy()
            if not np.isfinite(analytic).all():
                raise FloatingPointError("grad_check: analytic gradient is not finite")
            flat = t.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                up = float(f(*inputs).data)
                flat[i] = orig - eps
                down = float(f(*inputs).data)
                flat[i] = orig
                if not (np.isfinite(up) and np.isfinite(down)):
                    raise FloatingPointError("grad_check: perturbed loss is not finite")
                numeric = (up - down) / (2 * eps)
                a = float(analytic.reshape(-1)[i])
                err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
                worst = max(worst, err)
    return worst
