"""Reverse-mode autodiff over dense numpy arrays, restricted to the layers the
water-mask network uses.

Every op returns a :class:`Tensor` that remembers its parents and a closure
mapping the output gradient to parent gradients. :func:`backward` walks the
graph in reverse topological order. Storage is float32 by default; any float
dtype works, which the gradient checks use to run in float64.
"""

from __future__ import annotations

import contextlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


class Tensor:
    """A node on the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, parents=(), backward=None, name=None):
        self.data = np.asarray(data)
        if self.data.dtype.kind != "f":
            self.data = self.data.astype(np.float32)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = tuple(parents)
        self._backward = backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording them on the tape."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def from_op(data, parents, backward) -> Tensor:
    """Wrap an op result; ``backward(g)`` must return one gradient (or None)
    per parent."""
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, parents=parents if needs else (),
                  backward=backward if needs else None)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every requires_grad tensor reachable from ``loss``."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    order, seen = [], set()
    stack = [(loss, False)]
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

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            pg = _flush_subnormal(np.asarray(pg, dtype=p.dtype).reshape(p.shape))
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg


def _flush_subnormal(g: np.ndarray) -> np.ndarray:
    # subnormal floats make BLAS kernels ~50x slower
    tiny = np.finfo(g.dtype).tiny
    small = np.abs(g) < tiny
    if small.any():
        g = np.where(small, 0, g).astype(g.dtype, copy=False)
    return g


# --- parameters ----------------------------------------------------------------

LAYER_KINDS = ("conv", "transposed_conv", "dense")


@dataclass
class LayerParams:
    kind: str
    weights: Tensor
    bias: Tensor
    constraint: str | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.constraint not in (None, "nonnegative"):
            raise ValueError(f"unknown constraint {self.constraint!r}")
        ndim = 2 if self.kind == "dense" else 4
        if self.weights.data.ndim != ndim:
            raise ShapeError(f"{self.kind} weights must be rank {ndim}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError("bias length must equal output channels")
        self.weights.requires_grad = True
        self.bias.requires_grad = True

    @classmethod
    def init(cls, kind, shape, rng, dtype=np.float32, constraint=None):
        """He-uniform weights, zero bias; nonnegative layers draw from (0, 0.1]."""
        if constraint == "nonnegative":
            w = 0.1 - rng.uniform(0.0, 0.1, size=shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            limit = math.sqrt(6.0 / fan_in)
            w = rng.uniform(-limit, limit, size=shape)
        return cls(
            kind,
            Tensor(w.astype(dtype), True),
            Tensor(np.zeros(shape[0], dtype=dtype), True),
            constraint,
        )

    def tensors(self):
        return (self.weights, self.bias)

    def project(self):
        if self.constraint == "nonnegative":
            np.maximum(self.weights.data, 0, out=self.weights.data)


# --- layer ops -------------------------------------------------------------------


def _check_rank4(x: Tensor, what: str):
    if x.data.ndim != 4:
        raise ShapeError(f"{what} expects (batch, channels, height, width), got {x.shape}")


def conv2d(x: Tensor, params: LayerParams) -> Tensor:
    """Stride-1 convolution with zero "same" padding (odd square kernels)."""
    _check_rank4(x, "conv2d")
    w, b = params.weights, params.bias
    out_ch, in_ch, kh, kw = w.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeError("conv2d needs an odd square kernel")
    n, c, h, wd = x.shape
    if c != in_ch:
        raise ShapeError(f"conv2d channel mismatch: input {c}, kernel {in_ch}")
    p = kh // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    # cols: (n*h*w, c*kh*kw)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * wd, c * kh * kw)
    wmat = w.data.reshape(out_ch, -1)
    out = cols @ wmat.T + b.data
    out = out.reshape(n, h, wd, out_ch).transpose(0, 3, 1, 2)

    def _backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, out_ch)
        gw = (g2.T @ cols).reshape(w.shape) if w.requires_grad else None
        gb = g.sum(axis=(0, 2, 3), dtype=np.float64)
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, h, wd, c, kh, kw)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + h, j:j + wd] += dcols[..., i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, p:p + h, p:p + wd] if p else gxp
        return gx, gw, gb

    return from_op(np.ascontiguousarray(out), (x, w, b), _backward)


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling, stride 2."""
    _check_rank4(x, "avg_pool2")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2 needs even spatial dims, got {h}x{w}")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def _backward(g):
        g4 = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3)
        return (g4 * 0.25,)

    return from_op(out.astype(x.dtype), (x,), _backward)


def _upsample_raw(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    n, c, h, wd = x.shape
    out_ch, _, kh, kw = w.shape
    y = np.tensordot(x, w, axes=([1], [1]))  # (n, h, w, out_ch, kh, kw)
    raw = np.zeros((n, out_ch, 2 * h + kh - 2, 2 * wd + kw - 2), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            raw[:, :, i:i + 2 * h:2, j:j + 2 * wd:2] += y[..., i, j].transpose(0, 3, 1, 2)
    return raw


def transposed_conv2(x: Tensor, params: LayerParams) -> Tensor:
    """Stride-2 4x4 transposed convolution producing exactly 2x the input size.

    The raw scatter result is (2h+2, 2w+2); one row/column is cropped from
    each side.
    """
    _check_rank4(x, "transposed_conv2")
    w, b = params.weights, params.bias
    out_ch, in_ch, kh, kw = w.shape
    if (kh, kw) != (4, 4):
        raise ShapeError("transposed_conv2 needs a 4x4 kernel")
    n, c, h, wd = x.shape
    if c != in_ch:
        raise ShapeError(f"transposed_conv2 channel mismatch: input {c}, kernel {in_ch}")
    raw = _upsample_raw(x.data, w.data)
    out = raw[:, :, 1:1 + 2 * h, 1:1 + 2 * wd] + b.data[None, :, None, None]

    def _backward(g):
        graw = np.pad(g, ((0, 0), (0, 0), (1, 1), (1, 1)))
        dy = np.empty((n, h, wd, out_ch, kh, kw), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                dy[..., i, j] = graw[:, :, i:i + 2 * h:2, j:j + 2 * wd:2].transpose(0, 2, 3, 1)
        gx = np.tensordot(dy, w.data, axes=([3, 4, 5], [0, 2, 3])).transpose(0, 3, 1, 2)
        gw = np.tensordot(x.data, dy, axes=([0, 2, 3], [0, 1, 2])).transpose(1, 0, 2, 3)
        gb = g.sum(axis=(0, 2, 3), dtype=np.float64)
        return gx, gw, gb

    return from_op(np.ascontiguousarray(out), (x, w, b), _backward)


def elementwise(x: Tensor, fn: str) -> Tensor:
    if fn == "relu":
        mask = x.data > 0
        out = np.where(mask, x.data, 0).astype(x.dtype)
        return from_op(out, (x,), lambda g: (g * mask,))
    if fn == "sigmoid":
        out = _sigmoid(x.data)
        return from_op(out, (x,), lambda g: (g * out * (1 - out),))
    raise ValueError(f"unknown activation {fn!r}")


def relu(x: Tensor) -> Tensor:
    return elementwise(x, "relu")


def sigmoid(x: Tensor) -> Tensor:
    return elementwise(x, "sigmoid")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    # float32 rounds sigmoid(+-17) to exactly 0 or 1
    tiny = np.finfo(z.dtype).tiny
    return np.clip(out, tiny, np.nextafter(z.dtype.type(1), z.dtype.type(0)))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add needs identical shapes, got {a.shape} and {b.shape}")
    return from_op(a.data + b.data, (a, b), lambda g: (g, g))


def global_sum_pool(x: Tensor) -> Tensor:
    """Sum a single-channel map over all pixels: (n, 1, h, w) -> (n, 1)."""
    _check_rank4(x, "global_sum_pool")
    if x.shape[1] != 1:
        raise ShapeError(f"global_sum_pool needs one channel, got {x.shape[1]}")
    out = x.data.sum(axis=(2, 3), dtype=np.float64)

    def _backward(g):
        return (np.broadcast_to(g[:, :, None, None], x.shape),)

    return from_op(out, (x,), _backward)


def dense(x: Tensor, params: LayerParams) -> Tensor:
    """``x @ W.T + b`` for x of shape (batch, in)."""
    w, b = params.weights, params.bias
    if x.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"dense expects (batch, {w.shape[1]}), got {x.shape}")
    out = x.data @ w.data.T.astype(x.dtype) + b.data

    def _backward(g):
        return g @ w.data, g.T @ x.data, g.sum(axis=0)

    return from_op(out, (x, w, b), _backward)


# --- optimizer -------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: list[LayerParams], state: AdamState) -> None:
    """One bias-corrected Adam update, then constraint projection; grads are zeroed."""
    tensors = [t for p in params for t in p.tensors()]
    for t in tensors:
        if t.grad is None:
            raise ValueError("adam_step: a parameter has no gradient; run backward first")
    if not state.m:
        state.m = [np.zeros(t.shape, dtype=np.float64) for t in tensors]
        state.v = [np.zeros(t.shape, dtype=np.float64) for t in tensors]
    if len(state.m) != len(tensors):
        raise ValueError("AdamState does not match the parameter list")
    state.step_count += 1
    k = state.step_count
    c1 = 1.0 - state.beta1**k
    c2 = 1.0 - state.beta2**k
    for t, m, v in zip(tensors, state.m, state.v):
        g = t.grad.astype(np.float64)
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        t.data -= update.astype(t.dtype)
        t.grad = None
    for p in params:
        p.project()


def zero_grads(params: list[LayerParams]) -> None:
    for p in params:
        for t in p.tensors():
            t.grad = None


# --- checkpoint files ---------------------------------------------------------------

CHECKPOINT_FORMAT = "hydrocorr-checkpoint"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, layers: dict[str, LayerParams], adam: AdamState | None = None,
                    extra: dict | None = None) -> None:
    """Write ``<stem>.json`` (manifest) and ``<stem>.bin`` (raw blobs).

    Parameters are stored as little-endian float32; Adam moments as float64.
    """
    stem = Path(path)
    if stem.suffix in (".json", ".bin"):
        stem = stem.with_suffix("")
    blobs, offset = [], 0

    def put(arr, dtype):
        nonlocal offset
        raw = np.ascontiguousarray(arr, dtype=np.dtype(dtype).newbyteorder("<")).tobytes()
        entry = {"shape": list(arr.shape), "dtype": dtype, "offset_bytes": offset}
        blobs.append(raw)
        offset += len(raw)
        return entry

    manifest_layers = []
    for name, lp in layers.items():
        manifest_layers.append({
            "name": name,
            "kind": lp.kind,
            "constraint": lp.constraint,
            "weights": put(lp.weights.data, "f4"),
            "bias": put(lp.bias.data, "f4"),
        })
    manifest = {"format": CHECKPOINT_FORMAT, "version": 1, "layers": manifest_layers}
    if adam is not None:
        manifest["adam"] = {
            "lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps,
            "step_count": adam.step_count,
            "m": [put(a, "f8") for a in adam.m],
            "v": [put(a, "f8") for a in adam.v],
        }
    manifest["extra"] = extra or {}
    stem.parent.mkdir(parents=True, exist_ok=True)
    stem.with_suffix(".bin").write_bytes(b"".join(blobs))
    stem.with_suffix(".json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_checkpoint(path, dtype=np.float32):
    """Inverse of :func:`save_checkpoint`; returns ``(layers, adam, extra)``."""
    stem = Path(path)
    if stem.suffix in (".json", ".bin"):
        stem = stem.with_suffix("")
    try:
        manifest = json.loads(stem.with_suffix(".json").read_text())
        payload = stem.with_suffix(".bin").read_bytes()
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {stem}: {exc}") from exc
    if not isinstance(manifest, dict) or manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{stem}.json is not a checkpoint manifest")

    def get(entry):
        try:
            dt_ = np.dtype(entry["dtype"]).newbyteorder("<")
            shape = tuple(int(s) for s in entry["shape"])
            count = int(np.prod(shape))
            off = int(entry["offset_bytes"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"bad blob entry: {exc}") from exc
        if off < 0 or off + count * dt_.itemsize > len(payload):
            raise CheckpointError("blob extends past end of payload")
        return np.frombuffer(payload, dtype=dt_, count=count, offset=off).reshape(shape)

    layers = {}
    try:
        for entry in manifest["layers"]:
            layers[entry["name"]] = LayerParams(
                entry["kind"],
                Tensor(get(entry["weights"]).astype(dtype), True),
                Tensor(get(entry["bias"]).astype(dtype), True),
                entry.get("constraint"),
            )
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"bad layer entry: {exc}") from exc
    adam = None
    if "adam" in manifest:
        a = manifest["adam"]
        adam = AdamState(a["lr"], a["beta1"], a["beta2"], a["eps"], int(a["step_count"]),
                         [get(e).copy() for e in a["m"]], [get(e).copy() for e in a["v"]])
    return layers, adam, manifest.get("extra", {})
