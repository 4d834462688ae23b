"""Minimal dense inference engine on numpy arrays.

Feature maps are ``(n, c, h, w)`` arrays. Every op computes in the dtype of its
input (float32 or float64) and casts weights to match.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np


class MissingWeightError(KeyError):
    pass


class WeightFileError(ValueError):
    """Corrupt ``PKW1`` file; the message carries the byte offset."""


def _float_dtype(x: np.ndarray):
    return x.dtype if x.dtype in (np.float32, np.float64) else np.dtype(np.float64)


def linear(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """``y = x @ W + b`` with ``x`` of shape (n, c_in) and ``W`` of shape (c_in, c_out)."""
    x = np.asarray(x)
    dt = _float_dtype(x)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ValueError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    y = x.astype(dt, copy=False) @ weight.astype(dt, copy=False)
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise ValueError(f"linear: bias shape {bias.shape} != ({weight.shape[1]},)")
        y += bias.astype(dt, copy=False)
    return y


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Zero-padded cross-correlation, weight layout ``(c_out, c_in, kh, kw)``.

    Accumulates one ``(c_out, c_in) @ (c_in, h*w)`` product per kernel tap, which
    keeps memory at one shifted copy of the input.
    """
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    if stride < 1 or padding < 0:
        raise ValueError("conv2d: stride must be >= 1 and padding >= 0")
    dt = _float_dtype(x)
    n, cin, h, w = x.shape
    cout, _, kh, kw = weight.shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: kernel {kh}x{kw} does not fit input {h}x{w} with padding {padding}")
    # tap-major contiguous copy; strided weight slices fall off the BLAS fast path
    wt = np.ascontiguousarray(weight.astype(dt, copy=False).transpose(2, 3, 0, 1))
    if padding:
        xp = np.zeros((n, cin, h + 2 * padding, w + 2 * padding), dtype=dt)
        xp[:, :, padding : padding + h, padding : padding + w] = x
    else:
        xp = x.astype(dt, copy=False)
    out = np.zeros((n, cout, ho * wo), dtype=dt)
    for b in range(n):
        if kh == 1 and kw == 1:
            cols = xp[b, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
            out[b] = wt[0, 0] @ cols.reshape(cin, -1)
            continue
        for i in range(kh):
            for j in range(kw):
                cols = xp[b, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]
                out[b] += wt[i, j] @ cols.reshape(cin, -1)
    out = out.reshape(n, cout, ho, wo)
    if bias is not None:
        out += bias.astype(dt, copy=False)[None, :, None, None]
    return out


def channel_max_pool(x: np.ndarray) -> np.ndarray:
    return x.max(axis=1, keepdims=True)


def channel_avg_pool(x: np.ndarray) -> np.ndarray:
    return x.mean(axis=1, keepdims=True)


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Logistic function, kept strictly inside (0, 1) in the working dtype.

    Large |x| would otherwise round to exactly 0 or 1 (|x| > ~17 in float32).
    """
    # split by sign to avoid overflow in exp
    x = np.asarray(x)
    dt = _float_dtype(x)
    out = np.empty_like(x, dtype=dt)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    fi = np.finfo(dt)
    return np.clip(out, fi.tiny, 1.0 - fi.epsneg, out=out)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def norm_affine(x: np.ndarray, scale: np.ndarray, shift: np.ndarray) -> np.ndarray:
    """Per-channel ``x * scale + shift``; channels on axis 1 (4D) or the last axis (2D)."""
    dt = _float_dtype(x)
    scale = scale.astype(dt, copy=False)
    shift = shift.astype(dt, copy=False)
    if x.ndim == 4:
        return x * scale[None, :, None, None] + shift[None, :, None, None]
    return x * scale + shift


def _source_coords(out_size: int, in_size: int) -> np.ndarray:
    # half-pixel centers
    return (np.arange(out_size) + 0.5) * (in_size / out_size) - 0.5


def resize(x: np.ndarray, out_h: int, out_w: int, mode: str = "bilinear") -> np.ndarray:
    """Resize the spatial dims with half-pixel alignment.

    ``nearest`` takes source index ``floor((i + 0.5) * in / out)``; ``bilinear``
    clamps source coordinates to the input range (edge replicate).
    """
    n, c, h, w = x.shape
    if (out_h, out_w) == (h, w):
        return x.copy()
    if mode == "nearest":
        sy = np.minimum(np.floor((np.arange(out_h) + 0.5) * h / out_h).astype(np.int64), h - 1)
        sx = np.minimum(np.floor((np.arange(out_w) + 0.5) * w / out_w).astype(np.int64), w - 1)
        return x[:, :, sy][:, :, :, sx]
    if mode != "bilinear":
        raise ValueError(f"unknown resize mode {mode!r}")
    dt = _float_dtype(x)
    fy = np.clip(_source_coords(out_h, h), 0, h - 1)
    fx = np.clip(_source_coords(out_w, w), 0, w - 1)
    y0 = np.floor(fy).astype(np.int64)
    x0 = np.floor(fx).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (fy - y0).astype(dt)[:, None]
    wx = (fx - x0).astype(dt)[None, :]
    rows0 = x[:, :, y0]
    rows1 = x[:, :, y1]
    top = rows0[:, :, :, x0] * (1 - wx) + rows0[:, :, :, x1] * wx
    bot = rows1[:, :, :, x0] * (1 - wx) + rows1[:, :, :, x1] * wx
    return (top * (1 - wy) + bot * wy).astype(dt, copy=False)


def upsample(x: np.ndarray, factor: int, mode: str = "bilinear") -> np.ndarray:
    if int(factor) != factor or factor < 1:
        raise ValueError("upsample factor must be an integer >= 1")
    if factor == 1:
        return x.copy()
    return resize(x, x.shape[2] * factor, x.shape[3] * factor, mode)


def concat_channels(xs) -> np.ndarray:
    xs = list(xs)
    if not xs:
        raise ValueError("concat_channels needs at least one input")
    ref = xs[0].shape
    for t in xs[1:]:
        if t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ValueError(f"concat_channels: shape {t.shape} incompatible with {ref}")
    return np.concatenate(xs, axis=1)


# ---------------------------------------------------------------------------
# weights
# ---------------------------------------------------------------------------


class WeightStore(dict):
    """Dotted name -> float32 array."""

    def get_weight(self, name: str) -> np.ndarray:
        try:
            return self[name]
        except KeyError:
            raise MissingWeightError(f"missing weight {name!r}") from None

    def subset(self, prefix: str) -> "WeightStore":
        return WeightStore({k: v for k, v in self.items() if k.startswith(prefix)})


MAGIC = b"PKW1"


def save_weights(store: dict, path) -> None:
    """``PKW1`` layout, all integers uint32 LE: magic, entry count, then per entry
    name length, UTF-8 name, rank, dims, float32 LE payload. Entries sorted by name."""
    parts = [MAGIC, struct.pack("<I", len(store))]
    for name in sorted(store):
        arr = np.asarray(store[name], dtype="<f4")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_weights(path) -> WeightStore:
    raw = Path(path).read_bytes()
    pos = 0

    def take(nbytes: int, what: str) -> bytes:
        nonlocal pos
        if pos + nbytes > len(raw):
            raise WeightFileError(f"{path}: truncated while reading {what} at byte {pos}")
        chunk = raw[pos : pos + nbytes]
        pos += nbytes
        return chunk

    if take(4, "magic") != MAGIC:
        raise WeightFileError(f"{path}: bad magic at byte 0 (expected PKW1)")
    (count,) = struct.unpack("<I", take(4, "entry count"))
    store = WeightStore()
    for _ in range(count):
        start = pos
        (nlen,) = struct.unpack("<I", take(4, "name length"))
        try:
            name = take(nlen, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise WeightFileError(f"{path}: undecodable name at byte {start + 4}") from None
        (rank,) = struct.unpack("<I", take(4, "rank"))
        if rank > 8:
            raise WeightFileError(f"{path}: implausible rank {rank} for {name!r} at byte {pos - 4}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        size = int(np.prod(dims)) if rank else 1
        payload = take(4 * size, f"payload of {name!r}")
        if name in store:
            raise WeightFileError(f"{path}: duplicate entry {name!r} at byte {start}")
        store[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    if pos != len(raw):
        raise WeightFileError(f"{path}: {len(raw) - pos} trailing bytes at byte {pos}")
    return store


def init_weights(shapes: dict, seed: int, overrides: dict | None = None) -> WeightStore:
    """Seeded init in sorted-name order.

    Tensors of rank >= 2 draw from ``U(-sqrt(6/fan_in), sqrt(6/fan_in))``, where
    ``fan_in`` is ``shape[0]`` for linear weights ``(c_in, c_out)`` and
    ``prod(shape[1:])`` for conv weights ``(c_out, c_in, kh, kw)``; ``*.scale`` starts at 1 and other rank-1
    tensors (biases, shifts) at 0 unless listed in ``overrides``.
    """
    from .scene import make_rng

    rng = make_rng(seed)
    overrides = overrides or {}
    store = WeightStore()
    for name in sorted(shapes):
        shape = tuple(int(s) for s in shapes[name])
        if name in overrides:
            store[name] = np.full(shape, overrides[name], dtype=np.float32)
        elif len(shape) >= 2:
            fan_in = shape[0] if len(shape) == 2 else int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            store[name] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        elif name.endswith(".scale"):
            store[name] = np.ones(shape, dtype=np.float32)
        else:
            store[name] = np.zeros(shape, dtype=np.float32)
    return store


# ---------------------------------------------------------------------------
# convolution block
# ---------------------------------------------------------------------------


def conv_block_shapes(prefix: str, cin: int, cout: int, kernel: int = 3) -> dict:
    return {
        f"{prefix}.conv.weight": (cout, cin, kernel, kernel),
        f"{prefix}.norm.scale": (cout,),
        f"{prefix}.norm.shift": (cout,),
    }


def conv_block(x: np.ndarray, weights, prefix: str, stride: int = 1) -> np.ndarray:
    """conv (no bias, padding k//2) -> per-channel affine norm -> ReLU."""
    wt = _w(weights, f"{prefix}.conv.weight")
    k = wt.shape[2]
    y = conv2d(x, wt, None, stride=stride, padding=k // 2)
    y = norm_affine(y, _w(weights, f"{prefix}.norm.scale"), _w(weights, f"{prefix}.norm.shift"))
    return relu(y)


def _w(weights, name: str) -> np.ndarray:
    try:
        return weights[name]
    except KeyError:
        raise MissingWeightError(f"missing weight {name!r}") from None
