"""Dense NCHW tensor kernels: layout transforms and spatially invariant convolution.

Tensors are plain contiguous numpy arrays in row-major N,C,H,W order,
float32 unless a caller deliberately runs the float64 shadow path used by
gradient checking.  All functions are pure; inputs are never mutated.

Convolution uses the cross-correlation orientation common to CNN code and
keeps the spatial size of its input (same-padding).  Border policy is
"zero" by default with "replicate" available for imaging tasks.  Even
support sizes are rejected outright.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DimensionError, NumericError, UnsupportedKernelError

PAD_POLICIES = ("zero", "replicate")


def as_tensor(data, dtype=np.float32) -> np.ndarray:
    """Coerce nested lists / arrays to a contiguous float array."""
    return np.ascontiguousarray(np.asarray(data, dtype=dtype))


def _check_nchw(x: np.ndarray, name: str = "x") -> np.ndarray:
    if x.ndim != 4:
        raise DimensionError(f"{name} must be 4-D (N,C,H,W), got shape {x.shape}")
    return x


def _check_pad(pad: str) -> str:
    if pad not in PAD_POLICIES:
        raise UnsupportedKernelError(f"unknown border policy {pad!r}; expected one of {PAD_POLICIES}")
    return pad


def _check_support(k: int) -> int:
    k = int(k)
    if k < 1 or k % 2 == 0:
        raise UnsupportedKernelError(f"support size must be odd and >= 1, got {k}")
    return k


def pad2d(x: np.ndarray, margin: int, pad: str = "zero") -> np.ndarray:
    """Pad the two trailing spatial axes by `margin` on each side."""
    _check_nchw(x)
    _check_pad(pad)
    if margin == 0:
        return x
    widths = [(0, 0), (0, 0), (margin, margin), (margin, margin)]
    mode = "constant" if pad == "zero" else "edge"
    return np.pad(x, widths, mode=mode)


def im2col(x: np.ndarray, k: int, pad: str = "zero") -> np.ndarray:
    """Extract every k x k patch of x into the rows of a matrix.

    Row r = (n*H + i)*W + j holds the patch centered at pixel (i, j) of
    batch item n, flattened in C,ky,kx order, so that a convolution is a
    single matrix product with the flattened kernel.
    """
    x = _check_nchw(x)
    k = _check_support(k)
    n, c, h, w = x.shape
    m = k // 2
    img = pad2d(x, m, pad)
    # patches[n, c, ky, kx, i, j] = img[n, c, i+ky, j+kx]
    patches = np.empty((n, c, k, k, h, w), dtype=x.dtype)
    for ky in range(k):
        for kx in range(k):
            patches[:, :, ky, kx, :, :] = img[:, :, ky:ky + h, kx:kx + w]
    cols = patches.transpose(0, 4, 5, 1, 2, 3).reshape(n * h * w, c * k * k)
    return np.ascontiguousarray(cols)


def col2im(cols: np.ndarray, out_shape, k: int, pad: str = "zero") -> np.ndarray:
    """Scatter-add patch rows back into an image; the exact adjoint of im2col."""
    k = _check_support(k)
    _check_pad(pad)
    n, c, h, w = (int(v) for v in out_shape)
    if cols.ndim != 2 or cols.shape[0] != n * h * w or cols.shape[1] != c * k * k:
        raise DimensionError(
            f"cols shape {cols.shape} inconsistent with output {(n, c, h, w)} and support {k}"
        )
    m = k // 2
    patches = cols.reshape(n, h, w, c, k, k).transpose(0, 3, 4, 5, 1, 2)
    buf = np.zeros((n, c, h + 2 * m, w + 2 * m), dtype=cols.dtype)
    for ky in range(k):
        for kx in range(k):
            buf[:, :, ky:ky + h, kx:kx + w] += patches[:, :, ky, kx, :, :]
    if pad == "zero" or m == 0:
        return np.ascontiguousarray(buf[:, :, m:m + h, m:m + w])
    # Replicate padding copies edge pixels outward, so its adjoint folds the
    # pad margins back onto the nearest edge row/column (rows first, then
    # columns, which also routes the corners correctly).
    buf[:, :, m, :] += buf[:, :, :m, :].sum(axis=2)
    buf[:, :, m + h - 1, :] += buf[:, :, m + h:, :].sum(axis=2)
    core = buf[:, :, m:m + h, :]
    core[:, :, :, m] += core[:, :, :, :m].sum(axis=3)
    core[:, :, :, m + w - 1] += core[:, :, :, m + w:].sum(axis=3)
    return np.ascontiguousarray(core[:, :, :, m:m + w])


def conv2d(x: np.ndarray, weight: np.ndarray, pad: str = "zero") -> np.ndarray:
    """Spatially invariant convolution: one kernel applied at every pixel.

    x: [N, Cin, H, W]; weight: [Cout, Cin, k, k]; output [N, Cout, H, W].
    """
    x = _check_nchw(x)
    if weight.ndim != 4:
        raise DimensionError(f"weight must be 4-D (Cout,Cin,k,k), got shape {weight.shape}")
    cout, cin, kh, kw = weight.shape
    if kh != kw:
        raise UnsupportedKernelError(f"kernel must be square, got {kh}x{kw}")
    k = _check_support(kh)
    if cin != x.shape[1]:
        raise DimensionError(f"input has {x.shape[1]} channels but weight expects {cin}")
    if not np.all(np.isfinite(weight)):
        raise NumericError("weight contains non-finite values")
    n, _, h, w = x.shape
    cols = im2col(x, k, pad)
    wf = weight.reshape(cout, cin * k * k)
    y = cols @ wf.T
    return np.ascontiguousarray(y.reshape(n, h, w, cout).transpose(0, 3, 1, 2))


def depth_to_space(x: np.ndarray, r: int) -> np.ndarray:
    """Rearrange r*r channel groups into an r-times upscaled spatial grid."""
    x = _check_nchw(x)
    r = int(r)
    n, c, h, w = x.shape
    if r < 1 or c % (r * r) != 0:
        raise DimensionError(f"channel count {c} not divisible by r^2 = {r * r}")
    cout = c // (r * r)
    y = x.reshape(n, cout, r, r, h, w).transpose(0, 1, 4, 2, 5, 3)
    return np.ascontiguousarray(y.reshape(n, cout, h * r, w * r))


def space_to_depth(x: np.ndarray, r: int) -> np.ndarray:
    """Exact inverse of depth_to_space."""
    x = _check_nchw(x)
    r = int(r)
    n, c, h, w = x.shape
    if r < 1 or h % r != 0 or w % r != 0:
        raise DimensionError(f"spatial size {h}x{w} not divisible by r = {r}")
    y = x.reshape(n, c, h // r, r, w // r, r).transpose(0, 1, 3, 5, 2, 4)
    return np.ascontiguousarray(y.reshape(n, c * r * r, h // r, w // r))


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Plain 2-D matrix product with an explicit inner-extent check."""
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner extents differ: {a.shape} x {b.shape}")
    return a @ b


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"operand shapes differ: {a.shape} vs {b.shape}")


def add(a, b):
    _check_same_shape(a, b)
    return a + b


def sub(a, b):
    _check_same_shape(a, b)
    return a - b


def mul(a, b):
    _check_same_shape(a, b)
    return a * b


def scale(a, s):
    return a * a.dtype.type(s)


def relu(a):
    return np.maximum(a, a.dtype.type(0))


def absolute(a):
    return np.abs(a)


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "relu": relu,
    "abs": absolute,
}


def elementwise(op: str, a: np.ndarray, b=None) -> np.ndarray:
    """Dispatch a pointwise operation by name.

    Binary ops require identical shapes (no broadcasting); "scale" takes a
    scalar second operand and the unary ops take none.
    """
    if op not in _ELEMENTWISE:
        raise ContractError(f"unknown elementwise op {op!r}")
    fn = _ELEMENTWISE[op]
    if op in ("relu", "abs"):
        if b is not None:
            raise ContractError(f"{op} is unary")
        return fn(a)
    if op == "scale":
        if not np.isscalar(b) and not isinstance(b, (int, float)):
            raise ContractError("scale expects a scalar second operand")
        return fn(a, b)
    if b is None:
        raise ContractError(f"{op} needs two operands")
    return fn(a, b)
