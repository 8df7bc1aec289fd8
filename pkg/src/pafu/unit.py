"""Pixel-adaptive filtering: kernel bank, selector network, per-pixel
Gumbel-softmax kernel selection, spatially varying convolution and the
kernel decorrelation regularizer.

Two call paths are provided.  The plain-array functions run inference and
benchmarks; the `*_t` functions build the same computation on an autodiff
tape, with the straight-through estimator wired so that a hard one-hot
selection is emitted forward while gradients to the selector logits follow
the Jacobian of the soft selection probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import tensor as tn
from .errors import ContractError, DimensionError, NumericError

GUMBEL_EPS = 1e-10   # clamp for uniform draws so log(log(u)) stays finite
NORM_EPS = 1e-12     # guard for zero-norm kernels in the decorrelation loss

DEFAULT_PALETTE = np.array([
    [0.894, 0.102, 0.110], [0.216, 0.494, 0.722], [0.302, 0.686, 0.290],
    [0.596, 0.306, 0.639], [1.000, 0.498, 0.000], [1.000, 0.843, 0.000],
    [0.651, 0.337, 0.157], [0.969, 0.506, 0.749], [0.100, 0.100, 0.100],
    [0.121, 0.470, 0.706], [0.682, 0.780, 0.910], [0.200, 0.627, 0.173],
    [0.698, 0.875, 0.541], [0.984, 0.604, 0.600], [0.457, 0.439, 0.701],
    [0.600, 0.600, 0.600]], dtype=np.float32)


class KernelBank:
    """A group of n learnable kernels, possibly of mixed support sizes.

    Every kernel maps the same Cin channels to the same Cout channels;
    smaller kernels are zero-padded to the bank's maximum support when the
    bank is applied or regularized.
    """

    def __init__(self, kernels):
        if len(kernels) < 1:
            raise ContractError("a kernel bank needs at least one kernel")
        self.kernels = [np.ascontiguousarray(np.asarray(k)) for k in kernels]
        cout, cin = self.kernels[0].shape[:2]
        for k in self.kernels:
            if k.ndim != 4 or k.shape[2] != k.shape[3]:
                raise DimensionError(f"kernel must be [Cout,Cin,k,k], got {k.shape}")
            if k.shape[:2] != (cout, cin):
                raise DimensionError("all kernels in a bank must share Cout and Cin")
            if k.shape[2] % 2 == 0:
                raise ContractError(f"kernel support must be odd, got {k.shape[2]}")
            if not np.all(np.isfinite(k)):
                raise NumericError("kernel bank contains non-finite values")

    @property
    def n(self) -> int:
        return len(self.kernels)

    @property
    def cout(self) -> int:
        return self.kernels[0].shape[0]

    @property
    def cin(self) -> int:
        return self.kernels[0].shape[1]

    @property
    def supports(self) -> tuple[int, ...]:
        return tuple(k.shape[2] for k in self.kernels)

    @property
    def max_support(self) -> int:
        return max(self.supports)

    def padded(self) -> np.ndarray:
        """Stack the kernels zero-padded to max support: [n,Cout,Cin,K,K]."""
        return np.stack([pad_kernel(k, self.max_support) for k in self.kernels])

    @staticmethod
    def create(n, cout, cin, supports, rng) -> "KernelBank":
        """Gaussian-initialized bank; kernel i gets supports[i % len(supports)]."""
        supports = tuple(int(s) for s in supports)
        kernels = []
        for i in range(n):
            k = supports[i % len(supports)]
            std = np.sqrt(2.0 / (cin * k * k))
            kernels.append(rng.normal(0.0, std, size=(cout, cin, k, k)).astype(np.float32))
        return KernelBank(kernels)


def pad_kernel(k: np.ndarray, support: int) -> np.ndarray:
    """Zero-pad a [Cout,Cin,k,k] kernel to the given (odd, larger) support."""
    small = k.shape[2]
    if small == support:
        return k
    if small > support:
        raise DimensionError(f"kernel support {small} exceeds target {support}")
    off = (support - small) // 2
    out = np.zeros(k.shape[:2] + (support, support), dtype=k.dtype)
    out[:, :, off:off + small, off:off + small] = k
    return out


def crop_kernel(k: np.ndarray, support: int) -> np.ndarray:
    """Inverse of pad_kernel: take the centered support x support window."""
    off = (k.shape[2] - support) // 2
    return np.ascontiguousarray(k[:, :, off:off + support, off:off + support])


class SelectorNet:
    """Compact CNN that scores each bank kernel per pixel.

    A stack of same-padding convolutions with per-channel biases and ReLU
    between layers; the final layer emits one logit channel per kernel.
    """

    def __init__(self, layers):
        if not layers:
            raise ContractError("selector needs at least one layer")
        self.layers = [(np.ascontiguousarray(w), np.ascontiguousarray(b)) for w, b in layers]
        for w, b in self.layers:
            if w.ndim != 4 or b.ndim != 1 or b.shape[0] != w.shape[0]:
                raise DimensionError("selector layer parameters inconsistent")

    @property
    def in_channels(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def out_channels(self) -> int:
        return self.layers[-1][0].shape[0]

    def parameter_count(self) -> int:
        return sum(w.size + b.size for w, b in self.layers)

    @staticmethod
    def create(in_channels, n, rng, hidden=32, depth=4, support=3) -> "SelectorNet":
        """He-initialized conv stack: in -> hidden x (depth-1) -> n logits."""
        widths = [in_channels] + [hidden] * (depth - 1) + [n]
        layers = []
        for cin, cout in zip(widths[:-1], widths[1:]):
            std = np.sqrt(2.0 / (cin * support * support))
            w = rng.normal(0.0, std, size=(cout, cin, support, support)).astype(np.float32)
            layers.append((w, np.zeros(cout, dtype=np.float32)))
        return SelectorNet(layers)


@dataclass
class SelectionMap:
    """Per-pixel kernel assignment: one-hot forward, soft kept for backward."""

    hard: np.ndarray        # [N,n,H,W] exactly one 1 per pixel
    soft: np.ndarray        # [N,n,H,W] probabilities, rows sum to 1
    temperature: float

    @property
    def indices(self) -> np.ndarray:
        """Selected kernel index per pixel, [N,H,W]."""
        return np.argmax(self.hard, axis=1)

    @staticmethod
    def uniform(index: int, n: int, shape) -> "SelectionMap":
        """Select the same kernel everywhere (testing / collapsed units)."""
        nb, h, w = shape
        hard = np.zeros((nb, n, h, w), dtype=np.float32)
        hard[:, index] = 1.0
        return SelectionMap(hard=hard, soft=hard.copy(), temperature=1.0)

    @staticmethod
    def from_indices(idx: np.ndarray, n: int) -> "SelectionMap":
        nb, h, w = idx.shape
        hard = np.zeros((nb, n, h, w), dtype=np.float32)
        grid = np.indices(idx.shape)
        hard[grid[0], idx, grid[1], grid[2]] = 1.0
        return SelectionMap(hard=hard, soft=hard.copy(), temperature=1.0)


def sample_gumbel(shape, rng, dtype=np.float32) -> np.ndarray:
    """i.i.d. Gumbel(0,1) noise via -log(-log(u)), u clamped away from {0,1}."""
    u = rng.random(shape)
    np.clip(u, GUMBEL_EPS, 1.0 - GUMBEL_EPS, out=u)
    return (-np.log(-np.log(u))).astype(dtype)


def _softmax_channels(a: np.ndarray) -> np.ndarray:
    shifted = a - a.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def select_coefficients(x: np.ndarray, net: SelectorNet) -> np.ndarray:
    """Selector logits f, one channel per bank kernel, same spatial size."""
    if x.shape[1] != net.in_channels:
        raise DimensionError(f"selector expects {net.in_channels} channels, got {x.shape[1]}")
    h = x
    last = len(net.layers) - 1
    for i, (w, b) in enumerate(net.layers):
        h = tn.conv2d(h, w, "zero") + b[None, :, None, None]
        if i < last:
            h = tn.relu(h)
    return h


def gumbel_softmax_st(f: np.ndarray, tau: float, rng=None, hard_forward: bool = True) -> SelectionMap:
    """Straight-through Gumbel-softmax over the kernel axis.

    soft = softmax((f + g) / tau) with g ~ Gumbel(0,1); passing rng=None is
    inference mode and sets g = 0.  hard is the one-hot argmax of soft, with
    ties broken toward the lowest kernel index.  The returned map always
    carries both fields; hard_forward records which one downstream consumers
    should apply (the taped wrapper threads it into the forward value).
    """
    if tau <= 0:
        raise ContractError(f"temperature must be positive, got {tau}")
    if f.ndim != 4:
        raise DimensionError(f"logits must be [N,n,H,W], got {f.shape}")
    if rng is not None:
        a = f + sample_gumbel(f.shape, rng, f.dtype)
    else:
        a = f
    soft = _softmax_channels(a / f.dtype.type(tau))
    idx = np.argmax(soft, axis=1)
    hard = np.zeros_like(soft)
    np.put_along_axis(hard, idx[:, None], f.dtype.type(1), axis=1)
    return SelectionMap(hard=hard, soft=soft, temperature=float(tau))


def sv_conv2d(x: np.ndarray, bank: KernelBank, selection: SelectionMap, pad: str = "zero") -> np.ndarray:
    """Spatially varying convolution: each pixel filtered by its selected kernel.

    Patches of the maximum support size are extracted with im2col, then each
    pixel is a single matrix-vector product with the flattened kernel its
    selection picked; kernels below max support act zero-padded.
    """
    nb, cin, h, w = x.shape
    if cin != bank.cin:
        raise DimensionError(f"input has {cin} channels, bank expects {bank.cin}")
    if selection.hard.shape[0] != nb or selection.hard.shape[2:] != (h, w):
        raise DimensionError("selection map spatial size does not match input")
    if selection.hard.shape[1] != bank.n:
        raise DimensionError(
            f"selection has {selection.hard.shape[1]} kernels, bank has {bank.n}")
    k = bank.max_support
    cols = tn.im2col(x, k, pad)
    wf = bank.padded().reshape(bank.n, bank.cout, cin * k * k)
    idx = selection.indices.reshape(-1)
    y = np.empty((nb * h * w, bank.cout), dtype=x.dtype)
    for j in range(bank.n):
        rows = np.flatnonzero(idx == j)
        if rows.size:
            y[rows] = cols[rows] @ wf[j].astype(x.dtype).T
    return np.ascontiguousarray(y.reshape(nb, h, w, bank.cout).transpose(0, 3, 1, 2))


def decorrelation_loss(bank: KernelBank) -> float:
    """Squared Frobenius distance of the kernel Gram matrix from identity.

    Kernels are zero-padded to max support, flattened, L2-normalized (with a
    small eps so an all-zero kernel stays finite) and stacked into rows of
    W_f; the loss is ||W_f W_f^T - I||_F^2, i.e. the sum of squared pairwise
    cosines plus negligible diagonal terms.
    """
    rows = bank.padded().reshape(bank.n, -1).astype(np.float64)
    norms = np.sqrt((rows * rows).sum(axis=1, keepdims=True))
    unit = rows / (norms + NORM_EPS)
    gram = unit @ unit.T
    a = gram - np.eye(bank.n)
    return float((a * a).sum())


def pafu_forward(x: np.ndarray, bank: KernelBank, net: SelectorNet, tau: float,
                 rng=None, pad: str = "zero"):
    """Full unit: selector logits -> straight-through selection -> filtering."""
    logits = select_coefficients(x, net)
    sel = gumbel_softmax_st(logits, tau, rng)
    y = sv_conv2d(x, bank, sel, pad)
    return y, sel


def selection_heatmap(selection: SelectionMap, palette: np.ndarray | None = None,
                      bayer_split: bool = False):
    """Render the per-pixel kernel choice as colors.

    Returns [N,3,H,W], or with bayer_split a dict of four half-resolution
    heatmaps keyed r/g1/g2/b, one per RGGB phase.
    """
    n = selection.hard.shape[1]
    if palette is None:
        palette = DEFAULT_PALETTE
    palette = np.asarray(palette, dtype=np.float32)
    if palette.shape[0] < n:
        raise ContractError(f"palette has {palette.shape[0]} colors, need {n}")
    idx = selection.indices
    img = palette[idx].transpose(0, 3, 1, 2)
    img = np.ascontiguousarray(img)
    if not bayer_split:
        return img
    return {
        "r": np.ascontiguousarray(img[:, :, 0::2, 0::2]),
        "g1": np.ascontiguousarray(img[:, :, 0::2, 1::2]),
        "g2": np.ascontiguousarray(img[:, :, 1::2, 0::2]),
        "b": np.ascontiguousarray(img[:, :, 1::2, 1::2]),
    }


# ---------------------------------------------------------------------------
# taped versions for training
# ---------------------------------------------------------------------------

def selector_forward_t(x: ad.Variable, layers) -> ad.Variable:
    """Taped selector evaluation; `layers` pairs (weight, bias) Variables."""
    h = x
    last = len(layers) - 1
    for i, (w, b) in enumerate(layers):
        h = ad.conv2d(h, w, "zero")
        h = ad.bias_add(h, b)
        if i < last:
            h = ad.relu(h)
    return h


@ad.taped_op("gumbel_select")
def gumbel_select_t(f: ad.Variable, tau: float, rng=None, hard_forward: bool = True):
    """Taped straight-through selection.

    Returns (z, SelectionMap): z carries the hard one-hot map forward (the
    soft probabilities when hard_forward=False) while its backward rule is
    always the softmax Jacobian at the soft probabilities, scaled by 1/tau.
    """
    sel = gumbel_softmax_st(f.value, tau, rng, hard_forward)
    value = sel.hard if hard_forward else sel.soft
    soft = sel.soft
    inv_tau = 1.0 / float(tau)

    def backward(g):
        dot = (g * soft).sum(axis=1, keepdims=True)
        return ((soft * (g - dot)) * f.value.dtype.type(inv_tau),)

    z = f.tape.record("gumbel_select", (f,), value, backward)
    return z, sel


@ad.taped_op("sv_conv2d")
def sv_conv2d_t(x: ad.Variable, kernels, z: ad.Variable, pad: str = "zero") -> ad.Variable:
    """Taped spatially varying convolution, linear in x, the kernels and z.

    Forward takes the cheap gather path when z is exactly one-hot and falls
    back to the dense kernel mixture otherwise (the soft/grad-check mode).
    Backward always needs every kernel's response per pixel to produce the
    selection gradient, so those are recomputed from the saved patches.
    """
    kernels = list(kernels)
    tape = x.tape
    nb, cin, h, w = x.value.shape
    supports = [kv.value.shape[2] for kv in kernels]
    kmax = max(supports)
    n = len(kernels)
    cout = kernels[0].value.shape[0]
    if z.value.shape != (nb, n, h, w):
        raise DimensionError(
            f"selection shape {z.value.shape} does not match ({nb},{n},{h},{w})")
    dtype = x.value.dtype
    wf = np.stack([pad_kernel(kv.value, kmax).reshape(cout, -1) for kv in kernels])
    cols = tn.im2col(x.value, kmax, pad)
    z_flat = z.value.transpose(0, 2, 3, 1).reshape(-1, n)

    one_hot = bool(((z.value == 0) | (z.value == 1)).all())
    if one_hot:
        idx = np.argmax(z_flat, axis=1)
        y_flat = np.empty((nb * h * w, cout), dtype=dtype)
        for j in range(n):
            rows = np.flatnonzero(idx == j)
            if rows.size:
                y_flat[rows] = cols[rows] @ wf[j].T
    else:
        resp = (cols @ wf.reshape(n * cout, -1).T).reshape(-1, n, cout)
        y_flat = np.einsum("pn,pnc->pc", z_flat, resp)
    value = y_flat.reshape(nb, h, w, cout).transpose(0, 3, 1, 2)

    x_shape = x.value.shape

    def backward(g):
        gf = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        resp = (cols @ wf.reshape(n * cout, -1).T).reshape(-1, n, cout)
        gz_flat = np.einsum("pc,pnc->pn", gf, resp)
        gz = gz_flat.reshape(nb, h, w, n).transpose(0, 3, 1, 2)
        gcols = np.zeros_like(cols)
        grads_w = []
        for j in range(n):
            weighted = gf * z_flat[:, j:j + 1]
            gwj = (weighted.T @ cols).reshape(cout, cin, kmax, kmax)
            grads_w.append(crop_kernel(gwj, supports[j]))
            gcols += z_flat[:, j:j + 1] * (gf @ wf[j])
        gx = tn.col2im(gcols, x_shape, kmax, pad)
        return (gx, *grads_w, gz)

    return tape.record("sv_conv2d", (x, *kernels, z), value, backward)


@ad.taped_op("decorrelation")
def decorrelation_loss_t(kernels) -> ad.Variable:
    """Taped decorrelation regularizer over a list of kernel Variables.

    Forward runs in float64 regardless of the training dtype; the analytic
    gradient is dL/dU = 4 (U U^T - I) U pushed through the row normalization
    and cropped back to each kernel's own support.
    """
    kernels = list(kernels)
    tape = kernels[0].tape
    n = len(kernels)
    kmax = max(kv.value.shape[2] for kv in kernels)
    supports = [kv.value.shape[2] for kv in kernels]
    shapes = [kv.value.shape for kv in kernels]
    dtype = kernels[0].value.dtype
    rows = np.stack([pad_kernel(kv.value, kmax).reshape(-1) for kv in kernels]).astype(np.float64)
    norms = np.sqrt((rows * rows).sum(axis=1, keepdims=True))
    scales = norms + NORM_EPS
    unit = rows / scales
    gram = unit @ unit.T
    a = gram - np.eye(n)
    value = np.asarray((a * a).sum(), dtype=dtype)

    def backward(g):
        gu = 4.0 * (a @ unit)
        grow = (gu - unit * (unit * gu).sum(axis=1, keepdims=True)) / scales
        grow *= float(g)
        grads = []
        for j in range(n):
            cout, cin, _, _ = shapes[j]
            full = grow[j].reshape(cout, cin, kmax, kmax)
            grads.append(crop_kernel(full, supports[j]).astype(dtype))
        return tuple(grads)

    return tape.record("decorrelation", tuple(kernels), value, backward)


def pafu_forward_t(x: ad.Variable, kernels, selector_layers, tau: float,
                   rng=None, hard_forward: bool = True, pad: str = "zero"):
    """Taped full unit; returns (output Variable, logits Variable, SelectionMap)."""
    logits = selector_forward_t(x, selector_layers)
    z, sel = gumbel_select_t(logits, tau, rng, hard_forward)
    y = sv_conv2d_t(x, kernels, z, pad)
    return y, logits, sel
