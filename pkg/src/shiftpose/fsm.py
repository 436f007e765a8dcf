"""Feature shifting with correlation attention.

A feature shifting module projects C input channels onto K shifting
channels with a 1x1 convolution, translates each shifting channel by its
own learnable fractional offset (bilinear interpolation, zero fill
outside the view), gates the shifted maps with a per-position attention
map predicted from the input, projects back to C channels, and adds the
result onto the input shortcut before batch normalization and a ReLU.

The module is algebraically an input-dependent convolution whose kernel
window is the set of K offsets; ``fsm_oracle`` evaluates that induced
convolution directly and serves as the correctness reference for the
factored fast path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import DimensionError, StateError

__all__ = [
    "CA_SOFTPLUS", "CA_SIGMOID", "ShiftOffsets", "FsmParams",
    "shift", "ca_forward", "fsm_forward", "fsm_oracle", "fsm_param_count",
    "FeatureShiftModule", "format_offset_rows", "parse_offset_table",
    "OFFSET_INIT_RANGE",
]

CA_SOFTPLUS = "softplus-normalized"
CA_SIGMOID = "sigmoid-unnormalized"

# Offsets start uniform in [-1, 1]: breaks symmetry without risking maps
# being shifted fully out of view at initialization.
OFFSET_INIT_RANGE = 1.0


@dataclass
class ShiftOffsets:
    """Per-channel translation in pixels; positive dx moves content toward +x."""
    dx: Parameter
    dy: Parameter

    @property
    def k(self):
        return self.dx.shape[0]

    def clamp(self, bound):
        np.clip(self.dx.data, -bound, bound, out=self.dx.data)
        np.clip(self.dy.data, -bound, bound, out=self.dy.data)

    def as_pairs(self):
        return np.stack([self.dx.data, self.dy.data], axis=1)


@dataclass
class FsmParams:
    """Learnables of one module.

    ``in_weight`` (K,C) feeds the shifting channels, ``gate_weight`` (K,C)
    feeds the attention branch, ``out_weight`` (C,K) projects back;
    the branch norm is a batch norm over the C output channels.
    """
    in_weight: Parameter
    gate_weight: Parameter
    out_weight: Parameter
    offsets: ShiftOffsets
    norm_scale: Parameter
    norm_offset: Parameter
    running_mean: np.ndarray
    running_var: np.ndarray
    ca_variant: str = CA_SOFTPLUS

    @property
    def channels(self):
        return self.in_weight.shape[1]

    @property
    def shift_channels(self):
        return self.in_weight.shape[0]


def init_fsm_params(channels, shift_channels, ca_variant=CA_SOFTPLUS, rng=None,
                    dtype=np.float32, zero_out_weight=True):
    """Fresh parameters; ``out_weight`` starts at zero so a newly inserted
    module initially leaves the shortcut path undisturbed."""
    rng = rng or np.random.default_rng()
    c, k = channels, shift_channels
    std = np.sqrt(2.0 / c)
    in_w = Parameter((rng.standard_normal((k, c)) * std).astype(dtype))
    gate_w = Parameter((rng.standard_normal((k, c)) * std).astype(dtype))
    if zero_out_weight:
        out_w = Parameter(np.zeros((c, k), dtype=dtype))
    else:
        out_w = Parameter((rng.standard_normal((c, k)) * np.sqrt(2.0 / k)).astype(dtype))
    off = ShiftOffsets(
        dx=Parameter(rng.uniform(-OFFSET_INIT_RANGE, OFFSET_INIT_RANGE, k).astype(dtype)),
        dy=Parameter(rng.uniform(-OFFSET_INIT_RANGE, OFFSET_INIT_RANGE, k).astype(dtype)),
    )
    return FsmParams(
        in_weight=in_w, gate_weight=gate_w, out_weight=out_w, offsets=off,
        norm_scale=Parameter(np.ones(c, dtype=dtype)),
        norm_offset=Parameter(np.zeros(c, dtype=dtype)),
        running_mean=np.zeros(c, dtype=dtype),
        running_var=np.ones(c, dtype=dtype),
        ca_variant=ca_variant,
    )


# ---------------------------------------------------------------------------
# shifting
# ---------------------------------------------------------------------------

def _corner_context(dx, dy, h, w):
    """Corner indices, validity masks and fractional weights for a uniform
    per-channel translation sampled at every integer output position."""
    # sample coordinate x - dx has integer part x + floor(-dx), fraction frac(-dx)
    mx = -np.asarray(dx, dtype=np.float64)
    my = -np.asarray(dy, dtype=np.float64)
    ox = np.floor(mx).astype(np.int64)
    oy = np.floor(my).astype(np.int64)
    fx = (mx - ox)[:, None, None]
    fy = (my - oy)[:, None, None]
    ix = np.arange(w, dtype=np.int64)[None, None, :] + ox[:, None, None]
    iy = np.arange(h, dtype=np.int64)[None, :, None] + oy[:, None, None]
    ix = np.broadcast_to(ix, (len(ox), h, w))
    iy = np.broadcast_to(iy, (len(oy), h, w))
    corners = []
    for ddy in (0, 1):
        for ddx in (0, 1):
            cy, cx = iy + ddy, ix + ddx
            valid = (cy >= 0) & (cy < h) & (cx >= 0) & (cx < w)
            corners.append((np.clip(cy, 0, h - 1), np.clip(cx, 0, w - 1), valid))
    return corners, fx, fy


def _gather_corners(maps, corners, dtype):
    """Zero-filled corner values, each of shape (B, K, H, W)."""
    kidx = np.arange(maps.shape[1])[:, None, None]
    vals = []
    for cy, cx, valid in corners:
        v = maps[:, kidx, cy, cx]
        v = np.where(valid[None], v, dtype.type(0))
        vals.append(v)
    return vals


def _corner_weights(fx, fy, dtype):
    fx = fx.astype(dtype)[None]
    fy = fy.astype(dtype)[None]
    return ((1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx)


def shift_values(maps, dx, dy):
    """Numpy-level per-channel fractional translation of (B, K, H, W) maps."""
    b, k, h, w = maps.shape
    corners, fx, fy = _corner_context(dx, dy, h, w)
    v00, v01, v10, v11 = _gather_corners(maps, corners, maps.dtype)
    w00, w01, w10, w11 = _corner_weights(fx, fy, maps.dtype)
    return w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11


def shift(maps, dx, dy):
    """Differentiable per-channel translation (autodiff op).

    out[b,k,y,x] samples maps[b,k] at (x - dx[k], y - dy[k]) with bilinear
    interpolation; content moved outside the view is lost and vacated
    regions fill with zero. Gradients flow to both the maps and the
    offsets (the offset gradient is the negated spatial derivative of the
    interpolated map at the sample points).
    """
    if maps.ndim != 4:
        raise DimensionError(f"shift: expected (B,K,H,W) maps, got rank {maps.ndim}")
    b, k, h, w = maps.shape
    if dx.shape != (k,) or dy.shape != (k,):
        raise DimensionError(
            f"shift: offsets: expected dx/dy of shape ({k},) to match K={k}, "
            f"got {dx.shape}/{dy.shape}")
    corners, fx, fy = _corner_context(dx.data, dy.data, h, w)
    vals = _gather_corners(maps.data, corners, maps.dtype)
    v00, v01, v10, v11 = vals
    w00, w01, w10, w11 = _corner_weights(fx, fy, maps.dtype)
    out = w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11

    def backward(g):
        gmaps = np.zeros_like(maps.data)
        bidx = np.arange(b)[:, None, None, None]
        kidx = np.arange(k)[None, :, None, None]
        for (cy, cx, valid), wgt in zip(corners, (w00, w01, w10, w11)):
            np.add.at(gmaps, (bidx, kidx, cy[None], cx[None]),
                      g * wgt * valid[None])
        fyb = fy.astype(maps.dtype)[None]
        fxb = fx.astype(maps.dtype)[None]
        # d out / d (sample x) then negate for d/d dx
        d_gx = (1 - fyb) * (v01 - v00) + fyb * (v11 - v10)
        d_gy = (1 - fxb) * (v10 - v00) + fxb * (v11 - v01)
        gdx = -(g * d_gx).sum(axis=(0, 2, 3))
        gdy = -(g * d_gy).sum(axis=(0, 2, 3))
        return ((maps, gmaps), (dx, gdx.astype(dx.dtype)), (dy, gdy.astype(dy.dtype)))

    return Tensor(out, requires_grad=any(t.requires_grad for t in (maps, dx, dy)),
                  _parents=(maps, dx, dy), _backward=backward)


# ---------------------------------------------------------------------------
# correlation attention
# ---------------------------------------------------------------------------

def ca_forward(p, gate_weight, variant=CA_SOFTPLUS):
    """Attention maps gating each shifting channel at each position.

    softplus-normalized: softplus of a 1x1 conv, normalized to sum to 1
    over all spatial positions per (batch, channel).
    sigmoid-unnormalized: plain sigmoid of the 1x1 conv, each value in (0,1).
    """
    raw = ad.conv1x1(p, gate_weight)
    if variant == CA_SOFTPLUS:
        f = ad.softplus(raw)
        return ad.spatial_div(f, ad.spatial_sum(f))
    if variant == CA_SIGMOID:
        return ad.sigmoid(raw)
    raise ValueError(f"unknown correlation-attention variant {variant!r}")


# ---------------------------------------------------------------------------
# module forward and oracle
# ---------------------------------------------------------------------------

def fsm_forward(p, params, mode="train"):
    """Factored fast path: project, shift, gate, project back, add shortcut,
    batch-norm the sum, ReLU."""
    if p.ndim != 4 or p.shape[1] != params.channels:
        raise DimensionError(
            f"fsm_forward: channels: module expects C={params.channels}, "
            f"input has {p.shape[1] if p.ndim == 4 else p.shape}")
    shifted = shift(ad.conv1x1(p, params.in_weight),
                    params.offsets.dx, params.offsets.dy)
    gate = ca_forward(p, params.gate_weight, params.ca_variant)
    branch = ad.conv1x1(ad.mul(gate, shifted), params.out_weight)
    pre = ad.add(p, branch)
    normed = ad.batch_norm(pre, params.norm_scale, params.norm_offset,
                           params.running_mean, params.running_var, mode)
    return ad.relu(normed)


def fsm_oracle(p, params, mode="train"):
    """Direct evaluation of the induced convolution.

    Materializes the full position-dependent kernel
    ``w[c,k,c'](x,y) = out_weight[c,k] * in_weight[k,c'] * gate[k](x,y)``
    and contracts it against the input maps resampled at each offset.
    Quadratic in channels; intended for small tensors as a correctness
    reference only. Running statistics are left untouched.
    """
    pv = p.data if isinstance(p, Tensor) else np.asarray(p)
    b, c, h, w = pv.shape
    k = params.shift_channels
    gate = ca_forward(Tensor(pv), params.gate_weight, params.ca_variant).data

    # input maps resampled at every offset: (B, K, C', H, W)
    tiled = np.repeat(pv[:, None], k, axis=1).reshape(b, k * c, h, w)
    dx = np.repeat(params.offsets.dx.data, c)
    dy = np.repeat(params.offsets.dy.data, c)
    p_shift = shift_values(tiled, dx, dy).reshape(b, k, c, h, w)

    kernel = np.einsum("ck,kd,bkhw->bckdhw", params.out_weight.data,
                       params.in_weight.data, gate)
    pre = pv + np.einsum("bckdhw,bkdhw->bchw", kernel, p_shift)

    normed = ad.batch_norm(Tensor(pre), params.norm_scale, params.norm_offset,
                           params.running_mean.copy(), params.running_var.copy(),
                           mode)
    return ad.relu(normed)


def fsm_param_count(channels, shift_channels):
    """Learnable-parameter counts (norm and biases excluded) for covering
    K window positions: this module versus single layers of active or
    deformable convolution with C input and output channels."""
    c, k = channels, shift_channels
    return {
        "fsm": 3 * k * c + 2 * k,
        "active_conv": k * c * c + 2 * k,
        "deformable_conv": k * c * c + 2 * k * c,
    }


class FeatureShiftModule:
    """Stateful wrapper: parameters, bypass state, last-forward tensors.

    A module built for delayed insertion starts in bypass, acting as an
    exact identity with frozen parameters; :meth:`insert` activates it.
    The tensors of the most recent active forward (pre-shift, post-shift,
    attention, branch output) stay accessible for analyses.
    """

    def __init__(self, channels, shift_channels, ca_variant=CA_SOFTPLUS,
                 rng=None, dtype=np.float32, active=True, name="fsm"):
        self.name = name
        self.params = init_fsm_params(channels, shift_channels, ca_variant,
                                      rng, dtype, zero_out_weight=active)
        self.active = active
        self.clamp_bound = None
        self.cache = {}

    @property
    def channels(self):
        return self.params.channels

    @property
    def shift_channels(self):
        return self.params.shift_channels

    def forward(self, p, mode="train"):
        if not self.active:
            return p
        params = self.params
        pre_shift = ad.conv1x1(p, params.in_weight)
        post_shift = shift(pre_shift, params.offsets.dx, params.offsets.dy)
        gate = ca_forward(p, params.gate_weight, params.ca_variant)
        nonlocal_maps = ad.conv1x1(ad.mul(gate, post_shift), params.out_weight)
        pre = ad.add(p, nonlocal_maps)
        normed = ad.batch_norm(pre, params.norm_scale, params.norm_offset,
                               params.running_mean, params.running_var, mode)
        self.cache = {
            "pre_shift": pre_shift,
            "post_shift": post_shift,
            "attention": gate,
            "nonlocal": nonlocal_maps,
        }
        return ad.relu(normed)

    def insert(self, rng):
        """Activate a bypassed module: zero the output projection, draw
        fresh offsets, unfreeze."""
        if self.active:
            raise StateError(f"{self.name}: already inserted")
        k = self.shift_channels
        dtype = self.params.out_weight.dtype
        self.params.out_weight.data[...] = 0
        self.params.offsets.dx.data[...] = rng.uniform(
            -OFFSET_INIT_RANGE, OFFSET_INIT_RANGE, k).astype(dtype)
        self.params.offsets.dy.data[...] = rng.uniform(
            -OFFSET_INIT_RANGE, OFFSET_INIT_RANGE, k).astype(dtype)
        self.active = True

    def clamp_offsets(self):
        if self.clamp_bound is not None:
            self.params.offsets.clamp(self.clamp_bound)

    def weight_parameters(self):
        p = self.params
        return [("in_weight", p.in_weight), ("gate_weight", p.gate_weight),
                ("out_weight", p.out_weight), ("norm_scale", p.norm_scale),
                ("norm_offset", p.norm_offset)]

    def offset_parameters(self):
        return [("dx", self.params.offsets.dx), ("dy", self.params.offsets.dy)]

    def parameters(self):
        return self.weight_parameters() + self.offset_parameters()


# ---------------------------------------------------------------------------
# offset table format
# ---------------------------------------------------------------------------

OFFSET_HEADER = "module_id,k,dx,dy"


def format_offset_rows(module_id, offsets):
    """Comma-separated offset table: one row per shifting channel, values
    printed with 9 significant digits (lossless for float32)."""
    lines = [OFFSET_HEADER]
    dx, dy = offsets.dx.data, offsets.dy.data
    for i in range(offsets.k):
        lines.append(f"{module_id},{i},{dx[i]:.9g},{dy[i]:.9g}")
    return "\n".join(lines) + "\n"


def parse_offset_table(text):
    """Inverse of :func:`format_offset_rows`; returns
    ``[(module_id, k, dx, dy), ...]``."""
    rows = []
    lines = [ln for ln in text.strip().splitlines() if ln]
    if not lines or lines[0] != OFFSET_HEADER:
        raise ValueError("offset table: missing header line")
    for ln in lines[1:]:
        module_id, k, dx, dy = ln.split(",")
        rows.append((module_id, int(k), float(dx), float(dy)))
    return rows
