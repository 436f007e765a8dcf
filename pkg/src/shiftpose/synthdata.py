"""Synthetic long-range-dependency task, augmentation, and heatmap codecs.

Each generated image carries one *cue* blob and one *target* blob placed
at ``cue + displacement``, plus optional distractor blobs that look
exactly like the target. Ground truth marks only the cued target, so a
purely local detector cannot beat choosing among the identical blobs at
random; solving the task requires integrating the cue's position across
the displacement distance.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import GenerationError

__all__ = [
    "SynthSpec", "SynthSample", "AugmentRanges", "generate_dataset",
    "generate_sample", "augment_sample", "heatmap_target", "decode_heatmap",
    "matched_filter_locate", "bilinear_warp", "smooth_field",
]

CUE_AMPLITUDE = 0.5     # weaker than targets so it never wins a local argmax
TARGET_AMPLITUDE = 1.0
PLACEMENT_RETRIES = 200


@dataclass
class SynthSpec:
    image_size: tuple = (32, 32)
    displacement: tuple = (10.0, 0.0)   # target sits at cue + displacement
    blob_sigma: float = 1.2
    distractors: int = 0
    noise_std: float = 0.0
    count: int = 256
    seed: int = 0
    heatmap_downscale: int = 4
    heatmap_sigma: float = 1.0

    def validate(self):
        h, w = self.image_size
        dx, dy = self.displacement
        if abs(dx) >= w or abs(dy) >= h:
            raise GenerationError(
                f"displacement ({dx},{dy}) larger than image {h}x{w}")


@dataclass
class SynthSample:
    image: np.ndarray             # (1, C, H, W)
    keypoints: np.ndarray         # (M, 2) as (x, y) in image pixels
    target_heatmaps: np.ndarray   # (1, M, H', W'), peak value 1
    heatmap_downscale: int = 4
    heatmap_sigma: float = 1.0
    cue: np.ndarray = None        # (2,) cue position, kept for diagnostics


@dataclass
class AugmentRanges:
    rotation_deg: float = 30.0
    scale: tuple = (0.75, 1.25)
    shift_frac: float = 0.05


def _render_blobs(h, w, centers, amplitudes, sigma, dtype):
    ys = np.arange(h, dtype=dtype)[:, None]
    xs = np.arange(w, dtype=dtype)[None, :]
    img = np.zeros((h, w), dtype=dtype)
    for (cx, cy), amp in zip(centers, amplitudes):
        img += amp * np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2.0 * sigma ** 2))
    return img


def _place(rng, lo_x, hi_x, lo_y, hi_y, taken, min_sep):
    for _ in range(PLACEMENT_RETRIES):
        x = rng.uniform(lo_x, hi_x)
        y = rng.uniform(lo_y, hi_y)
        if all((x - tx) ** 2 + (y - ty) ** 2 >= min_sep ** 2 for tx, ty in taken):
            return np.array([x, y])
    raise GenerationError(
        f"no feasible blob position after {PLACEMENT_RETRIES} retries "
        f"(image too crowded for {len(taken) + 1} blobs at separation {min_sep:.1f})")


def generate_sample(spec, rng, dtype=np.float32):
    """One cue/target/distractor image with its single-keypoint heatmap."""
    h, w = spec.image_size
    dx, dy = spec.displacement
    margin = max(2.0, 2.5 * spec.blob_sigma)
    min_sep = max(5.0, 4.0 * spec.blob_sigma)

    # cue range such that cue + displacement stays inside the margin box
    lo_x = margin + max(0.0, -dx)
    hi_x = w - 1 - margin - max(0.0, dx)
    lo_y = margin + max(0.0, -dy)
    hi_y = h - 1 - margin - max(0.0, dy)
    if lo_x >= hi_x or lo_y >= hi_y:
        raise GenerationError(
            f"displacement ({dx},{dy}) leaves no room in a {h}x{w} image")
    cue = _place(rng, lo_x, hi_x, lo_y, hi_y, [], min_sep)
    target = cue + np.array([dx, dy])

    centers = [cue, target]
    amplitudes = [CUE_AMPLITUDE, TARGET_AMPLITUDE]
    taken = [tuple(cue), tuple(target)]
    for _ in range(spec.distractors):
        p = _place(rng, margin, w - 1 - margin, margin, h - 1 - margin,
                   taken, min_sep)
        taken.append(tuple(p))
        centers.append(p)
        amplitudes.append(TARGET_AMPLITUDE)

    img = _render_blobs(h, w, centers, amplitudes, spec.blob_sigma, np.float64)
    if spec.noise_std > 0:
        img = img + rng.normal(0.0, spec.noise_std, img.shape)
    keypoints = target[None, :]
    hm = heatmap_target(keypoints / spec.heatmap_downscale,
                        (h // spec.heatmap_downscale, w // spec.heatmap_downscale),
                        spec.heatmap_sigma, dtype)
    return SynthSample(
        image=img[None, None].astype(dtype),
        keypoints=keypoints.astype(np.float64),
        target_heatmaps=hm[None],
        heatmap_downscale=spec.heatmap_downscale,
        heatmap_sigma=spec.heatmap_sigma,
        cue=cue,
    )


def generate_dataset(spec, dtype=np.float32):
    """Materialize ``spec.count`` samples; the same spec always produces a
    bit-identical list."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    return [generate_sample(spec, rng, dtype) for _ in range(spec.count)]


# ---------------------------------------------------------------------------
# heatmap codec
# ---------------------------------------------------------------------------

def heatmap_target(keypoints, map_size, sigma, dtype=np.float32):
    """Per-keypoint Gaussian score maps with peak value 1 at the keypoint."""
    if sigma <= 0:
        raise ValueError("heatmap sigma must be positive")
    h, w = map_size
    kp = np.asarray(keypoints, dtype=np.float64)
    ys = np.arange(h, dtype=np.float64)[:, None]
    xs = np.arange(w, dtype=np.float64)[None, :]
    maps = np.empty((len(kp), h, w), dtype=dtype)
    for m, (cx, cy) in enumerate(kp):
        maps[m] = np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2.0 * sigma ** 2))
    return maps


def decode_heatmap(maps):
    """Argmax decode of (M, H, W) or (B, M, H, W) maps to (x, y) positions.

    Ties resolve to the lowest row, then lowest column (row-major argmax).
    """
    arr = np.asarray(maps)
    squeeze = arr.ndim == 3
    if squeeze:
        arr = arr[None]
    b, m, h, w = arr.shape
    flat = arr.reshape(b, m, h * w).argmax(axis=2)
    ys, xs = np.divmod(flat, w)
    out = np.stack([xs, ys], axis=2).astype(np.float64)
    return out[0] if squeeze else out


def matched_filter_locate(image, blob_sigma):
    """Local 3x3 matched-filter argmax: the strongest purely local cue.

    Serves as the reference local detector: perfect when the target is the
    only full-amplitude blob, chance-level among identical distractors.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 4:
        img = img[0, 0]
    elif img.ndim == 3:
        img = img[0]
    ys = np.arange(-1, 2, dtype=np.float64)[:, None]
    xs = np.arange(-1, 2, dtype=np.float64)[None, :]
    kernel = np.exp(-(xs ** 2 + ys ** 2) / (2.0 * blob_sigma ** 2))
    kernel /= kernel.sum()
    h, w = img.shape
    padded = np.pad(img, 1)
    resp = np.zeros_like(img)
    for i in range(3):
        for j in range(3):
            resp += kernel[i, j] * padded[i:i + h, j:j + w]
    idx = resp.argmax()
    y, x = divmod(idx, w)
    return np.array([x, y], dtype=np.float64)


def _gaussian_smooth(rng, h, w, sigma):
    pad = int(3 * sigma) + 1
    noise = rng.standard_normal((h + 2 * pad, w + 2 * pad))
    r = np.arange(-pad, pad + 1)
    ker = np.exp(-r ** 2 / (2.0 * sigma ** 2))
    ker /= ker.sum()
    sm = np.apply_along_axis(lambda v: np.convolve(v, ker, "same"), 0, noise)
    sm = np.apply_along_axis(lambda v: np.convolve(v, ker, "same"), 1, sm)
    return sm[pad:pad + h, pad:pad + w]


def smooth_field(rng, size, broad_sigma=3.0, fine_sigma=1.2, broad_weight=0.7,
                 amplitude=0.25, mean=0.5):
    """Band-limited random field in [0, 1]: smoothed noise at two scales.

    The broad component makes alignment losses informative over several
    pixels; the fine component sharpens their optimum. Used as the
    stimulus for translation-regression experiments.
    """
    h, w = size
    broad = _gaussian_smooth(rng, h, w, broad_sigma)
    fine = _gaussian_smooth(rng, h, w, fine_sigma)
    f = broad_weight * broad / broad.std() + (1.0 - broad_weight) * fine / fine.std()
    f = f / f.std() * amplitude + mean
    return np.clip(f, 0.0, 1.0)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def bilinear_warp(image, inverse_matrix):
    """Warp (C, H, W) channels through a 2x3 inverse map with zero fill."""
    c, h, w = image.shape
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    sx = inverse_matrix[0, 0] * xs + inverse_matrix[0, 1] * ys + inverse_matrix[0, 2]
    sy = inverse_matrix[1, 0] * xs + inverse_matrix[1, 1] * ys + inverse_matrix[1, 2]
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = (sx - x0).astype(image.dtype)
    fy = (sy - y0).astype(image.dtype)
    out = np.zeros_like(image)
    for ddy in (0, 1):
        for ddx in (0, 1):
            cy, cx = y0 + ddy, x0 + ddx
            valid = (cy >= 0) & (cy < h) & (cx >= 0) & (cx < w)
            vals = image[:, np.clip(cy, 0, h - 1), np.clip(cx, 0, w - 1)]
            vals = np.where(valid[None], vals, image.dtype.type(0))
            wgt = (fy if ddy else 1 - fy) * (fx if ddx else 1 - fx)
            out += wgt[None] * vals
    return out


def _affine_about_center(angle_rad, scl, shift, size):
    h, w = size
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    cos, sin = np.cos(angle_rad), np.sin(angle_rad)
    lin = scl * np.array([[cos, -sin], [sin, cos]])
    trans = np.array([cx + shift[0], cy + shift[1]]) - lin @ np.array([cx, cy])
    return np.concatenate([lin, trans[:, None]], axis=1)


def _invert_affine(mat):
    inv_lin = np.linalg.inv(mat[:, :2])
    inv_trans = -inv_lin @ mat[:, 2]
    return np.concatenate([inv_lin, inv_trans[:, None]], axis=1)


def apply_affine_to_points(mat, points):
    pts = np.asarray(points, dtype=np.float64)
    return pts @ mat[:, :2].T + mat[:, 2]


def augment_sample(sample, ranges, rng):
    """Random rotation/scale/shift about the image center.

    The image is inverse-warp resampled; keypoints get the identical
    affine exactly, and heatmaps are regenerated from the moved keypoints.
    """
    _, c, h, w = sample.image.shape
    angle = np.deg2rad(rng.uniform(-ranges.rotation_deg, ranges.rotation_deg))
    scl = rng.uniform(ranges.scale[0], ranges.scale[1])
    shift = (rng.uniform(-ranges.shift_frac, ranges.shift_frac) * w,
             rng.uniform(-ranges.shift_frac, ranges.shift_frac) * h)
    mat = _affine_about_center(angle, scl, shift, (h, w))
    image = bilinear_warp(sample.image[0], _invert_affine(mat))[None]
    keypoints = apply_affine_to_points(mat, sample.keypoints)
    hm = heatmap_target(keypoints / sample.heatmap_downscale,
                        (h // sample.heatmap_downscale, w // sample.heatmap_downscale),
                        sample.heatmap_sigma, sample.image.dtype)
    cue = None if sample.cue is None else apply_affine_to_points(mat, sample.cue[None])[0]
    return replace(sample, image=image, keypoints=keypoints,
                   target_heatmaps=hm[None], cue=cue)
