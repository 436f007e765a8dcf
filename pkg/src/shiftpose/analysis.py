"""Diagnostics over a trained graph.

All procedures here are read-only over a frozen model: they run a
forward pass, seed a gradient somewhere, and read gradients off the
tape at interior tensors of a shifting module (its post-shifting maps
or the non-local maps produced by its final pointwise convolution).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError
from .fsm import format_offset_rows
from .network import FsmLayer

__all__ = [
    "ScoreMatrix", "ErfMap", "keypoint_offset_scores", "contribution_counts",
    "erf_map", "export_offsets", "window_energy", "factored_window_energies",
    "explicit_window_energies",
]


@dataclass
class ScoreMatrix:
    """Keypoint-versus-shifting-channel contribution scores.

    values[m, k] >= 0; after normalization the maximum over keypoints
    within each shifting channel is 1 (when the channel has any signal).
    """
    values: np.ndarray
    module_id: str
    normalization: str = "per-channel-max"


@dataclass
class ErfMap:
    """Squared-gradient footprint on the input of one seeded position."""
    values: np.ndarray
    source: tuple  # (module_id, channel, (x, y))


def _fsm_module(graph, module_id):
    node = graph.node(module_id)
    if not isinstance(node.layer, FsmLayer):
        raise ConfigError("analysis.module_id",
                          f"layer {module_id!r} is not a shifting module")
    module = node.layer.module
    if not module.active:
        raise ConfigError("analysis.module_id",
                          f"shifting module {module_id!r} is bypassed")
    return module


def keypoint_offset_scores(graph, images, module_id, mode="eval",
                           magnitude=True, normalization="max"):
    """Scores between keypoint categories and shifting channels.

    For each keypoint channel m: copy the predictions, zero the value at
    the per-sample peak of channel m, take the MSE between the modified
    copy and the live predictions, and back-propagate it to the chosen
    module's post-shifting maps. The per-channel spatial average of those
    gradients (absolute values by default; ``magnitude=False`` averages
    signed values first) fills row m. Rows are finally normalized within
    each shifting channel by its maximum magnitude (or by its sum with
    ``normalization="sum"``).
    """
    module = _fsm_module(graph, module_id)
    heads, _ = graph.forward(images, mode=mode)
    pred = heads["main"]
    post_shift = module.cache["post_shift"]
    m_channels = pred.shape[1]
    k = post_shift.shape[1]

    base = pred.data.copy()
    if not base.any():
        warnings.warn("all-zero predictions: keypoint-offset scores degenerate to zero")
    scores = np.zeros((m_channels, k), dtype=np.float64)
    for m in range(m_channels):
        modified = base.copy()
        for b in range(base.shape[0]):
            flat = modified[b, m].argmax()
            y, x = divmod(int(flat), base.shape[3])
            modified[b, m, y, x] = 0.0
        loss = ad.mse_loss(pred, modified)
        post_shift.grad = None
        loss.backward()
        g = post_shift.grad
        if g is None:
            continue
        if magnitude:
            scores[m] = np.abs(g).mean(axis=(0, 2, 3))
        else:
            scores[m] = np.abs(g.mean(axis=(0, 2, 3)))

    if normalization == "max":
        col = scores.max(axis=0)
    elif normalization == "sum":
        col = scores.sum(axis=0)
    else:
        raise ConfigError("analysis.normalization",
                          f"unknown normalization {normalization!r}")
    nonzero = col > 0
    scores[:, nonzero] /= col[nonzero]
    return ScoreMatrix(scores, module_id,
                       normalization=f"per-channel-{normalization}")


def contribution_counts(scores, threshold=0.5):
    """Per keypoint, how many shifting channels score at or above the
    threshold (0.5 keeps the most relevant offsets while preserving
    statistically useful counts)."""
    return (scores.values >= threshold).sum(axis=1)


def erf_map(graph, image, module_id, channel, position, mode="eval"):
    """Effective receptive field of one seeded position.

    For a shifting module the seed lands on its non-local maps (the output
    of its final pointwise convolution); for any other layer id, on that
    layer's output. A unit gradient there is back-propagated to the
    network input and the squared sum across input channels returned.
    """
    node = graph.node(module_id)
    if isinstance(image, np.ndarray):
        image = Tensor(np.ascontiguousarray(image, dtype=graph.dtype),
                       requires_grad=True)
    else:
        image.requires_grad = True
    _, outputs = graph.forward(image, mode=mode)
    if isinstance(node.layer, FsmLayer):
        nonlocal_maps = _fsm_module(graph, module_id).cache["nonlocal"]
    else:
        nonlocal_maps = outputs[module_id]
    x, y = position
    _, k, h, w = nonlocal_maps.shape
    if not (0 <= channel < k):
        raise ValueError(f"channel {channel} outside non-local map channels [0,{k})")
    if not (0 <= x < w and 0 <= y < h):
        raise ValueError(f"position ({x},{y}) outside non-local map {h}x{w}")
    seed = np.zeros_like(nonlocal_maps.data)
    seed[0, channel, y, x] = 1.0
    image.grad = None
    nonlocal_maps.backward(seed)
    values = (image.grad[0].astype(np.float64) ** 2).sum(axis=0)
    return ErfMap(values, (module_id, channel, (x, y)))


def export_offsets(graph):
    """Offset table over every shifting module, in the comma-separated
    format ``module_id,k,dx,dy``."""
    parts = []
    for name, module in graph.fsm_layers():
        table = format_offset_rows(name, module.params.offsets)
        if parts:
            table = "\n".join(table.splitlines()[1:]) + "\n"
        parts.append(table)
    if not parts:
        raise ConfigError("analysis.offsets", "graph contains no shifting modules")
    return "".join(parts)


def factored_window_energies(out_row, in_weight, gate_values):
    """Per-shifting-channel energy of the induced window at one position,
    from the factored weights: (out[c,k] * gate_k)^2 * sum_c' in[k,c']^2."""
    out_row = np.asarray(out_row, dtype=np.float64)
    gate_values = np.asarray(gate_values, dtype=np.float64)
    in_sq = (np.asarray(in_weight, dtype=np.float64) ** 2).sum(axis=1)
    return (out_row * gate_values) ** 2 * in_sq


def explicit_window_energies(out_row, in_weight, gate_values):
    """Same quantity by materializing the per-position kernel tensor."""
    kernel = np.einsum("k,kd->kd",
                       np.asarray(out_row, np.float64)
                       * np.asarray(gate_values, np.float64),
                       np.asarray(in_weight, np.float64))
    return (kernel ** 2).sum(axis=1)


def window_energy(graph, images, module_id, out_channel, position, mode="eval",
                  explicit=False):
    """Energy of the induced convolution window at one output position,
    for each shifting channel (first batch item's attention)."""
    module = _fsm_module(graph, module_id)
    graph.forward(images, mode=mode)
    gate = module.cache["attention"].data
    x, y = position
    params = module.params
    fk = gate[0, :, y, x]
    compute = explicit_window_energies if explicit else factored_window_energies
    return compute(params.out_weight.data[out_channel], params.in_weight.data, fk)
