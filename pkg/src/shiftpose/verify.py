"""Stock verification suites: the seeded gradient-check battery and the
factored-vs-explicit equivalence trials.

Both are exposed on the command line and reused by the acceptance tests.
Gradient-check cases are drawn in double precision and filtered to sit
away from non-smooth points (offset fractions inside [0.12, 0.88], relu
pre-activations at least 0.05 from zero), per the harness contract.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import fsm
from .gradcheck import GradCheckReport, finite_diff_gradcheck
from .network import Bottleneck

__all__ = ["gradcheck_suite", "oracle_trials", "DEFAULT_QUOTAS"]

DEFAULT_QUOTAS = (
    ("conv1x1", 20),
    ("shift", 20),
    ("ca-softplus", 10),
    ("ca-sigmoid", 10),
    ("fsm", 20),
    ("bottleneck", 20),
)


def _push_from_integer(values, margin=0.12):
    """Move each value's fractional part into [margin, 1 - margin]."""
    frac = values - np.floor(values)
    out = values.copy()
    out[frac < margin] += margin - frac[frac < margin] + 0.01
    out[frac > 1 - margin] -= frac[frac > 1 - margin] - (1 - margin) + 0.01
    return out


def _rand_offsets(rng, k):
    dx = _push_from_integer(rng.uniform(-2.5, 2.5, k))
    dy = _push_from_integer(rng.uniform(-2.5, 2.5, k))
    return ad.Parameter(dx), ad.Parameter(dy)


def _case_conv1x1(rng):
    b, c, k = rng.integers(1, 3), rng.integers(1, 5), rng.integers(1, 5)
    h, w = rng.integers(2, 6), rng.integers(2, 6)
    x = ad.tensor(rng.standard_normal((b, c, h, w)), requires_grad=True)
    weight = ad.Parameter(rng.standard_normal((k, c)))
    bias = ad.Parameter(rng.standard_normal(k))
    return lambda x, w_, b_: ad.conv1x1(x, w_, b_), [x, weight, bias]


def _case_shift(rng):
    b, k = rng.integers(1, 3), rng.integers(1, 4)
    h, w = rng.integers(4, 7), rng.integers(4, 7)
    maps = ad.tensor(rng.standard_normal((b, k, h, w)), requires_grad=True)
    dx, dy = _rand_offsets(rng, k)
    return lambda m, a, b_: fsm.shift(m, a, b_), [maps, dx, dy]


def _case_ca(variant):
    def build(rng):
        b, c, k = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
        h, w = rng.integers(3, 6), rng.integers(3, 6)
        p = ad.tensor(rng.standard_normal((b, c, h, w)), requires_grad=True)
        weight = ad.Parameter(rng.standard_normal((k, c)))
        return lambda p_, w_: fsm.ca_forward(p_, w_, variant), [p, weight]
    return build


def _case_fsm(rng):
    b, c, k = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
    h, w = rng.integers(4, 7), rng.integers(4, 7)
    variant = fsm.CA_SOFTPLUS if rng.integers(0, 2) else fsm.CA_SIGMOID
    p = ad.tensor(rng.standard_normal((b, c, h, w)), requires_grad=True)
    in_w = ad.Parameter(rng.standard_normal((k, c)) * 0.7)
    gate_w = ad.Parameter(rng.standard_normal((k, c)) * 0.7)
    out_w = ad.Parameter(rng.standard_normal((c, k)) * 0.7)
    dx, dy = _rand_offsets(rng, k)
    scale = ad.Parameter(rng.uniform(0.7, 1.3, c))
    offset = ad.Parameter(rng.uniform(0.3, 0.8, c))

    def run(p_, iw, gw, ow, dx_, dy_, sc, of):
        params = fsm.FsmParams(iw, gw, ow, fsm.ShiftOffsets(dx_, dy_), sc, of,
                               np.zeros(c), np.ones(c), variant)
        return fsm.fsm_forward(p_, params, "train")

    return run, [p, in_w, gate_w, out_w, dx, dy, scale, offset]


def _case_bottleneck(rng):
    c_in = int(rng.integers(2, 4))
    mid = 2
    c_out = int(rng.integers(2, 4))
    stride = int(rng.integers(1, 3))
    h, w = int(rng.integers(6, 8)), int(rng.integers(6, 8))
    layer = Bottleneck(c_in, mid, c_out, stride=stride, norm="gn",
                       rng=rng, dtype=np.float64)
    # wide activations and boosted kernels keep the group statistics away
    # from the ill-conditioned small-variance regime finite differences
    # cannot handle; norm offsets pushed positive clear the relu kink
    x = ad.tensor(2.0 * rng.standard_normal((1, c_in, h, w)), requires_grad=True)
    params = []
    for name, p in layer.named_params():
        if name.endswith(".weight"):
            p.data *= 3.0
        if name.endswith("norm.offset"):
            p.data += rng.uniform(0.3, 0.7, p.shape)
        params.append(p)

    def run(x_, *_):
        return layer.forward(x_, "train")

    return run, [x] + params


_BUILDERS = {
    "conv1x1": _case_conv1x1,
    "shift": _case_shift,
    "ca-softplus": _case_ca(fsm.CA_SOFTPLUS),
    "ca-sigmoid": _case_ca(fsm.CA_SIGMOID),
    "fsm": _case_fsm,
    "bottleneck": _case_bottleneck,
}

_RELU_MARGIN = 0.05
_VAR_FLOOR = 0.8


def _is_smooth_case(fn, inputs):
    """Accept only cases where finite differences are trustworthy: relu
    inputs clear of the kink and normalization variances away from the
    ill-conditioned 1/sigma regime."""
    margins, variances = [], []
    with ad.trace_relu_margins(margins), ad.trace_norm_variances(variances):
        out = fn(*inputs)
    if not np.isfinite(out.data).all():
        return False
    return (all(m > _RELU_MARGIN for m in margins)
            and all(v > _VAR_FLOOR for v in variances))


def gradcheck_suite(quotas=DEFAULT_QUOTAS, step=1e-3, tolerance=1e-4, base_seed=0):
    """Run the seeded default battery; yields (op name, seed, report).

    Seeds advance until each op's quota of smooth cases is met; cases
    whose random draw lands on a relu kink are skipped, never silently
    passed.
    """
    for op_name, quota in quotas:
        build = _BUILDERS[op_name]
        seed = base_seed
        produced = 0
        while produced < quota:
            rng = np.random.default_rng((hash_seed(op_name) + seed) % (2 ** 63))
            seed += 1
            fn, inputs = build(rng)
            if not _is_smooth_case(fn, inputs):
                continue
            report = finite_diff_gradcheck(fn, inputs, step, tolerance, seed=seed)
            produced += 1
            yield op_name, seed - 1, report


def hash_seed(name):
    import zlib

    return zlib.crc32(name.encode())


def oracle_trials(trials=20, tolerance=1e-6, base_seed=100):
    """Random small-shape comparisons of the factored forward against the
    explicit induced-convolution evaluation; returns (results, all_pass)
    where results rows are (seed, variant, mode, rel_error)."""
    results = []
    all_pass = True
    for trial in range(trials):
        rng = np.random.default_rng(base_seed + trial)
        b = int(rng.integers(1, 3))
        c = int(rng.integers(1, 5))
        k = int(rng.integers(1, 6))
        h, w = int(rng.integers(3, 8)), int(rng.integers(3, 8))
        variant = fsm.CA_SOFTPLUS if trial % 2 == 0 else fsm.CA_SIGMOID
        params = fsm.init_fsm_params(c, k, variant, rng, np.float64,
                                     zero_out_weight=False)
        params.offsets.dx.data[...] = rng.uniform(-2.5, 2.5, k)
        params.offsets.dy.data[...] = rng.uniform(-2.5, 2.5, k)
        p = ad.tensor(rng.standard_normal((b, c, h, w)))
        for mode in ("train", "eval"):
            fast = fsm.fsm_forward(p, params, mode).data
            slow = fsm.fsm_oracle(p, params, mode).data
            rel = float(np.abs(fast - slow).max() / max(np.abs(slow).max(), 1e-12))
            results.append((base_seed + trial, variant, mode, rel))
            all_pass &= rel < tolerance
    return results, all_pass
