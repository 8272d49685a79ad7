"""Quick correctness battery run by ``mssr self-test``.

Each check compares the engine against an independent reference: finite
differences for gradients, a direct nested-loop convolution, and closed-form
metric values. The battery takes a few seconds.
"""

from __future__ import annotations

import math
from typing import TextIO

import numpy as np

from . import tensor as te
from .augment import ALL_TRANSFORMS, apply_geometric
from .evaluation import TileConfig, self_ensemble, tiled_infer
from .metrics import psnr, ssim
from .models import audit_graph, build_network, build_preset, receptive_field_radius, tiny_msdn, tiny_msrn

GRAD_TOL = 1e-4


def direct_conv(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int) -> np.ndarray:
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    oh, ow = (h - 1) // stride + 1, (wd - 1) // stride + 1
    out = np.zeros((n, o, oh, ow))
    for y in range(oh):
        for xx in range(ow):
            patch = xp[:, :, y * stride:y * stride + k, xx * stride:xx * stride + k]
            out[:, :, y, xx] = np.einsum("nckl,ockl->no", patch, w)
    return out + b.reshape(1, o, 1, 1)


def _rand(rng, shape, requires_grad=True):
    return te.Tensor(rng.standard_normal(shape), requires_grad=requires_grad, dtype=np.float64)


def _conv_params(rng, in_c, out_c, k, stride):
    p = te.ConvParams.create(in_c, out_c, k, stride, dtype=np.float64)
    p.weight.data[...] = rng.standard_normal(p.weight.shape) * 0.3
    p.bias.data[...] = rng.standard_normal(p.bias.shape) * 0.1
    return p


def check_gradients(seed: int = 0) -> float:
    """Largest relative gradient error over every op and two tiny end-to-end networks."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for stride in (1, 2):
        p = _conv_params(rng, 3, 4, 3, stride)
        x = _rand(rng, (2, 3, 6, 6))
        worst = max(worst, te.gradcheck(lambda x, w, b: te.loss("L2", te.conv2d(x, p), te.Tensor(np.zeros((2, 4, 6 // stride, 6 // stride)), dtype=np.float64)), [x, p.weight, p.bias]))
    x = _rand(rng, (1, 8, 4, 4))
    t = _rand(rng, (1, 2, 8, 8), requires_grad=False)
    worst = max(worst, te.gradcheck(lambda x: te.loss("L1", te.depth_to_space(x, 2), t), [x]))
    a, b = _rand(rng, (1, 2, 4, 4)), _rand(rng, (1, 2, 4, 4))
    t2 = _rand(rng, (1, 4, 4, 4), requires_grad=False)
    worst = max(worst, te.gradcheck(lambda a, b: te.loss("L2", te.concat_channels([te.relu(a), b]), t2), [a, b]))
    t3 = _rand(rng, (1, 2, 4, 4), requires_grad=False)
    worst = max(worst, te.gradcheck(lambda a, b: te.loss("L1", te.add([a, b, a]), t3), [a, b]))
    for spec in (tiny_msrn(blocks=1, filters=4, upscale=(4, 4, 4)), tiny_msdn(blocks=6)):
        g = build_network(spec, seed=seed).astype(np.float64)
        x = te.Tensor(rng.random((1, 3, 8, 8)), dtype=np.float64)
        y = te.Tensor(rng.random((1, 3, 8, 8)), dtype=np.float64)
        params = [t for _, t in g.parameters()]
        worst = max(worst, te.gradcheck(lambda *ps: te.loss("L2", g.forward(x), y), params, max_coords=6, seed=seed))
    return worst


def check_conv(seed: int = 0, shapes: int = 5) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(shapes):
        k = int(rng.choice([1, 3, 5]))
        stride = int(rng.integers(1, 3))
        n, c, o = (int(v) for v in rng.integers(1, 4, size=3))
        h, w = (int(v) * stride for v in rng.integers(2, 9, size=2))
        p = te.ConvParams.create(c, o, k, stride)
        p.weight.data[...] = rng.standard_normal(p.weight.shape)
        p.bias.data[...] = rng.standard_normal(p.bias.shape)
        x = rng.standard_normal((n, c, h, w)).astype(np.float32)
        got = te.conv2d(te.Tensor(x), p).data
        want = direct_conv(x.astype(np.float64), p.weight.data.astype(np.float64), p.bias.data.astype(np.float64), stride)
        worst = max(worst, float(np.max(np.abs(got - want))))
    return worst


def check_metrics() -> list[tuple[str, bool]]:
    a = np.full((1, 3, 16, 16), 0.5)
    uniform = abs(psnr(a, a + 1 / 255) - 20 * math.log10(255)) < 1e-3
    img = np.random.default_rng(1).random((1, 3, 24, 24))
    identity = ssim(img, img) == 1.0
    c1 = 0.01 ** 2
    mu_x, mu_y = 0.3, 0.7
    # zero variance leaves only the luminance term
    closed = (2 * mu_x * mu_y + c1) / (mu_x ** 2 + mu_y ** 2 + c1)
    const = abs(ssim(np.full((1, 3, 16, 16), mu_x), np.full((1, 3, 16, 16), mu_y)) - closed) < 1e-6
    return [("psnr uniform offset", uniform), ("ssim identity", identity), ("ssim constant images", const)]


def check_ensemble_and_tiling(seed: int = 0) -> tuple[float, float]:
    g = build_network(tiny_msrn(blocks=1, filters=4, upscale=(4, 4, 4)), seed=seed)
    x = np.random.default_rng(seed).random((1, 3, 16, 16)).astype(np.float32)
    outs = []
    for t in ALL_TRANSFORMS:
        y = g(apply_geometric(t, x))
        if t.rot90:
            y = np.rot90(y, -1, axes=(2, 3))
        if t.flip_ud:
            y = y[..., ::-1, :]
        if t.flip_lr:
            y = y[..., ::-1]
        outs.append(y)
    manual = np.mean(outs, axis=0)
    ens = float(np.max(np.abs(self_ensemble(g, x) - manual)))
    big = np.random.default_rng(seed + 1).random((1, 3, 96, 80)).astype(np.float32)
    overlap = 4 * math.ceil(receptive_field_radius(g) / 4)
    tiles = tiled_infer(g, big, TileConfig(tile=2 * overlap + 16, overlap=overlap))
    return ens, float(np.max(np.abs(tiles - g(big))))


EXPECTED_AUDIT = {
    "baseline-r": (32, 0), "msrn": (64, 1), "baseline-d": (0, 15), "msdn": (0, 46),
}


def run(out: TextIO, seeds: int = 2) -> bool:
    results: list[tuple[str, bool, str]] = []

    def note(name: str, ok: bool, detail: str = "") -> None:
        results.append((name, ok, detail))
        out.write(f"{'ok  ' if ok else 'FAIL'} {name}{'  ' + detail if detail else ''}\n")

    for name, want in EXPECTED_AUDIT.items():
        got = audit_graph(build_preset(name, seed=None))
        note(f"audit {name}", (got["additions"], got["concatenations"]) == want, f"{got}")
    for seed in range(seeds):
        err = check_gradients(seed)
        note(f"gradcheck seed {seed}", err < GRAD_TOL, f"max rel err {err:.2e}")
    err = check_conv()
    note("conv vs direct loops", err < 1e-5, f"max abs err {err:.2e}")
    for name, ok in check_metrics():
        note(name, ok)
    ens, tile = check_ensemble_and_tiling()
    note("self-ensemble vs explicit average", ens <= 1e-6, f"max abs err {ens:.2e}")
    note("tiled vs whole-image forward", tile < 1e-5, f"max abs err {tile:.2e}")
    return all(ok for _, ok, _ in results)
