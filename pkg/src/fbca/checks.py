"""Gradient-check suite over every op and every block, shared by the CLI and the test suite."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from . import attention as att
from .blocks import FBCsp, FBCspConfig, Neck, NeckConfig
from .evalkit.head import DetectionHead, build_targets, head_loss
from .numerics import functional as F
from .numerics.gradcheck import gradcheck
from .numerics.module import Module
from .numerics.rng import RngStream
from .numerics.tensor import Tensor, matmul, no_grad


@dataclass
class CheckResult:
    name: str
    seed: int
    max_rel_err: float
    coords: int
    kinks: int
    passed: bool


def randomize_buffers(module: Module, rng: RngStream) -> None:
    """Give batch-norm running statistics non-trivial values so eval-mode checks exercise them."""
    for name, buf in module.named_buffers():
        if name.endswith("running_var"):
            buf[...] = rng.uniform(0.5, 1.5, size=buf.shape)
        elif name.endswith("running_mean"):
            buf[...] = rng.normal(0.0, 0.2, size=buf.shape)


def randomize_affine(module: Module, rng: RngStream) -> None:
    """Move BN affine parameters and zero-initialized biases away from their init values."""
    for name, p in module.named_parameters():
        if name.endswith("bn_gamma") or name.endswith(".bn_gamma") or name == "bn_gamma":
            p.data[...] = rng.uniform(0.5, 1.5, size=p.shape)
        elif p.ndim == 1:
            p.data[...] = rng.normal(0.0, 0.1, size=p.shape)


def condition_gates(module: Module, forward: Callable[[], object], passes: int = 3) -> None:
    """Rescale each FBCA gate's first layer so its input vector has unit spread.

    At random init v sums features over all pixels and the gates saturate;
    their gradients then sit below finite-difference resolution and the check
    would probe nothing.
    """
    sites = att.fbca_blocks(module)
    for _ in range(passes):
        forward()
        for _, blk in sites:
            inter = blk.last
            for gate, v in ((blk.fore_gate, inter.v_fore), (blk.back_gate, inter.v_back)):
                if gate is None:
                    continue
                spread = float(np.std(v.data))
                if spread > 1.0:
                    gate.w1.data /= spread


def _param(rng: RngStream, shape, scale=1.0) -> Tensor:
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


def _op_cases(rng: RngStream) -> dict[str, tuple[Callable[[], Tensor], dict[str, Tensor]]]:
    """name -> (closure building the scalar loss, tensors to check)."""
    cases = {}

    x = _param(rng, (2, 3, 5, 5))
    k = _param(rng, (4, 3, 3, 3), 0.3)
    b = _param(rng, (4,), 0.1)
    w = rng.normal(size=(2, 4, 5, 5))
    cases["conv2d"] = (lambda: (F.conv2d(x, k, b, 1, 1) * w).sum(), {"x": x, "kernel": k, "bias": b})

    x2 = _param(rng, (2, 3, 6, 6))
    k2 = _param(rng, (2, 3, 3, 3), 0.3)
    w2 = rng.normal(size=(2, 2, 3, 3))
    cases["conv2d_stride2"] = (lambda: (F.conv2d(x2, k2, None, 2, 1) * w2).sum(), {"x": x2, "kernel": k2})

    x3 = _param(rng, (2, 4, 3, 3))
    k3 = _param(rng, (3, 4, 1, 1), 0.5)
    b3 = _param(rng, (3,), 0.1)
    w3 = rng.normal(size=(2, 3, 3, 3))
    cases["conv2d_1x1"] = (lambda: (F.conv2d(x3, k3, b3) * w3).sum(), {"x": x3, "kernel": k3, "bias": b3})

    for mode in ("train", "eval"):
        xb = _param(rng, (4, 2, 3, 3))
        gam = Tensor(rng.uniform(0.5, 1.5, size=(2,)), requires_grad=True)
        bet = _param(rng, (2,), 0.1)
        rm, rv = rng.normal(0, 0.2, size=(2,)), rng.uniform(0.5, 1.5, size=(2,))
        wb = rng.normal(size=(4, 2, 3, 3))
        training = mode == "train"

        def bn_loss(xb=xb, gam=gam, bet=bet, rm=rm, rv=rv, wb=wb, training=training):
            return (F.batch_norm(xb, gam, bet, rm.copy(), rv.copy(), training) * wb).sum()

        cases[f"batch_norm_{mode}"] = (bn_loss, {"x": xb, "gamma": gam, "beta": bet})

    for name, fn in (("leaky_relu", lambda t: F.leaky_relu(t, 0.1)), ("sigmoid", F.sigmoid),
                     ("hardswish", F.hardswish), ("abs", F.absolute)):
        xe = _param(rng, (3, 4), 2.0)
        we = rng.normal(size=(3, 4))
        cases[name] = (lambda xe=xe, we=we, fn=fn: (fn(xe) * we).sum(), {"x": xe})

    a = _param(rng, (3, 4))
    c = _param(rng, (1, 4))
    wa = rng.normal(size=(3, 4))
    cases["add"] = (lambda: ((a + c) * wa).sum(), {"a": a, "b": c})
    cases["sub"] = (lambda: ((a - c) * wa).sum(), {"a": a, "b": c})
    cases["mul"] = (lambda: ((a * c) * wa).sum(), {"a": a, "b": c})
    d = Tensor(rng.uniform(0.5, 2.0, size=(1, 4)), requires_grad=True)
    cases["div"] = (lambda: ((a / d) * wa).sum(), {"a": a, "b": d})

    m1 = _param(rng, (2, 3, 5))
    m2 = _param(rng, (2, 5, 4))
    wm = rng.normal(size=(2, 3, 4))
    cases["matmul"] = (lambda: (matmul(m1, m2) * wm).sum(), {"a": m1, "b": m2})

    xl = _param(rng, (3, 6))
    wl = _param(rng, (4, 6), 0.5)
    bl = _param(rng, (4,), 0.1)
    wlo = rng.normal(size=(3, 4))
    cases["linear"] = (lambda: (F.linear(xl, wl, bl) * wlo).sum(), {"x": xl, "w": wl, "b": bl})

    p = _param(rng, (2, 2, 3, 3))
    q = _param(rng, (2, 3, 3, 3))
    wc = rng.normal(size=(2, 5, 3, 3))
    cases["concat"] = (lambda: (F.concat_channels([p, q]) * wc).sum(), {"a": p, "b": q})
    ws1, ws2 = rng.normal(size=(2, 3, 3, 3)), rng.normal(size=(2, 2, 3, 3))

    def split_loss():
        s1, s2 = F.split(F.concat_channels([p, q]), [3, 2])
        return (s1 * ws1).sum() + (s2 * ws2).sum()

    cases["split"] = (split_loss, {"a": p, "b": q})

    g = _param(rng, (2, 3, 4, 4))
    wg = rng.normal(size=(2, 3))
    cases["global_avg_pool"] = (lambda: (F.global_avg_pool(g) * wg).sum(), {"x": g})
    wu = rng.normal(size=(2, 3, 8, 8))
    cases["nearest_upsample2x"] = (lambda: (F.nearest_upsample2x(g) * wu).sum(), {"x": g})
    wt = rng.normal(size=(2, 4, 3, 4))
    cases["transpose_reshape"] = (
        lambda: (g.transpose(0, 2, 1, 3).reshape(2, 4, 3, 4) * wt).sum(), {"x": g})
    wmean = rng.normal(size=(2, 3, 1, 4))
    cases["mean"] = (lambda: (g.mean(axis=2, keepdims=True) * wmean).sum(), {"x": g})

    z = _param(rng, (2, 1, 3, 3), 2.0)
    y = (rng.random((2, 1, 3, 3)) > 0.5).astype(np.float64)
    cases["bce_with_logits"] = (lambda: F.bce_with_logits(z, y).sum(), {"logits": z})
    return cases


def _module_case(module: Module, inputs: list[Tensor], rng: RngStream, forward: Callable[..., Tensor]):
    randomize_affine(module, rng)
    randomize_buffers(module, rng)
    with no_grad():
        condition_gates(module, lambda: forward(*inputs))
        probe = forward(*inputs)
    outs = probe if isinstance(probe, tuple) else (probe,)
    # unit-variance readout over all outputs keeps the probe loss O(1)
    weights = [rng.normal(size=o.shape) / np.sqrt(o.size) for o in outs]

    def loss():
        res = forward(*inputs)
        res = res if isinstance(res, tuple) else (res,)
        total = None
        for o, w in zip(res, weights):
            term = (o * w).sum()
            total = term if total is None else total + term
        return total

    params = dict(module.named_parameters())
    for i, t in enumerate(inputs):
        params[f"input{i}"] = t
    return loss, params


def _block_cases(rng: RngStream) -> dict[str, tuple]:
    cases = {}
    for c in (4, 8, 16):
        blk = att.FBCA(c, k=3, r=2, rng=rng)
        x = _param(rng, (2, c, 5, 5))
        cases[f"fbca_C{c}"] = _module_case(blk, [x], rng, lambda x, blk=blk: blk(x, False))
    nob = att.FBCA(8, k=3, r=2, include_background=False, rng=rng)
    x = _param(rng, (2, 8, 5, 5))
    cases["fbca_nob_C8"] = _module_case(nob, [x], rng, lambda x: nob(x, False))
    for kind in ("se", "eca", "coord"):
        blk = att.make_attention(kind, 8, r=2, rng=rng)
        x = _param(rng, (2, 8, 4, 5))
        cases[kind] = _module_case(blk, [x], rng, lambda x, blk=blk: blk(x, False))

    csp = FBCsp(FBCspConfig(c_in=16, c_out=16, n_bottlenecks=1, r=4), rng)
    x = _param(rng, (2, 16, 6, 6))
    cases["fbcsp"] = _module_case(csp, [x], rng, lambda x: csp(x, False))

    neck = Neck(NeckConfig([8, 8, 8], [8, 8, 8], {"n_bottlenecks": 1, "r": 2}), rng)
    f3, f4, f5 = _param(rng, (1, 8, 16, 16)), _param(rng, (1, 8, 8, 8)), _param(rng, (1, 8, 4, 4))
    cases["neck"] = _module_case(neck, [f3, f4, f5], rng, lambda a, b, c: neck(a, b, c, False))

    head = DetectionHead(8, rng=rng)
    head.pred.kernel.data[...] = rng.normal(0.0, 0.3, size=head.pred.kernel.shape)
    feats = _param(rng, (2, 8, 4, 4))
    boxes = [[(3.0, 2.0, 6.0, 14.0), (17.0, 9.0, 8.0, 20.0)], [(12.0, 12.0, 7.0, 15.0)]]
    obj, reg, mask = build_targets(boxes, (4, 4), 8)
    randomize_affine(head, rng)
    randomize_buffers(head, rng)
    params = dict(head.named_parameters())
    params["input0"] = feats
    cases["head_loss"] = (lambda: head_loss(head(feats, False), obj, reg, mask), params)
    return cases


# probed coordinates per tensor for the large modules
_MAX_COORDS = {"fbcsp": 6, "neck": 3, "head_loss": 12}


def run_gradcheck_suite(
    seeds: Iterable[int],
    h: float = 1e-5,
    tol: float = 1e-4,
    groups: Iterable[str] = ("ops", "blocks"),
    only: Iterable[str] | None = None,
) -> list[CheckResult]:
    """Every op and block at each seed; returns one row per (check, seed)."""
    only = set(only) if only is not None else None
    results = []
    for seed in seeds:
        rng = RngStream(seed)
        builders = []
        if "ops" in groups:
            builders.append(_op_cases)
        if "blocks" in groups:
            builders.append(_block_cases)
        for build in builders:
            for name, (loss_fn, params) in build(rng).items():
                if only is not None and name not in only:
                    continue
                report = gradcheck(lambda _input, fn=loss_fn: fn(), params, h=h, tol=tol,
                                   max_coords=_MAX_COORDS.get(name), rng=RngStream(seed ^ 0xC0FFEE))
                results.append(CheckResult(name, seed, report.max_error, sum(report.checked.values()),
                                           sum(report.kinks.values()), report.passed))
    return results
