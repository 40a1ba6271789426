"""Finite-difference verification suite for every differentiable operation
and a tiny end-to-end model.

Each check builds seeded random inputs, forms a scalar probe loss (a fixed
random weighting of the operation's output), and compares tape gradients
against central differences. The straight-through step operation is exempt
from equality by design and is instead checked for the clipped-identity
bound; in the end-to-end check, parameters whose gradient includes a
straight-through contribution get a finite/bounded check instead.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import ops
from .cfl import GatParams, build_middle, gat_align, pool
from .hsl import HslParams, IncidenceParams, WhiteningParams, whiten_nodes
from .losses import identity_center, joint_loss, mric_pair, triplet_loss
from .model import Network
from .sle import FeatureQuad
from .tensor import Tape, Tensor, backward, finite_diff_grad, relative_error

TOLERANCE = 1e-4
FD_STEP = 1e-5
BOUND = 1e6


@dataclass
class CheckResult:
    name: str
    passed: bool
    max_rel_err: Optional[float]
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        err = "exempt" if self.max_rel_err is None else f"rel_err={self.max_rel_err:.3e}"
        tail = f" ({self.detail})" if self.detail else ""
        return f"[{status}] {self.name}: {err}{tail}"


def _probe(build: Callable[..., Tensor], *inputs: Tensor) -> CheckResult:
    """Compare backward() with finite differences for each grad input."""
    weight = None

    def scalar(*tensors):
        nonlocal weight
        out = build(*tensors)
        if weight is None:
            rng = np.random.default_rng(12345)
            weight = rng.normal(size=out.shape)
        return ops.sum_(ops.mul(out, Tensor(weight)))

    with Tape() as tape:
        loss = scalar(*inputs)
    backward(loss, tape)
    worst = 0.0
    for i, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        def f(x, i=i):
            args = list(inputs)
            args[i] = x
            return scalar(*args)
        fd = finite_diff_grad(f, t, h=FD_STEP)
        worst = max(worst, relative_error(t.grad, fd.data))
    return CheckResult("", worst < TOLERANCE, worst)


def _leaf(rng, shape, scale=1.0):
    return Tensor(scale * rng.normal(size=shape), requires_grad=True)


def _named(name: str, fn: Callable[[], CheckResult]) -> CheckResult:
    result = fn()
    result.name = name
    return result


# -- individual operation checks ---------------------------------------------

def check_matmul():
    rng = np.random.default_rng(0)
    return _probe(ops.matmul, _leaf(rng, (4, 3)), _leaf(rng, (3, 5)))


def check_matmul_batched():
    rng = np.random.default_rng(1)
    return _probe(ops.matmul, _leaf(rng, (2, 4, 3)), _leaf(rng, (3, 5)))


def check_add():
    rng = np.random.default_rng(2)
    return _probe(ops.add, _leaf(rng, (3, 4)), _leaf(rng, (4,)))


def check_sub():
    rng = np.random.default_rng(3)
    return _probe(ops.sub, _leaf(rng, (3, 4)), _leaf(rng, (3, 1)))


def check_mul():
    rng = np.random.default_rng(4)
    return _probe(ops.mul, _leaf(rng, (3, 4)), _leaf(rng, (3, 4)))


def check_div():
    rng = np.random.default_rng(5)
    denom = Tensor(np.random.default_rng(6).uniform(0.5, 2.0, (3, 4)), requires_grad=True)
    return _probe(ops.div, _leaf(rng, (3, 4)), denom)


def check_transpose():
    rng = np.random.default_rng(7)
    return _probe(lambda t: ops.transpose(t, (1, 2, 0)), _leaf(rng, (2, 3, 4)))


def check_reshape():
    rng = np.random.default_rng(8)
    return _probe(lambda t: ops.reshape(t, (4, 6)), _leaf(rng, (2, 3, 4)))


def check_concat():
    rng = np.random.default_rng(9)
    return _probe(lambda a, b: ops.concat([a, b], axis=-1),
                  _leaf(rng, (3, 2)), _leaf(rng, (3, 4)))


def check_slice():
    rng = np.random.default_rng(10)
    return _probe(lambda t: ops.slice_axis(t, -2, 1, 3), _leaf(rng, (4, 5)))


def check_relu():
    rng = np.random.default_rng(11)
    return _probe(ops.relu, _leaf(rng, (4, 5)))


def check_exp():
    rng = np.random.default_rng(12)
    return _probe(ops.exp, _leaf(rng, (4, 5), scale=0.5))


def check_log():
    rng = np.random.default_rng(13)
    pos = Tensor(np.random.default_rng(13).uniform(0.2, 3.0, (4, 5)), requires_grad=True)
    return _probe(ops.log, pos)


def check_absolute():
    rng = np.random.default_rng(14)
    return _probe(ops.absolute, _leaf(rng, (4, 5)))


def check_power():
    pos = Tensor(np.random.default_rng(15).uniform(0.2, 2.0, (4, 5)), requires_grad=True)
    return _probe(lambda t: ops.power(t, 3.0), pos)


def check_power_fractional():
    pos = Tensor(np.random.default_rng(16).uniform(0.2, 2.0, (4, 5)), requires_grad=True)
    return _probe(lambda t: ops.power(t, 1.0 / 3.0), pos)


def check_clamp_min():
    rng = np.random.default_rng(17)
    return _probe(lambda t: ops.clamp_min(t, 0.1), _leaf(rng, (4, 5)))


def check_sum():
    rng = np.random.default_rng(18)
    return _probe(lambda t: ops.sum_(t, axis=-1), _leaf(rng, (4, 5)))


def check_mean():
    rng = np.random.default_rng(19)
    return _probe(lambda t: ops.mean(t, axis=(-2, -1), keepdims=True), _leaf(rng, (2, 4, 5)))


def check_softmax_rows():
    rng = np.random.default_rng(20)
    return _probe(ops.softmax_rows, _leaf(rng, (4, 6)))


def check_l2_normalize_rows():
    rng = np.random.default_rng(21)
    return _probe(ops.l2_normalize_rows, _leaf(rng, (4, 6)))


def check_cholesky():
    rng = np.random.default_rng(22)
    base = rng.normal(size=(6, 6))
    spd = Tensor(base.T @ base + np.eye(6), requires_grad=True)
    return _probe(ops.cholesky, spd)


def check_solve_lower_triangular():
    rng = np.random.default_rng(23)
    l = Tensor(np.tril(rng.normal(size=(5, 5))) + 3 * np.eye(5), requires_grad=True)
    b = _leaf(rng, (5, 3))
    return _probe(ops.solve_lower_triangular, l, b)


def check_extract_patches():
    rng = np.random.default_rng(24)
    return _probe(lambda t: ops.extract_patches(t, 3, 3, stride=2, pad=1),
                  _leaf(rng, (2, 6, 4, 3)))


def check_cross_entropy_rows():
    rng = np.random.default_rng(25)
    labels = np.array([0, 2, 1, 2])
    return _probe(lambda t: ops.cross_entropy_rows(t, labels), _leaf(rng, (4, 3)))


def check_l1_distance():
    rng = np.random.default_rng(26)
    return _probe(ops.l1_distance, _leaf(rng, (4, 6)), _leaf(rng, (4, 6)))


def check_step_straight_through():
    """Exempt from FD equality: verify the clipped-identity bound instead."""
    rng = np.random.default_rng(27)
    x = Tensor(rng.normal(scale=1.5, size=(6, 6)), requires_grad=True)
    with Tape() as tape:
        out = ops.step_straight_through(x)
        loss = ops.sum_(ops.mul(out, Tensor(rng.normal(size=(6, 6)))))
    backward(loss, tape)
    binary = set(np.unique(out.data)) <= {0.0, 1.0}
    finite = np.all(np.isfinite(x.grad))
    # gradient passes only where |pre-activation| <= 1, zero elsewhere
    inside = np.abs(x.data) <= 1.0
    bounded = np.all(x.grad[~inside] == 0.0) and x.ste_tainted
    ok = binary and finite and bounded
    return CheckResult("", ok, None, "straight-through: binary/finite/clip checks")


# -- composite probes ----------------------------------------------------------

def check_whiten_nodes():
    rng = np.random.default_rng(28)
    f = _leaf(rng, (8, 4))
    gamma = Tensor(rng.normal(1.0, 0.1, (8, 1)), requires_grad=True)
    beta = _leaf(rng, (8, 4), scale=0.1)
    def build(ft, g, b):
        return whiten_nodes(ft, WhiteningParams(g, b))
    return _probe(build, f, gamma, beta)


def check_gat_align():
    rng = np.random.default_rng(29)
    q, kv = _leaf(rng, (6, 4)), _leaf(rng, (6, 4))
    wq, wk, wv = (_leaf(rng, (4, 4)) for _ in range(3))
    def build(qt, kt, a, b, c):
        return gat_align(qt, kt, GatParams(a, b, c, 1.3))
    return _probe(build, q, kv, wq, wk, wv)


def check_pool():
    rng = np.random.default_rng(30)
    return _probe(lambda t: pool(t, n_parts=2, p_gem=3.0), _leaf(rng, (1, 8, 4)))


def check_identity_center():
    rng = np.random.default_rng(31)
    return _probe(lambda t: identity_center(t), _leaf(rng, (4, 6)))


def check_mric_pair():
    rng = np.random.default_rng(32)
    return _probe(mric_pair, _leaf(rng, (4, 6)), _leaf(rng, (4, 6)))


def check_triplet_loss():
    rng = np.random.default_rng(33)
    labels = np.array([0, 0, 1, 1, 2, 2])
    return _probe(lambda t: triplet_loss(t, labels, 0.3)[0], _leaf(rng, (6, 5)))


# -- end-to-end ---------------------------------------------------------------

def tiny_config() -> dict:
    from .config import resolve
    return resolve(overrides={
        "data.height": 8, "data.width": 4, "data.channels": 2, "data.latent": 6,
        "sle.channels": 4, "sle.grid_h": 4, "sle.grid_w": 2,
        "hsl.hyperedges": 4, "train.p": 2, "train.k": 2,
    })


def check_end_to_end():
    """Joint-loss gradients of a tiny full model vs central differences.

    Parameters with straight-through-tainted gradients are checked finite
    and bounded; everything else must match to TOLERANCE.
    """
    cfg = tiny_config()
    rng = np.random.default_rng(99)
    net = Network(cfg, rng, num_classes=2)
    k = cfg["train.k"]
    pairs = cfg["train.p"] * k
    vis = rng.normal(size=(pairs, 8, 4, 2))
    ir = rng.normal(size=(pairs, 8, 4, 2))
    labels = np.repeat(np.arange(cfg["train.p"]), k)

    def loss_fn():
        fwd = net.forward_pairs(vis, ir, labels)
        return joint_loss(fwd.pooled, fwd.middles, fwd.inference,
                          fwd.inference_labels, net.classifier, k).total

    with Tape() as tape:
        loss = loss_fn()
    backward(loss, tape)

    worst = 0.0
    exempt, checked = [], []
    ok = True
    for p in net.trainable_parameters():
        grad = p.value.grad
        if grad is None:
            ok = False
            continue
        if p.value.ste_tainted:
            exempt.append(p.name)
            if not (np.all(np.isfinite(grad)) and np.max(np.abs(grad)) < BOUND):
                ok = False
            continue
        checked.append(p.name)
        def f(x, p=p):
            saved = p.value.data
            p.value.data = x.data
            try:
                return loss_fn()
            finally:
                p.value.data = saved
        fd = finite_diff_grad(f, p.value, h=FD_STEP)
        worst = max(worst, relative_error(grad, fd.data))
    ok = ok and worst < TOLERANCE
    detail = f"{len(checked)} params FD-checked, {len(exempt)} straight-through exempt"
    return CheckResult("", ok, worst, detail)


def check_end_to_end_no_step():
    """Same tiny model with the hypergraph stage disabled.

    Without the step threshold no gradient is straight-through-tainted, so
    every trainable parameter (stem, both branches, attention fusion,
    classifier) must match finite differences exactly.
    """
    cfg = dict(tiny_config())
    cfg["hsl.enabled"] = False
    rng = np.random.default_rng(101)
    net = Network(cfg, rng, num_classes=2)
    k = cfg["train.k"]
    pairs = cfg["train.p"] * k
    vis = rng.normal(size=(pairs, 8, 4, 2))
    ir = rng.normal(size=(pairs, 8, 4, 2))
    labels = np.repeat(np.arange(cfg["train.p"]), k)

    def loss_fn():
        fwd = net.forward_pairs(vis, ir, labels)
        return joint_loss(fwd.pooled, fwd.middles, fwd.inference,
                          fwd.inference_labels, net.classifier, k).total

    with Tape() as tape:
        loss = loss_fn()
    backward(loss, tape)
    worst = 0.0
    ok = True
    n_checked = 0
    for p in net.trainable_parameters():
        if p.value.grad is None or p.value.ste_tainted:
            ok = False
            continue
        n_checked += 1
        def f(x, p=p):
            saved = p.value.data
            p.value.data = x.data
            try:
                return loss_fn()
            finally:
                p.value.data = saved
        fd = finite_diff_grad(f, p.value, h=FD_STEP)
        worst = max(worst, relative_error(p.value.grad, fd.data))
    ok = ok and worst < TOLERANCE
    return CheckResult("", ok, worst, f"{n_checked} params FD-checked, none exempt")


CHECKS: dict[str, Callable[[], CheckResult]] = {
    "matmul": check_matmul,
    "matmul_batched": check_matmul_batched,
    "add": check_add,
    "sub": check_sub,
    "mul": check_mul,
    "div": check_div,
    "transpose": check_transpose,
    "reshape": check_reshape,
    "concat": check_concat,
    "slice": check_slice,
    "relu": check_relu,
    "exp": check_exp,
    "log": check_log,
    "absolute": check_absolute,
    "power": check_power,
    "power_fractional": check_power_fractional,
    "clamp_min": check_clamp_min,
    "sum": check_sum,
    "mean": check_mean,
    "softmax_rows": check_softmax_rows,
    "l2_normalize_rows": check_l2_normalize_rows,
    "cholesky": check_cholesky,
    "solve_lower_triangular": check_solve_lower_triangular,
    "extract_patches": check_extract_patches,
    "cross_entropy_rows": check_cross_entropy_rows,
    "l1_distance": check_l1_distance,
    "step_straight_through": check_step_straight_through,
    "whiten_nodes": check_whiten_nodes,
    "gat_align": check_gat_align,
    "pool": check_pool,
    "identity_center": check_identity_center,
    "mric_pair": check_mric_pair,
    "triplet_loss": check_triplet_loss,
    "end_to_end": check_end_to_end,
    "end_to_end_no_step": check_end_to_end_no_step,
}


def run(names: Optional[list[str]] = None) -> list[CheckResult]:
    selected = names or list(CHECKS)
    results = []
    for name in selected:
        if name not in CHECKS:
            raise KeyError(f"unknown gradcheck {name!r}; known: {', '.join(CHECKS)}")
        results.append(_named(name, CHECKS[name]))
    return results
