"""Ready-made gradient-check cases: every primitive op plus a whole
recurrent model, shared by the test suite and the `gradcheck` CLI verb.

Each case's loss is the op output projected onto a fixed random tensor
(drawn once at case construction), which keeps gradients well scaled and
the loss a pure function of its leaves.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .config import ModelConfig
from .gradcheck import check_gradients
from .recurrent import build_model, recurrent_forward
from .tensor import Tensor, no_grad
from .training import iteration_weights, recurrent_loss

F64 = np.float64


def _leaf(rng, shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True, dtype=F64)


def _projected(rng, forward):
    """loss_fn = sum(forward() * c) with c drawn once, matching the shape."""
    with no_grad():
        shape = forward().shape
    c = Tensor(rng.normal(size=shape), dtype=F64)

    def loss_fn():
        return ops.reduce_sum(ops.mul(forward(), c))

    return loss_fn


def op_checks(rng: np.random.Generator):
    """Build the (name, loss_fn, tensors) finite-difference cases."""
    cases = []

    x = _leaf(rng, (2, 3, 8, 8))
    k = _leaf(rng, (4, 3, 3, 3))
    b = _leaf(rng, (4,))
    cases.append(
        ("conv2d", _projected(rng, lambda: ops.conv2d(x, k, b, 1, 1)),
         {"x": x, "k": k, "b": b})
    )

    xs = _leaf(rng, (1, 2, 9, 9))
    ks = _leaf(rng, (3, 2, 3, 3))
    bs = _leaf(rng, (3,))
    cases.append(
        ("conv2d_stride2", _projected(rng, lambda: ops.conv2d(xs, ks, bs, 2, 1)),
         {"x": xs, "k": ks, "b": bs})
    )

    xt = _leaf(rng, (2, 3, 5, 5))
    kt = _leaf(rng, (3, 4, 2, 2))
    bt = _leaf(rng, (4,))
    cases.append(
        ("conv_transpose2d",
         _projected(rng, lambda: ops.conv_transpose2d(xt, kt, bt, 2, 0)),
         {"x": xt, "k": kt, "b": bt})
    )

    xt1 = _leaf(rng, (1, 2, 6, 6))
    kt1 = _leaf(rng, (2, 3, 3, 3))
    bt1 = _leaf(rng, (3,))
    cases.append(
        ("conv_transpose2d_pad",
         _projected(rng, lambda: ops.conv_transpose2d(xt1, kt1, bt1, 1, 1)),
         {"x": xt1, "k": kt1, "b": bt1})
    )

    # values spread apart so finite-difference steps cannot flip an argmax
    xm = Tensor(
        rng.permutation(np.linspace(-1.0, 1.0, 2 * 6 * 6)).reshape(1, 2, 6, 6),
        requires_grad=True, dtype=F64,
    )
    cases.append(("maxpool2d", _projected(rng, lambda: ops.maxpool2d(xm)), {"x": xm}))

    xg = _leaf(rng, (2, 8, 4, 4))
    sg = Tensor(rng.uniform(0.5, 1.5, size=8), requires_grad=True, dtype=F64)
    hg = _leaf(rng, (8,))
    cases.append(
        ("group_norm", _projected(rng, lambda: ops.group_norm(xg, 2, sg, hg)),
         {"x": xg, "scale": sg, "shift": hg})
    )

    # keep relu inputs away from the kink at 0
    xr = Tensor(
        rng.uniform(0.1, 1.0, size=(2, 3, 4, 4))
        * rng.choice([-1.0, 1.0], size=(2, 3, 4, 4)),
        requires_grad=True, dtype=F64,
    )
    cases.append(("relu", _projected(rng, lambda: ops.relu(xr)), {"x": xr}))

    xa = _leaf(rng, (2, 2, 4, 4))
    cases.append(("sigmoid", _projected(rng, lambda: ops.sigmoid(xa)), {"x": xa}))

    xb = _leaf(rng, (2, 2, 4, 4))
    cases.append(("tanh", _projected(rng, lambda: ops.tanh(xb)), {"x": xb}))

    pa = _leaf(rng, (3, 2, 2, 2))
    pb = _leaf(rng, (3, 2, 2, 2))
    cases.append(
        ("add_mul", _projected(rng, lambda: ops.mul(ops.add(pa, pb), pb)),
         {"a": pa, "b": pb})
    )

    bz = Tensor(rng.uniform(0.1, 0.9, size=(2, 2, 3, 3)), requires_grad=True, dtype=F64)
    ba = _leaf(rng, (2, 2, 3, 3))
    bb = _leaf(rng, (2, 2, 3, 3))
    cases.append(
        ("affine_blend", _projected(rng, lambda: ops.affine_blend(bz, ba, bb)),
         {"z": bz, "a": ba, "b": bb})
    )

    ca = _leaf(rng, (2, 3, 4, 4))
    cb = _leaf(rng, (2, 2, 4, 4))
    cases.append(
        ("concat_slice",
         _projected(rng, lambda: ops.slice_channels(ops.concat_channels(ca, cb), 1, 4)),
         {"a": ca, "b": cb})
    )

    lg = _leaf(rng, (2, 1, 6, 6), -3.0, 3.0)
    tgt = Tensor(rng.uniform(0.05, 0.95, size=(2, 1, 6, 6)), requires_grad=True, dtype=F64)
    cases.append(
        ("bce_with_logits", lambda: ops.bce_with_logits(lg, tgt),
         {"logits": lg, "target": tgt})
    )

    cx = _leaf(rng, (1, 2, 8, 8))
    ck = _leaf(rng, (4, 2, 3, 3))
    cbias = _leaf(rng, (4,))
    cs = Tensor(rng.uniform(0.5, 1.5, size=4), requires_grad=True, dtype=F64)
    chs = _leaf(rng, (4,))

    def composite_forward():
        y = ops.conv2d(cx, ck, cbias, 1, 1)
        y = ops.group_norm(y, 2, cs, chs)
        y = ops.relu(y)
        y = ops.maxpool2d(y)
        return ops.tanh(y)

    cases.append(
        ("composite", _projected(rng, composite_forward),
         {"x": cx, "k": ck, "b": cbias, "scale": cs, "shift": chs})
    )

    return cases


def run_op_checks(seeds=range(20), rel_tol=1e-4, coords_per_tensor=3, log=None):
    """Finite-difference check of every primitive over many seeds."""
    failures: list[str] = []
    worst_by_op: dict[str, float] = {}
    failed_ops: set[str] = set()
    for seed in seeds:
        rng = np.random.default_rng(1000 + seed)
        for name, loss_fn, tensors in op_checks(rng):
            worst, bad = check_gradients(
                loss_fn, tensors, rng,
                coords_per_tensor=coords_per_tensor, rel_tol=rel_tol,
            )
            worst_by_op[name] = max(worst_by_op.get(name, 0.0), worst)
            if bad:
                failed_ops.add(name)
                failures += [f"seed {seed} {name}: {msg}" for msg in bad]
    if log is not None:
        for name, worst in worst_by_op.items():
            status = "FAIL" if name in failed_ops else "PASS"
            log(f"  {status} {name:<22} worst rel err {worst:.3g}")
    return failures, worst_by_op


def model_check(seed: int, level: int = 3, size: int = 16, iterations: int = 2,
                coords_per_tensor: int = 1, rel_tol: float = 1e-3):
    """Whole-model check: dual-gate recurrent U-Net in float64."""
    rng = np.random.default_rng(5000 + seed)
    cfg = ModelConfig(variant="dru", level=level, iterations=iterations, in_channels=1)
    model = build_model(cfg, rng, dtype=F64)
    x = Tensor(rng.uniform(0.0, 1.0, size=(1, 1, size, size)), dtype=F64)
    target = Tensor((rng.uniform(size=(1, 1, size, size)) > 0.7).astype(F64), dtype=F64)
    weights = iteration_weights(iterations, 0.4)

    def loss_fn():
        return recurrent_loss(recurrent_forward(model, x, iterations), target, weights)

    tensors = dict(model.named_parameters())
    return check_gradients(
        loss_fn, tensors, rng, coords_per_tensor=coords_per_tensor,
        eps=1e-5, rel_tol=rel_tol,
    )
