"""Central finite-difference checks for every differentiable op and loss."""
from __future__ import annotations

import time
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import losses
from .nn import NetConfig, SegNetwork

TOLERANCE = 1e-4


def numerical_grad(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for i in range(x.size):
        orig = x.flat[i]
        x.flat[i] = orig + eps
        fp = f(x)
        x.flat[i] = orig - eps
        fm = f(x)
        x.flat[i] = orig
        grad.flat[i] = (fp - fm) / (2 * eps)
    return grad


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| / max(1, |a|, |n|) over elements."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def _projected(node: ad.Node, weights: np.ndarray) -> ad.Node:
    # scalar <weights, node> so every output element is exercised
    return ad.external(float(np.sum(node.value * weights)), [node], [weights])


def _graph_check(build, arrays: dict, eps: float) -> float:
    """Compare autodiff grads of ``build(**leaves)`` against finite differences."""
    leaves = {k: ad.Parameter(k, v) for k, v in arrays.items()}
    root = build(**leaves)
    ad.backward(root)
    worst = 0.0
    for name, leaf in leaves.items():
        def f(v, name=name):
            vals = {k: (v if k == name else p.value) for k, p in leaves.items()}
            with ad.no_grad():
                return float(build(**{k: ad.constant(x) for k, x in vals.items()}).value)
        worst = max(worst, max_rel_err(leaf.grad, numerical_grad(f, leaf.value, eps)))
    return worst


def check_conv3x3(rng, eps):
    x = rng.normal(size=(1, 2, 4, 4))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    r = rng.normal(size=(1, 3, 4, 4))
    return _graph_check(lambda x, w, b: _projected(ad.conv2d_3x3(x, w, b), r), dict(x=x, w=w, b=b), eps)


def check_conv1x1(rng, eps):
    x = rng.normal(size=(2, 3, 3, 3))
    w = rng.normal(size=(4, 3, 1, 1))
    b = rng.normal(size=4)
    r = rng.normal(size=(2, 4, 3, 3))
    return _graph_check(lambda x, w, b: _projected(ad.conv2d_1x1(x, w, b), r), dict(x=x, w=w, b=b), eps)


def check_relu(rng, eps):
    x = rng.normal(size=(2, 3, 4))
    # keep evaluation points away from the kink
    x = np.where(np.abs(x) < 0.1, x + np.sign(x + 1e-12) * 0.2, x)
    r = rng.normal(size=x.shape)
    return _graph_check(lambda x: _projected(ad.relu(x), r), dict(x=x), eps)


def _random_mask(rng, C, h, w, ignore_frac=0.1):
    mask = rng.integers(0, C, size=(h, w)).astype(np.uint8)
    mask[rng.random((h, w)) < ignore_frac] = 255
    return mask


def check_task_ce(rng, eps):
    scores = rng.normal(size=(3, 2, 2))
    mask = np.array([[0, 1], [2, 255]], dtype=np.uint8)
    _, g = losses.task_cross_entropy(scores, mask)
    num = numerical_grad(lambda s: losses.task_cross_entropy(s, mask)[0], scores, eps)
    return max_rel_err(g, num)


def check_channel_kld(rng, eps):
    yt = rng.normal(size=(3, 3, 3))
    ys = rng.normal(size=(3, 3, 3))
    _, g = losses.channel_kld_loss(yt, ys, 2.0)
    num = numerical_grad(lambda s: losses.channel_kld_loss(yt, s, 2.0)[0], ys, eps)
    return max_rel_err(g, num)


def _triplet_instance(rng, C=4, K=3, margin=0.5):
    # redraw until every hinge term and distance is far from a kink
    while True:
        ps = rng.normal(size=(C, K))
        pt = rng.normal(size=(C, K))
        diff = ps[:, None, :] - pt[None, :, :]
        dist = np.sqrt((diff**2).sum(-1))
        terms = margin + np.diag(dist)[:, None] - dist
        off = ~np.eye(C, dtype=bool)
        if np.min(np.abs(terms[off])) > 1e-2 and dist.min() > 1e-2 and np.any(terms[off] > 0):
            return ps, pt, margin


def check_triplet(rng, eps):
    ps, pt, margin = _triplet_instance(rng)
    present = np.ones(len(ps), dtype=bool)
    counts = np.ones(len(ps), dtype=np.int64)
    P = lambda v: losses.PrototypeMatrix(v, present, counts)  # noqa: E731
    _, g, _ = losses.triplet_prototype_loss(P(ps), P(pt), margin)
    num = numerical_grad(lambda v: losses.triplet_prototype_loss(P(v), P(pt), margin)[0], ps, eps)
    return max_rel_err(g, num)


def check_i2ckd_features(rng, eps):
    """Triplet loss pulled back through the prototype computation."""
    C, K, h, w = 3, 2, 4, 4
    for _ in range(100):
        mask = _random_mask(rng, C, h, w)[None]
        ft = rng.normal(size=(1, K, h, w))
        fs = rng.normal(size=(1, K, h, w))
        loss, g, stats = losses.batch_i2ckd(ft, fs, mask, C, 0.5)
        if stats["active_pairs"] == 0:
            continue
        num = numerical_grad(lambda v: losses.batch_i2ckd(ft, v, mask, C, 0.5)[0], fs, eps)
        return max_rel_err(g, num)
    raise RuntimeError("could not draw an active i2ckd instance")


def check_total_loss(rng, eps):
    """Weighted three-part loss through a tiny student, w.r.t. every parameter."""
    from .trainer import distill_objective

    cfg = NetConfig(in_channels=3, widths=[3, 4], num_classes=3, projection=5)
    student = SegNetwork(cfg, seed=int(rng.integers(1 << 30)))
    teacher = SegNetwork(NetConfig(widths=[5], num_classes=3), seed=int(rng.integers(1 << 30)))
    teacher.freeze()
    x = rng.random((2, 3, 4, 4))
    masks = np.stack([_random_mask(rng, 3, 4, 4, 0.0) for _ in range(2)])
    weights = losses.LossWeights(0.6, 3.0, 2.0, margin=5.0)
    with ad.no_grad():
        ft, st = teacher.forward(x)
    t_out = (ft.value, st.value)

    student.zero_grads()
    f, s = student.forward(x)
    loss, _ = distill_objective(f, s, masks, weights, t_out)
    ad.backward(loss)
    worst = 0.0
    for p in student.parameters:
        def fn(v, p=p):
            saved = p.value
            p.value = v
            with ad.no_grad():
                f2, s2 = student.forward(x)
                out = distill_objective(f2, s2, masks, weights, t_out)[1]["l_total"]
            p.value = saved
            return out
        worst = max(worst, max_rel_err(p.grad, numerical_grad(fn, p.value.copy(), eps)))
    return worst


CHECKS = {
    "conv2d_3x3": check_conv3x3,
    "conv2d_1x1": check_conv1x1,
    "relu": check_relu,
    "task_cross_entropy": check_task_ce,
    "channel_kld_loss": check_channel_kld,
    "triplet_prototype_loss": check_triplet,
    "i2ckd_through_prototypes": check_i2ckd_features,
    "total_loss_network": check_total_loss,
}


def run_checks(seed: int = 0, eps: float = 1e-5, tol: float = TOLERANCE, names=None) -> list[dict]:
    results = []
    for name, fn in CHECKS.items():
        if names and name not in names:
            continue
        rng = np.random.default_rng(np.random.SeedSequence([seed, len(name)] + [ord(c) for c in name]))
        start = time.perf_counter()
        err = fn(rng, eps)
        results.append({
            "check": name,
            "max_rel_err": err,
            "tolerance": tol,
            "perturbation": eps,
            "passed": bool(err < tol),
            "seconds": time.perf_counter() - start,
        })
    return results
