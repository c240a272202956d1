"""Self-checks behind ``biflow check``: BFE equivalence, op counts, gradients."""

from __future__ import annotations

import numpy as np

from . import numeric as nm
from .bench import counted_macs, flops_decomposed, flops_naive
from .geometry import PointCloud
from .layers import BfeLayer, SetLayer, bfp_decomposed, bfp_naive, set_layer

EQUIV_TOL = 1e-10
GRAD_TOL = 1e-4


def random_instance(rng: np.random.Generator, max_n=64, max_k=8, max_c=16, max_cout=16):
    n_p, m_p = (int(x) for x in rng.integers(1, max_n + 1, size=2))
    k = int(rng.integers(1, min(max_k, n_p, m_p) + 1))
    c = int(rng.integers(1, max_c + 1))
    c_out = int(rng.integers(1, max_cout + 1))
    P = PointCloud(rng.normal(size=(n_p, 3)), rng.normal(size=(n_p, c)))
    Q = PointCloud(rng.normal(size=(m_p, 3)), rng.normal(size=(m_p, c)))
    W = rng.normal(size=(3 + 2 * c, c_out))
    b = rng.normal(size=c_out)
    return P, Q, BfeLayer.from_naive(W, b, k=k)


def bfp_max_difference(P, Q, layer) -> float:
    fa, ga = bfp_naive(P, Q, layer)
    fb, gb = bfp_decomposed(P, Q, layer)
    return max(
        float(np.max(np.abs(fa.aug_feats - fb.aug_feats))),
        float(np.max(np.abs(ga.aug_feats - gb.aug_feats))),
    )


def check_equivalence(seed: int, instances: int) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = max(bfp_max_difference(*random_instance(rng)) for _ in range(instances))
    return worst <= EQUIV_TOL, f"max |naive - decomposed| = {worst:.3g} over {instances} instances"


def check_op_counts(seed: int, instances: int) -> tuple[bool, str]:
    rng = np.random.default_rng(seed + 1)
    bad = 0
    for _ in range(instances):
        s = (int(rng.integers(1, 40)), int(rng.integers(1, 40)), 0, int(rng.integers(0, 12)),
             int(rng.integers(1, 12)))
        s = (s[0], s[1], int(rng.integers(1, min(s[0], s[1]) + 1)), s[3], s[4])
        if counted_macs("naive", s) != flops_naive(*s) or counted_macs("decomposed", s) != flops_decomposed(*s):
            bad += 1
    return bad == 0, f"{instances - bad}/{instances} size tuples match both closed forms"


def _kink_free_bfe_problem(rng, n_p=5, m_p=6, k=3, c=3, c_out=4, eps=1e-5):
    """Random BFE problem whose pre-activations and member maxima avoid kinks/ties by 10*eps."""
    while True:
        P, Q, layer = random_instance_sized(rng, n_p, m_p, k, c, c_out)
        fa_pre = _bfe_preactivations(P, Q, layer)
        if all(np.min(np.abs(h)) > 10 * eps and _min_max_gap(h) > 10 * eps for h in fa_pre):
            return P, Q, layer


def random_instance_sized(rng, n_p, m_p, k, c, c_out):
    P = PointCloud(rng.normal(size=(n_p, 3)), rng.normal(size=(n_p, c)))
    Q = PointCloud(rng.normal(size=(m_p, 3)), rng.normal(size=(m_p, c)))
    return P, Q, BfeLayer.from_naive(rng.normal(size=(3 + 2 * c, c_out)), rng.normal(size=c_out), k=k)


def _bfe_preactivations(P, Q, layer):
    from .geometry import knn_group

    W = np.concatenate([layer.W_p, layer.W_b, layer.W_r])
    out = []
    for A, B in ((P, Q), (Q, P)):
        idx = knn_group(A.coords, B.coords, layer.k)
        m = np.concatenate(
            [B.coords[idx] - A.coords[:, None, :], B.feats[idx],
             np.repeat(A.feats[:, None, :], layer.k, axis=1)], axis=2)
        out.append(m @ W + layer.bias)
    return out


def _min_max_gap(h: np.ndarray) -> float:
    if h.shape[1] < 2:
        return np.inf
    s = np.sort(h, axis=1)
    return float(np.min(s[:, -1, :] - s[:, -2, :]))


def bfe_grad_error(rng, decomposed: bool, eps=1e-5) -> float:
    P, Q, layer = _kink_free_bfe_problem(rng, eps=eps)
    fn = bfp_decomposed if decomposed else bfp_naive

    def loss(W_p, W_b, W_r, b, pf, qf):
        lay = BfeLayer(W_p, W_b, W_r, b, k=layer.k)
        fa, ga = fn(PointCloud(P.coords, pf), PointCloud(Q.coords, qf), lay)
        return nm.add(nm.total(fa.aug_feats), nm.scale(nm.total(ga.aug_feats), 0.5))

    return nm.grad_check(loss, [layer.W_p, layer.W_b, layer.W_r, layer.bias, P.feats, Q.feats], eps)


def check_gradients(seed: int) -> tuple[bool, str]:
    rng = np.random.default_rng(seed + 2)
    errs = {"bfp_naive": bfe_grad_error(rng, False), "bfp_decomposed": bfe_grad_error(rng, True)}
    # set layer / flow embedding on a tiny toy
    W = rng.normal(size=(5, 4))
    b = rng.normal(size=4)
    groups = rng.normal(size=(3, 2, 5))

    def sl(W, b, g):
        return nm.total(set_layer(g, SetLayer(((W, b),))))

    errs["set_layer"] = nm.grad_check(sl, [W, b, groups])
    worst = max(errs.values())
    detail = ", ".join(f"{k}={v:.2g}" for k, v in errs.items())
    return bool(worst <= GRAD_TOL), detail


def check_frame_swap(seed: int, instances: int) -> tuple[bool, str]:
    rng = np.random.default_rng(seed + 3)
    worst = 0.0
    for _ in range(instances):
        P, Q, layer = random_instance(rng)
        f1, g1 = bfp_decomposed(P, Q, layer)
        f2, g2 = bfp_decomposed(Q, P, layer)
        worst = max(worst, float(np.max(np.abs(f1.aug_feats - g2.aug_feats))),
                    float(np.max(np.abs(g1.aug_feats - f2.aug_feats))))
    return worst == 0.0, f"max swap difference {worst:.3g}"


def run_all(seed: int = 0, instances: int = 20) -> list[tuple[str, bool, str]]:
    out = []
    for name, fn in (
        ("decomposition_equivalence", lambda: check_equivalence(seed, instances)),
        ("op_count_exactness", lambda: check_op_counts(seed, instances)),
        ("frame_swap_symmetry", lambda: check_frame_swap(seed, instances)),
        ("gradient_check", lambda: check_gradients(seed)),
    ):
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashing suite is a failing suite
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        out.append((name, ok, detail))
    return out
