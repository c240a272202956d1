"""Operation counts and wall-time comparison of the two BFE forms.

An "operation" is one multiply-accumulate inside a linear map; activations,
grouping and max-pooling are not counted.
"""

from __future__ import annotations

import io
import os
import time
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import numeric as nm
from .geometry import PointCloud, knn_group
from .layers import BfeLayer, bfp_decomposed, bfp_naive

CSV_HEADER = "variant,Np,Mp,K,C,Cout,ops,median_ms,iqr_ms"
REFERENCE_SIZES = (2048, 2048, 16, 64, 64)


@dataclass(frozen=True)
class Sizes:
    n_p: int
    m_p: int
    k: int
    c: int
    c_out: int

    def __post_init__(self):
        if min(self.n_p, self.m_p, self.k, self.c_out) < 1 or self.c < 0:
            raise ValueError(
                f"sizes must be positive (C may be 0): N'={self.n_p} M'={self.m_p} "
                f"K={self.k} C={self.c} C'={self.c_out}"
            )

    def as_tuple(self) -> tuple[int, int, int, int, int]:
        return (self.n_p, self.m_p, self.k, self.c, self.c_out)


def _sizes(*args) -> Sizes:
    if len(args) == 1 and isinstance(args[0], Sizes):
        return args[0]
    if len(args) == 1:
        args = tuple(args[0])
    return Sizes(*(int(a) for a in args))


def flops_naive(n_p, m_p=None, k=None, c=None, c_out=None) -> int:
    s = _sizes(n_p) if m_p is None else _sizes(n_p, m_p, k, c, c_out)
    return (s.n_p + s.m_p) * s.k * (3 + s.c + s.c) * s.c_out


def flops_decomposed(n_p, m_p=None, k=None, c=None, c_out=None) -> int:
    s = _sizes(n_p) if m_p is None else _sizes(n_p, m_p, k, c, c_out)
    return (s.n_p + s.m_p) * (s.k * 3 + s.c + s.c) * s.c_out


@dataclass(frozen=True)
class OpCountReport:
    sizes: Sizes
    naive_ops: int
    decomposed_ops: int

    @property
    def ratio(self) -> Fraction:
        return Fraction(self.decomposed_ops, self.naive_ops)


def op_count_report(*sizes) -> OpCountReport:
    s = _sizes(*sizes)
    return OpCountReport(s, flops_naive(s), flops_decomposed(s))


def random_bfe_problem(sizes, seed: int = 0, dtype=np.float64):
    """Random P, Q and a one-layer BFE of the requested sizes."""
    s = _sizes(sizes)
    rng = np.random.default_rng(seed)
    P = PointCloud(rng.normal(size=(s.n_p, 3)).astype(dtype), rng.normal(size=(s.n_p, s.c)).astype(dtype))
    Q = PointCloud(rng.normal(size=(s.m_p, 3)).astype(dtype), rng.normal(size=(s.m_p, s.c)).astype(dtype))
    W = rng.normal(size=(3 + 2 * s.c, s.c_out)).astype(dtype)
    b = rng.normal(size=s.c_out).astype(dtype)
    return P, Q, BfeLayer.from_naive(W, b, k=s.k)


def counted_macs(variant: str, sizes, seed: int = 0) -> int:
    """MACs recorded by the instrumented linear maps while running one BFE form."""
    P, Q, layer = random_bfe_problem(sizes, seed)
    fn = bfp_naive if variant == "naive" else bfp_decomposed
    with nm.count_macs() as counter:
        fn(P, Q, layer)
    return counter.total


@dataclass(frozen=True)
class TimingReport:
    sizes: Sizes
    repetitions: int
    naive_median_ms: float
    naive_iqr_ms: float
    decomposed_median_ms: float
    decomposed_iqr_ms: float
    ops: OpCountReport
    max_abs_diff: float

    def csv_rows(self) -> list[str]:
        s = self.sizes
        base = f"{s.n_p},{s.m_p},{s.k},{s.c},{s.c_out}"
        return [
            f"naive,{base},{self.ops.naive_ops},{self.naive_median_ms:.6f},{self.naive_iqr_ms:.6f}",
            f"decomposed,{base},{self.ops.decomposed_ops},"
            f"{self.decomposed_median_ms:.6f},{self.decomposed_iqr_ms:.6f}",
        ]


def configured_threads() -> int:
    return int(os.environ.get("BIFLOW_THREADS", "1"))


def _median_iqr(samples: Sequence[float]) -> tuple[float, float]:
    q1, med, q3 = np.percentile(np.asarray(samples) * 1e3, [25, 50, 75])
    return float(med), float(q3 - q1)


def time_compare(
    sizes=REFERENCE_SIZES,
    repetitions: int = 30,
    warmup: int = 5,
    dtype=np.float32,
    seed: int = 0,
    threads: int | None = None,
) -> TimingReport:
    """Median wall time of both BFE forms on identical inputs, single-threaded.

    Neighbour tables are built once outside the timed region; the two variants
    alternate within each repetition.
    """
    threads = configured_threads() if threads is None else threads
    if threads != 1:
        raise RuntimeError(f"timing requires single-threaded kernels, BIFLOW_THREADS={threads}")
    if repetitions < 10:
        raise ValueError(f"time_compare: need at least 10 repetitions, got {repetitions}")
    s = _sizes(sizes)
    P, Q, layer = random_bfe_problem(s, seed, dtype)
    nbrs = (knn_group(P.coords, Q.coords, s.k), knn_group(Q.coords, P.coords, s.k))

    with threadpool_limits(limits=1):
        ref_f, ref_g = bfp_naive(P, Q, layer, nbrs)
        dec_f, dec_g = bfp_decomposed(P, Q, layer, nbrs)
        diff = max(
            float(np.max(np.abs(ref_f.aug_feats - dec_f.aug_feats))),
            float(np.max(np.abs(ref_g.aug_feats - dec_g.aug_feats))),
        )
        scale = max(1.0, float(np.max(np.abs(ref_f.aug_feats))))
        tol = (1e-3 if dtype == np.float32 else 1e-9) * scale
        if diff > tol:
            raise AssertionError(f"time_compare: variants disagree by {diff:g}")
        for _ in range(warmup):
            bfp_naive(P, Q, layer, nbrs)
            bfp_decomposed(P, Q, layer, nbrs)
        t_naive, t_dec = [], []
        for _ in range(repetitions):
            t0 = time.perf_counter()
            bfp_naive(P, Q, layer, nbrs)
            t1 = time.perf_counter()
            bfp_decomposed(P, Q, layer, nbrs)
            t2 = time.perf_counter()
            t_naive.append(t1 - t0)
            t_dec.append(t2 - t1)
    nm_, ni = _median_iqr(t_naive)
    dm, di = _median_iqr(t_dec)
    return TimingReport(s, repetitions, nm_, ni, dm, di, op_count_report(s), diff)


def timing_csv(reports: Sequence[TimingReport]) -> str:
    out = io.StringIO()
    out.write("# ops = multiply-accumulates in BFE linear maps (activation, grouping, max excluded)\n")
    out.write(CSV_HEADER + "\n")
    for r in reports:
        for row in r.csv_rows():
            out.write(row + "\n")
    return out.getvalue()
