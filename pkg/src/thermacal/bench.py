"""Performance harness for the correction hot paths.

Two benchmarks: the kernel benchmark compares the entry-wise double loop
against the expanded-norm vectorized cross-covariance, and the pipeline
benchmark measures corrected-frame throughput over chunk sizes with and
without prefetching. Every variant must produce identical output (after
1e-12 canonicalization) before any timing is reported: optimization never
changes results.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ContractError, NumericalError
from .geometry import correct_depth, iter_feature_chunks
from .gp import FittedGP, Hyperparams, cross_kernel_fast, kernel_eval
from .simulate import Manifest

MAX_KERNEL_ENTRIES = 2_000_000_000

DEFAULT_BENCH_HYPER = Hyperparams(
    w=np.array([2.0, 0.04, 1.29, 0.002]), sigma_s=0.031, sigma_y=0.044
)


@dataclass
class BenchReport:
    """One benchmark row."""

    variant: str
    frame_size: int  # query points per frame
    n_train: int
    time_s: float
    fps: float
    checksum: str
    note: str = ""

    def to_dict(self):
        return asdict(self)


def output_checksum(arr):
    """Digest of an array rounded to 1e-12, so equal-within-tolerance outputs
    from different execution plans hash identically."""
    a = np.ascontiguousarray(np.round(np.asarray(arr, dtype=np.float64), 12))
    h = hashlib.sha256()
    h.update(str(a.shape).encode())
    h.update(a.tobytes())
    return h.hexdigest()[:16]


def _median_time(fn, trials, warmup=1):
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(trials):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def bench_kernel(
    n_train,
    n_query,
    hyper=None,
    trials=5,
    chunk=8192,
    naive_queries=None,
    seed=0,
):
    """Time the naive and vectorized cross-covariance on identical random data.

    The naive variant is the entry-wise double loop; its python-level cost is
    quadratic, so for large inputs it is timed on `naive_queries` columns
    (default: enough to be stable, at least 64) and scaled linearly to the
    full query count -- each entry is computed independently, so the cost is
    exactly linear in the number of queries. Elementwise equivalence at 1e-8
    relative is asserted on every entry the naive variant computes; a
    violation aborts the benchmark.

    Returns (naive_report, fast_report).
    """
    if n_train < 1 or n_query < 1:
        raise ContractError("benchmark sizes must be >= 1")
    if n_train * n_query > MAX_KERNEL_ENTRIES:
        raise ContractError(
            f"{n_train} x {n_query} exceeds the {MAX_KERNEL_ENTRIES:.0e}-entry guard"
        )
    hyper = hyper or DEFAULT_BENCH_HYPER
    rng = np.random.default_rng(seed)
    A = rng.uniform(-1.0, 1.0, (n_train, 4))
    # Degenerate 1x1 case: self-covariance of a single point (= sigma_s^2).
    B = A.copy() if n_train == n_query == 1 else rng.uniform(-1.0, 1.0, (n_query, 4))

    if naive_queries is None:
        naive_queries = n_query if n_query <= 512 else max(64, n_query // 512)
    naive_queries = min(naive_queries, n_query)
    Bn = B[:naive_queries]

    def naive_pass():
        out = np.empty((n_train, naive_queries))
        for i in range(n_train):
            ai = A[i]
            for j in range(naive_queries):
                out[i, j] = kernel_eval(ai, Bn[j], False, hyper)
        return out

    buf = np.empty((n_train, min(chunk, n_query)))

    def fast_pass(digest=None):
        for lo in range(0, n_query, chunk):
            hi = min(lo + chunk, n_query)
            # column slices of buf are not C-contiguous; ragged tail allocates
            out = buf if hi - lo == buf.shape[1] else None
            out = cross_kernel_fast(A, B[lo:hi], hyper, out=out)
            if digest is not None:
                digest.update(np.round(out, 12).tobytes())

    # Correctness precedes speed: every naive entry must match the fast path.
    naive_out = naive_pass()
    fast_cols = cross_kernel_fast(A, Bn, hyper)
    denom = np.maximum(np.abs(naive_out), 1e-300)
    max_rel = float(np.max(np.abs(fast_cols - naive_out) / denom))
    if max_rel > 1e-8:
        raise NumericalError(
            f"fast/naive kernel mismatch: max relative error {max_rel:.3e} > 1e-8"
        )
    naive_checksum = output_checksum(naive_out)

    t_naive_sub = _median_time(naive_pass, trials=min(trials, 3), warmup=0)
    t_naive = t_naive_sub * (n_query / naive_queries)
    naive_note = (
        ""
        if naive_queries == n_query
        else f"measured on {naive_queries} of {n_query} queries, scaled linearly"
    )

    t_fast = _median_time(fast_pass, trials=trials, warmup=1)
    fast_digest = hashlib.sha256()
    fast_digest.update(str((n_train, n_query)).encode())
    fast_pass(fast_digest)
    fast_checksum = fast_digest.hexdigest()[:16]

    naive = BenchReport(
        variant="cross-kernel naive (double loop)",
        frame_size=n_query,
        n_train=n_train,
        time_s=t_naive,
        fps=1.0 / t_naive if t_naive > 0 else float("inf"),
        checksum=naive_checksum,
        note=naive_note,
    )
    fast = BenchReport(
        variant="cross-kernel fast (expanded norm)",
        frame_size=n_query,
        n_train=n_train,
        time_s=t_fast,
        fps=1.0 / t_fast if t_fast > 0 else float("inf"),
        checksum=fast_checksum,
        note=f"equivalent to naive on {naive_queries} checked queries "
        f"(max rel err {max_rel:.2e})",
    )
    return naive, fast


def _assembly_fraction(depth, temp, cam, chunk, frame_time):
    t0 = time.perf_counter()
    for _ in iter_feature_chunks(depth, temp, cam, chunk):
        pass
    t_asm = time.perf_counter() - t0
    return t_asm / frame_time if frame_time > 0 else 0.0


def bench_pipeline(
    dataset_dir,
    model_path,
    chunk_sizes=(4096, 16384),
    prefetch=True,
    trials=5,
    position=None,
    temperature=None,
):
    """Corrected-frame throughput per (chunk size, prefetch) configuration.

    Times the offset computation and application per frame (no confidence
    map, matching the per-frame correction the FPS figures describe). All
    configurations must produce identical canonicalized offset maps; a
    checksum divergence aborts.
    """
    manifest = Manifest.load(dataset_dir)
    gp = FittedGP.load(model_path)
    cam = manifest.camera()
    entry = (
        manifest.find(position, temperature)
        if position is not None and temperature is not None
        else manifest.entries[-1]
    )
    depth = manifest.load_obs(entry)
    temp = entry["temperature"]

    configs = [(c, False) for c in chunk_sizes]
    if prefetch:
        configs += [(c, True) for c in chunk_sizes]

    reports = []
    for chunk, pf in configs:
        def run():
            return correct_depth(
                depth, temp, gp, cam, chunk=chunk, with_confidence=False, prefetch=pf
            )

        t = _median_time(run, trials=trials, warmup=1)
        result = run()
        checksum = output_checksum(result.delta.data[depth.valid_mask()])
        note = f"chunk={chunk} prefetch={'on' if pf else 'off'}"
        if pf:
            frac = _assembly_fraction(depth, temp, cam, chunk, t)
            note += f" assembly={frac * 100:.1f}% of frame time"
            if frac < 0.05:
                note += " (below 5%: overlap gain not expected)"
        reports.append(
            BenchReport(
                variant="pipeline correction",
                frame_size=int(depth.valid_mask().sum()),
                n_train=gp.n,
                time_s=t,
                fps=1.0 / t if t > 0 else float("inf"),
                checksum=checksum,
                note=note,
            )
        )

    checksums = {r.checksum for r in reports}
    if len(checksums) != 1:
        raise NumericalError(
            f"benchmark variants disagree on outputs: checksums {sorted(checksums)}"
        )
    return reports
