"""Naive vs streaming attention-map replacement: time, scratch memory and agreement."""

from __future__ import annotations

import statistics
import time
from dataclasses import asdict, dataclass

import numpy as np

from .attention import DEFAULT_BLOCK, AuxMeter, ReplacementSpec, attn_amr, attn_amr_naive, relative_error
from .core import Purpose, RngStream, gaussian
from .errors import ConfigError

DEFAULT_SIZES = (128, 256, 512, 1024, 2048, 4096)
# fraction of key columns whose logits are borrowed from branch 1
REPLACE_EVERY = 8


@dataclass
class BenchRow:
    n: int
    m: int
    naive_time: float
    streaming_time: float
    naive_aux_bytes: int
    streaming_aux_bytes: int
    deviation: float

    @property
    def speedup(self) -> float:
        return self.naive_time / self.streaming_time if self.streaming_time > 0 else float("inf")


def bench_inputs(n: int, m: int, d: int, dv: int, seed: int = 0):
    stream = RngStream(seed, Purpose.SAMPLING).split(n * 100003 + m)
    q1, q2 = gaussian(stream.split(1), (n, d)), gaussian(stream.split(2), (n, d))
    k1, k2 = gaussian(stream.split(3), (m, d)), gaussian(stream.split(4), (m, d))
    v1, v2 = gaussian(stream.split(5), (m, dv)), gaussian(stream.split(6), (m, dv))
    spec = ReplacementSpec([(j, j) for j in range(0, m, REPLACE_EVERY)])
    return (q1, k1, v1, q2, k2, v2), spec


def _median_time(fn, reps: int) -> float:
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def aux_bytes(kind: str, n: int, m: int, d: int = 64, dv: int = 64, block: int = DEFAULT_BLOCK) -> int:
    """Peak scratch bytes of one AMR evaluation."""
    args, spec = bench_inputs(n, m, d, dv)
    meter = AuxMeter()
    if kind == "naive":
        attn_amr_naive(*args, spec, meter=meter)
    else:
        attn_amr(*args, spec, meter=meter, block=block)
    return meter.peak


def bench_size(n: int, m: int, d: int = 64, dv: int = 64, reps: int = 5, block: int = DEFAULT_BLOCK) -> BenchRow:
    args, spec = bench_inputs(n, m, d, dv)
    mn, ms = AuxMeter(), AuxMeter()
    ref = attn_amr_naive(*args, spec, meter=mn)
    got = attn_amr(*args, spec, meter=ms, block=block)
    dev = max(relative_error(got[0], ref[0]), relative_error(got[1], ref[1]))
    t_naive = _median_time(lambda: attn_amr_naive(*args, spec), reps)
    t_stream = _median_time(lambda: attn_amr(*args, spec, block=block), reps)
    return BenchRow(n, m, t_naive, t_stream, mn.peak, ms.peak, dev)


def run_bench(sizes=DEFAULT_SIZES, d: int = 64, dv: int = 64, reps: int = 5, block: int = DEFAULT_BLOCK,
              fixed_n: int = 256) -> dict:
    """Square sizes n = m for timing, plus an m sweep at fixed n for the memory slope."""
    sizes = [int(s) for s in sizes]
    if not sizes or min(sizes) < 1 or reps < 1 or d < 1 or dv < 1 or block < 1:
        raise ConfigError(f"invalid bench grid: sizes={sizes} d={d} dv={dv} reps={reps} block={block}")
    rows = [bench_size(s, s, d, dv, reps, block) for s in sizes]
    sweep = [{"m": m, "naive_aux_bytes": aux_bytes("naive", fixed_n, m, d, dv, block),
              "streaming_aux_bytes": aux_bytes("streaming", fixed_n, m, d, dv, block)} for m in sizes]
    return {
        "params": {"sizes": sizes, "d": d, "dv": dv, "reps": reps, "block": block, "fixed_n": fixed_n},
        "rows": [dict(asdict(r), speedup=r.speedup) for r in rows],
        "m_sweep": sweep,
        "max_deviation": max(r.deviation for r in rows),
    }


def format_report(report: dict) -> str:
    lines = [f"{'n=m':>6} {'naive s':>10} {'stream s':>10} {'ratio':>6} {'naive aux':>12} {'stream aux':>11} {'dev':>9}"]
    for r in report["rows"]:
        lines.append(f"{r['n']:>6} {r['naive_time']:>10.4f} {r['streaming_time']:>10.4f} {r['speedup']:>6.2f} "
                     f"{r['naive_aux_bytes']:>12} {r['streaming_aux_bytes']:>11} {r['deviation']:>9.2e}")
    return "\n".join(lines)
