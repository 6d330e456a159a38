"""Memory and wall-time scaling measurements for the pipeline.

Peak memory is the maximum simultaneously-live instrumented allocation
of pipeline state (cache blocks plus the transient activations of the
current step), not process RSS; the cache component is also computed
analytically and the two must agree exactly. Timings are medians over
repeated runs, auto-repeated until each point spends at least 10 ms, and
scaling behaviour is summarized as fitted log-log slopes.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .streams import EmbeddingStream
from .tiling import SegmentationConfig, segment, uniform_segmentation
from .bridge import BridgeConfig, BridgeParams, run_pipeline
from .probe import probe_logits

__all__ = [
    "ScalingReport",
    "linear_fit",
    "loglog_slope",
    "measure_memory",
    "measure_time",
]


@dataclass
class ScalingReport:
    records: List[dict]
    fits: Dict[str, dict] = field(default_factory=dict)

    def to_csv(self) -> str:
        lines = ["n,K,phase,bytes_peak,ms_median"]
        for r in self.records:
            for phase, ms in r.get("phase_ms", {}).items():
                lines.append(f"{r['n']},{r['k']},{phase},"
                             f"{r.get('peak_bytes', '')},{ms:.4f}")
            if not r.get("phase_ms"):
                lines.append(f"{r['n']},{r['k']},total,{r.get('peak_bytes', '')},")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps({"records": self.records, "fits": self.fits}, indent=2)


def linear_fit(x: Sequence[float], y: Sequence[float]) -> Tuple[float, float, float]:
    """Least-squares y = a + b*x; returns (a, b, r_squared)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size < 2:
        return float(y[0]), 0.0, 1.0
    b, a = np.polyfit(x, y, 1)
    predicted = a + b * x
    ss_res = float(np.sum((y - predicted) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    return a, b, r2


def loglog_slope(x: Sequence[float], y: Sequence[float]) -> Tuple[float, float]:
    """Slope and R^2 of log y versus log x."""
    _, slope, r2 = linear_fit(np.log(np.asarray(x, float)),
                              np.log(np.asarray(y, float)))
    return slope, r2


class _StateMeter:
    """Tracks live cache bytes plus transient per-step allocation peaks."""

    def __init__(self, block_bytes: int):
        self.block_bytes = block_bytes
        self.cache_bytes = block_bytes  # initial memory block is live
        self.step_bytes = 0
        self.peak = self.cache_bytes
        self._prev_phase: Optional[str] = None

    def alloc(self, nbytes: int) -> None:
        self.step_bytes += nbytes
        self.peak = max(self.peak, self.cache_bytes + self.step_bytes)

    def phase(self, name: str) -> None:
        # a completed bridge step retires its activations but keeps one block
        if self._prev_phase == "bridge":
            self.cache_bytes += self.block_bytes
        self._prev_phase = name
        self.step_bytes = 0


def _random_stream(n: int, dim: int, seed: int) -> EmbeddingStream:
    rng = np.random.default_rng(seed)
    frames = rng.standard_normal((n, dim))
    frames /= np.linalg.norm(frames, axis=1, keepdims=True)
    return EmbeddingStream(frames)


def measure_memory(params: BridgeParams, lengths: Sequence[int],
                   segment_size: int = 16, seed: int = 0) -> ScalingReport:
    """Peak state bytes and cache growth versus stream length at fixed
    segment size."""
    config = params.config
    block_bytes = config.memory_tokens * config.hidden_size * 8  # float64 state
    records = []
    for n in sorted(lengths):
        k = max(1, n // segment_size)
        stream = _random_stream(n, config.hidden_size, seed)
        seg = uniform_segmentation(n, k)
        meter = _StateMeter(block_bytes)
        T.set_alloc_hook(meter.alloc)
        try:
            with T.no_grad():
                result = run_pipeline(stream, seg, params, phase_hook=meter.phase)
                tokens = T.concat([result.memory, result.output], axis=0)
        finally:
            T.set_alloc_hook(None)
        measured_cache = result.cache_bytes
        analytic_cache = (k + 1) * block_bytes
        records.append({
            "n": n, "k": k,
            "peak_bytes": meter.peak,
            "cache_bytes": measured_cache,
            "cache_bytes_analytic": analytic_cache,
            "probe_tokens": tokens.shape[0],
            "phase_ms": {},
        })
    ks = [r["k"] for r in records]
    cache = [r["cache_bytes"] for r in records]
    peak = [r["peak_bytes"] for r in records]
    a, b, r2 = linear_fit(ks, cache)
    pa, pb, pr2 = linear_fit(ks, peak)
    report = ScalingReport(records)
    report.fits["cache_vs_k"] = {"intercept": a, "slope": b, "r2": r2,
                                 "expected_slope": float(block_bytes)}
    report.fits["peak_vs_k"] = {"intercept": pa, "slope": pb, "r2": pr2}
    return report


def _timed_run(fn, min_time: float = 0.010) -> Dict[str, float]:
    """Run ``fn`` (returns a phase->seconds dict) until >= min_time total,
    then average per repetition."""
    totals: Dict[str, float] = {}
    runs = 0
    spent = 0.0
    while spent < min_time or runs == 0:
        phases = fn()
        for name, seconds in phases.items():
            totals[name] = totals.get(name, 0.0) + seconds
        spent += sum(phases.values())
        runs += 1
        if runs >= 1000:
            break
    return {name: seconds / runs for name, seconds in totals.items()}


class _PhaseTimer:
    def __init__(self):
        self.durations: Dict[str, float] = {}
        self._label: Optional[str] = None
        self._start = 0.0

    def mark(self, label: str) -> None:
        now = time.perf_counter()
        if self._label is not None:
            self.durations[self._label] = (
                self.durations.get(self._label, 0.0) + now - self._start)
        self._label = label
        self._start = now

    def stop(self) -> None:
        self.mark("__end__")
        self._label = None
        self.durations.pop("__end__", None)


def measure_time(params: BridgeParams, segment_counts: Sequence[int],
                 segment_size: int = 16, repetitions: int = 5,
                 seed: int = 0, with_probe: bool = True) -> ScalingReport:
    """Per-phase wall time versus segment count at fixed segment size.

    Bridge time is measured with retrieval disabled; retrieval time comes
    from a separate retrieval-enabled run of the same stream.
    """
    from dataclasses import replace

    config = params.config
    records = []
    for k in sorted(segment_counts):
        n = k * segment_size
        stream = _random_stream(n, config.hidden_size, seed)
        seg = uniform_segmentation(n, k)

        def one_run(retrieval: bool) -> Dict[str, float]:
            timer = _PhaseTimer()
            cfg = replace(config, retrieval_enabled=retrieval)
            timer.mark("segmentation")
            segment(stream, SegmentationConfig(mode="fixed_count", fixed_count=k))
            with T.no_grad():
                timer.mark("bridge")  # overwritten per phase by the hook
                result = run_pipeline(stream, seg, params, config=cfg,
                                      phase_hook=timer.mark)
                if with_probe and "probe.query" in params:
                    timer.mark("probe")
                    tokens = T.concat([result.memory, result.output], axis=0)
                    probe_logits(tokens, params)
            timer.stop()
            return timer.durations

        medians: Dict[str, List[float]] = {}
        for retrieval in (False, True):
            prefix = "retrieval_on." if retrieval else "bridge_only."
            samples: List[Dict[str, float]] = [
                _timed_run(lambda: one_run(retrieval)) for _ in range(repetitions)]
            for name in samples[0]:
                values = [s.get(name, 0.0) for s in samples]
                medians[prefix + name] = float(np.median(values))
        records.append({
            "n": n, "k": k,
            "phase_ms": {name: 1000.0 * v for name, v in medians.items()},
        })
    report = ScalingReport(records)
    ks = [r["k"] for r in records]
    bridge = [r["phase_ms"]["bridge_only.bridge"] for r in records]
    retrieve = [r["phase_ms"]["retrieval_on.retrieve"] for r in records]
    slope, r2 = loglog_slope(ks, bridge)
    report.fits["bridge_time_vs_k"] = {"slope": slope, "r2": r2}
    slope, r2 = loglog_slope(ks, retrieve)
    report.fits["retrieval_time_vs_k"] = {"slope": slope, "r2": r2}
    return report
