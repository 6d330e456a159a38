"""Temporal semantic segmentation over embedding streams.

Offline pipeline: adjacent-frame cosine similarities -> valley depth
scores -> mean + alpha * stddev threshold (or a fixed segment count).
A depth at similarity index i (0-based, between frames i and i+1) that
clears the threshold cuts the stream after frame i, so the emitted
boundary is the index of the first frame of the new segment.

The streaming variant sees one frame at a time and uses only the left
side of each valley, d = (left_peak - c) / 2, against running statistics
of the depths seen so far.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Tuple

import numpy as np

from .streams import EmbeddingStream

__all__ = [
    "SimilarityProfile",
    "DepthProfile",
    "SegmentationConfig",
    "Segmentation",
    "cosine_profile",
    "depth_scores",
    "segment",
    "StreamingConfig",
    "BoundaryEvent",
    "StreamingBoundaryDetector",
]


@dataclass
class SimilarityProfile:
    scores: np.ndarray  # length n-1, entries in [-1, 1]


@dataclass
class DepthProfile:
    depths: np.ndarray
    left_peaks: np.ndarray
    right_peaks: np.ndarray
    mu: float
    sigma: float


@dataclass
class SegmentationConfig:
    mode: str = "threshold"  # "threshold" | "fixed_count"
    alpha: float = 0.5
    fixed_count: int = 4
    min_segment_len: int = 1
    max_segments: Optional[int] = None

    def __post_init__(self):
        if self.mode not in ("threshold", "fixed_count"):
            raise ValueError(f"unknown segmentation mode: {self.mode}")
        if self.mode == "fixed_count" and self.fixed_count < 1:
            raise ValueError("fixed_count must be >= 1")
        if self.min_segment_len < 1:
            raise ValueError("min_segment_len must be >= 1")


@dataclass
class Segmentation:
    cuts: List[int]                    # first-frame index of segments 2..K
    segments: List[Tuple[int, int]]    # half-open [start, stop) frame ranges
    depth: Optional[DepthProfile]
    threshold: Optional[float] = None

    @property
    def k(self) -> int:
        return len(self.segments)


def cosine_profile(stream: EmbeddingStream) -> SimilarityProfile:
    frames = stream.frames
    if frames.shape[0] < 2:
        raise ValueError("too short")
    norms = np.linalg.norm(frames, axis=1)
    if np.any(norms == 0):
        raise ValueError("degenerate frame")
    unit = frames / norms[:, None]
    scores = np.einsum("ij,ij->i", unit[:-1], unit[1:])
    return SimilarityProfile(np.clip(scores, -1.0, 1.0))


def depth_scores(profile: SimilarityProfile) -> DepthProfile:
    c = np.asarray(profile.scores, dtype=np.float64)
    if c.size < 1:
        raise ValueError("empty profile")
    # running maxima strictly to each side; endpoints fall back to c itself
    left = np.empty_like(c)
    right = np.empty_like(c)
    left[0] = c[0]
    for i in range(1, c.size):
        left[i] = max(left[i - 1] if i > 1 else c[0], c[i - 1])
    right[-1] = c[-1]
    for i in range(c.size - 2, -1, -1):
        right[i] = max(right[i + 1] if i < c.size - 2 else c[-1], c[i + 1])
    depths = (left + right - 2.0 * c) / 2.0
    return DepthProfile(depths, left, right,
                        mu=float(depths.mean()),
                        sigma=float(depths.std()))  # population stddev


def _enforce_min_len(candidates: List[int], depths: np.ndarray, n: int,
                     min_len: int) -> List[int]:
    """Greedily keep higher-depth cuts; drop any that crowd an accepted one."""
    accepted: List[int] = []
    for cut in sorted(candidates, key=lambda b: (-depths[b - 1], b)):
        if cut < min_len or n - cut < min_len:
            continue
        if all(abs(cut - other) >= min_len for other in accepted):
            accepted.append(cut)
    return sorted(accepted)


def segment(stream: EmbeddingStream, config: Optional[SegmentationConfig] = None) -> Segmentation:
    config = config or SegmentationConfig()
    n = stream.n
    if config.mode == "fixed_count" and config.fixed_count > n:
        raise ValueError("too many segments")
    if n == 1:
        return Segmentation([], [(0, 1)], None)
    profile = cosine_profile(stream)
    depth = depth_scores(profile)
    threshold = None
    if config.mode == "threshold":
        threshold = depth.mu + config.alpha * depth.sigma
        candidates = [i + 1 for i in range(depth.depths.size)
                      if depth.depths[i] > threshold]  # strict: ties do not cut
    else:
        k = config.fixed_count
        order = sorted(range(depth.depths.size),
                       key=lambda i: (-depth.depths[i], i))
        candidates = sorted(i + 1 for i in order[:k - 1])
    cuts = _enforce_min_len(candidates, depth.depths, n, config.min_segment_len)
    if config.max_segments is not None and len(cuts) > config.max_segments - 1:
        keep = sorted(cuts, key=lambda b: (-depth.depths[b - 1], b))[:config.max_segments - 1]
        cuts = sorted(keep)
    edges = [0] + cuts + [n]
    segments = list(zip(edges[:-1], edges[1:]))
    return Segmentation(cuts, segments, depth, threshold)


def uniform_segmentation(n: int, k: int) -> Segmentation:
    """Equal-length split into k contiguous segments (no depth evidence)."""
    if k < 1 or k > n:
        raise ValueError("too many segments")
    edges = [round(i * n / k) for i in range(k + 1)]
    segments = list(zip(edges[:-1], edges[1:]))
    return Segmentation(edges[1:-1], segments, None)


# -- streaming (left-only) boundary detection ---------------------------------


@dataclass
class StreamingConfig:
    alpha: float = 4.0
    min_segment_len: int = 2
    warmup: int = 4


@dataclass
class BoundaryEvent:
    index: int   # first frame of the new scene
    depth: float


class StreamingBoundaryDetector:
    """Online detector over d = (left_peak - c) / 2.

    State is O(1): the previous frame, the running left peak, and Welford
    statistics of the depths seen so far. A depth that triggers an event
    is excluded from the running statistics, which track the in-scene
    baseline that scene cuts must stand out from.
    """

    def __init__(self, config: Optional[StreamingConfig] = None):
        self.config = config or StreamingConfig()
        self._prev: Optional[np.ndarray] = None
        self._count = 0
        self._left_peak = -math.inf
        self._stat_n = 0
        self._stat_mean = 0.0
        self._stat_m2 = 0.0
        self._last_boundary = 0

    def push(self, frame: np.ndarray) -> Optional[BoundaryEvent]:
        frame = np.asarray(frame, dtype=np.float64)
        norm = np.linalg.norm(frame)
        if norm == 0:
            raise ValueError("degenerate frame")
        frame = frame / norm
        self._count += 1
        if self._prev is None:
            self._prev = frame
            return None
        c = float(np.dot(self._prev, frame))
        self._prev = frame
        left = c if self._left_peak == -math.inf else self._left_peak
        self._left_peak = max(self._left_peak, c)
        d = (left - c) / 2.0
        # compare against the statistics of prior depths only: a depth that
        # enters its own baseline can never sit alpha sigmas above it early on
        mu, sigma = self._stats()
        # small-sample guard: inflate the band while the baseline is short,
        # since sigma is badly underestimated from a handful of depths
        confidence = 1.0 + 3.0 / math.sqrt(max(self._stat_n, 1))
        threshold = mu + self.config.alpha * sigma * confidence
        index = self._count - 1  # frame that opened the (possible) new scene
        outlier = self._stat_n >= 3 and d > threshold
        if outlier:
            # above-threshold depths never enter the baseline, even when the
            # emission itself is suppressed by warmup or segment-length rules
            if (self._count > self.config.warmup
                    and index - self._last_boundary >= self.config.min_segment_len):
                self._last_boundary = index
                return BoundaryEvent(index, d)
        else:
            self._ingest(d)
        return None

    def _stats(self) -> Tuple[float, float]:
        if self._stat_n == 0:
            return math.inf, 0.0  # nothing observed yet: never fire
        return self._stat_mean, math.sqrt(self._stat_m2 / self._stat_n)

    def _ingest(self, d: float) -> None:
        self._stat_n += 1
        delta = d - self._stat_mean
        self._stat_mean += delta / self._stat_n
        self._stat_m2 += delta * (d - self._stat_mean)

    def run(self, frames: Iterable[np.ndarray]) -> List[BoundaryEvent]:
        return [event for frame in frames
                if (event := self.push(frame)) is not None]
