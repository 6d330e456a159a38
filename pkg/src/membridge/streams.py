"""Embedding-stream ingestion and synthesis.

Streams are ordered d-dimensional frame vectors with optional per-frame
labels and ground-truth scene boundaries. Two on-disk forms: the ESTREAM
binary container (bit-exact round trips, single precision on disk) and a
JSON-lines alternative for piping. The synthetic generator replaces a
real visual encoder: well-separated unit scene centers plus small
in-scene perturbations, deterministic per seed.

ESTREAM layout (little-endian throughout)::

    magic  "ESTR"          4 bytes
    version u16 = 1
    dim     u32
    frames  u64 (n)
    frame_rate f64
    payload n*dim float32, row-major
    then optional sections, each: 4-byte tag + u64 byte length + payload
        "LBLS": n int32 per-frame labels
        "BNDS": int32 boundary indices (first frame of each new scene)
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from typing import IO, List, Optional, Tuple

import numpy as np

MAGIC = b"ESTR"
VERSION = 1

__all__ = [
    "EmbeddingStream",
    "SceneSpec",
    "write_estream",
    "read_estream",
    "write_jsonl",
    "read_jsonl",
    "generate_scene_stream",
]


@dataclass
class EmbeddingStream:
    """A finite sequence of frame vectors, shape (n, dim)."""

    frames: np.ndarray
    frame_rate: float = 1.0
    labels: Optional[np.ndarray] = None
    boundaries: Optional[List[int]] = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ValueError("stream needs at least one frame")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int32)
            if self.labels.shape != (self.n,):
                raise ValueError("labels length mismatch")
        if self.boundaries is not None:
            b = list(self.boundaries)
            if any(not (1 <= x <= self.n - 1) for x in b) or sorted(set(b)) != b:
                raise ValueError("boundaries must be strictly increasing in [1, n-1]")
            self.boundaries = b

    @property
    def n(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


@dataclass
class SceneSpec:
    """Recipe for a synthetic multi-scene stream."""

    scene_count: int
    frames_per_scene: Tuple[int, int]
    dim: int
    noise_sigma: float = 0.05
    min_center_separation: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.scene_count < 1:
            raise ValueError("scene_count must be >= 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not (-1.0 <= self.min_center_separation < 1.0):
            raise ValueError("min_center_separation must lie in [-1, 1)")
        lo, hi = self.frames_per_scene
        if lo < 1 or hi < lo:
            raise ValueError("bad frames_per_scene bounds")


def write_estream(stream: EmbeddingStream, fp: Optional[IO[bytes]] = None) -> bytes:
    """Serialize a stream; returns the bytes (and writes to ``fp`` if given)."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HIQd", VERSION, stream.dim, stream.n, stream.frame_rate))
    buf.write(np.ascontiguousarray(stream.frames, dtype="<f4").tobytes())
    if stream.labels is not None:
        payload = np.ascontiguousarray(stream.labels, dtype="<i4").tobytes()
        buf.write(b"LBLS" + struct.pack("<Q", len(payload)) + payload)
    if stream.boundaries is not None:
        payload = np.asarray(stream.boundaries, dtype="<i4").tobytes()
        buf.write(b"BNDS" + struct.pack("<Q", len(payload)) + payload)
    raw = buf.getvalue()
    if fp is not None:
        fp.write(raw)
    return raw


def read_estream(data) -> EmbeddingStream:
    """Inverse of :func:`write_estream`."""
    if hasattr(data, "read"):
        data = data.read()
    if len(data) < 4 or data[:4] != MAGIC:
        raise ValueError("not an estream")
    if len(data) < 26:
        raise ValueError("truncated")
    version, dim, n, frame_rate = struct.unpack_from("<HIQd", data, 4)
    if version != VERSION:
        raise ValueError("unsupported version")
    offset = 26
    count = n * dim
    if len(data) < offset + 4 * count:
        raise ValueError("truncated")
    frames = np.frombuffer(data, dtype="<f4", count=count, offset=offset)
    frames = frames.reshape(n, dim).astype(np.float64)
    offset += 4 * count
    labels = None
    boundaries = None
    while offset < len(data):
        if offset + 12 > len(data):
            raise ValueError("truncated")
        tag = data[offset:offset + 4]
        (length,) = struct.unpack_from("<Q", data, offset + 4)
        offset += 12
        if offset + length > len(data):
            raise ValueError("truncated")
        payload = data[offset:offset + length]
        offset += length
        if tag == b"LBLS":
            labels = np.frombuffer(payload, dtype="<i4").astype(np.int32)
        elif tag == b"BNDS":
            boundaries = list(np.frombuffer(payload, dtype="<i4"))
        # unknown sections are skipped for forward compatibility
    return EmbeddingStream(frames, frame_rate=frame_rate, labels=labels,
                           boundaries=boundaries)


def write_jsonl(stream: EmbeddingStream, fp: IO[str]) -> None:
    header = {"dim": stream.dim, "fps": stream.frame_rate}
    if stream.boundaries is not None:
        header["boundaries"] = list(map(int, stream.boundaries))
    fp.write(json.dumps(header) + "\n")
    for i in range(stream.n):
        obj = {"v": [float(x) for x in stream.frames[i]]}
        if stream.labels is not None:
            obj["label"] = int(stream.labels[i])
        fp.write(json.dumps(obj) + "\n")


def read_jsonl(fp: IO[str]) -> EmbeddingStream:
    header = json.loads(fp.readline())
    frames = []
    labels = []
    for line in fp:
        line = line.strip()
        if not line:
            continue
        obj = json.loads(line)
        frames.append(obj["v"])
        labels.append(obj.get("label", -1))
    frames = np.asarray(frames, dtype=np.float64)
    has_labels = any(l != -1 for l in labels)
    return EmbeddingStream(frames, frame_rate=header.get("fps", 1.0),
                           labels=np.asarray(labels, dtype=np.int32) if has_labels else None,
                           boundaries=header.get("boundaries"))


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def sample_separated_centers(count: int, dim: int, max_cosine: float,
                             rng: np.random.Generator,
                             avoid: Optional[np.ndarray] = None,
                             budget: int = 1000) -> np.ndarray:
    """Rejection-sample unit vectors with pairwise cosine <= max_cosine.

    ``avoid`` rows are additional vectors the samples must stay separated
    from (used to keep haystack scenes away from needle signatures).
    """
    centers: List[np.ndarray] = []
    existing = [] if avoid is None else [np.asarray(a, dtype=np.float64) for a in avoid]
    tries = 0
    while len(centers) < count:
        if tries >= budget * count:
            raise ValueError("separation infeasible")
        tries += 1
        c = _unit(rng.standard_normal(dim))
        if all(abs(float(np.dot(c, o))) <= max_cosine for o in existing + centers):
            centers.append(c)
    return np.stack(centers)


def perturb_frame(center: np.ndarray, noise_sigma: float,
                  rng: np.random.Generator) -> np.ndarray:
    """One frame near ``center``: unit-normalized after an isotropic nudge.

    The noise vector has expected norm ``noise_sigma`` regardless of dim,
    so adjacent-frame cosine stays ~1 - noise_sigma**2 for small sigma.
    """
    dim = center.shape[0]
    noise = rng.standard_normal(dim) * (noise_sigma / np.sqrt(dim))
    frame = _unit(center + noise)
    # round to single precision so disk round trips are bit-exact
    return frame.astype(np.float32).astype(np.float64)


def generate_scene_stream(spec: SceneSpec) -> EmbeddingStream:
    """Deterministic multi-scene stream with ground-truth boundaries."""
    rng = np.random.default_rng(spec.seed)
    centers = sample_separated_centers(spec.scene_count, spec.dim,
                                       spec.min_center_separation, rng)
    lo, hi = spec.frames_per_scene
    frames = []
    labels = []
    boundaries = []
    for s in range(spec.scene_count):
        length = int(rng.integers(lo, hi + 1))
        if s > 0:
            boundaries.append(len(frames))
        for _ in range(length):
            frames.append(perturb_frame(centers[s], spec.noise_sigma, rng))
            labels.append(s)
    return EmbeddingStream(np.stack(frames), labels=np.asarray(labels, dtype=np.int32),
                           boundaries=boundaries or None)
