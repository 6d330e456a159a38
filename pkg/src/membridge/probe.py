"""Toy-scale supervised training on the synthetic needle task.

The downstream language model is replaced by the smallest consumer that
can exploit memory tokens: a single learned query attending over the
pipeline's egress tokens, followed by a linear classifier. Variants
mirror the ablation rows (no retrieval, pooling baselines, uniform
segments, memory-only egress, fixed 8 segments) so paired-seed
comparisons stay meaningful.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .streams import EmbeddingStream, sample_separated_centers, perturb_frame
from .tiling import Segmentation, SegmentationConfig, segment, uniform_segmentation
from .bridge import BridgeConfig, BridgeParams, run_pipeline

__all__ = [
    "VARIANTS",
    "TrainConfig",
    "TaskSpec",
    "needle_signatures",
    "cue_vector",
    "haystack_centers",
    "scene_lengths",
    "needle_center",
    "make_needle_dataset",
    "probe_tokens",
    "probe_logits",
    "cross_entropy",
    "Adam",
    "train_probe",
    "evaluate",
    "ablation_suite",
]

VARIANTS = ("full", "no_retrieval", "mean_pool", "adaptive_pool",
            "uniform_segment", "memory_tokens_only", "segments_k8")

POOL_TARGET = 4  # pooling baselines compress time down to this many tokens


@dataclass
class TrainConfig:
    learning_rate: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 8
    epochs: int = 1
    seed: int = 0
    train_frames: int = 16
    train_segments: int = 4
    train_streams: int = 200
    seg_mode: str = "dynamic"  # segmentation used while training

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning rate must be >= 0")


@dataclass
class TaskSpec:
    """Geometry of the synthetic needle-classification task.

    The label is the class whose signature co-occurs with a fixed cue
    direction inside one scene (the needle). Haystack scenes include
    full-strength decoy signature scenes *without* the cue (probability
    ``decoy_prob`` each), so the class identity of the needle cannot be
    read off any order-free average of the stream: a probe must bind the
    cue to the signature it appears with, which requires looking inside
    a scene rather than pooling across the stream.
    """

    n_classes: int = 4
    dim: int = 64
    scene_len: int = 4       # mean scene length; 16 frames ~ 4 scenes
    scene_jitter: int = 1    # actual lengths drawn from [mean-j, mean+j]
    noise_sigma: float = 0.05
    separation: float = 0.2
    decoy_prob: float = 0.6
    signature_seed: int = 7


def _anchor_vectors(task: TaskSpec) -> np.ndarray:
    rng = np.random.default_rng(task.signature_seed)
    return sample_separated_centers(task.n_classes + 1, task.dim,
                                    task.separation, rng)


def needle_signatures(task: TaskSpec) -> np.ndarray:
    """Fixed per-class unit signature vectors, shared by train and eval."""
    return _anchor_vectors(task)[:-1]


def cue_vector(task: TaskSpec) -> np.ndarray:
    """The fixed cue direction that marks the needle scene.

    Drawn alongside the class signatures, so it is separated from every
    signature by the same cosine bound.
    """
    return _anchor_vectors(task)[-1]


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def haystack_centers(task: TaskSpec, n_scenes: int, rng: np.random.Generator,
                     signatures: np.ndarray,
                     cue: Optional[np.ndarray] = None) -> np.ndarray:
    """Scene centers for the distractor portion of a stream.

    With probability ``decoy_prob`` a scene sits exactly on a random
    class signature (a cue-less decoy); otherwise it is a random
    direction away from every signature (and the cue, when given).
    Adjacent centers are kept apart (cosine <= 0.5) so scene cuts stay
    detectable.
    """
    anchors = list(signatures) if cue is None else list(signatures) + [cue]
    centers: List[np.ndarray] = []
    for _ in range(n_scenes):
        for _ in range(200):
            if rng.random() < task.decoy_prob:
                c = signatures[int(rng.integers(task.n_classes))]
            else:
                c = _unit(rng.standard_normal(task.dim))
                if max(abs(float(np.dot(c, a))) for a in anchors) > task.separation:
                    continue
            if centers and abs(float(np.dot(c, centers[-1]))) > 0.5:
                continue
            centers.append(c)
            break
        else:
            raise ValueError("separation infeasible")
    return np.stack(centers)


def scene_lengths(task: TaskSpec, n_frames: int,
                  rng: np.random.Generator) -> List[int]:
    """Random scene lengths covering ``n_frames`` exactly.

    Jittered lengths keep scene cuts off any fixed grid, so segmenting by
    content and segmenting by position genuinely differ.
    """
    lo = max(1, task.scene_len - task.scene_jitter)
    hi = task.scene_len + task.scene_jitter
    lengths: List[int] = []
    remaining = n_frames
    while remaining > 0:
        length = min(int(rng.integers(lo, hi + 1)), remaining)
        lengths.append(length)
        remaining -= length
    if len(lengths) > 1 and lengths[-1] < lo:  # fold a runt into its neighbor
        runt = lengths.pop()
        lengths[-1] += runt
    return lengths


def needle_center(task: TaskSpec, label: int, signatures: np.ndarray,
                  cue: np.ndarray) -> np.ndarray:
    """Center of a needle scene: the class signature bound to the cue."""
    return _unit(signatures[label] + cue)


def _needle_sample(task: TaskSpec, n_frames: int, rng: np.random.Generator,
                   signatures: np.ndarray,
                   cue: np.ndarray) -> Tuple[EmbeddingStream, int]:
    """One multi-scene stream with exactly one cue-bearing scene."""
    lengths = scene_lengths(task, n_frames, rng)
    n_scenes = len(lengths)
    centers = haystack_centers(task, n_scenes, rng, signatures, cue)
    label = int(rng.integers(task.n_classes))
    needle_scene = int(rng.integers(n_scenes))
    centers[needle_scene] = needle_center(task, label, signatures, cue)
    frames = []
    frame_labels = []
    boundaries = []
    for s, length in enumerate(lengths):
        if s > 0:
            boundaries.append(len(frames))
        for _ in range(length):
            frames.append(perturb_frame(centers[s], task.noise_sigma, rng))
            frame_labels.append(label if s == needle_scene else -1)
    stream = EmbeddingStream(np.stack(frames),
                             labels=np.asarray(frame_labels, dtype=np.int32),
                             boundaries=boundaries or None)
    return stream, label


def make_needle_dataset(count: int, n_frames: int, task: TaskSpec,
                        seed: int) -> List[Tuple[EmbeddingStream, int]]:
    anchors = _anchor_vectors(task)
    signatures, cue = anchors[:-1], anchors[-1]
    root = np.random.SeedSequence([seed, n_frames, count])
    return [_needle_sample(task, n_frames, np.random.default_rng(child),
                           signatures, cue)
            for child in root.spawn(count)]


# -- variant plumbing ----------------------------------------------------------


UNIFORM_SEGMENT_SIZE = 4  # frames per chunk for the positional control


def _segmentation_for(variant: str, stream: EmbeddingStream, seg_mode: str,
                      train_segments: int) -> Segmentation:
    if variant == "uniform_segment":
        # Same granularity as content-based cuts, boundaries by position.
        return uniform_segmentation(
            stream.n, max(1, round(stream.n / UNIFORM_SEGMENT_SIZE)))
    if variant == "segments_k8":
        return segment(stream, SegmentationConfig(mode="fixed_count", fixed_count=8))
    if seg_mode == "dynamic":
        return segment(stream, SegmentationConfig(mode="threshold", alpha=0.5))
    return segment(stream, SegmentationConfig(mode="fixed_count",
                                              fixed_count=train_segments))


def probe_tokens(variant: str, stream: EmbeddingStream, params: BridgeParams,
                 seg_mode: str = "static", train_segments: int = 4) -> Tensor:
    """The egress tokens the probe head sees for one stream."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant: {variant}")
    if variant == "mean_pool":
        pooled = stream.frames.mean(axis=0, keepdims=True)
        return Tensor(np.repeat(pooled, POOL_TARGET, axis=0))
    if variant == "adaptive_pool":
        bins = np.array_split(np.arange(stream.n), POOL_TARGET)
        pooled = np.stack([stream.frames[idx].mean(axis=0) if idx.size else
                           np.zeros(stream.dim) for idx in bins])
        return Tensor(pooled)
    segmentation = _segmentation_for(variant, stream, seg_mode, train_segments)
    config = params.config
    if variant == "no_retrieval":
        config = replace(config, retrieval_enabled=False)
    result = run_pipeline(stream, segmentation, params, config)
    if variant == "memory_tokens_only":
        return result.memory
    return T.concat([result.memory, result.output], axis=0)


def probe_logits(tokens: Tensor, params: BridgeParams) -> Tensor:
    d = tokens.shape[1]
    att = T.softmax(params["probe.query"] @ tokens.T * (1.0 / math.sqrt(d)), axis=-1)
    pooled = att @ tokens
    return pooled @ params["probe.w"] + params["probe.b"]


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    probs = T.softmax(logits, axis=-1)
    return -(probs[0, label].log())


# -- optimizer -----------------------------------------------------------------


class Adam:
    """Adaptive-moment first-order optimizer over named parameter tensors."""

    def __init__(self, params: Dict[str, Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}

    def step(self) -> None:
        self.t += 1
        bias1 = 1.0 - self.beta1 ** self.t
        bias2 = 1.0 - self.beta2 ** self.t
        for name, param in self.params.items():
            grad = param.grad
            if grad is None:
                continue
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * grad
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * grad * grad
            update = (self.m[name] / bias1) / (np.sqrt(self.v[name] / bias2) + self.eps)
            param.data = param.data - self.lr * update

    def zero_grad(self) -> None:
        for param in self.params.values():
            param.grad = None


# -- training and evaluation ---------------------------------------------------


def train_probe(variant: str, train: TrainConfig, task: TaskSpec,
                bridge: Optional[BridgeConfig] = None,
                dataset: Optional[List[Tuple[EmbeddingStream, int]]] = None
                ) -> Tuple[BridgeParams, List[float]]:
    """Train one variant; returns the parameters and the per-step loss curve.

    The dataset is regenerated from the seed (never persisted); pass one
    explicitly to share data across paired variants.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant: {variant}")
    bridge = bridge or BridgeConfig(hidden_size=task.dim)
    if bridge.hidden_size != task.dim:
        raise ValueError("bridge hidden size must match stream dim")
    if dataset is None:
        dataset = make_needle_dataset(train.train_streams, train.train_frames,
                                      task, train.seed)
    params = BridgeParams.init(bridge, seed=train.seed,
                               probe_classes=task.n_classes)
    opt = Adam(params.tensors, train.learning_rate,
               train.beta1, train.beta2, train.eps)
    rng = np.random.default_rng(np.random.SeedSequence([train.seed, 0xBA7C4]))
    losses: List[float] = []
    for _ in range(train.epochs):
        order = rng.permutation(len(dataset))
        for start in range(0, len(order), train.batch_size):
            batch = order[start:start + train.batch_size]
            opt.zero_grad()
            total = None
            for idx in batch:
                stream, label = dataset[idx]
                tokens = probe_tokens(variant, stream, params,
                                      seg_mode=train.seg_mode,
                                      train_segments=train.train_segments)
                loss = cross_entropy(probe_logits(tokens, params), label)
                total = loss if total is None else total + loss
            total = total * (1.0 / len(batch))
            value = total.item()
            if not math.isfinite(value):
                raise ValueError("diverged")
            losses.append(value)
            total.backward()
            opt.step()
    return params, losses


def evaluate(params: BridgeParams, variant: str,
             dataset: Sequence[Tuple[EmbeddingStream, int]],
             seg_mode: str = "dynamic", train_segments: int = 4
             ) -> Tuple[float, float]:
    """Accuracy and mean 0-10 score over a labelled dataset."""
    if not dataset:
        raise ValueError("empty dataset")
    correct = 0
    with T.no_grad():
        for stream, label in dataset:
            tokens = probe_tokens(variant, stream, params, seg_mode=seg_mode,
                                  train_segments=train_segments)
            logits = probe_logits(tokens, params)
            if int(np.argmax(logits.data[0])) == label:
                correct += 1
    accuracy = correct / len(dataset)
    return accuracy, accuracy * 10.0


def ablation_suite(train: TrainConfig, task: TaskSpec,
                   eval_lengths: Sequence[int], seeds: Sequence[int],
                   variants: Sequence[str] = VARIANTS,
                   eval_samples: int = 100,
                   bridge: Optional[BridgeConfig] = None,
                   include_static_full: bool = True) -> List[dict]:
    """Paired-seed sweep of variant x evaluation length.

    Every variant within one seed trains on the identical dataset; the
    "full_static" rows re-evaluate the trained full variant with a fixed
    segment count so dynamic and static segmentation can be compared at
    each length.
    """
    rows: List[dict] = []
    for seed in seeds:
        cfg = replace(train, seed=seed)
        dataset = make_needle_dataset(cfg.train_streams, cfg.train_frames, task, seed)
        eval_sets = {length: make_needle_dataset(eval_samples, length, task,
                                                 seed + 10_000)
                     for length in eval_lengths}
        for variant in variants:
            params, _ = train_probe(variant, cfg, task, bridge=bridge,
                                    dataset=dataset)
            for length in eval_lengths:
                accuracy, _ = evaluate(params, variant, eval_sets[length],
                                       seg_mode="dynamic",
                                       train_segments=cfg.train_segments)
                rows.append({"variant": variant, "length": length,
                             "seed": seed, "accuracy": accuracy})
                if variant == "full" and include_static_full:
                    accuracy, _ = evaluate(params, variant, eval_sets[length],
                                           seg_mode="static",
                                           train_segments=cfg.train_segments)
                    rows.append({"variant": "full_static", "length": length,
                                 "seed": seed, "accuracy": accuracy})
    return rows


def suite_csv(rows: Sequence[dict]) -> str:
    lines = ["variant,length,seed,accuracy"]
    lines += [f"{r['variant']},{r['length']},{r['seed']},{r['accuracy']:.4f}"
              for r in rows]
    return "\n".join(lines) + "\n"
