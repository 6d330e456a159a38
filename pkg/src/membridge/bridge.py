"""Recurrent memory over segment streams.

A transformer block runs over [memory tokens; segment tokens]; the first
M output rows become the next memory block, the rest are the segment's
representation. Every memory block is appended to a cache, and (when
enabled) the current memory cross-attends over the whole cache before
each step, so early segments stay reachable without backpropagating
through the entire recurrence.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, field, asdict
from typing import Callable, Dict, IO, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .streams import EmbeddingStream
from .tiling import Segmentation

__all__ = [
    "BridgeConfig",
    "BridgeParams",
    "PipelineResult",
    "bridge_step",
    "retrieve",
    "run_pipeline",
    "save_checkpoint",
    "load_checkpoint",
]

CKPT_MAGIC = b"MBCP"
CKPT_VERSION = 1


@dataclass
class BridgeConfig:
    """Desk-scale defaults; the reference large-scale configuration is
    hidden_size 1024 with 32 memory tokens."""

    memory_tokens: int = 8
    bridge_layers: int = 1
    heads: int = 8
    hidden_size: int = 64
    ffn_multiplier: int = 4
    retrieval_layers: int = 1
    retrieval_enabled: bool = True
    retrieve_order: str = "before_bridge"
    retrieval_output_projection: bool = True
    zero_init_memory: bool = False  # ablation alternative to learned init

    def __post_init__(self):
        if self.memory_tokens < 1:
            raise ValueError("memory_tokens must be >= 1")
        if self.hidden_size % self.heads != 0:
            raise ValueError("hidden size not divisible by heads")
        if self.retrieve_order not in ("before_bridge", "after_bridge"):
            raise ValueError(f"unknown retrieve_order: {self.retrieve_order}")


class BridgeParams:
    """Named parameter tensors for the bridge, retrieval, and probe head."""

    def __init__(self, config: BridgeConfig, tensors: Dict[str, Tensor]):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def items(self):
        return self.tensors.items()

    def named(self, prefix: str) -> Dict[str, Tensor]:
        return {k: v for k, v in self.tensors.items() if k.startswith(prefix)}

    @staticmethod
    def init(config: BridgeConfig, seed: int = 0, probe_classes: int = 0,
             dtype=np.float64) -> "BridgeParams":
        rng = np.random.default_rng(seed)
        d = config.hidden_size
        h = config.ffn_multiplier * d
        scale = 1.0 / math.sqrt(d)

        def mat(*shape):
            return Tensor((rng.standard_normal(shape) * scale).astype(dtype))

        tensors: Dict[str, Tensor] = {}
        if config.zero_init_memory:
            tensors["memory.init"] = Tensor(np.zeros((config.memory_tokens, d), dtype=dtype))
        else:
            tensors["memory.init"] = mat(config.memory_tokens, d)
        for layer in range(config.bridge_layers):
            p = f"bridge.{layer}."
            tensors[p + "ln1.g"] = Tensor(np.ones(d, dtype=dtype))
            tensors[p + "ln1.b"] = Tensor(np.zeros(d, dtype=dtype))
            tensors[p + "ln2.g"] = Tensor(np.ones(d, dtype=dtype))
            tensors[p + "ln2.b"] = Tensor(np.zeros(d, dtype=dtype))
            for name in ("wq", "wk", "wv", "wo"):
                tensors[p + name] = mat(d, d)
            tensors[p + "ffn.w1"] = mat(d, h)
            tensors[p + "ffn.b1"] = Tensor(np.zeros(h, dtype=dtype))
            tensors[p + "ffn.w2"] = mat(h, d)
            tensors[p + "ffn.b2"] = Tensor(np.zeros(d, dtype=dtype))
        for layer in range(config.retrieval_layers):
            p = f"retrieval.{layer}."
            for name in ("wq", "wk", "wv", "wo"):
                tensors[p + name] = mat(d, d)
        if probe_classes:
            tensors["probe.query"] = mat(1, d)
            tensors["probe.w"] = mat(d, probe_classes)
            tensors["probe.b"] = Tensor(np.zeros(probe_classes, dtype=dtype))
        return BridgeParams(config, tensors)


@dataclass
class PipelineResult:
    memory: Tensor                 # final memory block [M, d]
    output: Tensor                 # final segment representation [C_K, d]
    cache: List[Tensor]            # memory blocks [m_1 .. m_{K+1}]

    @property
    def cache_bytes(self) -> int:
        return sum(block.data.nbytes for block in self.cache)


def bridge_step(memory: Tensor, segment: Tensor, params: BridgeParams
                ) -> Tuple[Tensor, Tensor]:
    """One recurrence step: block([m; s]) split into (next memory, output).

    Full bidirectional self-attention, pre-norm residual structure, no
    positional encodings (temporal order lives in the recurrence).
    """
    config = params.config
    d = config.hidden_size
    if memory.shape[1] != d or segment.shape[1] != d:
        raise ValueError("hidden size mismatch")
    if segment.shape[0] < 1:
        raise ValueError("empty segment")
    x = T.concat([memory, segment], axis=0)
    for layer in range(config.bridge_layers):
        p = f"bridge.{layer}."
        normed = T.layer_norm(x, params[p + "ln1.g"], params[p + "ln1.b"])
        x = x + T.multi_head_attention(normed, normed, normed,
                                       params[p + "wq"], params[p + "wk"],
                                       params[p + "wv"], params[p + "wo"],
                                       config.heads)
        normed = T.layer_norm(x, params[p + "ln2.g"], params[p + "ln2.b"])
        hidden = T.gelu(normed @ params[p + "ffn.w1"] + params[p + "ffn.b1"])
        x = x + hidden @ params[p + "ffn.w2"] + params[p + "ffn.b2"]
    m = config.memory_tokens
    return x[:m], x[m:]


def retrieve(memory: Tensor, cache: List[Tensor], params: BridgeParams) -> Tensor:
    """Cross-attend the current memory over the concatenated cache.

    No residual around the update: the attended value replaces the memory
    block outright. The output combiner is standard multi-head; disable
    ``retrieval_output_projection`` (single head only) for the literal
    single-projection form.
    """
    if not cache:
        raise ValueError("retrieval before initialization")
    config = params.config
    kv = cache[0] if len(cache) == 1 else T.concat(cache, axis=0)
    out = memory
    for layer in range(config.retrieval_layers):
        p = f"retrieval.{layer}."
        wo = params[p + "wo"] if config.retrieval_output_projection else None
        if wo is None and config.heads != 1:
            raise ValueError("literal retrieval projection needs a single head")
        out = T.multi_head_attention(out, kv, kv,
                                     params[p + "wq"], params[p + "wk"],
                                     params[p + "wv"], wo, config.heads)
    return out


def run_pipeline(stream: EmbeddingStream, segmentation: Segmentation,
                 params: BridgeParams, config: Optional[BridgeConfig] = None,
                 frames_override: Optional[Tensor] = None,
                 phase_hook: Optional[Callable[[str], None]] = None) -> PipelineResult:
    """Drive the recurrence across the segmentation, in order.

    ``frames_override`` lets callers feed frames that already live on the
    tape (gradient checks w.r.t. inputs). ``phase_hook`` receives
    "retrieve"/"bridge" markers for the timing harness.
    """
    config = config or params.config
    if not segmentation.segments:
        raise ValueError("empty segmentation")
    covered = [i for start, stop in segmentation.segments for i in range(start, stop)]
    if covered != list(range(stream.n)):
        raise ValueError("segmentation does not partition the stream")
    frames = frames_override if frames_override is not None else Tensor(stream.frames)
    memory = params["memory.init"]
    cache: List[Tensor] = [memory]
    output: Optional[Tensor] = None
    for start, stop in segmentation.segments:
        if config.retrieval_enabled:
            if phase_hook:
                phase_hook("retrieve")
            memory = retrieve(memory, cache, params)
        if phase_hook:
            phase_hook("bridge")
        memory, output = bridge_step(memory, frames[start:stop], params)
        cache.append(memory)
    return PipelineResult(memory, output, cache)


# -- checkpoint container ------------------------------------------------------

_DTYPE_CODES = {np.dtype(np.float32): 4, np.dtype(np.float64): 8}
_CODE_DTYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


def save_checkpoint(params: BridgeParams, fp: IO[bytes],
                    meta: Optional[dict] = None) -> None:
    """Versioned container of named tensors plus a JSON metadata section."""
    meta_obj = dict(meta or {})
    meta_obj["config"] = asdict(params.config)
    meta_blob = json.dumps(meta_obj, sort_keys=True).encode()
    fp.write(CKPT_MAGIC)
    fp.write(struct.pack("<HI", CKPT_VERSION, len(params.tensors)))
    fp.write(struct.pack("<Q", len(meta_blob)))
    fp.write(meta_blob)
    for name, tensor in params.items():
        blob = name.encode()
        arr = tensor.data
        fp.write(struct.pack("<H", len(blob)))
        fp.write(blob)
        fp.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
        for extent in arr.shape:
            fp.write(struct.pack("<I", extent))
        fp.write(arr.astype(arr.dtype.newbyteorder("<")).tobytes())


def load_checkpoint(fp: IO[bytes]) -> Tuple[BridgeParams, dict]:
    data = fp.read()
    if data[:4] != CKPT_MAGIC:
        raise ValueError("not a checkpoint")
    version, count = struct.unpack_from("<HI", data, 4)
    if version != CKPT_VERSION:
        raise ValueError("unsupported version")
    (meta_len,) = struct.unpack_from("<Q", data, 10)
    offset = 18
    meta = json.loads(data[offset:offset + meta_len])
    offset += meta_len
    tensors: Dict[str, Tensor] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", data, offset)
        offset += 2
        name = data[offset:offset + name_len].decode()
        offset += name_len
        code, ndim = struct.unpack_from("<BB", data, offset)
        offset += 2
        shape = struct.unpack_from(f"<{ndim}I", data, offset)
        offset += 4 * ndim
        dtype = _CODE_DTYPES[code]
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype=dtype, count=size, offset=offset)
        offset += size * dtype.itemsize
        tensors[name] = Tensor(arr.reshape(shape).astype(dtype.newbyteorder("=")))
    config = BridgeConfig(**meta.pop("config"))
    return BridgeParams(config, tensors), meta
