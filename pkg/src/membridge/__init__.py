"""Long-context memory pipeline over embedding streams.

Semantic segmentation of frame-embedding streams, a recurrent memory
bridge with cache retrieval, a trainable needle-classification probe,
and the evaluation harnesses (needle grid, memory/time scaling) that
exercise the mechanism's claims at desk scale.
"""

from .tensor import Tensor, finite_difference, gradients, no_grad
from .streams import (EmbeddingStream, SceneSpec, generate_scene_stream,
                      read_estream, read_jsonl, write_estream, write_jsonl)
from .tiling import (DepthProfile, Segmentation, SegmentationConfig,
                     SimilarityProfile, StreamingBoundaryDetector,
                     StreamingConfig, cosine_profile, depth_scores, segment,
                     uniform_segmentation)
from .bridge import (BridgeConfig, BridgeParams, PipelineResult, bridge_step,
                     load_checkpoint, retrieve, run_pipeline, save_checkpoint)
from .probe import (TaskSpec, TrainConfig, VARIANTS, ablation_suite, evaluate,
                    make_needle_dataset, train_probe)
from .needle import GridConfig, GridReport, NeedleSpec, plant_needle, run_grid, score
from .bench import ScalingReport, measure_memory, measure_time

__version__ = "0.1.0"
