"""Recurrent bridge, cache retrieval, pipeline, and checkpoint tests."""

import io
from dataclasses import replace

import numpy as np
import pytest

from membridge import tensor as T
from membridge.tensor import Tensor
from membridge.bridge import (
    BridgeConfig,
    BridgeParams,
    bridge_step,
    load_checkpoint,
    retrieve,
    run_pipeline,
    save_checkpoint,
)
from membridge.streams import EmbeddingStream
from membridge.tiling import uniform_segmentation


CFG = BridgeConfig(memory_tokens=4, hidden_size=16, heads=4)


def make_params(config=CFG, seed=0):
    return BridgeParams.init(config, seed=seed)


def make_stream(n, dim, seed=0):
    rng = np.random.default_rng(seed)
    return EmbeddingStream(rng.standard_normal((n, dim)))


class TestBridgeStep:
    def test_shapes(self):
        params = make_params()
        rng = np.random.default_rng(1)
        memory = Tensor(rng.standard_normal((4, 16)))
        segment = Tensor(rng.standard_normal((5, 16)))
        next_memory, output = bridge_step(memory, segment, params)
        assert next_memory.shape == (4, 16)
        assert output.shape == (5, 16)

    def test_deterministic(self):
        params = make_params()
        rng = np.random.default_rng(2)
        memory = Tensor(rng.standard_normal((4, 16)))
        segment = Tensor(rng.standard_normal((3, 16)))
        a = bridge_step(memory, segment, params)
        b = bridge_step(memory, segment, params)
        np.testing.assert_array_equal(a[0].data, b[0].data)
        np.testing.assert_array_equal(a[1].data, b[1].data)

    def test_no_positional_encoding_permutation_equivariance(self):
        """Permuting segment frames permutes outputs and leaves memory fixed."""
        params = make_params()
        rng = np.random.default_rng(3)
        memory = Tensor(rng.standard_normal((4, 16)))
        frames = rng.standard_normal((6, 16))
        perm = rng.permutation(6)
        m1, o1 = bridge_step(memory, Tensor(frames), params)
        m2, o2 = bridge_step(memory, Tensor(frames[perm]), params)
        np.testing.assert_allclose(m1.data, m2.data, atol=1e-10)
        np.testing.assert_allclose(o1.data[perm], o2.data, atol=1e-10)

    def test_hidden_size_mismatch(self):
        params = make_params()
        with pytest.raises(ValueError, match="hidden size mismatch"):
            bridge_step(Tensor(np.zeros((4, 8))), Tensor(np.zeros((2, 8))), params)

    def test_empty_segment(self):
        params = make_params()
        with pytest.raises(ValueError, match="empty segment"):
            bridge_step(Tensor(np.zeros((4, 16))), Tensor(np.zeros((0, 16))), params)

    def test_memory_depends_on_segment(self):
        params = make_params()
        rng = np.random.default_rng(4)
        memory = Tensor(rng.standard_normal((4, 16)))
        a, _ = bridge_step(memory, Tensor(rng.standard_normal((3, 16))), params)
        b, _ = bridge_step(memory, Tensor(rng.standard_normal((3, 16))), params)
        assert np.abs(a.data - b.data).max() > 1e-8


class TestRetrieve:
    def test_empty_cache(self):
        params = make_params()
        with pytest.raises(ValueError, match="retrieval before initialization"):
            retrieve(Tensor(np.zeros((4, 16))), [], params)

    def test_shape_preserved(self):
        params = make_params()
        rng = np.random.default_rng(5)
        memory = Tensor(rng.standard_normal((4, 16)))
        cache = [Tensor(rng.standard_normal((4, 16))) for _ in range(3)]
        assert retrieve(memory, cache, params).shape == (4, 16)

    def test_cache_block_permutation_invariance(self):
        """No positions on the cache: block order cannot matter."""
        params = make_params()
        rng = np.random.default_rng(6)
        memory = Tensor(rng.standard_normal((4, 16)))
        cache = [Tensor(rng.standard_normal((4, 16))) for _ in range(4)]
        a = retrieve(memory, cache, params)
        b = retrieve(memory, cache[::-1], params)
        np.testing.assert_allclose(a.data, b.data, atol=1e-10)

    def test_no_residual(self):
        """Output is a convex combination of projected cache rows only."""
        config = replace(CFG, heads=1)
        params = make_params(config)
        rng = np.random.default_rng(7)
        memory = Tensor(rng.standard_normal((4, 16)))
        block = Tensor(np.tile(rng.standard_normal(16), (4, 1)))
        out = retrieve(memory, [block], params)
        # identical keys/values: every query row must map to the same output
        spread = out.data.max(axis=0) - out.data.min(axis=0)
        assert np.abs(spread).max() < 1e-10

    def test_literal_projection_requires_single_head(self):
        config = replace(CFG, retrieval_output_projection=False)
        params = make_params(config)
        memory = Tensor(np.zeros((4, 16)))
        with pytest.raises(ValueError, match="single head"):
            retrieve(memory, [memory], params)


class TestRunPipeline:
    def test_cache_growth(self):
        params = make_params()
        stream = make_stream(12, 16)
        result = run_pipeline(stream, uniform_segmentation(12, 3), params)
        assert len(result.cache) == 4  # initial memory + one per segment
        assert result.cache[0] is params["memory.init"]
        assert result.cache_bytes == 4 * 4 * 16 * 8

    def test_partition_validated(self):
        params = make_params()
        stream = make_stream(10, 16)
        seg = uniform_segmentation(8, 2)
        with pytest.raises(ValueError, match="partition"):
            run_pipeline(stream, seg, params)

    def test_retrieval_changes_result(self):
        params = make_params()
        stream = make_stream(16, 16, seed=8)
        seg = uniform_segmentation(16, 4)
        with_r = run_pipeline(stream, seg, params)
        without = run_pipeline(stream, seg, params,
                               replace(CFG, retrieval_enabled=False))
        assert np.abs(with_r.memory.data - without.memory.data).max() > 1e-8

    def test_phase_hook_order(self):
        params = make_params()
        stream = make_stream(9, 16)
        phases = []
        run_pipeline(stream, uniform_segmentation(9, 3), params,
                     phase_hook=phases.append)
        assert phases == ["retrieve", "bridge"] * 3

    def test_first_step_retrieves_over_initial_memory(self):
        """The cache already holds the initial block during step one."""
        params = make_params()
        stream = make_stream(4, 16, seed=9)
        seg = uniform_segmentation(4, 1)
        expected_m = retrieve(params["memory.init"], [params["memory.init"]],
                              params)
        manual, _ = bridge_step(expected_m, Tensor(stream.frames), params)
        result = run_pipeline(stream, seg, params)
        np.testing.assert_allclose(result.memory.data, manual.data, atol=1e-12)

    def test_gradient_reaches_first_segment(self):
        params = make_params()
        stream = make_stream(8, 16, seed=10)
        frames = Tensor(stream.frames)
        result = run_pipeline(stream, uniform_segmentation(8, 4), params,
                              frames_override=frames)
        result.memory.sum().backward()
        assert np.abs(frames.grad[:2]).max() > 1e-10

    def test_segment_count_does_not_change_egress_width(self):
        params = make_params()
        for k in (1, 2, 4):
            result = run_pipeline(make_stream(8, 16), uniform_segmentation(8, k),
                                  params)
            assert result.memory.shape == (4, 16)


class TestCheckpoint:
    def test_round_trip(self):
        params = BridgeParams.init(CFG, seed=3, probe_classes=4)
        buf = io.BytesIO()
        save_checkpoint(params, buf, meta={"note": "x"})
        buf.seek(0)
        loaded, meta = load_checkpoint(buf)
        assert meta == {"note": "x"}
        assert loaded.config == CFG
        assert set(loaded.tensors) == set(params.tensors)
        for name, tensor in params.items():
            np.testing.assert_array_equal(loaded[name].data, tensor.data)

    def test_float32_round_trip(self):
        params = BridgeParams.init(CFG, seed=4, dtype=np.float32)
        buf = io.BytesIO()
        save_checkpoint(params, buf)
        buf.seek(0)
        loaded, _ = load_checkpoint(buf)
        for name, tensor in params.items():
            assert loaded[name].data.dtype == np.float32
            np.testing.assert_array_equal(loaded[name].data, tensor.data)

    def test_bad_magic(self):
        with pytest.raises(ValueError, match="not a checkpoint"):
            load_checkpoint(io.BytesIO(b"JUNKJUNKJUNK"))

    def test_bad_version(self):
        params = make_params()
        buf = io.BytesIO()
        save_checkpoint(params, buf)
        raw = bytearray(buf.getvalue())
        raw[4] = 99
        with pytest.raises(ValueError, match="unsupported version"):
            load_checkpoint(io.BytesIO(bytes(raw)))

    def test_zero_init_memory(self):
        params = BridgeParams.init(replace(CFG, zero_init_memory=True))
        np.testing.assert_array_equal(params["memory.init"].data,
                                      np.zeros((4, 16)))


class TestConfigValidation:
    @pytest.mark.parametrize("kwargs,match", [
        ({"memory_tokens": 0}, "memory_tokens"),
        ({"hidden_size": 10, "heads": 4}, "divisible"),
        ({"retrieve_order": "sideways"}, "retrieve_order"),
    ])
    def test_bad_configs(self, kwargs, match):
        with pytest.raises(ValueError, match=match):
            BridgeConfig(**kwargs)
