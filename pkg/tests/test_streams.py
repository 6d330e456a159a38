"""Stream container, serialization, and synthetic generator tests."""

import io
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from membridge.streams import (
    EmbeddingStream,
    SceneSpec,
    generate_scene_stream,
    perturb_frame,
    read_estream,
    read_jsonl,
    sample_separated_centers,
    write_estream,
    write_jsonl,
)


def random_stream(rng, n=None, dim=None, with_labels=True, with_boundaries=True):
    n = n or int(rng.integers(1, 20))
    dim = dim or int(rng.integers(1, 16))
    frames = rng.standard_normal((n, dim)).astype(np.float32).astype(np.float64)
    labels = rng.integers(-1, 5, size=n).astype(np.int32) if with_labels else None
    boundaries = None
    if with_boundaries and n > 1:
        k = int(rng.integers(0, n))
        boundaries = sorted(rng.choice(np.arange(1, n), size=min(k, n - 1),
                                       replace=False).tolist()) or None
    return EmbeddingStream(frames, frame_rate=float(rng.uniform(0.5, 30)),
                           labels=labels, boundaries=boundaries)


class TestEmbeddingStream:
    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="at least one frame"):
            EmbeddingStream(np.zeros((0, 4)))

    def test_label_length_checked(self):
        with pytest.raises(ValueError, match="labels"):
            EmbeddingStream(np.zeros((3, 2)), labels=np.zeros(2, dtype=np.int32))

    @pytest.mark.parametrize("bad", [[0], [5], [2, 2], [3, 1]])
    def test_bad_boundaries(self, bad):
        with pytest.raises(ValueError, match="boundaries"):
            EmbeddingStream(np.zeros((5, 2)), boundaries=bad)

    def test_shape_properties(self):
        s = EmbeddingStream(np.zeros((7, 3)))
        assert (s.n, s.dim) == (7, 3)


class TestEstreamFormat:
    def test_round_trip_exact(self):
        rng = np.random.default_rng(0)
        s = random_stream(rng)
        back = read_estream(write_estream(s))
        np.testing.assert_array_equal(back.frames, s.frames)
        assert back.frame_rate == s.frame_rate
        np.testing.assert_array_equal(back.labels, s.labels)
        assert back.boundaries == s.boundaries

    def test_header_layout(self):
        s = EmbeddingStream(np.ones((2, 3)), frame_rate=4.0)
        raw = write_estream(s)
        assert raw[:4] == b"ESTR"
        version, dim, n, fps = struct.unpack_from("<HIQd", raw, 4)
        assert (version, dim, n, fps) == (1, 3, 2, 4.0)
        assert len(raw) == 26 + 4 * 6  # header + float32 payload, no sections

    def test_file_object_round_trip(self, tmp_path):
        s = random_stream(np.random.default_rng(1))
        path = tmp_path / "s.estream"
        with open(path, "wb") as fp:
            write_estream(s, fp)
        with open(path, "rb") as fp:
            back = read_estream(fp)
        np.testing.assert_array_equal(back.frames, s.frames)

    def test_bad_magic(self):
        with pytest.raises(ValueError, match="not an estream"):
            read_estream(b"NOPE" + bytes(40))

    def test_truncated_header(self):
        with pytest.raises(ValueError, match="truncated"):
            read_estream(b"ESTR" + bytes(10))

    def test_truncated_payload(self):
        raw = write_estream(EmbeddingStream(np.ones((4, 4))))
        with pytest.raises(ValueError, match="truncated"):
            read_estream(raw[:-3])

    def test_unsupported_version(self):
        raw = bytearray(write_estream(EmbeddingStream(np.ones((1, 1)))))
        raw[4:6] = struct.pack("<H", 9)
        with pytest.raises(ValueError, match="unsupported version"):
            read_estream(bytes(raw))

    def test_unknown_section_skipped(self):
        raw = write_estream(EmbeddingStream(np.ones((2, 2)), boundaries=[1]))
        extra = b"XTRA" + struct.pack("<Q", 3) + b"abc"
        back = read_estream(raw + extra)
        assert back.boundaries == [1]

    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=200, deadline=None)
    def test_round_trip_property(self, seed):
        s = random_stream(np.random.default_rng(seed))
        back = read_estream(write_estream(s))
        np.testing.assert_array_equal(back.frames, s.frames)
        assert back.frame_rate == s.frame_rate
        if s.labels is None:
            assert back.labels is None
        else:
            np.testing.assert_array_equal(back.labels, s.labels)
        assert back.boundaries == s.boundaries


class TestJsonl:
    def test_round_trip(self):
        s = random_stream(np.random.default_rng(2))
        buf = io.StringIO()
        write_jsonl(s, buf)
        buf.seek(0)
        back = read_jsonl(buf)
        np.testing.assert_allclose(back.frames, s.frames, rtol=0, atol=0)
        assert back.frame_rate == s.frame_rate
        assert back.boundaries == s.boundaries

    def test_blank_lines_ignored(self):
        buf = io.StringIO('{"dim": 2, "fps": 1.0}\n\n{"v": [1.0, 0.0]}\n\n')
        assert read_jsonl(buf).n == 1


class TestGenerator:
    def test_separated_centers(self):
        rng = np.random.default_rng(3)
        centers = sample_separated_centers(8, 32, 0.2, rng)
        np.testing.assert_allclose(np.linalg.norm(centers, axis=1), 1.0, atol=1e-12)
        gram = np.abs(centers @ centers.T - np.eye(8))
        assert gram.max() <= 0.2

    def test_avoid_rows_respected(self):
        rng = np.random.default_rng(4)
        avoid = sample_separated_centers(4, 32, 0.2, rng)
        centers = sample_separated_centers(4, 32, 0.2, rng, avoid=avoid)
        assert np.abs(centers @ avoid.T).max() <= 0.2

    def test_infeasible_raises(self):
        rng = np.random.default_rng(5)
        with pytest.raises(ValueError, match="separation infeasible"):
            sample_separated_centers(10, 2, 0.1, rng, budget=50)

    def test_perturb_stays_near_center(self):
        rng = np.random.default_rng(6)
        center = sample_separated_centers(1, 64, 0.2, rng)[0]
        frames = np.stack([perturb_frame(center, 0.05, rng) for _ in range(50)])
        cos = frames @ center
        assert cos.min() > 0.99
        np.testing.assert_allclose(np.linalg.norm(frames, axis=1), 1.0, atol=1e-6)

    def test_scene_stream_similarity_contrast(self):
        spec = SceneSpec(scene_count=5, frames_per_scene=(4, 6), dim=64, seed=11)
        s = generate_scene_stream(spec)
        unit = s.frames / np.linalg.norm(s.frames, axis=1, keepdims=True)
        sims = np.einsum("ij,ij->i", unit[:-1], unit[1:])
        cuts = set(s.boundaries)
        within = [sims[i] for i in range(len(sims)) if i + 1 not in cuts]
        across = [sims[i] for i in range(len(sims)) if i + 1 in cuts]
        assert min(within) >= 0.9
        assert max(across) <= 0.3

    def test_deterministic_per_seed(self):
        spec = SceneSpec(scene_count=3, frames_per_scene=(2, 4), dim=16, seed=9)
        a, b = generate_scene_stream(spec), generate_scene_stream(spec)
        np.testing.assert_array_equal(a.frames, b.frames)
        assert a.boundaries == b.boundaries

    def test_labels_follow_scenes(self):
        spec = SceneSpec(scene_count=4, frames_per_scene=(3, 3), dim=16, seed=1)
        s = generate_scene_stream(spec)
        assert s.boundaries == [3, 6, 9]
        np.testing.assert_array_equal(s.labels, np.repeat(np.arange(4), 3))

    @pytest.mark.parametrize("kwargs", [
        {"scene_count": 0, "frames_per_scene": (2, 3), "dim": 4},
        {"scene_count": 2, "frames_per_scene": (0, 3), "dim": 4},
        {"scene_count": 2, "frames_per_scene": (3, 2), "dim": 4},
        {"scene_count": 2, "frames_per_scene": (2, 3), "dim": 4, "noise_sigma": -1},
    ])
    def test_bad_specs(self, kwargs):
        with pytest.raises(ValueError):
            SceneSpec(**kwargs)
