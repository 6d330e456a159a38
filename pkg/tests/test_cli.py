"""End-to-end command-line interface tests (dispatch, exit codes, piping)."""

import io
import json

import numpy as np
import pytest

from membridge.cli import dispatch
from membridge.streams import (EmbeddingStream, generate_scene_stream,
                               SceneSpec, write_jsonl, read_estream)


def run(argv, capsys):
    code = dispatch(argv)
    captured = capsys.readouterr()
    return code, captured.out, captured.err


class TestGenerate:
    def test_writes_estream(self, tmp_path, capsys):
        out = tmp_path / "s.estream"
        code, stdout, stderr = run([
            "generate", "--scenes", "3", "--frames-per-scene", "4:4",
            "--dim", "8", "--out", str(out)], capsys)
        assert code == 0
        info = json.loads(stdout)
        assert info["frames"] == 12
        assert info["boundaries"] == [4, 8]
        with open(out, "rb") as fp:
            assert read_estream(fp).n == 12
        assert "resolved_config" in stderr

    def test_jsonl_format(self, tmp_path, capsys):
        out = tmp_path / "s.jsonl"
        code, _, _ = run(["generate", "--scenes", "2", "--dim", "4",
                          "--format", "jsonl", "--out", str(out)], capsys)
        assert code == 0
        assert out.read_text().startswith('{"dim": 4')


class TestSegment:
    def test_finds_generated_cuts(self, tmp_path, capsys):
        src = tmp_path / "s.estream"
        run(["generate", "--scenes", "3", "--frames-per-scene", "5:5",
             "--dim", "32", "--out", str(src), "--seed", "4"], capsys)
        code, stdout, _ = run(["segment", "--in", str(src)], capsys)
        assert code == 0
        payload = json.loads(stdout)
        assert payload["cuts"] == [5, 10]
        assert payload["threshold"] is not None

    def test_missing_file_exit_2(self, capsys):
        code, _, stderr = run(["segment", "--in", "/nonexistent.estream"], capsys)
        assert code == 2
        assert "not found" in stderr

    def test_config_file_overrides_default(self, tmp_path, capsys):
        src = tmp_path / "s.estream"
        run(["generate", "--scenes", "2", "--dim", "16", "--out", str(src)],
            capsys)
        cfg = tmp_path / "seg.cfg"
        cfg.write_text("alpha = 2.5\n# comment\n")
        code, _, stderr = run(["segment", "--in", str(src),
                               "--config", str(cfg)], capsys)
        assert code == 0
        assert '"alpha": 2.5' in stderr

    def test_unknown_config_key_exit_1(self, tmp_path, capsys):
        src = tmp_path / "s.estream"
        run(["generate", "--scenes", "2", "--dim", "16", "--out", str(src)],
            capsys)
        cfg = tmp_path / "seg.cfg"
        cfg.write_text("banana = 1\n")
        code, _, stderr = run(["segment", "--in", str(src),
                               "--config", str(cfg)], capsys)
        assert code == 1
        assert "unknown config key" in stderr


class TestStream:
    def _pipe(self, text, argv, capsys, monkeypatch):
        monkeypatch.setattr("sys.stdin", io.StringIO(text))
        return run(argv, capsys)

    def test_boundaries_on_stdin(self, capsys, monkeypatch):
        stream = generate_scene_stream(SceneSpec(
            scene_count=2, frames_per_scene=(8, 8), dim=32, seed=0))
        buf = io.StringIO()
        write_jsonl(stream, buf)
        code, stdout, _ = self._pipe(buf.getvalue(), ["stream"], capsys,
                                     monkeypatch)
        assert code == 0
        events = [json.loads(line) for line in stdout.strip().splitlines()]
        assert [e["boundary_at"] for e in events] == stream.boundaries

    def test_malformed_line_exit_2(self, capsys, monkeypatch):
        text = '{"dim": 2, "fps": 1.0}\n{"v": [1, 0]}\nnot json\n'
        code, _, stderr = self._pipe(text, ["stream"], capsys, monkeypatch)
        assert code == 2
        assert "malformed line 3" in stderr

    def test_missing_header_exit_2(self, capsys, monkeypatch):
        code, _, stderr = self._pipe('{"v": [1, 0]}\n', ["stream"], capsys,
                                     monkeypatch)
        assert code == 2
        assert "missing header" in stderr


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "probe.ckpt"
    code = dispatch(["train", "--variant", "mean_pool", "--dim", "16",
                     "--classes", "3", "--memory-tokens", "2",
                     "--heads", "2", "--train-streams", "8",
                     "--epochs", "1", "--out", str(path)])
    assert code == 0
    return path


class TestTrainEvalNeedleBench:
    def test_train_reports_losses(self, checkpoint, capsys):
        capsys.readouterr()
        assert checkpoint.exists()

    def test_eval_uses_checkpoint_metadata(self, checkpoint, capsys):
        code, stdout, _ = run(["eval", "--ckpt", str(checkpoint),
                               "--length", "16", "--samples", "5"], capsys)
        assert code == 0
        payload = json.loads(stdout)
        assert payload["variant"] == "mean_pool"
        assert 0.0 <= payload["accuracy"] <= 1.0

    def test_needle_grid_csv(self, checkpoint, tmp_path, capsys):
        out = tmp_path / "grid.csv"
        code, _, stderr = run([
            "needle", "--ckpt", str(checkpoint), "--length-levels", "2",
            "--depth-levels", "2", "--max-length", "32", "--min-length", "16",
            "--seeds-per-cell", "1", "--out", str(out)], capsys)
        assert code == 0
        assert out.read_text().startswith("length,depth,score")
        assert "overall_mean" in stderr

    def test_bench_memory_json(self, tmp_path, capsys):
        out = tmp_path / "bench.json"
        code, _, _ = run(["bench", "--mode", "memory", "--dim", "16",
                          "--memory-tokens", "2", "--heads", "2",
                          "--lengths", "32,64", "--out", str(out)], capsys)
        assert code == 0
        decoded = json.loads(out.read_text())
        assert "cache_vs_k" in decoded["fits"]

    def test_missing_checkpoint_exit_2(self, capsys):
        code, _, stderr = run(["eval", "--ckpt", "/no/such.ckpt"], capsys)
        assert code == 2
        assert "not found" in stderr
