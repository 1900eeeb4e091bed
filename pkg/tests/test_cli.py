import json
from pathlib import Path

import pytest

from slak.cli import EXIT_CONFIG, EXIT_OK, build_run, flatten, main

GOLDEN = Path(__file__).parent / "golden"
TINY = {"model": {"preset": "slak-micro", "stage_blocks": [1, 1], "stage_dims": [8, 16], "stage_kernels": [7, 5],
                  "short_edge": 3, "small_kernel": 3, "input_size": 16},
        "train": {"total_steps": 3, "batch_size": 4, "sparsity": 0.4, "frequency": 2},
        "task": {"threshold": 6, "margin": 1, "marker_size": 1}}


@pytest.fixture
def tiny_config(tmp_path):
    p = tmp_path / "micro.json"
    p.write_text(json.dumps(TINY))
    return p


class TestHelp:
    @pytest.mark.parametrize("cmd", ["main", "train", "bench", "erf", "flops", "plan"])
    def test_golden(self, cmd, capsys):
        argv = ["--help"] if cmd == "main" else [cmd, "--help"]
        assert main(argv) == EXIT_OK
        assert capsys.readouterr().out == (GOLDEN / f"help_{cmd}.txt").read_text()


class TestConfig:
    def test_flatten(self):
        assert flatten({"a": {"b": 1, "c": {"d": 2}}, "e": 3}) == {"a.b": 1, "a.c.d": 2, "e": 3}

    def test_unknown_key(self):
        with pytest.raises(Exception) as e:
            build_run({"train.steps": 3})
        assert e.value.field == "train.steps"


class TestTrain:
    def test_run_and_artifacts(self, tiny_config, tmp_path, capsys):
        out = tmp_path / "run"
        code = main(["train", "--config", str(tiny_config), "--set", "train.total_steps=4", "--out", str(out)])
        assert code == EXIT_OK
        rows = (out / "metrics.csv").read_text().splitlines()
        assert len(rows) == 5
        for name in ("resolved_config.json", "run_config.json", "checkpoint.slak"):
            assert (out / name).exists()
        assert json.loads(capsys.readouterr().out.strip())["steps"] == 4

    def test_replay_from_resolved(self, tiny_config, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["train", "--config", str(tiny_config), "--seed", "5", "--out", str(a)]) == EXIT_OK
        assert main(["train", "--config", str(a / "resolved_config.json"), "--out", str(b)]) == EXIT_OK
        assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
        assert (a / "checkpoint.slak").read_bytes() == (b / "checkpoint.slak").read_bytes()

    def test_seed_env_fallback(self, tiny_config, tmp_path, monkeypatch):
        monkeypatch.setenv("SLAK_SEED", "11")
        assert main(["train", "--config", str(tiny_config), "--out", str(tmp_path)]) == EXIT_OK
        assert json.loads((tmp_path / "resolved_config.json").read_text())["train.seed"] == 11

    def test_missing_config(self, tmp_path, capsys):
        assert main(["train", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == EXIT_CONFIG
        assert "config" in capsys.readouterr().err

    def test_bad_field(self, tiny_config, tmp_path, capsys):
        code = main(["train", "--config", str(tiny_config), "--set", "train.sparsity=1.5", "--out", str(tmp_path)])
        assert code == EXIT_CONFIG and "sparsity" in capsys.readouterr().err

    def test_bad_flag(self):
        assert main(["train", "--bogus"]) == EXIT_CONFIG


class TestOtherCommands:
    def test_plan(self, tmp_path, capsys):
        assert main(["plan", "--sparsity", "0.4", "--out", str(tmp_path)]) == EXIT_OK
        report = json.loads((tmp_path / "plan.json").read_text())
        assert report["factor"] == 1.3 and abs(report["rel_deviation"]) < 0.05
        assert report["widened_dims"] == [128, 248, 496, 1000]

    def test_plan_dense(self, tmp_path):
        assert main(["plan", "--sparsity", "0", "--out", str(tmp_path)]) == EXIT_OK
        assert json.loads((tmp_path / "plan.json").read_text())["factor"] == 1.0

    def test_plan_bad_sparsity(self, tmp_path):
        assert main(["plan", "--sparsity", "1.2", "--out", str(tmp_path)]) == EXIT_CONFIG

    def test_flops(self, tmp_path):
        assert main(["flops", "--kernels", "7,31,51,61", "--variant", "decomposed", "--out", str(tmp_path)]) == 0
        rows = (tmp_path / "flops.csv").read_text().splitlines()[1:]
        macs = [int(r.split(",")[2]) for r in rows]
        assert len(rows) == 4 and macs == sorted(macs) and len(set(macs)) == 4

    def test_flops_out_of_range(self, tmp_path):
        assert main(["flops", "--kernels", "2", "--out", str(tmp_path)]) == EXIT_CONFIG

    def test_erf(self, tmp_path):
        argv = ["erf", "--size", "32", "--images", "1", "--linear", "--svg", "--out", str(tmp_path),
                "--set", "model.stage_dims=[8,16,32]"]
        assert main(argv) == EXIT_OK
        summary = json.loads((tmp_path / "erf_summary.json").read_text())
        assert set(summary) == {"0.2", "0.3", "0.5", "0.99"}
        assert len((tmp_path / "erf_map.csv").read_text().splitlines()) == 32
        first = (tmp_path / "erf_map.csv").read_bytes()
        assert main(argv) == EXIT_OK and (tmp_path / "erf_map.csv").read_bytes() == first

    def test_bench(self, tmp_path):
        argv = ["bench", "--resolutions", "8", "--M", "7", "--N", "3", "--channels", "2", "--batch", "1",
                "--reps", "3", "--out", str(tmp_path)]
        assert main(argv) == EXIT_OK
        assert len((tmp_path / "speedup.csv").read_text().splitlines()) == 4
        assert main(argv + ["--json"]) == EXIT_OK
        assert len(json.loads((tmp_path / "speedup.json").read_text())) == 3

    def test_bench_bad_reps(self, tmp_path):
        assert main(["bench", "--reps", "1", "--out", str(tmp_path)]) == EXIT_CONFIG

    def test_unwritable_out(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        assert main(["plan", "--out", str(blocker)]) == EXIT_CONFIG
