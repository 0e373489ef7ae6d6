"""Command-line surface: flags, config files, stream routing, exit codes."""

import json
import subprocess
import sys

import pytest

from attentive_mlp.bench import BenchConfig
from attentive_mlp.cli import main
from attentive_mlp.narmodel import load_checkpoint

TINY_TRAIN = [
    "--vocab", "7", "--len", "4", "--d-model", "8", "--heads", "2", "--c", "2",
    "--batch-size", "2", "--eval-samples", "16",
]


def run_cli(argv, capsys):
    code = main(argv)
    captured = capsys.readouterr()
    return code, captured.out, captured.err


class TestBenchCommand:
    def test_runs_below_four_is_usage_error(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["bench", "--runs", "3", "--lengths", "16"])
        assert exc.value.code == 2
        assert "4" in capsys.readouterr().err

    def test_grid_row_count(self, tmp_path, capsys):
        out = tmp_path / "bench.csv"
        code, stdout, stderr = run_cli(
            [
                "bench", "--lengths", "16,32", "--runs", "4", "--batch", "1",
                "--d", "16", "--heads", "2", "--c", "4", "--warmup", "0",
                "--out", str(out),
            ],
            capsys,
        )
        assert code == 0
        lines = out.read_text().strip().split("\n")
        assert len(lines) == 1 + 3 * 2  # header + archs x lengths
        assert "slope" in stdout
        assert "seed: 0" in stderr

    def test_single_cell(self, tmp_path, capsys):
        out = tmp_path / "one.csv"
        code, _, _ = run_cli(
            [
                "bench", "--lengths", "32", "--arch", "nar-amlp", "--runs", "4",
                "--batch", "1", "--d", "16", "--heads", "2", "--c", "4",
                "--warmup", "0", "--out", str(out),
            ],
            capsys,
        )
        assert code == 0
        lines = out.read_text().strip().split("\n")
        assert len(lines) == 2
        assert lines[1].startswith("nar-amlp,32,")

    def test_csv_on_stdout_without_out_flag(self, capsys):
        code, stdout, stderr = run_cli(
            [
                "bench", "--lengths", "16", "--arch", "nar-amlp", "--runs", "4",
                "--batch", "1", "--d", "8", "--heads", "1", "--c", "2", "--warmup", "0",
            ],
            capsys,
        )
        assert code == 0
        assert stdout.startswith("arch,n,batch,runs,kept,")
        assert "slope" in stderr

    def test_default_grid_is_eighteen_cells(self):
        # the paper-scale default grid (not timed here): 3 architectures x 6 lengths
        cfg = BenchConfig()
        assert len(cfg.architectures) * len(cfg.lengths) == 18


class TestModuleEntryPoint:
    def test_python_dash_m_invocation(self):
        proc = subprocess.run(
            [sys.executable, "-m", "attentive_mlp.cli", "verify", "--json", "--seed", "2"],
            capture_output=True,
            text=True,
        )
        assert proc.returncode == 0
        assert json.loads(proc.stdout)["passed"] is True
        assert "seed: 2" in proc.stderr


class TestConfigFile:
    def test_file_values_apply_and_flags_win(self, tmp_path, capsys):
        cfg = tmp_path / "bench.cfg"
        cfg.write_text(
            "# comment line\n"
            "lengths=16\n"
            "runs=4\n"
            "batch=1\n"
            "d=16\n"
            "heads=2\n"
            "c=4\n"
            "warmup=0\n"
            "arch=nar-amlp\n"
            "seed=7\n"
        )
        out = tmp_path / "b.csv"
        code, _, stderr = run_cli(
            ["bench", "--config", str(cfg), "--seed", "9", "--out", str(out)], capsys
        )
        assert code == 0
        assert "seed: 9" in stderr  # flag beats file
        assert "runs=4" in stderr  # file value echoed
        row = out.read_text().strip().split("\n")[1]
        assert row.split(",")[3] == "4"

    def test_unknown_key_rejected(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("bogus=1\n")
        with pytest.raises(SystemExit) as exc:
            main(["bench", "--config", str(cfg)])
        assert exc.value.code == 2
        assert "bogus" in capsys.readouterr().err

    def test_malformed_line_rejected(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("runs\n")
        with pytest.raises(SystemExit) as exc:
            main(["bench", "--config", str(cfg)])
        assert exc.value.code == 2


class TestTrainCommand:
    def test_zero_steps_prints_initial_accuracy_and_saves(self, tmp_path, capsys):
        ckpt = tmp_path / "init.ckpt"
        code, stdout, _ = run_cli(
            ["train", "--task", "copy", "--steps", "0", "--ckpt", str(ckpt)] + TINY_TRAIN,
            capsys,
        )
        assert code == 0
        assert stdout.startswith("initial accuracy ")
        assert "loss" not in stdout
        model = load_checkpoint(str(ckpt))
        assert model.config.vocab_size == 7

    def test_same_seed_same_loss_sequence(self, capsys):
        args = ["train", "--task", "copy", "--steps", "30", "--seed", "4"] + TINY_TRAIN
        _, out1, _ = run_cli(args, capsys)
        _, out2, _ = run_cli(args, capsys)
        losses1 = [l for l in out1.splitlines() if l.startswith("step")]
        losses2 = [l for l in out2.splitlines() if l.startswith("step")]
        assert losses1 and losses1 == losses2

    def test_loss_printed_every_hundred_steps(self, capsys):
        code, stdout, _ = run_cli(
            ["train", "--task", "copy", "--steps", "201"] + TINY_TRAIN, capsys
        )
        assert code == 0
        steps = [l.split()[1] for l in stdout.splitlines() if l.startswith("step")]
        assert steps == ["0", "100", "200"]
        assert stdout.strip().splitlines()[-1].startswith("final accuracy ")

    def test_unwritable_checkpoint_path(self, tmp_path, capsys):
        code, _, stderr = run_cli(
            ["train", "--task", "copy", "--steps", "1",
             "--ckpt", str(tmp_path / "no" / "dir" / "x.ckpt")] + TINY_TRAIN,
            capsys,
        )
        assert code == 1
        assert "error" in stderr

    def test_reverse_task_reaches_ninety_percent(self, capsys):
        # default model at 2000 steps; the acceptance suite covers the
        # full budget, this pins the CLI path end to end
        code, stdout, _ = run_cli(
            ["train", "--task", "reverse", "--variant", "cov", "--steps", "2000"], capsys
        )
        assert code == 0
        final = [l for l in stdout.splitlines() if l.startswith("final accuracy")][0]
        assert float(final.split()[-1]) >= 0.90


class TestVerifyCommand:
    def test_fresh_build_all_pass(self, capsys):
        code, stdout, _ = run_cli(["verify"], capsys)
        assert code == 0
        assert "FAIL" not in stdout
        assert stdout.count("PASS") >= 10

    def test_json_output_parses(self, capsys):
        code, stdout, _ = run_cli(["verify", "--json", "--seed", "12"], capsys)
        assert code == 0
        payload = json.loads(stdout)
        assert payload["passed"] is True
        assert payload["seed"] == 12
        assert all(p["passed"] for p in payload["properties"])

    def test_json_deterministic(self, capsys):
        _, out1, _ = run_cli(["verify", "--json", "--seed", "3"], capsys)
        _, out2, _ = run_cli(["verify", "--json", "--seed", "3"], capsys)
        assert out1 == out2

    def test_break_gradients_negative_control(self, capsys):
        code, stdout, _ = run_cli(["verify", "--break-gradients"], capsys)
        assert code == 1
        failed = [l for l in stdout.splitlines() if l.startswith("FAIL")]
        assert any("gradient" in l for l in failed)
