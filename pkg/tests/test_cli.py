import json

import numpy as np
import pytest
from click.testing import CliRunner

from satool.cli import main


@pytest.fixture()
def runner():
    return CliRunner()


def gen_args(out, **overrides):
    args = ["gen-trace", "--out", str(out), "--layers", "2", "--heads", "3",
            "--tokens", "16", "--head-dim", "4", "--steps", "8",
            "--block-size", "4", "--velocity-shape", "4,4,4", "--seed", "5"]
    for key, value in overrides.items():
        args += [f"--{key.replace('_', '-')}", str(value)]
    return args


@pytest.fixture()
def trace_dir(tmp_path, runner):
    out = tmp_path / "trace"
    result = runner.invoke(main, gen_args(out))
    assert result.exit_code == 0, result.output
    return out


def read_csv(path):
    lines = path.read_text().strip().split("\n")
    header = lines[0].split(",")
    return header, [line.split(",") for line in lines[1:]]


class TestGenTrace:
    def test_writes_magic_and_manifest(self, trace_dir):
        assert (trace_dir / "trace.satr").read_bytes()[:4] == b"SATR"
        manifest = json.loads((trace_dir / "manifest.json").read_text())
        assert manifest["command"] == "gen-trace"
        assert "trace.satr" in manifest["outputs"]

    def test_identical_flags_identical_bytes(self, tmp_path, runner):
        out1, out2 = tmp_path / "a", tmp_path / "b"
        assert runner.invoke(main, gen_args(out1)).exit_code == 0
        assert runner.invoke(main, gen_args(out2)).exit_code == 0
        assert (out1 / "trace.satr").read_bytes() == (out2 / "trace.satr").read_bytes()
        m1 = json.loads((out1 / "manifest.json").read_text())
        m2 = json.loads((out2 / "manifest.json").read_text())
        assert m1["outputs"] == m2["outputs"]

    def test_invalid_config_error_prefix(self, tmp_path, runner):
        result = runner.invoke(main, gen_args(tmp_path / "bad", tokens=15))
        assert result.exit_code == 1
        assert result.output.startswith("error:config:") or "error:config:" in result.output


class TestAnalyze:
    def test_row_counts_and_frozen_iou(self, tmp_path, runner):
        out = tmp_path / "frozen"
        assert runner.invoke(main, gen_args(out, kappa="1.0")).exit_code == 0
        report = tmp_path / "report"
        result = runner.invoke(main, [
            "analyze", "--trace", str(out / "trace.satr"), "--out", str(report),
        ])
        assert result.exit_code == 0, result.output
        header, rows = read_csv(report / "stability.csv")
        layers, heads, steps = 2, 3, 8
        assert len(rows) == (steps - 1) * (1 + layers + layers * heads)
        iou_col = header.index("token_iou")
        assert all(float(r[iou_col]) == 1.0 for r in rows)

    def test_unstable_trace_has_lower_iou(self, tmp_path, runner):
        frozen, wobbly = tmp_path / "f", tmp_path / "w"
        assert runner.invoke(main, gen_args(frozen, kappa="1.0")).exit_code == 0
        assert runner.invoke(main, gen_args(wobbly, kappa="0.0")).exit_code == 0
        means = {}
        for name, src in (("f", frozen), ("w", wobbly)):
            report = tmp_path / f"rep_{name}"
            assert runner.invoke(main, [
                "analyze", "--trace", str(src / "trace.satr"), "--out", str(report),
            ]).exit_code == 0
            header, rows = read_csv(report / "stability.csv")
            col = header.index("token_iou")
            means[name] = np.mean([float(r[col]) for r in rows])
        assert means["w"] < means["f"]

    def test_corrupt_trace_fails_cleanly(self, tmp_path, runner):
        bad = tmp_path / "bad.satr"
        bad.write_bytes(b"XXXX" + bytes(64))
        result = runner.invoke(main, ["analyze", "--trace", str(bad), "--out", str(tmp_path / "r")])
        assert result.exit_code == 1
        assert "error:trace-format:" in result.output

    def test_rerun_byte_identical(self, trace_dir, tmp_path, runner):
        outs = []
        for name in ("aa", "ab"):
            out = tmp_path / name
            assert runner.invoke(main, [
                "analyze", "--trace", str(trace_dir / "trace.satr"), "--out", str(out),
            ]).exit_code == 0
            outs.append(out)
        for fname in ("stability.csv", "drift_iou.csv", "summary.json"):
            assert (outs[0] / fname).read_bytes() == (outs[1] / fname).read_bytes()


class TestCalibrate:
    def test_calibrated_beats_shared_baseline(self, trace_dir, tmp_path, runner):
        out = tmp_path / "calib"
        result = runner.invoke(main, [
            "calibrate", "--trace", str(trace_dir / "trace.satr"), "--out", str(out),
            "--budget", "shared:0.9", "--check-oracle",
        ])
        assert result.exit_code == 0, result.output
        table = json.loads((out / "calibration.json").read_text())
        header, rows = read_csv(out / "baselines.csv")
        shared = {float(r[0]): float(r[1]) for r in rows}
        assert table["objective"] <= shared[0.9]
        assert table["achieved_sparsity"] >= table["budget"]
        assert table["optimal"] is True
        assert len(table["heads"]) == 2 * 3

    def test_zero_budget_matches_min_error(self, trace_dir, tmp_path, runner):
        out = tmp_path / "calib0"
        result = runner.invoke(main, [
            "calibrate", "--trace", str(trace_dir / "trace.satr"), "--out", str(out),
            "--budget", "0",
        ])
        assert result.exit_code == 0, result.output
        table = json.loads((out / "calibration.json").read_text())
        assert table["budget"] == 0.0

    def test_infeasible_budget_reports_max(self, trace_dir, tmp_path, runner):
        result = runner.invoke(main, [
            "calibrate", "--trace", str(trace_dir / "trace.satr"),
            "--out", str(tmp_path / "x"), "--budget", "0.99",
        ])
        assert result.exit_code == 1
        assert "error:infeasible:" in result.output
        assert "achievable" in result.output

    def test_malformed_budget_rejected(self, trace_dir, tmp_path, runner):
        for budget in ("shared:abc", "lots"):
            result = runner.invoke(main, [
                "calibrate", "--trace", str(trace_dir / "trace.satr"),
                "--out", str(tmp_path / "y"), "--budget", budget,
            ])
            assert result.exit_code == 1
            assert "error:domain:" in result.output

    def test_mse_objective_runs(self, trace_dir, tmp_path, runner):
        out = tmp_path / "mse"
        result = runner.invoke(main, [
            "calibrate", "--trace", str(trace_dir / "trace.satr"), "--out", str(out),
            "--budget", "0", "--error", "mse", "--taus", "0.9,0.95",
        ])
        assert result.exit_code == 0, result.output

    def test_rerun_byte_identical(self, trace_dir, tmp_path, runner):
        outs = []
        for name in ("r1", "r2"):
            out = tmp_path / name
            result = runner.invoke(main, [
                "calibrate", "--trace", str(trace_dir / "trace.satr"), "--out", str(out),
                "--budget", "shared:0.9",
            ])
            assert result.exit_code == 0, result.output
            outs.append(out)
        for fname in ("calibration.json", "baselines.csv"):
            assert (outs[0] / fname).read_bytes() == (outs[1] / fname).read_bytes()


class TestRun:
    def test_delta_zero_no_reuse(self, trace_dir, tmp_path, runner):
        out = tmp_path / "run0"
        result = runner.invoke(main, [
            "run", "--trace", str(trace_dir / "trace.satr"), "--out", str(out),
            "--delta", "0.0",
        ])
        assert result.exit_code == 0, result.output
        summary = json.loads((out / "summary.json").read_text())
        assert summary["reuse_rate"] == 0.0
        assert summary["mask_predictions"] == 8 * 2 * 3

    def test_delta_inf_always_reuses(self, trace_dir, tmp_path, runner):
        out = tmp_path / "runinf"
        result = runner.invoke(main, [
            "run", "--trace", str(trace_dir / "trace.satr"), "--out", str(out),
            "--delta", "inf",
        ])
        assert result.exit_code == 0, result.output
        summary = json.loads((out / "summary.json").read_text())
        assert summary["reuse_rate"] == pytest.approx(7 / 8)

    def test_reuse_monotone_over_grid(self, trace_dir, tmp_path, runner):
        rates = []
        for delta in ("0", "5", "10", "30", "100"):
            out = tmp_path / f"run{delta}"
            result = runner.invoke(main, [
                "run", "--trace", str(trace_dir / "trace.satr"), "--out", str(out),
                "--delta", delta,
            ])
            assert result.exit_code == 0, result.output
            rates.append(json.loads((out / "summary.json").read_text())["reuse_rate"])
        assert rates == sorted(rates)

    def test_run_with_table_and_mask_hex(self, trace_dir, tmp_path, runner):
        calib = tmp_path / "calib"
        assert runner.invoke(main, [
            "calibrate", "--trace", str(trace_dir / "trace.satr"), "--out", str(calib),
            "--budget", "shared:0.9",
        ]).exit_code == 0
        out = tmp_path / "run_t"
        result = runner.invoke(main, [
            "run", "--trace", str(trace_dir / "trace.satr"), "--out", str(out),
            "--table", str(calib / "calibration.json"), "--delta", "2.0",
        ])
        assert result.exit_code == 0, result.output
        summary = json.loads((out / "summary.json").read_text())
        from satool.blocksparse import mask_from_hex

        for head in summary["heads"]:
            mask = mask_from_hex(head["anchor_mask"]["bits"], head["anchor_mask"]["m"])
            assert mask.count >= 1

    def test_run_csv_columns(self, trace_dir, tmp_path, runner):
        out = tmp_path / "runcsv"
        assert runner.invoke(main, [
            "run", "--trace", str(trace_dir / "trace.satr"), "--out", str(out),
            "--delta", "1.0", "--no-gate",
        ]).exit_code == 0
        header, rows = read_csv(out / "run.csv")
        assert header == ["step", "layer", "head", "decision", "drift",
                          "realized_sparsity", "changed_block_ratio"]
        assert len(rows) == 8 * 2 * 3
        decisions = {r[3] for r in rows}
        assert "cold_start" in decisions

    def test_bad_delta_rejected(self, trace_dir, tmp_path, runner):
        result = runner.invoke(main, [
            "run", "--trace", str(trace_dir / "trace.satr"),
            "--out", str(tmp_path / "x"), "--delta", "-3",
        ])
        assert result.exit_code == 1
        assert "error:domain:" in result.output

    def test_rerun_byte_identical(self, trace_dir, tmp_path, runner):
        outs = []
        for name in ("ra", "rb"):
            out = tmp_path / name
            assert runner.invoke(main, [
                "run", "--trace", str(trace_dir / "trace.satr"), "--out", str(out),
                "--delta", "4.0",
            ]).exit_code == 0
            outs.append(out)
        for fname in ("run.csv", "summary.json"):
            assert (outs[0] / fname).read_bytes() == (outs[1] / fname).read_bytes()

    def test_malformed_table_rejected(self, trace_dir, tmp_path, runner):
        bad = tmp_path / "table.json"
        bad.write_text("{\"heads\": [{\"layer\": 0}]}")
        result = runner.invoke(main, [
            "run", "--trace", str(trace_dir / "trace.satr"),
            "--out", str(tmp_path / "z"), "--table", str(bad), "--delta", "1",
        ])
        assert result.exit_code == 1
        assert "error:domain:" in result.output


class TestPerturb:
    def test_rows_and_ratio(self, trace_dir, tmp_path, runner):
        out = tmp_path / "pert"
        result = runner.invoke(main, [
            "perturb", "--trace", str(trace_dir / "trace.satr"), "--out", str(out),
            "--alpha", "0.1", "--seeds", "0,1", "--steps", "0,1,2",
        ])
        assert result.exit_code == 0, result.output
        header, rows = read_csv(out / "perturb.csv")
        assert len(rows) == 4 * 2
        ratio_col = header.index("norm_ratio")
        for row in rows:
            assert abs(float(row[ratio_col]) - 0.1) <= 1e-6

    def test_alpha_zero_rows(self, trace_dir, tmp_path, runner):
        out = tmp_path / "pert0"
        result = runner.invoke(main, [
            "perturb", "--trace", str(trace_dir / "trace.satr"), "--out", str(out),
            "--alpha", "0.0", "--seeds", "0", "--steps", "0,1",
        ])
        assert result.exit_code == 0, result.output
        header, rows = read_csv(out / "perturb.csv")
        rel_col = header.index("rel_l2")
        psnr_col = header.index("psnr_db")
        for row in rows:
            assert float(row[rel_col]) == 0.0
            assert row[psnr_col] == "inf"


class TestFootprint:
    def test_reference_numbers(self, runner):
        result = runner.invoke(main, ["footprint"])
        assert result.exit_code == 0, result.output
        payload = json.loads(result.output)
        assert payload["mean_pooled_bytes"] == 368_640
        assert payload["full_token_bytes"] == 12_079_595_520

    def test_branches_flag_halves(self, runner):
        result = runner.invoke(main, ["footprint", "--branches", "1"])
        payload = json.loads(result.output)
        assert payload["mean_pooled_bytes"] == 368_640 // 2
        assert payload["full_token_bytes"] == 12_079_595_520 // 2

    def test_out_dir_gets_manifest(self, tmp_path, runner):
        out = tmp_path / "fp"
        result = runner.invoke(main, ["footprint", "--out", str(out)])
        assert result.exit_code == 0
        assert (out / "footprint.json").exists()
        assert (out / "manifest.json").exists()
