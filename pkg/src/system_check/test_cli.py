"""Command-line tests: exit codes, output files and determinism."""

import json

from lwdna.cli import main
from lwdna.complexity import count_flops
from lwdna.model_zoo import build
from lwdna.pipeline.reporting import STUDY_COLUMNS
from lwdna.types import ChannelConfig

SMALL_DATA = ["--synth-classes", "4", "--synth-hw", "8", "--synth-train", "64", "--synth-test", "32"]
FAST = ["--epochs", "1", "--batch-size", "32", "--no-crop", "--no-flip"]


def shrink_args(out, *extra):
    return ["shrink", "--arch", "vgg-tiny", "--output", str(out), "--m", "2", *SMALL_DATA, *extra]


def test_analyze_resnet56_prints_golden_costs(capsys):
    assert main(["analyze", "--arch", "resnet56"]) == 0
    out = capsys.readouterr().out
    assert "0.1274 / 100.00" in out
    assert "0.856 / 100.00" in out


def test_analyze_against_base_config(capsys):
    code = main(["analyze", "--arch", "vgg-tiny", "--config", "8,8,16,16,32,32",
                 "--base-config", "16,16,32,32,64,64", "--input", "16", "--per-layer"])
    assert code == 0
    out = capsys.readouterr().out
    assert "conv6" in out and "head.linear" in out
    assert "/ 100.00" not in out


def test_analyze_rejects_bad_config(capsys):
    assert main(["analyze", "--arch", "vgg-tiny", "--config", "8,8"]) == 2
    assert "entries" in capsys.readouterr().err


def test_unknown_arch_exits_with_input_error(tmp_path):
    assert main(["shrink", "--arch", "lenet", "--output", str(tmp_path), *SMALL_DATA]) == 2


def test_invalid_parameter_exits_with_input_error(tmp_path):
    assert main(shrink_args(tmp_path, "--rho", "0")) == 2


def test_shrink_is_byte_deterministic(tmp_path):
    assert main(shrink_args(tmp_path / "a", "--seed", "4")) == 0
    assert main(shrink_args(tmp_path / "b", "--seed", "4")) == 0
    for name in ("shrink_report.json", "channels.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    header = (tmp_path / "a" / "channels.csv").read_text().splitlines()[0]
    assert header == "layer_index,wide_channels,kept_channels,percent_of_baseline"


def test_infeasible_budget_exits_two(tmp_path, capsys):
    assert main(shrink_args(tmp_path, "--budget", "0.001")) == 2
    assert "infeasible" in capsys.readouterr().err
    assert not (tmp_path / "shrink_report.json").exists()


def test_unit_beta_with_full_budget_keeps_baseline(tmp_path):
    assert main(shrink_args(tmp_path, "--beta", "1", "--budget", "1.0")) == 0
    report = json.loads((tmp_path / "shrink_report.json").read_text())
    assert report["shrunk_config"] == report["baseline_config"] == [16, 16, 32, 32, 64, 64]
    assert report["flops_ratio"] == 100.0


def test_absolute_budget(tmp_path):
    assert main(shrink_args(tmp_path, "--budget-flops", "500000")) == 0
    report = json.loads((tmp_path / "shrink_report.json").read_text())
    assert report["target_flops"] == 500000
    assert report["shrunk_flops"] <= 500000


def test_existing_outputs_need_force(tmp_path):
    assert main(shrink_args(tmp_path)) == 0
    report = tmp_path / "shrink_report.json"
    before = report.read_bytes()
    report.write_bytes(b"sentinel")
    assert main(shrink_args(tmp_path, "--seed", "9")) == 1
    assert report.read_bytes() == b"sentinel"
    assert main(shrink_args(tmp_path, "--force")) == 0
    assert report.read_bytes() == before


def test_schema_export(tmp_path, capsys):
    out = tmp_path / "schemas"
    assert main(["schema", "--out", str(out)]) == 0
    files = sorted(p.name for p in out.iterdir())
    assert files == sorted(f"{n}.schema.json" for n in
                           ("shrink_report", "train_log", "summary", "cost_report", "arch_spec", "study_report"))
    schema = json.loads((out / "shrink_report.schema.json").read_text())
    assert schema["$id"] == "lwdna/shrink_report/v1"
    assert "shrunk_config" in schema["properties"]
    assert main(["schema", "--out", str(out)]) == 1


def test_train_then_eval_checkpoint(tmp_path, capsys):
    common = ["--arch", "vgg-tiny", "--output", str(tmp_path), *SMALL_DATA]
    assert main(["train", *common, *FAST, "--label", "base"]) == 0
    for name in ("base_log.csv", "base.ckpt", "base_log.json"):
        assert (tmp_path / name).exists()
    capsys.readouterr()
    assert main(["eval", *common, "--checkpoint", str(tmp_path / "base.ckpt")]) == 0
    assert "top1_err" in capsys.readouterr().out


def test_eval_rejects_corrupt_checkpoint(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"nope")
    assert main(["eval", "--output", str(tmp_path), *SMALL_DATA, "--checkpoint", str(bad)]) == 2


def test_compare_is_reproducible(tmp_path):
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        args = ["compare", "--arch", "vgg-tiny", "--output", str(out), "--seed", "0", "--m", "2",
                "--beta", "1.5", "--budget", "0.8", *SMALL_DATA, *FAST]
        assert main(args) == 0
        runs.append(json.loads((out / "summary.json").read_text()))
    assert runs[0] == runs[1]
    summary = runs[0]
    assert summary["flops_ratio"] <= 80.0
    assert summary["baseline_config"] == [16, 16, 32, 32, 64, 64]
    for name in ("baseline_log.csv", "lwdna_log.csv", "baseline.ckpt", "lwdna.ckpt", "shrink_report.json"):
        assert (tmp_path / "a" / name).exists()


def test_shrink_starts_from_given_config(tmp_path):
    assert main(shrink_args(tmp_path, "--config", "8,8,16,16,32,32")) == 0
    report = json.loads((tmp_path / "shrink_report.json").read_text())
    assert report["baseline_config"] == [8, 8, 16, 16, 32, 32]
    assert report["wide_config"] == [16, 16, 32, 32, 64, 64]
    arch = build("vgg-tiny", num_classes=4, input_hw=(8, 8))
    base_flops = count_flops(arch, ChannelConfig(values=[8, 8, 16, 16, 32, 32]))
    assert report["target_flops"] == int(0.95 * base_flops)
    assert report["shrunk_flops"] <= report["target_flops"]


def test_compare_with_plain_baseline(tmp_path):
    args = ["compare", "--arch", "vgg-tiny", "--output", str(tmp_path), "--m", "2", "--beta", "1.5",
            "--budget", "0.8", "--kd", "--plain-baseline", *SMALL_DATA, *FAST]
    assert main(args) == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["plain_baseline_top1_err"] is not None
    assert summary["plain_baseline_protocol_hash"] != summary["protocol_hash"]
    for name in ("teacher.ckpt", "baseline_plain_log.csv", "baseline_plain.ckpt"):
        assert (tmp_path / name).exists()


def test_plain_baseline_needs_kd(tmp_path, capsys):
    args = ["compare", "--arch", "vgg-tiny", "--output", str(tmp_path), "--m", "2",
            "--plain-baseline", *SMALL_DATA, *FAST]
    assert main(args) == 2
    assert "--kd" in capsys.readouterr().err


def test_ablate_reports_infeasible_floors(tmp_path, capsys):
    args = ["ablate", "--arch", "vgg-tiny", "--output", str(tmp_path), "--m", "2", "--beta", "1.5",
            "--rho-values", "0.4", "1.0", "--tau-values", "0.45", "1.0", *SMALL_DATA, *FAST]
    assert main(args) == 0
    report = json.loads((tmp_path / "ablation.json").read_text())
    rows = {r["label"]: r for r in report["rows"]}
    assert sorted(rows) == ["rho0.4_tau0.45", "rho0.4_tau1", "rho1_tau0.45", "rho1_tau1"]
    assert rows["rho0.4_tau0.45"]["feasible"]
    assert not rows["rho1_tau1"]["feasible"] and rows["rho1_tau1"]["top1_err"] is None
    for row in report["rows"]:
        if row["feasible"]:
            assert row["shrunk_flops"] <= report["target_flops"]
    header = (tmp_path / "ablation.csv").read_text().splitlines()[0]
    assert header == ",".join(STUDY_COLUMNS)
    assert "infeasible" in capsys.readouterr().out


def test_criteria_scores_both_saliencies(tmp_path):
    args = ["criteria", "--arch", "vgg-tiny", "--output", str(tmp_path), "--m", "2", "--beta", "1.5",
            "--budget", "0.8", *SMALL_DATA, *FAST]
    assert main(args) == 0
    report = json.loads((tmp_path / "criteria.json").read_text())
    assert report["kind"] == "criterion"
    assert [r["label"] for r in report["rows"]] == ["gradient", "magnitude"]
    assert all(r["feasible"] and r["flops_ratio"] <= 80.0 for r in report["rows"])
    assert (tmp_path / "criteria.csv").exists()
