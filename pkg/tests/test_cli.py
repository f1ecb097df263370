import numpy as np
import pytest

from ssmtraj.cli import main
from ssmtraj.data import load_processed
from ssmtraj.numcore import load_checkpoint


def _synth_args(out, scenes=4, extra=()):
    return ["synth", "--kind", "highway", "--scenes", str(scenes), "--agents", "3",
            "--seed", "7", "--frames", "60", "--t-obs", "6", "--t-f", "6",
            "--downsample", "2", "--stride", "60", "--out", str(out), *extra]


def test_synth_is_deterministic_across_runs(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(_synth_args(a)) == 0
    assert main(_synth_args(b)) == 0
    assert (a / "dataset.ssmg").read_bytes() == (b / "dataset.ssmg").read_bytes()
    assert (a / "resolved.cfg").exists()


def test_synth_zero_scenes_writes_empty_dataset(tmp_path):
    out = tmp_path / "empty"
    assert main(_synth_args(out, scenes=0)) == 0
    assert load_processed(out / "dataset.ssmg") == []


def test_synth_roundabout_arcs_satisfy_speed_over_radius(tmp_path):
    out = tmp_path / "round"
    args = ["synth", "--kind", "roundabout", "--scenes", "1", "--agents", "2",
            "--radius", "20", "--speed", "10", "--seed", "3", "--frames", "50",
            "--t-obs", "6", "--t-f", "6", "--downsample", "2", "--out", str(out)]
    assert main(args) == 0
    windows = load_processed(out / "dataset.ssmg")
    pos = windows[0].observed_states[:, 0, :2]
    angles = np.unwrap(np.arctan2(pos[:, 1], pos[:, 0]))
    # 10/20 rad/s at 25 Hz, two-frame spacing
    assert np.allclose(np.abs(np.diff(angles)), 0.04, atol=1e-6)


def _train_once(tmp_path, extra=()):
    data_dir = tmp_path / "data"
    assert main(_synth_args(data_dir, scenes=6)) == 0
    run_dir = tmp_path / "run"
    args = ["train", "--data", str(data_dir / "dataset.ssmg"), "--out", str(run_dir),
            "--seed", "5", "--epochs", "2", "--batch-size", "4", *extra]
    assert main(args) == 0
    return data_dir, run_dir


def test_train_writes_checkpoint_log_config_and_curve(tmp_path):
    _, run_dir = _train_once(tmp_path)
    assert (run_dir / "checkpoint.ssmt").exists()
    assert (run_dir / "resolved.cfg").exists()
    assert (run_dir / "loss_curve.png").exists()
    log = (run_dir / "train_log.tsv").read_text().splitlines()
    assert log[0] == "epoch\ttrain_loss\tval_ADE\tval_FDE\twall_seconds"
    assert len(log) == 3  # header + two epochs
    load_checkpoint(run_dir / "checkpoint.ssmt")


def test_train_single_epoch_logs_single_row(tmp_path):
    data_dir = tmp_path / "data"
    assert main(_synth_args(data_dir, scenes=6)) == 0
    run_dir = tmp_path / "one"
    assert main(["train", "--data", str(data_dir / "dataset.ssmg"),
                 "--out", str(run_dir), "--epochs", "1"]) == 0
    log = (run_dir / "train_log.tsv").read_text().splitlines()
    assert len(log) == 2


def test_ablation_flag_resolves_the_three_switches(tmp_path):
    data_dir = tmp_path / "data"
    assert main(_synth_args(data_dir, scenes=6)) == 0
    run_dir = tmp_path / "h4"
    assert main(["train", "--data", str(data_dir / "dataset.ssmg"),
                 "--out", str(run_dir), "--epochs", "1", "--ablation", "H4"]) == 0
    text = (run_dir / "resolved.cfg").read_text()
    assert "mixed_mamba = false" in text
    assert "graph_considered = true" in text
    assert "linear_koopman = false" in text


def test_eval_baseline_cv_is_exact_on_noiseless_data(tmp_path, capsys):
    data_dir = tmp_path / "data"
    assert main(_synth_args(data_dir, scenes=4)) == 0
    out = tmp_path / "eval"
    args = ["eval", "--data", str(data_dir / "dataset.ssmg"), "--baseline", "cv",
            "--out", str(out), "--figures", "1"]
    assert main(args) == 0
    table = (out / "metrics.tsv").read_text().splitlines()
    assert table[0] == "model\tADE\tFDE\tMR\tAPDE\tANLL\tFNLL"
    cells = table[1].split("\t")
    assert cells[0] == "cv"
    assert float(cells[1]) == pytest.approx(0.0, abs=1e-9)
    assert cells[5] == "-" and cells[6] == "-"
    assert (out / "metrics.png").exists()
    assert list((out / "figures").glob("*.png"))


def test_eval_checkpoint_emits_metrics_and_figures(tmp_path):
    data_dir, run_dir = _train_once(tmp_path)
    out = tmp_path / "eval"
    args = ["eval", "--data", str(data_dir / "dataset.ssmg"),
            "--checkpoint", str(run_dir / "checkpoint.ssmt"),
            "--config", str(run_dir / "resolved.cfg"), "--out", str(out)]
    assert main(args) == 0
    table = (out / "metrics.tsv").read_text().splitlines()
    cells = table[1].split("\t")
    assert cells[0] == "model"
    assert all(np.isfinite(float(c)) for c in cells[1:])


def test_export_plot_schema_and_ellipse_axes(tmp_path):
    data_dir, run_dir = _train_once(tmp_path)
    out = tmp_path / "plots"
    args = ["export-plot", "--data", str(data_dir / "dataset.ssmg"),
            "--checkpoint", str(run_dir / "checkpoint.ssmt"),
            "--config", str(run_dir / "resolved.cfg"), "--out", str(out),
            "--samples", "1"]
    assert main(args) == 0
    lines = (out / "trajectories.tsv").read_text().splitlines()
    assert lines[0] == "sample\tagent\tseries\tstep\tx\ty\tell_major\tell_minor\tell_angle"
    series = {line.split("\t")[2] for line in lines[1:]}
    assert series == {"observed", "truth", "predicted"}
    assert list((out / "figures").glob("*.png"))

    # ellipse axes must equal 2 * sqrt(eigenvalues) of the position covariance
    from ssmtraj.cli import resolve_configs, build_parser
    from ssmtraj.training import TrajectoryPredictor, forward

    parser = build_parser()
    ns = parser.parse_args(args)
    model_cfg, _, _, run = resolve_configs(ns)
    model = TrajectoryPredictor(model_cfg)
    model.load_state_dict(load_checkpoint(run.checkpoint))
    sample = load_processed(data_dir / "dataset.ssmg")[0]
    result = forward(sample, model)
    predicted_rows = [l.split("\t") for l in lines[1:]
                      if l.split("\t")[2] == "predicted"]
    for row in predicted_rows[: sample.t_f]:
        agent_idx = sample.agent_ids.index(int(row[1]))
        step = int(row[3]) - 1
        vals = np.linalg.eigvalsh(result.covariances[agent_idx, step])
        assert float(row[6]) == pytest.approx(2 * np.sqrt(vals[1]), rel=1e-6)
        assert float(row[7]) == pytest.approx(2 * np.sqrt(vals[0]), rel=1e-6)


def test_export_plot_is_deterministic(tmp_path):
    data_dir, run_dir = _train_once(tmp_path)
    outs = []
    for name in ("p1", "p2"):
        out = tmp_path / name
        args = ["export-plot", "--data", str(data_dir / "dataset.ssmg"),
                "--checkpoint", str(run_dir / "checkpoint.ssmt"),
                "--config", str(run_dir / "resolved.cfg"), "--out", str(out),
                "--samples", "2"]
        assert main(args) == 0
        outs.append((out / "trajectories.tsv").read_bytes())
    assert outs[0] == outs[1]


def test_rerun_from_resolved_config_reproduces_dataset(tmp_path):
    first = tmp_path / "first"
    assert main(_synth_args(first)) == 0
    second = tmp_path / "second"
    assert main(["synth", "--config", str(first / "resolved.cfg"),
                 "--out", str(second)]) == 0
    assert (first / "dataset.ssmg").read_bytes() == (second / "dataset.ssmg").read_bytes()


def test_unknown_flag_exits_with_usage_code(tmp_path, capsys):
    assert main(["synth", "--bogus-flag", "1"]) == 2
    capsys.readouterr()


def test_unknown_config_key_exits_with_usage_code(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("[model]\nnot_a_real_key = 1\n")
    assert main(["train", "--config", str(cfg), "--data", "x.ssmg"]) == 2
    capsys.readouterr()


def test_unknown_config_section_exits_with_usage_code(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("[mystery]\nkey = 1\n")
    assert main(["train", "--config", str(cfg), "--data", "x.ssmg"]) == 2
    capsys.readouterr()


def test_missing_dataset_exits_with_runtime_code(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "nope.ssmg"),
                 "--out", str(tmp_path / "out")]) == 1
    capsys.readouterr()


def test_missing_checkpoint_flag_is_a_usage_error(tmp_path, capsys):
    data_dir = tmp_path / "data"
    assert main(_synth_args(data_dir, scenes=2)) == 0
    assert main(["eval", "--data", str(data_dir / "dataset.ssmg"),
                 "--out", str(tmp_path / "e")]) == 2
    capsys.readouterr()
