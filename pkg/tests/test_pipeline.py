import json

import numpy as np
import pytest
from click.testing import CliRunner

from conftest import mini_config, mini_rig, write_config_json, zero_drift
from thermacal.cli import main as cli_main
from thermacal.errors import ContractError
from thermacal.gp import FittedGP, predict
from thermacal.pipeline import (
    PipelineConfig,
    cmd_correct,
    cmd_evaluate,
    cmd_generate,
    cmd_train,
    render_report,
    select_training_temps,
)
from thermacal.simulate import DriftModel, Manifest


# ---------------------------------------------------------------------------
# config


def test_config_validation(tmp_path):
    with pytest.raises(ContractError):
        PipelineConfig(dataset_dir=tmp_path, model_path=tmp_path / "m", target_mode="bogus")
    with pytest.raises(ContractError):
        PipelineConfig(dataset_dir=tmp_path, model_path=tmp_path / "m", protocol="sometimes")
    with pytest.raises(ContractError):
        PipelineConfig(dataset_dir=tmp_path, model_path=tmp_path / "m", chunk=0)


def test_config_json_roundtrip(tmp_path):
    cfg = mini_config(tmp_path, report_path=tmp_path / "r.json")
    path = write_config_json(tmp_path / "cfg.json", cfg)
    back = PipelineConfig.from_json(path)
    assert back.dataset_dir == cfg.dataset_dir
    assert back.model_path == cfg.model_path
    assert back.grid == cfg.grid
    assert back.max_iters == cfg.max_iters
    assert back.tol == cfg.tol
    assert back.rig == cfg.rig
    assert back.target_mode == cfg.target_mode


def test_config_json_errors(tmp_path):
    missing = tmp_path / "nope.json"
    with pytest.raises(ContractError):
        PipelineConfig.from_json(missing)
    bad = tmp_path / "bad.json"
    bad.write_text("{}")
    with pytest.raises(ContractError, match="dataset_dir"):
        PipelineConfig.from_json(bad)
    unknown = tmp_path / "unknown.json"
    unknown.write_text(json.dumps({"dataset_dir": "d", "model_path": "m", "frobnicate": 1}))
    with pytest.raises(ContractError, match="frobnicate"):
        PipelineConfig.from_json(unknown)


def test_select_training_temps():
    coarse = [10.0, 15.0, 20.0, 25.0, 30.0, 35.0]
    assert select_training_temps(coarse, 3.0) == coarse  # already coarser than stride
    fine = [float(t) for t in range(10, 36)]
    assert select_training_temps(fine, 3.0) == [10.0, 13.0, 16.0, 19.0, 22.0, 25.0, 28.0, 31.0, 34.0]
    assert select_training_temps([12.0], 3.0) == [12.0]


# ---------------------------------------------------------------------------
# end-to-end on the mini dataset


def test_mini_train_result(mini_pipeline):
    cfg, manifest, res = mini_pipeline
    assert res.n_train > 50
    assert res.train_temps == [10.0, 13.0, 16.0]
    assert res.nlml_final <= res.nlml_init
    assert cfg.model_path.exists()
    loaded = FittedGP.load(cfg.model_path)
    assert loaded.n == res.n_train


def test_mini_evaluate_holdout_improves(mini_pipeline):
    cfg, manifest, res = mini_pipeline
    report = cmd_evaluate(cfg)
    assert report["protocol"] == "holdout"
    evaluated = {c["temperature"] for c in report["captures"]}
    assert evaluated == {11.0, 12.0, 14.0, 15.0}  # held-out intermediates only
    assert report["after_mm"]["z"] < report["before_mm"]["z"]
    text = render_report(report)
    assert "RMSE before correction" in text
    assert "16.0" in text  # hardware reference footer


def test_mini_evaluate_paper_protocol(mini_pipeline):
    cfg, manifest, res = mini_pipeline
    cfg2 = mini_config(cfg.dataset_dir.parent, protocol="paper")
    report = cmd_evaluate(cfg2)
    assert report["protocol"] == "paper"
    evaluated = {c["temperature"] for c in report["captures"]}
    assert evaluated == {11.0, 12.0, 13.0, 14.0, 15.0, 16.0}  # all but the reference
    assert report["after_mm"]["z"] < report["before_mm"]["z"]


def test_mini_correct_improves_and_is_deterministic(mini_pipeline):
    cfg, manifest, res = mini_pipeline
    corrected_path, confidence_path = cmd_correct(cfg, 0.6, 12.0)
    assert corrected_path.exists() and confidence_path.exists()
    from thermacal.pfm import read_pfm

    entry = manifest.find(0.6, 12.0)
    obs = manifest.load_obs(entry)
    gt = manifest.load_gt(manifest.find(0.6, 10.0))
    corrected = read_pfm(corrected_path)
    m = np.isfinite(obs.data) & np.isfinite(corrected)
    err_before = np.abs(obs.data[m] - gt.data[m])
    err_after = np.abs(corrected[m] - gt.data[m])
    assert np.median(err_after) < np.median(err_before)

    first = corrected_path.read_bytes(), confidence_path.read_bytes()
    cmd_correct(cfg, 0.6, 12.0)
    assert (corrected_path.read_bytes(), confidence_path.read_bytes()) == first


def test_correct_unknown_capture_lists_keys(mini_pipeline):
    cfg, manifest, res = mini_pipeline
    with pytest.raises(ContractError, match="available"):
        cmd_correct(cfg, 0.99, 11.0)


def test_t_min_invariant(mini_pipeline):
    cfg, manifest, res = mini_pipeline
    bad = mini_config(cfg.dataset_dir.parent, t_min=15.0)
    with pytest.raises(ContractError, match="lowest temperature"):
        cmd_train(bad)


def test_zero_drift_zero_noise_pipeline(tmp_path):
    cfg = mini_config(
        tmp_path,
        rig=mini_rig(temp_max=13.0, frames_per_capture=1),
        drift=zero_drift(),
        max_iters=5,
    )
    cmd_generate(cfg)
    res = cmd_train(cfg)
    # nothing to correct: predictions stay below 0.1 mm everywhere
    rng = np.random.default_rng(0)
    queries = np.column_stack(
        [
            rng.uniform(-0.3, 0.3, 200),
            rng.uniform(-0.25, 0.25, 200),
            rng.uniform(0.45, 0.75, 200),
            rng.uniform(10, 13, 200),
        ]
    )
    mean, _ = predict(res.model, queries)
    assert np.max(np.abs(mean)) < 1e-4
    report = cmd_evaluate(cfg)
    assert report["before_mm"] == {"x": 0.0, "y": 0.0, "z": 0.0}
    assert report["after_mm"]["z"] < 1e-7


def test_rgb_delta_target_mode(tmp_path):
    drift = DriftModel(rgb_linear_t=1e-4)
    cfg = mini_config(tmp_path, drift=drift, target_mode="rgb_delta", max_iters=10)
    cmd_generate(cfg)
    res = cmd_train(cfg)
    # reference-map drift is linear in temperature: at t=16, z=0.6 the
    # learned offset is -rgb_linear_t * dT * z^2
    q = np.array([[0.0, 0.0, 0.6, 16.0]])
    mean, _ = predict(res.model, q)
    expected = -drift.rgb_offset(0.6, 16.0)
    assert mean[0] == pytest.approx(expected, abs=2e-5)


def test_train_needs_enough_captures(tmp_path):
    cfg = mini_config(tmp_path, rig=mini_rig(positions=(0.6,)))
    cmd_generate(cfg)
    with pytest.raises(ContractError, match="two temperatures and two positions"):
        cmd_train(cfg)


def test_full_scale_grid_yields_about_5000_samples():
    # Full capture protocol (VGA frames, 26 temperatures, 6 positions,
    # training every 3 degrees) decimated with the default grid. Uses one
    # pre-averaged frame per capture with the noise level divided by
    # sqrt(50), which is the fast path equivalent to averaging 50 frames.
    from thermacal.geometry import GridSpec, build_features, build_targets, grid_sample
    from thermacal.simulate import default_camera, synth_ground_truth, synth_observed_frame

    cam = default_camera(640, 480)
    drift = DriftModel(noise_std=1.5e-3 / np.sqrt(50))
    temps = [float(t) for t in range(10, 36)]
    train_temps = select_training_temps(temps, 3.0)
    feats, targs = [], []
    for temp in train_temps:
        for pos in (0.4, 0.5, 0.6, 0.7, 0.8, 0.9):
            obs = synth_observed_frame(pos, temp, drift, cam, (480, 640), 0, 7)
            gt = synth_ground_truth(pos, (480, 640))
            target_map = build_targets(gt, obs)
            f, pix = build_features(obs, temp, cam)
            tv = target_map.data[pix[:, 1], pix[:, 0]]
            keep = np.isfinite(tv)
            feats.append(f[keep])
            targs.append(tv[keep])
    train = grid_sample(np.vstack(feats), np.concatenate(targs), GridSpec())
    assert 4000 <= train.n <= 6000


# ---------------------------------------------------------------------------
# CLI


@pytest.fixture(scope="session")
def cli_setup(mini_pipeline, tmp_path_factory):
    cfg, manifest, res = mini_pipeline
    root = tmp_path_factory.mktemp("cli")
    cfg_path = write_config_json(root / "config.json", cfg)
    return cfg, cfg_path


def test_cli_evaluate_and_correct(cli_setup):
    cfg, cfg_path = cli_setup
    runner = CliRunner()
    result = runner.invoke(cli_main, ["evaluate", "--config", str(cfg_path)])
    assert result.exit_code == 0, result.output
    assert "RMSE before correction" in result.output
    result = runner.invoke(
        cli_main,
        ["correct", "--config", str(cfg_path), "--position", "0.6", "--temp", "12"],
    )
    assert result.exit_code == 0, result.output
    assert "corrected map" in result.output


def test_cli_evaluate_report_file(cli_setup, tmp_path):
    cfg, cfg_path = cli_setup
    out = tmp_path / "report.json"
    runner = CliRunner()
    result = runner.invoke(
        cli_main,
        ["evaluate", "--config", str(cfg_path), "--paper-protocol", "--report", str(out)],
    )
    assert result.exit_code == 0, result.output
    data = json.loads(out.read_text())
    assert data["protocol"] == "paper"
    assert data["reference_hardware_mm"]["before"]["z"] == 16.0


def test_cli_generate_and_train(tmp_path):
    cfg = mini_config(tmp_path, rig=mini_rig(temp_max=13.0, width=32, height=24), max_iters=5)
    cfg_path = write_config_json(tmp_path / "cfg.json", cfg)
    runner = CliRunner()
    result = runner.invoke(cli_main, ["generate", "--config", str(cfg_path)])
    assert result.exit_code == 0, result.output
    assert "capture pairs" in result.output
    result = runner.invoke(cli_main, ["train", "--config", str(cfg_path)])
    assert result.exit_code == 0, result.output
    assert "training samples:" in result.output
    assert "nlml:" in result.output
    assert "fitted:" in result.output


def test_cli_exit_code_contract_errors(tmp_path, cli_setup):
    cfg, cfg_path = cli_setup
    runner = CliRunner()
    # malformed config -> 2
    bad = tmp_path / "bad.json"
    bad.write_text("{}")
    result = runner.invoke(cli_main, ["train", "--config", str(bad)])
    assert result.exit_code == 2
    # unknown capture -> 2
    result = runner.invoke(
        cli_main,
        ["correct", "--config", str(cfg_path), "--position", "0.99", "--temp", "11"],
    )
    assert result.exit_code == 2
    # missing model file -> 2
    cfg2 = mini_config(cfg.dataset_dir.parent, model_path=tmp_path / "absent.tgp")
    cfg2_path = write_config_json(tmp_path / "cfg2.json", cfg2)
    result = runner.invoke(cli_main, ["evaluate", "--config", str(cfg2_path)])
    assert result.exit_code == 2


def test_cli_generate_seed_override(tmp_path):
    cfg = mini_config(tmp_path, rig=mini_rig(temp_max=11.0, width=16, height=12, frames_per_capture=1))
    cfg_path = write_config_json(tmp_path / "cfg.json", cfg)
    runner = CliRunner()
    result = runner.invoke(cli_main, ["generate", "--config", str(cfg_path), "--seed", "555"])
    assert result.exit_code == 0, result.output
    assert "seed 555" in result.output
    manifest = Manifest.load(cfg.dataset_dir)
    assert manifest.seed == 555


def test_evaluate_parallel_matches_serial(mini_pipeline, monkeypatch):
    cfg, manifest, res = mini_pipeline
    serial = cmd_evaluate(cfg)
    monkeypatch.setenv("THERMACAL_THREADS", "4")
    parallel = cmd_evaluate(cfg)
    assert parallel["before_mm"] == serial["before_mm"]
    assert parallel["after_mm"] == serial["after_mm"]


def test_cli_bench_kernel_small(tmp_path):
    runner = CliRunner()
    out = tmp_path / "bench.json"
    result = runner.invoke(
        cli_main,
        ["bench", "--mode", "kernel", "--n", "40", "--m", "60", "--trials", "1", "--json", str(out)],
    )
    assert result.exit_code == 0, result.output
    rows = json.loads(out.read_text())
    assert len(rows) == 2
    assert {r["variant"] for r in rows} == {
        "cross-kernel naive (double loop)",
        "cross-kernel fast (expanded norm)",
    }
    assert "speedup" in result.output
