import json
from dataclasses import asdict

import numpy as np
import pytest

from thermacal import (
    DriftModel,
    GridSpec,
    Hyperparams,
    RigConfig,
)
from thermacal.pipeline import PipelineConfig, cmd_generate, cmd_train


@pytest.fixture
def hyper():
    """Representative fitted hyperparameters used across tests."""
    return Hyperparams(w=np.array([2.0, 0.04, 1.29, 0.002]), sigma_s=0.031, sigma_y=0.044)


def mini_rig(**overrides):
    """Small, fast rig used by pipeline and bench tests (seconds, not minutes)."""
    base = dict(
        temp_min=10.0,
        temp_max=16.0,
        temp_step=1.0,
        positions=(0.45, 0.6, 0.75),
        frames_per_capture=3,
        width=64,
        height=48,
        rng_seed=99,
    )
    base.update(overrides)
    return RigConfig(**base)


def mini_config(root, **overrides):
    defaults = dict(
        dataset_dir=root / "data",
        model_path=root / "model.tgp",
        rig=mini_rig(),
        grid=GridSpec(x=0.12, y=0.12, z=0.1, t=3.0),
        max_iters=15,
        tol=1e-4,
        chunk=4096,
    )
    defaults.update(overrides)
    return PipelineConfig(**defaults)


@pytest.fixture(scope="session")
def mini_pipeline(tmp_path_factory):
    """A generated mini dataset with a trained model, shared across tests."""
    root = tmp_path_factory.mktemp("mini")
    cfg = mini_config(root)
    manifest = cmd_generate(cfg)
    result = cmd_train(cfg)
    return cfg, manifest, result


def desk_rig(seed=20):
    """The desk-scale rig the end-to-end acceptance checks run on."""
    return RigConfig(
        temp_min=10.0,
        temp_max=35.0,
        temp_step=5.0,
        positions=(0.4, 0.5, 0.6, 0.7),
        frames_per_capture=8,
        width=160,
        height=120,
        rng_seed=seed,
    )


def zero_drift():
    return DriftModel(
        base=0.0,
        linear_t=0.0,
        quad_t=0.0,
        x_slope=0.0,
        y_slope=0.0,
        noise_std=0.0,
        speckle_fraction=0.0,
    )


def write_config_json(path, cfg):
    """Serialize a PipelineConfig to the JSON schema the CLI consumes."""
    d = {
        "dataset_dir": str(cfg.dataset_dir),
        "model_path": str(cfg.model_path),
        "target_mode": cfg.target_mode,
        "grid": cfg.grid.to_dict(),
        "train_temp_stride": cfg.train_temp_stride,
        "optimizer": {"max_iters": cfg.max_iters, "tol": cfg.tol},
        "chunk": cfg.chunk,
        "protocol": cfg.protocol,
    }
    if cfg.report_path is not None:
        d["report_path"] = str(cfg.report_path)
    if cfg.rig is not None:
        rig = asdict(cfg.rig)
        rig["positions"] = list(rig["positions"])
        d["rig"] = rig
    if cfg.drift is not None:
        d["drift"] = asdict(cfg.drift)
    if cfg.camera is not None:
        d["camera"] = cfg.camera.to_dict()
    path.write_text(json.dumps(d, indent=2))
    return path
