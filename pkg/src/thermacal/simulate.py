"""Deterministic synthetic capture rig.

Synthesizes what a thermally drifting depth sensor would record while looking
at a fronto-parallel plane from a set of known distances, over a sweep of
temperatures. Ground truth is the exact plane (standing in for the
color-derived reference maps, whose own drift is far smaller and off by
default). Everything is a pure function of (config, drift, camera, seed), so
datasets regenerate bit-for-bit.
"""

from __future__ import annotations

import json
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, DomainError
from .geometry import CameraModel, DepthMap
from .pfm import read_pfm, write_pfm

REFERENCE_FX = 570.0  # typical VGA structured-light focal length, pixels


def default_camera(width=640, height=480):
    """Pinhole intrinsics scaled from the VGA reference focal length."""
    s = width / 640.0
    return CameraModel(
        fx=REFERENCE_FX * s,
        fy=REFERENCE_FX * s,
        cx=(width - 1) / 2.0,
        cy=(height - 1) / 2.0,
    )


def thread_count():
    """Worker budget for capture-level parallelism (THERMACAL_THREADS, default 1)."""
    try:
        return max(1, int(os.environ.get("THERMACAL_THREADS", "1")))
    except ValueError:
        return 1


@dataclass(frozen=True)
class RigConfig:
    """Capture protocol: temperature sweep, target distances, frame counts."""

    temp_min: float = 10.0
    temp_max: float = 35.0
    temp_step: float = 1.0
    positions: tuple = (0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
    frames_per_capture: int = 50
    width: int = 640
    height: int = 480
    rng_seed: int = 7

    def __post_init__(self):
        if not self.temp_min < self.temp_max:
            raise ContractError(
                f"temp_min ({self.temp_min}) must be below temp_max ({self.temp_max})"
            )
        if self.temp_step <= 0:
            raise ContractError(f"temp_step must be positive, got {self.temp_step}")
        pos = tuple(float(p) for p in self.positions)
        if not pos:
            raise ContractError("at least one target position is required")
        if any(p < 0.4 or p > 1.0 for p in pos):
            raise ContractError(
                f"positions must lie within the sensor's operating range [0.4, 1.0] m, got {pos}"
            )
        if self.frames_per_capture < 1:
            raise ContractError("frames_per_capture must be >= 1")
        if self.width < 1 or self.height < 1:
            raise ContractError("image size must be positive")
        object.__setattr__(self, "positions", pos)

    def temperatures(self):
        out = []
        t = float(self.temp_min)
        while t <= self.temp_max + 1e-9:
            out.append(round(t, 6))
            t += self.temp_step
        return out

    def capture_plan(self):
        """(position, temperature) pairs in generation order."""
        return [(p, t) for t in self.temperatures() for p in self.positions]

    @property
    def shape(self):
        return (self.height, self.width)


@dataclass(frozen=True)
class DriftModel:
    """Ground-truth sensor error: smooth in space and temperature.

    The offset added to true depth is

        (base + linear_t * dT + quad_t * dT^2) * z^2 + x_slope * x * z + y_slope * y * z

    with dT the temperature above `t_ref`. Quadratic growth in both dT and z
    makes the error curve upward with temperature and escalate with distance,
    while the x/y terms skew opposite image corners. `rgb_linear_t` optionally
    drifts the color-derived reference maps too (much weaker, default off).
    """

    base: float = 0.0
    linear_t: float = 4e-4
    quad_t: float = 6e-5
    x_slope: float = 2e-3
    y_slope: float = 1.5e-3
    t_ref: float = 10.0
    noise_std: float = 1.5e-3
    speckle_fraction: float = 0.005
    rgb_linear_t: float = 0.0

    def offset(self, x, y, z, temp):
        dt = temp - self.t_ref
        return (self.base + self.linear_t * dt + self.quad_t * dt * dt) * z * z + (
            self.x_slope * x + self.y_slope * y
        ) * z

    def rgb_offset(self, z, temp):
        return self.rgb_linear_t * (temp - self.t_ref) * z * z


def synth_ground_truth(position, shape):
    """Exact fronto-parallel plane: every pixel's depth equals `position`."""
    if not (np.isfinite(position) and position > 0):
        raise DomainError(f"position must be finite and positive, got {position}")
    h, w = shape
    return DepthMap(np.full((h, w), float(position)))


def _mm(position):
    return int(round(position * 1000))


def _decideg(temp):
    return int(round(temp * 10))


def _frame_rng(seed, position, temp, frame_index):
    # Streams are keyed per frame; captures can be synthesized in parallel
    # without changing a single output byte.
    key = (
        int(seed) & 0xFFFFFFFFFFFFFFFF,
        _mm(position),
        _decideg(temp) + 32768,
        int(frame_index),
    )
    return np.random.default_rng(np.random.SeedSequence(key))


def synth_observed_frame(position, temp, drift, cam, shape, frame_index, seed):
    """One raw sensor frame: plane depth plus drift, noise, and speckle dropouts.

    Bit-for-bit reproducible given identical arguments.
    """
    if not (np.isfinite(position) and position > 0):
        raise DomainError(f"position must be finite and positive, got {position}")
    h, w = shape
    ii = np.arange(w, dtype=np.float64)[None, :]
    jj = np.arange(h, dtype=np.float64)[:, None]
    x = (ii - cam.cx) / cam.fx * position
    y = (jj - cam.cy) / cam.fy * position
    d = position + drift.offset(x, y, position, temp)
    d = np.broadcast_to(d, (h, w)).copy()
    rng = _frame_rng(seed, position, temp, frame_index)
    d += rng.normal(0.0, drift.noise_std, (h, w))
    drop = rng.random((h, w)) < drift.speckle_fraction
    d[drop] = np.nan
    return DepthMap(d)


def mean_depth_map(frames):
    """Per-pixel mean over frames, ignoring missing pixels.

    A pixel is missing in the output only if it is missing in every frame.
    """
    if not frames:
        raise ContractError("mean_depth_map needs at least one frame")
    shape = frames[0].data.shape
    for f in frames:
        if f.data.shape != shape:
            raise ContractError("frames have mismatched shapes")
    stack = np.stack([f.data for f in frames])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", category=RuntimeWarning)
        return DepthMap(np.nanmean(stack, axis=0))


class Manifest:
    """Index of a generated dataset: capture entries plus configuration echo."""

    FILENAME = "manifest.json"
    VERSION = 1

    def __init__(self, root, data):
        self.root = Path(root)
        self.data = data

    @property
    def entries(self):
        return self.data["entries"]

    @property
    def seed(self):
        return self.data["seed"]

    def temperatures(self):
        return sorted({e["temperature"] for e in self.entries})

    def positions(self):
        return sorted({e["position"] for e in self.entries})

    def camera(self):
        return CameraModel.from_dict(self.data["camera"])

    def keys(self):
        return [(e["position"], e["temperature"]) for e in self.entries]

    def find(self, position, temperature):
        for e in self.entries:
            if abs(e["position"] - position) < 1e-9 and abs(e["temperature"] - temperature) < 1e-9:
                return e
        raise ContractError(
            f"no capture at position={position} temperature={temperature}; "
            f"available: {self.keys()}"
        )

    def load_obs(self, entry):
        return DepthMap(read_pfm(self.root / entry["obs"]))

    def load_gt(self, entry):
        return DepthMap(read_pfm(self.root / entry["gt"]))

    def save(self):
        path = self.root / self.FILENAME
        path.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, root):
        root = Path(root)
        path = root / cls.FILENAME if root.is_dir() else root
        if not path.exists():
            raise ContractError(f"no manifest at {path}")
        data = json.loads(path.read_text())
        if data.get("version") != cls.VERSION:
            raise ContractError(
                f"{path}: unsupported manifest version {data.get('version')}"
            )
        return cls(path.parent, data)


def _synth_capture(position, temp, config, drift, cam):
    frames = [
        synth_observed_frame(
            position, temp, drift, cam, config.shape, f, config.rng_seed
        )
        for f in range(config.frames_per_capture)
    ]
    obs = mean_depth_map(frames)
    gt = synth_ground_truth(position, config.shape)
    if drift.rgb_linear_t != 0.0:
        gt = DepthMap(gt.data + drift.rgb_offset(position, temp))
    return obs, gt


def generate_dataset(config, drift, cam, out_dir):
    """Synthesize and write the whole capture protocol.

    Writes one mean observed map and one ground-truth map per (position,
    temperature) pair as PFM files named p<mm>_t<decideg>_{obs,gt}.pfm, plus
    manifest.json. Deterministic given the config seed; capture synthesis may
    run on THERMACAL_THREADS workers without changing any byte.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    plan = config.capture_plan()
    workers = min(thread_count(), len(plan))

    def run(pair):
        return _synth_capture(pair[0], pair[1], config, drift, cam)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, plan))
    else:
        results = [run(p) for p in plan]

    entries = []
    for (position, temp), (obs, gt) in zip(plan, results):
        stem = f"p{_mm(position)}_t{_decideg(temp)}"
        obs_name, gt_name = f"{stem}_obs.pfm", f"{stem}_gt.pfm"
        try:
            write_pfm(out / obs_name, obs.data)
            write_pfm(out / gt_name, gt.data)
        except OSError as e:
            raise ContractError(f"failed writing {out / obs_name}: {e}") from None
        entries.append(
            {
                "position": position,
                "temperature": temp,
                "obs": obs_name,
                "gt": gt_name,
                "seed": config.rng_seed,
            }
        )

    manifest = Manifest(
        out,
        {
            "version": Manifest.VERSION,
            "seed": config.rng_seed,
            "config": asdict(config),
            "drift": asdict(drift),
            "camera": cam.to_dict(),
            "entries": entries,
        },
    )
    manifest.save()
    return manifest
