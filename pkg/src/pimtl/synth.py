"""Synthetic subjects and trials.

Every trial is integrated with the same equation of motion that the physics
loss penalizes, so ground-truth kinematics satisfy it up to discretization.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import dynamics as dyn
from .dynamics import MUSCLES, MomentArms, WristDynamicsParams
from . import sigproc

log = logging.getLogger(__name__)

DATASET_VERSION = 1
FLEXORS = (0, 1)
EXTENSORS = (2, 3, 4)
_CALIBRATION_STREAM = 1_000_003


class ConfigError(ValueError):
    pass


class InvalidStepError(ValueError):
    pass


class SimulationUnstableError(RuntimeError):
    pass


class DatasetParseError(ValueError):
    def __init__(self, msg, path=None, offset=None):
        super().__init__(f"{msg} (file={path}, byte offset={offset})")
        self.path = path
        self.offset = offset


class DatasetVersionError(ValueError):
    pass


@dataclass(frozen=True)
class SubjectParams:
    id: int
    fmax: tuple
    tau_act: float
    tau_deact: float
    emg_gain: tuple
    emg_noise_sd: float
    arms: MomentArms
    dyn: WristDynamicsParams
    rng_seed: int
    phase_offsets: tuple = (0.0, 0.0, 0.0, 0.0, 0.0)

    def __post_init__(self):
        if any(f <= 0 for f in self.fmax):
            raise ConfigError("fmax must be positive")
        if not 0 < self.tau_act <= self.tau_deact:
            raise ConfigError("need 0 < tau_act <= tau_deact")
        if any(g <= 0 for g in self.emg_gain):
            raise ConfigError("emg_gain must be positive")
        if self.emg_noise_sd < 0:
            raise ConfigError("emg_noise_sd must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["arms"] = list(self.arms.r)
        for k in ("fmax", "emg_gain", "phase_offsets"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SubjectParams":
        d = dict(d)
        d["arms"] = MomentArms(tuple(d["arms"]))
        d["dyn"] = WristDynamicsParams(**d["dyn"])
        for k in ("fmax", "emg_gain", "phase_offsets"):
            d[k] = tuple(d[k])
        return cls(**d)


@dataclass(frozen=True)
class PopulationConfig:
    """Nominal subject plus per-parameter multiplier bounds."""

    fmax_nominal: tuple = (12.0, 10.0, 10.0, 9.0, 8.0)
    fmax_mult: tuple = (0.7, 1.3)
    tau_act: tuple = (0.010, 0.020)
    tau_deact: tuple = (0.040, 0.060)
    emg_gain: tuple = (0.5, 2.0)
    emg_noise_sd: float = 0.02
    arm_mult: tuple = (0.9, 1.1)
    inertia_mult: tuple = (0.8, 1.2)
    damping_mult: tuple = (0.8, 1.2)
    mass_mult: tuple = (0.8, 1.2)
    com_mult: tuple = (0.9, 1.1)
    phase_jitter_sd: float = 0.15
    dynamics: WristDynamicsParams = field(default_factory=WristDynamicsParams)
    arms: MomentArms = field(default_factory=MomentArms)

    def bounds(self):
        return {k: getattr(self, k) for k in (
            "fmax_mult", "tau_act", "tau_deact", "emg_gain", "arm_mult",
            "inertia_mult", "damping_mult", "mass_mult", "com_mult")}


def subject_seed(master_seed: int, index: int, attempt: int = 0) -> int:
    ss = np.random.SeedSequence([int(master_seed), int(index), int(attempt)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def sample_subject(cfg: PopulationConfig, index: int, master_seed: int,
                   attempt: int = 0) -> SubjectParams:
    """Draw subject ``index`` (0-based); the returned id is ``index + 1``."""
    if index < 0:
        raise ConfigError(f"subject index must be >= 0, got {index}")
    for name, (lo, hi) in cfg.bounds().items():
        if not (np.isfinite(lo) and np.isfinite(hi)) or lo > hi or lo <= 0:
            raise ConfigError(f"invalid bounds for {name}: [{lo}, {hi}]")
    if len(cfg.fmax_nominal) != len(cfg.arms):
        raise ConfigError("fmax_nominal and moment arms disagree on muscle count")
    seed = subject_seed(master_seed, index, attempt)
    rng = np.random.default_rng(seed)
    n = len(cfg.fmax_nominal)

    def u(bounds, size=None):
        return rng.uniform(bounds[0], bounds[1], size)

    fmax = tuple(float(f * m) for f, m in zip(cfg.fmax_nominal, u(cfg.fmax_mult, n)))
    tau_act = float(u(cfg.tau_act))
    tau_deact = float(max(u(cfg.tau_deact), tau_act))
    gain = tuple(float(g) for g in u(cfg.emg_gain, n))
    arms = MomentArms(tuple(float(r * m) for r, m in zip(cfg.arms.r, u(cfg.arm_mult, n))))
    d = cfg.dynamics
    dyn_p = WristDynamicsParams(
        inertia=d.inertia * float(u(cfg.inertia_mult)),
        damping=d.damping * float(u(cfg.damping_mult)),
        mass=d.mass * float(u(cfg.mass_mult)),
        com_length=d.com_length * float(u(cfg.com_mult)),
        gravity=d.gravity,
    )
    phases = tuple(float(p) for p in rng.normal(0.0, cfg.phase_jitter_sd, n))
    return SubjectParams(index + 1, fmax, tau_act, tau_deact, gain, cfg.emg_noise_sd,
                         arms, dyn_p, seed, phases)


@dataclass(frozen=True)
class ExcitationProfile:
    base_freq: float = 1.0
    amplitude: float = 0.6
    phase_jitter_sd: float = 0.3
    duration: float = 2.0
    phase: float = 0.0     # trial-level offset, drawn with sd phase_jitter_sd

    def __post_init__(self):
        if self.base_freq <= 0 or self.duration <= 0:
            raise ConfigError("base_freq and duration must be positive")
        if not 0 <= self.amplitude <= 1:
            raise ConfigError("amplitude must lie in [0, 1]")


def excitation_trajectory(profile: ExcitationProfile, subject: SubjectParams, t):
    """Reciprocal half-wave drive: flexors on the positive lobe, extensors on
    the negative one. Vectorized over ``t``; returns (..., N)."""
    t = np.asarray(t, dtype=np.float64)
    n = len(subject.fmax)
    phi = profile.phase + np.asarray(subject.phase_offsets[:n])
    s = np.sin(2 * np.pi * profile.base_freq * t[..., None] + phi)
    sign = np.ones(n)
    sign[list(EXTENSORS)] = -1.0
    return np.clip(profile.amplitude * np.maximum(0.0, sign * s), 0.0, 1.0)


def activation_step(u, a, dt: float, subject: SubjectParams):
    if dt <= 0:
        raise InvalidStepError(f"dt must be > 0, got {dt}")
    u = np.asarray(u, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    tau = np.where(u >= a, subject.tau_act, subject.tau_deact)
    return np.clip(a + dt * (u - a) / tau, 0.0, 1.0)


@dataclass
class Trial:
    fs: float
    t: np.ndarray
    emg: np.ndarray         # raw (emg_fs) or normalized envelope (fs)
    forces: np.ndarray      # T x N, newtons
    angle: np.ndarray       # T, rad
    emg_fs: float | None = None
    activation: np.ndarray | None = None
    subject_id: int = 0
    index: int = 0

    def __post_init__(self):
        if self.emg_fs is None:
            self.emg_fs = self.fs

    def __len__(self):
        return len(self.t)

    @property
    def is_envelope(self) -> bool:
        return self.emg_fs == self.fs and self.emg.shape[0] == len(self.t)


def simulate_kinematics(subject: SubjectParams, profile: ExcitationProfile, fs: float,
                        theta0: float = 0.0, limit: float = math.pi / 2):
    """Integrate activation dynamics and the joint (semi-implicit Euler).

    Returns ``(t, activation, forces, angle)`` at ``fs``.
    """
    if fs < 100:
        raise ConfigError(f"fs must be >= 100 Hz, got {fs}")
    T = int(round(profile.duration * fs))
    dt = 1.0 / fs
    t = np.arange(T) * dt
    u = excitation_trajectory(profile, subject, t)
    fmax = np.asarray(subject.fmax)
    arms = subject.arms.as_array()
    p = subject.dyn
    act = np.zeros((T, len(fmax)))
    theta = np.zeros(T)
    a = np.zeros(len(fmax))
    th, v = theta0, 0.0
    for k in range(T):
        act[k] = a
        theta[k] = th
        tau = float(a @ (arms * fmax))
        acc = dyn.forward_accel(p, th, v, tau)
        v = v + dt * acc
        th = th + dt * v
        if abs(theta[k]) > limit or not np.isfinite(th):
            raise SimulationUnstableError(
                f"|theta| exceeded {limit:.3f} rad at t={t[k]:.3f}s for subject {subject.id} "
                f"(fmax={subject.fmax}, arms={subject.arms.r}, dyn={subject.dyn})")
        a = activation_step(u[k], a, dt, subject)
    return t, act, act * fmax, theta


def synthesize_raw_emg(activations: np.ndarray, subject: SubjectParams, fs_emg: float = 2000.0,
                       fs_act: float = 1000.0, stream: int = 0) -> np.ndarray:
    """Band-limited (20-450 Hz) Gaussian carrier, amplitude-modulated by
    activation * gain, plus white measurement noise."""
    if fs_emg < 1000:
        raise ConfigError(f"fs_emg must be >= 1000 Hz, got {fs_emg}")
    a = sigproc.resample_linear(np.asarray(activations, dtype=np.float64), fs_act, fs_emg)
    rng = np.random.default_rng([subject.rng_seed, int(stream)])
    carrier = rng.standard_normal(a.shape)
    carrier = sigproc.filtfilt(sigproc.design_butterworth("highpass", 4, 20.0, fs_emg), carrier)
    carrier = sigproc.filtfilt(sigproc.design_butterworth("lowpass", 4, 450.0, fs_emg), carrier)
    carrier /= carrier.std(axis=0)
    noise = rng.standard_normal(a.shape) * subject.emg_noise_sd
    return a * np.asarray(subject.emg_gain) * carrier + noise


def simulate_trial(subject: SubjectParams, profile: ExcitationProfile, fs: float = 1000.0,
                   fs_emg: float = 2000.0, index: int = 0) -> Trial:
    t, act, forces, angle = simulate_kinematics(subject, profile, fs)
    raw = synthesize_raw_emg(act, subject, fs_emg, fs, stream=index)
    return Trial(fs, t, raw, forces, angle, fs_emg, act, subject.id, index)


def mvc_reference(subject: SubjectParams, fs_emg: float = 2000.0, duration: float = 2.0,
                  chain: sigproc.ChainConfig = sigproc.ChainConfig()) -> np.ndarray:
    """Per-channel MVC: mean envelope of a constant full-activation calibration
    recording (central half, away from filter edges)."""
    T = int(round(duration * 1000.0))
    raw = synthesize_raw_emg(np.ones((T, len(subject.fmax))), subject, fs_emg, 1000.0,
                             stream=_CALIBRATION_STREAM)
    env = sigproc.envelope(raw, fs_emg, chain)
    n = env.shape[0]
    return env[n // 4: 3 * n // 4].mean(axis=0)


def trial_profile(base: ExcitationProfile, subject: SubjectParams, index: int) -> ExcitationProfile:
    """Per-trial start phase: uniform over the cycle plus a small jitter, so a
    temporal split does not always land on the same half-cycle."""
    rng = np.random.default_rng([subject.rng_seed, 7919, int(index)])
    start = rng.uniform(0.0, 2 * np.pi)
    return replace(base, phase=float(base.phase + start + rng.normal(0.0, base.phase_jitter_sd)))


def generate_dataset(pop: PopulationConfig, profile: ExcitationProfile, n_subjects: int,
                     n_trials: int, master_seed: int, fs: float = 1000.0,
                     fs_emg: float = 2000.0, max_attempts: int = 20):
    """Subjects and raw trials; unstable parameter draws are resampled."""
    subjects, trials = [], []
    for i in range(n_subjects):
        for attempt in range(max_attempts):
            subj = sample_subject(pop, i, master_seed, attempt)
            try:
                sub_trials = [simulate_trial(subj, trial_profile(profile, subj, k), fs, fs_emg, k)
                              for k in range(n_trials)]
                break
            except SimulationUnstableError as exc:
                log.info("resampling subject %d: %s", i, exc)
        else:
            raise SimulationUnstableError(f"subject {i}: no stable draw in {max_attempts} attempts")
        subjects.append(subj)
        trials.extend(sub_trials)
    return trials, subjects


# ---------------------------------------------------------------------------
# dataset directory I/O

_ARRAYS = ("t", "emg", "forces", "angle", "activation")


def _trial_stem(tr: Trial) -> str:
    return f"s{tr.subject_id:03d}_t{tr.index:03d}"


def _write_f64(path: Path, arr: np.ndarray):
    path.write_bytes(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_f64(path: Path, shape) -> np.ndarray:
    data = path.read_bytes()
    expected = 8 * int(np.prod(shape))
    if len(data) != expected:
        raise DatasetParseError(f"expected {expected} bytes, found {len(data)}", path,
                                min(len(data), expected))
    return np.frombuffer(data, dtype="<f8").reshape(shape).copy()


def _write_csv(path: Path, arr: np.ndarray):
    a = arr.reshape(arr.shape[0], -1)
    lines = [",".join(repr(float(v)) for v in row) for row in a]
    path.write_text("\n".join(lines) + "\n")


def _read_csv(path: Path, shape) -> np.ndarray:
    text = path.read_text()
    rows, offset = [], 0
    for line in text.splitlines(keepends=True):
        if line.strip():
            try:
                rows.append([float(v) for v in line.split(",")])
            except ValueError:
                raise DatasetParseError("non-numeric CSV field", path, offset) from None
        offset += len(line.encode())
    arr = np.asarray(rows, dtype=np.float64)
    if arr.size != int(np.prod(shape)):
        raise DatasetParseError(f"expected {int(np.prod(shape))} values, found {arr.size}",
                                path, len(text.encode()))
    return arr.reshape(shape)


def write_dataset(trials, subjects, path, fmt: str = "binary", extra: dict | None = None):
    if fmt not in ("binary", "csv"):
        raise ConfigError(f"unknown dataset format {fmt!r}")
    path = Path(path)
    (path / "trials").mkdir(parents=True, exist_ok=True)
    ext = ".f64" if fmt == "binary" else ".csv"
    writer = _write_f64 if fmt == "binary" else _write_csv
    entries = []
    for tr in trials:
        stem = _trial_stem(tr)
        arrays = {}
        for name in _ARRAYS:
            arr = getattr(tr, name)
            if arr is None:
                continue
            arr = np.asarray(arr, dtype=np.float64)
            fname = f"trials/{stem}_{name}{ext}"
            writer(path / fname, arr)
            arrays[name] = {"file": fname, "shape": list(arr.shape)}
        entries.append({"subject_id": tr.subject_id, "index": tr.index, "fs": tr.fs,
                        "emg_fs": tr.emg_fs, "arrays": arrays})
    manifest = {
        "version": DATASET_VERSION,
        "format": fmt,
        "muscles": list(MUSCLES),
        "fs": trials[0].fs if trials else None,
        "subject_ids": [s.id for s in subjects],
        "subjects": [s.to_dict() for s in subjects],
        "trials": entries,
    }
    if extra:
        manifest.update(extra)
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1))


def read_manifest(path) -> dict:
    mpath = Path(path) / "manifest.json"
    raw = mpath.read_bytes()
    try:
        manifest = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise DatasetParseError(f"malformed manifest: {exc.msg}", mpath,
                                len(exc.doc[:exc.pos].encode())) from None
    if not isinstance(manifest, dict) or "version" not in manifest:
        raise DatasetParseError("manifest lacks a version field", mpath, 0)
    if manifest["version"] != DATASET_VERSION:
        raise DatasetVersionError(
            f"dataset version {manifest['version']} unsupported (expected {DATASET_VERSION})")
    return manifest


def read_dataset(path):
    path = Path(path)
    manifest = read_manifest(path)
    reader = _read_f64 if manifest["format"] == "binary" else _read_csv
    try:
        subjects = [SubjectParams.from_dict(d) for d in manifest["subjects"]]
        trials = []
        for e in manifest["trials"]:
            arrs = {name: reader(path / spec["file"], tuple(spec["shape"]))
                    for name, spec in e["arrays"].items()}
            trials.append(Trial(e["fs"], arrs["t"], arrs["emg"], arrs["forces"], arrs["angle"],
                                e["emg_fs"], arrs.get("activation"), e["subject_id"], e["index"]))
    except (KeyError, TypeError) as exc:
        raise DatasetParseError(f"manifest missing field {exc}", path / "manifest.json", 0) from None
    return trials, subjects
