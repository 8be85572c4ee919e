"""sEMG preprocessing: band-pass, rectification, envelope low-pass, MVC
normalization, resampling, and windowing into network inputs."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import signal


class FilterDesignError(ValueError):
    pass


class SignalLengthError(ValueError):
    pass


class InvalidReferenceError(ValueError):
    pass


@dataclass
class BiquadCascade:
    """Cascade of second-order sections, rows ``(b0, b1, b2, 1, a1, a2)``.

    ``stream`` keeps per-channel state between calls, so one instance serves
    exactly one stream.
    """

    sections: np.ndarray
    _zi: np.ndarray | None = field(default=None, repr=False)

    @property
    def order(self) -> int:
        return 2 * len(self.sections)

    def is_stable(self) -> bool:
        for sec in self.sections:
            if np.any(np.abs(np.roots(sec[3:])) >= 1.0):
                return False
        return True

    def stream(self, chunk: np.ndarray) -> np.ndarray:
        x = np.asarray(chunk, dtype=np.float64)
        if self._zi is None:
            self._zi = np.zeros((len(self.sections), 2) + x.shape[1:])
        y, self._zi = signal.sosfilt(self.sections, x, axis=0, zi=self._zi)
        return y

    def reset(self):
        self._zi = None


def design_butterworth(kind: str, order: int, fc: float, fs: float) -> BiquadCascade:
    if kind not in ("lowpass", "highpass"):
        raise FilterDesignError(f"unknown filter kind {kind!r}")
    if order not in (2, 4):
        raise FilterDesignError(f"order must be 2 or 4, got {order}")
    if not 0 < fc < fs / 2:
        raise FilterDesignError(f"corner {fc} Hz outside (0, {fs / 2}) for fs={fs}")
    sos = signal.butter(order, fc, btype=kind, fs=fs, output="sos")
    return BiquadCascade(np.asarray(sos, dtype=np.float64))


def filtfilt(cascade: BiquadCascade, x: np.ndarray) -> np.ndarray:
    """Zero-phase forward-backward filtering along axis 0."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] <= 3 * cascade.order:
        raise SignalLengthError(
            f"signal of length {x.shape[0]} too short for order-{cascade.order} filtfilt")
    padlen = min(3 * (2 * len(cascade.sections) + 1), x.shape[0] - 1)
    return signal.sosfiltfilt(cascade.sections, x, axis=0, padlen=padlen)


def full_rectify(x):
    return np.abs(x)


def mvc_normalize(envelope, mvc_value):
    mvc = np.asarray(mvc_value, dtype=np.float64)
    if np.any(mvc <= 0):
        raise InvalidReferenceError(f"MVC reference must be > 0, got {mvc_value}")
    return np.asarray(envelope, dtype=np.float64) / mvc


def resample_linear(x: np.ndarray, fs_in: float, fs_out: float) -> np.ndarray:
    """Linear interpolation onto a uniform ``fs_out`` grid over the same span."""
    if fs_in <= 0 or fs_out <= 0:
        raise ValueError("sampling rates must be positive")
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if n < 2:
        raise SignalLengthError("need at least two samples to resample")
    if fs_in == fs_out:
        return x.copy()
    t_in = np.arange(n) / fs_in
    n_out = int(np.floor((n - 1) * fs_out / fs_in + 1e-9)) + 1
    t_out = np.arange(n_out) / fs_out
    if x.ndim == 1:
        return np.interp(t_out, t_in, x)
    return np.stack([np.interp(t_out, t_in, x[:, j]) for j in range(x.shape[1])], axis=1)


@dataclass(frozen=True)
class ChainConfig:
    bandpass_low: float = 20.0
    bandpass_high: float = 450.0
    envelope_fc: float = 6.0
    order: int = 4


def envelope(raw: np.ndarray, fs: float, cfg: ChainConfig = ChainConfig()) -> np.ndarray:
    """Band-pass, rectify, low-pass. Returns the un-normalized envelope at ``fs``."""
    hp = design_butterworth("highpass", cfg.order, cfg.bandpass_low, fs)
    lp = design_butterworth("lowpass", cfg.order, cfg.bandpass_high, fs)
    env = design_butterworth("lowpass", cfg.order, cfg.envelope_fc, fs)
    x = filtfilt(lp, filtfilt(hp, raw))
    return filtfilt(env, full_rectify(x))


def process_emg(raw: np.ndarray, fs_in: float, fs_out: float, mvc,
                cfg: ChainConfig = ChainConfig(), clip: float = 1.5) -> np.ndarray:
    """Full chain: band-pass -> rectify -> low-pass -> MVC-normalize -> resample."""
    env = mvc_normalize(envelope(raw, fs_in, cfg), mvc)
    return np.clip(resample_linear(env, fs_in, fs_out), 0.0, clip)


@dataclass
class WindowBatch:
    inputs: np.ndarray      # B x (N+1) x W
    targets: np.ndarray     # B x (N+1): forces then angle
    dt: float
    contiguous: bool
    index: np.ndarray | None = None   # sample index of each window's last sample

    def __len__(self):
        return self.inputs.shape[0]

    def take(self, sl) -> "WindowBatch":
        return WindowBatch(self.inputs[sl], self.targets[sl], self.dt, self.contiguous,
                           None if self.index is None else self.index[sl])


def window_inputs(emg: np.ndarray, W: int, stride: int = 1, t_total: int | None = None,
                  start: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Stack sliding windows of ``emg`` (T x N) plus a normalized-time channel.

    Returns ``(inputs, last)`` where ``last`` holds the absolute sample index of
    each window's last sample (``start`` offsets indices into a longer trial).
    """
    if W < 7:
        raise ValueError(f"window length must be >= 7, got {W}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    T, N = emg.shape
    if T < W:
        raise SignalLengthError(f"{T} samples is shorter than window length {W}")
    t_total = T + start if t_total is None else t_total
    count = (T - W) // stride + 1
    first = np.arange(count) * stride
    idx = first[:, None] + np.arange(W)[None, :]
    x = emg[idx]                                   # count x W x N
    last = first + W - 1 + start
    # time channel is constant across a window: t_last / T_total
    tchan = np.broadcast_to((last / max(t_total - 1, 1))[:, None, None], (count, W, 1))
    inputs = np.concatenate([x, tchan], axis=2).transpose(0, 2, 1)
    return np.ascontiguousarray(inputs), last


def make_windows(trial, W: int = 16, stride: int = 1) -> WindowBatch:
    inputs, last = window_inputs(trial.emg, W, stride)
    targets = np.concatenate([trial.forces[last], trial.angle[last, None]], axis=1)
    return WindowBatch(inputs, targets, 1.0 / trial.fs, stride == 1, last)
