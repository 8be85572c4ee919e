"""Raw dataset -> envelopes -> per-subject train/val/test windows."""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import sigproc, synth
from .sigproc import ChainConfig, WindowBatch
from .synth import SubjectParams, Trial


class DataError(ValueError):
    pass


def preprocess_trials(trials: list[Trial], subjects: list[SubjectParams],
                      chain: ChainConfig = ChainConfig(), mvc: dict | None = None):
    """Run the sEMG chain on every raw trial.

    Returns ``(envelope_trials, mvc_by_subject)``. MVC references come from a
    synthetic full-activation calibration recording per subject unless given.
    """
    by_id = {s.id: s for s in subjects}
    mvc = dict(mvc or {})
    out = []
    for tr in trials:
        if tr.is_envelope:
            out.append(tr)
            continue
        subj = by_id[tr.subject_id]
        if subj.id not in mvc:
            mvc[subj.id] = synth.mvc_reference(subj, tr.emg_fs, chain=chain)
        env = sigproc.process_emg(tr.emg, tr.emg_fs, tr.fs, mvc[subj.id], chain)
        if env.shape[0] != len(tr.t):
            env = _fit_length(env, len(tr.t))
        out.append(replace(tr, emg=env, emg_fs=tr.fs))
    return out, {k: np.asarray(v).tolist() for k, v in mvc.items()}


def _fit_length(x, n):
    if x.shape[0] >= n:
        return x[:n]
    return np.concatenate([x, np.repeat(x[-1:], n - x.shape[0], axis=0)])


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.6
    val: float = 0.2
    test: float = 0.2

    def __post_init__(self):
        if min(self.train, self.val, self.test) < 0 or abs(self.train + self.val + self.test - 1) > 1e-9:
            raise DataError(f"split fractions must be non-negative and sum to 1: {self}")

    def bounds(self, T: int) -> dict[str, tuple[int, int]]:
        b1 = int(round(self.train * T))
        b2 = int(round((self.train + self.val) * T))
        return {"train": (0, b1), "val": (b1, b2), "test": (b2, T)}


@dataclass
class Block:
    """Windows drawn from one contiguous sample range of one trial."""

    subject_id: int
    trial: int
    start: int
    stop: int
    batch: WindowBatch

    def n_segments(self, seg_len: int) -> int:
        return max(len(self.batch) - seg_len + 1, 0)

    def segment(self, k: int, seg_len: int) -> WindowBatch:
        return self.batch.take(slice(k, k + seg_len))


def _block(trial: Trial, start: int, stop: int, W: int) -> Block | None:
    if stop - start < W:
        return None
    inputs, last = sigproc.window_inputs(trial.emg[start:stop], W, 1, t_total=len(trial.t),
                                         start=start)
    targets = np.concatenate([trial.forces[last], trial.angle[last, None]], axis=1)
    return Block(trial.subject_id, trial.index, start, stop,
                 WindowBatch(inputs, targets, 1.0 / trial.fs, True, last))


@dataclass
class SubjectData:
    subject: SubjectParams
    train: list[Block] = field(default_factory=list)
    val: list[Block] = field(default_factory=list)
    test: list[Block] = field(default_factory=list)
    split_hash: str = ""

    @property
    def id(self):
        return self.subject.id

    def blocks(self, split: str) -> list[Block]:
        return getattr(self, split)

    def concat(self, split: str) -> WindowBatch:
        blocks = self.blocks(split)
        if not blocks:
            raise DataError(f"subject {self.id} has no {split} windows")
        return WindowBatch(np.concatenate([b.batch.inputs for b in blocks]),
                           np.concatenate([b.batch.targets for b in blocks]),
                           blocks[0].batch.dt, False,
                           np.concatenate([b.batch.index for b in blocks]))

    def with_fraction(self, fraction: float, W: int) -> "SubjectData":
        """Keep the first ceil(fraction * n) samples of every training block."""
        if not 0 < fraction <= 1:
            raise DataError(f"fraction must lie in (0, 1], got {fraction}")
        kept = []
        for b in self.train:
            n = math.ceil(fraction * (b.stop - b.start))
            k = max(n - W + 1, 0)
            if k > 0:
                kept.append(Block(b.subject_id, b.trial, b.start, b.start + n,
                                  b.batch.take(slice(0, k))))
        return replace(self, train=kept)


def split_hash(trials: list[Trial], split: SplitSpec) -> str:
    h = hashlib.sha256()
    for tr in trials:
        h.update(f"{tr.subject_id}:{tr.index}:{len(tr.t)}:{split.bounds(len(tr.t))};".encode())
    return h.hexdigest()[:16]


def build_subject_data(trials: list[Trial], subjects: list[SubjectParams], W: int = 16,
                       split: SplitSpec = SplitSpec()) -> dict[int, SubjectData]:
    if not trials:
        raise DataError("empty dataset")
    out = {s.id: SubjectData(s) for s in subjects}
    for tr in trials:
        if not tr.is_envelope:
            raise DataError(f"trial {tr.subject_id}/{tr.index} has not been preprocessed")
        sd = out[tr.subject_id]
        for name, (a, b) in split.bounds(len(tr.t)).items():
            blk = _block(tr, a, b, W)
            if blk is not None:
                sd.blocks(name).append(blk)
    for sid, sd in out.items():
        sd.split_hash = split_hash([t for t in trials if t.subject_id == sid], split)
    return out
