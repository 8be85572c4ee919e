"""Generic training, freeze-and-fine-tune personalization, and the six-method
experiment protocol."""
from __future__ import annotations

import copy
import logging
import time
import warnings
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import model as M
from . import nnet
from .data import DataError, SubjectData
from .eval import EvaluationRecord, evaluate

log = logging.getLogger(__name__)

METHODS = ("CNN-1", "CNN-2", "CNN-KT", "Pi-CNN-1", "Pi-CNN-2", "Pi-CNN-KT")
SCENARIOS = ("single", "multiple")


class ConfigError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    def __init__(self, iteration, loss):
        super().__init__(f"training diverged at iteration {iteration} (loss={loss})")
        self.iteration = iteration


class CompatibilityError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    max_iter: int = 2000
    lr: float = 0.001
    momentum: float = 0.9
    segment_len: int = 5
    patience: int = 200
    min_delta: float = 1e-5
    eval_every: int = 50
    val_segments: int = 32
    iteration_unit: str = "steps"     # "steps" or "epochs"
    restore_best: bool = True
    clip_norm: float | None = 5.0     # global gradient-norm clip; None disables
    physics_weight: float = 1.0       # lambda for Pi-* methods
    physics_dyn_scale: float = 1.0    # multiplier on I, b, m inside the physics loss

    def __post_init__(self):
        if not self.physics_weight > 0:
            raise ConfigError("physics_weight must be positive; use a CNN-* method for lambda=0")
        if not self.physics_dyn_scale > 0:
            raise ConfigError("physics_dyn_scale must be positive")
        if self.iteration_unit not in ("steps", "epochs"):
            raise ConfigError(f"iteration_unit must be 'steps' or 'epochs', not {self.iteration_unit!r}")
        if self.segment_len < 3:
            raise ConfigError("segment_len must be >= 3")


@dataclass(frozen=True)
class MethodConfig:
    method: str
    seed: int = 0
    lam: float | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    dropout: float = 0.5

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        implied = 1.0 if self.physics else 0.0
        if self.lam is not None and (self.lam == 0) != (implied == 0):
            raise ConfigError(f"lambda={self.lam} conflicts with method {self.method} "
                              f"(lambda is implied by the method)")

    @property
    def physics(self) -> bool:
        return self.method.startswith("Pi-")

    @property
    def transfer(self) -> bool:
        return self.method.endswith("-KT")

    @property
    def domain(self) -> str:
        """'generic' trains on D_G only, 'personal' on the new subject only,
        'transfer' on D_G then the new subject."""
        if self.transfer:
            return "transfer"
        return "generic" if self.method.endswith("-1") else "personal"

    @property
    def weight(self) -> float:
        if self.lam is not None:
            return float(self.lam)
        return self.train.physics_weight if self.physics else 0.0


@dataclass
class TrainReport:
    curves: dict = field(default_factory=dict)
    val_curve: list = field(default_factory=list)
    wall_seconds: float = 0.0
    iterations: int = 0
    best_iteration: int = 0
    stopped_early: bool = False
    samples_seen: set | None = None

    def record(self, it, bd: M.LossBreakdown):
        c = self.curves
        for key, val in (("iteration", it), ("total", bd.total), ("l_data", bd.l_data),
                         ("l_phys", bd.l_phys)):
            c.setdefault(key, []).append(val)
        for j, v in enumerate(bd.per_output):
            c.setdefault(f"out{j}", []).append(v)


def _segment_pool(sources: list[SubjectData], seg_len: int, split: str = "train"):
    pools = []
    for sd in sources:
        blocks = [b for b in sd.blocks(split) if b.n_segments(seg_len) > 0]
        counts = np.array([b.n_segments(seg_len) for b in blocks], dtype=np.int64)
        pools.append((sd, blocks, counts))
    return pools


def _val_batches(sources: list[SubjectData], seg_len: int, n: int):
    out = []
    for sd, blocks, counts in _segment_pool(sources, seg_len, "val"):
        total = int(counts.sum())
        if total == 0:
            continue
        picks = np.unique(np.linspace(0, total - 1, min(n, total)).astype(int))
        edges = np.cumsum(counts)
        for p in picks:
            bi = int(np.searchsorted(edges, p, side="right"))
            k = p - (edges[bi - 1] if bi else 0)
            out.append((sd, blocks[bi].segment(int(k), seg_len)))
    return out


def physics_params(subject, dyn_scale: float = 1.0):
    """Dynamics used inside the physics loss: the subject's own, or with
    inertia, damping and mass scaled to model mis-specified physics."""
    if dyn_scale == 1.0:
        return subject.dyn, subject.arms
    d = subject.dyn
    return replace(d, inertia=d.inertia * dyn_scale, damping=d.damping * dyn_scale,
                   mass=d.mass * dyn_scale), subject.arms


def _validation_loss(net, vals, lam, seg_len, dyn_scale=1.0):
    if not vals:
        return float("nan")
    tot = 0.0
    for sd, batch in vals:
        pred = M.forward(net, batch.inputs, train=False)
        dyn, arms = physics_params(sd.subject, dyn_scale)
        bd, _ = M.composite_loss(pred, batch.targets, batch.dt, batch.index, dyn, arms, lam,
                                 seg_len)
        tot += bd.total
    return tot / len(vals)


def _snapshot(net):
    return ([p.value.copy() for p in net.params()],
            [{k: v.copy() for k, v in l.buffers().items()} for l in net.layers()])


def _restore(net, snap):
    values, bufs = snap
    for p, v in zip(net.params(), values):
        p.value[...] = v
    for layer, b in zip(net.layers(), bufs):
        if b:
            layer.set_buffers(b)


def warm_up_norm_stats(net, pools, rng, seg_len, n_batches):
    """Stats-only forward passes so running-mode normalization starts from
    population estimates instead of one segment's statistics."""
    for i in range(n_batches):
        sd, blocks, counts = pools[i % len(pools)]
        _, batch = _draw(blocks, counts, rng, seg_len)
        M.forward(net, batch.inputs, train=True)


def _draw(blocks, counts, rng, seg_len):
    k = int(rng.integers(int(counts.sum())))
    edges = np.cumsum(counts)
    bi = int(np.searchsorted(edges, k, side="right"))
    return blocks[bi], blocks[bi].segment(k - int(edges[bi - 1] if bi else 0), seg_len)


def clip_grad_norm(net: nnet.Network, max_norm: float) -> float:
    """Rescale trainable gradients in place so their joint L2 norm is at most
    ``max_norm``. Returns the norm before clipping."""
    grads = [p.grad for p in net.trainable_params()]
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if norm > max_norm:
        for g in grads:
            g *= max_norm / norm
    return norm


def fit(net: nnet.Network, sources: list[SubjectData], lam: float, cfg: TrainConfig,
        seed: int, track_samples: bool = False) -> TrainReport:
    """Batch-1 SGD: each iteration is one contiguous segment, subjects visited
    round-robin, with early stopping on the validation total loss."""
    t0 = time.perf_counter()
    report = TrainReport(samples_seen=set() if track_samples else None)
    S = cfg.segment_len
    pools = [p for p in _segment_pool(sources, S) if p[2].sum() > 0]
    if not pools:
        raise DataError("no training segments available")
    rng = np.random.default_rng([seed, 11])
    opt = nnet.SGDMomentum(net, cfg.lr, cfg.momentum)
    if cfg.max_iter > 0 and net.needs_warmup():
        warm = max((l.warmup for l in net.norm_layers()), default=0)
        warm_up_norm_stats(net, pools, np.random.default_rng([seed, 13]), S, warm)
    vals = _val_batches(sources, S, cfg.val_segments)
    best, best_it, since, snap = np.inf, 0, 0, None

    steps = cfg.max_iter
    if cfg.iteration_unit == "epochs":
        steps = cfg.max_iter * int(sum(p[2].sum() for p in pools) // S)

    it = 0
    for it in range(1, steps + 1):
        sd, blocks, counts = pools[(it - 1) % len(pools)]
        blk, batch = _draw(blocks, counts, rng, S)
        dyn, arms = physics_params(sd.subject, cfg.physics_dyn_scale)
        bd, _ = M.total_loss_and_grad(net, batch, dyn, arms, lam, S)
        if not np.isfinite(bd.total):
            raise TrainingDivergedError(it, bd.total)
        if cfg.clip_norm:
            clip_grad_norm(net, cfg.clip_norm)
        opt.step()
        report.record(it, bd)
        if report.samples_seen is not None:
            W = batch.inputs.shape[2]
            for last in batch.index.tolist():
                report.samples_seen.update((sd.id, blk.trial, j) for j in range(last - W + 1, last + 1))
        if vals and it % cfg.eval_every == 0:
            v = _validation_loss(net, vals, lam, S, cfg.physics_dyn_scale)
            report.val_curve.append((it, v))
            if not np.isfinite(v):
                raise TrainingDivergedError(it, v)
            if v < best - cfg.min_delta:
                best, best_it, since = v, it, 0
                if cfg.restore_best:
                    snap = _snapshot(net)
            else:
                since += cfg.eval_every
                if since >= cfg.patience:
                    report.stopped_early = True
                    break
    report.iterations = it if steps > 0 else 0
    report.best_iteration = best_it
    if snap is not None:
        _restore(net, snap)
    report.wall_seconds = max(time.perf_counter() - t0, 1e-9)
    return report


def train_generic(sources: list[SubjectData], model_cfg: M.ModelConfig = M.ModelConfig(),
                  cfg: TrainConfig = TrainConfig(), lam: float = 1.0, seed: int = 0,
                  track_samples: bool = False):
    if not sources:
        raise DataError("train_generic needs at least one subject")
    net = M.build_picnn(model_cfg, seed)
    if model_cfg.standardize_targets:
        tg = np.concatenate([sd.concat("train").targets for sd in sources])
        M.set_target_scaling(net, tg.mean(axis=0), np.maximum(tg.std(axis=0), 1e-6))
    report = fit(net, sources, lam, cfg, seed, track_samples)
    return net, report


def clone(net: nnet.Network) -> nnet.Network:
    out = copy.deepcopy(net)
    out.reseed(net.rng.bit_generator.state)
    return out


def personalize(generic: nnet.Network, target: SubjectData, fraction: float = 1.0,
                cfg: TrainConfig = TrainConfig(), lam: float = 1.0, seed: int = 0,
                window: int | None = None, track_samples: bool = False):
    """Freeze the conv blocks of a copy of ``generic`` and fine-tune the dense
    blocks and head on the first ``fraction`` of the subject's training data."""
    names = [b.name for b in generic.blocks]
    if names[:2] != ["conv1", "conv2"] or M.FEATURE_GROUP not in [g.name for g in generic.groups]:
        raise CompatibilityError(f"checkpoint blocks {names} are not a Pi-CNN layout")
    W = window or _window_of(generic)
    net = clone(generic)
    net.reseed([seed, 17])
    net.freeze(M.FEATURE_GROUP)
    sub = target.with_fraction(fraction, W)
    if not any(b.n_segments(cfg.segment_len) for b in sub.train):
        warnings.warn(f"fraction {fraction} leaves no usable training segment for subject "
                      f"{target.id}; returning the generic parameters unchanged")
        return net, TrainReport(wall_seconds=1e-9)
    report = fit(net, [sub], lam, cfg, seed, track_samples)
    return net, report


def _window_of(net: nnet.Network) -> int:
    mc = net.meta.get("model_config", {})
    return int(mc.get("window", 16))


# ---------------------------------------------------------------------------
# experiment protocol

@dataclass
class RunResult:
    record: EvaluationRecord
    report: TrainReport
    net: nnet.Network | None = None


def _sources(data: dict[int, SubjectData], ids):
    return [data[i] for i in ids]


def run_method(method: MethodConfig, scenario: str, data: dict[int, SubjectData], heldout: int,
               generic_ids: list[int] | None = None, model_cfg: M.ModelConfig = M.ModelConfig(),
               fraction: float = 1.0, cache: dict | None = None) -> RunResult:
    """Train and evaluate one method on the held-out subject's test split.

    ``generic_ids`` defaults to every other subject (multiple-to-single); the
    single-to-single scenario needs exactly one generic subject. ``cache``
    shares generic networks between the -1 and -KT variants.
    """
    if scenario not in SCENARIOS:
        raise ConfigError(f"scenario must be one of {SCENARIOS}, got {scenario!r}")
    if heldout not in data:
        raise ConfigError(f"held-out subject {heldout} not in dataset")
    if generic_ids is None:
        generic_ids = [i for i in sorted(data) if i != heldout]
    if heldout in generic_ids:
        raise ConfigError("held-out subject must not be part of the generic training set")
    if scenario == "single" and len(generic_ids) != 1:
        raise ConfigError(f"single-to-single needs one generic subject, got {len(generic_ids)}")
    if scenario == "multiple" and len(generic_ids) < 2:
        raise ConfigError("multiple-to-single needs at least two generic subjects")
    model_cfg = replace(model_cfg, dropout=method.dropout)
    lam, cfg, seed = method.weight, method.train, method.seed
    target = data[heldout]
    cache = {} if cache is None else cache

    def generic():
        key = (lam, tuple(generic_ids), seed, model_cfg, cfg)
        if key not in cache:
            cache[key] = train_generic(_sources(data, generic_ids), model_cfg, cfg, lam, seed)
        return cache[key]

    if method.domain == "generic":
        net, report = generic()
    elif method.domain == "personal":
        net, report = train_generic([target], model_cfg, cfg, lam, seed)
    else:
        gnet, _ = generic()
        net, report = personalize(gnet, target, fraction, cfg, lam, seed, model_cfg.window)
    rec = evaluate(net, target, method.method, scenario, generic_ids,
                   wall_seconds=report.wall_seconds, seed=seed, fraction=fraction)
    rec.loss_curve = report.curves
    return RunResult(rec, report, net)


def timing_report(records: list[EvaluationRecord]) -> list[dict]:
    """Wall-clock minutes per method/scenario (mean over records). For -KT
    methods the time is the personalization phase alone."""
    groups: dict = {}
    for r in records:
        groups.setdefault((r.method, r.scenario), []).append(r.wall_seconds)
    return [{"method": m, "scenario": s, "minutes": float(np.mean(v)) / 60.0, "runs": len(v)}
            for (m, s), v in sorted(groups.items())]
