"""Pi-CNN assembly and the composite loss ``L = L_data + lambda * L_phys``."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nnet
from .dynamics import MomentArms, WristDynamicsParams
from .nnet import BatchNorm, Block, Conv1d, Dense, Dropout, Flatten, Network, OutputScale, ParamGroup, ReLU

FEATURE_GROUP = "feature_extractor"
SUBJECT_GROUP = "subject_specific"


class ContiguityError(ValueError):
    pass


class SegmentLengthError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_muscles: int = 5
    window: int = 16
    conv_channels: int = 128
    hidden: int = 128
    kernel: int = 3
    pad: int = 3
    dropout: float = 0.5
    conv_norm: str = "window"
    dense_norm: str = "running"
    norm_warmup: int = 50
    norm_momentum: float = 0.01
    standardize_targets: bool = False


def build_picnn(cfg: ModelConfig = ModelConfig(), seed: int = 0) -> Network:
    """Two conv blocks -> two dense blocks -> linear head with N + 1 outputs."""
    rng = np.random.default_rng([seed, 1])
    c_in = cfg.n_muscles + 1
    C, H = cfg.conv_channels, cfg.hidden
    w1 = cfg.window + 2 * cfg.pad - cfg.kernel + 1
    w2 = w1 + 2 * cfg.pad - cfg.kernel + 1

    def conv_block(name, ci):
        return Block(name, [Conv1d(ci, C, cfg.kernel, cfg.pad, rng, name), ReLU(),
                            BatchNorm(C, stat_mode=cfg.conv_norm, warmup=cfg.norm_warmup,
                                      momentum=cfg.norm_momentum,
                                      name=f"{name}.bn"),
                            Dropout(cfg.dropout)])

    def dense_block(name, di):
        return Block(name, [Dense(di, H, rng, name), ReLU(),
                            BatchNorm(H, stat_mode=cfg.dense_norm, warmup=cfg.norm_warmup,
                                      momentum=cfg.norm_momentum,
                                      name=f"{name}.bn"),
                            Dropout(cfg.dropout)])

    blocks = [
        conv_block("conv1", c_in),
        conv_block("conv2", C),
        Block("flatten", [Flatten()]),
        dense_block("dense1", C * w2),
        dense_block("dense2", H),
        Block("head", [Dense(H, cfg.n_muscles + 1, rng, "head", gain=1.0),
                       OutputScale(cfg.n_muscles + 1)]),
    ]
    groups = [ParamGroup(FEATURE_GROUP, blocks[:2]), ParamGroup(SUBJECT_GROUP, blocks[3:])]
    meta = {"model_config": cfg.__dict__.copy()}
    return Network(blocks, groups, seed=[seed, 2], meta=meta)


def set_target_scaling(net: Network, mean: np.ndarray, scale: np.ndarray):
    out = net.blocks[-1].layers[-1]
    out.shift = np.asarray(mean, dtype=np.float64).copy()
    out.scale = np.asarray(scale, dtype=np.float64).copy()


def forward(net: Network, inputs: np.ndarray, train: bool = False) -> np.ndarray:
    """Predictions ``B x (N+1)`` ordered ``[F_1..F_N, theta]``."""
    expected = net.blocks[0].layers[0].c_in
    if inputs.ndim != 3 or inputs.shape[1] != expected:
        raise nnet.DimensionError(f"expected B x {expected} x W input, got {inputs.shape}")
    return net.forward(inputs, train)


def predict(net: Network, inputs: np.ndarray, chunk: int = 512) -> np.ndarray:
    out = [forward(net, inputs[i:i + chunk], train=False) for i in range(0, len(inputs), chunk)]
    return np.concatenate(out, axis=0) if out else np.zeros((0, net.blocks[-1].layers[0].d_out))


@dataclass
class LossBreakdown:
    l_data: float
    l_phys: float
    lam: float
    total: float
    l_force: float = 0.0
    l_angle: float = 0.0
    per_output: list = field(default_factory=list)


def mse_data_loss(pred: np.ndarray, target: np.ndarray):
    """Force squared error summed over muscles plus angle squared error, each
    averaged over samples. Returns ``(loss, d_loss/d_pred, per_output)``."""
    if pred.shape != target.shape:
        raise nnet.DimensionError(f"prediction {pred.shape} vs target {target.shape}")
    B = pred.shape[0]
    err = pred - target
    per_output = (err ** 2).sum(axis=0) / B
    return float(per_output.sum()), 2.0 * err / B, per_output


def fd_derivatives(theta: np.ndarray, dt: float):
    """Central differences at interior points: ``(theta_dot, theta_ddot)``."""
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape[0] < 3:
        raise SegmentLengthError(f"need >= 3 samples for central differences, got {theta.shape[0]}")
    if dt <= 0:
        raise ValueError("dt must be positive")
    td = (theta[2:] - theta[:-2]) / (2.0 * dt)
    tdd = (theta[2:] - 2.0 * theta[1:-1] + theta[:-2]) / dt ** 2
    return td, tdd


@dataclass
class PhysicsSegment:
    theta: np.ndarray     # S predicted angles
    forces: np.ndarray    # S x N predicted forces
    dt: float

    def __post_init__(self):
        if len(self.theta) < 3:
            raise SegmentLengthError(f"physics segment needs >= 3 steps, got {len(self.theta)}")


def physics_residual(seg: PhysicsSegment, dyn: WristDynamicsParams, arms: MomentArms):
    td, tdd = fd_derivatives(seg.theta, seg.dt)
    th = seg.theta[1:-1]
    tau = seg.forces[1:-1] @ arms.as_array()
    return (dyn.inertia * tdd + dyn.damping * td
            + dyn.mass * dyn.gravity * dyn.com_length * np.sin(th) - tau)


def physics_loss(seg: PhysicsSegment, dyn: WristDynamicsParams, arms: MomentArms,
                 with_grad: bool = False):
    """Mean squared equation-of-motion residual over interior steps.

    With ``with_grad`` returns ``(loss, d/d theta (S,), d/d forces (S x N))``.
    """
    res = physics_residual(seg, dyn, arms)
    n = len(res)
    loss = float(np.mean(res ** 2))
    if not with_grad:
        return loss
    g = 2.0 * res / n
    dt = seg.dt
    c_lo = dyn.inertia / dt ** 2 - dyn.damping / (2 * dt)
    c_hi = dyn.inertia / dt ** 2 + dyn.damping / (2 * dt)
    c_mid = -2.0 * dyn.inertia / dt ** 2 + dyn.mass * dyn.gravity * dyn.com_length * np.cos(seg.theta[1:-1])
    dtheta = np.zeros_like(seg.theta)
    dtheta[:-2] += g * c_lo
    dtheta[1:-1] += g * c_mid
    dtheta[2:] += g * c_hi
    dforces = np.zeros_like(seg.forces)
    dforces[1:-1] = -g[:, None] * arms.as_array()[None, :]
    return loss, dtheta, dforces


def check_contiguous(index: np.ndarray | None, seg_len: int):
    if index is None:
        raise ContiguityError("batch carries no sample indices; contiguity unknown")
    if len(index) % seg_len:
        raise ContiguityError(f"batch of {len(index)} windows is not a multiple of {seg_len}")
    steps = np.diff(np.asarray(index).reshape(-1, seg_len), axis=1)
    if np.any(steps != 1):
        raise ContiguityError("physics segments must be built from windows advancing by one sample")


def composite_loss(pred: np.ndarray, target: np.ndarray, dt: float, index, dyn, arms,
                   lam: float = 1.0, seg_len: int = 5):
    """Loss and d/d pred for a batch made of consecutive ``seg_len`` segments."""
    n = pred.shape[1] - 1
    l_data, dpred, per_output = mse_data_loss(pred, target)
    l_phys = 0.0
    if lam != 0:
        check_contiguous(index, seg_len)
        n_seg = len(pred) // seg_len
        for k in range(n_seg):
            sl = slice(k * seg_len, (k + 1) * seg_len)
            seg = PhysicsSegment(pred[sl, n], pred[sl, :n], dt)
            lp, dth, dF = physics_loss(seg, dyn, arms, with_grad=True)
            l_phys += lp / n_seg
            dpred[sl, n] += lam * dth / n_seg
            dpred[sl, :n] += lam * dF / n_seg
    bd = LossBreakdown(l_data, l_phys, lam, l_data + lam * l_phys,
                       float(per_output[:n].sum()), float(per_output[n]), per_output.tolist())
    return bd, dpred


def total_loss_and_grad(net: Network, batch, dyn: WristDynamicsParams, arms: MomentArms,
                        lam: float = 1.0, seg_len: int = 5, train: bool = True):
    """Forward + backward over one batch of contiguous segments.

    Gradients accumulate into ``Param.grad`` (zeroed first); the returned dict
    maps parameter names to those arrays.
    """
    if lam != 0 and not batch.contiguous:
        raise ContiguityError("physics loss requires contiguous windows")
    net.zero_grad()
    pred = forward(net, batch.inputs, train)
    bd, dpred = composite_loss(pred, batch.targets, batch.dt, batch.index, dyn, arms, lam, seg_len)
    net.backward(dpred)
    return bd, {p.name: p.grad for p in net.params()}


def load_checkpoint(path, optimizer=None) -> Network:
    """Rebuild a Pi-CNN from the model config stored in a checkpoint header."""
    header, arrays = nnet.read_checkpoint(path)
    mc = header.get("meta", {}).get("model_config")
    if mc is None:
        raise nnet.CheckpointError(f"{path}: checkpoint carries no model_config")
    try:
        net = build_picnn(ModelConfig(**mc))
    except TypeError as exc:
        raise nnet.CheckpointError(f"{path}: incompatible model_config ({exc})") from None
    nnet.load_into(net, header, arrays, optimizer)
    return net
