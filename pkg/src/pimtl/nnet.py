"""Small reverse-mode network core: conv1d, ReLU, normalization, dropout,
dense layers, SGD with momentum, and a versioned binary checkpoint format.

Arrays are float64 throughout. Layers cache what their backward pass needs
during ``forward``; ``backward`` consumes the cache and fills ``Param.grad``.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

CHECKPOINT_MAGIC = b"PIMTLCK\x00"
CHECKPOINT_VERSION = 1


class DimensionError(ValueError):
    pass


class StateError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class Param:
    name: str
    value: np.ndarray
    grad: np.ndarray = None

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape


def kaiming_uniform(rng, shape, fan_in, gain=math.sqrt(2.0)):
    bound = gain * math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, shape)


class Layer:
    kind = "layer"

    def params(self) -> list[Param]:
        return []

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def set_buffers(self, bufs: dict):
        pass

    def spec(self) -> dict:
        return {"kind": self.kind}

    def forward(self, x, train: bool):
        raise NotImplementedError

    def backward(self, dy, need_input_grad: bool = True):
        raise NotImplementedError


class Conv1d(Layer):
    """Cross-correlation with zero padding; weights ``C_out x C_in x K``."""

    kind = "conv1d"

    def __init__(self, c_in, c_out, kernel=3, pad=3, rng=None, name="conv"):
        self.c_in, self.c_out, self.kernel, self.pad = c_in, c_out, kernel, pad
        rng = rng or np.random.default_rng(0)
        fan_in = c_in * kernel
        self.w = Param(f"{name}.weight", kaiming_uniform(rng, (c_out, c_in, kernel), fan_in))
        self.b = Param(f"{name}.bias", np.zeros(c_out))
        self._cols = None

    def spec(self):
        return {"kind": self.kind, "c_in": self.c_in, "c_out": self.c_out,
                "kernel": self.kernel, "pad": self.pad}

    def params(self):
        return [self.w, self.b]

    def forward(self, x, train=True):
        if x.ndim != 3 or x.shape[1] != self.c_in:
            raise DimensionError(f"conv1d expects B x {self.c_in} x W, got {x.shape}")
        p = self.pad
        xp = np.pad(x, ((0, 0), (0, 0), (p, p)))
        cols = sliding_window_view(xp, self.kernel, axis=2)       # B x Ci x W' x K
        self._cols, self._in_w = cols, x.shape[2]
        y = np.tensordot(cols, self.w.value, axes=([1, 3], [1, 2]))  # B x W' x Co
        return y.transpose(0, 2, 1) + self.b.value[None, :, None]

    def backward(self, dy, need_input_grad=True):
        if self._cols is None:
            raise StateError("conv1d backward called without a forward cache")
        cols = self._cols
        self.w.grad += np.tensordot(dy, cols, axes=([0, 2], [0, 2]))
        self.b.grad += dy.sum(axis=(0, 2))
        if not need_input_grad:
            return None
        B, _, w_out = dy.shape
        dxp = np.zeros((B, self.c_in, w_out + self.kernel - 1))
        for k in range(self.kernel):
            dxp[:, :, k:k + w_out] += np.tensordot(self.w.value[:, :, k], dy,
                                                   axes=([0], [1])).transpose(1, 0, 2)
        p = self.pad
        return dxp[:, :, p:p + self._in_w]


class Dense(Layer):
    kind = "dense"

    def __init__(self, d_in, d_out, rng=None, name="dense", gain=math.sqrt(2.0)):
        self.d_in, self.d_out = d_in, d_out
        rng = rng or np.random.default_rng(0)
        self.w = Param(f"{name}.weight", kaiming_uniform(rng, (d_out, d_in), d_in, gain))
        self.b = Param(f"{name}.bias", np.zeros(d_out))
        self._x = None

    def spec(self):
        return {"kind": self.kind, "d_in": self.d_in, "d_out": self.d_out}

    def params(self):
        return [self.w, self.b]

    def forward(self, x, train=True):
        if x.ndim != 2 or x.shape[1] != self.d_in:
            raise DimensionError(f"dense expects B x {self.d_in}, got {x.shape}")
        self._x = x
        return x @ self.w.value.T + self.b.value

    def backward(self, dy, need_input_grad=True):
        if self._x is None:
            raise StateError("dense backward called without a forward cache")
        self.w.grad += dy.T @ self._x
        self.b.grad += dy.sum(axis=0)
        return dy @ self.w.value if need_input_grad else None


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=True):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, dy, need_input_grad=True):
        return dy * self._mask


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, train=True):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy, need_input_grad=True):
        return dy.reshape(self._shape)


class BatchNorm(Layer):
    """Per-channel normalization over the batch (and time, for B x C x W input).

    ``stat_mode="batch"``: train mode normalizes with the current batch's
    statistics (gradient flows through them); running statistics are an EMA
    of batch statistics.

    ``stat_mode="running"``: train mode normalizes with the population
    statistics gathered so far, treated as constants, then folds the batch in.
    Population statistics come from running first and second moments, so they
    capture variation *between* batches (a segment of near-identical windows
    has almost no variance of its own). The first ``warmup`` batches enter a
    cumulative average, later ones an EMA with weight ``momentum``.

    Infer mode always uses the running statistics. ``stat_mode="window"``
    instead normalizes each window's channels over their own time axis, in
    train and infer alike, and keeps no running state.
    """

    kind = "batchnorm"

    def __init__(self, num_features, eps=1e-5, momentum=0.1, stat_mode="batch", warmup=50,
                 name="bn"):
        if stat_mode not in ("batch", "running", "window"):
            raise ValueError(f"unknown stat_mode {stat_mode!r}")
        self.num_features, self.eps, self.momentum = num_features, eps, momentum
        self.stat_mode, self.warmup = stat_mode, warmup
        self.gamma = Param(f"{name}.gamma", np.ones(num_features))
        self.beta = Param(f"{name}.beta", np.zeros(num_features))
        self.running_mean = np.zeros(num_features)
        self.running_var = np.ones(num_features)
        self.count = 0
        self.update_stats = True

    def spec(self):
        return {"kind": self.kind, "num_features": self.num_features, "eps": self.eps,
                "momentum": self.momentum, "stat_mode": self.stat_mode, "warmup": self.warmup}

    def params(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var,
                "count": np.array([float(self.count)])}

    def set_buffers(self, bufs):
        self.running_mean = np.array(bufs["running_mean"], dtype=np.float64)
        self.running_var = np.array(bufs["running_var"], dtype=np.float64)
        self.count = int(np.asarray(bufs["count"]).ravel()[0])

    @property
    def initialized(self) -> bool:
        return self.count > 0

    def _axes(self, x):
        if x.ndim == 3:
            return (0, 2), (None, slice(None), None)
        if x.ndim == 2:
            return (0,), (None, slice(None))
        raise DimensionError(f"batchnorm expects 2-D or 3-D input, got {x.shape}")

    def _track(self, x, axes):
        if not self.update_stats:
            return
        mean = x.mean(axis=axes)
        if self.stat_mode == "batch":
            second = x.var(axis=axes)
            old = self.running_var
        else:
            second = (x * x).mean(axis=axes)
            old = self.running_var + self.running_mean ** 2
        if self.count == 0:
            m = 1.0
        elif self.count < self.warmup:
            m = 1.0 / (self.count + 1)
        else:
            m = self.momentum
        new_mean = (1 - m) * self.running_mean + m * mean
        new_second = (1 - m) * old + m * second
        self.running_mean = new_mean
        if self.stat_mode == "batch":
            self.running_var = new_second
        else:
            self.running_var = np.maximum(new_second - new_mean ** 2, 0.0)
        self.count += 1

    def _forward_window(self, x):
        # per-window, per-channel statistics over time; identical in train and infer
        if x.ndim != 3:
            raise DimensionError(f"window normalization expects B x C x W input, got {x.shape}")
        bc = (None, slice(None), None)
        self._bc, self._axes_used, self._batch_stats = bc, (0, 2), True
        self._inv = 1.0 / np.sqrt(x.var(axis=2, keepdims=True) + self.eps)
        self._xhat = (x - x.mean(axis=2, keepdims=True)) * self._inv
        self.count = max(self.count, 1)
        return self.gamma.value[bc] * self._xhat + self.beta.value[bc]

    def forward(self, x, train=True):
        if x.ndim >= 2 and x.shape[1] != self.num_features:
            raise DimensionError(f"batchnorm expects {self.num_features} channels, got {x.shape}")
        if self.stat_mode == "window":
            return self._forward_window(x)
        axes, bc = self._axes(x)
        self._bc, self._axes_used = bc, axes
        if train and self.stat_mode == "batch":
            self._batch_stats = True
            use_mean, use_var = x.mean(axis=axes), x.var(axis=axes)
            self._track(x, axes)
        elif train:
            self._batch_stats = False
            if self.count == 0:
                self._track(x, axes)
                use_mean, use_var = self.running_mean, self.running_var
            else:
                use_mean, use_var = self.running_mean, self.running_var
                self._track(x, axes)
        else:
            if self.count == 0:
                raise StateError("batchnorm inference before any training statistics")
            self._batch_stats = False
            use_mean, use_var = self.running_mean, self.running_var
        self._inv = 1.0 / np.sqrt(use_var + self.eps)
        self._xhat = (x - use_mean[bc]) * self._inv[bc]
        return self.gamma.value[bc] * self._xhat + self.beta.value[bc]

    def backward(self, dy, need_input_grad=True):
        bc, axes, xhat = self._bc, self._axes_used, self._xhat
        self.gamma.grad += (dy * xhat).sum(axis=axes)
        self.beta.grad += dy.sum(axis=axes)
        if not need_input_grad:
            return None
        if self.stat_mode == "window":
            g = self.gamma.value[bc] * self._inv
            m_dy = dy.mean(axis=2, keepdims=True)
            m_dyx = (dy * xhat).mean(axis=2, keepdims=True)
            return g * (dy - m_dy - xhat * m_dyx)
        g = self.gamma.value[bc] * self._inv[bc]
        if not self._batch_stats:
            return dy * g
        m_dy = dy.mean(axis=axes)
        m_dyx = (dy * xhat).mean(axis=axes)
        return g * (dy - m_dy[bc] - xhat * m_dyx[bc])


class Dropout(Layer):
    """Inverted dropout. With ``share_batch`` one mask is drawn per call and
    broadcast over the batch axis, so the windows of one contiguous segment
    see the same sub-network."""

    kind = "dropout"

    def __init__(self, rate=0.5, rng=None, share_batch=True):
        if not 0 <= rate < 1:
            raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
        self.rate, self.share_batch = rate, share_batch
        self.rng = rng
        self._mask = None

    def spec(self):
        return {"kind": self.kind, "rate": self.rate, "share_batch": self.share_batch}

    def forward(self, x, train=True):
        if not train or self.rate == 0:
            self._mask = None
            return x
        shape = (1,) + x.shape[1:] if self.share_batch else x.shape
        keep = self.rng.random(shape) >= self.rate
        self._mask = keep / (1.0 - self.rate)
        return x * self._mask

    def backward(self, dy, need_input_grad=True):
        return dy if self._mask is None else dy * self._mask


class OutputScale(Layer):
    """Fixed affine map ``y = x * scale + shift`` (target de-standardization)."""

    kind = "output_scale"

    def __init__(self, dim):
        self.scale = np.ones(dim)
        self.shift = np.zeros(dim)

    def spec(self):
        return {"kind": self.kind, "dim": len(self.scale)}

    def buffers(self):
        return {"scale": self.scale, "shift": self.shift}

    def set_buffers(self, bufs):
        self.scale = np.array(bufs["scale"], dtype=np.float64)
        self.shift = np.array(bufs["shift"], dtype=np.float64)

    def forward(self, x, train=True):
        return x * self.scale + self.shift

    def backward(self, dy, need_input_grad=True):
        return dy * self.scale


@dataclass
class ParamGroup:
    name: str
    blocks: list
    frozen: bool = False

    def params(self) -> list[Param]:
        return [p for blk in self.blocks for layer in blk.layers for p in layer.params()]


@dataclass
class Block:
    name: str
    layers: list
    frozen: bool = False

    def params(self):
        return [p for layer in self.layers for p in layer.params()]


class Network:
    """Ordered blocks of layers with freeze flags and a shared dropout RNG.

    Frozen blocks always run in inference mode and receive no gradients; the
    backward pass stops at the earliest block that still has trainable
    parameters.
    """

    def __init__(self, blocks: list[Block], groups: list[ParamGroup], seed=0, meta=None):
        self.blocks = blocks
        self.groups = groups
        self.rng = np.random.default_rng(seed)
        self.meta = dict(meta or {})
        for blk in blocks:
            for layer in blk.layers:
                if isinstance(layer, Dropout):
                    layer.rng = self.rng

    def reseed(self, seed_or_state):
        if isinstance(seed_or_state, dict):
            self.rng.bit_generator.state = seed_or_state
        else:
            self.rng = np.random.default_rng(seed_or_state)
            for layer in self.layers():
                if isinstance(layer, Dropout):
                    layer.rng = self.rng

    def layers(self):
        return [layer for blk in self.blocks for layer in blk.layers]

    def params(self) -> list[Param]:
        return [p for blk in self.blocks for p in blk.params()]

    def named_params(self) -> dict[str, Param]:
        return {p.name: p for p in self.params()}

    def trainable_params(self) -> list[Param]:
        return [p for blk in self.blocks if not blk.frozen for p in blk.params()]

    def group(self, name) -> ParamGroup:
        for g in self.groups:
            if g.name == name:
                return g
        raise KeyError(name)

    def freeze(self, group_name: str, frozen: bool = True):
        g = self.group(group_name)
        g.frozen = frozen
        for blk in g.blocks:
            blk.frozen = frozen

    def zero_grad(self):
        for p in self.params():
            p.grad[...] = 0.0

    def set_update_stats(self, flag: bool):
        for layer in self.layers():
            if isinstance(layer, BatchNorm):
                layer.update_stats = flag

    def norm_layers(self) -> list[BatchNorm]:
        return [l for l in self.layers() if isinstance(l, BatchNorm)]

    def needs_warmup(self) -> bool:
        return any(l.stat_mode == "running" and l.count < l.warmup
                   for blk in self.blocks if not blk.frozen
                   for l in blk.layers if isinstance(l, BatchNorm))

    def forward(self, x, train: bool = False):
        for blk in self.blocks:
            mode = train and not blk.frozen
            for layer in blk.layers:
                x = layer.forward(x, mode)
        return x

    def backward(self, dy):
        first = next((i for i, b in enumerate(self.blocks) if not b.frozen), len(self.blocks))
        for bi in range(len(self.blocks) - 1, first - 1, -1):
            layers = self.blocks[bi].layers
            for li in range(len(layers) - 1, -1, -1):
                last = bi == first and li == 0
                dy = layers[li].backward(dy, need_input_grad=not last)
        return dy

    def spec(self) -> list:
        return [{"name": b.name, "layers": [l.spec() for l in b.layers]} for b in self.blocks]


class SGDMomentum:
    """``v <- mu * v + g``; ``p <- p - lr * v`` for unfrozen blocks only."""

    def __init__(self, net: Network, lr=1e-3, momentum=0.9):
        self.net, self.lr, self.momentum = net, lr, momentum
        self.velocity = {p.name: np.zeros_like(p.value) for p in net.params()}

    def step(self, grads: dict | None = None):
        for blk in self.net.blocks:
            if blk.frozen:
                continue
            for p in blk.params():
                g = p.grad if grads is None else grads[p.name]
                if g.shape != p.value.shape:
                    raise DimensionError(f"gradient for {p.name} has shape {g.shape}, "
                                         f"expected {p.value.shape}")
                v = self.velocity[p.name]
                v *= self.momentum
                v += g
                p.value -= self.lr * v

    def state(self) -> dict:
        return {"lr": self.lr, "momentum": self.momentum}


def sgd_momentum_step(groups: list[ParamGroup], grads: dict, velocity: dict,
                      lr=1e-3, mu=0.9):
    """Functional form over parameter groups; mutates params and velocity."""
    for g in groups:
        if g.frozen:
            continue
        for p in g.params():
            if grads[p.name].shape != p.value.shape:
                raise DimensionError(f"gradient for {p.name} has the wrong shape")
            velocity[p.name] = mu * velocity[p.name] + grads[p.name]
            p.value -= lr * velocity[p.name]


# ---------------------------------------------------------------------------
# checkpoints
#
# Layout (all integers little-endian):
#   0   8 bytes   magic  b"PIMTLCK\0"
#   8   u32       format version
#   12  u64       header length H in bytes
#   20  H bytes   UTF-8 JSON header
#   20+H          float64 little-endian blocks, concatenated in the order of
#                 header["arrays"]; each entry records name, shape, offset
#                 (relative to the start of the block region) and count.

def _pack_arrays(named: list[tuple[str, np.ndarray]]):
    entries, chunks, offset = [], [], 0
    for name, arr in named:
        a = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset, "count": a.size})
        chunks.append(a.tobytes())
        offset += 8 * a.size
    return entries, b"".join(chunks)


def save_checkpoint(path, net: Network, optimizer: SGDMomentum | None = None,
                    metadata: dict | None = None):
    named = [(f"param/{p.name}", p.value) for p in net.params()]
    for bi, blk in enumerate(net.blocks):
        for li, layer in enumerate(blk.layers):
            for bname, arr in layer.buffers().items():
                named.append((f"buffer/{blk.name}/{li}/{bname}", arr))
    if optimizer is not None:
        named += [(f"velocity/{k}", v) for k, v in optimizer.velocity.items()]
    entries, blob = _pack_arrays(named)
    header = {
        "version": CHECKPOINT_VERSION,
        "blocks": net.spec(),
        "frozen": {b.name: b.frozen for b in net.blocks},
        "groups": {g.name: [b.name for b in g.blocks] for g in net.groups},
        "arrays": entries,
        "optimizer": optimizer.state() if optimizer is not None else None,
        "rng_state": net.rng.bit_generator.state,
        "meta": net.meta,
        "metadata": metadata or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    data = CHECKPOINT_MAGIC + struct.pack("<IQ", CHECKPOINT_VERSION, len(hbytes)) + hbytes + blob
    Path(path).write_bytes(data)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if len(data) < 20 or data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic at byte offset 0)")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version} unsupported "
                              f"(expected {CHECKPOINT_VERSION})")
    if 20 + hlen > len(data):
        raise CheckpointError(f"{path}: header truncated at byte offset {len(data)}")
    try:
        header = json.loads(data[20:20 + hlen])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: malformed header ({exc})") from None
    base = 20 + hlen
    arrays = {}
    for e in header["arrays"]:
        start, stop = base + e["offset"], base + e["offset"] + 8 * e["count"]
        if stop > len(data):
            raise CheckpointError(f"{path}: array {e['name']} truncated at byte offset {len(data)}")
        arrays[e["name"]] = np.frombuffer(data[start:stop], dtype="<f8").reshape(e["shape"]).copy()
    if base + sum(8 * e["count"] for e in header["arrays"]) != len(data):
        raise CheckpointError(f"{path}: trailing bytes after offset "
                              f"{base + sum(8 * e['count'] for e in header['arrays'])}")
    return header, arrays


def load_into(net: Network, header: dict, arrays: dict, optimizer: SGDMomentum | None = None,
              restore_rng=True):
    """Copy checkpoint contents into an already-built, layer-compatible network."""
    if header["blocks"] != net.spec():
        raise CheckpointError("checkpoint layer specs do not match the network")
    for p in net.params():
        key = f"param/{p.name}"
        if key not in arrays or arrays[key].shape != p.value.shape:
            raise CheckpointError(f"checkpoint lacks a compatible array for {p.name}")
        p.value = arrays[key].copy()
        p.grad = np.zeros_like(p.value)
    for blk in net.blocks:
        for li, layer in enumerate(blk.layers):
            bufs = layer.buffers()
            if bufs:
                layer.set_buffers({k: arrays[f"buffer/{blk.name}/{li}/{k}"] for k in bufs})
        blk.frozen = header["frozen"].get(blk.name, False)
    for g in net.groups:
        g.frozen = all(b.frozen for b in g.blocks)
    if optimizer is not None and header.get("optimizer"):
        optimizer.lr = header["optimizer"]["lr"]
        optimizer.momentum = header["optimizer"]["momentum"]
        for k in optimizer.velocity:
            optimizer.velocity[k] = arrays[f"velocity/{k}"].copy()
    if restore_rng:
        net.rng.bit_generator.state = header["rng_state"]
    net.meta = dict(header.get("meta", {}))
