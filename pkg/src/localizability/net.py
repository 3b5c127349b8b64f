"""Sparse 3D convolutional classifier with hand-written reverse-mode gradients.

Architecture, per conv level: a 3x3x3 sparse convolution (stride 1 at the
first level, stride 2 afterwards) followed by one residual block of two
3x3x3 convolutions. Global max pooling over the final sites gives the
descriptor, which a 5-layer MLP maps to six sigmoid probabilities ordered
(x, y, z, roll, pitch, yaw). Everything runs in float64.
"""
from __future__ import annotations

import itertools
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .se3 import derive_rng
from .voxel import SparseVoxelGrid, prepare_input

OFFSETS = np.array(list(itertools.product((-1, 0, 1), repeat=3)), dtype=np.int64)
SIGMOID_CLAMP = 30.0
CHECKPOINT_MAGIC = b"L3ENET01"
CHECKPOINT_VERSION = 1

# per-axis probability thresholds (x, y, z, roll, pitch, yaw)
DEFAULT_DECISION_THRESHOLDS = (0.3, 0.3, 0.8, 0.3, 0.8, 0.8)


class EmptyGridError(ValueError):
    pass


class DivergenceError(FloatingPointError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    conv_channels: tuple = (8, 16, 32)
    conv_strides: tuple = (1, 2, 2)
    in_channels: int = 1
    descriptor_dim: int = 32
    mlp_widths: tuple = (32, 64, 32, 16, 6)
    dropout_rate: float = 0.3
    leaky_slope: float = 0.01
    seed: int = 0
    # input preprocessing
    points: int = 4000
    voxel_size: float = 0.2
    features: str = "count"

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        object.__setattr__(self, "conv_strides", tuple(int(s) for s in self.conv_strides))
        object.__setattr__(self, "mlp_widths", tuple(int(w) for w in self.mlp_widths))
        if len(self.conv_channels) != len(self.conv_strides) or not self.conv_channels:
            raise ValueError("conv_channels and conv_strides must be non-empty and equal length")
        if self.descriptor_dim != self.conv_channels[-1]:
            raise ValueError("descriptor_dim must equal the last conv channel count")
        if self.mlp_widths[-1] != 6:
            raise ValueError("the last MLP width must be 6")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")

    def to_json(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_json(cls, d: dict) -> "NetworkConfig":
        return cls(**d)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    epochs: int = 20
    initial_lr: float = 0.05
    lr_decay: float = 0.9
    seed: int = 0
    decision_thresholds: tuple = DEFAULT_DECISION_THRESHOLDS

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.initial_lr <= 0:
            raise ValueError("initial_lr must be > 0")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ValueError("lr_decay must lie in (0, 1]")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")

    def to_json(self) -> dict:
        d = asdict(self)
        d["decision_thresholds"] = list(self.decision_thresholds)
        return d


# --------------------------------------------------------------------------
# parameters


def parameter_shapes(cfg: NetworkConfig) -> dict:
    shapes = {}
    cin = cfg.in_channels
    for lvl, c in enumerate(cfg.conv_channels):
        shapes[f"conv{lvl}.down.w"] = (27, cin, c)
        shapes[f"conv{lvl}.down.b"] = (c,)
        for r in ("res1", "res2"):
            shapes[f"conv{lvl}.{r}.w"] = (27, c, c)
            shapes[f"conv{lvl}.{r}.b"] = (c,)
        cin = c
    dims = (cfg.descriptor_dim,) + cfg.mlp_widths
    for j in range(len(cfg.mlp_widths)):
        shapes[f"mlp{j}.w"] = (dims[j], dims[j + 1])
        shapes[f"mlp{j}.b"] = (dims[j + 1],)
    return shapes


def init_params(cfg: NetworkConfig) -> dict:
    """Kaiming fan-in initialisation, zero biases; deterministic in ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[:-1]))
            params[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)
    return params


def parameter_count(params: dict) -> int:
    return int(sum(v.size for v in params.values()))


# --------------------------------------------------------------------------
# sparse convolution primitives

_KEY_OFF = 1 << 20


def _encode(coords):
    c = coords + _KEY_OFF
    return (c[:, 0] << 42) | (c[:, 1] << 21) | c[:, 2]


def kernel_map(in_coords, out_coords, stride: int):
    """For each of the 27 offsets, index pairs ``(in_idx, out_idx)`` with
    ``in_coords[in_idx] == stride * out_coords[out_idx] + offset``."""
    keys = _encode(in_coords)
    order = np.argsort(keys)
    sk = keys[order]
    pairs = []
    for off in OFFSETS:
        tk = _encode(out_coords * stride + off)
        pos = np.minimum(np.searchsorted(sk, tk), len(sk) - 1)
        hit = sk[pos] == tk
        pairs.append((order[pos[hit]], np.nonzero(hit)[0]))
    return pairs


def sparse_conv(x, w, b, kmap, n_out):
    out = np.tile(b, (n_out, 1))
    for k, (i_idx, o_idx) in enumerate(kmap):
        if len(i_idx):
            out[o_idx] += x[i_idx] @ w[k]
    return out


def sparse_conv_backward(gout, x, w, kmap):
    dx = np.zeros_like(x)
    dw = np.zeros_like(w)
    for k, (i_idx, o_idx) in enumerate(kmap):
        if len(i_idx):
            g = gout[o_idx]
            dw[k] = x[i_idx].T @ g
            dx[i_idx] += g @ w[k].T
    return dx, dw, gout.sum(axis=0)


def leaky(z, slope):
    return np.where(z > 0, z, slope * z)


def leaky_backward(g, z, slope):
    return g * np.where(z > 0, 1.0, slope)


def global_max_pool(x):
    arg = np.argmax(x, axis=0)
    return x[arg, np.arange(x.shape[1])], arg


def global_max_pool_backward(g, arg, n_sites):
    dx = np.zeros((n_sites, len(g)))
    dx[arg, np.arange(len(g))] = g
    return dx


def dense(h, w, b):
    return h @ w + b


def dense_backward(g, h, w):
    """Gradients ``(dh, dw, db)`` of a dense layer given the output gradient."""
    return w @ g, np.outer(h, g), g.copy()


def dropout_backward(g, mask):
    return g if mask is None else g * mask


def sigmoid(z):
    z = np.clip(z, -SIGMOID_CLAMP, SIGMOID_CLAMP)
    return 1.0 / (1.0 + np.exp(-z))


def bce_loss(p, t) -> float:
    """Mean binary cross entropy over the six axes."""
    p = np.asarray(p, dtype=float)
    t = np.asarray(t, dtype=float)
    return float(-np.mean(t * np.log(p) + (1.0 - t) * np.log(1.0 - p)))


def sigmoid_bce_backward(z, t):
    """Gradient of ``bce_loss(sigmoid(z), t)`` with respect to the logits ``z``.

    Zero where the clamp is active, matching the clamped forward pass.
    """
    z = np.asarray(z, dtype=float)
    return (sigmoid(z) - np.asarray(t, dtype=float)) / len(z) * (np.abs(z) < SIGMOID_CLAMP)


# --------------------------------------------------------------------------
# forward / backward


@dataclass
class Tape:
    levels: list = field(default_factory=list)
    pool_arg: np.ndarray = None
    n_sites: int = 0
    mlp: list = field(default_factory=list)
    logits: np.ndarray = None


def forward(params: dict, grid: SparseVoxelGrid, cfg: NetworkConfig, train_mode: bool = False,
            rng: np.random.Generator | None = None):
    """Returns ``(probabilities, tape)``. Dropout only when ``train_mode``."""
    if len(grid) == 0:
        raise EmptyGridError("voxel grid has no occupied sites")
    slope = cfg.leaky_slope
    tape = Tape()
    x = np.asarray(grid.features, dtype=float)
    coords = grid.coords
    for lvl, stride in enumerate(cfg.conv_strides):
        out_coords = coords if stride == 1 else np.unique(np.floor_divide(coords, stride), axis=0)
        km_down = kernel_map(coords, out_coords, stride)
        km_same = km_down if stride == 1 else kernel_map(out_coords, out_coords, 1)
        n = len(out_coords)
        z0 = sparse_conv(x, params[f"conv{lvl}.down.w"], params[f"conv{lvl}.down.b"], km_down, n)
        a0 = leaky(z0, slope)
        z1 = sparse_conv(a0, params[f"conv{lvl}.res1.w"], params[f"conv{lvl}.res1.b"], km_same, n)
        a1 = leaky(z1, slope)
        z2 = sparse_conv(a1, params[f"conv{lvl}.res2.w"], params[f"conv{lvl}.res2.b"], km_same, n)
        s = a0 + z2
        tape.levels.append(dict(x=x, km_down=km_down, km_same=km_same, z0=z0, a0=a0, z1=z1, a1=a1, s=s))
        x = leaky(s, slope)
        coords = out_coords
    h, arg = global_max_pool(x)
    tape.pool_arg, tape.n_sites = arg, len(x)
    n_layers = len(cfg.mlp_widths)
    for j in range(n_layers):
        z = dense(h, params[f"mlp{j}.w"], params[f"mlp{j}.b"])
        rec = dict(h=h, z=z, mask=None)
        if j < n_layers - 1:
            h = leaky(z, slope)
            if train_mode and cfg.dropout_rate > 0:
                rng = rng if rng is not None else np.random.default_rng(0)
                keep = 1.0 - cfg.dropout_rate
                rec["mask"] = (rng.random(h.shape) < keep) / keep
                h = h * rec["mask"]
        tape.mlp.append(rec)
    tape.logits = z
    return sigmoid(z), tape


def backward_from_tape(params: dict, tape: Tape, p, t, cfg: NetworkConfig) -> dict:
    """Gradients of ``bce_loss(p, t)`` for one sample given its forward tape."""
    slope = cfg.leaky_slope
    grads = {}
    g = sigmoid_bce_backward(tape.logits, t)
    for j in reversed(range(len(tape.mlp))):
        rec = tape.mlp[j]
        g, grads[f"mlp{j}.w"], grads[f"mlp{j}.b"] = dense_backward(g, rec["h"], params[f"mlp{j}.w"])
        if j > 0:
            prev = tape.mlp[j - 1]
            g = leaky_backward(dropout_backward(g, prev["mask"]), prev["z"], slope)
    g = global_max_pool_backward(g, tape.pool_arg, tape.n_sites)
    for lvl in reversed(range(len(tape.levels))):
        L = tape.levels[lvl]
        gs = leaky_backward(g, L["s"], slope)
        # s = a0 + conv_res2(leaky(conv_res1(a0)))
        ga1, grads[f"conv{lvl}.res2.w"], grads[f"conv{lvl}.res2.b"] = sparse_conv_backward(
            gs, L["a1"], params[f"conv{lvl}.res2.w"], L["km_same"])
        gz1 = leaky_backward(ga1, L["z1"], slope)
        ga0, grads[f"conv{lvl}.res1.w"], grads[f"conv{lvl}.res1.b"] = sparse_conv_backward(
            gz1, L["a0"], params[f"conv{lvl}.res1.w"], L["km_same"])
        ga0 = ga0 + gs
        gz0 = leaky_backward(ga0, L["z0"], slope)
        g, grads[f"conv{lvl}.down.w"], grads[f"conv{lvl}.down.b"] = sparse_conv_backward(
            gz0, L["x"], params[f"conv{lvl}.down.w"], L["km_down"])
    return grads


def backward(params: dict, batch, cfg: NetworkConfig, rng: np.random.Generator | None = None,
             train_mode: bool = True):
    """Mean batch BCE and its exact gradients.

    ``batch`` is a sequence of ``(grid, target)``. Samples are processed in
    order, each with its own dropout mask drawn from ``rng``.
    """
    if len(batch) == 0:
        raise ValueError("batch must not be empty")
    rng = rng if rng is not None else np.random.default_rng(0)
    total = {k: np.zeros_like(v) for k, v in params.items()}
    loss = 0.0
    for grid, t in batch:
        p, tape = forward(params, grid, cfg, train_mode, rng)
        loss += bce_loss(p, t)
        for k, v in backward_from_tape(params, tape, p, t, cfg).items():
            total[k] += v
    n = len(batch)
    return loss / n, {k: v / n for k, v in total.items()}


# --------------------------------------------------------------------------
# training and inference


def _pairs(samples):
    out = []
    for s in samples:
        if hasattr(s, "cloud"):
            out.append((s.cloud, np.asarray(s.target)))
        else:
            out.append((s[0], np.asarray(s[1])))
    return out


def decide(p, thresholds=DEFAULT_DECISION_THRESHOLDS) -> np.ndarray:
    """``d_i = 1`` iff ``p_i`` strictly exceeds its threshold."""
    return (np.asarray(p) > np.asarray(thresholds, dtype=float)).astype(np.int64)


def evaluate_probabilities(params, clouds, cfg: NetworkConfig, seed: int = 0) -> np.ndarray:
    """Eval-mode probabilities; cloud ``i`` is subsampled with stream ``(seed, i)``."""
    probs = []
    for i, cloud in enumerate(clouds):
        grid = prepare_input(cloud, derive_rng(seed, i), cfg.points, cfg.voxel_size, cfg.features)
        probs.append(forward(params, grid, cfg)[0])
    return np.array(probs).reshape(-1, 6)


def train(train_set, valid_set, net_cfg: NetworkConfig = NetworkConfig(),
          train_cfg: TrainConfig = TrainConfig(), on_epoch=None):
    """Plain minibatch SGD with exponential learning-rate decay.

    Returns ``(params, history)``; ``params`` are those with the best
    validation loss (training loss when no validation set is given).
    ``on_epoch(epoch, params, record)`` is called after every epoch.
    """
    train_pairs = _pairs(train_set)
    valid_pairs = _pairs(valid_set)
    if not train_pairs:
        raise ValueError("training set is empty")
    params = init_params(net_cfg)
    history = []
    if train_cfg.epochs == 0:
        return params, history
    best = {k: v.copy() for k, v in params.items()}
    best_loss = np.inf
    seed = train_cfg.seed
    n = len(train_pairs)
    for epoch in range(train_cfg.epochs):
        lr = train_cfg.initial_lr * train_cfg.lr_decay ** epoch
        order = derive_rng(seed, 1, epoch).permutation(n)
        losses = []
        for b0 in range(0, n, train_cfg.batch_size):
            idx = order[b0:b0 + train_cfg.batch_size]
            batch = [(prepare_input(train_pairs[i][0], derive_rng(seed, 2, epoch, int(i)),
                                    net_cfg.points, net_cfg.voxel_size, net_cfg.features),
                      train_pairs[i][1]) for i in idx]
            loss, grads = backward(params, batch, net_cfg, derive_rng(seed, 3, epoch, b0))
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise DivergenceError(f"non-finite loss or gradient at epoch {epoch}")
            for k in params:
                params[k] = params[k] - lr * grads[k]
            losses.append(loss * len(idx))
        record = {"epoch": epoch, "lr": lr, "train_loss": float(sum(losses) / n)}
        if valid_pairs:
            probs = evaluate_probabilities(params, [c for c, _ in valid_pairs], net_cfg, seed)
            truths = np.array([t for _, t in valid_pairs])
            record["valid_loss"] = float(np.mean([bce_loss(p, t) for p, t in zip(probs, truths)]))
            pred = decide(probs, train_cfg.decision_thresholds)
            record["valid_accuracy"] = (pred == truths).mean(axis=0).tolist()
        history.append(record)
        score = record.get("valid_loss", record["train_loss"])
        if score < best_loss:
            best_loss = score
            best = {k: v.copy() for k, v in params.items()}
        if on_epoch is not None:
            on_epoch(epoch, params, record)
    return best, history


def predict(params, cloud, cfg: NetworkConfig = NetworkConfig(),
            thresholds=DEFAULT_DECISION_THRESHOLDS, rng: np.random.Generator | None = None):
    """Returns ``(d, p)`` for a single cloud."""
    cloud = np.asarray(cloud)
    if len(cloud) == 0:
        raise EmptyGridError("cannot predict on an empty cloud")
    rng = rng if rng is not None else np.random.default_rng(0)
    grid = prepare_input(cloud, rng, cfg.points, cfg.voxel_size, cfg.features)
    p, _ = forward(params, grid, cfg)
    return decide(p, thresholds), p


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: dict, cfg: NetworkConfig, epoch: int = 0, metrics=None) -> None:
    """JSON header then raw little-endian float64 tensors in header order."""
    names = list(params)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": cfg.to_json(),
        "epoch": epoch,
        "metrics": metrics or {},
        "tensors": [[n, list(params[n].shape)] for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(params[n], dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns ``(params, config, header)``."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a network checkpoint")
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + hlen])
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
    off = 12 + hlen
    params = {}
    for name, shape in header["tensors"]:
        size = int(np.prod(shape))
        if off + 8 * size > len(raw):
            raise ValueError(f"{path}: truncated tensor {name}")
        params[name] = np.frombuffer(raw, dtype="<f8", count=size, offset=off).reshape(shape).copy()
        off += 8 * size
    return params, NetworkConfig.from_json(header["config"]), header
