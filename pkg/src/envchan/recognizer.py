"""Scatterer-count recognition from cluster cuboids.

Per-cluster features in a link-centred frame feed a small ReLU network with a
softplus head; its rounded output is the number of scatterers attributed to
the cluster. Ellipsoidal visibility regions with the transceivers as foci then
zero out clusters that cannot contribute.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .pointcloud import Cluster, ClusterCuboid
from .scenegen import TransceiverPose

log = logging.getLogger(__name__)

N_FEATURES = 14
CLASSES = ("static", "dynamic")


def _link_frame(pose: TransceiverPose):
    mid = (pose.tx_position + pose.rx_position) / 2
    d = pose.rx_position - pose.tx_position
    phi = math.atan2(d[1], d[0]) if (d[0] or d[1]) else 0.0
    return mid, phi


def _rotate_xy(v, phi):
    c, s = math.cos(phi), math.sin(phi)
    v = np.asarray(v, dtype=float)
    return np.array([c * v[0] + s * v[1], -s * v[0] + c * v[1], v[2]])


def extract_features(cuboid: ClusterCuboid, pose: TransceiverPose) -> np.ndarray:
    """14-vector: length, width, height, centre (3), orientation (2), Tx (3), Rx (3).

    Positions are relative to the Tx-Rx midpoint, rotated about z so that
    Tx -> Rx points along +x. The cuboid's long side is axial (theta and
    theta + pi are the same box), so its orientation is encoded by the
    doubled angle, which keeps the unit 2-vector continuous.
    """
    mid, phi = _link_frame(pose)
    theta = cuboid.angle - phi
    return np.concatenate(
        [
            [cuboid.length, cuboid.width, cuboid.height],
            _rotate_xy(cuboid.center - mid, phi),
            [math.cos(2 * theta), math.sin(2 * theta)],
            _rotate_xy(pose.tx_position - mid, phi),
            _rotate_xy(pose.rx_position - mid, phi),
        ]
    )


def feature_matrix(cuboids, pose: TransceiverPose) -> np.ndarray:
    if not cuboids:
        return np.zeros((0, N_FEATURES))
    return np.array([extract_features(c, pose) for c in cuboids])


# ---------------------------------------------------------------------------
# network


@dataclass
class MlpModel:
    layer_sizes: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "relu"
    output_transform: str = "softplus"

    def __post_init__(self):
        if len(self.weights) != len(self.layer_sizes) - 1 or len(self.biases) != len(self.weights):
            raise ValueError("parameter count does not match layer_sizes")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            shape = (self.layer_sizes[k + 1], self.layer_sizes[k])
            if w.shape != shape or b.shape != (shape[0],):
                raise ValueError(f"layer {k}: expected weights {shape}, got {w.shape} / {b.shape}")

    @classmethod
    def zeros(cls, layer_sizes) -> "MlpModel":
        sizes = tuple(layer_sizes)
        return cls(
            sizes,
            [np.zeros((o, i)) for i, o in zip(sizes[:-1], sizes[1:])],
            [np.zeros(o) for o in sizes[1:]],
        )

    @classmethod
    def init(cls, layer_sizes=(N_FEATURES, 64, 64, 1), seed: int = 0) -> "MlpModel":
        """He-uniform weights, zero biases."""
        rng = np.random.default_rng(seed)
        sizes = tuple(layer_sizes)
        weights = []
        for i, o in zip(sizes[:-1], sizes[1:]):
            bound = math.sqrt(6.0 / i)
            weights.append(rng.uniform(-bound, bound, size=(o, i)))
        return cls(sizes, weights, [np.zeros(o) for o in sizes[1:]])

    def copy(self) -> "MlpModel":
        return MlpModel(
            self.layer_sizes,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.activation,
            self.output_transform,
        )

    def parameters(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out


def softplus(z):
    return np.logaddexp(0.0, z)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _forward(model: MlpModel, X):
    """Pre-activations of every layer for a batch (N, in)."""
    pre = []
    a = X
    last = len(model.weights) - 1
    for k, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = a @ w.T + b
        pre.append(z)
        a = np.maximum(z, 0.0) if k < last else z
    return pre


def mlp_forward(model: MlpModel, x):
    """Non-negative count estimate for one feature vector or a batch of them."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != model.layer_sizes[0]:
        raise ValueError(f"expected {model.layer_sizes[0]} features, got {x.shape[-1]}")
    single = x.ndim == 1
    out = softplus(_forward(model, np.atleast_2d(x))[-1][:, 0])
    return float(out[0]) if single else out


def mlp_gradients(model: MlpModel, X, y):
    """Mean-squared-error loss and its gradient for every weight and bias.

    Returns ``(loss, grad_weights, grad_biases)`` with the gradient lists
    shaped like ``model.weights`` and ``model.biases``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if len(X) == 0:
        raise ValueError("empty batch")
    pre = _forward(model, X)
    z_out = pre[-1][:, 0]
    pred = softplus(z_out)
    resid = pred - y
    loss = float(np.mean(resid**2))
    delta = (2.0 / len(y) * resid * _sigmoid(z_out))[:, None]
    gw = [None] * len(model.weights)
    gb = [None] * len(model.weights)
    for k in range(len(model.weights) - 1, -1, -1):
        a_prev = X if k == 0 else np.maximum(pre[k - 1], 0.0)
        gw[k] = delta.T @ a_prev
        gb[k] = delta.sum(axis=0)
        if k:
            delta = (delta @ model.weights[k]) * (pre[k - 1] > 0)
    return loss, gw, gb


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    lr0: float = 1e-3
    lr_decay: float = 0.9
    lr_step_epochs: int = 4
    epochs: int = 200
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    split: tuple[float, float, float] = (0.6, 0.2, 0.2)
    hidden: tuple[int, ...] = (64, 64)
    seed: int = 0

    def __post_init__(self):
        if min(self.batch_size, self.epochs, self.lr_step_epochs) <= 0 or self.lr0 <= 0:
            raise ValueError("batch_size, epochs, lr_step_epochs and lr0 must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must be in (0, 1]")
        if min(self.split) < 0 or abs(sum(self.split) - 1.0) > 1e-12:
            raise ValueError("split fractions must be non-negative and sum to 1")


def learning_rate(epoch: int, config: TrainConfig = TrainConfig()) -> float:
    """Step decay: ``lr0 * lr_decay ** floor(epoch / lr_step_epochs)``."""
    return config.lr0 * config.lr_decay ** (epoch // config.lr_step_epochs)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_mse: float
    val_mse: float


@dataclass
class TrainResult:
    model: MlpModel
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1


_FLUSH_EVERY = 256
_TINY = 1e-150


class _FlatNet:
    """Parameters packed in one buffer so the Adam update is a few vector ops."""

    def __init__(self, model: MlpModel):
        self.sizes = model.layer_sizes
        self.flat = np.concatenate([p.ravel() for p in model.parameters()])
        self.weights, self.biases = [], []
        off = 0
        for i, o in zip(self.sizes[:-1], self.sizes[1:]):
            self.weights.append(self.flat[off : off + o * i].reshape(o, i))
            off += o * i
            self.biases.append(self.flat[off : off + o])
            off += o
        self.grad = np.zeros_like(self.flat)
        gw, gb = [], []
        off = 0
        for i, o in zip(self.sizes[:-1], self.sizes[1:]):
            gw.append(self.grad[off : off + o * i].reshape(o, i))
            off += o * i
            gb.append(self.grad[off : off + o])
            off += o
        self._gw, self._gb = gw, gb

    def model(self) -> MlpModel:
        return MlpModel(self.sizes, [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def backprop(self, X, y):
        pre = []
        a = X
        last = len(self.weights) - 1
        acts = [X]
        for k in range(last + 1):
            z = a @ self.weights[k].T + self.biases[k]
            pre.append(z)
            a = np.maximum(z, 0.0) if k < last else z
            if k < last:
                acts.append(a)
        z_out = pre[-1][:, 0]
        resid = softplus(z_out) - y
        delta = (2.0 / len(y) * resid * _sigmoid(z_out))[:, None]
        for k in range(last, -1, -1):
            np.matmul(delta.T, acts[k], out=self._gw[k])
            self._gb[k][:] = delta.sum(axis=0)
            if k:
                delta = (delta @ self.weights[k]) * (pre[k - 1] > 0)
        return self.grad


def _mse(model: MlpModel, X, y) -> float:
    if len(X) == 0:
        return float("nan")
    return float(np.mean((mlp_forward(model, X) - y) ** 2))


def fold_standardization(model: MlpModel, mean, scale) -> MlpModel:
    """Absorb ``x -> (x - mean) / scale`` into the first layer."""
    out = model.copy()
    w = model.weights[0] / scale[None, :]
    out.weights[0] = w
    out.biases[0] = model.biases[0] - w @ mean
    return out


def train(X_train, y_train, X_val=None, y_val=None, config: TrainConfig = TrainConfig()) -> TrainResult:
    """Adam on mean squared error with step-decayed learning rate.

    Inputs are standardized with training statistics during optimisation and
    the transform is folded back into the first layer, so the returned model
    consumes raw features. The parameters from the epoch with the lowest
    validation loss (training loss when no validation set) are kept.
    """
    X_train = np.asarray(X_train, dtype=float)
    y_train = np.asarray(y_train, dtype=float).ravel()
    if len(X_train) == 0:
        raise ValueError("need at least one training sample")
    has_val = X_val is not None and len(X_val) > 0
    X_val = np.asarray(X_val, dtype=float) if has_val else np.zeros((0, X_train.shape[1]))
    y_val = np.asarray(y_val, dtype=float).ravel() if has_val else np.zeros(0)

    mean = X_train.mean(axis=0)
    scale = X_train.std(axis=0)
    scale[scale < 1e-12] = 1.0
    Xn = (X_train - mean) / scale
    Xv = (X_val - mean) / scale

    rng = np.random.default_rng(config.seed)
    sizes = (X_train.shape[1], *config.hidden, 1)
    net = _FlatNet(MlpModel.init(sizes, seed=int(rng.integers(2**31))))
    m = np.zeros_like(net.flat)
    v = np.zeros_like(net.flat)
    tmp = np.empty_like(net.flat)
    b1, b2 = config.beta1, config.beta2
    step = 0
    history = []
    best = (math.inf, -1, None)
    n = len(Xn)
    for epoch in range(config.epochs):
        lr = learning_rate(epoch, config)
        perm = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            g = net.backprop(Xn[idx], y_train[idx])
            step += 1
            # in-place Adam: m, v moments with bias correction
            m *= b1
            np.multiply(g, 1 - b1, out=tmp)
            m += tmp
            v *= b2
            np.multiply(g, g, out=tmp)
            tmp *= 1 - b2
            v += tmp
            np.divide(v, 1 - b2**step, out=tmp)
            np.sqrt(tmp, out=tmp)
            tmp += config.adam_eps
            np.divide(m, tmp, out=tmp)
            tmp *= lr / (1 - b1**step)
            net.flat -= tmp
            if step % _FLUSH_EVERY == 0:
                # moments of dead units decay geometrically into subnormal
                # floats, which are very slow; their updates are negligible
                m[np.abs(m) < _TINY] = 0.0
                v[v < _TINY] = 0.0
        current = net.model()
        train_mse = _mse(current, Xn, y_train)
        val_mse = _mse(current, Xv, y_val) if has_val else float("nan")
        history.append(EpochRecord(epoch, lr, train_mse, val_mse))
        score = val_mse if has_val else train_mse
        if score < best[0]:
            best = (score, epoch, current)
        log.debug("epoch %d lr %.3g train %.5f val %.5f", epoch, lr, train_mse, val_mse)
    model = fold_standardization(best[2], mean, scale)
    return TrainResult(model=model, history=history, best_epoch=best[1])


def write_training_log(history, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "lr", "train_mse", "val_mse"])
        for r in history:
            w.writerow([r.epoch, repr(r.lr), repr(r.train_mse), repr(r.val_mse)])


def save_checkpoint(model: MlpModel, path) -> None:
    with open(path, "w") as fh:
        fh.write("layers: " + " ".join(str(s) for s in model.layer_sizes) + "\n")
        for k, (w, b) in enumerate(zip(model.weights, model.biases)):
            fh.write(f"# layer {k} weights {w.shape[0]}x{w.shape[1]}\n")
            for row in w:
                fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")
            fh.write(f"# layer {k} biases {b.shape[0]}\n")
            fh.write(" ".join(f"{v:.17g}" for v in b) + "\n")


def load_checkpoint(path) -> MlpModel:
    with open(path) as fh:
        header = fh.readline()
        if not header.startswith("layers:"):
            raise ValueError(f"{path}: missing 'layers:' header")
        sizes = tuple(int(s) for s in header.split(":", 1)[1].split())
        rows = [line for line in fh if line.strip() and not line.startswith("#")]
    weights, biases = [], []
    pos = 0
    for i, o in zip(sizes[:-1], sizes[1:]):
        weights.append(np.array([[float(v) for v in rows[pos + r].split()] for r in range(o)]).reshape(o, i))
        pos += o
        biases.append(np.array([float(v) for v in rows[pos].split()]).reshape(o))
        pos += 1
    if pos != len(rows):
        raise ValueError(f"{path}: trailing data after {len(sizes) - 1} layers")
    return MlpModel(sizes, weights, biases)


# ---------------------------------------------------------------------------
# inference and post-processing


def round_half_up(x) -> np.ndarray:
    return np.floor(np.maximum(np.asarray(x, dtype=float), 0.0) + 0.5).astype(np.int64)


def predict_counts(model: MlpModel, cuboids, pose: TransceiverPose) -> np.ndarray:
    if len(cuboids) == 0:
        return np.zeros(0, dtype=np.int64)
    return round_half_up(mlp_forward(model, feature_matrix(list(cuboids), pose)))


def count_targets(cuboids, scatterers, inflate: float = 0.2) -> np.ndarray:
    """Ground-truth scatterers per cuboid (inflated); each scatterer goes to the
    nearest-centred containing cuboid, unmatched ones are dropped."""
    counts = np.zeros(len(cuboids), dtype=np.int64)
    if not len(cuboids) or not len(scatterers):
        return counts
    pts = np.array([np.asarray(getattr(s, "position", s), dtype=float) for s in scatterers])
    inside = np.array([c.contains(pts, inflate) for c in cuboids])  # (C, S)
    centers = np.array([c.center for c in cuboids])
    dist = np.linalg.norm(pts[None, :, :] - centers[:, None, :], axis=-1)
    dist = np.where(inside, dist, np.inf)
    owner = np.argmin(dist, axis=0)
    matched = np.isfinite(dist[owner, np.arange(len(pts))])
    np.add.at(counts, owner[matched], 1)
    return counts


@dataclass(frozen=True)
class VehicleEnvelope:
    length: tuple[float, float] = (3.0, 14.0)
    width: tuple[float, float] = (1.5, 3.0)
    height: tuple[float, float] = (1.2, 3.5)


def classify_cluster(cuboid: ClusterCuboid, envelope: VehicleEnvelope = VehicleEnvelope()) -> str:
    inside = (
        envelope.length[0] <= cuboid.length <= envelope.length[1]
        and envelope.width[0] <= cuboid.width <= envelope.width[1]
        and envelope.height[0] <= cuboid.height <= envelope.height[1]
    )
    return "dynamic" if inside else "static"


@dataclass(frozen=True)
class VREllipsoid:
    focus_tx: np.ndarray
    focus_rx: np.ndarray
    a: float
    c: float
    b: float
    cls: str

    def __post_init__(self):
        if self.a < self.c or self.c < 0:
            raise ValueError("need a >= c >= 0")

    @classmethod
    def from_ratio(cls, pose: TransceiverPose, ratio: float, kind: str) -> "VREllipsoid":
        c = float(np.linalg.norm(pose.rx_position - pose.tx_position)) / 2
        a = ratio * c
        return cls(pose.tx_position, pose.rx_position, a, c, math.sqrt(max(a * a - c * c, 0.0)), kind)

    def distance_sum(self, points) -> np.ndarray:
        p = np.atleast_2d(points)
        return np.linalg.norm(p - self.focus_tx, axis=1) + np.linalg.norm(p - self.focus_rx, axis=1)

    def contains(self, points) -> np.ndarray:
        return self.distance_sum(points) <= 2 * self.a


def _distance_ratios(ground_truths, kind: str) -> np.ndarray:
    out = []
    for gt in ground_truths:
        pts = [s.position for s in gt.scatterers if s.kind == kind]
        if not pts:
            continue
        c = np.linalg.norm(gt.rx - gt.tx) / 2
        pts = np.array(pts)
        sums = np.linalg.norm(pts - gt.tx, axis=1) + np.linalg.norm(pts - gt.rx, axis=1)
        out.append(sums / (2 * c))
    return np.concatenate(out) if out else np.zeros(0)


def fit_vr(ground_truths, kind: str, coverage: float = 0.95) -> float:
    """Smallest ratio a/c whose per-snapshot ellipsoids hold a ``coverage``
    fraction of the class scatterers across the given snapshots."""
    if not 0 < coverage <= 1:
        raise ValueError("coverage must be in (0, 1]")
    ratios = np.sort(_distance_ratios(ground_truths, kind))
    if len(ratios) == 0:
        raise ValueError(f"no {kind} scatterers to fit a visibility region to")
    k = math.ceil(coverage * len(ratios) - 1e-9)
    # the ratio is never below 1 (triangle inequality) up to rounding
    return max(float(ratios[max(k, 1) - 1]), 1.0)


def vr_filter(
    cuboids,
    counts,
    vr_static: VREllipsoid,
    vr_dynamic: VREllipsoid,
    pose: TransceiverPose | None = None,
    envelope: VehicleEnvelope = VehicleEnvelope(),
) -> np.ndarray:
    """Zero the count of every cluster whose centre lies outside its class VR."""
    counts = np.asarray(counts, dtype=np.int64).copy()
    if len(counts) != len(cuboids):
        raise ValueError("counts must align with cuboids")
    for k, cub in enumerate(cuboids):
        vr = vr_dynamic if classify_cluster(cub, envelope) == "dynamic" else vr_static
        if pose is not None and not (
            np.array_equal(vr.focus_tx, pose.tx_position) and np.array_equal(vr.focus_rx, pose.rx_position)
        ):
            raise ValueError("visibility region foci do not match the pose")
        if not vr.contains(cub.center)[0]:
            counts[k] = 0
    return counts


def bistatic_length(points, pose: TransceiverPose) -> np.ndarray:
    p = np.atleast_2d(points)
    return np.linalg.norm(p - pose.tx_position, axis=1) + np.linalg.norm(p - pose.rx_position, axis=1)


def assign_positions(
    cloud,
    cluster: Cluster,
    count: int,
    seed: int = 0,
    pose: TransceiverPose | None = None,
    separation: float = 1.0,
) -> np.ndarray:
    """Pick ``count`` scatterer positions among the cluster's member points.

    Without a pose the positions are a seeded draw, without replacement
    unless ``count`` exceeds the member count. With a pose, points that are
    local minima of the Tx -> point -> Rx path length (within ``separation``)
    are taken first, shortest path first, as they sit where specular
    reflection happens on each visible face; the remainder is drawn at random.
    """
    if count < 0:
        raise ValueError("count must be >= 0")
    idx = np.asarray(cluster.member_indices)
    pts = np.asarray(cloud, dtype=float)[idx]
    if count == 0 or len(pts) == 0:
        return np.zeros((0, 3))
    rng = np.random.default_rng(seed)
    if pose is None:
        pick = rng.choice(len(pts), size=count, replace=count > len(pts))
        return pts[pick]
    path = bistatic_length(pts, pose)
    order = np.argsort(path, kind="stable")
    chosen = []
    for k in order:
        if len(chosen) == count:
            break
        near = np.linalg.norm(pts - pts[k], axis=1) <= separation
        if path[k] <= path[near].min():
            chosen.append(k)
    if len(chosen) < count:
        rest = np.setdiff1d(np.arange(len(pts)), chosen)
        extra = count - len(chosen)
        if extra <= len(rest):
            chosen += list(rng.choice(rest, size=extra, replace=False))
        else:
            chosen += list(rest) + list(rng.choice(len(pts), size=extra - len(rest), replace=True))
    return pts[np.array(chosen, dtype=np.int64)]
