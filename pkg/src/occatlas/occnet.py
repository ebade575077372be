"""Conditional multi-class occupancy + SDF network, trained with manually
derived gradients and Adam (float64 by default, so the finite-difference
gradient checks in the test suite are meaningful).

Architecture:

* encoder — permutation-invariant point encoder: shared per-point layers
  3 -> 64 -> 128 -> 1024 with ReLU, symmetric max pooling to a 1024-dim
  latent. This is a single-scale stand-in for a hierarchical set-abstraction
  encoder; the module boundary (cloud -> 1024 latent) admits one as a
  drop-in.
* decoder — MLP on concat(latent, query point): widths
  1027 -> 512 -> 512 -> 512 -> [skip: 1027 + 512] -> 512 -> 512 -> 512 ->
  (C + 1 class logits, 1 signed distance). Batch normalization on hidden
  layers (train mode uses batch statistics), ReLU activations.
* loss — cross entropy on the class logits plus lambda * (d - d_hat)^2,
  lambda = 100, averaged over the query batch. SDF targets are in
  normalized units (metric distance times the cloud's normalization scale)
  so the two terms are of similar magnitude.

One training step consumes a minibatch of sensor clouds, each paired with
all of its occupancy samples; the gradient is averaged over the samples.
Minibatches must mix several clouds: with a single cloud per step the
latent is constant across the batch, batch normalization centers it away,
and the encoder receives exactly zero gradient. After training, the
batch-norm running statistics are replaced by population statistics over
the training set (the batch-norm paper's inference procedure), which also
captures the between-batch variance an exponential moving average misses.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace

import numpy as np

from .deform import random_rotation_matrix
from .sensor import SensorPointCloud, normalize_iso, point_drop
from .sortsample import TrainingPair

__all__ = [
    "OccupancyModel",
    "TrainConfig",
    "AdamState",
    "init_model",
    "encode",
    "decode",
    "loss_terms",
    "loss_and_grads",
    "train_step",
    "train_loop",
    "recalibrate_statistics",
    "classification_accuracy",
    "save_checkpoint",
    "load_checkpoint",
]

LATENT_DIM = 1024
ENCODER_WIDTHS = (3, 64, 128, LATENT_DIM)
HIDDEN = 512
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass
class TrainConfig:
    learning_rate: float = 0.0005
    lam: float = 100.0
    epochs: int = 30
    seed: int = 0
    pairs_per_batch: int = 8
    point_drop: bool = True
    rotation_augmentation: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    dtype: str = "float64"  # "float32" as a faster, non-gradient-checkable option
    target_accuracy: float | None = None  # early stop when reached
    accuracy_check_interval: int = 1  # epochs between early-stop accuracy checks

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValueError("lambda must be >= 0")
        if not self.learning_rate >= 0:
            raise ValueError("learning rate must be >= 0")
        if self.pairs_per_batch < 1:
            raise ValueError("pairs_per_batch must be >= 1")
        if self.accuracy_check_interval < 1:
            raise ValueError("accuracy_check_interval must be >= 1")


@dataclass
class OccupancyModel:
    """Parameters plus batch-norm running statistics and the class count."""

    params: dict[str, np.ndarray]
    bn_mean: dict[int, np.ndarray]
    bn_var: dict[int, np.ndarray]
    num_classes: int
    seed: int = 0

    @property
    def num_outputs(self) -> int:
        # C structure classes + 1 None class + 1 signed-distance scalar.
        return self.num_classes + 2


def init_model(num_classes: int, seed: int = 0, dtype=np.float64) -> OccupancyModel:
    """He-initialized weights, zero biases, unit batch-norm scale.

    The output layer is scaled down by 100x so the network starts from
    near-uniform logits and a near-zero distance estimate. With the heavy
    distance-loss weight, an O(1) random initial distance head otherwise
    swamps the shared trunk's gradients for hundreds of steps before
    classification can start learning.
    """
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}

    def he(n_in, n_out):
        return rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_in, n_out)).astype(dtype)

    for i in range(3):
        params[f"enc.W{i + 1}"] = he(ENCODER_WIDTHS[i], ENCODER_WIDTHS[i + 1])
        params[f"enc.b{i + 1}"] = np.zeros(ENCODER_WIDTHS[i + 1], dtype=dtype)

    in_dim = LATENT_DIM + 3
    widths = [in_dim, HIDDEN, HIDDEN, HIDDEN, HIDDEN, HIDDEN, HIDDEN, num_classes + 2]
    for i in range(7):
        fan_in = widths[i] if i != 3 else in_dim + HIDDEN  # skip connection
        scale = 0.01 if i == 6 else 1.0
        params[f"dec.W{i + 1}"] = scale * he(fan_in, widths[i + 1])
        params[f"dec.b{i + 1}"] = np.zeros(widths[i + 1], dtype=dtype)
    for i in range(1, 7):
        params[f"dec.g{i}"] = np.ones(HIDDEN, dtype=dtype)
        params[f"dec.beta{i}"] = np.zeros(HIDDEN, dtype=dtype)

    bn_mean = {i: np.zeros(HIDDEN, dtype=dtype) for i in range(1, 7)}
    bn_var = {i: np.ones(HIDDEN, dtype=dtype) for i in range(1, 7)}
    return OccupancyModel(params, bn_mean, bn_var, num_classes, seed)


# ---------------------------------------------------------------------------
# Forward passes


def encode(params: dict, points: np.ndarray, want_cache: bool = False):
    """Point cloud (P, 3) -> latent (1024,). Exactly permutation invariant
    because max pooling is symmetric."""
    pts = np.atleast_2d(np.asarray(points))
    if len(pts) == 0:
        raise ValueError("cannot encode an empty cloud")
    z1 = pts @ params["enc.W1"] + params["enc.b1"]
    a1 = np.maximum(z1, 0.0)
    z2 = a1 @ params["enc.W2"] + params["enc.b2"]
    a2 = np.maximum(z2, 0.0)
    z3 = a2 @ params["enc.W3"] + params["enc.b3"]
    arg = np.argmax(z3, axis=0)
    latent = z3[arg, np.arange(z3.shape[1])]
    if not want_cache:
        return latent
    return latent, {"pts": pts, "z1": z1, "a1": a1, "z2": z2, "a2": a2, "arg": arg}


def _bn_forward(z, gamma, beta, mean, var):
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    x_hat = (z - mean) * inv_std
    return gamma * x_hat + beta, x_hat, inv_std


def decode(
    model: OccupancyModel,
    latent: np.ndarray,
    queries: np.ndarray,
    train: bool = False,
    want_cache: bool = False,
    update_running: bool = False,
):
    """(latent, query points (B, 3)) -> (class logits (B, C+1), sdf (B,)).

    `latent` is one 1024-vector shared by all queries or a (B, 1024) array
    with one latent row per query. Train mode normalizes with batch
    statistics (and optionally updates the running statistics in place);
    eval mode uses the running statistics.
    """
    p = model.params
    queries = np.atleast_2d(np.asarray(queries))
    b = len(queries)
    latent = np.asarray(latent)
    lat_rows = np.broadcast_to(latent, (b, LATENT_DIM)) if latent.ndim == 1 else latent
    x0 = np.concatenate([lat_rows, queries], axis=1)

    cache = {"x0": x0, "layers": []}
    x = x0
    for i in range(1, 7):
        if i == 4:
            x = np.concatenate([x0, x], axis=1)
        z = x @ p[f"dec.W{i}"] + p[f"dec.b{i}"]
        if train:
            mean = z.mean(axis=0)
            var = z.var(axis=0)
            if update_running:
                model.bn_mean[i] = (1 - BN_MOMENTUM) * model.bn_mean[i] + BN_MOMENTUM * mean
                model.bn_var[i] = (1 - BN_MOMENTUM) * model.bn_var[i] + BN_MOMENTUM * var
        else:
            mean, var = model.bn_mean[i], model.bn_var[i]
        zn, x_hat, inv_std = _bn_forward(z, p[f"dec.g{i}"], p[f"dec.beta{i}"], mean, var)
        a = np.maximum(zn, 0.0)
        cache["layers"].append({"x_in": x, "x_hat": x_hat, "inv_std": inv_std, "zn": zn})
        x = a
    out = x @ p["dec.W7"] + p["dec.b7"]
    logits = out[:, : model.num_classes + 1]
    sdf = out[:, model.num_classes + 1]
    if not want_cache:
        return logits, sdf
    cache["a6"] = x
    cache["train"] = train
    return logits, sdf, cache


def loss_terms(logits, sdf_pred, labels, sdf_target, lam):
    """(total, ce term, distance term), all batch means. The total is affine
    in lambda for fixed predictions: L(lam) = ce + lam * mean((d - d_hat)^2)."""
    logits = np.atleast_2d(logits)
    labels = np.asarray(labels, dtype=np.int64)
    # Poisoned inputs (inf/nan parameters) must surface as a non-finite loss
    # for the caller's finiteness check, not as numpy warnings here.
    with np.errstate(invalid="ignore", over="ignore"):
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_z = np.log(np.exp(shifted).sum(axis=1))
        ce = float(np.mean(log_z - shifted[np.arange(len(labels)), labels]))
        dist = float(np.mean((np.asarray(sdf_pred) - np.asarray(sdf_target)) ** 2))
    return ce + lam * dist, ce, dist


# ---------------------------------------------------------------------------
# Backward pass


def _bn_backward(d_zn, layer, gamma):
    """Batch-norm backward for batch-statistics mode (biased variance)."""
    x_hat, inv_std = layer["x_hat"], layer["inv_std"]
    d_gamma = (d_zn * x_hat).sum(axis=0)
    d_beta = d_zn.sum(axis=0)
    d_xhat = d_zn * gamma
    d_z = inv_std * (
        d_xhat - d_xhat.mean(axis=0) - x_hat * (d_xhat * x_hat).mean(axis=0)
    )
    return d_z, d_gamma, d_beta


def loss_and_grads(
    model: OccupancyModel,
    batch: list[tuple],
    lam: float,
    update_running: bool = False,
):
    """Full forward + manual backward in train mode.

    `batch` is a list of (cloud_points, queries, labels, sdf_targets)
    segments, one per sensor cloud; each cloud's latent conditions its own
    queries and the loss is averaged over all queries of the batch. Returns
    (total, ce, dist, grads). Gradients are exact derivatives of the
    train-mode loss, verified elsewhere against central finite differences.
    """
    p = model.params
    dtype = p["dec.W1"].dtype  # keep the whole pass in the model's precision
    latents, enc_caches, counts = [], [], []
    q_parts, l_parts, s_parts = [], [], []
    for cloud_points, seg_q, seg_l, seg_s in batch:
        latent, enc_cache = encode(
            p, np.asarray(cloud_points, dtype=dtype), want_cache=True
        )
        latents.append(latent)
        enc_caches.append(enc_cache)
        seg_q = np.atleast_2d(np.asarray(seg_q, dtype=dtype))
        counts.append(len(seg_q))
        q_parts.append(seg_q)
        l_parts.append(np.asarray(seg_l))
        s_parts.append(np.asarray(seg_s, dtype=dtype))
    queries = np.concatenate(q_parts)
    labels = np.concatenate(l_parts)
    sdf_targets = np.concatenate(s_parts)
    lat_rows = np.repeat(np.stack(latents), counts, axis=0)

    logits, sdf_pred, cache = decode(
        model, lat_rows, queries, train=True, want_cache=True, update_running=update_running
    )
    total, ce, dist = loss_terms(logits, sdf_pred, labels, sdf_targets, lam)
    if not np.isfinite(total):
        # The caller aborts on a non-finite loss; skip the backward pass so
        # the NaNs do not cascade through every layer as numpy warnings.
        return total, ce, dist, {k: np.zeros_like(v) for k, v in p.items()}

    b = len(queries)
    labels = np.asarray(labels, dtype=np.int64)
    grads: dict[str, np.ndarray] = {}

    # Output head. errstate: see loss_terms (non-finite inputs are reported
    # through the loss value, not numpy warnings).
    with np.errstate(invalid="ignore", over="ignore"):
        shifted = logits - logits.max(axis=1, keepdims=True)
        exp = np.exp(shifted)
        softmax = exp / exp.sum(axis=1, keepdims=True)
    d_logits = softmax
    d_logits[np.arange(b), labels] -= 1.0
    d_logits /= b
    d_sdf = (2.0 * lam / b) * (sdf_pred - sdf_targets)
    d_out = np.concatenate([d_logits, d_sdf[:, None]], axis=1)

    a6 = cache["a6"]
    grads["dec.W7"] = a6.T @ d_out
    grads["dec.b7"] = d_out.sum(axis=0)
    d_a = d_out @ p["dec.W7"].T

    d_x0 = np.zeros_like(cache["x0"])
    for i in range(6, 0, -1):
        layer = cache["layers"][i - 1]
        d_zn = d_a * (layer["zn"] > 0)
        d_z, d_gamma, d_beta = _bn_backward(d_zn, layer, p[f"dec.g{i}"])
        grads[f"dec.g{i}"] = d_gamma
        grads[f"dec.beta{i}"] = d_beta
        x_in = layer["x_in"]
        grads[f"dec.W{i}"] = x_in.T @ d_z
        grads[f"dec.b{i}"] = d_z.sum(axis=0)
        d_x = d_z @ p[f"dec.W{i}"].T
        if i == 4:
            d_x0 += d_x[:, : LATENT_DIM + 3]
            d_a = d_x[:, LATENT_DIM + 3 :]
        else:
            d_a = d_x
    d_x0 += d_a  # gradient reaching layer-1 input

    # Per-cloud latent gradients, then through each encoder separately.
    for key in ("enc.W1", "enc.b1", "enc.W2", "enc.b2", "enc.W3", "enc.b3"):
        grads[key] = np.zeros_like(p[key])
    row = 0
    for enc_cache, count in zip(enc_caches, counts):
        d_latent = d_x0[row : row + count, :LATENT_DIM].sum(axis=0)
        row += count
        # Through the max pool: gradient flows to the argmax point per feature.
        pts, arg = enc_cache["pts"], enc_cache["arg"]
        d_z3 = np.zeros((len(pts), LATENT_DIM), dtype=d_latent.dtype)
        d_z3[arg, np.arange(LATENT_DIM)] = d_latent
        grads["enc.W3"] += enc_cache["a2"].T @ d_z3
        grads["enc.b3"] += d_z3.sum(axis=0)
        d_a2 = d_z3 @ p["enc.W3"].T
        d_z2 = d_a2 * (enc_cache["z2"] > 0)
        grads["enc.W2"] += enc_cache["a1"].T @ d_z2
        grads["enc.b2"] += d_z2.sum(axis=0)
        d_a1 = d_z2 @ p["enc.W2"].T
        d_z1 = d_a1 * (enc_cache["z1"] > 0)
        grads["enc.W1"] += pts.T @ d_z1
        grads["enc.b1"] += d_z1.sum(axis=0)
    return total, ce, dist, grads


# ---------------------------------------------------------------------------
# Optimization


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    def step(self, params, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.t += 1
        for key, g in grads.items():
            if key not in self.m:
                self.m[key] = np.zeros_like(params[key])
                self.v[key] = np.zeros_like(params[key])
            self.m[key] = beta1 * self.m[key] + (1 - beta1) * g
            self.v[key] = beta2 * self.v[key] + (1 - beta2) * g * g
            m_hat = self.m[key] / (1 - beta1**self.t)
            v_hat = self.v[key] / (1 - beta2**self.t)
            params[key] = params[key] - lr * m_hat / (np.sqrt(v_hat) + eps)


class NonFiniteLossError(RuntimeError):
    pass


def train_step(
    model: OccupancyModel,
    adam: AdamState,
    batch: list[tuple],
    config: TrainConfig,
):
    """One Adam update over a batch of (cloud, queries, labels, sdf)
    segments. Returns the loss terms computed before the update."""
    total, ce, dist, grads = loss_and_grads(
        model, batch, config.lam, update_running=True
    )
    if not np.isfinite(total):
        raise NonFiniteLossError(
            f"non-finite loss at step {adam.t + 1}: total={total} ce={ce} dist={dist}"
        )
    adam.step(
        model.params, grads, config.learning_rate, config.beta1, config.beta2, config.eps
    )
    return total, ce, dist


def prepare_pair(
    pair: TrainingPair, rng: np.random.Generator, config: TrainConfig
):
    """Per-example augmentation + joint normalization.

    Rotation is applied to cloud and samples together, then both are mapped
    by the cloud's isotropic normalization; SDF targets are scaled into
    normalized units. Point drop runs last (after normalization).
    """
    cloud_pts = pair.cloud.points
    positions = pair.positions
    if config.rotation_augmentation:
        rot = random_rotation_matrix(rng)
        cloud_pts = cloud_pts @ rot.T
        positions = positions @ rot.T
    cloud, norm = normalize_iso(SensorPointCloud(cloud_pts))
    queries = norm.apply(positions)
    sdf_targets = pair.sdf * norm.scale
    if config.point_drop:
        cloud = point_drop(cloud, rng)
    return cloud.points, queries, pair.labels, sdf_targets


def train_loop(
    pairs: list[TrainingPair],
    config: TrainConfig,
    num_classes: int | None = None,
    trace_path=None,
    checkpoint_path=None,
    model: OccupancyModel | None = None,
    adam: AdamState | None = None,
):
    """Train over the pair dataset. Returns (model, trace) where trace rows
    are (step, ce, dist, total). Reproducible per config seed."""
    if not pairs:
        raise ValueError("empty training dataset")
    if num_classes is None:
        num_classes = max(p.num_classes for p in pairs)
    dtype = np.float64 if config.dtype == "float64" else np.float32
    if model is None:
        model = init_model(num_classes, seed=config.seed, dtype=dtype)
    adam = adam or AdamState()
    rng = np.random.default_rng(config.seed + 1)
    trace: list[tuple[int, float, float, float]] = []
    step = adam.t
    g = config.pairs_per_batch
    for epoch in range(config.epochs):
        order = rng.permutation(len(pairs))
        for start in range(0, len(order), g):
            batch = [
                prepare_pair(pairs[idx], rng, config) for idx in order[start : start + g]
            ]
            total, ce, dist = train_step(model, adam, batch, config)
            step += 1
            trace.append((step, ce, dist, total))
        if (
            config.target_accuracy is not None
            and (epoch + 1) % config.accuracy_check_interval == 0
        ):
            recalibrate_statistics(model, pairs, config)
            if classification_accuracy(model, pairs) >= config.target_accuracy:
                break
    recalibrate_statistics(model, pairs, config)
    if trace_path is not None:
        write_trace(trace, trace_path)
    if checkpoint_path is not None:
        save_checkpoint(model, checkpoint_path)
    return model, trace


def recalibrate_statistics(
    model: OccupancyModel, pairs: list[TrainingPair], config: TrainConfig | None = None
) -> None:
    """Replace the batch-norm running statistics with population statistics.

    Runs deterministic, augmentation-free train-mode forwards over the whole
    dataset (grouped like training) and aggregates the first two moments of
    every pre-normalization activation. Unlike the momentum-based running
    average, the population variance includes the between-batch variance of
    the means, so eval-mode activations stay in the regime the network was
    trained in.
    """
    g = config.pairs_per_batch if config is not None else 8
    p = model.params
    dtype = p["dec.W1"].dtype
    sums = {i: np.zeros(HIDDEN) for i in range(1, 7)}
    sq_sums = {i: np.zeros(HIDDEN) for i in range(1, 7)}
    count = 0
    for start in range(0, len(pairs), g):
        group = pairs[start : start + g]
        lat_parts, q_parts = [], []
        for pair in group:
            cloud, norm = normalize_iso(pair.cloud)
            lat_parts.append(encode(p, cloud.points.astype(dtype)))
            q_parts.append(norm.apply(pair.positions).astype(dtype))
        counts = [len(q) for q in q_parts]
        lat_rows = np.repeat(np.stack(lat_parts), counts, axis=0)
        queries = np.concatenate(q_parts)
        b = len(queries)
        x0 = np.concatenate([lat_rows, queries], axis=1)
        x = x0
        for i in range(1, 7):
            if i == 4:
                x = np.concatenate([x0, x], axis=1)
            z = x @ p[f"dec.W{i}"] + p[f"dec.b{i}"]
            sums[i] += z.sum(axis=0)
            sq_sums[i] += (z * z).sum(axis=0)
            zn, _, _ = _bn_forward(
                z, p[f"dec.g{i}"], p[f"dec.beta{i}"], z.mean(axis=0), z.var(axis=0)
            )
            x = np.maximum(zn, 0.0)
        count += b
    for i in range(1, 7):
        mean = sums[i] / count
        model.bn_mean[i] = mean
        model.bn_var[i] = np.maximum(sq_sums[i] / count - mean * mean, 0.0)


def write_trace(trace, path, append=False):
    mode = "a" if append else "w"
    with open(path, mode, newline="") as f:
        writer = csv.writer(f)
        if not append:
            writer.writerow(["step", "ce", "sdf", "total"])
        for step, ce, dist, total in trace:
            writer.writerow([step, repr(ce), repr(dist), repr(total)])


def classification_accuracy(model: OccupancyModel, pairs: list[TrainingPair]) -> float:
    """Eval-mode argmax accuracy over all occupancy samples (no augment)."""
    correct = 0
    count = 0
    dtype = model.params["dec.W1"].dtype
    for pair in pairs:
        cloud, norm = normalize_iso(pair.cloud)
        latent = encode(model.params, cloud.points.astype(dtype))
        logits, _ = decode(
            model, latent, norm.apply(pair.positions).astype(dtype), train=False
        )
        correct += int((np.argmax(logits, axis=1) == pair.labels).sum())
        count += len(pair.labels)
    return correct / count


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(model: OccupancyModel, path) -> None:
    """One-line JSON manifest (shapes, class count, seed) + little-endian
    float64 blob holding parameters then running statistics, manifest order."""
    param_keys = sorted(model.params)
    manifest = {
        "num_classes": model.num_classes,
        "seed": model.seed,
        "params": {k: list(model.params[k].shape) for k in param_keys},
        "bn_layers": sorted(model.bn_mean),
        "normalization": "isotropic [-1,1]^3, sdf in normalized units",
    }
    with open(path, "wb") as f:
        f.write(json.dumps(manifest, sort_keys=True).encode("utf-8"))
        f.write(b"\n")
        for k in param_keys:
            f.write(np.asarray(model.params[k], dtype="<f8").tobytes())
        for i in manifest["bn_layers"]:
            f.write(np.asarray(model.bn_mean[i], dtype="<f8").tobytes())
            f.write(np.asarray(model.bn_var[i], dtype="<f8").tobytes())


def load_checkpoint(path) -> OccupancyModel:
    with open(path, "rb") as f:
        manifest = json.loads(f.readline().decode("utf-8"))
        params = {}
        for k in sorted(manifest["params"]):
            shape = tuple(manifest["params"][k])
            n = int(np.prod(shape)) if shape else 1
            params[k] = np.frombuffer(f.read(n * 8), dtype="<f8").reshape(shape).copy()
        bn_mean, bn_var = {}, {}
        for i in manifest["bn_layers"]:
            bn_mean[i] = np.frombuffer(f.read(HIDDEN * 8), dtype="<f8").copy()
            bn_var[i] = np.frombuffer(f.read(HIDDEN * 8), dtype="<f8").copy()
    return OccupancyModel(
        params, bn_mean, bn_var, manifest["num_classes"], manifest["seed"]
    )
