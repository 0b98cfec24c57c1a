"""Background-patch removal: conv autoencoder codes clustered by 2-means.

The autoencoder works at 128x128x3.  Larger patches are area-downsampled
first.  Its encoder is conv(8)+pool4, conv(4)+pool4, which gives an 8x8x4
bottleneck, i.e. a 256-long code.  The decoder mirrors it with
nearest-neighbour upsampling and ends in a sigmoid conv back to 3 channels.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from . import tensor_nn as nn
from .bundle import ModelBundle
from .errors import AmbiguityError, ArgumentError, DegenerateInputError, DimensionError

log = logging.getLogger(__name__)

AE_INPUT = 128
KMEANS_MAX_ITER = 300
AMBIGUITY_GAP = 1e-3


def _conv(name, cin, cout, activation):
    return {"type": "conv", "name": name, "in_channels": cin, "out_channels": cout,
            "kernel": 3, "padding": 1, "stride": 1, "activation": activation}


ENCODER = [
    _conv("enc1", 3, 8, "relu"),
    {"type": "maxpool", "name": "enc_pool1", "window": 4},
    _conv("enc2", 8, 4, "relu"),
    {"type": "maxpool", "name": "enc_pool2", "window": 4},
]
DECODER = [
    {"type": "upsample", "name": "dec_up1", "factor": 4},
    _conv("dec1", 4, 8, "relu"),
    {"type": "upsample", "name": "dec_up2", "factor": 4},
    _conv("dec2", 8, 3, "sigmoid"),
]


@dataclass
class AutoencoderModel:
    bundle: ModelBundle

    @property
    def n_encoder(self) -> int:
        return int(self.bundle.train_config.get("n_encoder_layers", len(ENCODER)))

    @property
    def encoder(self):
        return self.bundle.layers[:self.n_encoder]

    @property
    def decoder(self):
        return self.bundle.layers[self.n_encoder:]

    @property
    def input_shape(self):
        return self.bundle.input_shape

    @property
    def code_shape(self):
        return self.bundle.shapes()[self.n_encoder - 1]

    @property
    def bottleneck_dim(self) -> int:
        return int(np.prod(self.code_shape))

    @property
    def weights(self):
        return self.bundle.weights


def build_autoencoder(seed=0) -> AutoencoderModel:
    layers = [dict(l) for l in ENCODER + DECODER]
    weights = nn.init_params(layers, np.random.default_rng(seed))
    b = ModelBundle("autoencoder", layers, weights, [], (AE_INPUT, AE_INPUT, 3),
                    {"init_seed": int(seed), "n_encoder_layers": len(ENCODER)})
    return AutoencoderModel(b)


def resize_area(patches, size=AE_INPUT) -> np.ndarray:
    """Area-average ``(N, H, W, 3)`` (or one ``(H, W, 3)``) patches down to ``size``."""
    x = np.asarray(patches, dtype=np.float32)
    single = x.ndim == 3
    if single:
        x = x[None]
    n, h, w, c = x.shape
    if (h, w) == (size, size):
        out = x
    elif h % size == 0 and w % size == 0:
        out = x.reshape(n, size, h // size, size, w // size, c).mean(axis=(2, 4))
    else:
        out = np.empty((n, size, size, c), np.float32)
        for i in range(n):
            for ch in range(c):
                im = Image.fromarray(np.ascontiguousarray(x[i, :, :, ch]), mode="F")
                out[i, :, :, ch] = np.asarray(im.resize((size, size), Image.BOX))
    out = out.astype(np.float32, copy=False)
    return out[0] if single else out


def _check_input(x, model: AutoencoderModel):
    x = np.asarray(x, dtype=np.float32)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or x.shape[1:] != model.input_shape:
        raise DimensionError(
            f"autoencoder expects {model.input_shape} patches, got {x.shape[1:] if x.ndim == 4 else x.shape}"
            "; resize with resize_area first")
    return x, single


def encode_batch(patches, model: AutoencoderModel, batch_size=64) -> np.ndarray:
    x, _ = _check_input(patches, model)
    out = np.empty((x.shape[0], model.bottleneck_dim), np.float32)
    for s in range(0, x.shape[0], batch_size):
        z, _ = nn.forward(model.encoder, model.weights, x[s:s + batch_size])
        out[s:s + batch_size] = z.reshape(z.shape[0], -1)
    return out


def encode(patch, model: AutoencoderModel) -> np.ndarray:
    """One ``(128, 128, 3)`` patch -> bottleneck vector of length ``bottleneck_dim``."""
    x, single = _check_input(patch, model)
    if not single:
        raise DimensionError("encode takes a single patch; use encode_batch")
    return encode_batch(x, model)[0]


def decode(code, model: AutoencoderModel) -> np.ndarray:
    code = np.asarray(code, dtype=np.float32)
    single = code.ndim == 1
    if single:
        code = code[None]
    if code.shape[-1] != model.bottleneck_dim:
        raise DimensionError(f"code length {code.shape[-1]} != bottleneck {model.bottleneck_dim}")
    z = code.reshape((code.shape[0],) + tuple(model.code_shape))
    out, _ = nn.forward(model.decoder, model.weights, z)
    return out[0] if single else out


def reconstruct(patches, model: AutoencoderModel) -> np.ndarray:
    x, single = _check_input(patches, model)
    out, _ = nn.forward(model.bundle.layers, model.weights, x)
    return out[0] if single else out


def reconstruction_mse(patches, model: AutoencoderModel, batch_size=64) -> float:
    x, _ = _check_input(patches, model)
    total = 0.0
    for s in range(0, x.shape[0], batch_size):
        r, _ = nn.forward(model.bundle.layers, model.weights, x[s:s + batch_size])
        total += float(np.sum((r.astype(np.float64) - x[s:s + batch_size]) ** 2))
    return total / x.size


def train_autoencoder(patches, epochs=10, seed=0, batch_size=32, alpha=1e-3, model=None):
    """Fit the autoencoder by minibatch Adam on mean squared reconstruction error.

    ``patches`` of any square size are area-resized to 128 first.  Returns
    ``(model, history)``; ``history`` has ``initial_loss`` (before any update)
    and the mean training ``loss`` of each epoch.
    """
    x = np.asarray(patches, dtype=np.float32)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[0] == 0:
        raise ArgumentError("train_autoencoder needs at least one patch")
    x = resize_area(x, AE_INPUT)
    model = model or build_autoencoder(seed)
    layers, params = model.bundle.layers, model.weights
    rng = np.random.default_rng(seed)
    state = nn.AdamState(alpha=alpha)
    history = {"initial_loss": reconstruction_mse(x, model), "loss": []}
    n = x.shape[0]
    for _ in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, batch_size):
            xb = x[order[s:s + batch_size]]
            out, caches = nn.forward(layers, params, xb, training=True, rng=rng)
            diff = out - xb
            total += float(np.sum(diff.astype(np.float64) ** 2))
            grads, _ = nn.backward(layers, params, caches, (2.0 / diff.size) * diff)
            nn.adam_step(params, grads, state)
        history["loss"].append(total / x.size)
    model.bundle.train_config.update({
        "epochs": int(epochs), "seed": int(seed), "batch_size": int(batch_size),
        "alpha": float(alpha), "final_loss": history["loss"][-1] if history["loss"] else None})
    return model, history


# ---------------------------------------------------------------------------
# 2-means
# ---------------------------------------------------------------------------

@dataclass
class KMeansState:
    centroids: np.ndarray  # (2, D)
    assignments: np.ndarray  # (N,) in {0, 1}
    xi: float
    iterations: int
    xi_history: list = field(default_factory=list)
    reseeds: int = 0


def _sq_dists(points, centroids):
    return ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)


def _objective(points, centroids, assign):
    return float(((points - centroids[assign]) ** 2).sum())


def _update_centroids(points, assign, centroids):
    """Mean of each cluster; an empty cluster moves to the point farthest from the other centroid."""
    new = centroids.copy()
    reseeded = 0
    for j in (0, 1):
        members = assign == j
        if members.any():
            new[j] = points[members].mean(axis=0)
    for j in (0, 1):
        if not (assign == j).any():
            other = new[1 - j]
            far = int(np.argmax(((points - other) ** 2).sum(axis=1)))
            new[j] = points[far]
            reseeded += 1
    return new, reseeded


def _lloyd(points, rng, max_iter=KMEANS_MAX_ITER):
    n = points.shape[0]
    i, j = rng.choice(n, size=2, replace=False)
    if np.array_equal(points[i], points[j]):
        j = int(np.argmax(((points - points[i]) ** 2).sum(axis=1)))
    centroids = points[[i, j]].astype(np.float64)
    assign = np.argmin(_sq_dists(points, centroids), axis=1)  # ties -> cluster 0
    xi = _objective(points, centroids, assign)
    history = [xi]
    reseeds = 0
    it = 0
    while it < max_iter:
        it += 1
        centroids, r = _update_centroids(points, assign, centroids)
        reseeds += r
        new_assign = np.argmin(_sq_dists(points, centroids), axis=1)
        new_xi = _objective(points, centroids, new_assign)
        history.append(new_xi)
        stable = np.array_equal(new_assign, assign)
        assign, xi = new_assign, new_xi
        # A fixed assignment means zero further decrease, and the returned
        # centroids are then exactly the means of the returned clusters.
        if stable:
            break
    return KMeansState(centroids, assign, xi, it, history, reseeds)


def restart_seeds(seed, n_init):
    return np.random.SeedSequence(seed).spawn(n_init)


def kmeans2(points, seed=0, n_init=10, allow_degenerate=False, max_iter=KMEANS_MAX_ITER) -> KMeansState:
    """Lloyd's 2-means with squared Euclidean distance and seeded restarts.

    Each restart draws two distinct starting points from its own child seed of
    ``seed``.  The run with the lowest final objective wins and earlier
    restarts win ties.  Fewer than two distinct points raise
    DegenerateInputError unless ``allow_degenerate`` is set.  In that case the
    result has one populated cluster and ``xi == 0``.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points[:, None]
    if points.ndim != 2 or points.shape[0] < 2:
        raise DegenerateInputError("2-means needs at least two points")
    if not np.all(np.isfinite(points)):
        raise ArgumentError("points contain NaN or inf")
    distinct = np.unique(points, axis=0).shape[0]
    if distinct < 2 and not allow_degenerate:
        raise DegenerateInputError("2-means needs at least two distinct points")
    best = None
    for child in restart_seeds(seed, n_init):
        st = _lloyd(points, np.random.default_rng(child), max_iter)
        if best is None or st.xi < best.xi:
            best = st
    return best


# ---------------------------------------------------------------------------
# Cluster decision
# ---------------------------------------------------------------------------

@dataclass
class ClusterDecision:
    useful_cluster: int
    mean_luminance: list
    criterion: str = "lower mean luminance (R+G+B)/3"
    overridden: bool = False


def luminance(patches) -> np.ndarray:
    x = np.asarray(patches, dtype=np.float64)
    return x.mean(axis=(-3, -2, -1))


def select_useful_cluster(patches, state: KMeansState, override=None) -> ClusterDecision:
    """The darker cluster is tissue, the brighter one white or gray background.

    ``override`` (0 or 1) forces the choice and is the only way past an
    AmbiguityError when the two luminance means are within 1e-3.
    """
    lum = luminance(patches)
    if lum.shape[0] != state.assignments.shape[0]:
        raise DimensionError(f"{lum.shape[0]} patches but {state.assignments.shape[0]} assignments")
    means = [float(lum[state.assignments == j].mean()) if (state.assignments == j).any()
             else float("nan") for j in (0, 1)]
    if override is not None:
        if override not in (0, 1):
            raise ArgumentError("override must be 0 or 1")
        return ClusterDecision(int(override), means, "manual override", True)
    if np.isnan(means[0]) or np.isnan(means[1]):
        useful = 0 if np.isnan(means[1]) else 1
        log.warning("one cluster is empty; keeping every patch")
        return ClusterDecision(useful, means, "single populated cluster")
    if abs(means[0] - means[1]) < AMBIGUITY_GAP:
        raise AmbiguityError(
            f"cluster luminance means {means[0]:.6f} and {means[1]:.6f} differ by less than "
            f"{AMBIGUITY_GAP}; pass an explicit useful-cluster override")
    return ClusterDecision(int(np.argmin(means)), means)


def filter_patches(model: AutoencoderModel, patches, seed=0, override=None):
    """Encode, cluster and decide.  Returns ``(useful_mask, state, decision)``."""
    small = resize_area(patches, model.input_shape[0])
    codes = encode_batch(small, model)
    state = kmeans2(codes, seed=seed)
    decision = select_useful_cluster(small, state, override)
    return state.assignments == decision.useful_cluster, state, decision


def apply_to_records(records, useful_mask):
    """Set each record's ``cluster`` field in place."""
    if len(records) != len(useful_mask):
        raise DimensionError("records and mask differ in length")
    for rec, keep in zip(records, useful_mask):
        rec.cluster = "useful" if keep else "not_useful"
    return records
