"""Desk-scale model, synthetic dataset and deterministic data assignment.

Parameters are plain ``dict[str, np.ndarray]`` mappings (insertion ordered),
the same shape as a framework ``state_dict``. Gradients and decoded
pseudo-gradients use the same structure.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

Params = dict[str, np.ndarray]

# Tags mixed into seed sequences so that independent streams never collide.
_INIT_TAG = 0x1
_DATA_TAG = 0x2
_PERM_TAG = 0x3
_RAND_TAG = 0x4


class ConfigError(ValueError):
    """Invalid configuration value."""


class StructureError(ValueError):
    """Tensor names or shapes do not match the model structure."""


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 8
    hidden_dim: int = 16
    num_classes: int = 4
    init_seed: int = 0

    def __post_init__(self):
        for name in ("input_dim", "hidden_dim", "num_classes"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value <= 0:
                raise ConfigError(f"model.{name} must be a positive integer, got {value!r}")

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {
            "w1": (self.input_dim, self.hidden_dim),
            "b1": (self.hidden_dim,),
            "w2": (self.hidden_dim, self.num_classes),
            "b2": (self.num_classes,),
        }


def init_model(config: ModelConfig) -> Params:
    """Hidden layer ~ Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)), one Philox stream
    per tensor; the output layer starts at zero so the initial softmax is uniform."""
    theta: Params = {}
    for i, (name, shape) in enumerate(config.shapes().items()):
        if name in ("w2", "b2"):
            theta[name] = np.zeros(shape)
            continue
        bound = 1.0 / np.sqrt(config.input_dim)
        bitgen = np.random.Philox(key=[config.init_seed & 0xFFFFFFFFFFFFFFFF, (_INIT_TAG << 32) | i])
        theta[name] = np.random.Generator(bitgen).uniform(-bound, bound, size=shape)
    return theta


def zeros_like(theta: Params) -> Params:
    return {name: np.zeros_like(t) for name, t in theta.items()}


def check_compatible(a: Params, b: Params | dict[str, tuple[int, ...]]) -> None:
    """Raise StructureError unless names and shapes match element-wise, in order."""
    shapes_b = [(n, tuple(v) if isinstance(v, tuple) else v.shape) for n, v in b.items()]
    shapes_a = [(n, v.shape) for n, v in a.items()]
    if shapes_a != shapes_b:
        raise StructureError(f"incompatible structures: {shapes_a} vs {shapes_b}")


def copy_params(theta: Params) -> Params:
    return {name: t.copy() for name, t in theta.items()}


def flatten(theta: Params) -> np.ndarray:
    return np.concatenate([t.ravel() for t in theta.values()])


# --------------------------------------------------------------------------- data


@dataclass(frozen=True)
class DataShard:
    features: np.ndarray
    labels: np.ndarray
    indices: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    def __post_init__(self):
        if len(self.labels) == 0:
            raise ConfigError("data shard must be non-empty")
        if self.features.ndim != 2 or self.features.shape[0] != len(self.labels):
            raise StructureError("features must be a 2-D array with one row per label")

    def __len__(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class DataConfig:
    seed: int = 0
    num_examples: int = 4096
    holdout_examples: int = 1024
    shard_size: int = 32
    class_separation: float = 1.0
    label_noise: float = 0.05


class Dataset:
    """Gaussian-mixture classification data, one component per class.

    Generated once from ``DataConfig.seed``. ``holdout`` is a disjoint sample
    from the same mixture used for the validator's probe loss.
    """

    def __init__(self, model_config: ModelConfig, config: DataConfig | None = None):
        self.model_config = model_config
        self.config = config = config or DataConfig()
        if config.num_examples <= 0 or config.shard_size <= 0:
            raise ConfigError("data.num_examples and data.shard_size must be positive")
        rng = np.random.default_rng([config.seed, _DATA_TAG])
        d, c = model_config.input_dim, model_config.num_classes
        self.means = rng.normal(0.0, config.class_separation, size=(c, d))
        total = config.num_examples + config.holdout_examples
        labels = rng.integers(0, c, size=total)
        features = self.means[labels] + rng.normal(0.0, 1.0, size=(total, d))
        flip = rng.random(total) < config.label_noise
        labels = np.where(flip, rng.integers(0, c, size=total), labels)
        n = config.num_examples
        self.features, self.labels = features[:n], labels[:n]
        self.holdout = DataShard(features[n:], labels[n:], np.arange(n, total))

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, indices) -> DataShard:
        indices = np.asarray(indices, dtype=np.int64)
        return DataShard(self.features[indices], self.labels[indices], indices)


class DataPool:
    """Per-round assignment of disjoint shards to registered peers.

    Each round a seeded permutation of example indices is drawn; peer ``p``
    owns positions ``[p*s, (p+1)*s)``. Positions past ``num_peers*s`` form the
    round's unassigned pool, from which the random evaluation batch is drawn.
    """

    def __init__(self, dataset: Dataset, num_peers: int, shard_size: int | None = None):
        self.dataset = dataset
        self.num_peers = num_peers
        self.shard_size = shard_size or dataset.config.shard_size
        if num_peers * self.shard_size >= len(dataset):
            raise ConfigError(
                f"{num_peers} peers x shard {self.shard_size} leaves no unassigned data "
                f"in a dataset of {len(dataset)}"
            )

    def permutation(self, seed: int, round: int) -> np.ndarray:
        return np.random.default_rng([seed, _PERM_TAG, round]).permutation(len(self.dataset))

    def _check_peer(self, peer_id: int) -> None:
        if not 0 <= peer_id < self.num_peers:
            raise ConfigError(f"peer {peer_id} is not registered (have {self.num_peers})")

    def assigned_indices(self, seed: int, peer_id: int, round: int) -> np.ndarray:
        self._check_peer(peer_id)
        s = self.shard_size
        return self.permutation(seed, round)[peer_id * s:(peer_id + 1) * s]

    def unassigned_pool(self, seed: int, round: int) -> np.ndarray:
        return self.permutation(seed, round)[self.num_peers * self.shard_size:]

    def select_data(self, seed: int, peer_id: int, round: int) -> DataShard:
        return self.dataset.take(self.assigned_indices(seed, peer_id, round))

    def unassigned_data(self, seed: int, peer_id: int, round: int, size: int) -> DataShard:
        """Random batch disjoint from every registered peer's shard this round.

        The draw depends only on ``(seed, round)``, so all peers evaluated in a
        round share one yardstick; it is disjoint from ``peer_id``'s shard in
        particular.
        """
        self._check_peer(peer_id)
        pool = self.unassigned_pool(seed, round)
        if not 0 < size <= len(pool):
            raise ConfigError(f"unassigned batch size {size} not in (0, {len(pool)}]")
        rng = np.random.default_rng([seed, _RAND_TAG, round])
        return self.dataset.take(np.sort(rng.choice(pool, size=size, replace=False)))


# ------------------------------------------------------------------------ model


def _forward(theta: Params, x: np.ndarray):
    h = np.tanh(x @ theta["w1"] + theta["b1"])
    logits = h @ theta["w2"] + theta["b2"]
    return h, logits


def _check_batch(theta: Params, batch: DataShard) -> None:
    if set(theta) != {"w1", "b1", "w2", "b2"}:
        raise StructureError(f"unexpected tensors {list(theta)}")
    d, hdim = theta["w1"].shape
    if theta["b1"].shape != (hdim,) or theta["w2"].shape[0] != hdim \
            or theta["b2"].shape != (theta["w2"].shape[1],):
        raise StructureError("tensor shapes are inconsistent")
    if batch.features.shape[1] != d:
        raise StructureError(f"batch has {batch.features.shape[1]} features, model expects {d}")


def forward_loss(theta: Params, batch: DataShard) -> float:
    """Mean softmax cross-entropy of the MLP on ``batch``."""
    _check_batch(theta, batch)
    _, logits = _forward(theta, batch.features)
    shift = logits.max(axis=1, keepdims=True)
    log_z = shift[:, 0] + np.log(np.exp(logits - shift).sum(axis=1))
    picked = logits[np.arange(len(batch)), batch.labels]
    return float(np.mean(log_z - picked))


def gradient(theta: Params, batch: DataShard) -> Params:
    _check_batch(theta, batch)
    x, n = batch.features, len(batch)
    h, logits = _forward(theta, x)
    p = np.exp(logits - logits.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    p[np.arange(n), batch.labels] -= 1.0
    d_logits = p / n
    d_h = (d_logits @ theta["w2"].T) * (1.0 - h * h)
    return {
        "w1": x.T @ d_h,
        "b1": d_h.sum(axis=0),
        "w2": h.T @ d_logits,
        "b2": d_logits.sum(axis=0),
    }


def sgd_step(theta: Params, grad: Params, lr: float) -> Params:
    return {name: theta[name] - lr * grad[name] for name in theta}
