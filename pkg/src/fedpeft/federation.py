"""Round orchestration: sampling, local training, and size-weighted aggregation.

Only the transmitted parameter set travels.  The server snapshots it, every
sampled client loads it into a private copy of the model, trains for a few
local epochs, and sends back its own snapshot; the server then takes the
sample-size-weighted mean and loads it into the global model.

Every client draws randomness from a stream keyed by (seed, round, client id),
so the outcome of a round does not depend on how clients are scheduled.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .comm import round_cost
from .data import Dataset, PartitionAssignment, augment_batch
from .errors import ConfigError, ContractError, DivergenceError, FedPeftError
from .models import GlobalModel, load_transmitted, predict, snapshot_transmitted
from .privacy import DpConfig, clip_gradient, dp_step
from .tensor import SgdConfig

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FederationConfig:
    num_clients: int = 64
    clients_per_round: int = 8
    rounds: int = 50
    local_epochs: int = 10
    seed: int = 0
    sgd: SgdConfig = field(default_factory=lambda: SgdConfig(0.01, 1e-4, 64))
    dp: DpConfig | None = None
    horizontal_flip: float = 0.0

    def __post_init__(self):
        if self.num_clients < 1:
            raise ConfigError("num_clients must be at least 1")
        if not 1 <= self.clients_per_round <= self.num_clients:
            raise ConfigError(f"clients_per_round must lie in [1, {self.num_clients}], "
                              f"got {self.clients_per_round}")
        if self.rounds < 1 or self.local_epochs < 1:
            raise ConfigError("rounds and local_epochs must be at least 1")


@dataclass
class ClientState:
    id: int
    shard: Dataset
    model: GlobalModel
    rng: np.random.Generator


@dataclass(frozen=True)
class ClientResult:
    client_id: int
    theta: np.ndarray
    num_samples: int
    train_loss: float


@dataclass(frozen=True)
class RoundRecord:
    round: int
    sampled: tuple[int, ...]
    sample_counts: tuple[int, ...]
    param_count: int
    upload_bytes: int
    download_bytes: int
    server_accuracy: float
    server_loss: float
    train_loss: float

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sampled"] = list(self.sampled)
        d["sample_counts"] = list(self.sample_counts)
        return d


class TrainingAborted(FedPeftError):
    """A round failed; ``history`` holds the records completed before it."""

    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


def client_rng(seed: int, round_index: int, client_id: int) -> np.random.Generator:
    return np.random.default_rng([seed, round_index, client_id, 0])


def server_rng(seed: int, round_index: int) -> np.random.Generator:
    return np.random.default_rng([seed, round_index, 1])


def sample_clients(eligible, m: int, rng: np.random.Generator) -> list[int]:
    """Uniform sample of ``m`` distinct clients, returned in ascending id order.

    ``eligible`` is either a client count N (ids 0..N-1) or a sequence of ids.
    """
    pool = np.arange(eligible) if isinstance(eligible, (int, np.integer)) else np.asarray(eligible)
    if m > len(pool):
        raise ConfigError(f"cannot sample {m} clients from {len(pool)} eligible")
    if m < 1:
        raise ConfigError("must sample at least one client")
    return sorted(int(i) for i in rng.choice(pool, size=m, replace=False))


def _local_step(model: GlobalModel, xb, yb) -> float:
    loss = T.cross_entropy_loss(model(xb), yb)
    value = float(loss.item())
    if not math.isfinite(value):
        raise DivergenceError(f"non-finite training loss {value}")
    T.backward(loss)
    return value


def _per_sample_dp_grads(model: GlobalModel, xb, yb, dp: DpConfig, rng) -> float:
    # clip each sample, sum, add N(0, sigma^2), divide by the batch size
    params = model.trainable_params()
    total = [np.zeros_like(p.data) for p in params]
    losses = []
    for i in range(len(yb)):
        losses.append(_local_step(model, xb[i:i + 1], yb[i:i + 1]))
        clipped = clip_gradient([p.grad for p in params], dp.clip_norm)
        for acc, g in zip(total, clipped):
            acc += g
        model.zero_grad()
    sigma = dp.sigma
    b = len(yb)
    for p, acc in zip(params, total):
        noise = sigma * rng.standard_normal(acc.shape) if sigma else 0.0
        p.grad = ((acc + noise) / b).astype(p.dtype, copy=False)
    return float(np.mean(losses))


def client_update(client: ClientState, theta: np.ndarray, cfg: FederationConfig) -> ClientResult:
    """Load ``theta``, run the local epochs of mini-batch SGD, return the new snapshot."""
    model, rng, shard = client.model, client.rng, client.shard
    load_transmitted(model, theta)
    n = len(shard)
    if n == 0:
        log.warning("client %d has an empty shard; skipping", client.id)
        return ClientResult(client.id, snapshot_transmitted(model), 0, float("nan"))
    bs = cfg.sgd.batch_size
    params = model.trainable_params()
    dp = cfg.dp if cfg.dp is not None and cfg.dp.enabled else None
    losses, weights = [], []
    for _ in range(cfg.local_epochs):
        order = rng.permutation(n)
        for start in range(0, n, bs):
            idx = np.sort(order[start:start + bs])
            xb = augment_batch(shard.features[idx], rng, horizontal_flip=cfg.horizontal_flip)
            yb = shard.labels[idx]
            if dp is not None and dp.per_sample:
                loss = _per_sample_dp_grads(model, xb, yb, dp, rng)
            else:
                loss = _local_step(model, xb, yb)
                if dp is not None:
                    for p, g in zip(params, dp_step([p.grad for p in params], dp, rng)):
                        p.grad = g
            T.sgd_step(params, cfg.sgd)
            losses.append(loss)
            weights.append(len(idx))
    return ClientResult(client.id, snapshot_transmitted(model), n,
                        float(np.average(losses, weights=weights)))


def aggregate(updates: Sequence[tuple[np.ndarray, int]], client_ids: Sequence[int] | None = None) -> np.ndarray:
    """Sample-size-weighted mean of client vectors.

    Computed as ``ref + sum_k (n_k / n) (theta_k - ref)`` with ``ref`` the
    lowest-id update.  Terms are summed in ascending client-id order
    (positional order if no ids are given), so the result does not depend on
    arrival order, and identical updates are returned unchanged.
    """
    if not updates:
        raise ContractError("aggregate needs at least one update")
    if client_ids is None:
        client_ids = range(len(updates))
    if len(client_ids) != len(updates):
        raise ContractError("one client id per update required")
    ordered = [u for _, u in sorted(zip(client_ids, updates), key=lambda t: t[0])]
    length = len(ordered[0][0])
    sizes = []
    for theta, size in ordered:
        if len(theta) != length:
            raise ContractError(f"update length {len(theta)} differs from {length}")
        if size <= 0:
            raise ContractError(f"update weight must be positive, got {size}")
        sizes.append(int(size))
    total = sum(sizes)
    # anchored on the lowest-id vector so that identical updates come back bit-exact
    dtype = np.result_type(*(np.asarray(t).dtype for t, _ in ordered))
    ref = np.asarray(ordered[0][0], dtype=dtype)
    out = ref.copy()
    for (theta, _), size in zip(ordered[1:], sizes[1:]):
        out += (size / total) * (np.asarray(theta) - ref)
    # the reference term's own delta is zero, so only the others contribute
    return out


def evaluate(model: GlobalModel, dataset: Dataset, batch_size: int = 256) -> tuple[float, float]:
    """(accuracy, mean cross-entropy) of ``model`` on ``dataset``."""
    if len(dataset) == 0:
        raise ContractError("evaluation set is empty")
    logits = predict(model, dataset.features, batch_size).astype(np.float64)
    labels = dataset.labels
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = float(-logp[np.arange(len(labels)), labels].mean())
    acc = float((logits.argmax(axis=1) == labels).mean())
    return acc, loss


def run_training(model: GlobalModel, train_set: Dataset, partition: PartitionAssignment,
                 cfg: FederationConfig, eval_set: Dataset, *, threads: int = 1,
                 on_round: Callable[[RoundRecord], None] | None = None) -> list[RoundRecord]:
    """Run ``cfg.rounds`` communication rounds, updating ``model`` in place."""
    if partition.num_clients != cfg.num_clients:
        raise ConfigError(f"partition has {partition.num_clients} clients, config expects "
                          f"{cfg.num_clients}")
    shards = [train_set.subset(idx) for idx in partition.shards()]
    eligible = [i for i, s in enumerate(shards) if len(s) > 0]
    if len(eligible) < cfg.clients_per_round:
        raise ConfigError(f"only {len(eligible)} clients hold data; cannot sample "
                          f"{cfg.clients_per_round}")
    param_count = model.registry.count(transmitted=True)
    mode = model.mode.kind if model.mode is not None else "full"
    history: list[RoundRecord] = []
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for t in range(cfg.rounds):
            try:
                sampled = sample_clients(eligible, cfg.clients_per_round, server_rng(cfg.seed, t))
                theta = snapshot_transmitted(model)
                clients = [ClientState(m, shards[m], model.clone(), client_rng(cfg.seed, t, m))
                           for m in sampled]

                def work(c, theta=theta):
                    return client_update(c, theta, cfg)

                results = list(pool.map(work, clients)) if pool else [work(c) for c in clients]
                new_theta = aggregate([(r.theta, r.num_samples) for r in results],
                                      [r.client_id for r in results])
                load_transmitted(model, new_theta)
                acc, loss = evaluate(model, eval_set)
            except Exception as exc:
                raise TrainingAborted(f"round {t} failed: {exc}", history) from exc
            counts = tuple(r.num_samples for r in results)
            train_loss = float(np.average([r.train_loss for r in results], weights=counts))
            cost = round_cost(param_count, len(sampled))
            rec = RoundRecord(t, tuple(sampled), counts, param_count, cost, cost,
                              acc, loss, train_loss)
            log.info("round %d (%s): acc=%.4f loss=%.4f train_loss=%.4f", t, mode, acc, loss,
                     train_loss)
            history.append(rec)
            if on_round is not None:
                on_round(rec)
    finally:
        if pool is not None:
            pool.shutdown()
    return history
