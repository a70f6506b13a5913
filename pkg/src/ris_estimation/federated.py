import csv
import io
import json
import math

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import click
import numpy as np

from ris_estimation.classical import nmse, nmse_db
from ris_estimation.config import TrainingConfig
from ris_estimation.errors import ConfigurationError, InputError
from ris_estimation.layers import BatchStatistics
from ris_estimation.model import (
    AdamState,
    ModelParams,
    adam_step,
    apply_batch_statistics,
    backward,
    classifier_gradients,
    forward,
    infer,
    loss_estimation,
    merge_batch_statistics,
    predict_regions,
    save_checkpoint,
    sgd_step,
)
from ris_estimation.streams import rng_for

WEIGHT_TOLERANCE = 1e-9
LOG_FIELDS = ["round", "epoch", "lr", "mean_loss", "val_nmse_db", "classifier_accuracy"]


@dataclass
class ClientDataset:
    """One client's local samples: input tensors, label channels and the region label."""

    id: tuple[int, int]
    tensors: np.ndarray
    targets: np.ndarray
    regions: np.ndarray
    truth: np.ndarray | None = None
    pooled: bool = False

    def __post_init__(self):
        n = self.tensors.shape[0]
        if self.targets.shape[0] != n or self.regions.shape[0] != n:
            raise InputError(f"Client {self.id}: tensors, targets and regions differ in length")
        if n and not self.pooled and np.any(self.regions != self.regions[0]):
            raise InputError(f"Client {self.id}: all samples must share one region label")

    @classmethod
    def pool(cls, clients: list["ClientDataset"]) -> "ClientDataset":
        """Every client's samples in one centralized dataset with id (0, 0)."""
        if not clients:
            raise InputError("Nothing to pool")
        truth = None
        if all(c.truth is not None for c in clients):
            truth = np.concatenate([c.truth for c in clients])
        return cls(
            id=(0, 0),
            tensors=np.concatenate([c.tensors for c in clients]),
            targets=np.concatenate([c.targets for c in clients]),
            regions=np.concatenate([c.regions for c in clients]),
            truth=truth,
            pooled=True,
        )

    @property
    def size(self) -> int:
        return int(self.tensors.shape[0])

    @property
    def region(self) -> int:
        return int(self.regions[0]) if self.size else self.id[0]


@dataclass(frozen=True)
class FedConfig:
    epochs: int
    batch_size: int = 256
    learning_rate: float = 1e-3
    lr_halving_epochs: int = 30
    server_optimizer: str = "adam"
    local_steps: int = 1
    gating: str = "hard"
    checkpoint_every_epochs: int = 0
    validate_every_rounds: int = 0
    workers: int = 1

    @classmethod
    def from_training(cls, training: TrainingConfig) -> "FedConfig":
        return cls(
            epochs=training.epochs,
            batch_size=training.batch_size,
            learning_rate=training.learning_rate,
            lr_halving_epochs=training.lr_halving_epochs,
            server_optimizer=training.server_optimizer,
            local_steps=training.local_steps,
            gating=training.gating,
            checkpoint_every_epochs=training.checkpoint_every_epochs,
            validate_every_rounds=training.validate_every_rounds,
            workers=training.workers,
        )

    def stepsize(self, epoch: int) -> float:
        """Base rate halved every `lr_halving_epochs` epochs (epoch is 0-based)."""
        return self.learning_rate * 0.5 ** (epoch // self.lr_halving_epochs)

    def rounds_per_epoch(self, clients: list[ClientDataset]) -> int:
        return max(math.ceil(c.size / self.batch_size) for c in clients)


@dataclass
class ClientUpdate:
    """The round message a client sends back: no sample payload."""

    client_id: tuple[int, int]
    gradients: dict[str, np.ndarray]
    batch_stats: dict[str, BatchStatistics]
    num_samples: int
    loss: float

    def to_bytes(self) -> bytes:
        arrays = {f"grad/{name}": g for name, g in self.gradients.items()}
        for name, stats in self.batch_stats.items():
            arrays[f"stats/{name}/mean"] = stats.mean
            arrays[f"stats/{name}/var"] = stats.var
        meta = {
            "client_id": list(self.client_id),
            "num_samples": self.num_samples,
            "loss": self.loss,
            "stat_counts": {name: s.count for name, s in self.batch_stats.items()},
        }
        buffer = io.BytesIO()
        np.savez(buffer, meta=np.array(json.dumps(meta)), **arrays)
        return buffer.getvalue()


@dataclass
class TrainingLogRow:
    round: int
    epoch: int
    lr: float
    mean_loss: float
    val_nmse_db: float | None = None
    classifier_accuracy: float | None = None


@dataclass
class Validation:
    tensors: np.ndarray
    truth: np.ndarray
    regions: np.ndarray | None = None


@dataclass
class TrainingResult:
    model: ModelParams
    log: list[TrainingLogRow] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)


def aggregation_weights(clients: list[ClientDataset]) -> np.ndarray:
    """p_{r,k} = |D_{r,k}| / sum |D|."""
    sizes = np.array([c.size for c in clients], dtype=float)
    if sizes.size == 0 or sizes.sum() == 0:
        raise ConfigurationError("Federated training needs at least one non-empty client")
    return sizes / sizes.sum()


def epoch_batches(
    size: int,
    batch_size: int,
    seed: int,
    client_id: tuple[int, int],
    epoch: int,
    purpose: str = "batches",
) -> list[np.ndarray]:
    order = rng_for(seed, purpose, *client_id, epoch).permutation(size)
    return [order[i : i + batch_size] for i in range(0, size, batch_size)]


def _expert_and_mapper(grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {name: g for name, g in grads.items() if not name.startswith("classifier.")}


# ---------------------------------------------------------------------------
# Stage 1: classifier
# ---------------------------------------------------------------------------


def classifier_accuracy(model: ModelParams, tensors: np.ndarray, regions: np.ndarray) -> float:
    if model.n_regions == 1:
        return 1.0
    if len(regions) == 0:
        raise InputError("Accuracy needs at least one sample")
    return float(np.mean(predict_regions(model, tensors) == regions))


def pretrain_classifier(
    clients: list[ClientDataset],
    model: ModelParams,
    epochs: int,
    learning_rate: float,
    batch_size: int,
    seed: int,
    validation: Validation | None = None,
    verbose: bool = False,
) -> tuple[ModelParams, float]:
    """
    Train the gate with Adam on the pooled client tensors and return the model
    with the updated classifier plus its accuracy (held-out when `validation`
    carries region labels, else on the pooled data).
    """
    if not clients or all(c.size == 0 for c in clients):
        raise InputError("Classifier pretraining needs non-empty client datasets")

    tensors = np.concatenate([c.tensors for c in clients])
    regions = np.concatenate([c.regions for c in clients])
    if np.any(regions < 1) or np.any(regions > model.n_regions):
        raise InputError(f"Region labels must lie in [1, {model.n_regions}]")

    if model.n_regions > 1:
        state = AdamState()
        for epoch in range(epochs):
            losses = []
            batches = epoch_batches(
                len(regions), batch_size, seed, (0, 0), epoch, "classifier-batches"
            )
            for indices in batches:
                loss, grads, stats = classifier_gradients(model, tensors[indices], regions[indices])
                params, state = adam_step(model.trainable(), grads, state, learning_rate)
                model = apply_batch_statistics(model.with_arrays(params), stats)
                losses.append(loss)
            if verbose:
                click.echo(f"  🧭 Classifier epoch {epoch + 1}/{epochs}: loss {np.mean(losses):.4f}")

    if validation is not None and validation.regions is not None:
        accuracy = classifier_accuracy(model, validation.tensors, validation.regions)
    else:
        accuracy = classifier_accuracy(model, tensors, regions)
    return model, accuracy


# ---------------------------------------------------------------------------
# Stage 2: experts and mapper
# ---------------------------------------------------------------------------


def client_local_gradient(
    client: ClientDataset,
    model: ModelParams,
    indices: np.ndarray,
    gating: str = "hard",
    local_steps: int = 1,
    local_lr: float = 1e-3,
) -> ClientUpdate:
    """
    Empirical-NMSE gradient on one mini-batch. The frozen classifier runs in
    eval mode and routes by its own hard choice; only the routed expert and the
    mapper receive nonzero gradients. With `local_steps > 1` the client takes
    that many SGD steps on the batch and returns the pseudo-gradient
    (theta_0 - theta_K) / local_lr.
    """
    tensors, targets = client.tensors[indices], client.targets[indices]

    estimates, _, cache = forward(model, tensors, gating=gating, mode="train", classifier_mode="eval")
    loss = loss_estimation(estimates, targets)
    grads = _expert_and_mapper(backward(model, cache, "estimation", targets))
    batch_stats = cache.batch_stats

    if local_steps > 1:
        start = {name: model.trainable()[name] for name in grads}
        local = model
        for _ in range(local_steps - 1):
            local = local.with_arrays(sgd_step(local.trainable(), grads, local_lr))
            _, _, cache = forward(local, tensors, gating=gating, mode="train", classifier_mode="eval")
            grads = _expert_and_mapper(backward(local, cache, "estimation", targets))
        final = sgd_step(local.trainable(), grads, local_lr)
        grads = {name: (start[name] - final[name]) / local_lr for name in grads}

    return ClientUpdate(
        client_id=client.id,
        gradients=grads,
        batch_stats=batch_stats,
        num_samples=int(len(indices)),
        loss=loss,
    )


def fedavg_aggregate(
    updates: list[ClientUpdate],
    weights: np.ndarray,
    model: ModelParams,
    lr: float,
    optimizer: str = "sgd",
    state: AdamState | None = None,
) -> tuple[ModelParams, AdamState | None]:
    """
    theta <- theta - lr * sum_k p_k g_k ("sgd"), or a server-side Adam step on
    the same weighted-mean gradient ("adam"). Running batch-norm statistics
    are refreshed from the pooled client batch statistics.
    """
    weights = np.asarray(weights, dtype=float)
    if len(weights) != len(updates) or not updates:
        raise ConfigurationError(f"Got {len(updates)} updates for {len(weights)} weights")
    if np.any(weights < 0) or abs(weights.sum() - 1.0) > WEIGHT_TOLERANCE:
        raise ConfigurationError(f"Aggregation weights must be non-negative and sum to 1, got {weights.sum()}")
    if optimizer not in ("sgd", "adam"):
        raise ConfigurationError(f"Unknown server optimizer '{optimizer}'")

    aggregated: dict[str, np.ndarray] = {}
    for weight, update in zip(weights, updates):
        for name, g in update.gradients.items():
            term = weight * g
            aggregated[name] = term if name not in aggregated else aggregated[name] + term

    params = model.trainable()
    if optimizer == "adam":
        params, state = adam_step(params, aggregated, state or AdamState(), lr)
    else:
        params = sgd_step(params, aggregated, lr)

    updated = model.with_arrays(params)
    stats = merge_batch_statistics([u.batch_stats for u in updates if u.batch_stats])
    return apply_batch_statistics(updated, stats) if stats else updated, state


def _validate(model: ModelParams, validation: Validation, gating: str) -> float:
    estimates, _ = infer(model, validation.tensors, gating=gating)
    return nmse_db(nmse(estimates, validation.truth))


def _should_validate(fed: FedConfig, round_in_epoch: int, rounds_per_epoch: int) -> bool:
    if fed.validate_every_rounds > 0:
        return (round_in_epoch + 1) % fed.validate_every_rounds == 0
    return round_in_epoch == rounds_per_epoch - 1


def train(
    clients: list[ClientDataset],
    model: ModelParams,
    fed: FedConfig,
    seed: int,
    validation: Validation | None = None,
    checkpoint_dir: Path | None = None,
    config_hash: str | None = None,
    verbose: bool = False,
) -> TrainingResult:
    """
    FedAvg rounds over `fed.epochs` epochs; one epoch is enough rounds for the
    largest client to traverse its data once, each client contributing one
    batch per round (smaller clients cycle their batches).
    """
    weights = aggregation_weights(clients)
    rounds_per_epoch = fed.rounds_per_epoch(clients)
    accuracy = None
    if validation is not None and validation.regions is not None:
        accuracy = classifier_accuracy(model, validation.tensors, validation.regions)

    result = TrainingResult(model=model)
    state = AdamState() if fed.server_optimizer == "adam" else None
    round_index = 0

    with ThreadPoolExecutor(max_workers=max(fed.workers, 1)) as pool:
        for epoch in range(fed.epochs):
            lr = fed.stepsize(epoch)
            orders = [
                epoch_batches(c.size, fed.batch_size, seed, c.id, epoch) for c in clients
            ]
            for step in range(rounds_per_epoch):
                broadcast = result.model
                jobs = [
                    (client, order[step % len(order)]) for client, order in zip(clients, orders)
                ]
                if fed.workers > 1:
                    futures = [
                        pool.submit(
                            client_local_gradient, client, broadcast, indices,
                            fed.gating, fed.local_steps, lr,
                        )
                        for client, indices in jobs
                    ]
                    updates = [f.result() for f in futures]
                else:
                    updates = [
                        client_local_gradient(client, broadcast, indices, fed.gating, fed.local_steps, lr)
                        for client, indices in jobs
                    ]

                result.model, state = fedavg_aggregate(
                    updates, weights, broadcast, lr, fed.server_optimizer, state
                )
                round_index += 1

                val_db = None
                if validation is not None and _should_validate(fed, step, rounds_per_epoch):
                    val_db = _validate(result.model, validation, fed.gating)
                result.log.append(
                    TrainingLogRow(
                        round=round_index,
                        epoch=epoch + 1,
                        lr=lr,
                        mean_loss=float(np.dot(weights, [u.loss for u in updates])),
                        val_nmse_db=val_db,
                        classifier_accuracy=accuracy,
                    )
                )

            if verbose:
                last = result.log[-1]
                val = f", validation {last.val_nmse_db:.2f} dB" if last.val_nmse_db is not None else ""
                click.echo(f"  🔁 Epoch {epoch + 1}/{fed.epochs} (lr {lr:g}): loss {last.mean_loss:.4f}{val}")

            if checkpoint_dir is not None and fed.checkpoint_every_epochs > 0:
                if (epoch + 1) % fed.checkpoint_every_epochs == 0:
                    path = checkpoint_dir / f"epoch-{epoch + 1:03d}.npz"
                    result.checkpoints.append(save_checkpoint(result.model, path, config_hash))

    return result


def train_centralized(
    dataset: ClientDataset,
    model: ModelParams,
    fed: FedConfig,
    seed: int,
    validation: Validation | None = None,
    checkpoint_dir: Path | None = None,
    config_hash: str | None = None,
    verbose: bool = False,
) -> TrainingResult:
    """
    Plain mini-batch training on one dataset (pooled, or a single user's) with
    the same batch order, schedule and optimizer as `train`.
    """
    result = TrainingResult(model=model)
    state = AdamState()
    round_index = 0

    for epoch in range(fed.epochs):
        lr = fed.stepsize(epoch)
        batches = epoch_batches(dataset.size, fed.batch_size, seed, dataset.id, epoch)
        for step, indices in enumerate(batches):
            tensors, targets = dataset.tensors[indices], dataset.targets[indices]
            current = result.model
            estimates, _, cache = forward(
                current, tensors, gating=fed.gating, mode="train", classifier_mode="eval"
            )
            loss = loss_estimation(estimates, targets)
            grads = _expert_and_mapper(backward(current, cache, "estimation", targets))
            if fed.server_optimizer == "adam":
                params, state = adam_step(current.trainable(), grads, state, lr)
            else:
                params = sgd_step(current.trainable(), grads, lr)
            result.model = apply_batch_statistics(current.with_arrays(params), cache.batch_stats)
            round_index += 1

            val_db = None
            if validation is not None and _should_validate(fed, step, len(batches)):
                val_db = _validate(result.model, validation, fed.gating)
            result.log.append(
                TrainingLogRow(round=round_index, epoch=epoch + 1, lr=lr, mean_loss=loss, val_nmse_db=val_db)
            )

        if verbose and result.log:
            last = result.log[-1]
            val = f", validation {last.val_nmse_db:.2f} dB" if last.val_nmse_db is not None else ""
            click.echo(f"  🔁 Epoch {epoch + 1}/{fed.epochs} (lr {lr:g}): loss {last.mean_loss:.4f}{val}")

        if checkpoint_dir is not None and fed.checkpoint_every_epochs > 0:
            if (epoch + 1) % fed.checkpoint_every_epochs == 0:
                path = checkpoint_dir / f"epoch-{epoch + 1:03d}.npz"
                result.checkpoints.append(save_checkpoint(result.model, path, config_hash))

    return result


def write_training_log(rows: list[TrainingLogRow], path: Path) -> Path:
    def fmt(value):
        return "" if value is None else value

    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=LOG_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(
                {
                    "round": row.round,
                    "epoch": row.epoch,
                    "lr": f"{row.lr:.6g}",
                    "mean_loss": f"{row.mean_loss:.6f}",
                    "val_nmse_db": fmt(None if row.val_nmse_db is None else f"{row.val_nmse_db:.4f}"),
                    "classifier_accuracy": fmt(
                        None if row.classifier_accuracy is None else f"{row.classifier_accuracy:.4f}"
                    ),
                }
            )
    return path
