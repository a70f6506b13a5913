import csv
import math

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import click
import numpy as np

from ris_estimation.artifact import write_manifest
from ris_estimation.channel import ChannelDataset, generate_dataset
from ris_estimation.classical import (
    CovarianceModel,
    fit_covariance,
    ls_operator,
    mmse_operator,
    nmse_db,
    nmse_per_sample,
)
from ris_estimation.config import ExperimentConfig, config_hash, dump_config
from ris_estimation.errors import ConfigurationError, InputError
from ris_estimation.federated import (
    ClientDataset,
    FedConfig,
    Validation,
    TrainingLogRow,
    pretrain_classifier,
    train,
    train_centralized,
    write_training_log,
)
from ris_estimation.layers import MacCounter
from ris_estimation.model import (
    ModelParams,
    forward,
    infer,
    init_model_for,
    load_checkpoint,
    mac_count,
    save_checkpoint,
)
from ris_estimation.pilots import (
    PilotBank,
    build_pilot_bank,
    db_to_linear,
    encode_tensor,
    grouping_for,
    measurement_matrix,
    observe_batch,
)
from ris_estimation.streams import rng_for

RESULT_FIELDS = ["method", "Q", "grouped", "snr_db", "nmse_db", "n", "seed"]

# (encoded tensors, the dataset they came from) -> channel estimates (S, D)
Estimator = Callable[[np.ndarray, ChannelDataset], np.ndarray]


@dataclass
class ResultRow:
    method: str
    q: int
    grouped: bool
    snr_db: float
    nmse_db: float
    n: int
    seed: int


@dataclass
class ComplexityRow:
    module: str
    macs: int
    instrumented: int


@dataclass
class TrainingData:
    clients: list[ClientDataset]
    validation: Validation | None


@dataclass
class ArtifactLayout:
    """
    Paths inside one artifact directory:

        config.yaml                 config echo (with its hash)
        data/train.npz, test.npz    channel datasets (or .csv)
        checkpoints/                classifier.npz, model.npz, epoch-NNN.npz,
                                    user-R-K.npz (per-user training)
        training_log.csv            per-round training log
        results.csv                 NMSE rows (NN and baselines)
        baseline.csv, sweep.csv     baseline-only rows and NMSE-vs-Q sweep
        complexity.csv              MACs per module
        manifest.json               SHA-256 of everything above
    """

    root: Path
    fmt: str = "npz"

    @property
    def config(self) -> Path:
        return self.root / "config.yaml"

    def dataset(self, split: str) -> Path:
        return self.root / "data" / f"{split}.{self.fmt}"

    @property
    def checkpoint_dir(self) -> Path:
        return self.root / "checkpoints"

    @property
    def classifier_checkpoint(self) -> Path:
        return self.checkpoint_dir / "classifier.npz"

    @property
    def model_checkpoint(self) -> Path:
        return self.checkpoint_dir / "model.npz"

    def user_checkpoint(self, region: int, user: int) -> Path:
        return self.checkpoint_dir / f"user-{region}-{user}.npz"

    @property
    def training_log(self) -> Path:
        return self.root / "training_log.csv"

    @property
    def results(self) -> Path:
        return self.root / "results.csv"

    @property
    def baseline(self) -> Path:
        return self.root / "baseline.csv"

    @property
    def sweep(self) -> Path:
        return self.root / "sweep.csv"

    @property
    def complexity(self) -> Path:
        return self.root / "complexity.csv"


@dataclass
class ExperimentResult:
    layout: ArtifactLayout
    rows: list[ResultRow] = field(default_factory=list)


def layout_for(config: ExperimentConfig, out_dir: Path) -> ArtifactLayout:
    return ArtifactLayout(root=out_dir, fmt=config.dataset.format)


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


def training_regions(config: ExperimentConfig) -> list[int] | None:
    if config.experiment == "single-region":
        return [config.training.single_region]
    return None


def build_datasets(
    config: ExperimentConfig, verbose: bool = False
) -> tuple[ChannelDataset, ChannelDataset]:
    """Train and test channels; grouped regimes keep only the grouped channels."""
    grouping = grouping_for(config)
    matrix = None if grouping is None else grouping.matrix
    common = dict(grouping=matrix, keep_cascaded=grouping is None, verbose=verbose)
    train_set = generate_dataset(config, split="train", regions=training_regions(config), **common)
    test_set = generate_dataset(config, split="test", **common)
    return train_set, test_set


def prepare_datasets(
    config: ExperimentConfig, out_dir: Path, verbose: bool = False
) -> tuple[ChannelDataset, ChannelDataset]:
    layout = layout_for(config, out_dir)
    train_set, test_set = build_datasets(config, verbose=verbose)
    for split, dataset in (("train", train_set), ("test", test_set)):
        path = dataset.save(layout.dataset(split), fmt=config.dataset.format)
        click.echo(f"  💾 Saved {len(dataset)} {split} samples to {path}")
    return train_set, test_set


def load_datasets(
    config: ExperimentConfig, out_dir: Path
) -> tuple[ChannelDataset, ChannelDataset]:
    layout = layout_for(config, out_dir)
    expected = config_hash(config)
    datasets = []
    for split in ("train", "test"):
        path = layout.dataset(split)
        if not path.is_file():
            raise ConfigurationError(f"Missing {split} dataset {path}; run `generate` first")
        dataset = ChannelDataset.load(path)
        if dataset.header.get("config_hash") != expected:
            raise ConfigurationError(
                f"Dataset {path} was generated with a different config; run `generate` again"
            )
        datasets.append(dataset)
    return datasets[0], datasets[1]


def user_groups(dataset: ChannelDataset) -> list[tuple[int, int, np.ndarray]]:
    """(region, user, sample indices) for every user present, in order."""
    keys = sorted(set(zip(dataset.region.tolist(), dataset.user.tolist())))
    return [
        (r, k, np.flatnonzero((dataset.region == r) & (dataset.user == k))) for r, k in keys
    ]


def _user_operators(bank: PilotBank, dataset: ChannelDataset, region: int, user: int, idx):
    """Yield (sample indices, Psi) pairs: one per user, or one per sample."""
    if bank.scope == "user":
        yield idx, measurement_matrix(bank.config_for(region, user))
        return
    for i in idx:
        yield np.array([i]), measurement_matrix(bank.config_for(region, user, int(dataset.sample[i])))


def simulate_observations(
    dataset: ChannelDataset,
    bank: PilotBank,
    snr_db,
    seed: int,
    purpose: str,
    *key: int,
) -> np.ndarray:
    """
    Noisy pilot observations y = Psi h + n for every sample of `dataset`.
    `snr_db` is a scalar or one value per sample; noise for user (r, k) comes
    from the stream (seed, purpose, *key, r, k).
    """
    targets = dataset.targets
    snr_linear = np.broadcast_to(db_to_linear(np.asarray(snr_db, dtype=float)), (len(dataset),))
    raw = np.empty((len(dataset), bank.phases.shape[0]), dtype=complex)
    for region, user, idx in user_groups(dataset):
        rng = rng_for(seed, purpose, *key, region, user)
        for rows, psi in _user_operators(bank, dataset, region, user, idx):
            if psi.shape[1] != targets.shape[1]:
                raise ConfigurationError(
                    f"Pilots cover {psi.shape[1]} unknowns but the channel has {targets.shape[1]}"
                )
            raw[rows] = observe_batch(targets[rows], psi, snr_linear[rows], rng)
    return raw


def encode_inputs(raw: np.ndarray, bank: PilotBank) -> np.ndarray:
    q = raw.shape[-1]
    scaled = raw / np.sqrt(q) if bank.normalize_by_sqrt_q else raw
    return encode_tensor(scaled, bank.q_shape)


def generate_labels(
    dataset: ChannelDataset,
    config: ExperimentConfig,
    q_label: int | None = None,
    snr_db: float | None = None,
    seed: int | None = None,
) -> np.ndarray:
    """
    LS training targets from a fresh long-pilot sounding of every sample
    (Q_label >= D, +-1 pilots, label SNR), one LS operator per user.
    """
    seed = config.seed if seed is None else seed
    d = dataset.targets.shape[1]
    q_label = d if q_label is None else q_label
    snr_db = config.labels.snr_db if snr_db is None else snr_db
    if q_label < d:
        raise ConfigurationError(f"Label pilot budget {q_label} is below D={d}; LS labels need Q >= D")

    bank = build_pilot_bank(
        config,
        seed=seed,
        q=q_label,
        q_shape=(q_label, 1),
        purpose="label-pilots",
        grouping=grouping_for(config),
        normalize_by_sqrt_q=False,
    )
    raw = simulate_observations(dataset, bank, snr_db, seed, "label-noise")
    labels = np.empty_like(dataset.targets)
    for region, user, idx in user_groups(dataset):
        for rows, psi in _user_operators(bank, dataset, region, user, idx):
            labels[rows] = raw[rows] @ ls_operator(psi).T
    return labels


def build_training_data(
    config: ExperimentConfig, train_set: ChannelDataset, verbose: bool = False
) -> TrainingData:
    """
    NN inputs at the configured pilot budget (input SNR drawn per sample from
    the training grid), training targets (LS labels or ground truth), the
    per-user train/validation split and the client datasets.
    """
    seed = config.seed
    bank = build_pilot_bank(config, grouping=grouping_for(config))
    snr_db = rng_for(seed, "train-snr").choice(
        np.asarray(config.dataset.train_snr_db, dtype=float), size=len(train_set)
    )
    if verbose:
        click.echo(f"  📶 Simulating {len(train_set)} training observations at Q={bank.phases.shape[0]}...")
    tensors = encode_inputs(simulate_observations(train_set, bank, snr_db, seed, "train-noise"), bank)

    truth = train_set.targets
    if config.labels.source == "truth":
        labels = truth
    else:
        if verbose:
            click.echo(f"  🏷️ Generating LS labels at {config.labels.snr_db:g} dB...")
        labels = generate_labels(train_set, config)

    single = config.experiment == "single-region"
    clients, val_parts = [], []
    for region, user, idx in user_groups(train_set):
        n_val = int(math.floor(config.dataset.validation_fraction * len(idx)))
        fit, held = idx[: len(idx) - n_val], idx[len(idx) - n_val :]
        label = 1 if single else region
        clients.append(
            ClientDataset(
                id=(region, user),
                tensors=tensors[fit],
                targets=labels[fit],
                regions=np.full(len(fit), label, dtype=int),
                truth=truth[fit],
            )
        )
        val_parts.append((held, label))

    validation = None
    # validation_samples is split evenly over users
    base, extra = divmod(config.training.validation_samples, max(len(val_parts), 1))
    kept = [
        (held[: base + (1 if i < extra else 0)], label) for i, (held, label) in enumerate(val_parts)
    ]
    held_all = np.concatenate([held for held, _ in kept]) if kept else np.zeros(0, dtype=int)
    if held_all.size:
        validation = Validation(
            tensors=tensors[held_all],
            truth=truth[held_all],
            regions=np.concatenate([np.full(len(h), label, dtype=int) for h, label in kept]),
        )
    return TrainingData(clients=[c for c in clients if c.size], validation=validation)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def fit_covariances(
    config: ExperimentConfig, train_set: ChannelDataset
) -> dict[int | None, CovarianceModel]:
    """Pooled covariance under key None, or one per region under its label."""
    targets = train_set.targets
    loading = config.evaluation.covariance_loading
    if config.evaluation.mmse_covariance == "pooled":
        return {None: fit_covariance(targets, loading)}
    return {
        int(r): fit_covariance(targets[train_set.region == r], loading)
        for r in np.unique(train_set.region)
    }


def _covariance_for(covariances: dict[int | None, CovarianceModel], region: int) -> CovarianceModel:
    if None in covariances:
        return covariances[None]
    if region not in covariances:
        raise ConfigurationError(f"No covariance fitted for region {region}")
    return covariances[region]


def classical_estimates(
    dataset: ChannelDataset,
    bank: PilotBank,
    raw: np.ndarray,
    snr_db: float,
    covariances: dict[int | None, CovarianceModel] | None,
) -> tuple[np.ndarray, np.ndarray | None]:
    """LS and (when covariances are given) MMSE estimates for every sample."""
    noise_var = 1.0 / db_to_linear(snr_db)
    ls = np.empty((len(dataset), dataset.targets.shape[1]), dtype=complex)
    mmse = None if covariances is None else np.empty_like(ls)
    for region, user, idx in user_groups(dataset):
        for rows, psi in _user_operators(bank, dataset, region, user, idx):
            ls[rows] = raw[rows] @ ls_operator(psi).T
            if mmse is not None:
                operator = mmse_operator(psi, _covariance_for(covariances, region), noise_var)
                mmse[rows] = raw[rows] @ operator.T
    return ls, mmse


def evaluation_rows(
    method: str,
    q: int,
    grouped: bool,
    snr_db: float,
    values: np.ndarray,
    seed: int,
    per_sample: bool = False,
) -> list[ResultRow]:
    """One aggregate row (mean linear NMSE in dB), or one row per sample with n=1."""
    if per_sample:
        return [
            ResultRow(method, q, grouped, float(snr_db), nmse_db(v), 1, seed) for v in values
        ]
    return [ResultRow(method, q, grouped, float(snr_db), nmse_db(np.mean(values)), len(values), seed)]


def run_eval(
    config: ExperimentConfig,
    model: ModelParams | Path | None,
    test_set: ChannelDataset,
    covariances: dict[int | None, CovarianceModel] | None = None,
    snr_grid: tuple[float, ...] | None = None,
    seed: int | None = None,
    per_sample: bool = False,
    region: int | None = None,
    include_baselines: bool = True,
    estimators: dict[str, Estimator] | None = None,
    method: str = "nn",
) -> list[ResultRow]:
    """
    For each SNR: fresh observations at the NN pilot budget through the
    gated estimator, LS/MMSE with the same pilots and LS/MMSE at the
    long-pilot baseline budget. A checkpoint path is loaded and checked
    against the active config. `estimators` adds rows for other estimators
    fed the same encoded observations, one method name each.
    """
    seed = config.seed if seed is None else seed
    snr_grid = config.evaluation.snr_db if snr_grid is None else snr_grid
    if isinstance(model, Path):
        model = load_checkpoint(model, expected_config_hash=config_hash(config))

    suffix = ""
    if region is not None:
        test_set = test_set.select(test_set.region == region)
        suffix = f"[region={region}]"
        if len(test_set) == 0:
            raise InputError(f"Test set has no samples from region {region}")

    grouping = grouping_for(config)
    grouped = grouping is not None
    truth = test_set.targets
    nn_bank = build_pilot_bank(config, seed=seed, grouping=grouping)
    long_bank = build_pilot_bank(
        config,
        seed=seed,
        q=config.baseline_q,
        purpose="baseline-pilots",
        grouping=grouping,
        normalize_by_sqrt_q=False,
    )
    q_nn, q_long = nn_bank.phases.shape[0], long_bank.phases.shape[0]

    rows: list[ResultRow] = []
    for i, snr_db in enumerate(snr_grid):
        raw = simulate_observations(test_set, nn_bank, snr_db, seed, "eval-noise", i)

        tensors = encode_inputs(raw, nn_bank)
        if model is not None:
            estimates, _ = infer(model, tensors, gating="hard")
            values = nmse_per_sample(estimates, truth)
            rows += evaluation_rows(f"{method}{suffix}", q_nn, grouped, snr_db, values, seed, per_sample)
            if config.evaluation.soft_gating:
                estimates, _ = infer(model, tensors, gating="soft")
                values = nmse_per_sample(estimates, truth)
                rows += evaluation_rows(
                    f"{method}-soft{suffix}", q_nn, grouped, snr_db, values, seed, per_sample
                )
        for name, estimator in (estimators or {}).items():
            values = nmse_per_sample(estimator(tensors, test_set), truth)
            rows += evaluation_rows(f"{name}{suffix}", q_nn, grouped, snr_db, values, seed, per_sample)

        if not include_baselines:
            continue

        ls, mmse = classical_estimates(test_set, nn_bank, raw, snr_db, covariances)
        rows += evaluation_rows(f"ls{suffix}", q_nn, grouped, snr_db, nmse_per_sample(ls, truth), seed, per_sample)
        if mmse is not None:
            rows += evaluation_rows(
                f"mmse{suffix}", q_nn, grouped, snr_db, nmse_per_sample(mmse, truth), seed, per_sample
            )

        raw_long = simulate_observations(test_set, long_bank, snr_db, seed, "baseline-noise", i)
        ls, mmse = classical_estimates(test_set, long_bank, raw_long, snr_db, covariances)
        rows += evaluation_rows(f"ls{suffix}", q_long, grouped, snr_db, nmse_per_sample(ls, truth), seed, per_sample)
        if mmse is not None:
            rows += evaluation_rows(
                f"mmse{suffix}", q_long, grouped, snr_db, nmse_per_sample(mmse, truth), seed, per_sample
            )

    return rows


def run_pilot_sweep(
    config: ExperimentConfig,
    test_set: ChannelDataset,
    covariances: dict[int | None, CovarianceModel] | None = None,
    q_values: tuple[int, ...] | None = None,
    snr_grid: tuple[float, ...] | None = None,
    seed: int | None = None,
) -> list[ResultRow]:
    """LS/MMSE NMSE against the pilot budget Q, with fresh pilots per budget."""
    seed = config.seed if seed is None else seed
    q_values = config.evaluation.pilot_sweep_q if q_values is None else q_values
    snr_grid = config.evaluation.snr_db if snr_grid is None else snr_grid
    grouping = grouping_for(config)
    truth = test_set.targets

    rows: list[ResultRow] = []
    for q in q_values:
        bank = build_pilot_bank(
            config,
            seed=seed,
            q=q,
            q_shape=(q, 1),
            purpose="sweep-pilots",
            grouping=grouping,
            normalize_by_sqrt_q=False,
        )
        for i, snr_db in enumerate(snr_grid):
            raw = simulate_observations(test_set, bank, snr_db, seed, "sweep-noise", q, i)
            ls, mmse = classical_estimates(test_set, bank, raw, snr_db, covariances)
            rows += evaluation_rows("ls", q, grouping is not None, snr_db, nmse_per_sample(ls, truth), seed)
            if mmse is not None:
                rows += evaluation_rows(
                    "mmse", q, grouping is not None, snr_db, nmse_per_sample(mmse, truth), seed
                )
    return rows


def summarize(rows: list[ResultRow], method: str, q: int | None = None) -> float:
    """
    Median over the SNR grid of a method's NMSE in dB. Per-sample rows are
    first averaged (in linear scale) per SNR.
    """
    selected = [r for r in rows if r.method == method and (q is None or r.q == q)]
    if not selected:
        raise InputError(f"No result rows for method '{method}'" + ("" if q is None else f" at Q={q}"))

    per_snr: dict[float, list[ResultRow]] = {}
    for row in selected:
        per_snr.setdefault(row.snr_db, []).append(row)

    values = []
    for snr_rows in per_snr.values():
        if len(snr_rows) == 1:
            values.append(snr_rows[0].nmse_db)
            continue
        weights = np.array([r.n for r in snr_rows], dtype=float)
        linear = np.array([10.0 ** (r.nmse_db / 10.0) for r in snr_rows])
        values.append(nmse_db(np.dot(weights, linear) / weights.sum()))
    return float(np.median(values))


def write_results_csv(rows: list[ResultRow], path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=RESULT_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(
                {
                    "method": row.method,
                    "Q": row.q,
                    "grouped": "true" if row.grouped else "false",
                    "snr_db": f"{row.snr_db:.4f}",
                    "nmse_db": f"{row.nmse_db:.4f}",
                    "n": row.n,
                    "seed": row.seed,
                }
            )
    return path


def read_results_csv(path: Path) -> list[ResultRow]:
    if not path.is_file():
        raise InputError(f"Results file does not exist: {path}")

    with path.open("r", encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != RESULT_FIELDS:
            raise InputError(f"Unexpected results header in {path}: {reader.fieldnames}")
        return [
            ResultRow(
                method=r["method"],
                q=int(r["Q"]),
                grouped=r["grouped"] == "true",
                snr_db=float(r["snr_db"]),
                nmse_db=float(r["nmse_db"]),
                n=int(r["n"]),
                seed=int(r["seed"]),
            )
            for r in reader
        ]


# ---------------------------------------------------------------------------
# Complexity
# ---------------------------------------------------------------------------


def instrumented_macs(config: ExperimentConfig) -> dict[str, int]:
    """Count MACs on an actual single-sample hard-gated forward pass."""
    model = init_model_for(config)
    counter = MacCounter()
    forward(model, np.zeros((1, *config.pilots.q_shape, 2)), gating="hard", counter=counter)

    counted: dict[str, int] = {}
    for tag, macs in counter.by_module.items():
        module = "expert" if tag.startswith("expert.") else tag
        counted[module] = counted.get(module, 0) + macs
    counted["total"] = counter.total
    return counted


def complexity_report(config: ExperimentConfig, path: Path | None = None) -> list[ComplexityRow]:
    analytic = mac_count(config)
    counted = instrumented_macs(config)
    rows = [ComplexityRow(module, macs, counted.get(module, 0)) for module, macs in analytic.items()]

    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=["module", "macs", "instrumented"], lineterminator="\n")
            writer.writeheader()
            for row in rows:
                writer.writerow({"module": row.module, "macs": row.macs, "instrumented": row.instrumented})
    return rows


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


def stage_generate(config: ExperimentConfig, out_dir: Path, verbose: bool = True) -> ArtifactLayout:
    layout = layout_for(config, out_dir)
    dump_config(config, layout.config)
    click.echo(f"  📡 Generating channel datasets (seed {config.seed})...")
    prepare_datasets(config, out_dir, verbose=verbose)
    write_manifest(out_dir, config_hash(config))
    return layout


def stage_pretrain(config: ExperimentConfig, out_dir: Path, verbose: bool = True) -> float:
    if config.experiment == "baseline-only":
        raise ConfigurationError("The baseline-only experiment has no classifier to train")

    layout = layout_for(config, out_dir)
    train_set, _ = load_datasets(config, out_dir)
    data = build_training_data(config, train_set, verbose=verbose)

    click.echo(f"  🧭 Pretraining the region classifier for {config.training.classifier_epochs} epochs...")
    model, accuracy = pretrain_classifier(
        data.clients,
        init_model_for(config),
        epochs=config.training.classifier_epochs,
        learning_rate=config.training.classifier_learning_rate,
        batch_size=config.training.batch_size,
        seed=config.seed,
        validation=data.validation,
        verbose=verbose,
    )
    save_checkpoint(model, layout.classifier_checkpoint, config_hash(config))
    click.echo(f"  ✅ Classifier accuracy {accuracy:.4f}, saved to {layout.classifier_checkpoint}")
    write_manifest(out_dir, config_hash(config))
    return accuracy


def nn_method(config: ExperimentConfig) -> str:
    """Result-row method name for the learned estimator under the training mode."""
    return "nn" if config.training.mode == "federated" else f"nn-{config.training.mode}"


def per_user_estimator(models: dict[tuple[int, int], ModelParams], gating: str = "hard") -> Estimator:
    """Route every (region, user) block of the test set through that user's own model."""

    def estimate(tensors: np.ndarray, dataset: ChannelDataset) -> np.ndarray:
        estimates = np.zeros((len(dataset), dataset.targets.shape[1]), dtype=complex)
        for region, user, idx in user_groups(dataset):
            if (region, user) not in models:
                raise InputError(f"No per-user model for region {region} user {user}")
            estimates[idx], _ = infer(models[(region, user)], tensors[idx], gating=gating)
        return estimates

    return estimate


def _train_per_user(
    config: ExperimentConfig, data: TrainingData, model: ModelParams, layout: ArtifactLayout, digest: str
) -> list[TrainingLogRow]:
    fed = FedConfig.from_training(config.training)
    log: list[TrainingLogRow] = []
    for client in data.clients:
        region, user = client.id
        click.echo(f"  🔁 Training region {region} user {user} alone on {client.size} samples...")
        result = train_centralized(client, model, fed, seed=config.seed, validation=data.validation)
        save_checkpoint(result.model, layout.user_checkpoint(region, user), digest)
        log += result.log
    return log


def stage_train(config: ExperimentConfig, out_dir: Path, verbose: bool = True) -> Path:
    if config.experiment == "baseline-only":
        raise ConfigurationError("The baseline-only experiment does not train a model")

    layout = layout_for(config, out_dir)
    digest = config_hash(config)
    if not layout.classifier_checkpoint.is_file():
        raise ConfigurationError(
            f"Missing classifier checkpoint {layout.classifier_checkpoint}; run `pretrain-gate` first"
        )
    model = load_checkpoint(layout.classifier_checkpoint, expected_config_hash=digest)

    train_set, _ = load_datasets(config, out_dir)
    data = build_training_data(config, train_set, verbose=verbose)
    fed = FedConfig.from_training(config.training)
    common = dict(
        seed=config.seed,
        validation=data.validation,
        checkpoint_dir=layout.checkpoint_dir,
        config_hash=digest,
        verbose=verbose,
    )

    mode = config.training.mode
    if mode == "per-user":
        write_training_log(_train_per_user(config, data, model, layout, digest), layout.training_log)
        click.echo(f"  ✅ Saved {len(data.clients)} per-user models to {layout.checkpoint_dir}")
        write_manifest(out_dir, digest)
        return layout.checkpoint_dir

    if mode == "centralized":
        pooled = ClientDataset.pool(data.clients)
        click.echo(f"  🔁 Centralized training on {pooled.size} pooled samples for {fed.epochs} epochs...")
        result = train_centralized(pooled, model, fed, **common)
    else:
        click.echo(
            f"  🔁 FedAvg over {len(data.clients)} clients for {fed.epochs} epochs "
            f"({fed.server_optimizer} server step)..."
        )
        result = train(data.clients, model, fed, **common)
    write_training_log(result.log, layout.training_log)
    save_checkpoint(result.model, layout.model_checkpoint, digest)
    click.echo(f"  ✅ Saved trained model to {layout.model_checkpoint}")
    write_manifest(out_dir, digest)
    return layout.model_checkpoint


def _load_user_models(config: ExperimentConfig, layout: ArtifactLayout, dataset: ChannelDataset):
    digest = config_hash(config)
    models = {}
    for region, user, _ in user_groups(dataset):
        path = layout.user_checkpoint(region, user)
        if not path.is_file():
            raise ConfigurationError(f"Missing per-user checkpoint {path}; run `train` first")
        models[(region, user)] = load_checkpoint(path, expected_config_hash=digest)
    return models


def stage_eval(config: ExperimentConfig, out_dir: Path, per_sample: bool = False) -> list[ResultRow]:
    layout = layout_for(config, out_dir)
    train_set, test_set = load_datasets(config, out_dir)
    covariances = fit_covariances(config, train_set)
    method = nn_method(config)

    model, estimators = None, None
    trained = config.experiment != "baseline-only"
    if trained and config.training.mode == "per-user":
        estimators = {method: per_user_estimator(_load_user_models(config, layout, test_set))}
    elif trained:
        if not layout.model_checkpoint.is_file():
            raise ConfigurationError(f"Missing model checkpoint {layout.model_checkpoint}; run `train` first")
        model = load_checkpoint(layout.model_checkpoint, expected_config_hash=config_hash(config))

    click.echo(f"  📏 Evaluating on {len(test_set)} test samples over {len(config.evaluation.snr_db)} SNRs...")
    rows = run_eval(
        config, model, test_set, covariances, per_sample=per_sample, estimators=estimators, method=method
    )
    if config.experiment == "single-region" and model is not None:
        for region in range(1, config.n_regions + 1):
            rows += run_eval(
                config, model, test_set, covariances,
                per_sample=per_sample, region=region, include_baselines=False, method=method,
            )

    write_results_csv(rows, layout.results)
    click.echo(f"  ✅ Wrote {len(rows)} result rows to {layout.results}")
    write_manifest(out_dir, config_hash(config))
    return rows


def stage_baseline(config: ExperimentConfig, out_dir: Path, sweep: bool = False) -> list[ResultRow]:
    layout = layout_for(config, out_dir)
    train_set, test_set = load_datasets(config, out_dir)
    covariances = fit_covariances(config, train_set)

    if sweep:
        click.echo(f"  📈 Sweeping LS/MMSE over Q = {list(config.evaluation.pilot_sweep_q)}...")
        rows = run_pilot_sweep(config, test_set, covariances)
        path = write_results_csv(rows, layout.sweep)
    else:
        rows = run_eval(config, None, test_set, covariances)
        path = write_results_csv(rows, layout.baseline)

    click.echo(f"  ✅ Wrote {len(rows)} baseline rows to {path}")
    write_manifest(out_dir, config_hash(config))
    return rows


def stage_complexity(config: ExperimentConfig, out_dir: Path) -> list[ComplexityRow]:
    layout = layout_for(config, out_dir)
    rows = complexity_report(config, layout.complexity)
    for row in rows:
        marker = "✅" if row.macs == row.instrumented else "❌"
        click.echo(f"  {marker} {row.module:<14} {row.macs:>12,} MACs (counted {row.instrumented:,})")
    return rows


def run_experiment(config: ExperimentConfig, out_dir: Path, verbose: bool = True) -> ExperimentResult:
    """Run the selected regime end to end inside `out_dir`."""
    click.echo(f"🧪 Running the '{config.experiment}' experiment in {out_dir}")
    layout = stage_generate(config, out_dir, verbose=verbose)

    if config.experiment == "baseline-only":
        rows = stage_eval(config, out_dir)
    else:
        stage_pretrain(config, out_dir, verbose=verbose)
        stage_train(config, out_dir, verbose=verbose)
        rows = stage_eval(config, out_dir)

    stage_complexity(config, out_dir)
    write_manifest(out_dir, config_hash(config))

    for method in sorted({r.method for r in rows}):
        for q in sorted({r.q for r in rows if r.method == method}):
            click.echo(f"  📊 {method} (Q={q}): median NMSE {summarize(rows, method, q):.2f} dB")
    return ExperimentResult(layout=layout, rows=rows)
