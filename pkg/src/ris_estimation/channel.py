import json
import math

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import click
import numpy as np

from ris_estimation.config import ExperimentConfig, config_hash
from ris_estimation.errors import ConfigurationError, InputError
from ris_estimation.streams import rng_for

FULL_RANGE = (-math.pi / 2, math.pi / 2)
DATASET_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ArrayGeometry:
    """Uniform planar array with `rows` x `cols` elements (N1 x N2 or M1 x M2)."""

    rows: int
    cols: int
    spacing_over_wavelength: float = 0.5

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ConfigurationError(
                f"Array must have at least one row and column, got {self.rows}x{self.cols}"
            )
        if self.spacing_over_wavelength <= 0:
            raise ConfigurationError(
                f"Element spacing must be positive, got {self.spacing_over_wavelength}"
            )

    @property
    def total(self) -> int:
        return self.rows * self.cols


@dataclass
class PathSet:
    """
    Multipath parameters of one channel draw. `azimuth`/`elevation` are the
    angles at the RIS (arrival for BS-RIS paths, departure towards the user for
    RIS-user paths). BS-RIS paths also carry their departure angles at the BS.
    """

    gains: np.ndarray
    azimuth: np.ndarray
    elevation: np.ndarray
    departure_azimuth: np.ndarray | None = None
    departure_elevation: np.ndarray | None = None

    @property
    def count(self) -> int:
        return int(self.gains.shape[0])


@dataclass(frozen=True)
class RegionPartition:
    """Ordered elevation intervals (radians) covering (-pi/2, pi/2)."""

    edges: tuple[float, ...]

    @classmethod
    def from_degrees(cls, edges_deg) -> "RegionPartition":
        edges = [math.radians(e) for e in edges_deg]
        # snap the outer edges so they are exactly +-pi/2
        edges[0], edges[-1] = FULL_RANGE
        return cls(tuple(edges))

    def __post_init__(self):
        edges = self.edges
        if len(edges) < 2 or any(b <= a for a, b in zip(edges, edges[1:])):
            raise ConfigurationError(
                f"Region edges must be strictly increasing, got {edges}"
            )
        if not (
            math.isclose(edges[0], FULL_RANGE[0]) and math.isclose(edges[-1], FULL_RANGE[1])
        ):
            raise ConfigurationError("Region partition must cover (-pi/2, pi/2)")

    @property
    def count(self) -> int:
        return len(self.edges) - 1

    def interval(self, region: int) -> tuple[float, float]:
        if not 1 <= region <= self.count:
            raise InputError(f"Region {region} outside [1, {self.count}]")
        return self.edges[region - 1], self.edges[region]


@dataclass
class ChannelRealization:
    bs_ris: np.ndarray
    ris_user: np.ndarray
    cascaded: np.ndarray
    region: int
    user_index: int
    paths_g: PathSet
    paths_f: PathSet
    grouped: np.ndarray | None = None


def steering_vectors(geom: ArrayGeometry, azimuth, elevation) -> np.ndarray:
    """
    UPA responses for arrays of angles; returns shape (len(angles), geom.total).

    Element n = c * rows + r, i.e. the Kronecker product of the column ramp
    (exponent sin(el) cos(az)) with the row ramp (exponent cos(el)).
    """
    azimuth = np.atleast_1d(np.asarray(azimuth, dtype=float))
    elevation = np.atleast_1d(np.asarray(elevation, dtype=float))
    if not (np.all(np.isfinite(azimuth)) and np.all(np.isfinite(elevation))):
        raise InputError("Steering angles must be finite")

    k = 2.0 * np.pi * geom.spacing_over_wavelength
    col_ramp = np.exp(
        -1j * k * np.arange(geom.cols)[None, :] * (np.sin(elevation) * np.cos(azimuth))[:, None]
    )
    row_ramp = np.exp(
        -1j * k * np.arange(geom.rows)[None, :] * np.cos(elevation)[:, None]
    )
    response = col_ramp[:, :, None] * row_ramp[:, None, :]
    return response.reshape(azimuth.shape[0], geom.total) / np.sqrt(geom.total)


def steering_vector(geom: ArrayGeometry, azimuth: float, elevation: float) -> np.ndarray:
    return steering_vectors(geom, azimuth, elevation)[0]


def draw_paths(
    count: int,
    elevation_interval: tuple[float, float] | None,
    rng: np.random.Generator,
    with_departure: bool = False,
) -> PathSet:
    """
    Draw `count` paths: CN(0, 1) gains, azimuths uniform on (-pi/2, pi/2) and
    elevations uniform on `elevation_interval` (the full range when None).
    Departure angles, when requested, are drawn independently on the full range.
    """
    if count < 1:
        raise ConfigurationError(f"Path count must be at least 1, got {count}")

    low, high = elevation_interval if elevation_interval is not None else FULL_RANGE
    if not high > low:
        raise ConfigurationError(f"Empty elevation interval ({low}, {high})")
    if low < FULL_RANGE[0] - 1e-12 or high > FULL_RANGE[1] + 1e-12:
        raise ConfigurationError(f"Elevation interval ({low}, {high}) exceeds (-pi/2, pi/2)")

    gains = (rng.standard_normal(count) + 1j * rng.standard_normal(count)) / np.sqrt(2.0)
    azimuth = rng.uniform(*FULL_RANGE, size=count)
    elevation = rng.uniform(low, high, size=count)

    paths = PathSet(gains=gains, azimuth=azimuth, elevation=elevation)
    if with_departure:
        paths.departure_azimuth = rng.uniform(*FULL_RANGE, size=count)
        paths.departure_elevation = rng.uniform(*FULL_RANGE, size=count)
    return paths


def gen_bs_ris(geom_ris: ArrayGeometry, geom_bs: ArrayGeometry, paths: PathSet) -> np.ndarray:
    """G = sqrt(MN/L) sum_l alpha_l a(AoA_l) b(AoD_l)^H, shape N x M."""
    if paths.departure_azimuth is None or paths.departure_elevation is None:
        raise InputError("BS-RIS paths need departure angles at the BS")

    a = steering_vectors(geom_ris, paths.azimuth, paths.elevation)
    b = steering_vectors(geom_bs, paths.departure_azimuth, paths.departure_elevation)
    scale = np.sqrt(geom_ris.total * geom_bs.total / paths.count)
    return scale * (a.T * paths.gains) @ b.conj()


def gen_ris_user(geom_ris: ArrayGeometry, paths: PathSet) -> np.ndarray:
    """f = sqrt(N/L) sum_l alpha_l a(az_l, el_l), length N."""
    a = steering_vectors(geom_ris, paths.azimuth, paths.elevation)
    return np.sqrt(geom_ris.total / paths.count) * (a.T @ paths.gains)


def cascade(g: np.ndarray, f: np.ndarray) -> np.ndarray:
    """H = diag(f^H) G; works on single channels or stacks over a leading axis."""
    if g.shape[:-1] != f.shape:
        raise InputError(
            f"Cascade dimension mismatch: G {g.shape} vs f {f.shape}"
        )
    return np.conj(f)[..., None] * g


def region_of(elevation: float, partition: RegionPartition) -> int:
    """1-based region of `elevation`; boundary points belong to the lower region."""
    if not FULL_RANGE[0] < elevation < FULL_RANGE[1]:
        raise InputError(f"Elevation {elevation} outside (-pi/2, pi/2)")
    inner = np.asarray(partition.edges[1:-1])
    return int(np.searchsorted(inner, elevation, side="left")) + 1


def vectorize(matrices: np.ndarray) -> np.ndarray:
    """vec(.) by stacking columns, over a leading sample axis: (S, A, B) -> (S, A*B)."""
    return np.swapaxes(matrices, -1, -2).reshape(*matrices.shape[:-2], -1)


def unvectorize(vectors: np.ndarray, rows: int) -> np.ndarray:
    cols = vectors.shape[-1] // rows
    return np.swapaxes(vectors.reshape(*vectors.shape[:-1], cols, rows), -1, -2)


def _interleave(values: np.ndarray) -> np.ndarray:
    """Complex (S, K) -> real (S, 2K) as re0, im0, re1, im1, ..."""
    out = np.empty(values.shape[:-1] + (2 * values.shape[-1],), dtype=float)
    out[..., 0::2] = values.real
    out[..., 1::2] = values.imag
    return out


def _deinterleave(values: np.ndarray) -> np.ndarray:
    return values[..., 0::2] + 1j * values[..., 1::2]


@dataclass
class ChannelDataset:
    """
    Columnar collection of channel realizations, ordered by (region, user, sample).

    BS-RIS matrices are not stored; `realization(i)` rebuilds G from the stored
    path set. `cascaded` may be dropped once the grouped channel is computed.
    """

    ris_geometry: ArrayGeometry
    bs_geometry: ArrayGeometry
    region: np.ndarray
    user: np.ndarray
    sample: np.ndarray
    ris_user: np.ndarray
    cascaded: np.ndarray | None
    paths: dict[str, np.ndarray]
    grouped: np.ndarray | None = None
    grouping: np.ndarray | None = None
    header: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return int(self.region.shape[0])

    @property
    def targets(self) -> np.ndarray:
        """vec(H-bar) when grouped, vec(H) otherwise; shape (S, D)."""
        if self.grouped is not None:
            return vectorize(self.grouped)
        if self.cascaded is None:
            raise InputError("Dataset holds neither cascaded nor grouped channels")
        return vectorize(self.cascaded)

    def apply_grouping(self, grouping: np.ndarray, keep_cascaded: bool = True) -> None:
        if grouping.shape[1] != self.ris_geometry.total:
            raise InputError(
                f"Grouping operator has {grouping.shape[1]} columns, RIS has "
                f"{self.ris_geometry.total} elements"
            )
        if self.cascaded is None:
            raise InputError("Cannot group a dataset whose cascaded channels were dropped")
        self.grouping = np.asarray(grouping, dtype=float)
        self.grouped = np.einsum("un,snm->sum", self.grouping, self.cascaded)
        if not keep_cascaded:
            self.cascaded = None

    def _paths(self, i: int) -> tuple[PathSet, PathSet]:
        p = self.paths
        paths_g = PathSet(
            gains=p["g_gains"][i],
            azimuth=p["g_aoa_az"][i],
            elevation=p["g_aoa_el"][i],
            departure_azimuth=p["g_aod_az"][i],
            departure_elevation=p["g_aod_el"][i],
        )
        paths_f = PathSet(gains=p["f_gains"][i], azimuth=p["f_az"][i], elevation=p["f_el"][i])
        return paths_g, paths_f

    def realization(self, i: int) -> ChannelRealization:
        paths_g, paths_f = self._paths(i)
        g = gen_bs_ris(self.ris_geometry, self.bs_geometry, paths_g)
        cascaded = self.cascaded[i] if self.cascaded is not None else cascade(g, self.ris_user[i])
        return ChannelRealization(
            bs_ris=g,
            ris_user=self.ris_user[i],
            cascaded=cascaded,
            grouped=None if self.grouped is None else self.grouped[i],
            region=int(self.region[i]),
            user_index=int(self.user[i]),
            paths_g=paths_g,
            paths_f=paths_f,
        )

    def select(self, mask: np.ndarray) -> "ChannelDataset":
        """Subset by boolean mask or index array; arrays are copied."""

        def pick(a):
            return None if a is None else a[mask]

        return ChannelDataset(
            ris_geometry=self.ris_geometry,
            bs_geometry=self.bs_geometry,
            region=self.region[mask],
            user=self.user[mask],
            sample=self.sample[mask],
            ris_user=self.ris_user[mask],
            cascaded=pick(self.cascaded),
            paths={k: v[mask] for k, v in self.paths.items()},
            grouped=pick(self.grouped),
            grouping=self.grouping,
            header=dict(self.header),
        )

    # -----------------------------------------------------------------------
    # Persistence
    # -----------------------------------------------------------------------

    def _columns(self) -> dict[str, np.ndarray]:
        columns = {
            "index": np.stack([self.region, self.user, self.sample], axis=1).astype(float),
            "ris_user": _interleave(self.ris_user),
        }
        if self.cascaded is not None:
            columns["cascaded"] = _interleave(vectorize(self.cascaded))
        if self.grouped is not None:
            columns["grouped"] = _interleave(vectorize(self.grouped))
        for name in ("g_gains", "f_gains"):
            columns[name] = _interleave(self.paths[name])
        for name in ("g_aoa_az", "g_aoa_el", "g_aod_az", "g_aod_el", "f_az", "f_el"):
            columns[name] = self.paths[name]
        return columns

    def _file_header(self) -> dict:
        header = dict(self.header)
        header.update(
            {
                "format_version": DATASET_FORMAT_VERSION,
                "samples": len(self),
                "ris": [self.ris_geometry.rows, self.ris_geometry.cols],
                "bs": [self.bs_geometry.rows, self.bs_geometry.cols],
                "spacing_over_wavelength": self.ris_geometry.spacing_over_wavelength,
                "grouped_units": None if self.grouped is None else int(self.grouped.shape[1]),
                "complex_layout": "interleaved re/im, column-major per matrix",
            }
        )
        return header

    def save(self, path: Path, fmt: str = "npz") -> Path:
        """
        Persist as `npz` or `csv`. Both formats hold the same column blocks:
        complex values interleaved (re, im), matrices vectorized column-major.
        """
        path.parent.mkdir(parents=True, exist_ok=True)
        columns = self._columns()
        header = self._file_header()
        header["columns"] = {name: int(block.shape[1]) for name, block in columns.items()}

        if fmt == "npz":
            extra = {} if self.grouping is None else {"grouping": self.grouping}
            with path.open("wb") as f:
                np.savez(f, header=np.array(json.dumps(header)), **columns, **extra)
        elif fmt == "csv":
            if self.grouping is not None:
                header["grouping"] = self.grouping.astype(int).tolist()
            table = np.concatenate(list(columns.values()), axis=1)
            np.savetxt(
                path,
                table,
                delimiter=",",
                fmt="%.17g",
                header=json.dumps(header),
                comments="# ",
            )
        else:
            raise ConfigurationError(f"Unknown dataset format '{fmt}'")

        return path

    @classmethod
    def load(cls, path: Path) -> "ChannelDataset":
        if not path.is_file():
            raise InputError(f"Dataset file does not exist: {path}")

        if path.suffix == ".npz":
            with np.load(path) as archive:
                header = json.loads(str(archive["header"]))
                columns = {name: archive[name] for name in header["columns"]}
                grouping = archive["grouping"] if "grouping" in archive.files else None
        else:
            with path.open("r", encoding="utf-8") as f:
                first = f.readline()
            header = json.loads(first.lstrip("#").strip())
            table = np.loadtxt(path, delimiter=",", comments="#", ndmin=2)
            columns, offset = {}, 0
            for name, width in header["columns"].items():
                columns[name] = table[:, offset : offset + width]
                offset += width
            grouping = np.asarray(header.pop("grouping"), dtype=float) if "grouping" in header else None

        ris = ArrayGeometry(*header["ris"], header["spacing_over_wavelength"])
        bs = ArrayGeometry(*header["bs"], header["spacing_over_wavelength"])
        index = columns["index"].astype(int)

        def matrices(name, rows):
            if name not in columns:
                return None
            return unvectorize(_deinterleave(columns[name]), rows)

        paths = {name: _deinterleave(columns[name]) for name in ("g_gains", "f_gains")}
        for name in ("g_aoa_az", "g_aoa_el", "g_aod_az", "g_aod_el", "f_az", "f_el"):
            paths[name] = columns[name]

        file_keys = {"format_version", "samples", "ris", "bs", "spacing_over_wavelength",
                     "grouped_units", "complex_layout", "columns"}
        return cls(
            ris_geometry=ris,
            bs_geometry=bs,
            region=index[:, 0],
            user=index[:, 1],
            sample=index[:, 2],
            ris_user=_deinterleave(columns["ris_user"]),
            cascaded=matrices("cascaded", ris.total),
            grouped=matrices("grouped", header["grouped_units"] or 1),
            grouping=grouping,
            paths=paths,
            header={k: v for k, v in header.items() if k not in file_keys},
        )


# ---------------------------------------------------------------------------
# Dataset generation
# ---------------------------------------------------------------------------


def geometries(config: ExperimentConfig) -> tuple[ArrayGeometry, ArrayGeometry]:
    spacing = config.arrays.spacing_over_wavelength
    return (
        ArrayGeometry(*config.arrays.ris, spacing),
        ArrayGeometry(*config.arrays.bs, spacing),
    )


def frozen_bs_ris_paths(config: ExperimentConfig, seed: int) -> PathSet:
    """The single quasi-static BS-RIS path set shared by every split."""
    return draw_paths(
        config.channel.bs_ris_paths, None, rng_for(seed, "bs-ris"), with_departure=True
    )


def split_counts(config: ExperimentConfig, split: str) -> list[int]:
    """Samples per (region, user) for a split, in `config.users()` order."""
    n_users = len(config.users())
    if split == "train":
        return [config.dataset.samples_per_user] * n_users
    base, extra = divmod(config.dataset.test_size, n_users)
    return [base + (1 if i < extra else 0) for i in range(n_users)]


def _generate_user_block(
    config: ExperimentConfig,
    seed: int,
    split: str,
    region: int,
    user: int,
    count: int,
    grouping: np.ndarray | None = None,
    keep_cascaded: bool = True,
) -> dict[str, np.ndarray]:
    geom_ris, geom_bs = geometries(config)
    partition = RegionPartition.from_degrees(config.regions.edges_deg)
    interval = partition.interval(region)
    l_g, l_f = config.channel.bs_ris_paths, config.channel.ris_user_paths

    frozen = None
    if config.channel.freeze_bs_ris:
        paths_g = frozen_bs_ris_paths(config, seed)
        frozen = (paths_g, gen_bs_ris(geom_ris, geom_bs, paths_g))

    block = {
        "ris_user": np.empty((count, geom_ris.total), dtype=complex),
        "cascaded": np.empty((count, geom_ris.total, geom_bs.total), dtype=complex),
        "g_gains": np.empty((count, l_g), dtype=complex),
        "f_gains": np.empty((count, l_f), dtype=complex),
    }
    for name in ("g_aoa_az", "g_aoa_el", "g_aod_az", "g_aod_el"):
        block[name] = np.empty((count, l_g))
    for name in ("f_az", "f_el"):
        block[name] = np.empty((count, l_f))

    for s in range(count):
        rng = rng_for(seed, f"channels/{split}", region, user, s)
        if frozen is None:
            paths_g = draw_paths(l_g, None, rng, with_departure=True)
            g = gen_bs_ris(geom_ris, geom_bs, paths_g)
        else:
            paths_g, g = frozen
        paths_f = draw_paths(l_f, interval, rng)
        f = gen_ris_user(geom_ris, paths_f)

        block["ris_user"][s] = f
        block["cascaded"][s] = cascade(g, f)
        block["g_gains"][s] = paths_g.gains
        block["g_aoa_az"][s] = paths_g.azimuth
        block["g_aoa_el"][s] = paths_g.elevation
        block["g_aod_az"][s] = paths_g.departure_azimuth
        block["g_aod_el"][s] = paths_g.departure_elevation
        block["f_gains"][s] = paths_f.gains
        block["f_az"][s] = paths_f.azimuth
        block["f_el"][s] = paths_f.elevation

    if grouping is not None:
        block["grouped"] = np.einsum("un,snm->sum", grouping, block["cascaded"])
        if not keep_cascaded:
            del block["cascaded"]

    block["region"] = np.full(count, region, dtype=int)
    block["user"] = np.full(count, user, dtype=int)
    block["sample"] = np.arange(count, dtype=int)
    return block


def generate_dataset(
    config: ExperimentConfig,
    seed: int | None = None,
    split: str = "train",
    grouping: np.ndarray | None = None,
    keep_cascaded: bool = True,
    regions: list[int] | None = None,
    verbose: bool = False,
) -> ChannelDataset:
    """
    Generate the realizations of every (region, user) for `split` ("train" or
    "test"). Each sample draws from its own stream keyed by
    (split, region, user, sample), so the result is a pure function of
    (config, seed) regardless of `dataset.workers`. Grouping is applied per
    user block, so dropped cascaded channels are never stacked.
    """
    seed = config.seed if seed is None else seed
    geom_ris, geom_bs = geometries(config)
    if grouping is not None and grouping.shape[1] != geom_ris.total:
        raise InputError(
            f"Grouping operator has {grouping.shape[1]} columns, RIS has {geom_ris.total} elements"
        )
    jobs = [
        (region, user, count)
        for (region, user), count in zip(config.users(), split_counts(config, split))
        if regions is None or region in regions
    ]
    if not jobs:
        raise InputError(f"No users selected for regions {regions}")

    if config.dataset.workers > 1:
        with ProcessPoolExecutor(max_workers=config.dataset.workers) as pool:
            futures = [
                pool.submit(
                    _generate_user_block, config, seed, split, r, k, n, grouping, keep_cascaded
                )
                for r, k, n in jobs
            ]
            blocks = [future.result() for future in futures]
    else:
        blocks = []
        for region, user, count in jobs:
            if verbose:
                click.echo(f"  📡 Generating {count} {split} channels for region {region} user {user}...")
            blocks.append(
                _generate_user_block(
                    config, seed, split, region, user, count, grouping, keep_cascaded
                )
            )

    def stack(name):
        if name not in blocks[0]:
            return None
        return np.concatenate([b[name] for b in blocks], axis=0)

    path_names = ("g_gains", "g_aoa_az", "g_aoa_el", "g_aod_az", "g_aod_el", "f_gains", "f_az", "f_el")
    return ChannelDataset(
        ris_geometry=geom_ris,
        bs_geometry=geom_bs,
        region=stack("region"),
        user=stack("user"),
        sample=stack("sample"),
        ris_user=stack("ris_user"),
        cascaded=stack("cascaded"),
        grouped=stack("grouped"),
        grouping=None if grouping is None else np.asarray(grouping, dtype=float),
        paths={name: stack(name) for name in path_names},
        header={"config_hash": config_hash(config), "seed": int(seed), "split": split},
    )
