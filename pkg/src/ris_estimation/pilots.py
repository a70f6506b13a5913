import math

from dataclasses import dataclass, field

import numpy as np

from ris_estimation.channel import ArrayGeometry, ChannelRealization, vectorize
from ris_estimation.config import ExperimentConfig
from ris_estimation.errors import ConfigurationError, InputError
from ris_estimation.streams import rng_for

UNIT_TOLERANCE = 1e-9


@dataclass(frozen=True)
class GroupingOperator:
    """0/1 matrix S (N' x N) tying `group_size` RIS elements to one control unit."""

    matrix: np.ndarray
    group_size: int
    block: tuple[int, int] = (1, 1)

    @property
    def units(self) -> int:
        return int(self.matrix.shape[0])


@dataclass
class PilotConfig:
    """
    Pilot phases and BS precoding for one user.

    `phases[q, :]` is phi_q^H (or phi-bar_q^H when grouped), so slot q observes
    phases[q] @ H @ w_q. `precoder` is a single unit-norm vector (held over all
    slots) or a Q x M matrix with one unit-norm precoder per slot.
    """

    phases: np.ndarray
    precoder: np.ndarray
    q_shape: tuple[int, int]
    grouping: GroupingOperator | None = None
    normalize_by_sqrt_q: bool = True

    def __post_init__(self):
        q = self.phases.shape[0]
        if self.q_shape[0] * self.q_shape[1] != q:
            raise InputError(f"q_shape {self.q_shape} does not multiply to Q={q}")
        if np.max(np.abs(np.abs(self.phases) - 1.0)) > UNIT_TOLERANCE:
            raise InputError("Pilot phases must be unit-modulus")
        norms = np.linalg.norm(np.atleast_2d(self.precoder), axis=-1)
        if np.max(np.abs(norms - 1.0)) > UNIT_TOLERANCE:
            raise InputError("Precoders must have unit norm")
        if self.precoder.ndim == 2 and self.precoder.shape[0] != q:
            raise InputError(
                f"Per-slot precoders must have Q={q} rows, got {self.precoder.shape[0]}"
            )
        if self.grouping is not None and self.phases.shape[1] != self.grouping.units:
            raise InputError(
                f"Grouped phases need {self.grouping.units} columns, got {self.phases.shape[1]}"
            )

    @property
    def q(self) -> int:
        return int(self.phases.shape[0])

    @property
    def width(self) -> int:
        return int(self.phases.shape[1])

    @property
    def antennas(self) -> int:
        return int(self.precoder.shape[-1])

    def slot_precoders(self) -> np.ndarray:
        """Q x M precoder matrix (a held precoder is repeated over the slots)."""
        if self.precoder.ndim == 1:
            return np.broadcast_to(self.precoder, (self.q, self.antennas))
        return self.precoder


@dataclass
class Observation:
    raw: np.ndarray
    tensor: np.ndarray
    snr_linear: float
    truth: ChannelRealization | None = None


def db_to_linear(snr_db: float) -> float:
    return 10.0 ** (snr_db / 10.0)


def make_grouping(ris_geom: ArrayGeometry, group_size: int) -> GroupingOperator:
    """
    Cluster the RIS grid into contiguous rectangular blocks of `group_size`
    elements (2x2 for g=4). Element n = c * rows + r belongs to the block
    (r // bh, c // bw); blocks are numbered in the same column-major order.
    """
    n = ris_geom.total
    if group_size < 1 or n % group_size != 0:
        raise ConfigurationError(f"Group size {group_size} does not divide N={n}")

    block = None
    for bh in range(int(math.isqrt(group_size)), 0, -1):
        bw = group_size // bh
        if bh * bw != group_size:
            continue
        for candidate in ((bh, bw), (bw, bh)):
            if ris_geom.rows % candidate[0] == 0 and ris_geom.cols % candidate[1] == 0:
                block = candidate
                break
        if block:
            break
    if block is None:
        raise ConfigurationError(
            f"A {ris_geom.rows}x{ris_geom.cols} RIS cannot be tiled by blocks of {group_size}"
        )

    bh, bw = block
    block_rows = ris_geom.rows // bh
    matrix = np.zeros((n // group_size, n))
    for c in range(ris_geom.cols):
        for r in range(ris_geom.rows):
            unit = (c // bw) * block_rows + (r // bh)
            matrix[unit, c * ris_geom.rows + r] = 1.0

    return GroupingOperator(matrix=matrix, group_size=group_size, block=block)


def gen_pilots(q: int, width: int, alphabet: str, rng: np.random.Generator) -> np.ndarray:
    """i.i.d. unit-modulus pilots from {+1, -1} ("pm1") or the unit circle."""
    if q < 1 or width < 1:
        raise InputError(f"Pilot matrix must be at least 1x1, got {q}x{width}")
    if alphabet == "pm1":
        return rng.choice(np.array([-1.0, 1.0]), size=(q, width)).astype(complex)
    if alphabet == "unit_circle":
        return np.exp(1j * rng.uniform(0.0, 2.0 * np.pi, size=(q, width)))
    raise ConfigurationError(f"Unknown pilot alphabet '{alphabet}'")


def gen_precoders(count: int | None, antennas: int, rng: np.random.Generator) -> np.ndarray:
    """Unit-norm precoders drawn isotropically on the complex sphere."""
    shape = (antennas,) if count is None else (count, antennas)
    w = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    return w / np.linalg.norm(w, axis=-1, keepdims=True)


def measurement_matrix(config: PilotConfig) -> np.ndarray:
    """
    Psi with row q = w_q^T kron Theta[q, :]; column block m holds w_m * Theta so
    that Psi @ vec(H) stacks columns of H. A held precoder gives w^T kron Theta.
    """
    w = config.slot_precoders()
    return (w[:, :, None] * config.phases[:, None, :]).reshape(config.q, -1)


def encode_tensor(raw: np.ndarray, q_shape: tuple[int, int]) -> np.ndarray:
    """(..., Q) complex -> (..., Q1, Q2, 2) real: row-major reshape, channel 0 = real."""
    q1, q2 = q_shape
    if raw.shape[-1] != q1 * q2:
        raise InputError(f"Cannot reshape Q={raw.shape[-1]} into {q1}x{q2}")
    grid = raw.reshape(*raw.shape[:-1], q1, q2)
    return np.stack([grid.real, grid.imag], axis=-1)


def decode_tensor(tensor: np.ndarray) -> np.ndarray:
    grid = tensor[..., 0] + 1j * tensor[..., 1]
    return grid.reshape(*grid.shape[:-2], -1)


def add_noise(clean: np.ndarray, snr_linear, rng: np.random.Generator) -> np.ndarray:
    """Add CN(0, 1/snr) noise; `snr_linear` may be a scalar or one value per row."""
    snr = np.asarray(snr_linear, dtype=float)
    if np.any(snr <= 0):
        raise InputError("SNR must be positive")
    sigma = np.sqrt(1.0 / snr)
    if sigma.ndim == 1:
        sigma = sigma[:, None]
    noise = rng.standard_normal(clean.shape) + 1j * rng.standard_normal(clean.shape)
    return clean + sigma * noise / np.sqrt(2.0)


def to_tensor(raw: np.ndarray, config: PilotConfig) -> np.ndarray:
    scaled = raw / np.sqrt(config.q) if config.normalize_by_sqrt_q else raw
    return encode_tensor(scaled, config.q_shape)


def observe(
    realization: ChannelRealization,
    config: PilotConfig,
    snr_linear: float,
    rng: np.random.Generator,
) -> Observation:
    """y = Psi vec(H) + n (grouped: Psi-bar vec(S H) + n), noise variance 1/snr."""
    if config.grouping is not None:
        if realization.grouped is None:
            raise InputError("Grouped pilot config needs a realization with a grouped channel")
        channel = realization.grouped
    else:
        channel = realization.cascaded

    if channel.shape != (config.width, config.antennas):
        raise InputError(
            f"Channel shape {channel.shape} does not match pilots "
            f"{config.width}x{config.antennas}"
        )

    clean = measurement_matrix(config) @ vectorize(channel)
    raw = add_noise(clean, snr_linear, rng)
    return Observation(
        raw=raw, tensor=to_tensor(raw, config), snr_linear=float(snr_linear), truth=realization
    )


def observe_batch(
    channels: np.ndarray, psi: np.ndarray, snr_linear, rng: np.random.Generator
) -> np.ndarray:
    """Vectorized `observe` for stacked channel vectors (S, D) sharing one Psi."""
    if channels.shape[-1] != psi.shape[1]:
        raise InputError(
            f"Channel length {channels.shape[-1]} does not match Psi width {psi.shape[1]}"
        )
    return add_noise(channels @ psi.T, snr_linear, rng)


@dataclass
class PilotBank:
    """
    The pilots of one system: a shared phase matrix and the users' precoders.
    Precoders are fixed per user (`scope="user"`) or drawn per sample.
    """

    phases: np.ndarray
    q_shape: tuple[int, int]
    antennas: int
    seed: int
    purpose: str
    scope: str = "user"
    per_slot: bool = True
    grouping: GroupingOperator | None = None
    normalize_by_sqrt_q: bool = True
    user_precoders: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)

    def _draw_precoder(self, *key: int) -> np.ndarray:
        rng = rng_for(self.seed, f"{self.purpose}/precoder", *key)
        count = self.phases.shape[0] if self.per_slot else None
        return gen_precoders(count, self.antennas, rng)

    def config_for(self, region: int, user: int, sample: int | None = None) -> PilotConfig:
        if self.scope == "sample":
            if sample is None:
                raise InputError("Per-sample precoders need a sample index")
            precoder = self._draw_precoder(region, user, sample)
        else:
            key = (region, user)
            if key not in self.user_precoders:
                self.user_precoders[key] = self._draw_precoder(region, user)
            precoder = self.user_precoders[key]

        return PilotConfig(
            phases=self.phases,
            precoder=precoder,
            q_shape=self.q_shape,
            grouping=self.grouping,
            normalize_by_sqrt_q=self.normalize_by_sqrt_q,
        )


def build_pilot_bank(
    config: ExperimentConfig,
    seed: int | None = None,
    q: int | None = None,
    q_shape: tuple[int, int] | None = None,
    purpose: str = "pilots",
    grouping: GroupingOperator | None = None,
    normalize_by_sqrt_q: bool | None = None,
) -> PilotBank:
    """
    Pilots for the NN input path by default; pass another `purpose` and `q`
    for fresh long-pilot soundings (labels, baselines, sweeps).
    """
    seed = config.seed if seed is None else seed
    q = config.pilots.q if q is None else q
    if q_shape is None:
        q_shape = config.pilots.q_shape if q == config.pilots.q else (q, 1)
    if normalize_by_sqrt_q is None:
        normalize_by_sqrt_q = config.pilots.normalize_by_sqrt_q

    width = grouping.units if grouping is not None else config.n_ris
    phases = gen_pilots(q, width, config.pilots.alphabet, rng_for(seed, f"{purpose}/phases"))
    return PilotBank(
        phases=phases,
        q_shape=tuple(q_shape),
        antennas=config.n_bs,
        seed=seed,
        purpose=purpose,
        scope=config.pilots.precoder_scope,
        per_slot=config.pilots.per_slot_precoder,
        grouping=grouping,
        normalize_by_sqrt_q=normalize_by_sqrt_q,
    )


def grouping_for(config: ExperimentConfig) -> GroupingOperator | None:
    if not config.grouped:
        return None
    ris = ArrayGeometry(*config.arrays.ris, config.arrays.spacing_over_wavelength)
    return make_grouping(ris, config.group_size)
