import copy
import hashlib
import json

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ris_estimation.classical import nmse
from ris_estimation.config import ExperimentConfig
from ris_estimation.errors import ConfigurationError, InputError
from ris_estimation.layers import (
    BatchNormCache,
    BatchStatistics,
    ConvCache,
    MacCounter,
    batchnorm_backward,
    batchnorm_forward,
    conv2d_backward,
    conv2d_forward,
    dense_backward,
    dense_forward,
    glorot_uniform,
    relu_backward,
    relu_forward,
    softmax,
    softmax_backward,
    update_running,
)
from ris_estimation.streams import rng_for

KERNEL_SIZE = 3
EXPERT_CHANNELS = 32
EXPERT_LAYERS = 3
CLASSIFIER_CHANNELS = 16
CLASSIFIER_LAYERS = 2
PROBABILITY_FLOOR = 1e-12
CHECKPOINT_VERSION = 1

GATING_MODES = ("hard", "soft")
LOSSES = ("estimation", "classification")


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


@dataclass
class ConvLayerParams:
    """Convolution (k x k x Cin x Cout) with optional batch normalization."""

    kernel: np.ndarray
    bias: np.ndarray
    bn_gamma: np.ndarray | None = None
    bn_beta: np.ndarray | None = None
    bn_running_mean: np.ndarray | None = None
    bn_running_var: np.ndarray | None = None

    def __post_init__(self):
        if self.bn_running_var is not None and np.any(self.bn_running_var <= 0):
            raise InputError("Batch-norm running variance must be positive")

    @property
    def batchnorm(self) -> bool:
        return self.bn_gamma is not None

    @property
    def out_channels(self) -> int:
        return int(self.kernel.shape[-1])


@dataclass
class DenseParams:
    weight: np.ndarray
    bias: np.ndarray


@dataclass
class ClassifierParams:
    convs: list[ConvLayerParams]
    dense: DenseParams

    @property
    def n_regions(self) -> int:
        return int(self.dense.weight.shape[1])


@dataclass
class ExpertParams:
    convs: list[ConvLayerParams]

    @property
    def out_channels(self) -> int:
        return self.convs[-1].out_channels


@dataclass
class MapperParams:
    mix: ConvLayerParams
    dense: DenseParams


@dataclass
class ModelParams:
    classifier: ClassifierParams
    experts: list[ExpertParams]
    mapper: MapperParams
    q_shape: tuple[int, int]
    channel_dim: int

    def __post_init__(self):
        if len(self.experts) != self.classifier.n_regions:
            raise InputError(
                f"Model has {len(self.experts)} experts but the classifier has "
                f"{self.classifier.n_regions} outputs"
            )
        shapes = {
            tuple(layer.kernel.shape for layer in expert.convs) for expert in self.experts
        }
        if len(shapes) != 1:
            raise InputError("All experts must share identical shapes")
        if self.mapper.dense.weight.shape[1] != 2 * self.channel_dim:
            raise InputError(
                f"Mapper output length {self.mapper.dense.weight.shape[1]} != 2*D={2 * self.channel_dim}"
            )

    @property
    def n_regions(self) -> int:
        return len(self.experts)

    @property
    def expert_channels(self) -> int:
        return self.experts[0].out_channels

    @property
    def classifier_channels(self) -> int:
        return self.classifier.convs[0].out_channels

    def layers(self) -> list[tuple[str, ConvLayerParams | DenseParams]]:
        named: list[tuple[str, ConvLayerParams | DenseParams]] = []
        named += [(f"classifier.conv{i}", c) for i, c in enumerate(self.classifier.convs)]
        named.append(("classifier.dense", self.classifier.dense))
        for r, expert in enumerate(self.experts, start=1):
            named += [(f"expert{r}.conv{i}", c) for i, c in enumerate(expert.convs)]
        named.append(("mapper.mix", self.mapper.mix))
        named.append(("mapper.dense", self.mapper.dense))
        return named

    def _slots(self, buffers: bool) -> list[tuple[str, object, str]]:
        slots = []
        for prefix, layer in self.layers():
            if isinstance(layer, DenseParams):
                attrs = () if buffers else ("weight", "bias")
            elif buffers:
                attrs = ("bn_running_mean", "bn_running_var") if layer.batchnorm else ()
            else:
                attrs = ("kernel", "bias") + (("bn_gamma", "bn_beta") if layer.batchnorm else ())
            slots += [(f"{prefix}.{attr}", layer, attr) for attr in attrs]
        return slots

    def trainable(self) -> dict[str, np.ndarray]:
        return {name: getattr(owner, attr) for name, owner, attr in self._slots(False)}

    def buffers(self) -> dict[str, np.ndarray]:
        return {name: getattr(owner, attr) for name, owner, attr in self._slots(True)}

    def arrays(self) -> dict[str, np.ndarray]:
        return {**self.trainable(), **self.buffers()}

    def copy(self) -> "ModelParams":
        return copy.deepcopy(self)

    def with_arrays(self, updates: dict[str, np.ndarray]) -> "ModelParams":
        """A copy of the model with the named arrays replaced."""
        clone = self.copy()
        slots = {name: (owner, attr) for name, owner, attr in clone._slots(False) + clone._slots(True)}
        for name, value in updates.items():
            if name not in slots:
                raise InputError(f"Unknown parameter '{name}'")
            owner, attr = slots[name]
            if np.shape(value) != getattr(owner, attr).shape:
                raise InputError(f"Shape mismatch for '{name}'")
            setattr(owner, attr, np.array(value, dtype=float))
        return clone


@dataclass
class GateOutput:
    """Region probabilities and the 1-based argmax (lowest index wins ties)."""

    probabilities: np.ndarray
    hard_choice: np.ndarray | int

    @classmethod
    def from_probabilities(cls, probabilities: np.ndarray) -> "GateOutput":
        choice = np.argmax(probabilities, axis=-1) + 1
        return cls(probabilities=probabilities, hard_choice=choice if choice.ndim else int(choice))


def _conv_layer(k: int, c_in: int, c_out: int, rng, batchnorm: bool = True) -> ConvLayerParams:
    kernel = glorot_uniform((k, k, c_in, c_out), k * k * c_in, k * k * c_out, rng)
    layer = ConvLayerParams(kernel=kernel, bias=np.zeros(c_out))
    if batchnorm:
        layer.bn_gamma = np.ones(c_out)
        layer.bn_beta = np.zeros(c_out)
        layer.bn_running_mean = np.zeros(c_out)
        layer.bn_running_var = np.ones(c_out)
    return layer


def _dense(fan_in: int, fan_out: int, rng) -> DenseParams:
    return DenseParams(
        weight=glorot_uniform((fan_in, fan_out), fan_in, fan_out, rng), bias=np.zeros(fan_out)
    )


def init_model(
    q_shape: tuple[int, int],
    channel_dim: int,
    n_regions: int,
    rng: np.random.Generator,
    expert_channels: int = EXPERT_CHANNELS,
    classifier_channels: int = CLASSIFIER_CHANNELS,
) -> ModelParams:
    """Glorot-uniform weights, zero biases, gamma = 1, beta = 0."""
    if n_regions < 1 or channel_dim < 1:
        raise ConfigurationError("Model needs at least one region and a positive channel dimension")

    k = KERNEL_SIZE
    classifier = ClassifierParams(
        convs=[
            _conv_layer(k, 2 if i == 0 else classifier_channels, classifier_channels, rng)
            for i in range(CLASSIFIER_LAYERS)
        ],
        dense=_dense(classifier_channels, n_regions, rng),
    )
    experts = [
        ExpertParams(
            convs=[
                _conv_layer(k, 2 if i == 0 else expert_channels, expert_channels, rng)
                for i in range(EXPERT_LAYERS)
            ]
        )
        for _ in range(n_regions)
    ]
    spatial = q_shape[0] * q_shape[1]
    mapper = MapperParams(
        mix=_conv_layer(1, expert_channels, expert_channels, rng, batchnorm=False),
        dense=_dense(spatial * expert_channels, 2 * channel_dim, rng),
    )
    return ModelParams(
        classifier=classifier,
        experts=experts,
        mapper=mapper,
        q_shape=tuple(q_shape),
        channel_dim=channel_dim,
    )


def model_regions(config: ExperimentConfig) -> int:
    """The single-region regime trains one expert; the others one per region."""
    return 1 if config.experiment == "single-region" else config.n_regions


def init_model_for(config: ExperimentConfig, seed: int | None = None) -> ModelParams:
    seed = config.seed if seed is None else seed
    return init_model(
        config.pilots.q_shape,
        config.channel_dim,
        model_regions(config),
        rng_for(seed, "model-init"),
    )


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------


@dataclass
class BlockCache:
    conv: ConvCache
    bn: BatchNormCache | None
    activation: np.ndarray | None
    stats: BatchStatistics | None
    train: bool


@dataclass
class ClassifierCache:
    blocks: list[BlockCache]
    pooled: np.ndarray
    spatial_shape: tuple[int, ...]


@dataclass
class ExpertCache:
    indices: np.ndarray
    blocks: list[BlockCache]
    output: np.ndarray


@dataclass
class MapperCache:
    mix: ConvCache
    flat: np.ndarray
    mixed_shape: tuple[int, ...]


@dataclass
class ForwardCache:
    gating: str
    probabilities: np.ndarray
    route: np.ndarray
    classifier: ClassifierCache
    experts: dict[int, ExpertCache]
    mapper: MapperCache
    outputs: np.ndarray
    batch_stats: dict[str, BatchStatistics] = field(default_factory=dict)


def _block_forward(x, layer: ConvLayerParams, train: bool, counter, tag, relu: bool = True):
    z, conv_cache = conv2d_forward(x, layer.kernel, layer.bias, counter, tag)
    bn_cache = stats = None
    if layer.batchnorm:
        z, bn_cache, stats = batchnorm_forward(
            z, layer.bn_gamma, layer.bn_beta, layer.bn_running_mean, layer.bn_running_var, train
        )
    if relu:
        z = relu_forward(z)
    return z, BlockCache(conv_cache, bn_cache, z if relu else None, stats, train)


def _block_backward(dout, layer: ConvLayerParams, cache: BlockCache) -> tuple[np.ndarray, dict]:
    grads = {}
    if cache.activation is not None:
        dout = relu_backward(dout, cache.activation)
    if layer.batchnorm:
        dout, grads["bn_gamma"], grads["bn_beta"] = batchnorm_backward(
            dout, layer.bn_gamma, cache.bn, cache.train
        )
    dx, grads["kernel"], grads["bias"] = conv2d_backward(dout, layer.kernel, cache.conv)
    return dx, grads


def _as_batch(tensor: np.ndarray) -> tuple[np.ndarray, bool]:
    tensor = np.asarray(tensor, dtype=float)
    if tensor.ndim == 3:
        return tensor[None], True
    if tensor.ndim == 4:
        return tensor, False
    raise InputError(f"Expected a Q1 x Q2 x C tensor or a batch of them, got shape {tensor.shape}")


def _check_mode(mode: str) -> bool:
    if mode not in ("train", "eval"):
        raise InputError(f"Mode must be 'train' or 'eval', got '{mode}'")
    return mode == "train"


def _classifier_apply(x, params: ClassifierParams, train: bool, counter):
    if x.shape[-1] != params.convs[0].kernel.shape[2]:
        raise InputError(f"Classifier expects {params.convs[0].kernel.shape[2]} input channels")
    h, blocks = x, []
    for layer in params.convs:
        h, cache = _block_forward(h, layer, train, counter, "classifier")
        blocks.append(cache)
    pooled = h.mean(axis=(1, 2))
    logits = dense_forward(pooled, params.dense.weight, params.dense.bias, counter, "classifier")
    return softmax(logits), ClassifierCache(blocks, pooled, h.shape)


def _classifier_backward(dlogits, params: ClassifierParams, cache: ClassifierCache) -> dict:
    grads = {}
    dpooled, grads["dense.weight"], grads["dense.bias"] = dense_backward(
        dlogits, cache.pooled, params.dense.weight
    )
    _, h, w, _ = cache.spatial_shape
    dh = np.broadcast_to(dpooled[:, None, None, :] / (h * w), cache.spatial_shape).copy()
    for i in reversed(range(len(params.convs))):
        dh, layer_grads = _block_backward(dh, params.convs[i], cache.blocks[i])
        grads.update({f"conv{i}.{k}": v for k, v in layer_grads.items()})
    return grads


def _expert_apply(x, expert: ExpertParams, train: bool, counter, tag):
    h, blocks = x, []
    for layer in expert.convs:
        h, cache = _block_forward(h, layer, train, counter, tag)
        blocks.append(cache)
    return h, blocks


def _expert_backward(dout, expert: ExpertParams, blocks: list[BlockCache]) -> dict:
    grads = {}
    for i in reversed(range(len(expert.convs))):
        dout, layer_grads = _block_backward(dout, expert.convs[i], blocks[i])
        grads.update({f"conv{i}.{k}": v for k, v in layer_grads.items()})
    return grads


def _mapper_apply(features, params: MapperParams, counter):
    if features.shape[-1] != params.mix.kernel.shape[2]:
        raise InputError(
            f"Mapper expects {params.mix.kernel.shape[2]} feature channels, got {features.shape[-1]}"
        )
    mixed, mix_cache = conv2d_forward(features, params.mix.kernel, params.mix.bias, counter, "mapper.mix")
    flat = mixed.reshape(mixed.shape[0], -1)
    if flat.shape[1] != params.dense.weight.shape[0]:
        raise InputError(
            f"Mapper expects {params.dense.weight.shape[0]} flattened features, got {flat.shape[1]}"
        )
    out = dense_forward(flat, params.dense.weight, params.dense.bias, counter, "mapper.dense")
    return out, MapperCache(mix_cache, flat, mixed.shape)


def _mapper_backward(dout, params: MapperParams, cache: MapperCache) -> tuple[np.ndarray, dict]:
    grads = {}
    dflat, grads["dense.weight"], grads["dense.bias"] = dense_backward(
        dout, cache.flat, params.dense.weight
    )
    dfeatures, grads["mix.kernel"], grads["mix.bias"] = conv2d_backward(
        dflat.reshape(cache.mixed_shape), params.mix.kernel, cache.mix
    )
    return dfeatures, grads


def _unpack(outputs: np.ndarray) -> np.ndarray:
    """[re_1..re_D, im_1..im_D] -> complex D."""
    d = outputs.shape[-1] // 2
    return outputs[..., :d] + 1j * outputs[..., d:]


def classifier_forward(
    tensor: np.ndarray, params: ClassifierParams, mode: str = "eval", counter: MacCounter | None = None
) -> GateOutput:
    x, single = _as_batch(tensor)
    probabilities, _ = _classifier_apply(x, params, _check_mode(mode), counter)
    return GateOutput.from_probabilities(probabilities[0] if single else probabilities)


def expert_forward(
    tensor: np.ndarray, expert: ExpertParams, mode: str = "eval", counter: MacCounter | None = None
) -> np.ndarray:
    x, single = _as_batch(tensor)
    if x.shape[-1] != expert.convs[0].kernel.shape[2]:
        raise InputError(
            f"Expert expects {expert.convs[0].kernel.shape[2]} input channels, got {x.shape[-1]}"
        )
    features, _ = _expert_apply(x, expert, _check_mode(mode), counter, "expert")
    return features[0] if single else features


def mapper_forward(
    features: np.ndarray, params: MapperParams, counter: MacCounter | None = None
) -> np.ndarray:
    z, single = _as_batch(features)
    outputs, _ = _mapper_apply(z, params, counter)
    estimates = _unpack(outputs)
    return estimates[0] if single else estimates


def forward(
    model: ModelParams,
    tensors: np.ndarray,
    gating: str = "hard",
    mode: str = "eval",
    classifier_mode: str | None = None,
    counter: MacCounter | None = None,
) -> tuple[np.ndarray, GateOutput, ForwardCache]:
    """
    Batched estimator pass over tensors (B, Q1, Q2, 2). Hard gating runs each
    sample through its argmax expert only (train-mode batch statistics are
    taken over the samples routed to that expert); soft gating mixes every
    expert's feature map with the gate probabilities before the mapper.
    `classifier_mode` lets a frozen classifier run in eval mode while the
    experts train.
    """
    if gating not in GATING_MODES:
        raise InputError(f"Gating must be one of {GATING_MODES}, got '{gating}'")
    x, _ = _as_batch(tensors)
    if x.shape[1:] != (*model.q_shape, 2):
        raise InputError(f"Tensor shape {x.shape[1:]} does not match model {(*model.q_shape, 2)}")

    train = _check_mode(mode)
    classifier_train = _check_mode(classifier_mode or mode)

    probabilities, classifier_cache = _classifier_apply(x, model.classifier, classifier_train, counter)
    gate = GateOutput.from_probabilities(probabilities)
    route = np.atleast_1d(gate.hard_choice)

    features = np.zeros((x.shape[0], *model.q_shape, model.expert_channels))
    experts: dict[int, ExpertCache] = {}
    for r, expert in enumerate(model.experts, start=1):
        if gating == "hard":
            indices = np.flatnonzero(route == r)
            if indices.size == 0:
                continue
            out, blocks = _expert_apply(x[indices], expert, train, counter, f"expert.{r}")
            features[indices] = out
        else:
            indices = np.arange(x.shape[0])
            out, blocks = _expert_apply(x, expert, train, counter, f"expert.{r}")
            features += probabilities[:, r - 1, None, None, None] * out
        experts[r] = ExpertCache(indices, blocks, out)

    outputs, mapper_cache = _mapper_apply(features, model.mapper, counter)

    batch_stats: dict[str, BatchStatistics] = {}
    if classifier_train:
        for i, block in enumerate(classifier_cache.blocks):
            batch_stats[f"classifier.conv{i}"] = block.stats
    if train:
        for r, expert_cache in experts.items():
            for i, block in enumerate(expert_cache.blocks):
                batch_stats[f"expert{r}.conv{i}"] = block.stats

    cache = ForwardCache(
        gating=gating,
        probabilities=probabilities,
        route=route,
        classifier=classifier_cache,
        experts=experts,
        mapper=mapper_cache,
        outputs=outputs,
        batch_stats=batch_stats,
    )
    return _unpack(outputs), gate, cache


def estimator_forward(
    tensor: np.ndarray, model: ModelParams, gating: str = "hard", mode: str = "eval"
) -> tuple[np.ndarray, GateOutput]:
    x, single = _as_batch(tensor)
    estimates, gate, _ = forward(model, x, gating=gating, mode=mode)
    if single:
        return estimates[0], GateOutput.from_probabilities(gate.probabilities[0])
    return estimates, gate


# ---------------------------------------------------------------------------
# Losses and backward
# ---------------------------------------------------------------------------


def loss_estimation(estimates: np.ndarray, truth: np.ndarray) -> float:
    """Batch mean of ||h_hat - h||^2 / ||h||^2."""
    return nmse(np.atleast_2d(estimates), np.atleast_2d(truth))


def loss_classification(probabilities: np.ndarray, regions) -> float:
    """-mean log p(true region), with p clamped at 1e-12; regions are 1-based."""
    probabilities = np.atleast_2d(probabilities)
    regions = np.atleast_1d(regions)
    p_true = probabilities[np.arange(len(regions)), regions - 1]
    return float(-np.mean(np.log(np.maximum(p_true, PROBABILITY_FLOOR))))


def _estimation_grad(outputs: np.ndarray, truth: np.ndarray) -> np.ndarray:
    truth = np.atleast_2d(truth)
    energy = np.sum(np.abs(truth) ** 2, axis=1)
    if np.any(energy == 0):
        raise InputError("NMSE is undefined for a zero truth vector")
    diff = _unpack(outputs) - truth
    scale = 2.0 / (truth.shape[0] * energy[:, None])
    return np.concatenate([diff.real * scale, diff.imag * scale], axis=1)


def _classification_grad(probabilities: np.ndarray, regions: np.ndarray) -> np.ndarray:
    b = probabilities.shape[0]
    rows = np.arange(b)
    onehot = np.zeros_like(probabilities)
    onehot[rows, regions - 1] = 1.0
    dlogits = (probabilities - onehot) / b
    # the clamp is flat below the floor
    dlogits[probabilities[rows, regions - 1] < PROBABILITY_FLOOR] = 0.0
    return dlogits


def classifier_gradients(
    model: ModelParams, tensors: np.ndarray, regions: np.ndarray
) -> tuple[float, dict[str, np.ndarray], dict[str, BatchStatistics]]:
    """Train-mode cross-entropy pass over the classifier alone."""
    x, _ = _as_batch(tensors)
    regions = np.atleast_1d(regions)
    probabilities, cache = _classifier_apply(x, model.classifier, True, None)
    loss = loss_classification(probabilities, regions)
    part = _classifier_backward(
        _classification_grad(probabilities, regions), model.classifier, cache
    )
    grads = {f"classifier.{name}": value for name, value in part.items()}
    stats = {f"classifier.conv{i}": block.stats for i, block in enumerate(cache.blocks)}
    return loss, grads, stats


def predict_regions(model: ModelParams, tensors: np.ndarray, batch_size: int = 1024) -> np.ndarray:
    """1-based hard choices of the classifier in eval mode."""
    x, _ = _as_batch(tensors)
    choices = []
    for start in range(0, x.shape[0], batch_size):
        probabilities, _ = _classifier_apply(x[start : start + batch_size], model.classifier, False, None)
        choices.append(np.argmax(probabilities, axis=-1) + 1)
    return np.concatenate(choices) if choices else np.zeros(0, dtype=int)


def infer(
    model: ModelParams, tensors: np.ndarray, gating: str = "hard", batch_size: int = 1024
) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode estimates and 1-based gate choices, computed in chunks."""
    x, _ = _as_batch(tensors)
    estimates, choices = [], []
    for start in range(0, x.shape[0], batch_size):
        est, gate, _ = forward(model, x[start : start + batch_size], gating=gating, mode="eval")
        estimates.append(est)
        choices.append(np.atleast_1d(gate.hard_choice))
    if not estimates:
        return np.zeros((0, model.channel_dim), dtype=complex), np.zeros(0, dtype=int)
    return np.concatenate(estimates), np.concatenate(choices)


def _merge(grads: dict, prefix: str, part: dict) -> None:
    for name, value in part.items():
        grads[f"{prefix}.{name}"] = value


def backward(
    model: ModelParams,
    cache: ForwardCache,
    loss: str = "estimation",
    targets: np.ndarray | None = None,
    regions: np.ndarray | None = None,
    loss_scale: float = 1.0,
) -> dict[str, np.ndarray]:
    """
    Exact gradients of the selected loss for every trainable array (zeros for
    parameters off the active path). Hard gating never reaches the classifier
    through the estimation loss.
    """
    if loss not in LOSSES:
        raise InputError(f"Loss must be one of {LOSSES}, got '{loss}'")
    grads = {name: np.zeros_like(a) for name, a in model.trainable().items()}

    if loss == "classification":
        if regions is None:
            raise InputError("Classification loss needs region labels")
        dlogits = _classification_grad(cache.probabilities, np.atleast_1d(regions)) * loss_scale
        _merge(grads, "classifier", _classifier_backward(dlogits, model.classifier, cache.classifier))
        return grads

    if targets is None:
        raise InputError("Estimation loss needs target channels")
    dout = _estimation_grad(cache.outputs, targets) * loss_scale
    dfeatures, mapper_grads = _mapper_backward(dout, model.mapper, cache.mapper)
    _merge(grads, "mapper", mapper_grads)

    if cache.gating == "hard":
        for r, expert_cache in cache.experts.items():
            part = _expert_backward(
                dfeatures[expert_cache.indices], model.experts[r - 1], expert_cache.blocks
            )
            _merge(grads, f"expert{r}", part)
        return grads

    probabilities = cache.probabilities
    dprob = np.zeros_like(probabilities)
    for r, expert_cache in cache.experts.items():
        weight = probabilities[:, r - 1, None, None, None]
        part = _expert_backward(dfeatures * weight, model.experts[r - 1], expert_cache.blocks)
        _merge(grads, f"expert{r}", part)
        dprob[:, r - 1] = np.sum(dfeatures * expert_cache.output, axis=(1, 2, 3))
    dlogits = softmax_backward(dprob, probabilities)
    _merge(grads, "classifier", _classifier_backward(dlogits, model.classifier, cache.classifier))
    return grads


# ---------------------------------------------------------------------------
# Batch-norm running statistics
# ---------------------------------------------------------------------------


def merge_batch_statistics(
    parts: list[dict[str, BatchStatistics]],
) -> dict[str, BatchStatistics]:
    """Pool per-layer batch statistics from several batches (count-weighted)."""
    if len(parts) == 1:
        return dict(parts[0])

    merged = {}
    for name in sorted({n for part in parts for n in part}):
        stats = [part[name] for part in parts if name in part]
        counts = np.array([s.count for s in stats], dtype=float)
        weights = counts / counts.sum()
        mean = sum(w * s.mean for w, s in zip(weights, stats))
        second = sum(w * (s.var + s.mean**2) for w, s in zip(weights, stats))
        merged[name] = BatchStatistics(mean=mean, var=second - mean**2, count=int(counts.sum()))
    return merged


def apply_batch_statistics(
    model: ModelParams, batch_stats: dict[str, BatchStatistics], momentum: float = 0.9
) -> ModelParams:
    updates = {}
    running = model.buffers()
    for name, stats in batch_stats.items():
        if stats is None:
            continue
        mean_key, var_key = f"{name}.bn_running_mean", f"{name}.bn_running_var"
        updates[mean_key] = update_running(running[mean_key], stats.mean, momentum)
        updates[var_key] = update_running(running[var_key], stats.var, momentum)
    return model.with_arrays(updates) if updates else model


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """Bias-corrected Adam over the arrays named in `grads`; inputs are not mutated."""
    step = state.step + 1
    new_params, new_m, new_v = {}, dict(state.m), dict(state.v)
    for name, g in grads.items():
        m = beta1 * state.m.get(name, np.zeros_like(g)) + (1.0 - beta1) * g
        v = beta2 * state.v.get(name, np.zeros_like(g)) + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**step)
        v_hat = v / (1.0 - beta2**step)
        new_params[name] = params[name] - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(step=step, m=new_m, v=new_v)


def sgd_step(
    params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float
) -> dict[str, np.ndarray]:
    return {name: params[name] - lr * g for name, g in grads.items()}


# ---------------------------------------------------------------------------
# Complexity
# ---------------------------------------------------------------------------


def mac_breakdown(
    q_shape: tuple[int, int],
    channel_dim: int,
    n_regions: int,
    expert_channels: int = EXPERT_CHANNELS,
    classifier_channels: int = CLASSIFIER_CHANNELS,
) -> dict[str, int]:
    """Per-sample MACs of a hard-gated inference (one expert active)."""
    spatial = q_shape[0] * q_shape[1]
    k2 = KERNEL_SIZE * KERNEL_SIZE

    expert_pairs = 2 * expert_channels + (EXPERT_LAYERS - 1) * expert_channels**2
    classifier_pairs = 2 * classifier_channels + (CLASSIFIER_LAYERS - 1) * classifier_channels**2
    macs = {
        "classifier": k2 * spatial * classifier_pairs + classifier_channels * n_regions,
        "expert": k2 * spatial * expert_pairs,
        "mapper.mix": spatial * expert_channels * expert_channels,
        "mapper.dense": spatial * expert_channels * 2 * channel_dim,
    }
    macs["total"] = sum(macs.values())
    return macs


def mac_count(config: ExperimentConfig) -> dict[str, int]:
    return mac_breakdown(config.pilots.q_shape, config.channel_dim, model_regions(config))


def model_mac_count(model: ModelParams) -> dict[str, int]:
    return mac_breakdown(
        model.q_shape,
        model.channel_dim,
        model.n_regions,
        model.expert_channels,
        model.classifier_channels,
    )


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def _checkpoint_header(model: ModelParams, config_hash: str | None) -> dict:
    return {
        "version": CHECKPOINT_VERSION,
        "config_hash": config_hash,
        "n_regions": model.n_regions,
        "channel_dim": model.channel_dim,
        "q_shape": list(model.q_shape),
        "expert_channels": model.expert_channels,
        "classifier_channels": model.classifier_channels,
        "parameters": [[name, list(a.shape)] for name, a in model.arrays().items()],
    }


def _flatten(model: ModelParams) -> np.ndarray:
    """
    Little-endian float64 blob in `model.arrays()` order: classifier conv blocks
    and dense head, then expert{r} blocks for r = 1..R, then mapper.mix and
    mapper.dense, followed by the batch-norm running buffers in the same layer order.
    """
    return np.concatenate([np.ravel(a) for a in model.arrays().values()]).astype("<f8")


def checkpoint_hash(model: ModelParams, config_hash: str | None = None) -> str:
    """SHA-256 over the checkpoint header and parameter blob (not the zip container)."""
    digest = hashlib.sha256()
    digest.update(json.dumps(_checkpoint_header(model, config_hash), sort_keys=True).encode("utf-8"))
    digest.update(_flatten(model).tobytes())
    return digest.hexdigest()


def save_checkpoint(model: ModelParams, path: Path, config_hash: str | None = None) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    header = _checkpoint_header(model, config_hash)
    header["content_hash"] = checkpoint_hash(model, config_hash)
    with path.open("wb") as f:
        np.savez(f, header=np.array(json.dumps(header)), blob=_flatten(model))
    return path


def load_checkpoint(path: Path, expected_config_hash: str | None = None) -> ModelParams:
    if not path.is_file():
        raise InputError(f"Checkpoint does not exist: {path}")

    with np.load(path) as archive:
        header = json.loads(str(archive["header"]))
        blob = archive["blob"]

    if header.get("version") != CHECKPOINT_VERSION:
        raise ConfigurationError(f"Unsupported checkpoint version {header.get('version')}")
    if expected_config_hash is not None and header["config_hash"] != expected_config_hash:
        raise ConfigurationError(
            f"Checkpoint {path} was trained with config {header['config_hash'][:12]}..., "
            f"active config is {expected_config_hash[:12]}..."
        )

    model = init_model(
        tuple(header["q_shape"]),
        header["channel_dim"],
        header["n_regions"],
        np.random.default_rng(0),
        expert_channels=header["expert_channels"],
        classifier_channels=header["classifier_channels"],
    )
    arrays, offset = {}, 0
    for name, shape in header["parameters"]:
        size = int(np.prod(shape))
        arrays[name] = blob[offset : offset + size].reshape(shape)
        offset += size
    if offset != blob.size:
        raise InputError(f"Checkpoint blob has {blob.size} values, header describes {offset}")
    return model.with_arrays(arrays)
