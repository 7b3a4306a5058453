"""Sample-level 1-D CNN encoder, projection head, probe heads and filter spectra."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import (BatchNormState, Tensor, batchnorm1d, conv1d, global_avg_pool,
                       kaiming_init, linear, load_tensors, maxpool1d, relu, save_tensors)
from .errors import CheckpointError, InvalidLayer, ShapeMismatch

KERNEL = 3


@dataclass
class EncoderConfig:
    """Layer plan: a strided first conv, then blocks of conv/BN/ReLU/max-pool.

    ``channels[0]`` is the first conv's width, ``channels[1:]`` the blocks'.
    The block convs pad by one so only the first stride and the pools shrink
    the signal; with all factors equal to 3 the temporal size ends at 1.
    """

    input_length: int = 59049
    channels: list[int] = field(
        default_factory=lambda: [128, 128, 128, 128, 256, 256, 256, 256, 512, 512])
    first_stride: int = 3
    pool: int = 3
    projection_dim: int = 128

    def __post_init__(self):
        self.channels = [int(c) for c in self.channels]
        if len(self.channels) < 2 or min(self.channels) < 1:
            raise ValueError(f"invalid channel plan {self.channels}")
        expected = self.first_stride * self.pool ** self.n_blocks
        if self.input_length != expected:
            raise ValueError(f"input_length {self.input_length} does not reduce to 1 "
                             f"(expected {expected} for {self.n_blocks} blocks)")

    @property
    def n_blocks(self) -> int:
        return len(self.channels) - 1

    @property
    def representation_dim(self) -> int:
        return self.channels[-1]

    @classmethod
    def canonical(cls) -> "EncoderConfig":
        return cls()

    @classmethod
    def desk(cls) -> "EncoderConfig":
        return cls(input_length=2187, channels=[32, 32, 64, 64, 64, 128, 128])


def _uniform(shape, fan_in: int, rng: np.random.Generator) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, shape).astype(np.float32), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)


def _ones(shape) -> Tensor:
    return Tensor(np.ones(shape, dtype=np.float32), requires_grad=True)


class ModelParams:
    """Encoder and projector parameters plus batch-norm running statistics."""

    def __init__(self, config: EncoderConfig, tensors: dict[str, Tensor],
                 bn: dict[str, BatchNormState]):
        self.config = config
        self.tensors = tensors
        self.bn = bn

    @classmethod
    def init(cls, config: EncoderConfig, rng: np.random.Generator) -> "ModelParams":
        tensors: dict[str, Tensor] = {}
        bn: dict[str, BatchNormState] = {}
        c_in = 1
        for i, c_out in enumerate(config.channels):
            tensors[f"encoder.conv{i}.weight"] = kaiming_init((c_out, c_in, KERNEL), c_in * KERNEL, rng)
            tensors[f"encoder.conv{i}.bias"] = _zeros(c_out)
            tensors[f"encoder.bn{i}.gamma"] = _ones(c_out)
            tensors[f"encoder.bn{i}.beta"] = _zeros(c_out)
            bn[f"encoder.bn{i}"] = BatchNormState.fresh(c_out)
            c_in = c_out
        d = config.representation_dim
        tensors["projector.w1"] = _uniform((d, d), d, rng)
        tensors["projector.b1"] = _uniform(d, d, rng)
        tensors["projector.w2"] = _uniform((config.projection_dim, d), d, rng)
        tensors["projector.b2"] = _uniform(config.projection_dim, d, rng)
        return cls(config, tensors, bn)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def encoder_parameters(self) -> list[Tensor]:
        return [t for k, t in self.tensors.items() if k.startswith("encoder.")]

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def parameter_count(self) -> int:
        return int(sum(t.data.size for t in self.tensors.values() if t.requires_grad))

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {k: t.data for k, t in self.tensors.items()}
        for k, s in self.bn.items():
            arrays[f"{k}.running_mean"] = s.running_mean
            arrays[f"{k}.running_var"] = s.running_var
        return arrays

    def copy(self) -> "ModelParams":
        tensors = {k: Tensor(t.data.copy(), requires_grad=t.requires_grad)
                   for k, t in self.tensors.items()}
        bn = {k: BatchNormState(s.running_mean.copy(), s.running_var.copy(), s.momentum, s.eps)
              for k, s in self.bn.items()}
        return ModelParams(self.config, tensors, bn)


def _block(params: ModelParams, i: int, x: Tensor, training: bool) -> Tensor:
    cfg = params.config
    if i == 0:
        x = conv1d(x, params[f"encoder.conv0.weight"], params[f"encoder.conv0.bias"],
                   stride=cfg.first_stride)
    else:
        x = conv1d(x, params[f"encoder.conv{i}.weight"], params[f"encoder.conv{i}.bias"],
                   stride=1, padding=KERNEL // 2)
    x = batchnorm1d(x, params[f"encoder.bn{i}.gamma"], params[f"encoder.bn{i}.beta"],
                    params.bn[f"encoder.bn{i}"], training=training)
    x = relu(x)
    if i > 0:
        x = maxpool1d(x, cfg.pool)
    return x


def _as_batch(batch) -> Tensor:
    return batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=np.float32))


def encode(params: ModelParams, batch, mode: str = "eval") -> Tensor:
    """Map waveforms [B, 1, input_length] to representations [B, D]."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = _as_batch(batch)
    cfg = params.config
    if x.ndim != 3 or x.shape[1] != 1 or x.shape[2] != cfg.input_length:
        raise ShapeMismatch(f"encoder expects [B, 1, {cfg.input_length}], got {x.shape}")
    for i in range(len(cfg.channels)):
        x = _block(params, i, x, training=(mode == "train"))
    return global_avg_pool(x)


def project(params: ModelParams, h: Tensor) -> Tensor:
    """z = W2 relu(W1 h + b1) + b2."""
    d = params.config.representation_dim
    if h.ndim != 2 or h.shape[1] != d:
        raise ShapeMismatch(f"projector expects [B, {d}], got {h.shape}")
    hidden = relu(linear(h, params["projector.w1"], params["projector.b1"]))
    return linear(hidden, params["projector.w2"], params["projector.b2"])


# ---------------------------------------------------------------------------
# probe heads
# ---------------------------------------------------------------------------

MLP_HIDDEN = 512


class ProbeHead:
    """Linear or one-hidden-layer classifier on frozen representations."""

    def __init__(self, kind: str, tensors: dict[str, Tensor]):
        if kind not in ("linear", "mlp"):
            raise ValueError(f"probe head must be 'linear' or 'mlp', got {kind!r}")
        self.kind = kind
        self.tensors = tensors

    @classmethod
    def init(cls, kind: str, in_dim: int, n_tags: int, rng: np.random.Generator,
             hidden: int = MLP_HIDDEN) -> "ProbeHead":
        if kind == "linear":
            tensors = {"w1": _uniform((n_tags, in_dim), in_dim, rng),
                       "b1": _uniform(n_tags, in_dim, rng)}
        else:
            tensors = {"w1": _uniform((hidden, in_dim), in_dim, rng),
                       "b1": _uniform(hidden, in_dim, rng),
                       "w2": _uniform((n_tags, hidden), hidden, rng),
                       "b2": _uniform(n_tags, hidden, rng)}
        return cls(kind, tensors)

    @property
    def in_dim(self) -> int:
        return self.tensors["w1"].shape[1]

    @property
    def n_tags(self) -> int:
        return self.tensors["w2" if self.kind == "mlp" else "w1"].shape[0]

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def copy(self) -> "ProbeHead":
        return ProbeHead(self.kind, {k: Tensor(t.data.copy(), requires_grad=True)
                                     for k, t in self.tensors.items()})


def probe_forward(head: ProbeHead, h, n_tags: int | None = None) -> Tensor:
    h = _as_batch(h)
    if h.ndim != 2 or h.shape[1] != head.in_dim:
        raise ShapeMismatch(f"probe expects [B, {head.in_dim}], got {h.shape}")
    if n_tags is not None and n_tags != head.n_tags:
        raise ShapeMismatch(f"probe has {head.n_tags} outputs, {n_tags} requested")
    t = head.tensors
    if head.kind == "linear":
        return linear(h, t["w1"], t["b1"])
    return linear(relu(linear(h, t["w1"], t["b1"])), t["w2"], t["b2"])


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, params: ModelParams, meta: dict | None = None) -> Path:
    header = {"encoder_config": asdict(params.config), **(meta or {})}
    return save_tensors(path, params.state_arrays(), header)


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    arrays, meta = load_tensors(path)
    if "encoder_config" not in meta:
        raise CheckpointError(f"{path}: no encoder config in header")
    config = EncoderConfig(**meta["encoder_config"])
    params = ModelParams.init(config, np.random.default_rng(0))
    for name, t in params.tensors.items():
        if name not in arrays or arrays[name].shape != t.shape:
            raise CheckpointError(f"{path}: tensor {name!r} missing or mis-shaped")
        t.data = arrays[name].astype(np.float32)
    for name, s in params.bn.items():
        s.running_mean = arrays[f"{name}.running_mean"].astype(np.float32)
        s.running_var = arrays[f"{name}.running_var"].astype(np.float32)
    return params, meta


# ---------------------------------------------------------------------------
# filter visualisation
# ---------------------------------------------------------------------------

@dataclass
class FilterSpectra:
    layer: int
    spectra: np.ndarray        # [n_filters, probe_length // 2 + 1], sorted by peak
    peak_bins: np.ndarray      # [n_filters], non-decreasing
    filter_order: np.ndarray   # original filter index of each row


def filter_spectrum(params: ModelParams, layer_index: int, probe_length: int = 729,
                    steps: int = 100, step_size: float = 0.1,
                    rng: np.random.Generator | None = None) -> FilterSpectra:
    """Spectra of waveforms that maximise each filter of conv layer ``layer_index`` (1-based).

    One random waveform per filter is pushed up its filter's mean activation
    by normalised gradient ascent, kept at unit RMS after every step.
    """
    cfg = params.config
    n_layers = len(cfg.channels)
    if not 1 <= layer_index <= n_layers:
        raise InvalidLayer(f"layer {layer_index} not in 1..{n_layers}")
    # temporal size at the input of the target conv
    length = probe_length // cfg.first_stride
    for _ in range(layer_index - 2):
        length //= cfg.pool
    if probe_length < KERNEL or (layer_index > 1 and length < 1):
        raise InvalidLayer(f"probe of {probe_length} samples too short for layer {layer_index}")
    rng = rng if rng is not None else np.random.default_rng(0)
    n_filters = cfg.channels[layer_index - 1]
    x = rng.standard_normal((n_filters, 1, probe_length))
    x /= np.sqrt(np.mean(x ** 2, axis=2, keepdims=True))
    selector = np.eye(n_filters, dtype=np.float32)[:, :, None]
    conv_w = params[f"encoder.conv{layer_index - 1}.weight"]
    conv_b = params[f"encoder.conv{layer_index - 1}.bias"]
    for _ in range(steps):
        inp = Tensor(x.astype(np.float32), requires_grad=True)
        h = inp
        for i in range(layer_index - 1):
            h = _block(params, i, h, training=False)
        if layer_index == 1:
            act = conv1d(h, conv_w, conv_b, stride=cfg.first_stride)
        else:
            act = conv1d(h, conv_w, conv_b, stride=1, padding=KERNEL // 2)
        objective = (act * Tensor(selector)).sum() * (1.0 / act.shape[2])
        objective.backward()
        g = inp.grad.astype(np.float64)
        g_rms = np.sqrt(np.mean(g ** 2, axis=2, keepdims=True))
        x = x + step_size * g / np.maximum(g_rms, 1e-12)
        x /= np.maximum(np.sqrt(np.mean(x ** 2, axis=2, keepdims=True)), 1e-12)
    params.zero_grad()
    mags = np.abs(np.fft.rfft(x[:, 0, :], axis=1))
    mags /= np.maximum(mags.max(axis=1, keepdims=True), 1e-12)
    peaks = mags.argmax(axis=1)
    order = np.argsort(peaks, kind="stable")
    return FilterSpectra(layer_index, mags[order], peaks[order], order)
