"""Gated convolutional building blocks and a small configurable classifier."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Tensor

# Hard-concrete (stretched binary concrete) constants.
TEMPERATURE = 2.0 / 3.0
STRETCH_LOW = -0.1
STRETCH_HIGH = 1.1
# Shift that turns gate logits into the probability that the clamped gate is nonzero.
OPEN_SHIFT = -TEMPERATURE * math.log(-STRETCH_LOW / STRETCH_HIGH)
GATE_BIAS_INIT = 2.0
_UNIFORM_EPS = 1e-6

TRAIN = "train"
EVAL = "eval"


def open_probability(logits: Tensor) -> Tensor:
    """Expected-open probability of each hard-concrete gate."""
    return T.sigmoid(logits + OPEN_SHIFT)


def hard_concrete_sample(logits: Tensor, rng: np.random.Generator) -> Tensor:
    """Reparameterized relaxed gate in [0, 1]; differentiable w.r.t. ``logits``."""
    u = rng.uniform(_UNIFORM_EPS, 1.0 - _UNIFORM_EPS, size=logits.shape)
    noise = np.log(u) - np.log1p(-u)
    s = T.sigmoid(T.scale(logits + noise, 1.0 / TEMPERATURE))
    stretched = T.scale(s, STRETCH_HIGH - STRETCH_LOW) + STRETCH_LOW
    return T.clamp(stretched, 0.0, 1.0)


# ---------------------------------------------------------------------------
# specs


@dataclass
class LayerSpec:
    channels: int
    kind: str = "conv"
    kernel: int = 3
    stride: int = 1
    padding: int = 1
    gated: bool = True
    fgc: bool = False

    def validate(self, index: int) -> None:
        if self.kind not in ("conv", "fc"):
            raise ConfigError(f"layer {index}: kind must be 'conv' or 'fc', got {self.kind!r}")
        if self.channels < 1:
            raise ConfigError(f"layer {index}: channels must be positive")
        if self.fgc and not self.gated:
            raise ConfigError(f"layer {index}: FGC requires a gated layer")


@dataclass
class NetworkSpec:
    in_channels: int
    image_size: int
    num_classes: int
    layers: list = field(default_factory=list)
    gate_hidden_ratio: float = 0.25
    gate_hidden_min: int = 8

    def __post_init__(self):
        self.layers = [l if isinstance(l, LayerSpec) else LayerSpec(**l) for l in self.layers]

    def validate(self) -> None:
        if not self.layers:
            raise ConfigError("network needs at least one layer")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2")
        for i, layer in enumerate(self.layers):
            layer.validate(i)
        self.shapes()

    @property
    def fgc_layers(self) -> list[int]:
        """Indices of layers carrying the contrastive regularizer."""
        return [i for i, l in enumerate(self.layers) if l.fgc]

    @property
    def gated_layers(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if l.gated]

    def gate_hidden(self, channels: int) -> int:
        return max(int(channels * self.gate_hidden_ratio), self.gate_hidden_min)

    def input_shapes(self) -> list[tuple[int, int, int]]:
        """(C, H, W) of each layer's input as the conv sees it (fc inputs flattened)."""
        c, h, w = self.in_channels, self.image_size, self.image_size
        shapes = []
        for layer in self.layers:
            if layer.kind == "fc":
                c, h, w = c * h * w, 1, 1
            shapes.append((c, h, w))
            if layer.kind == "conv":
                h = T.conv_output_size(h, layer.kernel, layer.stride, layer.padding)
                w = T.conv_output_size(w, layer.kernel, layer.stride, layer.padding)
            c = layer.channels
        return shapes

    def shapes(self) -> list[tuple[int, int, int]]:
        """(C, H, W) of each layer's output."""
        out = []
        for layer, (c, h, w) in zip(self.layers, self.input_shapes()):
            if layer.kind == "conv":
                h = T.conv_output_size(h, layer.kernel, layer.stride, layer.padding)
                w = T.conv_output_size(w, layer.kernel, layer.stride, layer.padding)
            out.append((layer.channels, h, w))
        return out

    def kernel_of(self, index: int) -> tuple[int, int, int]:
        layer = self.layers[index]
        if layer.kind == "fc":
            return 1, 1, 0
        return layer.kernel, layer.stride, layer.padding

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(**d)


# ---------------------------------------------------------------------------
# parameter bundles


@dataclass
class GatingModuleParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @property
    def out_channels(self) -> int:
        return self.w2.shape[1]


@dataclass
class ConvParams:
    w: Tensor
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    stride: int = 1
    padding: int = 0


@dataclass
class GateState:
    logits: Tensor
    pi: Tensor
    gate: Tensor


@dataclass
class LayerRecord:
    index: int
    pooled: Tensor
    state: Optional[GateState]


@dataclass
class ForwardResult:
    logits: Tensor
    layers: list
    outputs: list

    def record(self, index: int) -> LayerRecord:
        for r in self.layers:
            if r.index == index:
                return r
        raise KeyError(index)


# ---------------------------------------------------------------------------
# functional forward passes


def gating_forward(x_prev: Tensor, params: GatingModuleParams, mode: str = TRAIN,
                   rng: Optional[np.random.Generator] = None) -> GateState:
    """Gate head: two FC layers on the pooled input, then a hard-concrete gate."""
    pooled = T.global_avg_pool(x_prev)
    if pooled.shape[1] != params.w1.shape[0]:
        raise DimensionError(
            f"gating module expects {params.w1.shape[0]} input channels, got {pooled.shape[1]}")
    hidden = T.relu(T.matmul(pooled, params.w1) + params.b1)
    logits = T.matmul(hidden, params.w2) + params.b2
    return gate_from_logits(logits, mode, rng)


def gate_from_logits(logits: Tensor, mode: str = TRAIN,
                     rng: Optional[np.random.Generator] = None) -> GateState:
    pi = open_probability(logits)
    if mode == TRAIN:
        if rng is None:
            raise ConfigError("train-mode gating needs a seeded rng")
        gate = hard_concrete_sample(logits, rng)
    elif mode == EVAL:
        gate = Tensor((pi.data >= 0.5).astype(np.float64))
    else:
        raise ConfigError(f"mode must be {TRAIN!r} or {EVAL!r}, got {mode!r}")
    return GateState(logits=logits, pi=pi, gate=gate)


def conv_bn_relu(x_prev: Tensor, conv: ConvParams, mode: str) -> Tensor:
    z = T.conv2d(x_prev, conv.w, conv.stride, conv.padding)
    z = T.batchnorm(z, conv.gamma, conv.beta, conv.running_mean, conv.running_var,
                    training=(mode == TRAIN))
    return T.relu(z)


def gated_layer_forward(x_prev: Tensor, conv: ConvParams, gating: Optional[GatingModuleParams],
                        mode: str = TRAIN, rng: Optional[np.random.Generator] = None,
                        force_open: bool = False):
    """Returns ``(x_out, GateState, ungated_feature)``.

    ``x_out`` is the ungated feature scaled channel-wise by the gate.
    ``force_open`` replaces the gate by ones (the GateState is still computed).
    """
    feature = conv_bn_relu(x_prev, conv, mode)
    if gating is None:
        return feature, None, feature
    state = gating_forward(x_prev, gating, mode, rng)
    if force_open:
        return feature, state, feature
    if state.gate.shape[1] != feature.shape[1]:
        raise DimensionError(
            f"gate width {state.gate.shape[1]} differs from channel count {feature.shape[1]}")
    return T.channel_mul(feature, state.gate), state, feature


# ---------------------------------------------------------------------------
# network


class GatedNetwork:
    """Plain stack of (optionally gated) conv/fc layers with a linear head.

    Parameters live in ``params`` (name -> Tensor) and batchnorm running
    statistics in ``buffers`` (name -> ndarray); both are flat, ordered dicts
    so they can be checkpointed directly.
    """

    def __init__(self, spec: NetworkSpec, rng: np.random.Generator):
        spec.validate()
        self.spec = spec
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        for i, (layer, (c_in, _, _)) in enumerate(zip(spec.layers, spec.input_shapes())):
            kern, _, _ = spec.kernel_of(i)
            fan_in = c_in * kern * kern
            self._param(f"layers.{i}.conv.w",
                        rng.normal(0.0, math.sqrt(2.0 / fan_in), (layer.channels, c_in, kern, kern)))
            self._param(f"layers.{i}.bn.gamma", np.ones(layer.channels))
            self._param(f"layers.{i}.bn.beta", np.zeros(layer.channels))
            self.buffers[f"layers.{i}.bn.running_mean"] = np.zeros(layer.channels)
            self.buffers[f"layers.{i}.bn.running_var"] = np.ones(layer.channels)
            if layer.gated:
                gate_in = c_in
                hidden = spec.gate_hidden(layer.channels)
                self._param(f"layers.{i}.gate.w1",
                            rng.normal(0.0, math.sqrt(2.0 / gate_in), (gate_in, hidden)))
                self._param(f"layers.{i}.gate.b1", np.zeros(hidden))
                self._param(f"layers.{i}.gate.w2",
                            rng.normal(0.0, math.sqrt(1.0 / hidden), (hidden, layer.channels)))
                self._param(f"layers.{i}.gate.b2", np.full(layer.channels, GATE_BIAS_INIT))
        last = spec.layers[-1].channels
        self._param("head.w", rng.normal(0.0, math.sqrt(1.0 / last), (last, spec.num_classes)))
        self._param("head.b", np.zeros(spec.num_classes))

    def _param(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(value, requires_grad=True, name=name)

    def gate_param_names(self) -> list[str]:
        return [n for n in self.params if ".gate." in n]

    def conv_params(self, i: int) -> ConvParams:
        _, stride, padding = self.spec.kernel_of(i)
        p, b = self.params, self.buffers
        return ConvParams(p[f"layers.{i}.conv.w"], p[f"layers.{i}.bn.gamma"], p[f"layers.{i}.bn.beta"],
                          b[f"layers.{i}.bn.running_mean"], b[f"layers.{i}.bn.running_var"],
                          stride, padding)

    def gating_params(self, i: int) -> Optional[GatingModuleParams]:
        if not self.spec.layers[i].gated:
            return None
        p = self.params
        return GatingModuleParams(p[f"layers.{i}.gate.w1"], p[f"layers.{i}.gate.b1"],
                                  p[f"layers.{i}.gate.w2"], p[f"layers.{i}.gate.b2"])

    def forward(self, x, mode: str = TRAIN, rng: Optional[np.random.Generator] = None,
                force_open: bool = False) -> ForwardResult:
        x = T.as_tensor(x)
        spec = self.spec
        expected = (spec.in_channels, spec.image_size, spec.image_size)
        if x.ndim != 4 or tuple(x.shape[1:]) != expected:
            raise DimensionError(f"network expects input N x {expected}, got {x.shape}")
        records, outputs = [], []
        for i, layer in enumerate(spec.layers):
            if layer.kind == "fc" and (x.shape[2] != 1 or x.shape[3] != 1):
                x = T.reshape(x, (x.shape[0], -1, 1, 1))
            x, state, feature = gated_layer_forward(x, self.conv_params(i), self.gating_params(i),
                                                    mode, rng, force_open)
            outputs.append(x)
            if layer.gated:
                records.append(LayerRecord(i, T.global_avg_pool(feature), state))
        pooled = T.global_avg_pool(x)
        logits = T.matmul(pooled, self.params["head.w"]) + self.params["head.b"]
        return ForwardResult(logits, records, outputs)

    def forward_skipping(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Eval-mode inference that never computes closed channels.

        Each instance is run alone: a layer convolves only its open output
        channels against the open channels of its input. Returns
        ``(logits[N, classes], macs[N])`` where ``macs`` counts the
        multiply-accumulates actually performed in conv/fc layers and head.
        """
        x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
        spec = self.spec
        logits = np.empty((x.shape[0], spec.num_classes))
        macs = np.zeros(x.shape[0], dtype=np.int64)
        for n in range(x.shape[0]):
            a = x[n:n + 1]
            live = np.arange(a.shape[1])
            for i, layer in enumerate(spec.layers):
                if layer.kind == "fc" and (a.shape[2] != 1 or a.shape[3] != 1):
                    hw = a.shape[2] * a.shape[3]
                    live = (live[:, None] * hw + np.arange(hw)).ravel()
                    a = a.reshape(1, -1, 1, 1)
                conv = self.conv_params(i)
                gating = self.gating_params(i)
                if gating is None:
                    keep = np.arange(layer.channels)
                else:
                    state = gating_forward(Tensor(a), gating, EVAL)
                    keep = np.flatnonzero(state.gate.data[0])
                w = conv.w.data[keep][:, live]
                z = T.conv2d(Tensor(a[:, live]), Tensor(w), conv.stride, conv.padding).data
                inv = 1.0 / np.sqrt(conv.running_var[keep] + T.BN_EPS)
                z = (z - conv.running_mean[keep][:, None, None]) * inv[:, None, None]
                z = z * conv.gamma.data[keep][:, None, None] + conv.beta.data[keep][:, None, None]
                out = np.zeros((1, layer.channels) + z.shape[2:])
                out[:, keep] = np.maximum(z, 0.0)
                macs[n] += len(keep) * len(live) * w.shape[2] * w.shape[3] * z.shape[2] * z.shape[3]
                a, live = out, keep
            pooled = a[:, live].mean(axis=(2, 3))
            logits[n] = pooled @ self.params["head.w"].data[live] + self.params["head.b"].data
            macs[n] += len(live) * spec.num_classes
        return logits, macs

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"param/{k}": v.data for k, v in self.params.items()}
        out.update({f"buffer/{k}": v for k, v in self.buffers.items()})
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, v in self.params.items():
            v.data = np.array(arrays[f"param/{k}"], dtype=np.float64)
        for k in self.buffers:
            self.buffers[k] = np.array(arrays[f"buffer/{k}"], dtype=np.float64)
