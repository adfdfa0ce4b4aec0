"""Executable CNN built from an ArchSpec and a ChannelConfig."""

import logging
from typing import Dict, List, Optional

import numpy as np

from .autodiff import functional as F
from .autodiff.tensor import Tensor, active_tape
from .errors import ShapeError
from .model_zoo import node_channels, validate_config
from .types import ArchSpec, ChannelConfig, LayerKind, NormPlacement

logger = logging.getLogger(__name__)


class BatchNorm:
    """Affine parameters plus running statistics for one normalization site."""

    def __init__(self, channels: int):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        return F.batchnorm2d(x, self.gamma, self.beta, self.running_mean, self.running_var, training=train)

    def slice(self, index: np.ndarray) -> "BatchNorm":
        out = BatchNorm(len(index))
        out.gamma.data[:] = self.gamma.data[index]
        out.beta.data[:] = self.beta.data[index]
        out.running_mean[:] = self.running_mean[index]
        out.running_var[:] = self.running_var[index]
        return out


class ConvNet:
    """
    Conventional network for one configuration.

    With `generated=True` no conv weights are allocated: the caller passes
    them to `forward` (the hypernetwork does). Conv biases are also skipped
    in that mode.
    """

    def __init__(self, arch: ArchSpec, config: ChannelConfig, seed: int = 0, generated: bool = False):
        validate_config(arch, config)
        self.arch = arch
        self.config = config
        self.generated = generated
        self.channels = node_channels(arch, config)
        self.weights: Dict[str, Tensor] = {}
        self.biases: Dict[str, Tensor] = {}
        self.norms: Dict[str, BatchNorm] = {}

        rng = np.random.default_rng(seed)
        for spec in arch.layers:
            if not spec.has_channels:
                continue
            c_in = sum(self.channels[src] for src in spec.inputs)
            n = self.channels[spec.name]
            if spec.norm == NormPlacement.PRE:
                self.norms[spec.name] = BatchNorm(c_in)
            elif spec.norm == NormPlacement.POST:
                self.norms[spec.name] = BatchNorm(n)
            if generated:
                continue
            fan_in = (1 if spec.kind == LayerKind.DEPTHWISE else c_in) * spec.kernel * spec.kernel
            shape = (n, 1 if spec.kind == LayerKind.DEPTHWISE else c_in, spec.kernel, spec.kernel)
            self.weights[spec.name] = Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape),
                                             requires_grad=True)
            if spec.bias:
                self.biases[spec.name] = Tensor(np.zeros(n), requires_grad=True)

        features = self.head_features
        if arch.head.norm == NormPlacement.PRE:
            self.norms["head"] = BatchNorm(features)
        k = arch.head.num_classes
        self.head_weight = Tensor(rng.normal(0.0, np.sqrt(1.0 / features), size=(k, features)),
                                  requires_grad=True)
        self.head_bias = Tensor(np.zeros(k), requires_grad=True) if arch.head.bias else None

    @property
    def head_features(self) -> int:
        return sum(self.channels[src] for src in self.arch.head.inputs)

    def forward(self, x: Tensor, train: bool = False,
                conv_weights: Optional[Dict[str, Tensor]] = None) -> Tensor:
        """Logits N x num_classes. Train mode uses batch statistics in every BatchNorm."""
        if x.ndim != 4 or x.shape[1] != self.arch.input_channels:
            raise ShapeError("forward", f"expected N x {self.arch.input_channels} x H x W input", [x.shape])
        tape = active_tape()
        if tape is not None:
            tape.mark_forward()

        values: Dict[str, Tensor] = {"image": x}
        for spec in self.arch.layers:
            h = F.concat([values[src] for src in spec.inputs], axis=1)
            if spec.kind == LayerKind.POOL:
                values[spec.name] = F.avg_pool2d(h, spec.kernel)
                continue
            if spec.norm == NormPlacement.PRE:
                h = F.relu(self.norms[spec.name](h, train))

            weight = conv_weights[spec.name] if conv_weights is not None else self.weights[spec.name]
            if spec.kind == LayerKind.DEPTHWISE:
                h = F.depthwise_conv2d(h, weight, stride=spec.stride, padding=spec.padding)
            else:
                h = F.conv2d(h, weight, self.biases.get(spec.name), stride=spec.stride, padding=spec.padding)

            if spec.norm == NormPlacement.POST:
                h = self.norms[spec.name](h, train)
            for src in spec.residual:
                h = F.add(h, values[src])
            if spec.relu:
                h = F.relu(h)
            values[spec.name] = h

        h = F.concat([values[src] for src in self.arch.head.inputs], axis=1)
        if "head" in self.norms:
            h = F.relu(self.norms["head"](h, train))
        return F.linear(F.global_avg_pool(h), self.head_weight, self.head_bias)

    def parameters(self) -> List[Tensor]:
        """Trainable tensors in layer order."""
        params: List[Tensor] = []
        for spec in self.arch.channel_layers():
            if spec.name in self.weights:
                params.append(self.weights[spec.name])
            if spec.name in self.biases:
                params.append(self.biases[spec.name])
            if spec.name in self.norms:
                params.extend([self.norms[spec.name].gamma, self.norms[spec.name].beta])
        if "head" in self.norms:
            params.extend([self.norms["head"].gamma, self.norms["head"].beta])
        params.append(self.head_weight)
        if self.head_bias is not None:
            params.append(self.head_bias)
        return params

    def buffers(self) -> List[np.ndarray]:
        """BatchNorm running statistics in layer order."""
        out: List[np.ndarray] = []
        for norm in self._ordered_norms():
            out.extend([norm.running_mean, norm.running_var])
        return out

    def _ordered_norms(self) -> List[BatchNorm]:
        names = [spec.name for spec in self.arch.channel_layers()] + ["head"]
        return [self.norms[n] for n in names if n in self.norms]

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()
