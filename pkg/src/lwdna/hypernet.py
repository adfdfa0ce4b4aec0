"""
Hypernetwork reparameterization of conv weights.

Every conv/depthwise layer owns generator parameters W1 (n x c x m) and
W2 (n x c x hw x m). Its kernel tensor is produced from the outer product of
an output latent z_out (length n) and an input latent z_in (length c):

    Z = z_out z_in^T
    O[i, j] = W2[i, j] @ (Z[i, j] * W1[i, j])        reshaped to h x w

Latents are shared objects: all consumers of a latent see the same Tensor, so
zeroing one element removes a row in the producing layer and a column in every
consuming layer.
"""

import logging
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np

from .autodiff import functional as F
from .autodiff.tensor import Tensor
from .errors import ConfigError, EmptyLayerError, ShapeError
from .model_zoo import config_from_widths, input_segments, latent_keys, latent_widths, widen
from .network import BatchNorm, ConvNet
from .types import IMAGE_NODE, ArchSpec, ChannelConfig, LayerKind, NormPlacement

logger = logging.getLogger(__name__)

DEFAULT_EMBEDDING = 8


class LatentVector:
    """One element per channel of a latent group."""

    def __init__(self, key: str, values: np.ndarray, prunable: bool):
        self.key = key
        self.prunable = prunable
        self.values = Tensor(values, requires_grad=prunable, name=key)

    def __len__(self) -> int:
        return self.values.shape[0]

    def __repr__(self) -> str:
        return f"LatentVector({self.key!r}, len={len(self)}, prunable={self.prunable})"


class HyperLayer:
    """Generator of one layer's n x c x h x w kernel tensor."""

    def __init__(self, layer_id: str, kind: LayerKind, z_out: LatentVector, z_in: List[LatentVector],
                 w1: Tensor, w2: Tensor, kernel: Tuple[int, int]):
        self.layer_id = layer_id
        self.kind = kind
        self.z_out = z_out
        self.z_in = z_in
        self.w1 = w1
        self.w2 = w2
        self.kernel = kernel
        n, c, m = w1.shape
        if w2.shape != (n, c, kernel[0] * kernel[1], m):
            raise ShapeError("HyperLayer", f"W2 must be {n}x{c}x{kernel[0] * kernel[1]}x{m}", [w1.shape, w2.shape])
        if len(z_out) != n or sum(len(z) for z in z_in) != c:
            raise ShapeError("HyperLayer", f"latents do not match a {n}x{c} latent matrix",
                             [(len(z_out),), tuple(len(z) for z in z_in)])

    @property
    def out_channels(self) -> int:
        return self.w1.shape[0]

    @property
    def in_channels(self) -> int:
        return self.w1.shape[1]

    @property
    def m(self) -> int:
        return self.w1.shape[2]

    def input_latent(self) -> Tensor:
        return F.concat([z.values for z in self.z_in], axis=0)

    def num_parameters(self, include_latents: bool = True) -> int:
        """n*c*m + n*c*h*w*m, plus the latent lengths when asked."""
        count = self.w1.data.size + self.w2.data.size
        if include_latents:
            count += len(self.z_out) + sum(len(z) for z in self.z_in)
        return int(count)


def latent_matrix(z_out: Tensor, z_in: Tensor) -> Tensor:
    """Z[i, j] = z_out[i] * z_in[j]."""
    if z_out.ndim != 1 or z_in.ndim != 1:
        raise ShapeError("latent_matrix", "latents must be vectors", [z_out.shape, z_in.shape])
    return F.einsum("i,j->ij", z_out, z_in)


def generate_weights(layer: HyperLayer) -> Tensor:
    z = latent_matrix(layer.z_out.values, layer.input_latent())
    o = F.einsum("ijpk,ij,ijk->ijp", layer.w2, z, layer.w1)
    return F.reshape(o, (layer.out_channels, layer.in_channels) + tuple(layer.kernel))


class HyperNet:
    """
    Widened network whose conv weights come from per-layer generators.

    BatchNorm parameters and the classifier head live in a conventional
    ConvNet backbone built with `generated=True`.
    """

    def __init__(self, arch: ArchSpec, config: ChannelConfig, m: int, latents: Dict[str, LatentVector],
                 layers: List[HyperLayer], backbone: ConvNet):
        self.arch = arch
        self.config = config
        self.m = m
        self.latents = latents
        self.layers = layers
        self.backbone = backbone
        self.sharing_map: Dict[str, Tuple[str, List[str]]] = {
            layer.layer_id: (layer.z_out.key, [z.key for z in layer.z_in]) for layer in layers
        }

    def layer(self, layer_id: str) -> HyperLayer:
        for layer in self.layers:
            if layer.layer_id == layer_id:
                return layer
        raise KeyError(layer_id)

    def prunable_keys(self) -> List[str]:
        return [key for key, z in self.latents.items() if z.prunable]

    def generate_all(self) -> Dict[str, Tensor]:
        return {layer.layer_id: generate_weights(layer) for layer in self.layers}

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        return self.backbone.forward(x, train=train, conv_weights=self.generate_all())

    def parameters(self) -> List[Tensor]:
        params = [z.values for z in self.latents.values() if z.prunable]
        for layer in self.layers:
            params.extend([layer.w1, layer.w2])
        return params + self.backbone.parameters()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        """Generators and latents (each latent counted once) plus BN and head parameters."""
        generators = sum(layer.num_parameters(include_latents=False) for layer in self.layers)
        latents = sum(len(z) for z in self.latents.values())
        return int(generators + latents + self.backbone.num_parameters())


def init_hypernet(arch: ArchSpec, beta: float, m: int = DEFAULT_EMBEDDING, seed: int = 0,
                  config: Optional[ChannelConfig] = None) -> HyperNet:
    """
    Widen `config` (default: the architecture's) by beta and attach generators.

    Initialization: z ~ N(0, 1) for prunable latents, W1 ~ N(0, 1/m) and
    W2 ~ N(0, 2/(c*h*w)), which gives generated kernels He-style variance.
    The image latent and depthwise input latents are fixed ones.
    """
    if beta < 1:
        raise ConfigError(f"width multiplier must be >= 1, got {beta}")
    if m < 1:
        raise ConfigError(f"embedding width m must be >= 1, got {m}")
    wide = widen(config or arch.default_config, beta)
    widths = latent_widths(arch, wide)
    keys = latent_keys(arch)
    rng = np.random.default_rng(seed)

    latents: Dict[str, LatentVector] = {
        IMAGE_NODE: LatentVector(IMAGE_NODE, np.ones(arch.input_channels), prunable=False)
    }
    for spec in arch.channel_layers():
        key = keys[spec.name]
        if key not in latents:
            latents[key] = LatentVector(key, rng.normal(0.0, 1.0, size=widths[key]), prunable=True)

    layers: List[HyperLayer] = []
    for spec in arch.channel_layers():
        z_out = latents[keys[spec.name]]
        if spec.kind == LayerKind.DEPTHWISE:
            fixed = LatentVector(f"{spec.name}.in", np.ones(1), prunable=False)
            latents[fixed.key] = fixed
            z_in = [fixed]
        else:
            z_in = [latents[k] for k in input_segments(arch, spec.inputs)]
        n, c = len(z_out), sum(len(z) for z in z_in)
        hw = spec.kernel * spec.kernel
        w1 = Tensor(rng.normal(0.0, np.sqrt(1.0 / m), size=(n, c, m)), requires_grad=True)
        w2 = Tensor(rng.normal(0.0, np.sqrt(2.0 / (c * hw)), size=(n, c, hw, m)), requires_grad=True)
        layers.append(HyperLayer(spec.name, spec.kind, z_out, z_in, w1, w2, (spec.kernel, spec.kernel)))

    backbone = ConvNet(arch, wide, seed=seed, generated=True)
    net = HyperNet(arch, wide, m, latents, layers, backbone)
    logger.info(f"Hypernet for {arch.name}: beta={beta}, m={m}, wide config {wide.values}, "
                f"{net.num_parameters()} parameters")
    return net


def _resolve_key(net: HyperNet, layer_id: str) -> str:
    if layer_id in net.latents:
        return layer_id
    if layer_id in net.sharing_map:
        return net.sharing_map[layer_id][0]
    raise ConfigError(f"unknown layer or latent '{layer_id}'")


def mask_latent(net: HyperNet, layer_id: str, keep: np.ndarray) -> HyperNet:
    """Zero the dropped elements of a layer's output latent in place."""
    key = _resolve_key(net, layer_id)
    latent = net.latents[key]
    if not latent.prunable:
        raise ConfigError(f"latent '{key}' is not prunable")
    keep = np.asarray(keep, dtype=bool)
    if keep.shape != (len(latent),):
        raise ShapeError("mask_latent", f"mask for '{key}' must have length {len(latent)}", [keep.shape])
    latent.values.data[~keep] = 0.0
    return net


class ShrunkWeights:
    """Generated kernels with pruned rows and columns deleted, plus sliced BN and head."""

    def __init__(self, arch: ArchSpec, config: ChannelConfig, conv_weights: Dict[str, np.ndarray],
                 norms: Dict[str, BatchNorm], head_weight: np.ndarray,
                 head_bias: Optional[np.ndarray], kept_indices: Dict[str, np.ndarray]):
        self.arch = arch
        self.config = config
        self.conv_weights = conv_weights
        self.norms = norms
        self.head_weight = head_weight
        self.head_bias = head_bias
        self.kept_indices = kept_indices

    def to_network(self) -> ConvNet:
        net = ConvNet(self.arch, self.config)
        for name, weight in self.conv_weights.items():
            net.weights[name].data[...] = weight
        net.norms.update(self.norms)
        net.head_weight.data[...] = self.head_weight
        if self.head_bias is not None:
            net.head_bias.data[...] = self.head_bias
        return net


def _segment_index(keys: List[str], kept: Mapping[str, np.ndarray], widths: Mapping[str, int]) -> np.ndarray:
    """Surviving positions along a concatenated channel axis."""
    parts, offset = [], 0
    for key in keys:
        parts.append(kept[key] + offset)
        offset += widths[key]
    return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)


def materialize_shrunk(net: HyperNet, masks: Mapping[str, np.ndarray]) -> Tuple[ChannelConfig, ShrunkWeights]:
    """
    Physically remove masked channels.

    Missing masks keep the whole latent; non-prunable latents are always kept.
    """
    kept: Dict[str, np.ndarray] = {}
    widths: Dict[str, int] = {}
    for key, latent in net.latents.items():
        mask = masks.get(key) if latent.prunable else None
        if mask is None:
            index = np.arange(len(latent))
        else:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != (len(latent),):
                raise ShapeError("materialize_shrunk", f"mask for '{key}' must have length {len(latent)}",
                                 [mask.shape])
            index = np.flatnonzero(mask)
        if index.size == 0:
            raise EmptyLayerError(key)
        kept[key] = index
        widths[key] = int(index.size)
    config = config_from_widths(net.arch, widths)

    full_widths = {key: len(z) for key, z in net.latents.items()}
    backbone = net.backbone
    conv_weights: Dict[str, np.ndarray] = {}
    norms: Dict[str, BatchNorm] = {}
    for layer in net.layers:
        spec = net.arch.layer(layer.layer_id)
        weight = generate_weights(layer).data
        rows = kept[layer.z_out.key]
        in_keys = [z.key for z in layer.z_in]
        cols = _segment_index(in_keys, kept, full_widths)
        conv_weights[layer.layer_id] = weight[np.ix_(rows, cols)]
        if spec.norm == NormPlacement.POST:
            norms[spec.name] = backbone.norms[spec.name].slice(rows)
        elif spec.norm == NormPlacement.PRE:
            index = _segment_index(input_segments(net.arch, spec.inputs), kept, full_widths)
            norms[spec.name] = backbone.norms[spec.name].slice(index)

    head_index = _segment_index(input_segments(net.arch, net.arch.head.inputs), kept, full_widths)
    if "head" in backbone.norms:
        norms["head"] = backbone.norms["head"].slice(head_index)
    shrunk = ShrunkWeights(
        net.arch, config, conv_weights, norms,
        head_weight=backbone.head_weight.data[:, head_index].copy(),
        head_bias=None if backbone.head_bias is None else backbone.head_bias.data.copy(),
        kept_indices={k: v for k, v in kept.items() if net.latents[k].prunable},
    )
    logger.debug(f"Materialized {net.arch.name}: {config.values}")
    return config, shrunk
