"""
Architecture specifications and their structural bookkeeping.

Latent grouping decides which layers share a channel dimension:
- a conv with a `stream` annotation uses the stream name (residual sums);
- a depthwise layer reuses the latent of the layer feeding it;
- any other conv owns a latent named after itself.
"""

import logging
import math
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

from .errors import ConfigError
from .types import (
    IMAGE_NODE,
    ArchSpec,
    ChannelConfig,
    HeadSpec,
    LayerKind,
    LayerSpec,
    NormPlacement,
)

logger = logging.getLogger(__name__)

# VGG11 on CIFAR: eight conv layers.
VGG11_CONFIG: Tuple[int, ...] = (64, 128, 256, 256, 512, 512, 512, 512)

VGG_TINY_CONFIG: Tuple[int, ...] = (16, 16, 32, 32, 64, 64)
RESNET_TINY_WIDTH = 16
MOBILE_TINY_STEM = 16


# ============================================================
# Structure helpers
# ============================================================

def latent_keys(arch: ArchSpec) -> Dict[str, str]:
    """Map every conv/depthwise layer to the latent that indexes its output channels."""
    keys: Dict[str, str] = {}
    for spec in arch.layers:
        if spec.kind == LayerKind.CONV:
            keys[spec.name] = spec.stream or spec.name
        elif spec.kind == LayerKind.DEPTHWISE:
            keys[spec.name] = keys[spec.inputs[0]]
    return keys


def node_segments(arch: ArchSpec) -> Dict[str, List[str]]:
    """Latent keys laid out along the channel axis of every node's output."""
    keys = latent_keys(arch)
    segments: Dict[str, List[str]] = {IMAGE_NODE: [IMAGE_NODE]}
    for spec in arch.layers:
        if spec.has_channels:
            segments[spec.name] = [keys[spec.name]]
        else:
            segments[spec.name] = [k for src in spec.inputs for k in segments[src]]
    return segments


def input_segments(arch: ArchSpec, names: Sequence[str]) -> List[str]:
    segments = node_segments(arch)
    return [k for src in names for k in segments[src]]


def latent_widths(arch: ArchSpec, config: ChannelConfig) -> Dict[str, int]:
    """Width of every latent under a configuration (image channels included)."""
    layers = arch.channel_layers()
    if len(config) != len(layers):
        raise ConfigError(
            f"{arch.name}: configuration has {len(config)} entries, architecture has {len(layers)} layers"
        )
    keys = latent_keys(arch)
    widths: Dict[str, int] = {IMAGE_NODE: arch.input_channels}
    for spec, value in zip(layers, config.values):
        key = keys[spec.name]
        if key in widths and widths[key] != value:
            raise ConfigError(
                f"{arch.name}: layer '{spec.name}' has {value} channels but shares latent '{key}' "
                f"with {widths[key]} channels"
            )
        widths[key] = value
    return widths


def node_channels(arch: ArchSpec, config: ChannelConfig) -> Dict[str, int]:
    widths = latent_widths(arch, config)
    return {node: sum(widths[k] for k in keys) for node, keys in node_segments(arch).items()}


def validate_config(arch: ArchSpec, config: ChannelConfig) -> None:
    latent_widths(arch, config)


def config_from_widths(arch: ArchSpec, widths: Dict[str, int]) -> ChannelConfig:
    keys = latent_keys(arch)
    return ChannelConfig(values=[int(widths[keys[spec.name]]) for spec in arch.channel_layers()])


def head_features(arch: ArchSpec, config: ChannelConfig) -> int:
    channels = node_channels(arch, config)
    return sum(channels[src] for src in arch.head.inputs)


def validate_arch(arch: ArchSpec) -> ArchSpec:
    """Check the layer graph is a DAG with consistent residual joins."""
    seen = {IMAGE_NODE}
    for spec in arch.layers:
        if spec.name in seen:
            raise ConfigError(f"{arch.name}: duplicate node name '{spec.name}'")
        if not spec.inputs:
            raise ConfigError(f"{arch.name}: layer '{spec.name}' has no inputs")
        for src in list(spec.inputs) + list(spec.residual):
            if src not in seen:
                raise ConfigError(f"{arch.name}: layer '{spec.name}' reads '{src}' before it is defined")
        if spec.kind == LayerKind.DEPTHWISE:
            if len(spec.inputs) != 1 or spec.inputs[0] == IMAGE_NODE:
                raise ConfigError(f"{arch.name}: depthwise layer '{spec.name}' needs one layer input")
            if not arch.layer(spec.inputs[0]).has_channels:
                raise ConfigError(f"{arch.name}: depthwise layer '{spec.name}' must follow a conv layer")
            if spec.stream is not None:
                raise ConfigError(f"{arch.name}: depthwise layer '{spec.name}' cannot carry a stream")
        seen.add(spec.name)
    names = {spec.name for spec in arch.layers}
    for spec in arch.layers:
        if spec.stream is not None and spec.stream in names | {IMAGE_NODE}:
            raise ConfigError(f"{arch.name}: stream '{spec.stream}' collides with a node name")
    for src in arch.head.inputs:
        if src not in seen:
            raise ConfigError(f"{arch.name}: head reads unknown node '{src}'")

    segments = node_segments(arch)
    for spec in arch.layers:
        for src in spec.residual:
            if segments[src] != segments[spec.name]:
                raise ConfigError(
                    f"{arch.name}: residual join into '{spec.name}' sums streams {segments[src]} "
                    f"and {segments[spec.name]}; they must share a latent"
                )
    validate_config(arch, arch.default_config)
    return arch


def load_arch(path: Union[str, Path]) -> ArchSpec:
    return validate_arch(ArchSpec.model_validate_json(Path(path).read_text(encoding="utf-8")))


# ============================================================
# Widening
# ============================================================

def round_half_away(x: float) -> int:
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


def widen(config: ChannelConfig, beta: float) -> ChannelConfig:
    """Scale every entry by beta, rounding half away from zero, never below 1."""
    if beta <= 0:
        raise ConfigError(f"width multiplier must be positive, got {beta}")
    return ChannelConfig(values=[max(1, round_half_away(beta * c)) for c in config.values])


# ============================================================
# Builders
# ============================================================

def _conv(name: str, inputs: List[str], kernel: int = 3, stride: int = 1, **kwargs) -> LayerSpec:
    return LayerSpec(name=name, inputs=inputs, kernel=kernel, stride=stride, padding=kernel // 2, **kwargs)


def _pool(name: str, src: str, kernel: int = 2) -> LayerSpec:
    return LayerSpec(name=name, kind=LayerKind.POOL, inputs=[src], kernel=kernel, stride=kernel,
                     padding=0, norm=NormPlacement.NONE, relu=False)


def _require_divisible(name: str, input_hw: Tuple[int, int], factor: int) -> None:
    if input_hw[0] % factor or input_hw[1] % factor:
        raise ConfigError(f"{name}: input size {input_hw} must be divisible by {factor}")


def _vgg(name: str, widths: Sequence[int], pool_after: Sequence[int], num_classes: int,
         input_hw: Tuple[int, int], input_channels: int) -> ArchSpec:
    _require_divisible(name, input_hw, 2 ** len(pool_after))
    layers: List[LayerSpec] = []
    prev = IMAGE_NODE
    for i, _ in enumerate(widths):
        conv = _conv(f"conv{i + 1}", [prev])
        layers.append(conv)
        prev = conv.name
        if i in pool_after:
            layers.append(_pool(f"pool{i + 1}", prev))
            prev = f"pool{i + 1}"
    return ArchSpec(
        name=name, input_channels=input_channels, input_hw=input_hw, layers=layers,
        head=HeadSpec(inputs=[prev], num_classes=num_classes),
        default_config=ChannelConfig(values=list(widths)),
    )


def _resnet(name: str, blocks_per_stage: int, base_width: int, num_classes: int,
            input_hw: Tuple[int, int], input_channels: int) -> ArchSpec:
    """CIFAR ResNet with basic blocks and 1x1 projection shortcuts between stages."""
    _require_divisible(name, input_hw, 4)
    layers = [_conv("stem", [IMAGE_NODE], stream="s1")]
    config = [base_width]
    prev = "stem"
    for stage in range(3):
        width = base_width * 2 ** stage
        stream = f"s{stage + 1}"
        for block in range(blocks_per_stage):
            prefix = f"s{stage + 1}.b{block + 1}"
            stride = 2 if stage > 0 and block == 0 else 1
            layers.append(_conv(f"{prefix}.conv1", [prev], stride=stride))
            config.append(width)
            shortcut = prev
            if stride != 1:
                shortcut = f"{prefix}.shortcut"
                layers.append(_conv(shortcut, [prev], kernel=1, stride=stride, relu=False, stream=stream))
                config.append(width)
            layers.append(_conv(f"{prefix}.conv2", [f"{prefix}.conv1"], residual=[shortcut], stream=stream))
            config.append(width)
            prev = f"{prefix}.conv2"
    return ArchSpec(
        name=name, input_channels=input_channels, input_hw=input_hw, layers=layers,
        head=HeadSpec(inputs=[prev], num_classes=num_classes),
        default_config=ChannelConfig(values=config),
    )


def _mobile(name: str, stem: int, blocks: Sequence[Tuple[int, int]], num_classes: int,
            input_hw: Tuple[int, int], input_channels: int) -> ArchSpec:
    """Stem conv followed by depthwise-separable blocks (depthwise 3x3, pointwise 1x1)."""
    _require_divisible(name, input_hw, 2 ** sum(1 for _, s in blocks if s == 2))
    layers = [_conv("stem", [IMAGE_NODE])]
    config = [stem]
    prev, width = "stem", stem
    for i, (out_width, stride) in enumerate(blocks):
        dw = LayerSpec(name=f"b{i + 1}.dw", kind=LayerKind.DEPTHWISE, inputs=[prev],
                       kernel=3, stride=stride, padding=1)
        pw = _conv(f"b{i + 1}.pw", [dw.name], kernel=1)
        layers.extend([dw, pw])
        config.extend([width, out_width])
        prev, width = pw.name, out_width
    return ArchSpec(
        name=name, input_channels=input_channels, input_hw=input_hw, layers=layers,
        head=HeadSpec(inputs=[prev], num_classes=num_classes),
        default_config=ChannelConfig(values=config),
    )


def _densenet(name: str, depth: int, growth: int, num_classes: int,
              input_hw: Tuple[int, int], input_channels: int) -> ArchSpec:
    """DenseNet without bottlenecks or compression: BN-ReLU-conv layers, concatenated inputs."""
    _require_divisible(name, input_hw, 4)
    per_block = (depth - 4) // 3
    layers = [_conv("stem", [IMAGE_NODE], norm=NormPlacement.NONE, relu=False)]
    config = [2 * growth]
    features = ["stem"]
    width = 2 * growth
    for block in range(3):
        for i in range(per_block):
            lname = f"d{block + 1}.l{i + 1}"
            layers.append(_conv(lname, list(features), norm=NormPlacement.PRE, relu=False))
            config.append(growth)
            features.append(lname)
            width += growth
        if block < 2:
            tname = f"t{block + 1}.conv"
            layers.append(_conv(tname, list(features), kernel=1, norm=NormPlacement.PRE, relu=False))
            config.append(width)
            layers.append(_pool(f"t{block + 1}.pool", tname))
            features = [f"t{block + 1}.pool"]
    return ArchSpec(
        name=name, input_channels=input_channels, input_hw=input_hw, layers=layers,
        head=HeadSpec(inputs=features, num_classes=num_classes, norm=NormPlacement.PRE),
        default_config=ChannelConfig(values=config),
    )


ARCH_NAMES = ("vgg-tiny", "resnet-tiny", "mobile-tiny", "resnet56", "densenet40", "vgg11")


def build(name: str, num_classes: int = 10, input_hw: Tuple[int, int] = (32, 32),
          input_channels: int = 3) -> ArchSpec:
    """
    Build a named architecture.

    Args:
        name: one of ARCH_NAMES
        num_classes: classifier outputs
        input_hw: input image height and width
        input_channels: image channels

    Returns:
        Validated ArchSpec carrying its default channel configuration
    """
    hw = (int(input_hw[0]), int(input_hw[1]))
    if name == "vgg-tiny":
        arch = _vgg(name, VGG_TINY_CONFIG, (1, 3), num_classes, hw, input_channels)
    elif name == "vgg11":
        arch = _vgg(name, VGG11_CONFIG, (0, 1, 3, 5, 7), num_classes, hw, input_channels)
    elif name == "resnet-tiny":
        arch = _resnet(name, 2, RESNET_TINY_WIDTH, num_classes, hw, input_channels)
    elif name == "resnet56":
        arch = _resnet(name, 9, 16, num_classes, hw, input_channels)
    elif name == "mobile-tiny":
        arch = _mobile(name, MOBILE_TINY_STEM, ((32, 1), (64, 2), (64, 1), (128, 2)),
                       num_classes, hw, input_channels)
    elif name == "densenet40":
        arch = _densenet(name, 40, 12, num_classes, hw, input_channels)
    else:
        raise ConfigError(f"unknown architecture '{name}'; choose from {', '.join(ARCH_NAMES)}")
    logger.debug(f"Built {name}: {len(arch.layers)} layers, config {arch.default_config.values}")
    return validate_arch(arch)


def resolve_arch(name_or_path: str, num_classes: int, input_hw: Tuple[int, int],
                 input_channels: int, arch_path: Optional[str] = None) -> ArchSpec:
    """Load an ArchSpec JSON when a path is given, otherwise build by name."""
    if arch_path:
        return load_arch(arch_path)
    return build(name_or_path, num_classes=num_classes, input_hw=input_hw, input_channels=input_channels)
