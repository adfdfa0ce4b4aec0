"""
Exact FLOP and parameter accounting.

Convention: one multiply-accumulate counts as one FLOP. BatchNorm costs two
FLOPs per output element and ReLU one; pooling, residual additions and the
global average pool are free. `total_macs` reports conv and linear work alone.
"""

import logging
from typing import Dict, Iterator, List, Optional, Tuple

from tabulate import tabulate

from .errors import ConfigError
from .model_zoo import node_channels
from .types import (
    IMAGE_NODE,
    ArchSpec,
    ChannelConfig,
    CostKind,
    CostReport,
    LayerCost,
    LayerKind,
    NormPlacement,
    RatioReport,
)

logger = logging.getLogger(__name__)

# (layer_id, kind, flops, params, out_hw, in_channels, out_channels)
_Row = Tuple[str, CostKind, int, int, Tuple[int, int], int, int]


def _norm_rows(name: str, channels: int, hw: Tuple[int, int], relu: bool) -> Iterator[_Row]:
    area = hw[0] * hw[1]
    yield (f"{name}.bn", CostKind.BN, 2 * channels * area, 2 * channels, hw, channels, channels)
    if relu:
        yield (f"{name}.relu", CostKind.RELU, channels * area, 0, hw, channels, channels)


def _walk(arch: ArchSpec, config: ChannelConfig, input_hw: Tuple[int, int]) -> Iterator[_Row]:
    if input_hw[0] < 1 or input_hw[1] < 1:
        raise ConfigError(f"input size must be positive, got {input_hw}")
    channels = node_channels(arch, config)
    spatial: Dict[str, Tuple[int, int]] = {IMAGE_NODE: (int(input_hw[0]), int(input_hw[1]))}

    for spec in arch.layers:
        sizes = {spatial[src] for src in spec.inputs}
        if len(sizes) != 1:
            raise ConfigError(f"{arch.name}: inputs of '{spec.name}' have different spatial sizes {sorted(sizes)}")
        h, w = sizes.pop()
        c_in = sum(channels[src] for src in spec.inputs)

        if spec.kind == LayerKind.POOL:
            out = (h // spec.kernel, w // spec.kernel)
            if out[0] < 1 or out[1] < 1:
                raise ConfigError(f"{arch.name}: pool '{spec.name}' reduces {h}x{w} to nothing")
            spatial[spec.name] = out
            yield (spec.name, CostKind.POOL, 0, 0, out, c_in, c_in)
            continue

        if spec.norm == NormPlacement.PRE:
            yield from _norm_rows(spec.name, c_in, (h, w), relu=True)

        ho = (h + 2 * spec.padding - spec.kernel) // spec.stride + 1
        wo = (w + 2 * spec.padding - spec.kernel) // spec.stride + 1
        if ho < 1 or wo < 1:
            raise ConfigError(f"{arch.name}: layer '{spec.name}' has empty output for {h}x{w} input")
        n = channels[spec.name]
        per_kernel = spec.kernel * spec.kernel
        if spec.kind == LayerKind.DEPTHWISE:
            kind, macs, params = CostKind.DEPTHWISE, n * per_kernel * ho * wo, n * per_kernel
        else:
            kind, macs, params = CostKind.CONV, n * c_in * per_kernel * ho * wo, n * c_in * per_kernel
        if spec.bias:
            params += n
        spatial[spec.name] = (ho, wo)
        yield (spec.name, kind, macs, params, (ho, wo), c_in, n)

        if spec.norm == NormPlacement.POST:
            yield from _norm_rows(spec.name, n, (ho, wo), relu=False)
        if spec.relu:
            yield (f"{spec.name}.relu", CostKind.RELU, n * ho * wo, 0, (ho, wo), n, n)

    head = arch.head
    sizes = {spatial[src] for src in head.inputs}
    if len(sizes) != 1:
        raise ConfigError(f"{arch.name}: head inputs have different spatial sizes {sorted(sizes)}")
    hw = sizes.pop()
    features = sum(channels[src] for src in head.inputs)
    if head.norm == NormPlacement.PRE:
        yield from _norm_rows("head", features, hw, relu=True)
    k = head.num_classes
    yield ("head.linear", CostKind.LINEAR, k * features, k * features + (k if head.bias else 0),
           (1, 1), features, k)


def count_flops(arch: ArchSpec, config: ChannelConfig, input_hw: Optional[Tuple[int, int]] = None) -> int:
    """Total FLOPs without building per-layer records (used inside the threshold search)."""
    return sum(row[2] for row in _walk(arch, config, input_hw or arch.input_hw))


def model_cost(arch: ArchSpec, config: ChannelConfig,
               input_hw: Optional[Tuple[int, int]] = None) -> CostReport:
    """
    Per-layer exact costs and totals for one configuration.

    Args:
        arch: architecture
        config: one entry per conv/depthwise layer
        input_hw: input size; defaults to the architecture's own

    Returns:
        CostReport whose totals are the sums of its rows
    """
    hw = tuple(input_hw or arch.input_hw)
    rows: List[LayerCost] = [
        LayerCost(layer_id=r[0], kind=r[1], flops=r[2], params=r[3], out_spatial=r[4],
                  in_channels=r[5], out_channels=r[6])
        for r in _walk(arch, config, hw)
    ]
    macs = sum(r.flops for r in rows if r.kind in (CostKind.CONV, CostKind.DEPTHWISE, CostKind.LINEAR))
    return CostReport(
        arch=arch.name,
        config=list(config.values),
        input_hw=hw,
        total_flops=sum(r.flops for r in rows),
        total_macs=macs,
        total_params=sum(r.params for r in rows),
        layers=rows,
    )


def ratio_report(base_config: ChannelConfig, new_config: ChannelConfig, arch: ArchSpec,
                 input_hw: Optional[Tuple[int, int]] = None) -> RatioReport:
    base = model_cost(arch, base_config, input_hw)
    new = model_cost(arch, new_config, input_hw)
    return RatioReport(
        base_flops=base.total_flops,
        new_flops=new.total_flops,
        base_params=base.total_params,
        new_params=new.total_params,
        flops_ratio=100.0 * new.total_flops / base.total_flops,
        params_ratio=100.0 * new.total_params / base.total_params,
    )


def format_ratio_line(flops: int, params: int, ratio: RatioReport) -> Tuple[str, str]:
    """The "GFLOPs / ratio" and "MParams / ratio" cells."""
    return (f"{flops / 1e9:.4f} / {ratio.flops_ratio:.2f}",
            f"{params / 1e6:.3f} / {ratio.params_ratio:.2f}")


def format_cost_block(report: CostReport, base: Optional[CostReport] = None, per_layer: bool = False) -> str:
    """Human-readable cost summary, optionally relative to a base configuration."""
    lines = [f"{report.arch} @ {report.input_hw[0]}x{report.input_hw[1]}  config={report.config}"]
    if base is None:
        ratio = RatioReport(base_flops=report.total_flops, new_flops=report.total_flops,
                            base_params=report.total_params, new_params=report.total_params,
                            flops_ratio=100.0, params_ratio=100.0)
    else:
        ratio = RatioReport(base_flops=base.total_flops, new_flops=report.total_flops,
                            base_params=base.total_params, new_params=report.total_params,
                            flops_ratio=100.0 * report.total_flops / base.total_flops,
                            params_ratio=100.0 * report.total_params / base.total_params)
    flops_cell, params_cell = format_ratio_line(report.total_flops, report.total_params, ratio)
    table = [["FLOPs [G] / Ratio (%)", flops_cell],
             ["Params [M] / Ratio (%)", params_cell],
             ["MACs [G]", f"{report.total_macs / 1e9:.4f}"]]
    lines.append(tabulate(table, tablefmt="simple"))
    if per_layer:
        rows = [[r.layer_id, r.kind.value, f"{r.out_spatial[0]}x{r.out_spatial[1]}", r.in_channels,
                 r.out_channels, r.flops, r.params] for r in report.layers]
        lines.append(tabulate(rows, headers=["layer", "kind", "out", "c_in", "c_out", "flops", "params"]))
    return "\n".join(lines)
