"""
Single-shot shrinkage.

One mini-batch is pushed through the widened hypernetwork; the absolute
gradient of the loss with respect to every latent element is its saliency.
A binary search over the distinct saliency values picks the smallest
threshold whose surviving configuration fits the FLOP budget, with per-latent
floors (rho for conv layers, tau for the latents feeding the classifier).
"""

import logging
from typing import Dict, Iterator, List, Mapping, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict

from .autodiff import functional as F
from .autodiff.tensor import Tape, Tensor
from .complexity import count_flops, model_cost
from .errors import ConfigError, InfeasibleBudgetError
from .hypernet import HyperNet, init_hypernet, materialize_shrunk
from .model_zoo import config_from_widths, input_segments, latent_keys
from .types import (
    IMAGE_NODE,
    ArchSpec,
    Budget,
    ChannelConfig,
    ChannelRow,
    Criterion,
    Floors,
    ShrinkReport,
    floor_count,
)

logger = logging.getLogger(__name__)

Batch = Tuple[np.ndarray, np.ndarray]
Masks = Dict[str, np.ndarray]


class SaliencyMap(BaseModel):
    """Per-latent scores; non-prunable latents score +inf."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    scores: Dict[str, np.ndarray]
    criterion: Criterion
    forward_passes: int = 0
    backward_passes: int = 0

    def prunable_keys(self) -> List[str]:
        return [k for k, s in self.scores.items() if not np.isinf(s).all()]

    def widths(self) -> Dict[str, int]:
        return {k: len(s) for k, s in self.scores.items()}


# ============================================================
# Scoring
# ============================================================

def score_gradients(net: HyperNet, batch: Batch, loss_kind: str = "cross_entropy",
                    loss_scale: float = 1.0, bn_mode: str = "eval") -> SaliencyMap:
    """
    |dL/dz| for every latent element from exactly one forward and one backward pass.

    Args:
        net: hypernetwork at initialization
        batch: (images N x C x H x W, labels N)
        loss_kind: only "cross_entropy" is supported
        loss_scale: multiplies the loss before differentiation
        bn_mode: "eval" runs BatchNorm on its running statistics, "train" on batch statistics
    """
    x, y = batch
    if len(y) == 0:
        raise ConfigError("scoring batch is empty")
    if loss_kind != "cross_entropy":
        raise ConfigError(f"unsupported scoring loss '{loss_kind}'")
    if bn_mode not in ("eval", "train"):
        raise ConfigError(f"bn_mode must be 'eval' or 'train', got '{bn_mode}'")

    net.zero_grad()
    with Tape() as tape:
        logits = net.forward(Tensor(x), train=bn_mode == "train")
        loss = F.cross_entropy(logits, y)
        if loss_scale != 1.0:
            loss = F.scale(loss, loss_scale)
        tape.backward(loss)

    scores: Dict[str, np.ndarray] = {}
    for key, latent in net.latents.items():
        if not latent.prunable:
            scores[key] = np.full(len(latent), np.inf)
        elif latent.values.grad is None:
            scores[key] = np.zeros(len(latent))
        else:
            scores[key] = np.abs(latent.values.grad)
    logger.debug(f"Scored {len(scores)} latents, loss={loss.item():.6f}")
    return SaliencyMap(scores=scores, criterion=Criterion.GRADIENT,
                       forward_passes=tape.forward_passes, backward_passes=tape.backward_passes)


def score_magnitude(net: HyperNet) -> SaliencyMap:
    scores = {
        key: np.abs(latent.values.data) if latent.prunable else np.full(len(latent), np.inf)
        for key, latent in net.latents.items()
    }
    return SaliencyMap(scores=scores, criterion=Criterion.MAGNITUDE)


# ============================================================
# Masks and floors
# ============================================================

def floor_counts(arch: ArchSpec, widths: Mapping[str, int], floors: Floors) -> Dict[str, int]:
    """Minimum survivors per prunable latent; latents feeding the head also obey tau."""
    prunable = set(latent_keys(arch).values())
    head_keys = set(input_segments(arch, arch.head.inputs))
    counts = {}
    for key in prunable:
        count = floor_count(floors.rho, widths[key])
        if key in head_keys:
            count = max(count, floor_count(floors.tau, widths[key]))
        counts[key] = min(count, widths[key])
    return counts


def build_keep_masks(scores: SaliencyMap, threshold: float, floors: Floors, arch: ArchSpec) -> Masks:
    """
    keep = score >= threshold; a latent that falls below its floor keeps its
    floor-many highest scores instead (lower index wins ties).
    """
    if threshold < 0:
        raise ConfigError(f"threshold must be non-negative, got {threshold}")
    counts = floor_counts(arch, scores.widths(), floors)
    masks: Masks = {}
    for key, s in scores.scores.items():
        if key not in counts:
            masks[key] = np.ones(len(s), dtype=bool)
            continue
        keep = s >= threshold
        if keep.sum() < counts[key]:
            order = np.lexsort((np.arange(len(s)), -s))
            keep = np.zeros(len(s), dtype=bool)
            keep[order[:counts[key]]] = True
        masks[key] = keep
    return masks


def config_from_masks(arch: ArchSpec, masks: Mapping[str, np.ndarray]) -> ChannelConfig:
    widths = {key: int(np.count_nonzero(mask)) for key, mask in masks.items()}
    widths.setdefault(IMAGE_NODE, arch.input_channels)
    return config_from_widths(arch, widths)


def candidate_thresholds(scores: SaliencyMap) -> np.ndarray:
    """0, every distinct finite score, and the next float above the largest."""
    finite = [s[np.isfinite(s)] for s in scores.scores.values()]
    values = np.unique(np.concatenate(finite)) if finite else np.zeros(0)
    if values.size == 0:
        return np.zeros(1)
    top = np.nextafter(values[-1], np.inf)
    return np.unique(np.concatenate([[0.0], values, [top]]))


def search_threshold(scores: SaliencyMap, budget: Budget, floors: Floors, arch: ArchSpec,
                     input_hw: Optional[Tuple[int, int]] = None) -> Tuple[float, Masks, ChannelConfig]:
    """
    Smallest candidate threshold whose configuration has flops <= target.

    Flops are non-increasing in the threshold, so a binary search over the
    sorted candidates finds the same threshold an exhaustive scan would.
    """
    candidates = candidate_thresholds(scores)

    def evaluate(i: int) -> Tuple[Masks, ChannelConfig, int]:
        masks = build_keep_masks(scores, float(candidates[i]), floors, arch)
        config = config_from_masks(arch, masks)
        return masks, config, count_flops(arch, config, input_hw)

    last = len(candidates) - 1
    floor_masks, floor_config, floor_flops = evaluate(last)
    if floor_flops > budget.target_flops:
        raise InfeasibleBudgetError(floor_flops, budget.target_flops)

    masks, config, flops = evaluate(0)
    if flops <= budget.target_flops:
        logger.debug(f"Budget {budget.target_flops} admits the full configuration ({flops} flops)")
        return float(candidates[0]), masks, config

    lo, hi = 0, last
    best = (floor_masks, floor_config)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        masks, config, flops = evaluate(mid)
        if flops <= budget.target_flops:
            hi, best = mid, (masks, config)
        else:
            lo = mid
    logger.debug(f"Threshold {candidates[hi]:.6g} after searching {len(candidates)} candidates")
    return float(candidates[hi]), best[0], best[1]


class MaximalityWitness(BaseModel):
    """The highest-scoring pruned element and the cost of keeping it too."""
    key: str
    index: int
    score: float
    flops_with_element: int
    target_flops: int

    @property
    def exceeds_budget(self) -> bool:
        return self.flops_with_element > self.target_flops


def maximality_witness(scores: SaliencyMap, masks: Mapping[str, np.ndarray], budget: Budget,
                       arch: ArchSpec, input_hw: Optional[Tuple[int, int]] = None) -> Optional[MaximalityWitness]:
    best: Optional[Tuple[float, str, int]] = None
    for key, mask in masks.items():
        s = scores.scores[key]
        pruned = np.flatnonzero(~np.asarray(mask, dtype=bool))
        if pruned.size == 0:
            continue
        i = int(pruned[np.argmax(s[pruned])])
        if best is None or s[i] > best[0]:
            best = (float(s[i]), key, i)
    if best is None:
        return None
    score, key, index = best
    widened = {k: np.array(v, dtype=bool) for k, v in masks.items()}
    widened[key][index] = True
    flops = count_flops(arch, config_from_masks(arch, widened), input_hw)
    return MaximalityWitness(key=key, index=index, score=score, flops_with_element=flops,
                             target_flops=budget.target_flops)


# ============================================================
# Pipeline
# ============================================================

def _percent(part: int, whole: int) -> float:
    return round(100.0 * part / whole, 4)


def shrink_pipeline(arch: ArchSpec, beta: float, m: int, floors: Floors, budget: Budget, seed: int,
                    batch_source: Iterator[Batch], criterion: Criterion = Criterion.GRADIENT,
                    input_hw: Optional[Tuple[int, int]] = None, bn_mode: str = "eval",
                    config: Optional[ChannelConfig] = None) -> ShrinkReport:
    """
    Widen, score on one batch, search the threshold, materialize.

    `config` is the baseline that gets widened (default: the architecture's).
    Exactly one batch is drawn from `batch_source`.
    """
    hw = tuple(input_hw or arch.input_hw)
    baseline = config if config is not None else arch.default_config
    net = init_hypernet(arch, beta, m, seed, config=baseline)
    batch = next(batch_source)
    if criterion == Criterion.GRADIENT:
        saliency = score_gradients(net, batch, bn_mode=bn_mode)
    else:
        saliency = score_magnitude(net)

    threshold, masks, _ = search_threshold(saliency, budget, floors, arch, hw)
    shrunk, weights = materialize_shrunk(net, masks)

    base = model_cost(arch, baseline, hw)
    wide = model_cost(arch, net.config, hw)
    new = model_cost(arch, shrunk, hw)
    rows = [
        ChannelRow(
            layer_index=i, name=spec.name, baseline_channels=c, wide_channels=w, kept_channels=k,
            percent_of_baseline=_percent(k, c), percent_of_wide=_percent(k, w),
        )
        for i, (spec, c, w, k) in enumerate(zip(arch.channel_layers(), baseline.values,
                                                net.config.values, shrunk.values))
    ]
    report = ShrinkReport(
        arch=arch.name,
        seed=seed,
        criterion=criterion,
        beta=beta,
        m=m,
        rho=floors.rho,
        tau=floors.tau,
        input_hw=hw,
        baseline_config=list(baseline.values),
        wide_config=list(net.config.values),
        shrunk_config=list(shrunk.values),
        channels=rows,
        threshold=threshold,
        target_flops=budget.target_flops,
        baseline_flops=base.total_flops,
        baseline_params=base.total_params,
        wide_flops=wide.total_flops,
        wide_params=wide.total_params,
        shrunk_flops=new.total_flops,
        shrunk_params=new.total_params,
        flops_ratio=100.0 * new.total_flops / base.total_flops,
        params_ratio=100.0 * new.total_params / base.total_params,
        kept_indices={k: [int(i) for i in v] for k, v in weights.kept_indices.items()},
        untouched_latents=sorted(k for k, z in net.latents.items() if not z.prunable),
        forward_passes=saliency.forward_passes,
        backward_passes=saliency.backward_passes,
    )
    logger.info(f"Shrunk {arch.name}: {report.wide_config} -> {report.shrunk_config} "
                f"({report.flops_ratio:.2f}% of baseline flops, target {budget.target_flops})")
    return report
