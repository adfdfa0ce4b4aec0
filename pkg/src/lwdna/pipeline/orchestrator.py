"""Experiment orchestrator - ties data, shrinking, training and reporting together."""

import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from pydantic import ValidationError
from tabulate import tabulate

from ..checkpoint import load_checkpoint
from ..complexity import format_cost_block, model_cost
from ..data import find_idx_files, load_idx, normalize, random_batches, synth_dataset
from ..errors import ConfigError, DataFormatError, InfeasibleBudgetError, ProtocolMismatchError
from ..model_zoo import resolve_arch, validate_config, widen
from ..network import ConvNet
from ..settings import Settings, get_settings
from ..shrinker import shrink_pipeline
from ..training import evaluate, train
from ..types import (
    ArchSpec,
    ChannelConfig,
    ComparisonSummary,
    Criterion,
    Dataset,
    RunConfig,
    RunResult,
    ShrinkParams,
    ShrinkReport,
    StudyKind,
    StudyReport,
    StudyRow,
    TrainLog,
)
from .reporting import ensure_writable, write_channels_csv, write_json, write_study_csv

logger = logging.getLogger(__name__)

# Errors caused by the user's input rather than by the program.
INPUT_ERRORS = (InfeasibleBudgetError, ConfigError, DataFormatError, ValidationError)


def exit_code_for(error: Exception) -> int:
    return 2 if isinstance(error, INPUT_ERRORS) else 1


def build_comparison_report(baseline: TrainLog, lwdna: TrainLog, arch: ArchSpec, seed: int,
                            teacher_checkpoint: Optional[str] = None) -> ComparisonSummary:
    """Pair two training logs; refuses logs trained under different protocols."""
    if baseline.protocol_hash != lwdna.protocol_hash:
        raise ProtocolMismatchError(
            f"baseline protocol {baseline.protocol_hash[:12]} differs from LW-DNA protocol {lwdna.protocol_hash[:12]}"
        )
    base = model_cost(arch, ChannelConfig(values=baseline.config))
    new = model_cost(arch, ChannelConfig(values=lwdna.config))
    return ComparisonSummary(
        arch=arch.name,
        seed=seed,
        protocol_hash=baseline.protocol_hash,
        baseline_config=baseline.config,
        lwdna_config=lwdna.config,
        baseline_top1_err=baseline.final_test_err,
        lwdna_top1_err=lwdna.final_test_err,
        baseline_flops=base.total_flops,
        lwdna_flops=new.total_flops,
        baseline_params=base.total_params,
        lwdna_params=new.total_params,
        flops_ratio=100.0 * new.total_flops / base.total_flops,
        params_ratio=100.0 * new.total_params / base.total_params,
        teacher_checkpoint=teacher_checkpoint,
    )


class ExperimentOrchestrator:
    """
    Runs one CLI command end to end.

    Workflow of a comparison:
    1. Load and normalize the dataset
    2. Shrink the widened architecture on one random training batch
    3. Train the baseline and the shrunk configuration under one protocol
    4. Write paired logs, channel percentages and a summary
    """

    def __init__(self, run_config: RunConfig, settings: Optional[Settings] = None):
        self.run_config = run_config
        self.settings = settings or get_settings()
        self.name = f"{run_config.arch}-seed{run_config.seed}"
        self.output_dir = Path(run_config.output_dir)
        self._data: Optional[Tuple[Dataset, Dataset]] = None

    # ============================================================
    # Inputs
    # ============================================================

    def load_data(self) -> Tuple[Dataset, Dataset]:
        """Normalized (train, test) splits; test uses the training statistics."""
        if self._data is not None:
            return self._data
        rc = self.run_config
        if rc.dataset == "idx":
            if not rc.idx_dir:
                raise ConfigError("--dataset idx needs --idx-dir")
            train_raw = load_idx(*find_idx_files(rc.idx_dir, "train"), split="train")
            test_raw = load_idx(*find_idx_files(rc.idx_dir, "test"), num_classes=train_raw.num_classes,
                                split="test")
        else:
            train_raw = synth_dataset(rc.synth, rc.seed, "train")
            test_raw = synth_dataset(rc.synth, rc.seed, "test")
        train_set = normalize(train_raw)
        test_set = normalize(test_raw, train_set.mean, train_set.std)
        logger.info(f"[{self.name}] data: {len(train_set)} train / {len(test_set)} test, "
                    f"{train_set.channels}x{train_set.hw[0]}x{train_set.hw[1]}, {train_set.num_classes} classes")
        self._data = (train_set, test_set)
        return self._data

    def arch(self, dataset: Optional[Dataset] = None) -> ArchSpec:
        rc = self.run_config
        if dataset is None:
            return resolve_arch(rc.arch, 10, (32, 32), 3, rc.arch_path)
        return resolve_arch(rc.arch, dataset.num_classes, dataset.hw, dataset.channels, rc.arch_path)

    def config(self, arch: ArchSpec) -> ChannelConfig:
        if self.run_config.config is None:
            return arch.default_config
        config = ChannelConfig(values=self.run_config.config)
        validate_config(arch, config)
        return config

    def _paths(self, *names: str) -> List[Path]:
        return [ensure_writable(self.output_dir / n, self.run_config.force) for n in names]

    # ============================================================
    # Commands
    # ============================================================

    def _shrink(self, arch: ArchSpec, params: ShrinkParams) -> ShrinkReport:
        """Shrink the widened `--config` baseline on one training batch drawn with the run seed."""
        train_set, _ = self.load_data()
        rc = self.run_config
        base_config = self.config(arch)
        base_flops = model_cost(arch, base_config).total_flops
        budget = params.budget(base_flops)
        logger.info(f"[{self.name}] shrinking {params.criterion.value} beta={params.beta} m={params.m} "
                    f"rho={params.rho} tau={params.tau}, budget {budget.target_flops} of {base_flops} baseline flops")
        return shrink_pipeline(
            arch, params.beta, params.m, params.floors, budget, rc.seed,
            random_batches(train_set, rc.protocol.batch_size, rc.seed),
            criterion=params.criterion, bn_mode=params.score_bn_mode, config=base_config,
        )

    def shrink(self, arch: Optional[ArchSpec] = None) -> ShrinkReport:
        """Single-shot shrink of the widened architecture; writes the report and channel CSV."""
        train_set, _ = self.load_data()
        arch = arch or self.arch(train_set)
        report_path, channels_path = self._paths("shrink_report.json", "channels.csv")
        report = self._shrink(arch, self.run_config.shrink)
        write_json(report, report_path, force=True)
        write_channels_csv(report.channels, channels_path, force=True)
        return report

    def train_model(self, config: Optional[ChannelConfig] = None, label: str = "model",
                    arch: Optional[ArchSpec] = None, teacher: Optional[ConvNet] = None,
                    write: bool = True) -> Tuple[ConvNet, TrainLog]:
        """Train one configuration from scratch."""
        train_set, test_set = self.load_data()
        arch = arch or self.arch(train_set)
        config = config if config is not None else self.config(arch)
        rc = self.run_config
        log_path = ckpt_path = None
        if write:
            log_path, ckpt_path, json_path = self._paths(f"{label}_log.csv", f"{label}.ckpt", f"{label}_log.json")
        model = ConvNet(arch, config, seed=rc.seed)
        log = train(model, train_set, rc.protocol, test_set, teacher=teacher,
                    log_path=log_path, checkpoint_path=ckpt_path, name=f"{self.name}/{label}")
        if write:
            write_json(log, json_path, force=True)
        return model, log

    def _without_kd(self) -> "ExperimentOrchestrator":
        protocol = self.run_config.protocol.model_copy(update={"kd": None})
        plain = ExperimentOrchestrator(self.run_config.model_copy(update={"protocol": protocol}), self.settings)
        plain._data = self._data
        return plain

    def teacher(self, arch: ArchSpec) -> Tuple[Optional[ConvNet], Optional[str]]:
        """Distillation teacher: a given checkpoint, or the widened baseline trained without KD."""
        kd = self.run_config.protocol.kd
        if kd is None:
            return None, None
        if kd.teacher_checkpoint:
            return load_checkpoint(kd.teacher_checkpoint), kd.teacher_checkpoint
        logger.info(f"[{self.name}] training widened teacher (beta={self.run_config.shrink.beta})")
        wide = widen(self.config(arch), self.run_config.shrink.beta)
        model, _ = self._without_kd().train_model(wide, "teacher", arch)
        return model, str(self.output_dir / "teacher.ckpt")

    def compare_run(self) -> ComparisonSummary:
        """Shrink, then train baseline and LW-DNA under the identical protocol."""
        rc = self.run_config
        if rc.plain_baseline and rc.protocol.kd is None:
            raise ConfigError("--plain-baseline only applies together with --kd")
        train_set, _ = self.load_data()
        arch = self.arch(train_set)
        base_config = self.config(arch)
        outputs = ["summary.json"]
        if rc.plain_baseline:
            outputs += ["baseline_plain_log.csv", "baseline_plain.ckpt", "baseline_plain_log.json"]
        self._paths(*outputs)
        teacher, teacher_path = self.teacher(arch)
        report = self.shrink(arch)
        _, base_log = self.train_model(base_config, "baseline", arch, teacher)
        _, lw_log = self.train_model(ChannelConfig(values=report.shrunk_config), "lwdna", arch, teacher)
        summary = build_comparison_report(base_log, lw_log, arch, rc.seed, teacher_path)
        if rc.plain_baseline:
            _, plain_log = self._without_kd().train_model(base_config, "baseline_plain", arch)
            summary = summary.model_copy(update={"plain_baseline_top1_err": plain_log.final_test_err,
                                                 "plain_baseline_protocol_hash": plain_log.protocol_hash})
        write_json(summary, self.output_dir / "summary.json", force=True)
        logger.info(f"[{self.name}] baseline {summary.baseline_top1_err:.2f}% vs LW-DNA "
                    f"{summary.lwdna_top1_err:.2f}% at {summary.flops_ratio:.2f}% flops")
        return summary

    def study(self, kind: StudyKind, rho_values: Optional[List[float]] = None,
              tau_values: Optional[List[float]] = None) -> StudyReport:
        """
        Shrink several variants of the run's ShrinkParams and train each one.

        Every variant is scored on the same batch and trained under the same
        protocol as a shared baseline. Variants whose floors alone exceed the
        budget are reported as infeasible instead of failing the study.

        Args:
            kind: RHO_TAU sweeps the floor grid rho_values x tau_values,
                CRITERION scores once per saliency criterion
            rho_values: floor fractions for every layer (RHO_TAU only)
            tau_values: floor fractions for the classifier inputs (RHO_TAU only)
        """
        rc = self.run_config
        params = rc.shrink
        if kind == StudyKind.RHO_TAU:
            if not rho_values or not tau_values:
                raise ConfigError("a rho/tau study needs at least one rho and one tau value")
            variants = [(f"rho{r:g}_tau{t:g}", ShrinkParams.model_validate({**params.model_dump(), "rho": r, "tau": t}))
                        for r in rho_values for t in tau_values]
            stem = "ablation"
        else:
            variants = [(c.value, params.model_copy(update={"criterion": c})) for c in Criterion]
            stem = "criteria"

        train_set, _ = self.load_data()
        arch = self.arch(train_set)
        base_config = self.config(arch)
        json_path, csv_path = self._paths(f"{stem}.json", f"{stem}.csv")
        teacher, _ = self.teacher(arch)
        _, base_log = self.train_model(base_config, "baseline", arch, teacher, write=False)

        rows: List[StudyRow] = []
        for label, variant in variants:
            common = dict(label=label, criterion=variant.criterion, rho=variant.rho, tau=variant.tau)
            try:
                report = self._shrink(arch, variant)
            except InfeasibleBudgetError as e:
                logger.warning(f"[{self.name}] {label}: {e}")
                rows.append(StudyRow(feasible=False, **common))
                continue
            _, log = self.train_model(ChannelConfig(values=report.shrunk_config), label, arch, teacher, write=False)
            rows.append(StudyRow(
                feasible=True, shrunk_config=report.shrunk_config, shrunk_flops=report.shrunk_flops,
                flops_ratio=report.flops_ratio, params_ratio=report.params_ratio, top1_err=log.final_test_err,
                **common,
            ))

        result = StudyReport(
            kind=kind, arch=arch.name, seed=rc.seed, beta=params.beta,
            protocol_hash=base_log.protocol_hash, baseline_config=list(base_config.values),
            baseline_top1_err=base_log.final_test_err,
            target_flops=params.budget(model_cost(arch, base_config).total_flops).target_flops,
            rows=rows,
        )
        write_json(result, json_path, force=True)
        write_study_csv(rows, csv_path, force=True)
        return result

    def evaluate_checkpoint(self, path: str) -> Dict[str, Any]:
        _, test_set = self.load_data()
        model = load_checkpoint(path)
        result = evaluate(model, test_set, self.run_config.protocol.eval_batch_size)
        return {"checkpoint": path, "config": model.config.values, **result.model_dump()}

    def analyze(self, base_config: Optional[List[int]] = None, input_hw: Optional[Tuple[int, int]] = None,
                per_layer: bool = False) -> str:
        rc = self.run_config
        hw = input_hw or (32, 32)
        arch = resolve_arch(rc.arch, 10, hw, 3, rc.arch_path)
        report = model_cost(arch, self.config(arch), hw)
        base = None
        if base_config is not None:
            base_cfg = ChannelConfig(values=base_config)
            validate_config(arch, base_cfg)
            base = model_cost(arch, base_cfg, hw)
        return format_cost_block(report, base, per_layer=per_layer)

    # ============================================================
    # Result envelope
    # ============================================================

    def run(self, command: str, **kwargs: Any) -> RunResult:
        """Dispatch a command; expected failures come back as an unsuccessful RunResult."""
        try:
            if command == "shrink":
                data = self.shrink().model_dump(mode="json")
            elif command == "train":
                _, log = self.train_model(label=kwargs.get("label", "model"))
                data = log.model_dump(mode="json")
            elif command == "compare":
                data = self.compare_run().model_dump(mode="json")
            elif command == "ablate":
                data = self.study(StudyKind.RHO_TAU, kwargs.get("rho_values"), kwargs.get("tau_values")).model_dump(mode="json")
            elif command == "criteria":
                data = self.study(StudyKind.CRITERION).model_dump(mode="json")
            elif command == "eval":
                data = self.evaluate_checkpoint(kwargs["checkpoint"])
            elif command == "analyze":
                data = {"text": self.analyze(kwargs.get("base_config"), kwargs.get("input_hw"),
                                             kwargs.get("per_layer", False))}
            else:
                raise ConfigError(f"unknown command '{command}'")
            return RunResult(success=True, data={"command": command, **data})
        except Exception as e:
            logger.error(f"[{self.name}] {command} failed: {e}")
            return RunResult(success=False, error=str(e), exit_code=exit_code_for(e))

    def format_results(self, result: RunResult) -> str:
        """Format a command result for the terminal."""
        if not result.success:
            return f"Error: {result.error or 'Unknown error'}"
        data = result.data or {}
        command = data.get("command")
        if command == "analyze":
            return data["text"]

        lines = ["=" * 72]
        if command == "shrink":
            lines.append(f"SHRINK REPORT - {data['arch']} (seed {data['seed']}, {data['criterion']})")
            lines.append("=" * 72)
            rows = [[r["layer_index"], r["name"], r["baseline_channels"], r["wide_channels"], r["kept_channels"],
                     f"{r['percent_of_baseline']:.1f}"] for r in data["channels"]]
            lines.append(tabulate(rows, headers=["#", "layer", "base", "wide", "kept", "% of base"]))
            lines.append(f"\nFLOPs: {data['shrunk_flops']} / target {data['target_flops']} "
                         f"({data['flops_ratio']:.2f}% of baseline)")
            lines.append(f"Params: {data['shrunk_params']} ({data['params_ratio']:.2f}% of baseline)")
        elif command == "compare":
            lines.append(f"COMPARISON - {data['arch']} (seed {data['seed']})")
            lines.append("=" * 72)
            rows = [["baseline", data["baseline_top1_err"], data["baseline_flops"], data["baseline_params"]],
                    ["LW-DNA", data["lwdna_top1_err"], data["lwdna_flops"], data["lwdna_params"]]]
            lines.append(tabulate(rows, headers=["model", "top-1 err %", "FLOPs", "params"], floatfmt=".2f"))
            lines.append(f"\nRatios: flops {data['flops_ratio']:.2f}% / params {data['params_ratio']:.2f}%")
            if data.get("plain_baseline_top1_err") is not None:
                lines.append(f"Baseline without KD: {data['plain_baseline_top1_err']:.2f}% top-1 err")
        elif command in ("ablate", "criteria"):
            title = "RHO / TAU ABLATION" if command == "ablate" else "CRITERION COMPARISON"
            lines.append(f"{title} - {data['arch']} (seed {data['seed']}, beta {data['beta']})")
            lines.append("=" * 72)
            rows = [["baseline", "", "", data["baseline_config"], 100.0, data["baseline_top1_err"]]]
            rows += [[r["label"], r["rho"], r["tau"], r["shrunk_config"] if r["feasible"] else "infeasible",
                      r["flops_ratio"], r["top1_err"]] for r in data["rows"]]
            lines.append(tabulate(rows, headers=["variant", "rho", "tau", "config", "flops %", "top-1 err %"],
                                  floatfmt=".2f", missingval="-"))
            lines.append(f"\nFLOP target: {data['target_flops']}")
        elif command == "train":
            lines.append(f"TRAINING LOG - {data['arch']} {data['config']}")
            lines.append("=" * 72)
            lines.append(tabulate([[r["epoch"], r["lr"], r["train_loss"], r["train_err"], r["test_err"]]
                                   for r in data["rows"]],
                                  headers=["epoch", "lr", "train loss", "train err %", "test err %"],
                                  floatfmt=".4g"))
            lines.append(f"\nFinal test error: {data['final_test_err']:.2f}%")
        else:
            lines.append(tabulate([[k, v] for k, v in data.items() if k != "command"]))
        lines.append("=" * 72)
        return "\n".join(lines)
