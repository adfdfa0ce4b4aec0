"""Report files: JSON records and the channel-percentage CSV."""

import csv
import logging
from pathlib import Path
from typing import List, Optional, Union

from pydantic import BaseModel

from ..errors import OutputExistsError
from ..types import ChannelRow, StudyRow

logger = logging.getLogger(__name__)

CHANNEL_COLUMNS = ["layer_index", "wide_channels", "kept_channels", "percent_of_baseline"]
STUDY_COLUMNS = ["label", "criterion", "rho", "tau", "feasible", "shrunk_config", "flops_ratio", "params_ratio",
                 "top1_err"]


def ensure_writable(path: Union[str, Path], force: bool) -> Path:
    path = Path(path)
    if path.exists() and not force:
        raise OutputExistsError(f"{path} exists; pass --force to overwrite")
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def write_json(record: BaseModel, path: Union[str, Path], force: bool = False) -> Path:
    path = ensure_writable(path, force)
    path.write_text(record.model_dump_json(indent=2) + "\n", encoding="utf-8")
    logger.debug(f"Wrote {path}")
    return path


def write_channels_csv(rows: List[ChannelRow], path: Union[str, Path], force: bool = False) -> Path:
    path = ensure_writable(path, force)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CHANNEL_COLUMNS)
        for row in rows:
            writer.writerow([row.layer_index, row.wide_channels, row.kept_channels, f"{row.percent_of_baseline:.2f}"])
    logger.debug(f"Wrote {path}")
    return path


def _cell(value: Optional[float]) -> str:
    return "" if value is None else f"{value:.2f}"


def write_study_csv(rows: List[StudyRow], path: Union[str, Path], force: bool = False) -> Path:
    """One line per variant; infeasible variants keep empty metric cells."""
    path = ensure_writable(path, force)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(STUDY_COLUMNS)
        for row in rows:
            config = " ".join(str(c) for c in row.shrunk_config) if row.shrunk_config else ""
            writer.writerow([row.label, row.criterion.value, row.rho, row.tau, int(row.feasible), config,
                             _cell(row.flops_ratio), _cell(row.params_ratio), _cell(row.top1_err)])
    logger.debug(f"Wrote {path}")
    return path
