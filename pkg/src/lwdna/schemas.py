"""JSON Schemas of every file the CLI writes, generated from the pydantic records."""

import json
import logging
from pathlib import Path
from typing import Dict, List, Type, Union

from pydantic import BaseModel

from .pipeline.reporting import ensure_writable
from .types import SCHEMA_VERSION, ArchSpec, ComparisonSummary, CostReport, ShrinkReport, StudyReport, TrainLog

logger = logging.getLogger(__name__)

SCHEMAS: Dict[str, Type[BaseModel]] = {
    "shrink_report": ShrinkReport,
    "train_log": TrainLog,
    "summary": ComparisonSummary,
    "cost_report": CostReport,
    "arch_spec": ArchSpec,
    "study_report": StudyReport,
}


def schema_for(name: str) -> dict:
    schema = SCHEMAS[name].model_json_schema()
    schema["$id"] = f"lwdna/{name}/v{SCHEMA_VERSION}"
    return schema


def export_schemas(out_dir: Union[str, Path], force: bool = False) -> List[Path]:
    written = []
    for name in SCHEMAS:
        path = ensure_writable(Path(out_dir) / f"{name}.schema.json", force)
        path.write_text(json.dumps(schema_for(name), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        written.append(path)
    logger.info(f"Wrote {len(written)} schemas to {out_dir}")
    return written
