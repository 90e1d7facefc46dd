"""
Schema-versioned JSON artifacts.

Every document written by the CLI has the same envelope:

    {"schema": 1, "tool": "chainstack", "version": ..., "kind": ...,
     "manifest": {...}, ...payload}

Floats use the shortest representation that round-trips; non-finite values
(the -inf k-hat sentinel of unsmoothed columns, an infinite R-hat) become null.
"""

import json
import logging
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
TOOL = "chainstack"
VERSION = "0.1.0"


@dataclass(frozen=True)
class RunManifest:
    """Inputs, provenance and resolved configuration of one run."""

    inputs: List[str] = field(default_factory=list)
    provenance: Dict[str, Any] = field(default_factory=dict)
    config: Dict[str, Any] = field(default_factory=dict)
    version: str = VERSION

    @classmethod
    def from_drawset(cls, ds, config: Optional[Dict[str, Any]] = None) -> "RunManifest":
        provenance = {}
        for key, value in ds.provenance.items():
            try:
                provenance[key] = json.loads(value)
            except (TypeError, ValueError):
                provenance[key] = value
        return cls(inputs=[s for s in ds.sources if s], provenance=provenance, config=dict(config or {}))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "inputs": list(self.inputs),
            "provenance": self.provenance,
            "config": self.config,
            "version": self.version,
        }


def to_jsonable(obj: Any) -> Any:
    """Convert numpy, pandas and result objects into plain JSON values."""
    if hasattr(obj, "to_dict") and not isinstance(obj, (pd.DataFrame, pd.Series)):
        return to_jsonable(obj.to_dict())
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(item) for item in obj]
    if isinstance(obj, np.ndarray):
        return [to_jsonable(item) for item in obj.tolist()]
    if isinstance(obj, pd.DataFrame):
        return to_jsonable(obj.to_dict(orient="records"))
    if isinstance(obj, pd.Series):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (pd.Timestamp, datetime)):
        return obj.isoformat()
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        value = float(obj)
        return value if np.isfinite(value) else None
    return obj


def build_record(kind: str, payload: Dict[str, Any], manifest: Optional[RunManifest] = None) -> Dict[str, Any]:
    """Wrap a payload in the versioned envelope."""
    record = {
        "schema": SCHEMA_VERSION,
        "tool": TOOL,
        "version": VERSION,
        "kind": kind,
        "manifest": (manifest or RunManifest()).to_dict(),
    }
    record.update(payload)
    return to_jsonable(record)


def dumps(record: Dict[str, Any]) -> str:
    return json.dumps(to_jsonable(record), indent=2, allow_nan=False) + "\n"


def write_json(record: Dict[str, Any], path) -> Path:
    """Write a record to disk; identical records give byte-identical files."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(record), encoding="utf-8")
    logger.debug("wrote %s", path)
    return path
