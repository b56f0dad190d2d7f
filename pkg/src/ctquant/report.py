"""JSON report schema shared by the pipelines and the CLI.

Top level: ``schema_version``, ``manifest``, ``inputs``, ``pipeline``,
``outputs``, ``qc``, ``verdicts``.  Floats are written with 6 significant
digits; ``manifest.timestamp`` is the only field allowed to differ between
reruns on identical inputs.
"""

from __future__ import annotations

import datetime as _dt
import enum
import json
import math
from pathlib import Path

import numpy as np

SCHEMA_VERSION = "1"
SIG_DIGITS = 6


def tool_version() -> str:
    from importlib.metadata import PackageNotFoundError, version

    try:
        return version("artifact")
    except PackageNotFoundError:
        return "0+unknown"


def round_sig(obj, digits: int = SIG_DIGITS):
    """Recursively round floats to ``digits`` significant digits."""
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not math.isfinite(x):
            return None
        r = float(f"{x:.{digits}g}")
        return 0.0 if r == 0 else r
    if isinstance(obj, enum.Enum):
        return obj.value
    if isinstance(obj, dict):
        return {str(k): round_sig(v, digits) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [round_sig(v, digits) for v in obj]
    if isinstance(obj, np.ndarray):
        return [round_sig(v, digits) for v in obj.tolist()]
    if isinstance(obj, Path):
        return str(obj)
    return obj


def manifest(command: str, config, inputs: dict, seed=None, digests: bool = True) -> dict:
    from .ingest import file_digest

    listed = []
    for name, path in sorted(inputs.items()):
        if path is None:
            continue
        p = Path(path)
        listed.append({
            "name": name,
            "path": str(path),
            "sha256": file_digest(p) if digests and p.exists() else None,
        })
    return {
        "command": command,
        "config": config.to_dict() if hasattr(config, "to_dict") else config,
        "inputs": listed,
        "seed": seed,
        "tool_version": tool_version(),
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
    }


def build_report(manifest_doc: dict, inputs=None, pipeline=None, outputs=None, qc=None, verdicts=None) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "manifest": manifest_doc,
        "inputs": inputs or {},
        "pipeline": pipeline or {},
        "outputs": outputs or {},
        "qc": qc or {},
        "verdicts": verdicts or {},
    }


def dumps(doc: dict) -> str:
    return json.dumps(round_sig(doc), indent=2) + "\n"


def write_report(doc: dict, path) -> Path:
    path = Path(path)
    path.write_text(dumps(doc))
    return path


def strip_volatile(doc: dict) -> dict:
    """Copy of a report without the timestamp (for determinism checks)."""
    doc = json.loads(json.dumps(doc))
    doc.get("manifest", {}).pop("timestamp", None)
    return doc
