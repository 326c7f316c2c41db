"""Schema-tagged record files and the on-disk run layout.

Every record file opens with a single JSON header line carrying a
``schema`` tag plus file-level fields; each following line is one row.
Readers check the tag before trusting anything else.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

SCHEMAS = {
    "trace": "attack-trace/v1",
    "schedule": "attack-schedule/v1",
    "config": "run-config/v1",
    "done": "pair-done/v1",
    "saturation": "saturation-records/v1",
    "shift": "attention-shift-records/v1",
    "correlation": "correlation-records/v1",
    "redistribution": "redistribution-records/v1",
    "eval": "eval-report/v1",
    "judge-cache": "judge-cache/v1",
}

ADV_IMAGE = "adv.png"
DELTA_FILE = "delta.npy"
TRACE_FILE = "trace.jsonl"
SCHEDULE_FILE = "schedule.json"
DONE_FILE = "done.json"
CONFIG_FILE = "config.json"
MAPS_DIR = "maps"
PAIRS_DIR = "pairs"

from .errors import MalformedRecords  # noqa: E402  (tiny module, import cycle-free)


def pair_dir(root, pair_id: str) -> Path:
    return Path(root) / PAIRS_DIR / pair_id


def write_records(path, schema_key: str, header: dict, rows) -> Path:
    """Write header line then one JSON row per line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tag = SCHEMAS[schema_key]
    lines = [json.dumps({"schema": tag, **header}, sort_keys=True)]
    lines.extend(json.dumps(row, sort_keys=True) for row in rows)
    path.write_text("\n".join(lines) + "\n")
    return path


def read_records(path, schema_key: str) -> tuple[dict, list[dict]]:
    """Read and validate a record file; returns (header, rows)."""
    path = Path(path)
    if not path.exists():
        raise MalformedRecords(f"{path} does not exist")
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    if not lines:
        raise MalformedRecords(f"{path} is empty")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise MalformedRecords(f"{path}: bad header line: {exc}") from exc
    expected = SCHEMAS[schema_key]
    if header.get("schema") != expected:
        raise MalformedRecords(
            f"{path}: expected schema {expected!r}, got {header.get('schema')!r}"
        )
    try:
        rows = [json.loads(ln) for ln in lines[1:]]
    except json.JSONDecodeError as exc:
        raise MalformedRecords(f"{path}: bad row: {exc}") from exc
    return header, rows


def write_json(path, schema_key: str, payload: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    body = {"schema": SCHEMAS[schema_key], **payload}
    path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
    return path


def read_json(path, schema_key: str) -> dict:
    path = Path(path)
    if not path.exists():
        raise MalformedRecords(f"{path} does not exist")
    try:
        body = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise MalformedRecords(f"{path}: not valid JSON: {exc}") from exc
    expected = SCHEMAS[schema_key]
    if body.get("schema") != expected:
        raise MalformedRecords(f"{path}: expected schema {expected!r}, got {body.get('schema')!r}")
    return body


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def tree_digest(root) -> dict[str, str]:
    """Relative path -> sha256 for every file under ``root``."""
    root = Path(root)
    return {
        str(p.relative_to(root)): sha256_file(p)
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }
