"""JSONL, JSON and CSV file helpers shared by every command.

Writes are atomic: content goes to a temporary file in the target directory
which is then renamed over the destination.
"""

from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, Optional, Tuple, Union
import hashlib
import json
import logging
import os
import tempfile

import pandas as pd
from pydantic import BaseModel

from captionguard.core.errors import InputError, TraceSchemaError
from captionguard.schemas.trace import FileHeader

logger = logging.getLogger(__name__)

Record = Union[BaseModel, Dict[str, Any]]


def config_digest(command: str, options: Dict[str, Any]) -> str:
    """Hash of the command name and its effective options"""
    payload = json.dumps({"command": command, "options": options}, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def dump_record(record: Record) -> str:
    if isinstance(record, BaseModel):
        return record.model_dump_json(exclude_none=False)
    return json.dumps(record, separators=(",", ":"))


def atomic_write_text(path: Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as handle:
            handle.write(text)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise


def write_jsonl(path: Path, records: Iterable[Record], header: Optional[FileHeader] = None) -> int:
    """Write records one per line after an optional header; returns the number of data lines"""
    lines = []
    if header is not None:
        lines.append(header.model_dump_json())
    count = 0
    for record in records:
        lines.append(dump_record(record))
        count += 1
    atomic_write_text(path, "".join(line + "\n" for line in lines))
    logger.info(f"Wrote {count} records to {path}")
    return count


def write_json(path: Path, document: BaseModel) -> None:
    atomic_write_text(path, document.model_dump_json(indent=2) + "\n")
    logger.info(f"Wrote {path}")


def write_csv(path: Path, frame: pd.DataFrame, header: FileHeader) -> None:
    """CSV body preceded by one `# {header json}` comment line"""
    body = frame.to_csv(index=False, float_format="%.10g", lineterminator="\n")
    atomic_write_text(path, f"# {header.model_dump_json()}\n{body}")
    logger.info(f"Wrote {len(frame)} rows to {path}")


def iter_jsonl(path: Path) -> Iterator[Tuple[int, Dict[str, Any]]]:
    """Yield (line_number, object) for every non-blank line; line numbers start at 1"""
    try:
        handle = open(path, encoding="utf-8")
    except OSError as e:
        raise InputError(f"cannot read {path}: {e}") from e
    with handle:
        for line_number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise TraceSchemaError(line_number, "<record>", f"invalid JSON: {e.msg}") from e
            if not isinstance(obj, dict):
                raise TraceSchemaError(line_number, "<record>", "expected a JSON object")
            yield line_number, obj


def is_header(obj: Dict[str, Any]) -> bool:
    return obj.get("record") == "header"


def read_jsonl(path: Path) -> Tuple[Optional[FileHeader], Iterator[Tuple[int, Dict[str, Any]]]]:
    """Split a JSONL file into its header (if any) and the data lines"""
    lines = list(iter_jsonl(path))
    header = None
    if lines and is_header(lines[0][1]):
        header = FileHeader.model_validate(lines[0][1])
        lines = lines[1:]
    for line_number, obj in lines:
        if is_header(obj):
            raise TraceSchemaError(line_number, "record", "header record only allowed on the first line")
    return header, iter(lines)
