import csv
import io
import os
import tempfile
import logging
from typing import Dict, List, Sequence

logger = logging.getLogger(__name__)


def format_value(value) -> str:
    """repr for floats so reruns produce identical bytes."""
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        return repr(value)
    return str(value)


def render_csv(header_comments: Dict[str, object], columns: Sequence[str], rows: List[Sequence]) -> str:
    buffer = io.StringIO()
    for key, value in header_comments.items():
        buffer.write(f"# {key}={format_value(value)}\n")
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([format_value(v) for v in row])
    return buffer.getvalue()


def write_atomic(path: str, text: str) -> None:
    """Write text to a temporary file beside ``path``, then rename it into place."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.splitext(path)[1])
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except Exception:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise
    logger.info(f"Wrote {path}")


def write_csv(path: str, header_comments: Dict[str, object], columns: Sequence[str], rows: List[Sequence]) -> None:
    """
    Write a CSV report with ``# key=value`` provenance lines before the header.

    Args:
        path: Output file
        header_comments: Run parameters echoed as comments
        columns: Schema header
        rows: Data rows
    """
    write_atomic(path, render_csv(header_comments, columns, rows))
