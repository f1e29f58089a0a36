"""Columnar text output and run manifests.

Data files are plain text: a ``# manifest_hash=`` line, a ``#`` header
naming the columns, then one row per sample with every value printed as
``%.16e`` (17 significant digits). Complex columns are split into
``<name>_re`` and ``<name>_im``.
"""

import hashlib
import json
import logging
from collections.abc import Mapping
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.16e"


def manifest_hash(text: str) -> str:
    """SHA-256 of a canonical configuration rendering."""
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def expand_columns(columns: Mapping[str, np.ndarray]) -> tuple[list[str], np.ndarray]:
    """Column names and a real 2-D table, complex columns split into re/im pairs."""
    names, data = [], []
    for name, values in columns.items():
        values = np.asarray(values)
        if np.iscomplexobj(values):
            names += [f"{name}_re", f"{name}_im"]
            data += [values.real, values.imag]
        else:
            names.append(name)
            data.append(values.astype(float))
    lengths = {len(column) for column in data}
    if len(lengths) > 1:
        raise ValueError(f"columns differ in length: {sorted(lengths)}")
    return names, np.column_stack(data) if data else np.empty((0, 0))


def write_table(
    path: Path,
    columns: Mapping[str, np.ndarray],
    hash_value: str,
    comments: list[str] | None = None,
) -> Path:
    """Write an ordered mapping of equally long columns as a text table."""
    names, table = expand_columns(columns)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(f"# manifest_hash={hash_value}\n")
        for line in comments or []:
            f.write(f"# {line}\n")
        f.write("# " + " ".join(names) + "\n")
        for row in table:
            f.write(" ".join(FLOAT_FORMAT % value for value in row) + "\n")
    logger.debug("Wrote %s (%d rows)", path, len(table))
    return path


def read_table(path: Path) -> tuple[list[str], np.ndarray]:
    """Column names and values of a file written by :func:`write_table`."""
    header = None
    rows = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.startswith("#"):
                header = line[1:].split()
                continue
            rows.append([float(v) for v in line.split()])
    return header or [], np.array(rows)


def write_json(path: Path, payload: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(payload, f, indent=2, sort_keys=True, ensure_ascii=False)
        f.write("\n")
    return path


def write_error(out_dir: Path, error: BaseException, exit_code: int) -> Path:
    """Machine-readable error record of a failed run."""
    payload = {
        "exit_code": exit_code,
        "error_type": type(error).__name__,
        "message": str(error),
    }
    details = getattr(error, "errors", None)
    if details:
        payload["errors"] = list(details)
    return write_json(out_dir / "error.json", payload)
