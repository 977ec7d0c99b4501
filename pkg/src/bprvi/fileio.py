"""CSV / JSON persistence with provenance headers.

Every file carries the tool version, a hash of the run configuration and
the seed: CSV files as leading ``#`` lines, JSON files as a ``provenance``
object.
"""
from __future__ import annotations

import csv
import json
import os
from typing import Optional

import numpy as np

from . import __version__
from .config import ColumnRoles
from .errors import ConfigError, DomainError
from .model import CohortData

SCHEMA_SUFFIX = ".schema.json"


def provenance(config_hash: str, seed) -> dict:
    return {"tool": "bprvi", "version": __version__, "config_hash": config_hash, "seed": seed}


def _header_lines(prov: dict) -> str:
    return "".join(f"# {k}: {v}\n" for k, v in prov.items())


def check_writable(path: str, force: bool):
    if os.path.exists(path) and not force:
        raise ConfigError(f"{path} exists; pass --force to overwrite")


def write_json(path: str, obj: dict, prov: dict):
    body = {"provenance": prov, **obj}
    with open(path, "w") as fh:
        json.dump(body, fh, indent=1, allow_nan=True)
        fh.write("\n")


def read_json(path: str) -> dict:
    with open(path) as fh:
        return json.load(fh)


def write_table(path: str, columns: list, data: np.ndarray, prov: dict, fmt=None):
    """Numeric table with a provenance header and a column-name row."""
    data = np.asarray(data)
    if data.ndim != 2 or data.shape[1] != len(columns):
        raise DomainError("table shape does not match column names")
    with open(path, "w") as fh:
        fh.write(_header_lines(prov))
        fh.write(",".join(columns) + "\n")
        if data.shape[0]:
            np.savetxt(fh, data, delimiter=",", fmt=fmt or "%.17g")


def write_labeled_table(path: str, row_name: str, rows: list, columns: list, data: np.ndarray, prov: dict):
    data = np.asarray(data, dtype=float)
    with open(path, "w") as fh:
        fh.write(_header_lines(prov))
        fh.write(",".join([row_name] + list(columns)) + "\n")
        for label, vals in zip(rows, data):
            fh.write(",".join([label] + [repr(float(v)) for v in vals]) + "\n")


def _read_header(path: str):
    n_comment = 0
    with open(path) as fh:
        for line in fh:
            if line.startswith("#"):
                n_comment += 1
                continue
            return [c.strip() for c in line.rstrip("\n").split(",")], n_comment + 1
    raise DomainError(f"{path}: no header row")


def load_roles(csv_path: str, roles: Optional[ColumnRoles]) -> ColumnRoles:
    """Column roles from the config, else from the ``.schema.json`` sidecar."""
    if roles is not None:
        return roles
    side = schema_path(csv_path)
    if not os.path.exists(side):
        raise ConfigError(f"no column roles: give a 'columns' section in the config or provide {side}")
    d = read_json(side)
    from .config import strict_kwargs

    return ColumnRoles(**strict_kwargs(ColumnRoles, d.get("columns", {}), f"{side} columns"))


def schema_path(csv_path: str) -> str:
    stem = csv_path[:-4] if csv_path.endswith(".csv") else csv_path
    return stem + SCHEMA_SUFFIX


def _locate_bad_cell(path, header, wanted):
    idx = {c: header.index(c) for c in wanted}
    with open(path, newline="") as fh:
        rows = csv.reader(line for line in fh if not line.startswith("#"))
        next(rows)
        for r, row in enumerate(rows, start=1):
            for name, j in idx.items():
                cell = row[j].strip() if j < len(row) else ""
                try:
                    float(cell)
                except ValueError:
                    what = "missing value" if cell == "" else f"non-numeric value {cell!r}"
                    return f"{what} at data row {r}, column {name!r}"
    return None


def read_cohort(path: str, roles: ColumnRoles):
    """Load a cohort CSV. Returns ``(CohortData, strata or None, ids or None)``.

    Missing or non-numeric cells and non-binary mixture / outcome cells are
    reported with their data row (1-based) and column name.
    """
    header, skip = _read_header(path)
    wanted = list(roles.mixture) + list(roles.response) + ([roles.outcome] if roles.outcome else [])
    missing = [c for c in wanted + [c for c in (roles.strata, roles.id) if c] if c not in header]
    if missing:
        raise DomainError(f"{path}: missing column(s) {', '.join(missing)}")
    idx = [header.index(c) for c in wanted]
    try:
        arr = np.loadtxt(path, delimiter=",", skiprows=skip, usecols=idx, ndmin=2, comments="#")
    except ValueError as exc:
        where = _locate_bad_cell(path, header, wanted)
        raise DomainError(f"{path}: {where or exc}") from exc
    bad = np.argwhere(~np.isfinite(arr))
    if bad.size:
        r, c = bad[0]
        raise DomainError(f"{path}: missing or non-finite value at data row {r + 1}, column {wanted[c]!r}")
    p, a = len(roles.mixture), len(roles.response)
    binary = list(range(p)) + ([p + a] if roles.outcome else [])
    for c in binary:
        off = np.flatnonzero((arr[:, c] != 0) & (arr[:, c] != 1))
        if off.size:
            raise DomainError(f"{path}: non-binary value {float(arr[off[0], c])!r} at data row {off[0] + 1}, column {wanted[c]!r}")
    x = arr[:, :p]
    w = arr[:, p:p + a]
    y = arr[:, p + a] if roles.outcome else None
    data = CohortData(x, w, y, tuple(roles.mixture), tuple(roles.response), roles.outcome or "y")

    def _strings(col):
        return np.loadtxt(path, delimiter=",", skiprows=skip, usecols=[header.index(col)], dtype=str, ndmin=1,
                          comments="#")

    strata = _strings(roles.strata) if roles.strata else None
    ids = _strings(roles.id) if roles.id else None
    return data, strata, ids


def _fmt_for(values: np.ndarray) -> str:
    if np.all(np.isfinite(values)) and np.all(values == np.round(values)):
        return "%d"
    return "%.17g"


def write_cohort(path: str, data: CohortData, prov: dict, ids=None):
    """Cohort CSV (``id``, mixture, response, outcome) plus its schema sidecar."""
    ids = np.arange(1, data.n + 1) if ids is None else np.asarray(ids)
    cols = ["id", *data.x_names, *data.w_names]
    blocks = [ids[:, None].astype(float), data.x, data.w]
    if data.has_response:
        cols.append(data.y_name)
        blocks.append(data.y[:, None])
    table = np.hstack(blocks)
    fmt = [_fmt_for(table[:, j]) for j in range(table.shape[1])]
    write_table(path, cols, table, prov, fmt=fmt)
    roles = ColumnRoles(list(data.x_names), list(data.w_names), data.y_name if data.has_response else None,
                        None, "id")
    write_json(schema_path(path), {"columns": roles.to_dict()}, prov)
