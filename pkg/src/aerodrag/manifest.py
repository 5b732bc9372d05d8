"""Coefficient manifest: design ids joined to aerodynamic coefficients."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

COLUMNS = ("design_id", "cd", "cl", "cl_f", "cl_r", "cm")
REQUIRED = ("design_id", "cd")


class ManifestError(ValueError):
    pass


class MissingColumn(ManifestError):
    def __init__(self, column: str):
        super().__init__(f"manifest is missing required column {column!r}")
        self.column = column


class DuplicateId(ManifestError):
    pass


class MissingStl(ManifestError):
    def __init__(self, ids: list[str]):
        super().__init__(f"no STL file for {len(ids)} design(s): {', '.join(ids)}")
        self.ids = ids


class ParseError(ManifestError):
    def __init__(self, row: int, message: str):
        super().__init__(f"row {row}: {message}")
        self.row = row


@dataclass(frozen=True)
class ManifestRow:
    design_id: str
    cd: float
    cl: float = math.nan
    cl_f: float = math.nan
    cl_r: float = math.nan
    cm: float = math.nan


@dataclass(frozen=True)
class DatasetManifest:
    rows: tuple[ManifestRow, ...]
    source: Path

    @property
    def ids(self) -> list[str]:
        return [r.design_id for r in self.rows]

    def targets(self) -> dict[str, float]:
        return {r.design_id: r.cd for r in self.rows}

    def __len__(self) -> int:
        return len(self.rows)


def parse_aliases(pairs) -> dict[str, str]:
    """``["Drag=cd", "ID=design_id"]`` -> {"Drag": "cd", "ID": "design_id"}."""
    out = {}
    for pair in pairs or ():
        external, sep, internal = pair.partition("=")
        if not sep or internal not in COLUMNS:
            raise ValueError(f"bad alias {pair!r}; expected EXTERNAL=one of {COLUMNS}")
        out[external.strip()] = internal
    return out


def load_manifest(path: str | Path, stl_dir: str | Path | None = None,
                  aliases: dict[str, str] | None = None) -> DatasetManifest:
    """Read the coefficient CSV; columns are matched by name in any order.

    ``design_id`` and ``cd`` are required; the lift and moment columns are
    optional. When ``stl_dir`` is given every id must have ``<id>.stl`` there.
    """
    path = Path(path)
    aliases = aliases or {}
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise MissingColumn("design_id") from None
        names = [aliases.get(h.strip(), h.strip()) for h in header]
        for col in REQUIRED:
            if col not in names:
                raise MissingColumn(col)
        pos = {name: i for i, name in enumerate(names) if name in COLUMNS}
        rows, seen = [], set()
        for rownum, raw in enumerate(reader, start=2):
            if not raw or all(not c.strip() for c in raw):
                continue
            if len(raw) < len(header):
                raise ParseError(rownum, f"expected {len(header)} fields, got {len(raw)}")
            design_id = raw[pos["design_id"]].strip()
            if not design_id:
                raise ParseError(rownum, "empty design_id")
            if design_id in seen:
                raise DuplicateId(f"design id {design_id!r} appears more than once (row {rownum})")
            seen.add(design_id)
            values = {}
            for col in COLUMNS[1:]:
                if col not in pos:
                    continue
                text = raw[pos[col]].strip()
                try:
                    values[col] = float(text) if text else math.nan
                except ValueError:
                    raise ParseError(rownum, f"column {col!r}: cannot parse {text!r}") from None
            if not math.isfinite(values["cd"]):
                raise ParseError(rownum, "cd must be a finite number")
            rows.append(ManifestRow(design_id, **values))
    if stl_dir is not None:
        stl_dir = Path(stl_dir)
        missing = [r.design_id for r in rows if not (stl_dir / f"{r.design_id}.stl").exists()]
        if missing:
            raise MissingStl(missing)
    return DatasetManifest(tuple(rows), path)
