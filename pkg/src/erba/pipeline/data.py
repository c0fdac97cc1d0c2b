"""Sample records and the tab-separated dataset format.

Columns: ``id, sequence, smiles, pocket_indices, pocket_coords, endpoint, value``.
``pocket_indices`` are ``;``-separated 0-based residue positions and
``pocket_coords`` is a path (relative to the TSV) to an EMB1 file of L_g×3
coordinates in ångström. Lines starting with ``#`` are comments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import emb
from ..backbone import VocabularyError, tokenize_enzyme, tokenize_substrate
from .config import ENDPOINTS

COLUMNS = ("id", "sequence", "smiles", "pocket_indices", "pocket_coords", "endpoint", "value")


class DatasetError(ValueError):
    def __init__(self, message: str, path: str | Path | None = None, line: int | None = None):
        where = f"{path}:{line}: " if line is not None else (f"{path}: " if path else "")
        super().__init__(where + message)
        self.line = line


@dataclass
class SampleRecord:
    id: str
    sequence: str
    smiles: str
    pocket: tuple[int, ...]
    coords: np.ndarray  # L_g × 3
    endpoint: str
    y: float
    enzyme_tokens: list[int] = field(init=False, repr=False)
    substrate_tokens: list[int] = field(init=False, repr=False)
    pocket_residues: list[int] = field(init=False, repr=False)
    z: float = field(init=False)

    def __post_init__(self):
        if not (self.y > 0 and math.isfinite(self.y)):
            raise ValueError(f"target must be positive and finite, got {self.y}")
        if self.endpoint not in ENDPOINTS:
            raise ValueError(f"unknown endpoint {self.endpoint!r}")
        self.enzyme_tokens = tokenize_enzyme(self.sequence)
        self.substrate_tokens = tokenize_substrate(self.smiles)
        if not self.smiles:
            raise ValueError("empty substrate string")
        pocket = tuple(int(i) for i in self.pocket)
        if not pocket:
            raise ValueError("empty pocket index set")
        if any(b <= a for a, b in zip(pocket, pocket[1:])):
            raise ValueError(f"pocket indices must be strictly increasing: {list(pocket)}")
        if pocket[0] < 0 or pocket[-1] >= len(self.sequence):
            raise ValueError(
                f"pocket index out of range for sequence length {len(self.sequence)}: {list(pocket)}"
            )
        self.pocket = pocket
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 2 or self.coords.shape[1] != 3 or len(self.coords) < 1:
            raise ValueError(f"pocket coordinates must be L_g×3, got {self.coords.shape}")
        if not np.isfinite(self.coords).all():
            raise ValueError("pocket coordinates are not finite")
        self.pocket_residues = [self.enzyme_tokens[i] for i in pocket]
        self.z = math.log10(self.y)


def _split_indices(raw: str) -> tuple[int, ...]:
    return tuple(int(tok) for tok in raw.split(";") if tok.strip())


def parse_dataset(path: str | Path) -> list[SampleRecord]:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DatasetError(f"cannot read dataset: {exc}", path) from exc

    records: list[SampleRecord] = []
    seen: dict[str, int] = {}
    header_seen = False
    for lineno, line in enumerate(lines, 1):
        if not line.strip() or line.startswith("#"):
            continue
        cols = line.rstrip("\r").split("\t")
        if not header_seen:
            if tuple(c.strip() for c in cols) != COLUMNS:
                raise DatasetError(f"header must list columns {', '.join(COLUMNS)}", path, lineno)
            header_seen = True
            continue
        if len(cols) != len(COLUMNS):
            raise DatasetError(f"expected {len(COLUMNS)} columns, got {len(cols)}", path, lineno)
        rid, seq, smiles, pocket_raw, coords_ref, endpoint, value = (c.strip() for c in cols)
        if rid in seen:
            raise DatasetError(f"duplicate id {rid!r} (first on line {seen[rid]})", path, lineno)
        try:
            y = float(value)
            pocket = _split_indices(pocket_raw)
            coords_path = Path(coords_ref)
            if not coords_path.is_absolute():
                coords_path = path.parent / coords_path
            coords = emb.read_matrix(coords_path)
            records.append(SampleRecord(rid, seq, smiles, pocket, coords, endpoint, y))
        except (ValueError, OSError, VocabularyError) as exc:
            raise DatasetError(str(exc), path, lineno) from exc
        seen[rid] = lineno
    if not header_seen:
        raise DatasetError("missing header row", path)
    return records


def write_dataset(records: list[SampleRecord], path: str | Path, coords_dir: str = "coords") -> None:
    """Write records as TSV plus one EMB1 coordinate file per record."""
    path = Path(path)
    cdir = path.parent / coords_dir
    cdir.mkdir(parents=True, exist_ok=True)
    rows = ["\t".join(COLUMNS)]
    for rec in records:
        rel = f"{coords_dir}/{rec.id}.emb"
        emb.write_matrix(path.parent / rel, rec.coords)
        rows.append("\t".join([
            rec.id, rec.sequence, rec.smiles, ";".join(str(i) for i in rec.pocket), rel,
            rec.endpoint, repr(float(rec.y)),
        ]))
    path.write_text("\n".join(rows) + "\n", encoding="utf-8")
