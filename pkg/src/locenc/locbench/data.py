"""CSV ingestion and export for benchmark datasets, image-model outputs and
per-record predictions."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from ..errors import JoinError, LocencError, ParseError, SchemaError
from ..geo import LocationDeg, validate_location

SPLITS = ("train", "val", "test")
TASKS = ("classification", "regression")
_TASK_ALIASES = {"classify": "classification", "regress": "regression"}
PREDICTION_COLUMNS = ["id", "lon", "lat", "hit1", "rank", "abs_err"]


def normalize_task(task: str) -> str:
    task = _TASK_ALIASES.get(task, task)
    if task not in TASKS:
        raise SchemaError(f"unknown task {task!r}")
    return task


def dataset_columns(task: str) -> list[str]:
    last = "label" if normalize_task(task) == "classification" else "target"
    return ["id", "lon", "lat", "split", last]


@dataclass
class DatasetRecord:
    id: str
    lon: float
    lat: float
    split: str
    label: Optional[int] = None
    target: Optional[float] = None
    image_logprobs: Optional[np.ndarray] = None
    image_embedding: Optional[np.ndarray] = None

    @property
    def loc(self) -> LocationDeg:
        return LocationDeg(self.lon, self.lat)


def lonlat_of(records) -> np.ndarray:
    return np.array([[r.lon, r.lat] for r in records], dtype=np.float64).reshape(-1, 2)


def select_split(records, split: str) -> list:
    return [r for r in records if r.split == split]


def _check_header(path, header, expected):
    if header is None:
        raise SchemaError(f"{path}: empty file, expected header {','.join(expected)}")
    header = [h.strip() for h in header]
    if sorted(header) != sorted(expected) or len(header) != len(expected):
        missing = sorted(set(expected) - set(header))
        extra = sorted(set(header) - set(expected))
        raise SchemaError(f"{path}: header {header} does not match {expected}"
                          f" (missing {missing}, unexpected {extra})")
    return header


def load_dataset_csv(path, task: str) -> list[DatasetRecord]:
    """Read a dataset CSV; records keep file order.

    Classification files have ``id,lon,lat,split,label``; regression files
    ``id,lon,lat,split,target``.  Errors name the 1-based file line.
    """
    task = normalize_task(task)
    expected = dataset_columns(task)
    records: list[DatasetRecord] = []
    seen: set[str] = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = _check_header(path, next(reader, None), expected)
        col = {name: header.index(name) for name in expected}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}")
            rid = row[col["id"]]
            if rid in seen:
                raise ParseError(f"{path}: line {lineno}: duplicate id {rid!r}")
            seen.add(rid)
            try:
                lon, lat = float(row[col["lon"]]), float(row[col["lat"]])
            except ValueError as exc:
                raise ParseError(f"{path}: line {lineno}: {exc}") from None
            try:
                validate_location(lon, lat)
            except LocencError as exc:
                raise type(exc)(f"{path}: line {lineno}: {exc}") from None
            split = row[col["split"]].strip()
            if split not in SPLITS:
                raise ParseError(f"{path}: line {lineno}: split {split!r} not in {SPLITS}")
            rec = DatasetRecord(rid, lon, lat, split)
            raw = row[col[expected[-1]]].strip()
            try:
                if task == "classification":
                    rec.label = int(raw)
                    if rec.label < 0:
                        raise ValueError(f"negative label {raw}")
                else:
                    rec.target = float(raw)
                    if not math.isfinite(rec.target):
                        raise ValueError(f"non-finite target {raw}")
            except ValueError as exc:
                raise ParseError(f"{path}: line {lineno}: {exc}") from None
            records.append(rec)
    return records


def save_dataset_csv(path, records: Iterable[DatasetRecord], task: str) -> None:
    task = normalize_task(task)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(dataset_columns(task))
        for r in records:
            last = r.label if task == "classification" else repr(float(r.target))
            w.writerow([r.id, repr(float(r.lon)), repr(float(r.lat)), r.split, last])


def load_vector_csv(path, prefix: str) -> dict:
    """Read ``id,<prefix>_0,...`` rows into ``{id: vector}``."""
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "id" or len(header) < 2:
            raise SchemaError(f"{path}: expected header id,{prefix}_0,...")
        expected = [f"{prefix}_{i}" for i in range(len(header) - 1)]
        if header[1:] != expected:
            raise SchemaError(f"{path}: columns must be {prefix}_0..{prefix}_{len(expected) - 1}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}: line {lineno}: expected {len(header)} fields")
            try:
                vec = np.array([float(v) for v in row[1:]])
            except ValueError as exc:
                raise ParseError(f"{path}: line {lineno}: {exc}") from None
            if np.any(np.isnan(vec)) or np.any(vec == np.inf):
                raise ParseError(f"{path}: line {lineno}: values must be finite")
            out[row[0]] = vec
    return out


def save_vector_csv(path, vectors: dict, prefix: str) -> None:
    ids = list(vectors)
    width = len(vectors[ids[0]]) if ids else 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id"] + [f"{prefix}_{i}" for i in range(width)])
        for rid in ids:
            w.writerow([rid] + [repr(float(v)) for v in vectors[rid]])


def attach_vectors(records, vectors: dict, field: str) -> None:
    """Join ``vectors`` onto ``records`` by id (in place)."""
    missing = [r.id for r in records if r.id not in vectors]
    if missing:
        raise JoinError(f"{len(missing)} record id(s) missing from {field} file; first: {missing[:10]}")
    for r in records:
        setattr(r, field, vectors[r.id])


@dataclass
class Prediction:
    id: str
    lon: float
    lat: float
    hit1: Optional[int] = None
    rank: Optional[int] = None
    abs_err: Optional[float] = None


def write_predictions_csv(path, preds: Iterable[Prediction]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PREDICTION_COLUMNS)
        for p in preds:
            w.writerow([p.id, repr(float(p.lon)), repr(float(p.lat)),
                        "" if p.hit1 is None else int(p.hit1),
                        "" if p.rank is None else int(p.rank),
                        "" if p.abs_err is None else repr(float(p.abs_err))])


def read_predictions_csv(path) -> list[Prediction]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != PREDICTION_COLUMNS:
            raise SchemaError(f"{path}: expected header {','.join(PREDICTION_COLUMNS)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                lon, lat = float(row[1]), float(row[2])
                validate_location(lon, lat)
                out.append(Prediction(
                    row[0], lon, lat,
                    int(row[3]) if row[3] else None,
                    int(row[4]) if row[4] else None,
                    float(row[5]) if row[5] else None,
                ))
            except (ValueError, IndexError) as exc:
                raise ParseError(f"{path}: line {lineno}: {exc}") from None
    return out
