"""Embedding dataset IO and preprocessing.

A dataset is a JSONL manifest plus two binary ``.emb`` matrices (image
side, text side).  The ``.emb`` layout is::

    b"EMB1" | u32 d | u32 n | n*d float32, all little-endian, row-major

The manifest's first line is a header object
``{"image_emb": <file>, "text_emb": <file>, "dim": d}``; each following line is
``{"image_id", "caption", "image_row", "text_row"}``.  File names in the
header are resolved relative to the manifest.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    DegenerateVectorError,
    DimensionError,
    EmptyDatasetError,
    FormatError,
)

EMB_MAGIC = b"EMB1"
MAX_DIM = 4096
_EMB_HEADER = struct.Struct("<4sII")


@dataclass(frozen=True)
class Embedding:
    id: str
    values: np.ndarray

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])


@dataclass(frozen=True)
class PairRecord:
    """One image-caption pair; several records may share an image_id."""

    image_id: str
    caption: str
    image_emb: np.ndarray
    text_emb: np.ndarray

    def __post_init__(self):
        if self.image_emb.shape != self.text_emb.shape:
            raise DimensionError(
                f"record {self.image_id!r}: image dim {self.image_emb.shape} "
                f"!= text dim {self.text_emb.shape}"
            )
        if not self.caption.strip():
            raise ValueError(f"record {self.image_id!r}: empty caption")


@dataclass(frozen=True)
class PreprocessStats:
    image_mean: np.ndarray
    text_mean: np.ndarray
    center: bool = True
    normalize: bool = True

    @property
    def dim(self) -> int:
        return int(self.image_mean.shape[0])

    def mean(self, side: str) -> np.ndarray:
        if side == "image":
            return self.image_mean
        if side == "text":
            return self.text_mean
        raise ValueError(f"side must be 'image' or 'text', got {side!r}")


# -- binary matrices ---------------------------------------------------------

def write_emb(path, matrix) -> None:
    matrix = np.asarray(matrix)
    if matrix.ndim != 2:
        raise DimensionError("embedding matrix must be 2-D")
    n, d = matrix.shape
    _check_dim(d)
    _check_finite(matrix, path)
    payload = np.ascontiguousarray(matrix, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_EMB_HEADER.pack(EMB_MAGIC, d, n))
        fh.write(payload.tobytes())


def read_emb(path) -> np.ndarray:
    """Read an ``.emb`` file into a native-endian float32 (n, d) array."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _EMB_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, d, n = _EMB_HEADER.unpack_from(raw)
    if magic != EMB_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    _check_dim(d)
    expected = _EMB_HEADER.size + 4 * n * d
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes for n={n}, d={d}, got {len(raw)}")
    matrix = np.frombuffer(raw, dtype="<f4", offset=_EMB_HEADER.size).reshape(n, d)
    matrix = matrix.astype(np.float32)
    _check_finite(matrix, path)
    return matrix


def _check_dim(d: int) -> None:
    if not 1 <= d <= MAX_DIM:
        raise DimensionError(f"dimension {d} outside [1, {MAX_DIM}]")


def _check_finite(matrix, where) -> None:
    if not np.all(np.isfinite(matrix)):
        raise ValueError(f"{where}: non-finite embedding value")


# -- manifests ---------------------------------------------------------------

def load_dataset(path) -> list[PairRecord]:
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        lines = [line for line in fh if line.strip()]
    if not lines:
        raise FormatError(f"{path}: missing header line")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: header is not JSON ({exc})") from None
    if not isinstance(header, dict) or not {"image_emb", "text_emb", "dim"} <= header.keys():
        raise FormatError(f"{path}: header needs image_emb, text_emb and dim")
    dim = header["dim"]
    if not isinstance(dim, int) or isinstance(dim, bool):
        raise FormatError(f"{path}: dim must be an integer")
    _check_dim(dim)

    images = read_emb(path.parent / header["image_emb"])
    texts = read_emb(path.parent / header["text_emb"])
    for name, mat in (("image", images), ("text", texts)):
        if mat.shape[1] != dim:
            raise DimensionError(f"{path}: {name} matrix has d={mat.shape[1]}, header says {dim}")

    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            obj = json.loads(line)
            image_id = obj["image_id"]
            caption = obj["caption"]
            irow = obj["image_row"]
            trow = obj["text_row"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise FormatError(f"{path}:{lineno}: malformed record ({exc})") from None
        if not isinstance(image_id, str) or not isinstance(caption, str):
            raise FormatError(f"{path}:{lineno}: image_id and caption must be strings")
        for row, mat in ((irow, images), (trow, texts)):
            if not isinstance(row, int) or not 0 <= row < mat.shape[0]:
                raise FormatError(f"{path}:{lineno}: row index {row!r} out of range")
        records.append(PairRecord(image_id, caption, images[irow].copy(), texts[trow].copy()))
    return records


def write_dataset(path, records: Sequence[PairRecord], dim: int | None = None) -> None:
    """Write ``records`` as ``<stem>.jsonl`` + ``<stem>.image.emb`` + ``<stem>.text.emb``.

    Records sharing an image_id and a byte-identical image vector share one
    image row.
    """
    path = Path(path)
    if dim is None:
        if not records:
            raise EmptyDatasetError("dim is required to write an empty dataset")
        dim = records[0].image_emb.shape[0]
    image_rows: list[np.ndarray] = []
    row_of: dict[tuple[str, bytes], int] = {}
    lines = []
    for t, rec in enumerate(records):
        if rec.image_emb.shape[0] != dim:
            raise DimensionError(f"record {t} has d={rec.image_emb.shape[0]}, expected {dim}")
        img32 = rec.image_emb.astype("<f4")
        key = (rec.image_id, img32.tobytes())
        if key not in row_of:
            row_of[key] = len(image_rows)
            image_rows.append(img32)
        lines.append({"image_id": rec.image_id, "caption": rec.caption,
                      "image_row": row_of[key], "text_row": t})
    stem = path.name[: -len(".jsonl")] if path.name.endswith(".jsonl") else path.name
    image_file = f"{stem}.image.emb"
    text_file = f"{stem}.text.emb"
    empty = np.zeros((0, dim), dtype=np.float32)
    write_emb(path.parent / image_file, np.stack(image_rows) if image_rows else empty)
    write_emb(path.parent / text_file,
              np.stack([r.text_emb.astype("<f4") for r in records]) if records else empty)
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps({"image_emb": image_file, "text_emb": text_file, "dim": dim}) + "\n")
        for obj in lines:
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")


def dataset_checksum(records: Iterable[PairRecord]) -> str:
    """sha256 over ids, captions and float32 vector payloads, in order."""
    h = hashlib.sha256()
    for rec in records:
        h.update(rec.image_id.encode("utf-8") + b"\0")
        h.update(rec.caption.encode("utf-8") + b"\0")
        h.update(rec.image_emb.astype("<f4").tobytes())
        h.update(rec.text_emb.astype("<f4").tobytes())
    return h.hexdigest()


def stack(records: Sequence[PairRecord], side: str) -> np.ndarray:
    attr = {"image": "image_emb", "text": "text_emb"}[side]
    if not records:
        return np.zeros((0, 0))
    return np.stack([getattr(r, attr) for r in records]).astype(np.float64)


# -- preprocessing -----------------------------------------------------------

def fit_preprocess(records: Sequence[PairRecord], center: bool = True,
                   normalize: bool = True) -> PreprocessStats:
    if not records:
        raise EmptyDatasetError("cannot fit preprocessing on zero records")
    return PreprocessStats(
        image_mean=stack(records, "image").mean(axis=0),
        text_mean=stack(records, "text").mean(axis=0),
        center=center,
        normalize=normalize,
    )


def apply_preprocess(v, stats: PreprocessStats, side: str) -> np.ndarray:
    """Center (optional) then scale to unit length (optional); float64 out."""
    if isinstance(v, Embedding):
        v = v.values
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (stats.dim,):
        raise DimensionError(f"vector has shape {v.shape}, stats expect ({stats.dim},)")
    if stats.center:
        v = v - stats.mean(side)
    if stats.normalize:
        norm = np.linalg.norm(v)
        if norm == 0.0:
            raise DegenerateVectorError(f"zero {side} vector after centering")
        v = v / norm
    return v


def apply_preprocess_matrix(matrix, stats: PreprocessStats, side: str) -> np.ndarray:
    """Row-wise :func:`apply_preprocess` for an (n, d) array."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or (m.shape[0] and m.shape[1] != stats.dim):
        raise DimensionError(f"matrix has shape {m.shape}, stats expect (*, {stats.dim})")
    if stats.center:
        m = m - stats.mean(side)
    if stats.normalize:
        norms = np.linalg.norm(m, axis=1)
        if np.any(norms == 0.0):
            raise DegenerateVectorError(f"zero {side} vector after centering")
        m = m / norms[:, None]
    return m
