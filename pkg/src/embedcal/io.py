"""Raster, table and report files."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Iterable, Literal, Sequence

import numpy as np

from .decode import Correspondence
from .errors import IoError

CORRESPONDENCE_FIELDS = (
    "pose", "camera", "projector", "projector_u", "projector_v", "camera_x", "camera_y", "board_x_mm", "board_y_mm",
)


def _raster(raster) -> np.ndarray:
    a = np.asarray(raster, dtype=np.float64)
    if a.ndim != 2 or a.size == 0:
        raise IoError(f"raster must be a nonempty 2-D array, got shape {a.shape}")
    return a


def encode_pgm(raster) -> bytes:
    """Binary graymap (P5, maxval 255) of a raster with values in [0, 1]."""
    a = _raster(raster)
    h, w = a.shape
    data = np.rint(np.clip(a, 0.0, 1.0) * 255.0).astype(np.uint8)
    return f"P5\n{w} {h}\n255\n".encode("ascii") + data.tobytes()


def decode_pgm(blob: bytes) -> np.ndarray:
    """Inverse of :func:`encode_pgm`; values scaled back to [0, 1]."""
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise IoError("truncated graymap header")
        tokens.append(blob[start:pos])
    pos += 1  # single whitespace byte after maxval
    if tokens[0] != b"P5":
        raise IoError(f"not a binary graymap (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise IoError("malformed graymap header") from exc
    if not 0 < maxval < 256:
        raise IoError(f"unsupported maxval {maxval}")
    if len(blob) - pos < w * h:
        raise IoError("graymap pixel data is truncated")
    data = np.frombuffer(blob, dtype=np.uint8, count=w * h, offset=pos)
    return data.reshape(h, w).astype(np.float64) / maxval


def export_raster(raster, path, format: Literal["pgm", "csv"] = "pgm") -> None:
    path = Path(path)
    try:
        if format == "pgm":
            path.write_bytes(encode_pgm(raster))
        elif format == "csv":
            np.savetxt(path, _raster(raster), delimiter=",", fmt="%.17g")
        else:
            raise IoError(f"unknown raster format {format!r}")
    except OSError as exc:
        raise IoError(f"{path}: {exc}") from exc


def import_raster(path, format: Literal["pgm", "csv"] = "pgm") -> np.ndarray:
    path = Path(path)
    try:
        if format == "pgm":
            return decode_pgm(path.read_bytes())
        if format == "csv":
            return np.atleast_2d(np.loadtxt(path, delimiter=",", dtype=np.float64))
    except OSError as exc:
        raise IoError(f"{path}: {exc}") from exc
    raise IoError(f"unknown raster format {format!r}")


def _num(v) -> str:
    return repr(float(v))  # shortest round-tripping form


def write_correspondences(rows: Iterable[Correspondence], path) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(CORRESPONDENCE_FIELDS)
        for c in rows:
            board = [_num(v) for v in c.board_point_mm] if c.board_point_mm is not None else ["", ""]
            out.writerow(
                [c.pose, c.camera, c.projector, *map(_num, c.projector_pixel), *map(_num, c.camera_pixel), *board]
            )


def read_correspondences(path) -> list[Correspondence]:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise IoError(f"{path}: {exc}") from exc
    out = []
    for r in rows:
        board = None
        if r["board_x_mm"] != "":
            board = (float(r["board_x_mm"]), float(r["board_y_mm"]))
        out.append(
            Correspondence(
                pose=int(r["pose"]),
                camera=int(r["camera"]),
                projector=int(r["projector"]),
                projector_pixel=(float(r["projector_u"]), float(r["projector_v"])),
                camera_pixel=(float(r["camera_x"]), float(r["camera_y"])),
                board_point_mm=board,
            )
        )
    return out


def write_table(rows: Sequence[dict], path) -> None:
    if not rows:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as fh:
        out = csv.DictWriter(fh, fieldnames=list(rows[0]))
        out.writeheader()
        out.writerows(rows)


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return _jsonable(value.tolist())
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        v = float(value)
        return v if np.isfinite(v) else None  # JSON has no NaN
    if isinstance(value, Path):
        return str(value)
    return value


def dumps_json(doc) -> str:
    return json.dumps(_jsonable(doc), indent=2, allow_nan=False) + "\n"


def write_json(doc, path) -> None:
    try:
        Path(path).write_text(dumps_json(doc))
    except OSError as exc:
        raise IoError(f"{path}: {exc}") from exc


def read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise IoError(f"{path}: {exc}") from exc
