"""Capture stack -> correspondences.

Lit pixels are found from their temporal swing, split by decoded projector ID
into 8-connected blobs, averaged, and the averaged series of each blob is
decoded into the projector pixel that illuminates the camera.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Literal, Optional

import numpy as np
from scipy import ndimage

from .errors import DecodeError, DuplicateProjectorBlob
from .rigsim import CaptureStack
from .slcodec import DecodeParams, PatternSet, decode_id_bits, decode_timeseries

log = logging.getLogger(__name__)

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class Correspondence:
    pose: int
    camera: int
    projector: int
    projector_pixel: tuple[float, float]
    camera_pixel: tuple[float, float]
    board_point_mm: Optional[tuple[float, float]] = None

    def with_board_point(self, xy) -> "Correspondence":
        return replace(self, board_point_mm=(float(xy[0]), float(xy[1])))


@dataclass(frozen=True, eq=False)
class BlobGroup:
    projector: int
    pixels: np.ndarray  # (K, 2) sensor (x, y)
    centroid: tuple[float, float]
    mean_series: np.ndarray

    @property
    def amplitude(self) -> float:
        return float(self.mean_series.max() - self.mean_series.min())


def classify_lit_pixels(stack: CaptureStack, params: DecodeParams = DecodeParams()) -> np.ndarray:
    frames = stack.frames
    if frames.shape[0] == 0:
        raise ValueError("capture stack is empty")
    swing = frames.max(axis=0) - frames.min(axis=0)
    return swing > params.intensity_threshold * params.dynamic_range


def group_by_projector(
    stack: CaptureStack,
    mask: np.ndarray,
    patterns: PatternSet,
    params: DecodeParams = DecodeParams(),
    on_duplicate: Literal["keep_strongest", "raise"] = "keep_strongest",
) -> list[BlobGroup]:
    """Split the lit mask into one blob per projector.

    Pixels whose ID bits fall inside the guard band, or decode to an ID
    outside ``[0, M)``, are dropped before labeling.
    """
    if not mask.any():
        return []
    frames = stack.frames
    lit_rows, lit_cols = np.nonzero(mask)
    series = frames[:, lit_rows, lit_cols]
    lit_ids, lit_ok = decode_id_bits(series, patterns, params)
    keep = lit_ok & (lit_ids < patterns.spec.num_projectors)
    ids = np.full(mask.shape, -1, dtype=np.int64)
    ids[lit_rows[keep], lit_cols[keep]] = lit_ids[keep]
    ox, oy = stack.origin
    groups = []
    for m in np.unique(lit_ids[keep]):
        labels, count = ndimage.label(ids == m, structure=EIGHT_CONNECTED)
        candidates = []
        for lab in range(1, count + 1):
            rows, cols = np.nonzero(labels == lab)
            pixels = np.column_stack([cols + ox, rows + oy]).astype(np.float64)
            centroid = pixels.mean(axis=0)
            mean_series = frames[:, rows, cols].mean(axis=1)
            candidates.append(BlobGroup(int(m), pixels, (float(centroid[0]), float(centroid[1])), mean_series))
        if len(candidates) > 1:
            err = DuplicateProjectorBlob(int(m), [c.centroid for c in candidates])
            if on_duplicate == "raise":
                raise err
            log.warning("%s; keeping the strongest", err)
            candidates = [max(candidates, key=lambda g: g.amplitude)]
        groups.extend(candidates)
    return groups


def extract_correspondences(
    stack: CaptureStack,
    patterns: PatternSet,
    params: DecodeParams = DecodeParams(),
    on_duplicate: Literal["keep_strongest", "raise"] = "keep_strongest",
) -> list[Correspondence]:
    mask = classify_lit_pixels(stack, params)
    out = []
    for group in group_by_projector(stack, mask, patterns, params, on_duplicate):
        try:
            decoded = decode_timeseries(group.mean_series, patterns, params)
        except DecodeError as exc:
            log.info(
                "camera %d pose %d: blob at %s skipped (%s: %s)",
                stack.camera, stack.pose, group.centroid, type(exc).__name__, exc,
            )
            continue
        if decoded.projector != group.projector:
            # per-pixel and averaged ID disagree: the blob is not trustworthy
            log.info("camera %d pose %d: blob ID mismatch, skipped", stack.camera, stack.pose)
            continue
        out.append(
            Correspondence(
                pose=stack.pose,
                camera=stack.camera,
                projector=group.projector,
                projector_pixel=decoded.subpixel,
                camera_pixel=group.centroid,
            )
        )
    return out
