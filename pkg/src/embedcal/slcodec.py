"""Structured-light codec.

Builds the temporal pattern sequence that all projectors emit at once
(reference frames, projector-ID bits, Gray-code bits, line shifts) and decodes
a single intensity time series back into ``(projector, coarse, subpixel)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Optional, Sequence

import numpy as np

from .errors import AmbiguousBit, CodeOutOfRange, MissingCoarseCenter, NotIlluminated, ValueOutOfRange

# frame kinds
WHITE = "white"
BLACK = "black"
ID_BIT = "id"
GRAY_X = "gray_x"
GRAY_Y = "gray_y"
SHIFT_X = "shift_x"
SHIFT_Y = "shift_y"
# single line at an arbitrary (sub)pixel position; used by the compensation session
LINE_X = "line_x"
LINE_Y = "line_y"

BINARY_KINDS = (ID_BIT, GRAY_X, GRAY_Y)
SHIFT_KINDS = (SHIFT_X, SHIFT_Y)


def bit_count(n: int) -> int:
    """ceil(log2(n)) for n >= 1."""
    if n < 1:
        raise ValueError(f"count must be >= 1, got {n}")
    return (n - 1).bit_length()


def gray_encode(value: int, bits: int) -> list[int]:
    """Reflected-binary code of ``value`` as a bit list, MSB first."""
    if bits < 0 or not 0 <= value < (1 << bits):
        raise ValueOutOfRange(f"value {value} does not fit in {bits} bits")
    g = value ^ (value >> 1)
    return [(g >> k) & 1 for k in range(bits - 1, -1, -1)]


def gray_decode(bits: Sequence[int]) -> int:
    """Inverse of :func:`gray_encode` (bits MSB first)."""
    value = 0
    prev = 0
    for b in bits:
        prev ^= int(b)
        value = (value << 1) | prev
    return value


@dataclass(frozen=True)
class PatternSetSpec:
    num_projectors: int
    width: int
    height: int
    line_shifts: int = 0
    line_shift_half_window: Optional[int] = None
    include_reference_frames: bool = True

    def __post_init__(self):
        if self.num_projectors < 1:
            raise ValueError("num_projectors must be >= 1")
        if self.width < 2 or self.height < 2:
            raise ValueError("projector width and height must be >= 2")
        if self.line_shifts < 0 or self.line_shifts % 2:
            raise ValueError("line_shifts must be a non-negative even count")
        hw = self.half_window
        per_axis = self.line_shifts // 2
        if per_axis and not 0 <= hw <= per_axis - 1:
            raise ValueError(
                f"line_shift_half_window {hw} incompatible with {per_axis} shifts per axis"
            )

    @property
    def id_bits(self) -> int:
        return bit_count(self.num_projectors)

    @property
    def x_bits(self) -> int:
        return bit_count(self.width)

    @property
    def y_bits(self) -> int:
        return bit_count(self.height)

    @property
    def half_window(self) -> int:
        if self.line_shift_half_window is not None:
            return int(self.line_shift_half_window)
        return max(self.line_shifts // 2 - 1, 0) // 2

    @property
    def shift_offsets(self) -> tuple[int, ...]:
        """Line offsets relative to the coarse estimate, one axis, ascending."""
        n = self.line_shifts // 2
        return tuple(range(-self.half_window, n - self.half_window))

    @property
    def structured_count(self) -> int:
        """Frame count without reference frames (the simultaneous-projection budget)."""
        return self.id_bits + self.x_bits + self.y_bits + self.line_shifts


@dataclass(frozen=True)
class PatternFrame:
    kind: str
    index: int = 0  # bit index for ID/Gray, offset for shifts
    position: float = 0.0  # line position for LINE_X / LINE_Y

    def __str__(self):
        if self.kind in (WHITE, BLACK):
            return self.kind
        if self.kind in (LINE_X, LINE_Y):
            return f"{self.kind}({self.position:g})"
        return f"{self.kind}({self.index})"


class PatternSet:
    """Ordered, immutable frame sequence plus the layout needed to decode it."""

    def __init__(self, spec: PatternSetSpec, frames: Sequence[PatternFrame]):
        self.spec = spec
        self.frames = tuple(frames)
        kinds = [f.kind for f in self.frames]
        self.id_indices = [i for i, k in enumerate(kinds) if k == ID_BIT]
        self.gray_x_indices = [i for i, k in enumerate(kinds) if k == GRAY_X]
        self.gray_y_indices = [i for i, k in enumerate(kinds) if k == GRAY_Y]
        self.shift_x_indices = [i for i, k in enumerate(kinds) if k == SHIFT_X]
        self.shift_y_indices = [i for i, k in enumerate(kinds) if k == SHIFT_Y]
        self.binary_indices = sorted(self.id_indices + self.gray_x_indices + self.gray_y_indices)

    def __len__(self):
        return len(self.frames)

    def __iter__(self):
        return iter(self.frames)

    def __getitem__(self, i):
        return self.frames[i]

    @property
    def shift_offsets(self) -> tuple[int, ...]:
        return self.spec.shift_offsets

    def values(self, m: int, pixel, coarse_center=None) -> np.ndarray:
        """Intensity of every frame at one integer projector pixel."""
        return np.array(
            [frame_intensity(f, m, pixel, coarse_center, self.spec) for f in self.frames]
        )


def build_pattern_set(spec: PatternSetSpec) -> PatternSet:
    frames: list[PatternFrame] = []
    if spec.include_reference_frames:
        frames += [PatternFrame(WHITE), PatternFrame(BLACK)]
    frames += [PatternFrame(ID_BIT, k) for k in range(spec.id_bits - 1, -1, -1)]
    frames += [PatternFrame(GRAY_X, k) for k in range(spec.x_bits - 1, -1, -1)]
    frames += [PatternFrame(GRAY_Y, k) for k in range(spec.y_bits - 1, -1, -1)]
    if spec.line_shifts:
        frames += [PatternFrame(SHIFT_X, d) for d in spec.shift_offsets]
        frames += [PatternFrame(SHIFT_Y, d) for d in spec.shift_offsets]
    return PatternSet(spec, frames)


def _gray_bit(value: int, k: int) -> int:
    g = value ^ (value >> 1)
    return (g >> k) & 1


def frame_intensity(
    frame: PatternFrame,
    m: int,
    pixel,
    coarse_center=None,
    spec: Optional[PatternSetSpec] = None,
) -> float:
    """Intensity in [0, 1] emitted by projector ``m`` at integer ``pixel``.

    ``spec`` is optional and only used for bounds checking.
    """
    x, y = int(round(pixel[0])), int(round(pixel[1]))
    if spec is not None and not (0 <= x < spec.width and 0 <= y < spec.height):
        raise ValueOutOfRange(f"pixel {(x, y)} outside {spec.width}x{spec.height}")
    kind = frame.kind
    if kind == WHITE:
        return 1.0
    if kind == BLACK:
        return 0.0
    if kind == ID_BIT:
        return float((m >> frame.index) & 1)
    if kind == GRAY_X:
        return float(_gray_bit(x, frame.index))
    if kind == GRAY_Y:
        return float(_gray_bit(y, frame.index))
    if kind in SHIFT_KINDS:
        if coarse_center is None:
            raise MissingCoarseCenter(f"{frame} needs a coarse center")
        if kind == SHIFT_X:
            return float(x == int(round(coarse_center[0])) + frame.index)
        return float(y == int(round(coarse_center[1])) + frame.index)
    if kind == LINE_X:
        return float(x == int(round(frame.position)))
    if kind == LINE_Y:
        return float(y == int(round(frame.position)))
    raise ValueError(f"unknown frame kind {kind!r}")


def rasterize(frame: PatternFrame, m: int, width: int, height: int, coarse_center=None) -> np.ndarray:
    """Full projector image (height, width) of one frame."""
    xs = np.arange(width)
    ys = np.arange(height)
    kind = frame.kind
    if kind == WHITE:
        return np.ones((height, width))
    if kind == BLACK:
        return np.zeros((height, width))
    if kind == ID_BIT:
        return np.full((height, width), float((m >> frame.index) & 1))
    if kind == GRAY_X:
        row = ((xs ^ (xs >> 1)) >> frame.index) & 1
        return np.broadcast_to(row.astype(float), (height, width)).copy()
    if kind == GRAY_Y:
        col = ((ys ^ (ys >> 1)) >> frame.index) & 1
        return np.broadcast_to(col.astype(float)[:, None], (height, width)).copy()
    if kind in SHIFT_KINDS and coarse_center is None:
        raise MissingCoarseCenter(f"{frame} needs a coarse center")
    if kind == SHIFT_X:
        row = xs == int(round(coarse_center[0])) + frame.index
        return np.broadcast_to(row.astype(float), (height, width)).copy()
    if kind == SHIFT_Y:
        col = ys == int(round(coarse_center[1])) + frame.index
        return np.broadcast_to(col.astype(float)[:, None], (height, width)).copy()
    if kind == LINE_X:
        row = xs == int(round(frame.position))
        return np.broadcast_to(row.astype(float), (height, width)).copy()
    if kind == LINE_Y:
        col = ys == int(round(frame.position))
        return np.broadcast_to(col.astype(float)[:, None], (height, width)).copy()
    raise ValueError(f"unknown frame kind {kind!r}")


@dataclass(frozen=True)
class DecodeParams:
    intensity_threshold: float = 0.1
    subpixel_fit: Literal["parabola", "centroid"] = "parabola"
    guard_band: float = 0.05
    dynamic_range: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.intensity_threshold < 1.0:
            raise ValueError("intensity_threshold must lie in (0, 1)")
        if self.subpixel_fit not in ("parabola", "centroid"):
            raise ValueError(f"unknown subpixel_fit {self.subpixel_fit!r}")
        if not 0.0 <= self.guard_band < 0.5:
            raise ValueError("guard_band must lie in [0, 0.5)")
        if self.dynamic_range <= 0:
            raise ValueError("dynamic_range must be positive")


@dataclass(frozen=True)
class DecodedPixel:
    projector: int
    coarse: tuple[int, int]
    subpixel: tuple[float, float]


def subpixel_peak(offsets: Sequence[float], values: Sequence[float], method: str = "parabola") -> float:
    """Peak location over integer-spaced ``offsets``."""
    d = np.asarray(offsets, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    if d.size == 0:
        return 0.0
    if method == "centroid":
        w = v - v.min()
        total = w.sum()
        if total <= 0:
            return float(d[int(np.argmax(v))])
        return float((w * d).sum() / total)
    i = int(np.argmax(v))
    if i == 0 or i == d.size - 1:
        return float(d[i])
    denom = v[i - 1] - 2.0 * v[i] + v[i + 1]
    if denom >= 0:
        return float(d[i])
    delta = 0.5 * (v[i - 1] - v[i + 1]) / denom
    return float(d[i] + np.clip(delta, -1.0, 1.0))


def decode_timeseries(samples, patterns: PatternSet, params: DecodeParams = DecodeParams()) -> DecodedPixel:
    """Decode one pixel's (or one blob's mean) intensity sequence."""
    s = np.asarray(samples, dtype=np.float64)
    if s.shape != (len(patterns),):
        raise ValueError(f"expected {len(patterns)} samples, got {s.shape}")
    hi, lo = float(s.max()), float(s.min())
    swing = hi - lo
    if swing <= params.intensity_threshold * params.dynamic_range:
        raise NotIlluminated(f"temporal swing {swing:.4g} below threshold")
    thr = 0.5 * (hi + lo)
    binary = s[patterns.binary_indices]
    if binary.size and np.any(np.abs(binary - thr) < params.guard_band * swing):
        raise AmbiguousBit("a binary sample lies inside the guard band")

    def bits(idx):
        return [int(v) for v in s[idx] > thr]

    projector = 0
    for b in bits(patterns.id_indices):
        projector = (projector << 1) | b
    x = gray_decode(bits(patterns.gray_x_indices))
    y = gray_decode(bits(patterns.gray_y_indices))
    spec = patterns.spec
    if projector >= spec.num_projectors or x >= spec.width or y >= spec.height:
        raise CodeOutOfRange(f"decoded (m={projector}, x={x}, y={y}) out of range")

    sx, sy = float(x), float(y)
    offsets = patterns.shift_offsets
    if patterns.shift_x_indices:
        sx += subpixel_peak(offsets, s[patterns.shift_x_indices], params.subpixel_fit)
    if patterns.shift_y_indices:
        sy += subpixel_peak(offsets, s[patterns.shift_y_indices], params.subpixel_fit)
    return DecodedPixel(projector, (x, y), (sx, sy))


def decode_id_bits(stack: np.ndarray, patterns: PatternSet, params: DecodeParams = DecodeParams()):
    """Per-pixel projector ID for a (frames, ...) array of time series.

    Returns ``(ids, ok)`` where ``ok`` is False for pixels with an ambiguous
    ID bit. Binarization uses each pixel's own mid-range.
    """
    s = np.asarray(stack, dtype=np.float64)
    hi = s.max(axis=0)
    lo = s.min(axis=0)
    thr = 0.5 * (hi + lo)
    swing = hi - lo
    ids = np.zeros(s.shape[1:], dtype=np.int64)
    ok = np.ones(s.shape[1:], dtype=bool)
    for i in patterns.id_indices:
        ids = (ids << 1) | (s[i] > thr)
        ok &= np.abs(s[i] - thr) >= params.guard_band * swing
    return ids, ok
