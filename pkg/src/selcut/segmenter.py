"""Histogram-peak thresholding of reconstructed images into anomaly masks."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InvalidDataError, MissingROIError, NoThresholdError

NBINS = 256

# defaults for detect_peaks
SMOOTH_WINDOW = 5
MIN_PROMINENCE_FRACTION = 0.001
MIN_SEPARATION = 10


def to_bins(pixels) -> np.ndarray:
    """Intensity in [0, 1] -> integer bin on the 0-255 scale."""
    return np.clip(np.rint(np.asarray(pixels, dtype=np.float64) * 255.0), 0, 255).astype(np.int64)


def _pixels(s) -> np.ndarray:
    return np.asarray(getattr(s, "pixels", s), dtype=np.float64)


@dataclass(frozen=True)
class Histogram256:
    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts, dtype=np.int64)
        if c.shape != (NBINS,) or (c < 0).any():
            raise InvalidDataError("histogram needs 256 non-negative counts")
        object.__setattr__(self, "counts", c)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "Histogram256") -> "Histogram256":
        return Histogram256(self.counts + other.counts)

    def to_csv(self, path: Path | str) -> None:
        lines = ["bin,count"] + [f"{b},{c}" for b, c in enumerate(self.counts)]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def from_csv(cls, path: Path | str) -> "Histogram256":
        rows = Path(path).read_text().strip().splitlines()[1:]
        counts = np.zeros(NBINS, dtype=np.int64)
        for row in rows:
            b, c = row.split(",")
            counts[int(b)] = int(c)
        return cls(counts)


@dataclass(frozen=True)
class Peak:
    bin: int
    count: int  # raw histogram count at the bin
    height: float  # smoothed count
    prominence: float  # on the smoothed curve


@dataclass(frozen=True)
class ThresholdRule:
    polarity: str = "bright"
    threshold_override: int | None = None
    roi_required: bool = False

    def __post_init__(self):
        if self.polarity not in ("bright", "dark"):
            raise ValueError(f"polarity must be 'bright' or 'dark', got {self.polarity!r}")
        if self.threshold_override is not None and not 0 <= self.threshold_override <= 255:
            raise ValueError("threshold_override must be in 0..255")


def compute_histogram(slices: Sequence, roi: Sequence[np.ndarray] | None = None) -> Histogram256:
    """Pooled 256-bin histogram; with ``roi`` only pixels where roi is set count."""
    if roi is not None and len(roi) != len(slices):
        raise InvalidDataError(f"{len(slices)} slices but {len(roi)} ROI masks")
    counts = np.zeros(NBINS, dtype=np.int64)
    for i, s in enumerate(slices):
        b = to_bins(_pixels(s))
        if roi is not None:
            r = np.asarray(roi[i], dtype=bool)
            if r.shape != b.shape:
                raise InvalidDataError(f"ROI shape {r.shape} != slice shape {b.shape}")
            b = b[r]
        counts += np.bincount(b.ravel(), minlength=NBINS)
    return Histogram256(counts)


def smooth_counts(counts: np.ndarray, window: int) -> np.ndarray:
    """Centered moving average; edge bins average over the truncated window."""
    if window < 1 or window % 2 == 0:
        raise ValueError("smooth_window must be a positive odd integer")
    c = np.asarray(counts, dtype=np.int64)
    sums = np.convolve(c, np.ones(window, dtype=np.int64), mode="same")
    lengths = np.convolve(np.ones_like(c), np.ones(window, dtype=np.int64), mode="same")
    return sums / lengths


def _nearest_higher(s: np.ndarray, reverse: bool) -> np.ndarray:
    """Index of the nearest strictly higher value on one side (-1 if none)."""
    n = len(s)
    out = np.full(n, -1, dtype=np.int64)
    stack: list[int] = []
    order = range(n - 1, -1, -1) if reverse else range(n)
    for i in order:
        while stack and s[stack[-1]] <= s[i]:
            stack.pop()
        out[i] = stack[-1] if stack else -1
        stack.append(i)
    return out


def _refine(counts: np.ndarray, centre: int, half: int) -> int:
    lo, hi = max(0, centre - half), min(NBINS - 1, centre + half)
    return min(range(lo, hi + 1), key=lambda j: (-counts[j], abs(j - centre), j))


def detect_peaks(
    h: Histogram256,
    smooth_window: int = SMOOTH_WINDOW,
    min_prominence_fraction: float = MIN_PROMINENCE_FRACTION,
    min_separation: int = MIN_SEPARATION,
) -> list[Peak]:
    """Prominent, well-separated local maxima of the smoothed histogram.

    A peak is a maximal run of equal smoothed values whose outer neighbours
    are both strictly lower (an edge counts as lower); a run wider than one
    bin is reported at its centre, rounding down. Its prominence is the
    height above the higher of the two side bases, where a side base is the
    minimum between the run and the nearest strictly higher bin (or the
    histogram edge); a side with no bins is ignored. Peaks below
    ``min_prominence_fraction * total`` are dropped. Each survivor is then
    moved to the bin of largest raw count within half a window of its
    centre (nearest the centre on ties, then lower), since truncated edge
    windows otherwise pull a spike at 254 onto 255. Of peaks closer than
    ``min_separation`` bins the taller is kept, ties going to the lower bin.
    Returned in increasing bin order.
    """
    if h.total == 0:
        raise InvalidDataError("cannot detect peaks in an empty histogram")
    s = smooth_counts(h.counts, smooth_window)
    n = len(s)
    starts = np.flatnonzero(np.r_[True, s[1:] != s[:-1]])
    ends = np.r_[starts[1:] - 1, n - 1]

    prev_hi = _nearest_higher(s, reverse=False)
    next_hi = _nearest_higher(s, reverse=True)
    floor = min_prominence_fraction * h.total
    found = []
    for a, b in zip(starts, ends):
        if a == 0 and b == n - 1:
            continue
        if (a > 0 and s[a - 1] >= s[a]) or (b < n - 1 and s[b + 1] >= s[b]):
            continue
        bases = []
        if a > 0:
            bases.append(s[prev_hi[a] + 1 : a].min())
        if b < n - 1:
            hi = next_hi[b] if next_hi[b] >= 0 else n
            bases.append(s[b + 1 : hi].min())
        prom = s[a] - max(bases)
        if prom >= floor:
            i = _refine(h.counts, (a + b) // 2, smooth_window // 2)
            found.append(Peak(i, int(h.counts[i]), float(s[a]), float(prom)))

    kept: list[Peak] = []
    for p in sorted(found, key=lambda p: (-p.height, p.bin)):
        if all(abs(p.bin - q.bin) >= max(min_separation, 1) for q in kept):
            kept.append(p)
    return sorted(kept, key=lambda p: p.bin)


def select_threshold(peaks: Sequence[Peak], rule: ThresholdRule) -> int:
    """Override if set; else the last peak's bin (bright) or the first (dark)."""
    if rule.threshold_override is not None:
        return int(rule.threshold_override)
    if not peaks:
        raise NoThresholdError("no histogram peaks found; pass an explicit threshold")
    return int(peaks[-1].bin if rule.polarity == "bright" else peaks[0].bin)


def apply_threshold(image, t: int, rule: ThresholdRule, roi: np.ndarray | None = None) -> np.ndarray:
    """Binary mask of pixels at or above ``t`` on the 0-255 scale.

    Dark polarity zeroes pixels outside the ROI, inverts, then thresholds, so
    ``t`` is read on the inverted scale. A given ROI always clips the result.
    """
    if not 0 <= t <= 255:
        raise ValueError(f"threshold {t} outside 0..255")
    if rule.roi_required and roi is None:
        raise MissingROIError("threshold rule requires an ROI mask")
    v = _pixels(image)
    r = None if roi is None else np.asarray(roi, dtype=bool)
    if r is not None and r.shape != v.shape:
        raise InvalidDataError(f"ROI shape {r.shape} != image shape {v.shape}")
    if rule.polarity == "dark":
        if r is not None:
            v = np.where(r, v, 0.0)
        v = 1.0 - v
    mask = to_bins(v) >= t
    if r is not None:
        mask &= r
    return mask


def oriented(images: Sequence, rule: ThresholdRule, rois: Sequence[np.ndarray] | None = None) -> list[np.ndarray]:
    """Images on the scale the threshold is read on: as-is for bright, ROI-zeroed and inverted for dark."""
    out = []
    for i, im in enumerate(images):
        v = _pixels(im)
        if rule.polarity == "dark":
            if rois is not None:
                v = np.where(np.asarray(rois[i], dtype=bool), v, 0.0)
            v = 1.0 - v
        out.append(v)
    return out


@dataclass(frozen=True)
class ThresholdChoice:
    threshold: int
    histogram: Histogram256
    peaks: list[Peak]


def dataset_threshold(
    images: Sequence,
    rule: ThresholdRule,
    rois: Sequence[np.ndarray] | None = None,
    smooth_window: int = SMOOTH_WINDOW,
    min_prominence_fraction: float = MIN_PROMINENCE_FRACTION,
    min_separation: int = MIN_SEPARATION,
) -> ThresholdChoice:
    """One threshold for a whole set of reconstructions.

    The pooled histogram is taken on the oriented images (inverted inside the
    ROI for dark lesions) and the rightmost peak of that histogram is used, so
    the returned value feeds :func:`apply_threshold` directly.
    """
    if rule.roi_required and rois is None:
        raise MissingROIError("threshold rule requires ROI masks")
    hist = compute_histogram(oriented(images, rule, rois), rois)
    peaks = detect_peaks(hist, smooth_window, min_prominence_fraction, min_separation) if hist.total else []
    t = select_threshold(peaks, ThresholdRule("bright", rule.threshold_override))
    return ThresholdChoice(t, hist, peaks)


def flip_candidates(peaks: Sequence[Peak]) -> dict[str, int]:
    """Leftmost and rightmost peak bins, for inspecting cluster flips."""
    if not peaks:
        raise NoThresholdError("no histogram peaks found")
    return {"leftmost": int(peaks[0].bin), "rightmost": int(peaks[-1].bin)}
