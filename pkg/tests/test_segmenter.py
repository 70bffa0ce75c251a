import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from selcut.errors import InvalidDataError, MissingROIError, NoThresholdError
from selcut.segmenter import (
    Histogram256,
    Peak,
    ThresholdRule,
    apply_threshold,
    compute_histogram,
    dataset_threshold,
    detect_peaks,
    flip_candidates,
    select_threshold,
    smooth_counts,
)


# --- independent oracle ---------------------------------------------------------------


def oracle_smooth(counts, window):
    half = window // 2
    out = []
    for i in range(256):
        lo, hi = max(0, i - half), min(255, i + half)
        out.append(sum(int(counts[j]) for j in range(lo, hi + 1)) / (hi - lo + 1))
    return out


def oracle_peaks(counts, window, frac, sep):
    """Exhaustive O(256^2) peak search written from the definition."""
    s = oracle_smooth(counts, window)
    total = sum(int(c) for c in counts)
    found = {}
    for i in range(256):
        a = i
        while a > 0 and s[a - 1] == s[i]:
            a -= 1
        b = i
        while b < 255 and s[b + 1] == s[i]:
            b += 1
        if a == 0 and b == 255:
            continue
        if a > 0 and not s[a - 1] < s[i]:
            continue
        if b < 255 and not s[b + 1] < s[i]:
            continue
        bases = []
        left = []
        j = a - 1
        while j >= 0 and s[j] <= s[i]:
            left.append(s[j])
            j -= 1
        if left:
            bases.append(min(left))
        right = []
        j = b + 1
        while j <= 255 and s[j] <= s[i]:
            right.append(s[j])
            j += 1
        if right:
            bases.append(min(right))
        prom = s[i] - max(bases)
        if prom >= frac * total:
            centre = (a + b) // 2
            half = window // 2
            best = centre
            for j in range(max(0, centre - half), min(255, centre + half) + 1):
                key, best_key = (-counts[j], abs(j - centre), j), (-counts[best], abs(best - centre), best)
                if key < best_key:
                    best = j
            found[(a, b)] = (best, s[i], prom)
    kept = []
    for c, h, prom in sorted(found.values(), key=lambda t: (-t[1], t[0])):
        if all(abs(c - k[0]) >= max(sep, 1) for k in kept):
            kept.append((c, h, prom))
    return sorted(kept)


def random_histogram(rng) -> np.ndarray:
    kind = rng.integers(4)
    if kind == 0:
        return rng.integers(0, 50, 256)
    if kind == 1:  # sparse spikes
        c = np.zeros(256, dtype=np.int64)
        c[rng.integers(0, 256, rng.integers(1, 8))] = rng.integers(1, 500, 1)[0]
        return c
    if kind == 2:  # plateaus
        return np.repeat(rng.integers(0, 6, 32), 8)
    x = np.arange(256)
    c = np.zeros(256)
    for _ in range(rng.integers(1, 5)):
        c += rng.integers(100, 5000) * np.exp(-0.5 * ((x - rng.integers(0, 256)) / rng.uniform(2, 20)) ** 2)
    return np.rint(c + rng.integers(0, 3, 256)).astype(np.int64)


def test_detect_peaks_matches_oracle_on_1000_histograms():
    rng = np.random.default_rng(2024)
    for trial in range(1000):
        counts = random_histogram(rng)
        if counts.sum() == 0:
            counts[rng.integers(256)] = 1
        window = int(rng.choice([1, 3, 5, 7]))
        frac = float(rng.choice([0.0, 0.001, 0.01]))
        sep = int(rng.choice([1, 5, 10]))
        got = [(p.bin, p.height, p.prominence) for p in detect_peaks(Histogram256(counts), window, frac, sep)]
        want = oracle_peaks(counts, window, frac, sep)
        assert [g[0] for g in got] == [w[0] for w in want], f"trial {trial}"
        for g, w in zip(got, want):
            assert g[1] == pytest.approx(w[1], abs=1e-9) and g[2] == pytest.approx(w[2], abs=1e-9)


# --- examples ----------------------------------------------------------------------------


def test_histogram_of_ones():
    h = compute_histogram([np.ones((4, 4))])
    assert h.counts[255] == 16 and h.total == 16


def test_empty_roi_histogram():
    h = compute_histogram([np.zeros((4, 4))], roi=[np.zeros((4, 4), bool)])
    assert h.total == 0


def test_histogram_matches_scalar_tally(rng):
    imgs = [rng.random((5, 7)) for _ in range(3)]
    want = [0] * 256
    for im in imgs:
        for v in im.ravel():
            want[min(255, max(0, int(np.rint(v * 255))))] += 1
    assert compute_histogram(imgs).counts.tolist() == want


def test_histogram_shape_mismatch():
    with pytest.raises(InvalidDataError):
        compute_histogram([np.zeros((4, 4))], roi=[np.zeros((3, 4), bool)])
    with pytest.raises(InvalidDataError):
        compute_histogram([np.zeros((4, 4))], roi=[])


def test_single_spike():
    c = np.zeros(256, dtype=int)
    c[100] = 5
    peaks = detect_peaks(Histogram256(c), smooth_window=1, min_prominence_fraction=0)
    assert [p.bin for p in peaks] == [100]


def test_ramp_peaks_at_last_bin():
    peaks = detect_peaks(Histogram256(np.arange(256)), smooth_window=1, min_prominence_fraction=0)
    assert [p.bin for p in peaks] == [255]


def test_smoothed_spike_still_found_with_defaults():
    c = np.zeros(256, dtype=int)
    c[254] = 1000
    c[30] = 2000
    assert [p.bin for p in detect_peaks(Histogram256(c))] == [30, 254]


def test_empty_histogram_rejected():
    with pytest.raises(InvalidDataError):
        detect_peaks(Histogram256(np.zeros(256, dtype=int)))


def test_smoothing_edges_use_truncated_window():
    c = np.zeros(256, dtype=int)
    c[0] = 6
    s = smooth_counts(c, 5)
    assert s[0] == 2.0 and s[1] == 1.5 and s[2] == 1.2 and s[3] == 0


def test_select_threshold_rules():
    peaks = [Peak(b, 1, 1.0, 1.0) for b in (30, 127, 254)]
    assert select_threshold(peaks, ThresholdRule("bright")) == 254
    assert select_threshold(peaks, ThresholdRule("dark")) == 30
    assert select_threshold(peaks, ThresholdRule("bright", threshold_override=200)) == 200
    one = [Peak(90, 1, 1.0, 1.0)]
    assert select_threshold(one, ThresholdRule("bright")) == select_threshold(one, ThresholdRule("dark")) == 90
    with pytest.raises(NoThresholdError):
        select_threshold([], ThresholdRule())


def test_inverted_histogram_rightmost_peak():
    # dark lesions: after inversion the lesion is the rightmost cluster
    peaks = [Peak(b, 1, 1.0, 1.0) for b in (60, 180, 242)]
    assert select_threshold(peaks, ThresholdRule("bright")) == 242


def test_apply_threshold_examples():
    rule = ThresholdRule("bright")
    assert apply_threshold(np.ones((4, 4)), 255, rule).all()
    assert not apply_threshold(np.full((4, 4), 0.5), 254, rule).any()


def test_apply_threshold_matches_scalar_loop(rng):
    img = rng.random((9, 11))
    rule = ThresholdRule("bright")
    m = apply_threshold(img, 140, rule)
    for (r, c), v in np.ndenumerate(img):
        assert m[r, c] == (round(v * 255) >= 140)


def test_dark_rule_needs_roi():
    rule = ThresholdRule("dark", roi_required=True)
    with pytest.raises(MissingROIError):
        apply_threshold(np.zeros((4, 4)), 10, rule)


def test_override_bounds():
    with pytest.raises(ValueError):
        ThresholdRule("bright", threshold_override=256)
    with pytest.raises(ValueError):
        ThresholdRule("grey")


def test_dataset_threshold_dark_inverts_inside_roi():
    img = np.full((8, 8), 0.6)
    img[2:4, 2:4] = 0.1  # dark lesion
    roi = np.zeros((8, 8), bool)
    roi[1:7, 1:7] = True
    rule = ThresholdRule("dark", roi_required=True)
    choice = dataset_threshold([img], rule, [roi], smooth_window=1, min_prominence_fraction=0, min_separation=1)
    mask = apply_threshold(img, choice.threshold, rule, roi)
    want = np.zeros((8, 8), bool)
    want[2:4, 2:4] = True
    assert np.array_equal(mask, want)


def test_flip_candidates():
    peaks = [Peak(b, 1, 1.0, 1.0) for b in (10, 100, 200)]
    assert flip_candidates(peaks) == {"leftmost": 10, "rightmost": 200}
    with pytest.raises(NoThresholdError):
        flip_candidates([])


def test_histogram_csv_round_trip(tmp_path, rng):
    h = Histogram256(rng.integers(0, 1000, 256))
    h.to_csv(tmp_path / "h.csv")
    assert np.array_equal(Histogram256.from_csv(tmp_path / "h.csv").counts, h.counts)


# --- properties --------------------------------------------------------------------------

images = arrays(np.float64, (6, 6), elements=st.floats(0, 1))


@given(st.lists(images, min_size=1, max_size=3))
def test_histogram_conservation(imgs):
    assert compute_histogram(imgs).total == 36 * len(imgs)


@given(images, st.integers(0, 255), st.integers(0, 255))
def test_threshold_monotone(img, t1, t2):
    lo, hi = sorted((t1, t2))
    rule = ThresholdRule("bright")
    assert not (apply_threshold(img, hi, rule) & ~apply_threshold(img, lo, rule)).any()


@given(images, arrays(bool, (6, 6)), st.integers(0, 255))
def test_inversion_duality(img, roi, t):
    dark = apply_threshold(img, t, ThresholdRule("dark"), roi)
    bright = apply_threshold(1 - img, t, ThresholdRule("bright"), roi)
    assert np.array_equal(dark & roi, bright & roi)


@given(arrays(np.int64, 256, elements=st.integers(0, 40)))
def test_peaks_sorted_separated_and_prominent(counts):
    if counts.sum() == 0:
        return
    h = Histogram256(counts)
    peaks = detect_peaks(h)
    bins = [p.bin for p in peaks]
    assert bins == sorted(bins)
    assert all(b - a >= 10 for a, b in zip(bins, bins[1:]))
    assert all(p.prominence >= 0.001 * h.total for p in peaks)
