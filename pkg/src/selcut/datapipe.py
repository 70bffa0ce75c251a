"""Volumes, slices, manifests, set balancing and the synthetic phantom corpus."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .errors import EmptyResultError, GenerationError, InvalidDataError, InvalidManifestError

SIZE_MULTIPLE = 16


@dataclass(frozen=True)
class Volume:
    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    subject_id: str = ""

    def __post_init__(self):
        if self.voxels.ndim != 3 or min(self.voxels.shape) < 1:
            raise InvalidDataError(f"volume must be a non-empty 3D grid, got shape {self.voxels.shape}")
        if any(s <= 0 for s in self.spacing):
            raise InvalidDataError(f"spacing must be positive, got {self.spacing}")


@dataclass(frozen=True)
class Slice:
    """A 2D grayscale image in [0, 1] whose sides are multiples of 16."""

    pixels: np.ndarray
    subject_id: str = ""
    index: int = 0

    def __post_init__(self):
        p = self.pixels
        if p.ndim != 2:
            raise InvalidDataError(f"slice must be 2D, got shape {p.shape}")
        h, w = p.shape
        if h == 0 or w == 0 or h % SIZE_MULTIPLE or w % SIZE_MULTIPLE:
            raise InvalidDataError(f"slice shape {p.shape} is not divisible by {SIZE_MULTIPLE}")
        if not np.all(np.isfinite(p)) or p.min() < 0.0 or p.max() > 1.0:
            raise InvalidDataError(f"slice {self.subject_id}:{self.index} has pixels outside [0, 1]")
        if self.index < 0:
            raise InvalidDataError("slice index must be >= 0")

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape


@dataclass(frozen=True)
class ReferenceSet:
    slices: tuple[Slice, ...]

    def __post_init__(self):
        object.__setattr__(self, "slices", tuple(self.slices))
        if not self.slices:
            raise InvalidDataError("reference set must be non-empty")

    def __len__(self) -> int:
        return len(self.slices)

    def __iter__(self):
        return iter(self.slices)


@dataclass(frozen=True)
class SubjectRecord:
    subject_id: str
    slice_paths: list[Path]
    mask_paths: list[Path] | None = None
    modality: str = ""

    def __post_init__(self):
        if self.mask_paths is not None and len(self.mask_paths) != len(self.slice_paths):
            raise InvalidManifestError(
                f"subject {self.subject_id!r}: {len(self.slice_paths)} slices but {len(self.mask_paths)} masks"
            )


@dataclass(frozen=True)
class PhantomSpec:
    """Parameters of the synthetic organ/lesion phantom.

    Radii are fractions of ``image_size``. The lesion is painted with
    ``anomaly_brightness``; ``lesion_polarity="dark"`` gives the darker-than-organ
    variant and requires ``anomaly_brightness < organ_intensity``.
    """

    image_size: int = 64
    organ_radius_range: tuple[float, float] = (0.28, 0.40)
    anomaly_radius_range: tuple[float, float] = (0.06, 0.12)
    anomaly_brightness: float = 0.9
    noise_std: float = 0.05
    organ_intensity: float = 0.45
    lesion_polarity: str = "bright"

    def __post_init__(self):
        object.__setattr__(self, "organ_radius_range", tuple(self.organ_radius_range))
        object.__setattr__(self, "anomaly_radius_range", tuple(self.anomaly_radius_range))

    def validate(self) -> None:
        if self.image_size <= 0 or self.image_size % SIZE_MULTIPLE:
            raise GenerationError(f"image_size must be a positive multiple of {SIZE_MULTIPLE}")
        for name in ("organ_radius_range", "anomaly_radius_range"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise GenerationError(f"{name} must satisfy 0 < low <= high, got {(lo, hi)}")
        if not 0 < self.anomaly_brightness <= 1:
            raise GenerationError("anomaly_brightness must be in (0, 1]")
        if self.noise_std < 0:
            raise GenerationError("noise_std must be >= 0")
        if self.lesion_polarity not in ("bright", "dark"):
            raise GenerationError(f"unknown lesion_polarity {self.lesion_polarity!r}")
        if (self.lesion_polarity == "bright") != (self.anomaly_brightness > self.organ_intensity):
            raise GenerationError(
                f"{self.lesion_polarity} lesions need anomaly_brightness on that side of organ_intensity"
            )
        # the largest lesion must fit inside the smallest organ with a pixel margin
        margin = _FIT_MARGIN_PX / self.image_size
        if self.anomaly_radius_range[1] + margin >= self.organ_radius_range[0]:
            raise GenerationError("anomaly radius range does not fit inside the organ radius range")


_FIT_MARGIN_PX = 1.5


def normalize_volume(v: Volume) -> Volume:
    """Min-max rescale over the whole volume; constant volumes map to zeros."""
    x = np.asarray(v.voxels, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise InvalidDataError(f"volume {v.subject_id!r} contains non-finite voxels")
    lo, hi = x.min(), x.max()
    if hi == lo:
        out = np.zeros_like(x)
    else:
        out = np.clip((x - lo) / (hi - lo), 0.0, 1.0)
    return Volume(out, v.spacing, v.subject_id)


def padded_shape(shape: tuple[int, int]) -> tuple[int, int]:
    return tuple(int(math.ceil(s / SIZE_MULTIPLE) * SIZE_MULTIPLE) for s in shape)


def resize_image(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of a 2D float image to ``size`` = (H, W)."""
    if img.shape == tuple(size):
        return np.asarray(img, dtype=np.float64)
    h, w = size
    out = Image.fromarray(np.asarray(img, dtype=np.float32), mode="F").resize((w, h), Image.BILINEAR)
    return np.clip(np.asarray(out, dtype=np.float64), 0.0, 1.0)


def extract_slices(
    v: Volume,
    axis: int = 2,
    min_nonzero_fraction: float = 0.01,
    size: tuple[int, int] | None = None,
) -> list[Slice]:
    """Cut a normalized volume into 2D slices along ``axis`` (axial = last axis).

    Slices with fewer than ``min_nonzero_fraction`` nonzero pixels are dropped;
    the rest are resized to ``size`` or, if not given, to the next multiple of 16.
    """
    x = np.moveaxis(np.asarray(v.voxels, dtype=np.float64), axis, 0)
    target = tuple(size) if size is not None else padded_shape(x.shape[1:])
    out = []
    for k, img in enumerate(x):
        if np.count_nonzero(img) / img.size >= min_nonzero_fraction:
            out.append(Slice(resize_image(img, target), v.subject_id, k))
    if not out:
        raise EmptyResultError(
            f"no slice of {v.subject_id!r} has a nonzero fraction >= {min_nonzero_fraction}"
        )
    return out


def balance_sets(
    inputs: Sequence[Slice], reference: ReferenceSet, seed: int
) -> tuple[list[Slice], ReferenceSet]:
    """Pad the smaller set with seeded uniform duplicates of its own members."""
    if not inputs or not len(reference):
        raise InvalidDataError("cannot balance an empty set")
    inputs = list(inputs)
    refs = list(reference.slices)
    rng = np.random.default_rng(seed)
    target = max(len(inputs), len(refs))

    def pad(items):
        extra = rng.choice(len(items), size=target - len(items), replace=True)
        return items + [items[i] for i in extra]

    return pad(inputs), ReferenceSet(pad(refs))


def generate_phantom(spec: PhantomSpec, with_anomaly: bool, seed: int) -> tuple[Slice, np.ndarray]:
    """Render one phantom: dark background, elliptical organ, optional lesion disk.

    Returns the slice and a boolean mask marking exactly the lesion pixels.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    n = spec.image_size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64) + 0.5

    cy, cx = (n / 2 + rng.uniform(-0.06, 0.06, size=2) * n)
    a, b = rng.uniform(*spec.organ_radius_range, size=2) * n
    theta = rng.uniform(0, np.pi)
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    w = -dx * np.sin(theta) + dy * np.cos(theta)
    organ = (u / a) ** 2 + (w / b) ** 2 < 1.0

    img = np.where(organ, spec.organ_intensity, 0.0)
    mask = np.zeros((n, n), dtype=bool)
    if with_anomaly:
        r = rng.uniform(*spec.anomaly_radius_range) * n
        reach = min(a, b) - r - _FIT_MARGIN_PX
        if reach < 0:
            raise GenerationError(f"lesion radius {r:.2f}px does not fit in organ ({a:.2f}, {b:.2f})")
        rho = reach * np.sqrt(rng.uniform())
        phi = rng.uniform(0, 2 * np.pi)
        ay, ax = cy + rho * np.sin(phi), cx + rho * np.cos(phi)
        mask = (yy - ay) ** 2 + (xx - ax) ** 2 <= r * r
        img = np.where(mask, spec.anomaly_brightness, img)

    if spec.noise_std > 0:
        img = np.clip(img + rng.normal(0.0, spec.noise_std, size=img.shape), 0.0, 1.0)
    return Slice(img, f"phantom{seed}", 0), mask


# --- file I/O -----------------------------------------------------------------


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(pixels, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_png(path: Path | str, pixels: np.ndarray) -> None:
    Image.fromarray(to_uint8(pixels), mode="L").save(path, format="PNG")


def save_mask_png(path: Path | str, mask: np.ndarray) -> None:
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8), mode="L").save(path, format="PNG")


def load_png(path: Path | str) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


def load_mask_png(path: Path | str) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) >= 128


def load_subject(manifest_path: Path | str) -> SubjectRecord:
    """Parse a JSON manifest; paths are resolved relative to its directory."""
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise FileNotFoundError(f"manifest not found: {manifest_path}")
    try:
        doc = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise InvalidManifestError(f"{manifest_path}: {e}") from e
    for key in ("subject_id", "slices"):
        if key not in doc:
            raise InvalidManifestError(f"{manifest_path}: missing key {key!r}")

    base = manifest_path.parent
    slices = [base / p for p in doc["slices"]]
    masks = [base / p for p in doc["masks"]] if doc.get("masks") is not None else None
    if masks is not None and len(masks) != len(slices):
        raise InvalidManifestError(
            f"{manifest_path}: {len(slices)} slices but {len(masks)} masks"
        )
    for p in slices + (masks or []):
        if not p.is_file():
            raise FileNotFoundError(f"file listed in {manifest_path} not found: {p}")
    return SubjectRecord(str(doc["subject_id"]), slices, masks, str(doc.get("modality", "")))


def write_manifest(
    path: Path | str,
    subject_id: str,
    slices: Sequence[str],
    masks: Sequence[str] | None = None,
    modality: str = "",
) -> None:
    doc = {"subject_id": subject_id, "modality": modality, "slices": list(slices)}
    if masks is not None:
        doc["masks"] = list(masks)
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_slices(record: SubjectRecord) -> list[Slice]:
    return [Slice(load_png(p), record.subject_id, i) for i, p in enumerate(record.slice_paths)]


def load_masks(record: SubjectRecord) -> list[np.ndarray]:
    if record.mask_paths is None:
        raise InvalidManifestError(f"subject {record.subject_id!r} lists no masks")
    return [load_mask_png(p) for p in record.mask_paths]
