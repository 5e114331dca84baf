"""Dataset loading, PPM decoding, resizing, and augmentation.

On-disk layout: ``<root>/<Person>/<ClassFolder>/*.ppm`` where the class
folder is one of Face, Medicalmask, scarf, Handocclusion, Objectocclusion
(case-insensitive). PPM P6 at 8 bits is the only image format; it is
codec-free and bit-exact, so fixtures can be committed and compared byte
for byte.

Augmentation applies rotate, shear, zoom, crop, resize-back and flip in a
fixed order, with every random draw derived from (spec.seed, draw_index),
so a given variant is reproducible bitwise.
"""

from __future__ import annotations

import enum
import logging
import os
from dataclasses import dataclass, replace
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .tensor import ShapeError, Tensor

logger = logging.getLogger(__name__)

RESIZE_TO = 224


class OcclusionClass(enum.IntEnum):
    FACE = 0
    MEDICAL_MASK = 1
    SCARF = 2
    HAND = 3
    OBJECT = 4


# Canonical folder spellings; lookup is case-insensitive.
CLASS_FOLDERS: Dict[OcclusionClass, str] = {
    OcclusionClass.FACE: "Face",
    OcclusionClass.MEDICAL_MASK: "Medicalmask",
    OcclusionClass.SCARF: "scarf",
    OcclusionClass.HAND: "Handocclusion",
    OcclusionClass.OBJECT: "Objectocclusion",
}

FOLDER_TO_CLASS: Dict[str, OcclusionClass] = {v.lower(): k for k, v in CLASS_FOLDERS.items()}

# The value written to the audit log's "type" column per class.
LOG_TYPES: Dict[OcclusionClass, str] = {
    OcclusionClass.FACE: "NA",
    OcclusionClass.MEDICAL_MASK: "Medical",
    OcclusionClass.SCARF: "scarf",
    OcclusionClass.HAND: "hand",
    OcclusionClass.OBJECT: "object",
}


@dataclass
class LabeledImage:
    """One sample: float pixels in [0, 1], its class, and its person.

    The loader always produces 224x224x3 pixels; synthetic test fixtures
    reuse the type at smaller extents for the toy profile.
    """

    pixels: Tensor
    occlusion: OcclusionClass
    person: str
    source: str = ""

    def __post_init__(self) -> None:
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ShapeError(f"LabeledImage pixels must be [H, W, 3], got {px.shape}")
        if not np.all(np.isfinite(px)):
            raise ValueError(f"LabeledImage {self.source!r} contains non-finite pixels")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ValueError(
                f"LabeledImage {self.source!r} pixels outside [0, 1]: min {px.min()}, max {px.max()}"
            )
        self.pixels = px


@dataclass(frozen=True)
class AugmentSpec:
    """Transform magnitudes; all draws come from (seed, draw index).

    zoom is a (low, high) factor range; crop keeps that fraction of each
    side before resizing back. fill covers regions the warp exposes.
    """

    rotation_degrees: float = 15.0
    shear_degrees: float = 10.0
    zoom: Tuple[float, float] = (0.9, 1.1)
    crop: float = 0.9
    flip_probability: float = 0.5
    fill: str = "zero"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.rotation_degrees < 0 or self.shear_degrees < 0:
            raise ValueError("rotation and shear ranges must be non-negative")
        if not 0.0 <= self.flip_probability <= 1.0:
            raise ValueError(f"flip probability must be in [0, 1], got {self.flip_probability}")
        if not 0.0 < self.crop <= 1.0:
            raise ValueError(f"crop fraction must be in (0, 1], got {self.crop}")
        low, high = self.zoom
        if not 0.0 < low <= high:
            raise ValueError(f"zoom range must satisfy 0 < low <= high, got {self.zoom}")
        if self.fill not in ("zero", "edge"):
            raise ValueError(f"fill must be 'zero' or 'edge', got {self.fill!r}")

    @classmethod
    def identity(cls, seed: int = 0) -> "AugmentSpec":
        return cls(rotation_degrees=0.0, shear_degrees=0.0, zoom=(1.0, 1.0),
                   crop=1.0, flip_probability=0.0, seed=seed)


# ---------------------------------------------------------------------------
# PPM (P6) codec.
# ---------------------------------------------------------------------------


def encode_ppm(pixels: Tensor) -> bytes:
    """Serialize [H, W, 3] floats in [0, 1] as binary 8-bit PPM."""
    px = np.asarray(pixels, dtype=np.float64)
    if px.ndim != 3 or px.shape[2] != 3:
        raise ShapeError(f"encode_ppm expects [H, W, 3], got {px.shape}")
    raw = np.clip(np.round(px * 255.0), 0, 255).astype(np.uint8)
    h, w = raw.shape[0], raw.shape[1]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + raw.tobytes()


def _ppm_tokens(data: bytes, count: int) -> Tuple[List[int], int]:
    """Read ``count`` integer header tokens; returns them and the offset
    of the first payload byte. Handles comments and any whitespace."""
    tokens: List[int] = []
    i = 0
    while len(tokens) < count:
        while i < len(data) and data[i : i + 1].isspace():
            i += 1
        if i < len(data) and data[i : i + 1] == b"#":
            while i < len(data) and data[i : i + 1] != b"\n":
                i += 1
            continue
        start = i
        while i < len(data) and not data[i : i + 1].isspace():
            i += 1
        tok = data[start:i]
        if not tok:
            raise ValueError("malformed PPM header: ran out of tokens")
        try:
            tokens.append(int(tok.decode("ascii")))
        except (UnicodeDecodeError, ValueError) as exc:
            raise ValueError(f"malformed PPM header token {tok!r}") from exc
    if i >= len(data):
        raise ValueError("malformed PPM header: no payload after maxval")
    return tokens, i + 1  # one whitespace byte separates header from payload


def decode_ppm(data: bytes) -> Tensor:
    """Parse binary PPM bytes into [H, W, 3] floats in [0, 1]."""
    if data[:2] != b"P6":
        raise ValueError(f"not a P6 image: magic {data[:2]!r}")
    (w, h, maxval), offset = _ppm_tokens(data[2:], 3)
    offset += 2
    if w < 1 or h < 1:
        raise ValueError(f"malformed PPM header: extents {w}x{h}")
    if maxval > 255:
        raise ValueError(f"PPM depth above 8 bits is unsupported (maxval {maxval})")
    if maxval < 1:
        raise ValueError(f"malformed PPM header: maxval {maxval}")
    need = w * h * 3
    payload = data[offset : offset + need]
    if len(payload) < need:
        raise ValueError(f"truncated PPM payload: expected {need} bytes, got {len(payload)}")
    raw = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    return raw.astype(np.float64) / float(maxval)


def read_ppm(path: str) -> Tensor:
    with open(path, "rb") as fh:
        return decode_ppm(fh.read())


def write_ppm(path: str, pixels: Tensor) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_ppm(pixels))


# ---------------------------------------------------------------------------
# Resizing and warping.
# ---------------------------------------------------------------------------


def bilinear_resize(pixels: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize with corners mapped to corners."""
    x = np.asarray(pixels, dtype=np.float64)
    if x.ndim != 3:
        raise ShapeError(f"bilinear_resize expects [H, W, C], got {x.shape}")
    h, w = x.shape[0], x.shape[1]
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target extents must be positive, got {out_h}x{out_w}")
    if (h, w) == (out_h, out_w):
        return x.copy()
    rows = np.arange(out_h) * ((h - 1) / (out_h - 1)) if out_h > 1 else np.zeros(1)
    cols = np.arange(out_w) * ((w - 1) / (out_w - 1)) if out_w > 1 else np.zeros(1)
    iy = np.floor(rows).astype(int)
    ix = np.floor(cols).astype(int)
    fy = (rows - iy)[:, None, None]
    fx = (cols - ix)[None, :, None]
    iy1 = np.minimum(iy + 1, h - 1)
    ix1 = np.minimum(ix + 1, w - 1)
    v00 = x[np.ix_(iy, ix)]
    v01 = x[np.ix_(iy, ix1)]
    v10 = x[np.ix_(iy1, ix)]
    v11 = x[np.ix_(iy1, ix1)]
    return (v00 * (1 - fy) * (1 - fx) + v01 * (1 - fy) * fx
            + v10 * fy * (1 - fx) + v11 * fy * fx)


def _sample_bilinear(x: np.ndarray, ys: np.ndarray, xs: np.ndarray, fill: str) -> np.ndarray:
    """Sample [H, W, C] pixels at fractional (ys, xs) coordinate grids."""
    h, w = x.shape[0], x.shape[1]
    inside = (ys >= 0) & (ys <= h - 1) & (xs >= 0) & (xs <= w - 1)
    cy = np.clip(ys, 0, h - 1)
    cx = np.clip(xs, 0, w - 1)
    iy = np.floor(cy).astype(int)
    ix = np.floor(cx).astype(int)
    fy = (cy - iy)[..., None]
    fx = (cx - ix)[..., None]
    iy1 = np.minimum(iy + 1, h - 1)
    ix1 = np.minimum(ix + 1, w - 1)
    out = (x[iy, ix] * (1 - fy) * (1 - fx) + x[iy, ix1] * (1 - fy) * fx
           + x[iy1, ix] * fy * (1 - fx) + x[iy1, ix1] * fy * fx)
    if fill == "zero":
        out[~inside] = 0.0
    return out


def decode_resize(data: bytes, size: int = RESIZE_TO) -> Tensor:
    """PPM bytes to a [size, size, 3] tensor of [0, 1] channel values."""
    return bilinear_resize(decode_ppm(data), size, size)


def horizontal_flip(pixels: Tensor) -> Tensor:
    """Mirror left-right; applying it twice restores the original."""
    return np.asarray(pixels, dtype=np.float64)[:, ::-1, :].copy()


# ---------------------------------------------------------------------------
# Augmentation.
# ---------------------------------------------------------------------------


def augment(image: LabeledImage, spec: AugmentSpec, draw_index: int) -> LabeledImage:
    """One deterministic random variant of ``image``.

    Order: rotate, shear, zoom (one combined warp), crop, resize back to
    the source extents, maybe flip. Draws come from (spec.seed, draw_index)
    in a fixed sequence, so the same pair always yields the same output.
    """
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed & 0xFFFFFFFF, draw_index]))
    angle = np.deg2rad(rng.uniform(-spec.rotation_degrees, spec.rotation_degrees))
    shear = np.deg2rad(rng.uniform(-spec.shear_degrees, spec.shear_degrees))
    zoom = rng.uniform(spec.zoom[0], spec.zoom[1])

    x = image.pixels
    h, w = x.shape[0], x.shape[1]
    rot = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
    sh = np.array([[1.0, np.tan(shear)], [0.0, 1.0]])
    fwd = (np.eye(2) * zoom) @ sh @ rot
    inv = np.linalg.inv(fwd)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    grid_y, grid_x = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
    src_x = inv[0, 0] * grid_x + inv[0, 1] * grid_y + cx
    src_y = inv[1, 0] * grid_x + inv[1, 1] * grid_y + cy
    out = _sample_bilinear(x, src_y, src_x, spec.fill)

    crop_h = max(1, int(round(spec.crop * h)))
    crop_w = max(1, int(round(spec.crop * w)))
    top = int(rng.integers(0, h - crop_h + 1))
    left = int(rng.integers(0, w - crop_w + 1))
    out = out[top : top + crop_h, left : left + crop_w, :]
    out = bilinear_resize(out, h, w)
    if rng.uniform() < spec.flip_probability:
        out = horizontal_flip(out)
    out = np.clip(out, 0.0, 1.0)
    return replace(image, pixels=out, source=f"{image.source}#aug{draw_index}")


def expand_dataset(images: Sequence[LabeledImage], spec: AugmentSpec, count: int) -> List[LabeledImage]:
    """Each source image followed by ``count`` deterministic variants."""
    if count < 0:
        raise ValueError(f"variant count must be >= 0, got {count}")
    out: List[LabeledImage] = []
    for image in images:
        out.append(image)
        for i in range(count):
            out.append(augment(image, spec, i))
    return out


# ---------------------------------------------------------------------------
# Dataset loading.
# ---------------------------------------------------------------------------


def load_dataset(root: str, size: int = RESIZE_TO) -> List[LabeledImage]:
    """Walk ``<root>/<Person>/<ClassFolder>/*.ppm`` into labeled images.

    Order is lexicographic by path, so downstream shuffles are the only
    source of randomness. Unreadable files are skipped with a warning;
    unknown class folders and an empty result are errors.
    """
    if not os.path.isdir(root):
        raise ValueError(f"dataset root {root!r} is not a directory")
    images: List[LabeledImage] = []
    skipped = 0
    for person in sorted(os.listdir(root)):
        person_dir = os.path.join(root, person)
        if not os.path.isdir(person_dir):
            continue
        for folder in sorted(os.listdir(person_dir)):
            class_dir = os.path.join(person_dir, folder)
            if not os.path.isdir(class_dir):
                continue
            if folder.lower() not in FOLDER_TO_CLASS:
                known = ", ".join(CLASS_FOLDERS.values())
                raise ValueError(f"unknown occlusion folder {folder!r} under {person!r}; expected one of: {known}")
            occlusion = FOLDER_TO_CLASS[folder.lower()]
            for name in sorted(os.listdir(class_dir)):
                if not name.lower().endswith(".ppm"):
                    continue
                path = os.path.join(class_dir, name)
                try:
                    with open(path, "rb") as fh:
                        pixels = decode_resize(fh.read(), size)
                except (OSError, ValueError) as exc:
                    skipped += 1
                    logger.warning("skipping unreadable image %s: %s", path, exc)
                    continue
                images.append(LabeledImage(pixels=pixels, occlusion=occlusion, person=person, source=path))
    if skipped:
        logger.warning("skipped %d unreadable image(s) under %s", skipped, root)
    if not images:
        raise ValueError(f"empty dataset under {root!r}")
    return images


def dataset_counts(images: Sequence[LabeledImage]) -> Dict[Tuple[str, OcclusionClass], int]:
    """Per-person, per-class sample counts for reporting."""
    counts: Dict[Tuple[str, OcclusionClass], int] = {}
    for image in images:
        key = (image.person, image.occlusion)
        counts[key] = counts.get(key, 0) + 1
    return counts
