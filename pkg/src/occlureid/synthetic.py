"""Procedural image fixtures: colored stand-in faces with occluders.

No real faces anywhere in the test suite. Each synthetic person owns a
saturated hue, a background pattern family, a torso color and a freckle
layout; each occlusion class paints a distinctive shape (mask rectangle,
scarf stripes, hand disc, object slab) over the face region only, so the
surrounding appearance stays person-specific. Every image is fully
determined by (person index, class, variant index), and pixels are
quantized to the 8-bit grid so PPM round trips are bit-exact.
"""

from __future__ import annotations

import colorsys
import os
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .data import CLASS_FOLDERS, LabeledImage, OcclusionClass, write_ppm

PERSON_NAMES = ("Asha", "Boris", "Chen", "Divya", "Elif", "Farid", "Grace", "Hugo")


def person_name(index: int) -> str:
    if 0 <= index < len(PERSON_NAMES):
        return PERSON_NAMES[index]
    return f"Person{index:02d}"


def _person_style(index: int) -> dict:
    """Appearance constants for one synthetic person.

    Hues step slowly with the index, so neighbouring indices form look-alike
    families while distant indices (the impostor pool) sit far across the
    color wheel.
    """
    rng = np.random.default_rng(np.random.SeedSequence([7919, index]))
    hue = (0.02 + 0.045 * index) % 1.0
    torso_hue = (hue + 0.08 + 0.06 * float(rng.uniform())) % 1.0
    palette = [
        colorsys.hsv_to_rgb(hue, 0.95, 0.80),
        colorsys.hsv_to_rgb(hue, 0.95, 0.30),
        colorsys.hsv_to_rgb(torso_hue, 0.90, 0.60),
        colorsys.hsv_to_rgb((hue + 0.15) % 1.0, 0.85, 0.70),
    ]
    return {
        "hue": hue,
        "torso_hue": torso_hue,
        "bands": rng.integers(0, len(palette), size=16),
        "band_width": int(rng.integers(2, 5)),
        "palette": np.array(palette),
        "face_tint": 0.35 + 0.15 * float(rng.uniform()),
        "freckles": rng.uniform(-0.6, 0.6, size=(6, 2)),
        "face_cy": 0.43 + 0.06 * float(rng.uniform()),
        "face_cx": 0.47 + 0.06 * float(rng.uniform()),
        "face_ry": 0.28 + 0.06 * float(rng.uniform()),
        "torso_top": 0.78 + 0.08 * float(rng.uniform()),
        "margin": 1 + int(rng.integers(0, 2)),
    }


def _barcode(style: dict, size: int) -> np.ndarray:
    """Vertical color bands, constant down the image: one person's backdrop."""
    cols = np.arange(size) // style["band_width"]
    band_colors = style["palette"][style["bands"][cols % len(style["bands"])]]
    return np.broadcast_to(band_colors[None, :, :], (size, size, 3)).copy()


def _paint_disc(img: np.ndarray, cy: float, cx: float, ry: float, rx: float, color) -> None:
    yy, xx = np.mgrid[0 : img.shape[0], 0 : img.shape[1]]
    mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    img[mask] = color


def _paint_rect(img: np.ndarray, r0: float, r1: float, c0: float, c1: float, color) -> None:
    s = img.shape[0]
    img[int(r0 * s) : int(r1 * s), int(c0 * img.shape[1]) : int(c1 * img.shape[1])] = color


def synth_image(person_index: int, occlusion: OcclusionClass, variant: int, size: int = 32) -> np.ndarray:
    """One [size, size, 3] image on the 8-bit value grid."""
    style = _person_style(person_index)
    rng = np.random.default_rng(np.random.SeedSequence([1234, person_index, int(occlusion), variant]))
    img = np.zeros((size, size, 3))

    # Vertical barcode backdrop in the person's palette; constant down the
    # frame so every image row carries the same identity signature.
    img[...] = _barcode(style, size)

    # Torso band and side margins in the person's second color, at
    # person-specific heights and widths; occluders never reach them.
    torso = np.array(colorsys.hsv_to_rgb(style["torso_hue"], 0.90, 0.70))
    _paint_rect(img, style["torso_top"], 1.0, 0.0, 1.0, torso)
    img[:, : style["margin"], :] = torso
    img[:, size - style["margin"] :, :] = torso

    # Face: a tinted ellipse at a person-specific position and scale,
    # with eyes and person-fixed freckles. Variants jitter it slightly.
    cy = style["face_cy"] * size + rng.uniform(-1.0, 1.0)
    cx = style["face_cx"] * size + rng.uniform(-1.0, 1.0)
    ry = style["face_ry"] * size
    rx = 0.80 * ry
    person_rgb = np.array(colorsys.hsv_to_rgb(style["hue"], 0.9, 0.9))
    skin = np.array([0.87, 0.68, 0.52])
    face_color = (1.0 - style["face_tint"]) * skin + style["face_tint"] * person_rgb
    _paint_disc(img, cy, cx, ry, rx, face_color)
    for side in (-1.0, 1.0):
        _paint_disc(img, cy - 0.35 * ry, cx + side * 0.38 * rx, 0.14 * ry, 0.14 * ry, (0.08, 0.07, 0.08))
    for fy, fx in style["freckles"]:
        r = int(np.clip(cy + fy * ry * 0.8, 0, size - 1))
        c = int(np.clip(cx + fx * rx * 0.8, 0, size - 1))
        img[r, c] = face_color * 0.6

    # Occluders track the face box and are rendered in the person's own
    # palette (their mask, scarf, skin, phone), so the class signal is
    # shape and texture while color and geometry keep carrying identity.
    white = np.array([0.93, 0.95, 0.98])
    span = lambda a, b: (int(np.clip(a, 0, size)), int(np.clip(b, 0, size)))
    if occlusion == OcclusionClass.MEDICAL_MASK:
        mask_color = 0.65 * white + 0.35 * person_rgb
        r0, r1 = span(cy, cy + 0.85 * ry)
        c0, c1 = span(cx - 0.75 * rx, cx + 0.75 * rx)
        img[r0:r1, c0:c1] = mask_color
        strap = int(np.clip(cy + 0.25 * ry, 0, size - 1))
        s0, _ = span(cx - 1.4 * rx, 0)
        _, s1 = span(0, cx + 1.4 * rx)
        img[strap, s0:c0] = mask_color * 0.92
        img[strap, c1:s1] = mask_color * 0.92
    elif occlusion == OcclusionClass.SCARF:
        stripe_a = np.array(colorsys.hsv_to_rgb(style["torso_hue"], 0.90, 0.60))
        stripe_b = np.array(colorsys.hsv_to_rgb(style["hue"], 0.90, 0.35))
        r0, r1 = span(cy + 0.40 * ry, style["torso_top"] * size)
        c0, c1 = span(cx - 1.15 * rx, cx + 1.15 * rx)
        for row in range(r0, max(r1, r0 + 4)):
            img[row, c0:c1, :] = stripe_a if (row - r0) // 2 % 2 == 0 else stripe_b
    elif occlusion == OcclusionClass.HAND:
        hy = cy + 0.40 * ry + rng.uniform(-1.0, 1.0)
        hx = cx - 0.20 * rx + rng.uniform(-1.5, 1.5)
        _paint_disc(img, hy, hx, 0.62 * ry, 0.55 * rx, face_color)
        _paint_disc(img, hy - 0.45 * ry, hx + 0.30 * rx, 0.22 * ry, 0.17 * rx, face_color * 0.93)
    elif occlusion == OcclusionClass.OBJECT:
        slab = np.array(colorsys.hsv_to_rgb(style["hue"], 0.85, 0.25))
        panel = np.array(colorsys.hsv_to_rgb(style["torso_hue"], 0.80, 0.45))
        r0, r1 = span(cy - 0.50 * ry, cy + 0.80 * ry)
        c0, c1 = span(cx + 0.20 * rx, cx + 1.30 * rx)
        img[r0:r1, c0:c1] = slab
        pr0, pr1 = span(cy - 0.30 * ry, cy + 0.60 * ry)
        pc0, pc1 = span(cx + 0.35 * rx, cx + 1.15 * rx)
        img[pr0:pr1, pc0:pc1] = panel

    img *= rng.uniform(0.95, 1.05)
    img += rng.normal(0.0, 0.012, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    return np.round(img * 255.0) / 255.0


def labeled(person_index: int, occlusion: OcclusionClass, variant: int, size: int = 32) -> LabeledImage:
    return LabeledImage(
        pixels=synth_image(person_index, occlusion, variant, size),
        occlusion=occlusion,
        person=person_name(person_index),
        source=f"synthetic://{person_name(person_index)}/{CLASS_FOLDERS[occlusion]}/{variant}",
    )


def classification_fixture(size: int = 32, per_class: int = 20, person_count: int = 4) -> List[LabeledImage]:
    """per_class images for each occlusion class, persons cycling."""
    images: List[LabeledImage] = []
    for occlusion in OcclusionClass:
        for variant in range(per_class):
            images.append(labeled(variant % person_count, occlusion, variant, size))
    return images


@dataclass
class ReidFixture:
    """Gallery material plus probes for the re-identification tests."""

    enroll: Dict[str, List[LabeledImage]] = field(default_factory=dict)
    holdout: List[LabeledImage] = field(default_factory=list)
    impostors: List[LabeledImage] = field(default_factory=list)


def reid_fixture(
    size: int = 32,
    enrolled_indices: Sequence[int] = (0, 1, 2),
    impostor_indices: Sequence[int] = (9, 17),
    per_class_enroll: int = 3,
    per_class_holdout: int = 2,
) -> ReidFixture:
    """Enrollment/holdout sets for known persons and impostor probes.

    Variant indices are disjoint from the classification fixture's, so
    holdout probes are images the classifier never trained on.
    """
    fixture = ReidFixture()
    for index in enrolled_indices:
        name = person_name(index)
        fixture.enroll[name] = [
            labeled(index, occlusion, 1000 + v, size)
            for occlusion in OcclusionClass
            for v in range(per_class_enroll)
        ]
        fixture.holdout.extend(
            labeled(index, occlusion, 2000 + v, size)
            for occlusion in OcclusionClass
            for v in range(per_class_holdout)
        )
    for index in impostor_indices:
        fixture.impostors.extend(
            labeled(index, occlusion, 3000 + v, size)
            for occlusion in OcclusionClass
            for v in range(per_class_holdout)
        )
    return fixture


def write_dataset_tree(root: str, images: Sequence[LabeledImage]) -> List[str]:
    """Write images as ``<root>/<person>/<classfolder>/imgNNN.ppm``."""
    paths: List[str] = []
    counters: Dict[Tuple[str, OcclusionClass], int] = {}
    for image in images:
        key = (image.person, image.occlusion)
        counters[key] = counters.get(key, 0) + 1
        folder = os.path.join(root, image.person, CLASS_FOLDERS[image.occlusion])
        os.makedirs(folder, exist_ok=True)
        path = os.path.join(folder, f"img{counters[key]:03d}.ppm")
        write_ppm(path, image.pixels)
        paths.append(path)
    return paths
