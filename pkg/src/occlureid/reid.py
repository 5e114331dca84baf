"""Two-stage person re-identification with a gated audit log.

Stage 1 classifies the occlusion and looks up the nearest enrolled person
within that class; stage 2 searches the whole gallery for the best match.
A probe is accepted only when both stages name the same person and the
matching score, cosine similarity mapped to [0, 100], is strictly above
the threshold (default 90). Every accepted probe appends one CSV line to
an append-only log with an injectable clock, so tests are deterministic.

The gallery keeps one running-mean embedding per person per occlusion
class and persists to disk as a name index plus tensor blobs.
"""

from __future__ import annotations

import datetime as _dt
import json
import os
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data import LOG_TYPES, LabeledImage, OcclusionClass, decode_resize
from .network import Model
from .tensor import read_tensor_from, write_tensor_to

GALLERY_MAGIC = b"FGAL1\n"

LOG_HEADER = "Date,Time,Person,occlusion,type"

DEFAULT_THRESHOLD = 90.0

MONTHS = ("Jan", "Feb", "Mar", "Apr", "May", "Jun", "Jul", "Aug", "Sep", "Oct", "Nov", "Dec")

Clock = Callable[[], _dt.datetime]


class GalleryError(ValueError):
    """Raised for malformed gallery files or invalid gallery operations."""


def format_date(moment: _dt.datetime) -> str:
    """DD-Mon-YY, e.g. 25-Jun-21."""
    return f"{moment.day:02d}-{MONTHS[moment.month - 1]}-{moment.year % 100:02d}"


def format_time(moment: _dt.datetime) -> str:
    """h:MM AM/PM with no leading zero on the hour, e.g. 10:30 AM."""
    hour = moment.hour % 12 or 12
    half = "AM" if moment.hour < 12 else "PM"
    return f"{hour}:{moment.minute:02d} {half}"


@dataclass
class GalleryEntry:
    """One enrolled person: raw running means per occlusion class."""

    person: str
    means: Dict[OcclusionClass, np.ndarray] = field(default_factory=dict)
    counts: Dict[OcclusionClass, int] = field(default_factory=dict)
    enrolled_at: str = ""

    def embedding(self, occlusion: OcclusionClass) -> np.ndarray:
        """The stored prototype: the running mean re-normalized to unit length."""
        mean = self.means[occlusion]
        norm = float(np.linalg.norm(mean))
        if norm < 1e-30:
            raise GalleryError(f"gallery prototype for {self.person}/{occlusion.name} has zero norm")
        return mean / norm


@dataclass
class MatchResult:
    """Joined output of both stages for one probe."""

    occlusion: OcclusionClass
    classifier_person: Optional[str]
    identifier_person: str
    score: float
    passed: bool


@dataclass(frozen=True)
class LogRecord:
    date: str
    time: str
    person: str
    occlusion: str
    occlusion_type: str

    def __post_init__(self) -> None:
        if self.occlusion not in ("Yes", "No"):
            raise ValueError(f"occlusion flag must be Yes or No, got {self.occlusion!r}")
        if (self.occlusion == "No") != (self.occlusion_type == "NA"):
            raise ValueError(
                f"occlusion flag {self.occlusion!r} is inconsistent with type {self.occlusion_type!r}"
            )
        for name, value in (("person", self.person), ("date", self.date), ("time", self.time)):
            if "," in value or "\n" in value:
                raise ValueError(f"log {name} {value!r} may not contain commas or newlines")

    def line(self) -> str:
        return f"{self.date},{self.time},{self.person},{self.occlusion},{self.occlusion_type}"


def parse_log_line(line: str) -> LogRecord:
    parts = line.rstrip("\n").split(",")
    if len(parts) != 5:
        raise ValueError(f"log line has {len(parts)} fields, expected 5: {line!r}")
    return LogRecord(*parts)


class Gallery:
    """The registered database: per-person, per-class embedding prototypes."""

    def __init__(self) -> None:
        self.entries: Dict[str, GalleryEntry] = {}

    def __len__(self) -> int:
        return len(self.entries)

    def persons(self) -> List[str]:
        return sorted(self.entries)

    def enroll(
        self,
        person: str,
        images: Sequence[LabeledImage],
        model: Model,
        clock: Optional[Clock] = None,
    ) -> "Gallery":
        """Fold images into the person's per-class running means."""
        if not images:
            raise GalleryError(f"cannot enroll {person!r} with zero images")
        for image in images:
            if image.person != person:
                raise GalleryError(
                    f"image {image.source!r} is labeled {image.person!r}, not {person!r}"
                )
        entry = self.entries.get(person)
        if entry is None:
            moment = (clock or _dt.datetime.now)()
            entry = GalleryEntry(person=person, enrolled_at=f"{format_date(moment)} {format_time(moment)}")
            self.entries[person] = entry
        for image in images:
            emb = model.embed(image.pixels)
            n = entry.counts.get(image.occlusion, 0) + 1
            if n == 1:
                entry.means[image.occlusion] = emb.copy()
            else:
                mean = entry.means[image.occlusion]
                mean += (emb - mean) / n
            entry.counts[image.occlusion] = n
        return self

    # -- matching -----------------------------------------------------------

    def best_match(self, probe: np.ndarray) -> Tuple[str, float]:
        """Best (person, score) over every stored prototype.

        Score maps cosine similarity to [0, 100]. Iteration is sorted and
        comparison strict, so ties resolve to the lexicographically first
        person.
        """
        if not self.entries:
            raise GalleryError("gallery is empty")
        best_person, best_score = "", -1.0
        for person in self.persons():
            entry = self.entries[person]
            for occlusion in sorted(entry.means):
                cosine = float(np.dot(probe, entry.embedding(occlusion)))
                score = 50.0 * (1.0 + cosine)
                if score > best_score:
                    best_person, best_score = person, score
        return best_person, best_score

    def nearest_person_for_class(self, probe: np.ndarray, occlusion: OcclusionClass) -> Optional[str]:
        """Best person among prototypes of one class; None if unpopulated."""
        best_person: Optional[str] = None
        best_score = -np.inf
        for person in self.persons():
            entry = self.entries[person]
            if occlusion not in entry.means:
                continue
            score = float(np.dot(probe, entry.embedding(occlusion)))
            if score > best_score:
                best_person, best_score = person, score
        return best_person

    # -- persistence --------------------------------------------------------

    def save(self, path: str) -> None:
        order: List[Tuple[str, OcclusionClass]] = []
        persons = []
        for person in self.persons():
            entry = self.entries[person]
            classes = sorted(entry.means)
            persons.append({
                "person": person,
                "enrolled_at": entry.enrolled_at,
                "classes": [int(c) for c in classes],
                "counts": [entry.counts[c] for c in classes],
            })
            order.extend((person, c) for c in classes)
        blob = json.dumps({"persons": persons}).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(GALLERY_MAGIC)
            fh.write(f"{len(blob)}\n".encode("ascii"))
            fh.write(blob)
            for person, occlusion in order:
                write_tensor_to(fh, self.entries[person].means[occlusion])

    @classmethod
    def load(cls, path: str) -> "Gallery":
        gallery = cls()
        with open(path, "rb") as fh:
            magic = fh.read(len(GALLERY_MAGIC))
            if len(magic) < len(GALLERY_MAGIC):
                raise GalleryError("truncated gallery file: missing magic bytes")
            if magic != GALLERY_MAGIC:
                raise GalleryError(f"bad magic {magic!r}; not a gallery file")
            length_line = bytearray()
            while True:
                ch = fh.read(1)
                if not ch:
                    raise GalleryError("truncated gallery file: unterminated header length")
                if ch == b"\n":
                    break
                length_line += ch
                if len(length_line) > 32:
                    raise GalleryError("malformed gallery header length")
            if not length_line.decode("ascii", "replace").isdigit():
                raise GalleryError(f"malformed gallery header length {bytes(length_line)!r}")
            blob = fh.read(int(length_line))
            if len(blob) < int(length_line):
                raise GalleryError("truncated gallery file: incomplete header")
            try:
                header = json.loads(blob.decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                raise GalleryError("malformed gallery header") from exc
            for row in header["persons"]:
                entry = GalleryEntry(person=row["person"], enrolled_at=row["enrolled_at"])
                for code, count in zip(row["classes"], row["counts"]):
                    occlusion = OcclusionClass(code)
                    entry.means[occlusion] = read_tensor_from(fh)
                    entry.counts[occlusion] = int(count)
                if not entry.means:
                    raise GalleryError(f"gallery entry {entry.person!r} has no populated class")
                gallery.entries[entry.person] = entry
            if fh.read(1):
                raise GalleryError("trailing bytes after gallery payload")
        return gallery


# ---------------------------------------------------------------------------
# Module-level pipeline operations.
# ---------------------------------------------------------------------------


def enroll(
    gallery: Gallery,
    person: str,
    images: Sequence[LabeledImage],
    model: Model,
    clock: Optional[Clock] = None,
) -> Gallery:
    return gallery.enroll(person, images, model, clock)


def identify(gallery: Gallery, pixels: np.ndarray, model: Model) -> Tuple[str, float]:
    """Best gallery match of one probe image: (person, score in [0, 100])."""
    return gallery.best_match(model.embed(pixels))


def fuse_and_gate(
    occlusion: OcclusionClass,
    classifier_person: Optional[str],
    identifier_person: str,
    score: float,
    threshold: float = DEFAULT_THRESHOLD,
) -> MatchResult:
    """Join both stages: pass iff score strictly above threshold AND the
    stage labels name the same person."""
    passed = score > threshold and classifier_person is not None and classifier_person == identifier_person
    return MatchResult(
        occlusion=occlusion,
        classifier_person=classifier_person,
        identifier_person=identifier_person,
        score=score,
        passed=passed,
    )


def run_probe(model: Model, gallery: Gallery, pixels: np.ndarray, threshold: float = DEFAULT_THRESHOLD) -> MatchResult:
    """Both stages on one probe image, fused and gated."""
    readout = model.forward(pixels)
    occlusion = OcclusionClass(int(np.argmax(readout[0])))
    probe = model.embed(pixels)
    classifier_person = gallery.nearest_person_for_class(probe, occlusion)
    identifier_person, score = gallery.best_match(probe)
    return fuse_and_gate(occlusion, classifier_person, identifier_person, score, threshold)


def record_for(result: MatchResult, moment: _dt.datetime) -> LogRecord:
    occluded = result.occlusion != OcclusionClass.FACE
    return LogRecord(
        date=format_date(moment),
        time=format_time(moment),
        person=result.identifier_person,
        occlusion="Yes" if occluded else "No",
        occlusion_type=LOG_TYPES[result.occlusion],
    )


def append_log(path: str, result: MatchResult, clock: Optional[Clock] = None) -> LogRecord:
    """Append exactly one line for a passed result; header written once.

    The line is built in full before any write, so the file never holds a
    partial record.
    """
    if not result.passed:
        raise ValueError("append_log requires a result that passed the gate")
    record = record_for(result, (clock or _dt.datetime.now)())
    fresh = not os.path.exists(path) or os.path.getsize(path) == 0
    text = (LOG_HEADER + "\n" if fresh else "") + record.line() + "\n"
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(text)
    return record


@dataclass
class BatchSummary:
    processed: int = 0
    passed: int = 0
    failed_gate: int = 0
    errored: int = 0
    failures: List[Tuple[str, str]] = field(default_factory=list)


def run_batch(
    model: Model,
    gallery: Gallery,
    input_dir: str,
    log_path: str,
    threshold: float = DEFAULT_THRESHOLD,
    clock: Optional[Clock] = None,
) -> BatchSummary:
    """Run both stages over every PPM in a directory, logging gate passes.

    Per-image failures are recorded in the summary and never abort the
    batch; processed always equals passed + failed_gate + errored.
    """
    summary = BatchSummary()
    names = sorted(n for n in os.listdir(input_dir) if n.lower().endswith(".ppm"))
    for name in names:
        path = os.path.join(input_dir, name)
        summary.processed += 1
        try:
            with open(path, "rb") as fh:
                pixels = decode_resize(fh.read(), model.config.input_size)
            result = run_probe(model, gallery, pixels, threshold)
            if result.passed:
                append_log(log_path, result, clock)
                summary.passed += 1
            else:
                summary.failed_gate += 1
        except (OSError, ValueError) as exc:
            summary.errored += 1
            summary.failures.append((path, str(exc)))
    return summary
