import datetime as dt
import os

import numpy as np
import pytest

from occlureid.data import LabeledImage, OcclusionClass, write_ppm
from occlureid.network import NetworkConfig, build_network
from occlureid.reid import (
    DEFAULT_THRESHOLD,
    LOG_HEADER,
    Gallery,
    GalleryError,
    LogRecord,
    MatchResult,
    append_log,
    format_date,
    format_time,
    fuse_and_gate,
    identify,
    parse_log_line,
    record_for,
    run_batch,
    run_probe,
)
from occlureid.synthetic import synth_image

from oracles import brute_force_match

rng = np.random.default_rng(73)


@pytest.fixture(scope="module")
def cold_model():
    """Untrained toy model; enough for plumbing tests."""
    return build_network(NetworkConfig.toy(), seed=0)


def _images(person, person_index, classes, variants=(0,)):
    return [
        LabeledImage(
            pixels=synth_image(person_index, cls, v),
            occlusion=cls,
            person=person,
            source=f"synthetic://{person}/{cls.name}/{v}",
        )
        for cls in classes
        for v in variants
    ]


def _unit(n=16):
    v = rng.standard_normal(n)
    return v / np.linalg.norm(v)


def _hand_gallery(vectors):
    """Gallery assembled directly from {person: {cls: vector}}."""
    from occlureid.reid import GalleryEntry

    g = Gallery()
    for person, by_class in vectors.items():
        entry = GalleryEntry(person=person)
        for cls, vec in by_class.items():
            entry.means[cls] = np.asarray(vec, dtype=np.float64)
            entry.counts[cls] = 1
        g.entries[person] = entry
    return g


# ---------------------------------------------------------------------------
# Formatting.
# ---------------------------------------------------------------------------

def test_date_and_time_formats():
    moment = dt.datetime(2021, 6, 25, 10, 30)
    assert format_date(moment) == "25-Jun-21"
    assert format_time(moment) == "10:30 AM"
    assert format_time(dt.datetime(2021, 6, 25, 0, 5)) == "12:05 AM"
    assert format_time(dt.datetime(2021, 6, 25, 12, 0)) == "12:00 PM"
    assert format_time(dt.datetime(2021, 6, 25, 23, 59)) == "11:59 PM"
    assert format_date(dt.datetime(2004, 1, 2)) == "02-Jan-04"


# ---------------------------------------------------------------------------
# Gallery.
# ---------------------------------------------------------------------------

def test_enroll_builds_per_class_prototypes(cold_model):
    g = Gallery()
    imgs = _images("Asha", 0, [OcclusionClass.FACE, OcclusionClass.SCARF], variants=(0, 1))
    g.enroll("Asha", imgs, cold_model)
    entry = g.entries["Asha"]
    assert set(entry.means) == {OcclusionClass.FACE, OcclusionClass.SCARF}
    assert entry.counts[OcclusionClass.FACE] == 2
    # Prototype equals the renormalized mean of the two embeddings.
    e0 = cold_model.embed(imgs[0].pixels)
    e1 = cold_model.embed(imgs[1].pixels)
    mean = (e0 + e1) / 2
    want = mean / np.linalg.norm(mean)
    assert np.allclose(entry.embedding(OcclusionClass.FACE), want, atol=1e-12)
    assert abs(np.linalg.norm(entry.embedding(OcclusionClass.SCARF)) - 1.0) <= 1e-12


def test_enroll_merge_order_is_equivalent(cold_model):
    imgs = _images("Asha", 0, list(OcclusionClass), variants=(0, 1, 2))
    one_call = Gallery().enroll("Asha", imgs, cold_model)
    one_by_one = Gallery()
    for img in imgs:
        one_by_one.enroll("Asha", [img], cold_model)
    for cls in OcclusionClass:
        a = one_call.entries["Asha"].embedding(cls)
        b = one_by_one.entries["Asha"].embedding(cls)
        assert np.max(np.abs(a - b)) <= 1e-12


def test_enroll_validates_inputs(cold_model):
    g = Gallery()
    with pytest.raises(GalleryError, match="zero images"):
        g.enroll("Asha", [], cold_model)
    imgs = _images("Asha", 0, [OcclusionClass.FACE])
    with pytest.raises(GalleryError, match="labeled"):
        g.enroll("Boris", imgs, cold_model)


def test_best_match_agrees_with_brute_force():
    for _ in range(25):
        vectors = {
            name: {cls: _unit() for cls in rng.choice(list(OcclusionClass), size=2, replace=False)}
            for name in ("Asha", "Boris", "Chen", "Divya")
        }
        g = _hand_gallery(vectors)
        probe = _unit()
        got_person, got_score = g.best_match(probe)
        # The oracle sees the same renormalized prototypes the gallery uses.
        protos = {
            p: {c: e / np.linalg.norm(e) for c, e in by_class.items()}
            for p, by_class in vectors.items()
        }
        want_person, want_score = brute_force_match(protos, probe)
        assert got_person == want_person
        assert abs(got_score - want_score) <= 1e-9


def test_best_match_breaks_ties_lexicographically():
    shared = _unit()
    g = _hand_gallery({
        "Zed": {OcclusionClass.FACE: shared.copy()},
        "Ana": {OcclusionClass.FACE: shared.copy()},
    })
    person, score = g.best_match(shared)
    assert person == "Ana"
    assert abs(score - 100.0) <= 1e-9
    with pytest.raises(GalleryError, match="empty"):
        Gallery().best_match(shared)


def test_score_range_and_value():
    v = _unit()
    g = _hand_gallery({"Asha": {OcclusionClass.FACE: v}})
    _, top = g.best_match(v)
    assert abs(top - 100.0) <= 1e-9
    _, bottom = g.best_match(-v)
    assert abs(bottom - 0.0) <= 1e-9
    _, mid = g.best_match(_unit())
    assert 0.0 <= mid <= 100.0


def test_nearest_person_for_class():
    a, b = _unit(), _unit()
    g = _hand_gallery({
        "Asha": {OcclusionClass.FACE: a},
        "Boris": {OcclusionClass.SCARF: b},
    })
    assert g.nearest_person_for_class(a, OcclusionClass.FACE) == "Asha"
    assert g.nearest_person_for_class(a, OcclusionClass.SCARF) == "Boris"
    assert g.nearest_person_for_class(a, OcclusionClass.HAND) is None


def test_gallery_save_load_round_trip(tmp_path, cold_model):
    g = Gallery()
    g.enroll("Asha", _images("Asha", 0, [OcclusionClass.FACE, OcclusionClass.HAND]), cold_model)
    g.enroll("Boris", _images("Boris", 1, [OcclusionClass.SCARF]), cold_model)
    path = str(tmp_path / "gallery.bin")
    g.save(path)
    back = Gallery.load(path)
    assert back.persons() == ["Asha", "Boris"]
    for person in g.persons():
        for cls, mean in g.entries[person].means.items():
            stored = back.entries[person].means[cls]
            # Tensor blobs are float32 on disk.
            assert np.array_equal(stored, mean.astype(np.float32).astype(np.float64))
            assert back.entries[person].counts[cls] == g.entries[person].counts[cls]


def test_gallery_load_errors(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"NOPE")
    with pytest.raises(GalleryError):
        Gallery.load(str(path))
    path.write_bytes(b"FGAL1\n12\n{\"persons\"")
    with pytest.raises(GalleryError, match="truncated|malformed"):
        Gallery.load(str(path))


# ---------------------------------------------------------------------------
# Gate.
# ---------------------------------------------------------------------------

def test_gate_threshold_is_strict():
    cases = {92.0: True, 90.0: False, 89.0: False}
    for score, want in cases.items():
        res = fuse_and_gate(OcclusionClass.MEDICAL_MASK, "Mohamed", "Mohamed", score)
        assert res.passed is want, score
    # Disagreeing stages never pass, no matter the score.
    res = fuse_and_gate(OcclusionClass.MEDICAL_MASK, "Asha", "Mohamed", 99.9)
    assert res.passed is False
    # A missing stage-1 person fails closed.
    res = fuse_and_gate(OcclusionClass.MEDICAL_MASK, None, "Mohamed", 99.9)
    assert res.passed is False
    # Custom threshold.
    assert fuse_and_gate(OcclusionClass.FACE, "A", "A", 50.1, threshold=50.0).passed
    assert DEFAULT_THRESHOLD == 90.0


# ---------------------------------------------------------------------------
# Audit log.
# ---------------------------------------------------------------------------

def _passed_result(occlusion=OcclusionClass.MEDICAL_MASK, person="Mohamed", score=92.0):
    return MatchResult(
        occlusion=occlusion,
        classifier_person=person,
        identifier_person=person,
        score=score,
        passed=True,
    )


def test_append_log_byte_exact(tmp_path):
    path = str(tmp_path / "log.csv")
    clock = lambda: dt.datetime(2021, 6, 25, 10, 30)
    append_log(path, _passed_result(), clock)
    raw = open(path, "rb").read()
    assert raw == b"Date,Time,Person,occlusion,type\n25-Jun-21,10:30 AM,Mohamed,Yes,Medical\n"


def test_append_log_header_written_once(tmp_path):
    path = str(tmp_path / "log.csv")
    clock = lambda: dt.datetime(2021, 6, 25, 10, 30)
    append_log(path, _passed_result(), clock)
    append_log(path, _passed_result(occlusion=OcclusionClass.FACE), clock)
    lines = open(path).read().splitlines()
    assert lines[0] == LOG_HEADER
    assert len(lines) == 3
    assert lines[2] == "25-Jun-21,10:30 AM,Mohamed,No,NA"


def test_append_log_rejects_failed_results(tmp_path):
    path = str(tmp_path / "log.csv")
    res = fuse_and_gate(OcclusionClass.FACE, "A", "A", 10.0)
    with pytest.raises(ValueError):
        append_log(path, res)
    assert not os.path.exists(path)


def test_log_lines_round_trip():
    moment = dt.datetime(2021, 6, 25, 10, 30)
    for cls in OcclusionClass:
        record = record_for(_passed_result(occlusion=cls), moment)
        back = parse_log_line(record.line() + "\n")
        assert back == record
    with pytest.raises(ValueError):
        parse_log_line("a,b,c\n")


def test_log_record_consistency_rules():
    with pytest.raises(ValueError):
        LogRecord("25-Jun-21", "10:30 AM", "A", "Maybe", "Medical")
    with pytest.raises(ValueError):
        LogRecord("25-Jun-21", "10:30 AM", "A", "No", "Medical")
    with pytest.raises(ValueError):
        LogRecord("25-Jun-21", "10:30 AM", "A", "Yes", "NA")
    with pytest.raises(ValueError):
        LogRecord("25-Jun-21", "10:30 AM", "A,B", "Yes", "Medical")


def test_record_for_class_table():
    moment = dt.datetime(2021, 6, 25, 10, 30)
    want = {
        OcclusionClass.FACE: ("No", "NA"),
        OcclusionClass.MEDICAL_MASK: ("Yes", "Medical"),
        OcclusionClass.SCARF: ("Yes", "scarf"),
        OcclusionClass.HAND: ("Yes", "hand"),
        OcclusionClass.OBJECT: ("Yes", "object"),
    }
    for cls, (flag, kind) in want.items():
        record = record_for(_passed_result(occlusion=cls), moment)
        assert (record.occlusion, record.occlusion_type) == (flag, kind)


# ---------------------------------------------------------------------------
# Pipeline plumbing on a real (untrained) model.
# ---------------------------------------------------------------------------

def test_identify_and_run_probe_shape(cold_model):
    g = Gallery()
    g.enroll("Asha", _images("Asha", 0, list(OcclusionClass)), cold_model)
    g.enroll("Boris", _images("Boris", 1, list(OcclusionClass)), cold_model)
    probe = synth_image(0, OcclusionClass.FACE, 5)
    person, score = identify(g, probe, cold_model)
    assert person in ("Asha", "Boris")
    assert 0.0 <= score <= 100.0
    res = run_probe(cold_model, g, probe)
    assert isinstance(res, MatchResult)
    assert res.identifier_person in ("Asha", "Boris")
    assert res.occlusion in OcclusionClass
    if res.passed:
        assert res.score > DEFAULT_THRESHOLD and res.classifier_person == res.identifier_person


def test_run_batch_accounting(tmp_path, cold_model):
    g = Gallery()
    g.enroll("Asha", _images("Asha", 0, list(OcclusionClass)), cold_model)
    probe_dir = tmp_path / "probes"
    probe_dir.mkdir()
    for i in range(4):
        write_ppm(str(probe_dir / f"p{i}.ppm"), synth_image(0, OcclusionClass.FACE, 10 + i))
    (probe_dir / "broken.ppm").write_bytes(b"P6 oops")
    (probe_dir / "notes.txt").write_text("ignored")
    log_path = str(tmp_path / "log.csv")
    summary = run_batch(cold_model, g, str(probe_dir), log_path, threshold=-1.0,
                        clock=lambda: dt.datetime(2021, 6, 25, 10, 30))
    assert summary.processed == 5
    assert summary.errored == 1
    assert summary.processed == summary.passed + summary.failed_gate + summary.errored
    assert summary.failures and "broken.ppm" in summary.failures[0][0]
    # Threshold -1 means every readable probe passes: bijection with log lines.
    lines = open(log_path).read().splitlines()
    assert len(lines) == 1 + summary.passed
    assert summary.passed == 4


def test_run_batch_zero_passes_writes_no_log(tmp_path, cold_model):
    g = Gallery()
    g.enroll("Asha", _images("Asha", 0, [OcclusionClass.FACE]), cold_model)
    probe_dir = tmp_path / "probes"
    probe_dir.mkdir()
    write_ppm(str(probe_dir / "p.ppm"), synth_image(1, OcclusionClass.FACE, 0))
    log_path = str(tmp_path / "log.csv")
    summary = run_batch(cold_model, g, str(probe_dir), log_path, threshold=1000.0)
    assert summary.passed == 0
    assert not os.path.exists(log_path)
