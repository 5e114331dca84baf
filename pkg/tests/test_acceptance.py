"""Release gate: the nine checks this package must pass, one test per check.

Each test covers exactly one criterion and ends with a single summary line
(visible with -s, or in the captured output on failure); the pytest -v row
for each test is the pass/fail verdict. Tolerances and time limits are part
of the checks themselves, so a slow or drifting build fails here first.
"""

import datetime
import os
import time

import numpy as np

import oracles
from occlureid.data import AugmentSpec, OcclusionClass, augment, horizontal_flip
from occlureid.gru import gradient_check, random_cell
from occlureid.kernels import ConvCostInput, conv_cost, depletion_ratio, depthwise_conv, pointwise_conv
from occlureid.metrics import metrics, tally
from occlureid.network import NetworkConfig, build_network, load_checkpoint, save_checkpoint
from occlureid.reid import Gallery, append_log, fuse_and_gate, run_probe
from occlureid.synthetic import labeled
from occlureid.training import TrainConfig, evaluate, toy_overfit_config, train

CLASSES = list(OcclusionClass)


def test_criterion_1_recurrent_gradcheck():
    rng = np.random.default_rng(11)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(50):
        params, h0, xs, target = random_cell(rng)
        errs = gradient_check(params, h0, xs, target)
        worst = max(worst, max(errs.values()))
    elapsed = time.perf_counter() - start
    assert worst <= 1e-5
    assert elapsed < 10.0
    print(f"criterion 1: PASS  bptt vs central differences on 50 random cells, "
          f"worst rel err {worst:.2e}, {elapsed:.1f}s")


def test_criterion_2_convolutions_match_loop_references():
    rng = np.random.default_rng(5)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(60):
        h, w = (int(v) for v in rng.integers(3, 9, size=2))
        c_in = int(rng.integers(1, 5))
        k = int(rng.choice([1, 3, 5]))
        stride = int(rng.choice([1, 2]))
        x = rng.standard_normal((h, w, c_in))
        kernels = rng.standard_normal((k, k, c_in))
        got = depthwise_conv(x, kernels, stride=stride, padding="same")
        ref = oracles.loop_depthwise(x, kernels, stride, "same")
        assert got.shape == ref.shape
        worst = max(worst, float(np.max(np.abs(got - ref))))
    for _ in range(60):
        h, w = (int(v) for v in rng.integers(3, 9, size=2))
        c_in = int(rng.integers(1, 6))
        c_out = int(rng.integers(1, 7))
        x = rng.standard_normal((h, w, c_in))
        weights = rng.standard_normal((c_in, c_out))
        got = pointwise_conv(x, weights)
        ref = oracles.loop_pointwise(x, weights)
        assert got.shape == ref.shape
        worst = max(worst, float(np.max(np.abs(got - ref))))
    elapsed = time.perf_counter() - start
    assert worst <= 1e-10
    assert elapsed < 10.0
    print(f"criterion 2: PASS  120 random conv fixtures vs nested-loop references, "
          f"worst abs diff {worst:.2e}, {elapsed:.1f}s")


def test_criterion_3_cost_model():
    stock = conv_cost(ConvCostInput(224, 224, 3, 32, 3))
    assert stock == 6_171_648
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(1000):
        c = ConvCostInput(
            height=int(rng.integers(1, 65)),
            width=int(rng.integers(1, 65)),
            channels_in=int(rng.integers(1, 65)),
            channels_out=int(rng.integers(1, 65)),
            kernel_size=int(rng.integers(1, 8)),
        )
        closed = 1.0 / c.channels_out + 1.0 / c.kernel_size**2
        worst = max(worst, abs(depletion_ratio(c) - closed))
    assert worst <= 1e-12
    print(f"criterion 3: PASS  stock cost {stock}, depletion ratio vs closed form "
          f"on 1000 draws, worst abs diff {worst:.2e}")


def test_criterion_4_toy_overfit(trained_toy, toy_dataset):
    model, history, seconds = trained_toy
    assert len(toy_dataset) == 100
    for cls in CLASSES:
        assert sum(1 for img in toy_dataset if img.occlusion == cls) == 20
    assert all(img.pixels.shape == (32, 32, 3) for img in toy_dataset)
    recipe = toy_overfit_config()
    assert recipe.seed == 0
    assert len(history) <= 200
    _, accuracy, _ = evaluate(model, toy_dataset)
    assert accuracy >= 0.99
    assert seconds < 300.0
    print(f"criterion 4: PASS  toy profile reaches {accuracy:.4f} on the 100-image "
          f"fixture in {len(history)} epochs, {seconds:.0f}s")


def test_criterion_5_metrics_match_brute_force():
    rng = np.random.default_rng(13)
    fixtures = 0
    for _ in range(120):
        n = int(rng.integers(1, 40))
        preds = [CLASSES[i] for i in rng.integers(0, 5, size=n)]
        truths = [CLASSES[i] for i in rng.integers(0, 5, size=n)]
        counts = tally(preds, truths)
        for cls in CLASSES:
            tp, tn, fp, fn = oracles.recount_class(preds, truths, cls)
            got = counts[cls]
            assert (got.tp, got.tn, got.fp, got.fn) == (tp, tn, fp, fn)
            want = oracles.direct_metrics(tp, tn, fp, fn)
            report = metrics(got)
            for name, expected in want.items():
                actual = getattr(report, name)
                if expected is None:
                    assert actual is None
                else:
                    assert abs(actual - expected) <= 1e-12
        fixtures += 1
    assert fixtures >= 100
    truths = [CLASSES[i % 5] for i in range(40)]
    perfect = metrics(tally(truths, truths)[OcclusionClass.SCARF])
    assert perfect.sensitivity == 1.0
    assert perfect.specificity == 1.0
    assert perfect.accuracy == 1.0
    assert perfect.mcc_standard == 1.0
    print(f"criterion 5: PASS  {fixtures} random fixtures match per-sample recounts; "
          f"perfect predictions score exactly 1.0")


def test_criterion_6_gate_and_audit_log(tmp_path):
    for score, expected in ((92.0, True), (90.0, False), (89.0, False)):
        result = fuse_and_gate(OcclusionClass.MEDICAL_MASK, "Mohamed", "Mohamed", score)
        assert result.passed is expected
    disagree = fuse_and_gate(OcclusionClass.MEDICAL_MASK, "Ana", "Mohamed", 99.9)
    assert not disagree.passed

    def clock():
        return datetime.datetime(2021, 6, 25, 10, 30)

    path = str(tmp_path / "audit.csv")
    passing = fuse_and_gate(OcclusionClass.MEDICAL_MASK, "Mohamed", "Mohamed", 92.0)
    append_log(path, passing, clock=clock)
    with open(path, "rb") as fh:
        first = fh.read()
    assert first == b"Date,Time,Person,occlusion,type\n25-Jun-21,10:30 AM,Mohamed,Yes,Medical\n"
    append_log(path, passing, clock=clock)
    with open(path, "rb") as fh:
        second = fh.read()
    assert second == first + b"25-Jun-21,10:30 AM,Mohamed,Yes,Medical\n"
    print("criterion 6: PASS  gate verdicts 92/90/89 and disagreement correct; "
          "each pass appends one byte-exact log line")


def test_criterion_7_determinism(trained_toy, toy_dataset, tmp_path):
    model, _, _ = trained_toy

    first = str(tmp_path / "a.ckpt")
    second = str(tmp_path / "b.ckpt")
    save_checkpoint(model, first)
    loaded = load_checkpoint(first)
    save_checkpoint(loaded, second)
    reloaded = load_checkpoint(second)
    batch = np.stack([img.pixels for img in toy_dataset[:8]])
    out_a = loaded.forward(batch)
    out_b = reloaded.forward(batch)
    assert out_a.tobytes() == out_b.tobytes()
    for (name_a, tens_a), (name_b, tens_b) in zip(loaded.named_tensors(), reloaded.named_tensors()):
        assert name_a == name_b
        assert tens_a.tobytes() == tens_b.tobytes()
    assert np.max(np.abs(out_a - model.forward(batch))) < 1e-5

    cfg = TrainConfig(base_learning_rate=0.01, epochs=3, batch_size=20, seed=0)
    run_a = train(build_network(NetworkConfig.toy(), seed=0), toy_dataset, cfg)
    run_b = train(build_network(NetworkConfig.toy(), seed=0), toy_dataset, cfg)
    assert run_a == run_b

    img = labeled(1, OcclusionClass.SCARF, 3)
    spec = AugmentSpec(seed=9)
    once = augment(img, spec, 4)
    again = augment(img, spec, 4)
    assert once.pixels.tobytes() == again.pixels.tobytes()

    pixels = np.random.default_rng(2).uniform(size=(17, 23, 3))
    assert horizontal_flip(horizontal_flip(pixels)).tobytes() == pixels.tobytes()
    print("criterion 7: PASS  checkpoint round trip bitwise, same-seed histories "
          "identical, augmentation draw stable, double flip is identity")


def test_criterion_8_reid_separation(trained_toy, reid_pools):
    model, _, _ = trained_toy
    gallery = Gallery()
    for person, images in reid_pools.enroll.items():
        gallery.enroll(person, images, model)
    genuine = [run_probe(model, gallery, img.pixels) for img in reid_pools.holdout]
    impostor = [run_probe(model, gallery, img.pixels) for img in reid_pools.impostors]
    genuine_mean = float(np.mean([r.score for r in genuine]))
    impostor_mean = float(np.mean([r.score for r in impostor]))
    assert genuine_mean > impostor_mean
    impostor_passes = sum(1 for r in impostor if r.passed)
    assert impostor_passes == 0
    print(f"criterion 8: PASS  genuine mean {genuine_mean:.2f} > impostor mean "
          f"{impostor_mean:.2f}; impostor gate passes {impostor_passes}/{len(impostor)} at 90")


def test_criterion_9_shapes_and_distributions(trained_toy, toy_dataset):
    full = build_network(NetworkConfig.full(), seed=0)
    image = np.random.default_rng(4).uniform(size=(224, 224, 3))
    xs = full.sequence_inputs(image, train=False)
    assert xs.shape == (49, 1, full.config.bridge_size)
    assert full._feature_hw == (7, 7)
    rows = full.forward(image)
    assert rows.shape == (1, 5)
    assert abs(float(rows.sum()) - 1.0) <= 1e-6

    model, _, _ = trained_toy
    batch = np.stack([img.pixels for img in toy_dataset[:16]])
    out = model.forward(batch)
    worst = float(np.max(np.abs(out.sum(axis=1) - 1.0)))
    assert worst <= 1e-6
    assert np.all(out > 0.0)
    print(f"criterion 9: PASS  224x224x3 maps to a 7x7 grid (49 steps); forward rows "
          f"sum to 1 within {max(worst, abs(float(rows.sum()) - 1.0)):.1e}")
