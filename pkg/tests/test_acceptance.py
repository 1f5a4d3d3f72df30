"""Acceptance gate: one test (or small group) per criterion, each tagged with ``criterion``.

The terminal summary prints a PASS/FAIL line for every criterion.
"""

import itertools
import time

import numpy as np
import pytest

from qapseg import cli
from qapseg.data import color_counts, load_pgm, overlay_panels, save_pgm, split_samples, synth_phantoms
from qapseg.dilation import (DilationSchedule, evaluation_ratio, rank_schedules, rf_oracle, rf_stack_paper,
                             uncollected_paper, uncovered_oracle)
from qapseg.metrics import ConfusionMatrix, accuracy, dice, miou, precision, sensitivity, specificity
from qapseg.model import TABLE2_COMBINATIONS, ModelConfig, build, pooling_pyramid
from qapseg.tensor import (Tensor, add, avg_pool2d, clip, concat_channels, conv2d, conv2d_transpose, grad_check,
                           load_qat, log, max_pool2d, mul, neg, power, relu, resize_bilinear, save_qat,
                           softmax_channels, tmean, tsum)
from qapseg.training import TrainConfig, focal_loss, lr_schedule_update, train

from oracles import brute_force, recursion_rf, zero_inserted

TOL = 1e-3


def weighted(out, seed=0):
    """Scalar probe: sum of the output against fixed random weights."""
    w = np.random.default_rng(seed).normal(size=out.shape)
    return tsum(mul(out, w))


# ---------------------------------------------------------------------------
# 1. gradient correctness
# ---------------------------------------------------------------------------

def _primitive_cases():
    rng = np.random.default_rng(100)
    a = rng.normal(size=(2, 3, 5, 5))
    b = rng.normal(size=(2, 3, 5, 5))
    pos = rng.uniform(0.5, 2.0, size=(2, 3, 4, 4))
    away = np.sign(a) * (np.abs(a) + 0.2)  # keeps finite differences off the ReLU / clip kinks
    img = rng.normal(size=(2, 3, 9, 9))
    k3 = rng.normal(size=(4, 3, 3, 3))
    bias = rng.normal(size=4)
    tk = rng.normal(size=(3, 2, 2, 2))
    small = rng.normal(size=(1, 3, 4, 4))
    distinct = rng.permutation(2 * 3 * 8 * 8).reshape(2, 3, 8, 8) * 0.01
    labels = rng.integers(0, 3, (2, 5, 5))
    return {
        "add": (lambda t: weighted(add(t, Tensor(b, dtype=np.float64))), a),
        "add-broadcast": (lambda t: weighted(add(Tensor(a, dtype=np.float64), t)), rng.normal(size=(1, 3, 1, 1))),
        "mul": (lambda t: weighted(mul(t, Tensor(b, dtype=np.float64))), a),
        "neg": (lambda t: weighted(neg(t)), a),
        "power": (lambda t: weighted(power(t, 2.5)), pos),
        "log": (lambda t: weighted(log(t)), pos),
        "clip": (lambda t: weighted(clip(t, -1.0, 1.0)), away),
        "relu": (lambda t: weighted(relu(t)), away),
        "sum-axis": (lambda t: weighted(tsum(t, axis=1)), a),
        "mean": (lambda t: weighted(tmean(t, axis=(2, 3), keepdims=True)), a),
        "softmax": (lambda t: weighted(softmax_channels(t)), a),
        "concat": (lambda t: weighted(concat_channels([t, mul(t, 2.0)])), a),
        "conv-input": (lambda t: weighted(conv2d(t, Tensor(k3, dtype=np.float64), padding=1)), img),
        "conv-kernel": (lambda t: weighted(conv2d(Tensor(img, dtype=np.float64), t, stride=2, padding=2,
                                                  dilation=2)), k3),
        "conv-bias": (lambda t: weighted(conv2d(Tensor(img, dtype=np.float64), Tensor(k3, dtype=np.float64), t)),
                      bias),
        "conv-dilated-9": (lambda t: weighted(conv2d(t, Tensor(k3, dtype=np.float64), padding=9, dilation=9)),
                           rng.normal(size=(1, 3, 12, 12))),
        "tconv-input": (lambda t: weighted(conv2d_transpose(t, Tensor(tk, dtype=np.float64))), small),
        "tconv-kernel": (lambda t: weighted(conv2d_transpose(Tensor(small, dtype=np.float64), t)), tk),
        "tconv-bias": (lambda t: weighted(conv2d_transpose(Tensor(small, dtype=np.float64),
                                                           Tensor(tk, dtype=np.float64), t)), rng.normal(size=2)),
        "maxpool": (lambda t: weighted(max_pool2d(t, 2, 2)), distinct),
        "maxpool-overlap": (lambda t: weighted(max_pool2d(t, 3, 2)), distinct),
        "avgpool": (lambda t: weighted(avg_pool2d(t, 3, 2)), a),
        "resize": (lambda t: weighted(resize_bilinear(t, 7, 11)), a),
        "focal": (lambda t: focal_loss(softmax_channels(t), labels, 2.0, [1.0, 3.0, 0.5]), a),
    }


PRIMITIVES = _primitive_cases()


@pytest.mark.criterion(1, "gradient correctness: primitives and full forward pass below 1e-3")
@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    fn, x = PRIMITIVES[name]
    err = grad_check(fn, x, eps=1e-6 if name.startswith(("maxpool", "relu", "clip")) else 1e-4)
    assert err < TOL, f"{name}: {err:.2e}"


@pytest.mark.criterion(1, "gradient correctness: primitives and full forward pass below 1e-3")
def test_full_forward_gradient(record_property):
    start = time.perf_counter()
    cfg = ModelConfig(base_channels=1, input_size=(64, 64))
    model = build(cfg, seed=3)
    x = np.random.default_rng(6).random((1, 1, 64, 64))
    idx = np.random.default_rng(7).choice(x.size, 12, replace=False)
    worst = grad_check(lambda t: weighted(model(t), 5), x, eps=1e-6, indices=idx)
    # a few weights from every kind of layer
    for name in ("enc1.conv1.weight", "skip1.mod4.branch139.conv3.weight", "skip2.mod1.fuse.bias",
                 "pyrmax1.fuse.weight", "pyravg2.fuse.weight", "bottleneck.conv1.weight", "dec1.tconv.weight",
                 "head.weight"):
        original = model.params[name]

        def fn(t, name=name):
            model.params[name] = t
            try:
                return weighted(model(Tensor(x, dtype=np.float64)), 5)
            finally:
                model.params[name] = original

        sel = np.random.default_rng(len(name)).choice(original.data.size, min(3, original.data.size),
                                                      replace=False)
        worst = max(worst, grad_check(fn, original.data, eps=1e-6, indices=sel))
    elapsed = time.perf_counter() - start
    record_property("detail", f"full model max rel err {worst:.1e}, {elapsed:.0f}s")
    assert worst < TOL and elapsed < 120


# ---------------------------------------------------------------------------
# 2. atrous oracle equivalence
# ---------------------------------------------------------------------------

@pytest.mark.criterion(2, "dilated conv equals zero-inserted-kernel conv within 1e-5")
@pytest.mark.parametrize("d", [1, 2, 3, 4, 9])
def test_atrous_equivalence(d):
    rng = np.random.default_rng(d)
    x = rng.normal(size=(2, 3, 24, 24)).astype(np.float32)
    k = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
    dilated = conv2d(Tensor(x), Tensor(k), padding=d, dilation=d).data
    dense = conv2d(Tensor(x), Tensor(zero_inserted(k, d)), padding=d).data
    assert dilated.shape == dense.shape == (2, 4, 24, 24)
    assert np.max(np.abs(dilated - dense)) < 1e-5


# ---------------------------------------------------------------------------
# 3. dilation calculus
# ---------------------------------------------------------------------------

@pytest.mark.criterion(3, "dilation calculus: RF recursion, gap-free geometric schedules")
def test_rf_recursion_exhaustive():
    checked = 0
    for f in (1, 3, 5):
        for n in (1, 2, 3):
            for rates in itertools.product(range(1, 10), repeat=n):
                assert rf_oracle(DilationSchedule(f, rates)) == recursion_rf(f, rates)
                checked += 1
    assert checked == 3 * (9 + 81 + 729)


@pytest.mark.criterion(3, "dilation calculus: RF recursion, gap-free geometric schedules")
def test_gridding(record_property):
    s124, s139, s129 = (DilationSchedule(3, r) for r in ((1, 2, 4), (1, 3, 9), (1, 2, 9)))
    assert uncovered_oracle(s124) == 0 and uncovered_oracle(s139) == 0
    assert uncovered_oracle(s129) > 0
    record_property("detail", "; ".join(
        f"{list(s.rates)}: oracle rf={rf_oracle(s)} un={uncovered_oracle(s)}, as written rf={rf_stack_paper(s)} "
        f"un={uncollected_paper(s)} er={evaluation_ratio(s):.3f}" for s in (s124, s139, s129)))


# ---------------------------------------------------------------------------
# 4. schedule optimality
# ---------------------------------------------------------------------------

@pytest.mark.criterion(4, "[1,3,9] has maximal RF among zero-uncovered schedules (f=3, n=3, rates<=9)")
def test_schedule_optimality(record_property):
    start = time.perf_counter()
    reports = rank_schedules(3, 3, 9)
    assert len(reports) == 729
    gap_free = [r for r in reports if r.uncovered_oracle == 0]
    best = max(r.rf_oracle for r in gap_free)
    target = next(r for r in reports if r.rates == (1, 3, 9))
    assert target.uncovered_oracle == 0 and target.rf_oracle == best == 27
    assert reports[0].uncovered_oracle == 0 and reports[0].rf_oracle == best
    record_property("detail", f"top ranked {list(reports[0].rates)}, {len(gap_free)} gap-free schedules")
    assert time.perf_counter() - start < 60


# ---------------------------------------------------------------------------
# 5. architecture contracts
# ---------------------------------------------------------------------------

def bare_unet(params, x, depth):
    """Plain encoder-decoder assembled directly from the primitives."""
    def conv(h, name, pad=1):
        return conv2d(h, params[f"{name}.weight"], params[f"{name}.bias"], padding=pad)

    def block(h, prefix):
        return relu(conv(relu(conv(h, f"{prefix}.conv1")), f"{prefix}.conv2"))

    skips, h = [], x
    for level in range(1, depth + 1):
        h = block(h, f"enc{level}")
        skips.append(h)
        h = max_pool2d(h, 2, 2)
    h = block(h, "bottleneck")
    for level in range(depth, 0, -1):
        up = conv2d_transpose(h, params[f"dec{level}.tconv.weight"], params[f"dec{level}.tconv.bias"], stride=2)
        h = block(concat_channels([up, skips[level - 1]]), f"dec{level}")
    return softmax_channels(conv(h, "head", pad=0))


@pytest.mark.criterion(5, "architecture: 10 flag combinations, ablation identity, H/4 pyramids")
def test_all_combinations_run(record_property):
    start = time.perf_counter()
    x = np.random.default_rng(0).random((2, 1, 64, 64)).astype(np.float32)
    y = np.random.default_rng(1).integers(0, 4, (2, 64, 64))
    for combo in TABLE2_COMBINATIONS:
        model = build(ModelConfig(base_channels=2, input_size=(64, 64)).with_flags(*combo), seed=0)
        probs = model(Tensor(x))
        assert probs.shape == (2, 4, 64, 64) and np.all(np.isfinite(probs.data))
        focal_loss(probs, y).backward()
        for name, p in model.named_parameters():
            assert p.grad is not None and np.all(np.isfinite(p.grad)), name
    elapsed = time.perf_counter() - start
    record_property("detail", f"10 combinations forward+backward in {elapsed:.0f}s")
    assert elapsed < 300


@pytest.mark.criterion(5, "architecture: 10 flag combinations, ablation identity, H/4 pyramids")
def test_ablation_identity_bitwise():
    full = build(ModelConfig(base_channels=4, input_size=(64, 64)), seed=2)
    bare = build(full.config.with_flags(False, False, False, False), seed=2)
    assert set(bare.params) < set(full.params)
    same = [k for k in bare.params if bare.params[k].shape == full.params[k].shape]
    # pyramid joins widen only the first conv of the stages they feed
    assert sorted(set(bare.params) - set(same)) == ["bottleneck.conv1.weight", "dec3.conv1.weight",
                                                    "dec4.conv1.weight"]
    assert all(np.array_equal(bare.params[k].data, full.params[k].data) for k in same)
    x = Tensor(np.random.default_rng(4).random((2, 1, 64, 64)).astype(np.float32))
    assert bare(x).data.tobytes() == bare_unet(bare.params, x, bare.config.depth).data.tobytes()


@pytest.mark.criterion(5, "architecture: 10 flag combinations, ablation identity, H/4 pyramids")
@pytest.mark.parametrize("size", [40, 64, 256])
def test_pyramid_extent(size):
    for kind in ("max", "avg"):
        out = pooling_pyramid(Tensor(np.random.default_rng(size).random((1, 3, size, size))), kind)
        assert out.shape == (1, 12, size // 4, size // 4)


# ---------------------------------------------------------------------------
# 6. training recipe
# ---------------------------------------------------------------------------

@pytest.mark.criterion(6, "training: full model val Dice >= 0.90 in 30 epochs; LR and early-stop rules")
def test_full_model_reaches_dice(record_property):
    start = time.perf_counter()
    run = cli.DEFAULT_RUN
    samples = synth_phantoms(200, 64, seed=0)
    parts = split_samples(samples, seed=0)
    model = build(ModelConfig(input_size=(64, 64), **run["model"]), seed=0)
    tc = TrainConfig(seed=0, lr_min=1e-5, **run["train"])
    assert tc.max_epochs == 30
    model, records = train(model, parts["train"], parts["val"], tc)
    best = max(r.val_dice for r in records)
    elapsed = time.perf_counter() - start
    # the recorded rates replay exactly through the schedule rule
    lr, history = tc.lr_init, []
    for r in records:
        assert r.lr == lr
        history.append(r.val_dice)
        lr = lr_schedule_update(history, lr, tc.plateau_factor, tc.plateau_patience, tc.lr_min, tc.min_delta)
    record_property("detail", f"best val macro Dice {best:.4f} after {len(records)} epochs, {elapsed / 60:.1f} min")
    assert best >= 0.90
    assert elapsed < 20 * 60


@pytest.mark.criterion(6, "training: full model val Dice >= 0.90 in 30 epochs; LR and early-stop rules")
def test_rigged_plateau(record_property):
    samples = synth_phantoms(12, 32, seed=0)
    model = build(ModelConfig(base_channels=2, depth=2, input_size=(32, 32)), seed=0)
    tc = TrainConfig(batch_size=4, max_epochs=100, lr_init=1.3e-5, augment=False)
    # frozen weights: validation Dice never moves after epoch 0
    _, records = train(model, samples[:10], samples[10:], tc, lr_override=lambda epoch, lr: 0.0)
    assert len(records) == 11 and records[-1].stopped and not any(r.stopped for r in records[:-1])
    assert [r.lr for r in records] == [1.3e-5] * 9 + [pytest.approx(1.04e-5)] * 2
    # longer plateau without early stopping: x0.8 every 8 epochs down to the floor
    tc = TrainConfig(batch_size=4, max_epochs=30, lr_init=1.3e-5, early_stop_patience=100, augment=False)
    _, records = train(build(model.config, seed=0), samples[:10], samples[10:], tc,
                       lr_override=lambda epoch, lr: 0.0)
    trace = [r.lr for r in records]
    assert trace[:9] == [1.3e-5] * 9
    assert trace[9:17] == [pytest.approx(1.04e-5)] * 8
    assert trace[17:] == [1e-5] * 13
    record_property("detail", "early stop after 11 epochs; LR trace 1.3e-5 -> 1.04e-5 -> floor 1e-5")


# ---------------------------------------------------------------------------
# 7. metrics
# ---------------------------------------------------------------------------

@pytest.mark.criterion(7, "metrics match a brute-force counter within 1e-9; Dice/IoU identity; focal gamma=0 is CE")
def test_metrics_against_brute_force():
    rng = np.random.default_rng(2024)
    fns = {"dice": dice, "miou": miou, "pre": precision, "sen": sensitivity, "spe": specificity}
    for _ in range(1000):
        shape = tuple(rng.integers(1, 13, 2))
        pred, true = rng.integers(0, 4, shape), rng.integers(0, 4, shape)
        ref = brute_force(pred, true, 4)
        cm = ConfusionMatrix(4).accumulate(pred, true)
        for key, fn in fns.items():
            s = fn(cm)
            assert np.max(np.abs(s.per_class - ref[key][0])) < 1e-9
            assert abs(s.macro - ref[key][1]) < 1e-9
        assert abs(accuracy(cm).macro - ref["acc"]) < 1e-9
        d, j = dice(cm).per_class, miou(cm).per_class
        assert np.max(np.abs(j - d / (2 - d))) < 1e-9


@pytest.mark.criterion(7, "metrics match a brute-force counter within 1e-9; Dice/IoU identity; focal gamma=0 is CE")
def test_focal_gamma_zero_is_cross_entropy():
    rng = np.random.default_rng(3)
    for _ in range(50):
        z = rng.normal(size=(2, 4, 6, 6))
        p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        y = rng.integers(0, 4, (2, 6, 6))
        ce = -np.mean(np.log(np.take_along_axis(p, y[:, None], axis=1)))
        assert abs(focal_loss(Tensor(p, dtype=np.float64), y, gamma=0.0).item() - ce) < 1e-6


# ---------------------------------------------------------------------------
# 8. round trips
# ---------------------------------------------------------------------------

@pytest.mark.criterion(8, "PGM and .qat round trips bitwise; overlay counts reconcile with confusion matrix")
def test_round_trips(tmp_path):
    rng = np.random.default_rng(8)
    for i, maxval in enumerate((255, 65535, 4, 1000)):
        grid = rng.integers(0, maxval + 1, tuple(rng.integers(1, 40, 2)))
        save_pgm(grid, tmp_path / f"g{i}.pgm", maxval=maxval)
        assert np.array_equal(load_pgm(tmp_path / f"g{i}.pgm"), grid)
    for i in range(10):
        arr = rng.normal(size=tuple(rng.integers(1, 6, 4))).astype(np.float32)
        arr.flat[0] = np.float32(-0.0)
        save_qat(tmp_path / f"t{i}.qat", arr)
        back = load_qat(tmp_path / f"t{i}.qat")
        assert back.dtype == np.float32 and back.shape == arr.shape and back.tobytes() == arr.tobytes()


@pytest.mark.criterion(8, "PGM and .qat round trips bitwise; overlay counts reconcile with confusion matrix")
def test_overlay_reconciles():
    rng = np.random.default_rng(9)
    for s in synth_phantoms(20, 48, seed=5):
        pred = s.mask.copy()
        flip = rng.random(pred.shape) < 0.1
        pred[flip] = rng.integers(0, 4, int(flip.sum()))
        counts = color_counts(overlay_panels(pred, s.mask, s.image), 48)
        cm = ConfusionMatrix(4).accumulate(pred, s.mask)
        for c, panel in zip((1, 2, 3), counts):
            assert (panel["tp"], panel["fp"], panel["fn"]) == (cm.tp[c], cm.fp[c], cm.fn[c])


# ---------------------------------------------------------------------------
# 9. determinism
# ---------------------------------------------------------------------------

@pytest.mark.criterion(9, "two identical train runs give bitwise-identical logs and checkpoints")
def test_train_determinism(tmp_path):
    argv = ["train", "--synthetic", "24", "--size", "32", "--base-channels", "2", "--epochs", "3", "--seed", "5"]
    cfg = tmp_path / "depth.json"
    cfg.write_text('{"model": {"depth": 2}}')
    for run in ("a", "b"):
        assert cli.main(argv + ["--config", str(cfg), "--out", str(tmp_path / run)]) == 0
    for name in ("train_log.csv", "best.ckpt", "config.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
