import csv

import numpy as np
import pytest

from dpsinkhorn import evaluate, losses, nn
from dpsinkhorn.data import Dataset, synth_mixture, three_blobs
from dpsinkhorn.exceptions import DataFormatError, ValidationError
from dpsinkhorn.rng import stream


@pytest.fixture(scope="module")
def mixture():
    full = synth_mixture(three_blobs(), 3000, stream(1, "data"))
    return full.subset(slice(0, 2000)), full.subset(slice(2000, 3000))


def test_utility_identity_matches_direct_fit(mixture):
    train, test = mixture
    direct = evaluate.classifier_accuracy(train, test, seed=0)
    out = evaluate.downstream_utility(train, test, repeats=5, seed=0)
    assert abs(out["accuracy"] - direct) <= 0.01
    assert out["accuracy"] >= 0.98
    again = evaluate.downstream_utility(train, test, repeats=5, seed=0)
    assert again == out


def test_utility_shuffled_labels_near_chance(mixture):
    train, test = mixture
    shuffled = Dataset(train.samples, np.random.default_rng(0).permutation(train.labels), 3)
    acc = evaluate.downstream_utility(shuffled, test, repeats=5)["accuracy"]
    assert abs(acc - 1 / 3) <= 0.05


def test_utility_errors(mixture):
    train, test = mixture
    one = Dataset(train.samples, np.zeros(len(train), int), 3)
    with pytest.raises(ValidationError):
        evaluate.downstream_utility(one, test)
    with pytest.raises(ValidationError):
        evaluate.downstream_utility(Dataset(np.zeros((4, 3)), [0, 1, 2, 0], 3), test)
    with pytest.raises(ValidationError):
        evaluate.downstream_utility(Dataset(train.samples, train.labels, 5), test)


def test_utility_accepts_callable(mixture):
    train, test = mixture
    seen = []

    def synth(r):
        seen.append(r)
        return train.subset(slice(r * 100, r * 100 + 500))

    out = evaluate.downstream_utility(synth, test, repeats=3)
    assert seen == [0, 1, 2] and len(out["accuracies"]) == 3


def test_divergence_identical_sets_is_zero(mixture):
    X = mixture[0].samples[:300]
    out = evaluate.divergence_metric(X, X.copy(), draws=3)
    assert out["value"] == 0.0
    assert out["metric"] == evaluate.METRIC_LABEL


def test_divergence_same_distribution_is_null(mixture):
    a = synth_mixture(three_blobs(), 2000, stream(7, "data"), mixture[0].provenance["transform"])
    out = evaluate.divergence_metric(a.samples, mixture[0].samples, draws=10, size=100)
    assert abs(out["value"]) < 3 * out["std"]


def test_divergence_grows_with_offset(mixture):
    X = mixture[0].samples[:400] * 0.5
    values = [evaluate.divergence_metric(X, X * 1.0 + s, draws=3)["value"] for s in (0.1, 0.3, 0.6)]
    assert 0 < values[0] < values[1] < values[2]


def test_divergence_needs_samples():
    with pytest.raises(ValidationError):
        evaluate.divergence_metric(np.zeros((1, 2)), np.zeros((5, 2)))


def test_synthesize_labels_and_determinism():
    theta = nn.init_generator(nn.Architecture(4, 3, (8,), 2), seed=0)
    a = evaluate.synthesize(theta, 50, seed=3)
    b = evaluate.synthesize(theta, 50, seed=3)
    np.testing.assert_array_equal(a.samples, b.samples)
    fixed = evaluate.synthesize(theta, 4, seed=3, labels=[2, 2, 0, 1])
    np.testing.assert_array_equal(fixed.labels, [2, 2, 0, 1])
    assert len(evaluate.synthesize(theta, 0, seed=1)) == 0


def _probe_setup():
    theta = nn.init_generator(nn.Architecture(4, 3, (8,), 2), seed=0, dtype=np.float64)
    real = synth_mixture(three_blobs(), 400, stream(2, "data"))
    settings = losses.SinkhornSettings(lam=0.5, n_classes=3, max_iters=50, grad_scale=10)
    return theta, real, settings


def test_probe_endpoints_and_errors(tmp_path):
    theta, real, settings = _probe_setup()
    rows = evaluate.bias_variance_probe(theta, [0, 0.5, 1], 100, real, settings, n=10)
    by_p = {r["p"]: r for r in rows}
    assert by_p[1.0]["bias"] == 0.0
    assert by_p[0.0]["variance"] == 1.0
    assert all(r["batches"] == 100 for r in rows)
    evaluate.write_probe_csv(rows, tmp_path / "probe.csv")
    with open(tmp_path / "probe.csv") as fh:
        back = list(csv.DictReader(fh))
    assert [float(r["p"]) for r in back] == [0.0, 0.5, 1.0]
    with pytest.raises(ValidationError):
        evaluate.bias_variance_probe(theta, [0, 1], 99, real, settings, n=10)
    with pytest.raises(ValidationError):
        evaluate.bias_variance_probe(theta, [0, 0.5], 100, real, settings, n=10)


def test_probe_deterministic_and_gaps():
    theta, real, settings = _probe_setup()
    g1 = evaluate.probe_gradients(theta, [0, 1], 20, real, settings, n=10, seed=4)
    g2 = evaluate.probe_gradients(theta, [0, 1], 20, real, settings, n=10, seed=4)
    np.testing.assert_array_equal(g1[0.0], g2[0.0])
    gap, se = evaluate.bias_gap(g1, 0, 1)
    assert gap == pytest.approx(evaluate.summarize_probe(g1)[0]["bias"]) and se >= 0
    vgap, vse = evaluate.variance_gap(g1, 0, 0)
    assert vgap == 0.0 and vse == 0.0


def test_grid_shape_formula():
    assert evaluate.grid_shape(4, 2) == (5, 5)
    assert evaluate.grid_shape(1, 8) == (8, 8)
    assert evaluate.grid_shape(5, 3) == (7, 11)
    assert evaluate.grid_shape(10, 2, pad=0) == (6, 8)


def test_export_grid_examples(tmp_path):
    p = tmp_path / "zero.pgm"
    assert evaluate.export_grid(np.zeros((1, 4)), 2, p) == (2, 2)
    assert p.read_bytes().startswith(b"P5\n2 2\n255\n")
    np.testing.assert_array_equal(evaluate.read_pgm(p), 127)

    imgs = np.random.default_rng(0).uniform(-1, 1, (4, 4))
    p = tmp_path / "four.pgm"
    assert evaluate.export_grid(imgs, 2, p) == (5, 5)
    sheet = evaluate.read_pgm(p)
    from dpsinkhorn.data import denormalize
    tiles = denormalize(imgs).reshape(4, 2, 2)
    np.testing.assert_array_equal(sheet[:2, :2], tiles[0])
    np.testing.assert_array_equal(sheet[3:, 3:], tiles[3])
    assert np.all(sheet[2, :] == 0) and np.all(sheet[:, 2] == 0)


def test_export_grid_round_trip_bytes(tmp_path):
    raw = np.random.default_rng(1).integers(0, 256, (9, 16)).astype(np.uint8)
    imgs = raw / 127.5 - 1
    p = tmp_path / "rt.pgm"
    evaluate.export_grid(imgs, 4, p, pad=0)
    sheet = evaluate.read_pgm(p)
    tiles = sheet.reshape(3, 4, 3, 4).transpose(0, 2, 1, 3).reshape(9, 16)
    np.testing.assert_array_equal(tiles, raw)


def test_export_grid_errors(tmp_path):
    with pytest.raises(ValueError):
        evaluate.export_grid(np.zeros((2, 5)), 2, tmp_path / "x.pgm")
    with pytest.raises(ValueError):
        evaluate.export_grid(np.zeros((0, 4)), 2, tmp_path / "x.pgm")
    (tmp_path / "bad.pgm").write_bytes(b"P2\n1 1\n255\n0")
    with pytest.raises(DataFormatError):
        evaluate.read_pgm(tmp_path / "bad.pgm")
    (tmp_path / "short.pgm").write_bytes(b"P5\n3 3\n255\n\x00")
    with pytest.raises(DataFormatError):
        evaluate.read_pgm(tmp_path / "short.pgm")


def _trend_holds(grads, grid, gap_fn):
    # consecutive gaps may go the wrong way once, and only within 3 standard errors
    inversions = 0
    for lo, hi in zip(grid, grid[1:]):
        gap, se = gap_fn(grads, lo, hi)
        if gap < 0:
            if gap < -3 * se:
                return False
            inversions += 1
    return inversions <= 1


def test_probe_trends_on_trained_generator():
    from dpsinkhorn import train
    real = synth_mixture(three_blobs(), 6000, stream(0, "data"))
    cfg = train.TrainConfig(dp_enabled=False, steps=1000, sinkhorn_iters=100)
    theta, _ = train.train(cfg, real)
    grid = [0.0, 0.2, 0.4, 0.7, 1.0]
    grads = evaluate.probe_gradients(theta, grid, 300, real, cfg.sinkhorn(3), n=50)
    # bias(p) - bias(p') >= 0 for p < p'
    assert _trend_holds(grads, grid, evaluate.bias_gap)
    # variance(p') - variance(p) >= 0 for p < p'
    assert _trend_holds(grads, grid, evaluate.variance_gap)
