import json

import numpy as np
import pytest

from dpsinkhorn import data
from dpsinkhorn.data import Dataset
from dpsinkhorn.exceptions import DataFormatError, ValidationError
from dpsinkhorn.rng import stream


def test_poisson_endpoints():
    rng = np.random.default_rng(0)
    assert data.poisson_sample(100, 0.0, rng).size == 0
    np.testing.assert_array_equal(data.poisson_sample(100, 1.0, rng), np.arange(100))
    with pytest.raises(ValueError):
        data.poisson_sample(10, 1.1, rng)


def test_poisson_mean_batch_size():
    rng = np.random.default_rng(1)
    sizes = np.array([data.poisson_sample(10_000, 0.1, rng).size for _ in range(100)])
    se = np.sqrt(10_000 * 0.1 * 0.9 / 100)
    assert abs(sizes.mean() - 1000) <= 3 * se


def test_poisson_inclusions_independent():
    rng = np.random.default_rng(2)
    trials, M, q = 10_000, 6, 0.3
    ind = np.zeros((trials, M))
    for t in range(trials):
        ind[t, data.poisson_sample(M, q, rng)] = 1
    cov = np.cov(ind.T)
    se = q * (1 - q) / np.sqrt(trials)
    off = cov[~np.eye(M, dtype=bool)]
    assert np.all(np.abs(off) <= 3 * se * 1.5)
    assert np.abs(off.mean()) <= 3 * se / np.sqrt(off.size / 2)


def test_idx_hand_built_vector(tmp_path):
    buf = bytes([0, 0, 0x08, 1, 0, 0, 0, 3, 5, 0, 255])
    np.testing.assert_array_equal(data.parse_idx(buf), [5, 0, 255])
    path = tmp_path / "v.idx"
    path.write_bytes(buf)
    np.testing.assert_array_equal(data.read_idx(path), [5, 0, 255])


def test_idx_errors():
    with pytest.raises(data.TruncatedPayloadError) as info:
        data.parse_idx(bytes([0, 0, 0x08, 1, 0, 0, 0, 3, 5, 0]))
    assert info.value.expected == 11 and info.value.actual == 10
    assert "11" in str(info.value) and "10" in str(info.value)
    with pytest.raises(data.BadMagicError):
        data.parse_idx(bytes([1, 0, 0x08, 1, 0, 0, 0, 0]))
    with pytest.raises(data.UnsupportedTypeError):
        data.parse_idx(bytes([0, 0, 0x0D, 1, 0, 0, 0, 0]))
    for err in (data.TruncatedPayloadError, data.BadMagicError, data.UnsupportedTypeError):
        assert issubclass(err, DataFormatError)


def test_idx_every_prefix_is_typed_error():
    full = bytes([0, 0, 0x08, 2, 0, 0, 0, 2, 0, 0, 0, 2, 1, 2, 3, 4])
    for k in range(len(full)):
        with pytest.raises(DataFormatError):
            data.parse_idx(full[:k])
    assert data.parse_idx(full).shape == (2, 2)


def test_idx_round_trip(tmp_path):
    img = np.array([[0, 17], [128, 255]], dtype=np.uint8)
    path = tmp_path / "img.idx"
    data.write_idx(path, img)
    raw = path.read_bytes()
    assert raw[:4] == bytes([0, 0, 8, 2])
    out = data.read_idx(path)
    assert out.dtype == np.uint8
    np.testing.assert_array_equal(out, img)
    data.write_idx(tmp_path / "again.idx", out)
    assert (tmp_path / "again.idx").read_bytes() == raw


def test_normalize_examples():
    assert data.normalize(0) == -1.0
    assert data.normalize(255) == 1.0
    assert data.normalize(128) == pytest.approx(0.00392156862745098, abs=1e-15)
    v = np.arange(256, dtype=np.uint8)
    np.testing.assert_array_equal(data.denormalize(data.normalize(v)), v)
    assert data.denormalize(0.0) == 127


def test_downsample_examples():
    const = np.full((3, 28, 28), 0.25)
    np.testing.assert_allclose(data.downsample(const, 8), 0.25)
    checker = np.array([[[1.0, 0.0], [0.0, 1.0]]])
    np.testing.assert_allclose(data.downsample(checker, 1), [[0.5]])
    img = np.random.default_rng(0).random((2, 5, 5))
    np.testing.assert_allclose(data.downsample(img, 5), img.reshape(2, 25), atol=1e-15)
    with pytest.raises(ValueError):
        data.downsample(np.zeros((1, 3, 4)))


def test_mixture_single_component():
    comps = [data.MixtureComponent((0.0, 0.0), ((1e-8, 0.0), (0.0, 1e-8)), 0, 1.0)]
    ds = data.synth_mixture(comps, 500, np.random.default_rng(0),
                            transform={"center": [0.0, 0.0], "scale": [1.0, 1.0]})
    assert np.abs(ds.samples).max() < 1e-3
    assert ds.n_classes == 1 and np.all(ds.labels == 0)


def test_mixture_counts_and_range():
    ds = data.synth_mixture(data.three_blobs(), 30_000, np.random.default_rng(1))
    counts = np.bincount(ds.labels, minlength=3)
    sd = np.sqrt(30_000 * (1 / 3) * (2 / 3))
    assert np.all(np.abs(counts - 10_000) <= 3 * sd)
    assert ds.samples.min() == -1.0 and ds.samples.max() == 1.0
    t = ds.provenance["transform"]
    held = data.synth_mixture(data.three_blobs(), 100, np.random.default_rng(2), transform=t)
    assert held.provenance["transform"] == t
    assert np.all(np.abs(held.samples) <= 1)


def test_mixture_errors():
    bad = [{"mean": [0, 0], "cov": [[1, 2], [2, 1]], "label": 0, "weight": 1.0}]
    with pytest.raises(ValidationError):
        data.synth_mixture(bad, 10, np.random.default_rng(0))
    half = [{"mean": [0, 0], "cov": [[1, 0], [0, 1]], "label": 0, "weight": 0.5}]
    with pytest.raises(ValidationError):
        data.synth_mixture(half, 10, np.random.default_rng(0))
    with pytest.raises(ValidationError):
        data.parse_mixture_spec([{"mean": [0, 0]}])


def test_dataset_invariants():
    with pytest.raises(ValidationError):
        Dataset(np.array([[1.5]]), [0], 1)
    with pytest.raises(ValidationError):
        Dataset(np.array([[0.5]]), [1], 1)
    with pytest.raises(ValidationError):
        Dataset(np.zeros((2, 1)), [0], 1)


def test_dataset_save_load_deterministic(tmp_path):
    ds = data.synth_mixture(data.three_blobs(), 50, np.random.default_rng(3))
    ds.save(tmp_path / "a.npz")
    ds.save(tmp_path / "b.npz")
    assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()
    back = Dataset.load(tmp_path / "a.npz")
    np.testing.assert_array_equal(back.samples, ds.samples)
    np.testing.assert_array_equal(back.labels, ds.labels)
    assert back.provenance == json.loads(json.dumps(ds.provenance))
    (tmp_path / "junk.npz").write_bytes(b"not a zip")
    with pytest.raises(DataFormatError):
        Dataset.load(tmp_path / "junk.npz")


def test_load_dataset_ref(tmp_path):
    ref = {"kind": "mixture", "preset": "three_blobs", "count": 300, "seed": 4}
    a = data.load_dataset_ref(ref)
    b = data.synth_mixture(data.three_blobs(), 300, stream(4, "data"))
    np.testing.assert_array_equal(a.samples, b.samples)
    a.save(tmp_path / "d.npz")
    c = data.load_dataset_ref({"kind": "npz", "path": "d.npz"}, tmp_path)
    np.testing.assert_array_equal(c.labels, a.labels)

    images = np.random.default_rng(5).integers(0, 256, (6, 4, 4)).astype(np.uint8)
    data.write_idx(tmp_path / "img.idx", images)
    data.write_idx(tmp_path / "lab.idx", np.array([0, 1, 2, 0, 1, 2], dtype=np.uint8))
    idx = data.load_dataset_ref({"kind": "idx", "images": "img.idx", "labels": "lab.idx",
                                 "side": 2, "limit": 4}, tmp_path)
    assert idx.samples.shape == (4, 4) and idx.n_classes == 3
    full = data.load_dataset_ref({"kind": "idx", "images": "img.idx", "labels": "lab.idx"}, tmp_path)
    np.testing.assert_array_equal(full.samples, data.normalize(images.reshape(6, 16)))

    with pytest.raises(ValidationError):
        data.load_dataset_ref({"kind": "csv"})
    with pytest.raises(ValidationError):
        data.load_dataset_ref({"path": "x"})
