import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from dpsinkhorn.data import synth_mixture, three_blobs
from dpsinkhorn.estimators import DPSinkhornGenerator, SoftmaxClassifier
from dpsinkhorn.rng import stream


@pytest.fixture(scope="module")
def blobs():
    return synth_mixture(three_blobs(), 600, stream(0, "data"))


def test_generator_fit_sample(blobs):
    gen = DPSinkhornGenerator(batch_size=20, hidden=(16,), steps=5, sinkhorn_iters=20,
                              target_epsilon=100.0)
    with pytest.raises(NotFittedError):
        gen.sample(3)
    assert gen.fit(blobs.samples, blobs.labels) is gen
    X, y = gen.sample(12, seed=1)
    assert X.shape == (12, 2) and np.all(np.abs(X) <= 1) and set(y) <= {0, 1, 2}
    X2, _ = gen.sample(12, seed=1)
    np.testing.assert_array_equal(X, X2)
    assert 0 < gen.epsilon_ < 100
    assert clone(gen).get_params() == gen.get_params()


def test_generator_label_checks(blobs):
    gen = DPSinkhornGenerator(steps=1, hidden=(8,), dp_enabled=False)
    with pytest.raises(ValueError):
        gen.fit(blobs.samples, blobs.labels + 1)
    gen.fit(blobs.samples)
    assert gen.n_classes_ == 1 and np.isinf(gen.epsilon_)


def test_softmax_classifier(blobs):
    clf = SoftmaxClassifier(budget=200).fit(blobs.samples, np.array(["a", "b", "c"])[blobs.labels])
    assert clf.score(blobs.samples, np.array(["a", "b", "c"])[blobs.labels]) >= 0.98
    proba = clf.predict_proba(blobs.samples[:5])
    np.testing.assert_allclose(proba.sum(axis=1), 1.0)
    with pytest.raises(NotFittedError):
        SoftmaxClassifier().predict(blobs.samples)
