import numpy as np
import pytest
from sklearn.base import clone

from ttrnn import TTRNNClassifier, TTRNNSpeakerEncoder
from ttrnn.data import synth_speakers, toy_sequences


def test_get_params_and_clone():
    est = TTRNNClassifier(hidden=8, rank=3)
    params = est.get_params()
    assert params["hidden"] == 8 and params["rank"] == 3
    copy = clone(est)
    assert copy is not est and copy.get_params() == params


def test_classifier_fit_predict():
    data = toy_sequences(240, M=4, seed=0)
    X, y = data.inputs, np.where(data.labels == 1, "pos", "neg")
    clf = TTRNNClassifier(hidden=8, rank=2, epochs=4, lr=1e-2, batch_size=40).fit(X, y)
    assert set(clf.classes_) == {"neg", "pos"}
    proba = clf.predict_proba(X[:10])
    assert proba.shape == (10, 2) and np.allclose(proba.sum(axis=1), 1)
    assert clf.score(X, y) > 0.9


def test_classifier_rejects_bad_input():
    clf = TTRNNClassifier()
    with pytest.raises(ValueError):
        clf.fit(np.zeros((4, 3)), [0, 1, 0, 1])
    with pytest.raises(ValueError):
        clf.fit(np.zeros((4, 2, 3)), [0, 0, 0, 0])


def test_predict_before_fit():
    from sklearn.exceptions import NotFittedError
    with pytest.raises(NotFittedError):
        TTRNNClassifier().predict(np.zeros((1, 2, 3)))


def test_encoder_transform_shape():
    spk = synth_speakers(6, 4, T=6, M=12, seed=0)
    X = spk.utterances.reshape(-1, *spk.utterances.shape[2:])
    y = np.repeat(np.arange(6), 4)
    enc = TTRNNSpeakerEncoder(hidden=8, emb=5, rank=2, epochs=1).fit(X, y)
    Z = enc.transform(X)
    assert Z.shape == (24, 5)
    assert np.all(np.isfinite(Z))


def test_encoder_needs_balanced_speakers():
    with pytest.raises(ValueError):
        TTRNNSpeakerEncoder().fit(np.zeros((3, 2, 4)), [0, 0, 1])
