"""scikit-learn style wrappers around the training loops."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .config import RunConfig
from .data import SequenceDataset, SpeakerDataset
from .training import train_classifier, train_verifier


def _check_sequences(X) -> np.ndarray:
    X = check_array(X, allow_nd=True, dtype=np.float64)
    if X.ndim != 3:
        raise ValueError(f"expected sequences of shape [n_samples, T, M], got {X.shape}")
    return X


class _RNNParams:
    def _config(self, input_size: int, **extra) -> RunConfig:
        return RunConfig(cell=self.cell, param=self.param, hidden=self.hidden, input=input_size,
                         cores=self.cores, rank=self.rank, rank0=self.rank0, seed=self.random_state,
                         epochs=self.epochs, lr=self.lr, patience=self.patience, **extra)


class TTRNNClassifier(_RNNParams, ClassifierMixin, BaseEstimator):
    """Sequence classifier: recurrent cell, last hidden state, linear softmax head.

    ``X`` has shape ``[n_samples, T, M]``. The last ``validation_fraction`` of
    the training rows drive early stopping.
    """

    def __init__(self, cell="lstm", param="tt-fused", hidden=64, cores=2, rank=4, rank0=0,
                 epochs=15, lr=1e-3, batch_size=256, patience=4, validation_fraction=0.1,
                 random_state=0):
        self.cell = cell
        self.param = param
        self.hidden = hidden
        self.cores = cores
        self.rank = rank
        self.rank0 = rank0
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.patience = patience
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def fit(self, X, y):
        X = _check_sequences(X)
        y = np.asarray(y)
        if len(y) != len(X):
            raise ValueError("X and y have different lengths")
        self.classes_, codes = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        n_val = int(round(self.validation_fraction * len(X)))
        cut = len(X) - n_val if 0 < n_val < len(X) else len(X)
        train = SequenceDataset(X[:cut], codes[:cut], "train", {"source": "array"})
        val = SequenceDataset(X[cut:], codes[cut:], "val", {"source": "array"}) if cut < len(X) else train
        config = self._config(X.shape[2], classes=len(self.classes_), batch_size=self.batch_size)
        result = train_classifier(config, train, val)
        self.model_ = result.model
        self.history_ = result.history
        self.n_features_in_ = X.shape[2]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        X = _check_sequences(X)
        if X.shape[2] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features per step, got {X.shape[2]}")
        return np.asarray(self.model_.forward(X))

    def predict_proba(self, X):
        z = self.decision_function(X)
        z = np.exp(z - z.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]


class TTRNNSpeakerEncoder(_RNNParams, TransformerMixin, BaseEstimator):
    """Utterance encoder trained with the GE2E loss.

    ``fit`` takes utterances ``X: [n, T, M]`` with speaker labels ``y``; every
    speaker must contribute the same number of utterances. ``transform``
    returns embeddings ``[n, emb]``.
    """

    def __init__(self, cell="lstm", param="tt-fused", hidden=64, emb=32, cores=2, rank=4, rank0=0,
                 epochs=15, lr=1e-2, patience=4, validation_speakers=0.2, random_state=0):
        self.cell = cell
        self.param = param
        self.hidden = hidden
        self.emb = emb
        self.cores = cores
        self.rank = rank
        self.rank0 = rank0
        self.epochs = epochs
        self.lr = lr
        self.patience = patience
        self.validation_speakers = validation_speakers
        self.random_state = random_state

    def fit(self, X, y):
        X = _check_sequences(X)
        y = np.asarray(y)
        speakers, counts = np.unique(y, return_counts=True)
        if len(speakers) < 2:
            raise ValueError("GE2E training needs at least 2 speakers")
        if len(set(counts)) != 1:
            raise ValueError("every speaker needs the same number of utterances")
        utts = np.stack([X[y == s] for s in speakers])
        n_val = int(round(self.validation_speakers * len(speakers)))
        if n_val >= 2 and len(speakers) - n_val >= 2:
            train = SpeakerDataset(utts[:-n_val], speakers[:-n_val])
            val = SpeakerDataset(utts[-n_val:], speakers[-n_val:])
        else:
            train = val = SpeakerDataset(utts, speakers)
        config = self._config(X.shape[2], task="synth-speaker", emb=self.emb)
        result = train_verifier(config, train, val)
        self.model_ = result.model
        self.history_ = result.history
        self.n_features_in_ = X.shape[2]
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        X = _check_sequences(X)
        if X.shape[2] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features per step, got {X.shape[2]}")
        return np.asarray(self.model_.forward(X))
