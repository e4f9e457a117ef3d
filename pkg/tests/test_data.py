import gzip
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ttrnn.data import (DataFormatError, SequenceDataset, SpeakerDataset, as_sequences, batches, downsample,
                        find_mnist, fingerprint, load_idx, permute_pixels, speaker_batch, synth_speakers,
                        toy_sequences, train_val_split, voice_directions)


def idx_bytes(arr, magic):
    arr = np.asarray(arr, dtype=np.uint8)
    head = magic.to_bytes(4, "big") + b"".join(int(d).to_bytes(4, "big") for d in arr.shape)
    return head + arr.tobytes()


@pytest.fixture
def idx_pair(tmp_path):
    images = np.zeros((2, 28, 28), dtype=np.uint8)
    images[0, 0, 0] = 255
    images[1, 27, 27] = 128
    img, lab = tmp_path / "img", tmp_path / "lab"
    img.write_bytes(idx_bytes(images, 0x803))
    lab.write_bytes(idx_bytes([3, 7], 0x801))
    return img, lab


class TestIDX:
    def test_parses_fixture(self, idx_pair):
        ds = load_idx(*idx_pair)
        assert ds.inputs.shape == (2, 28, 28)
        assert ds.labels.tolist() == [3, 7]
        assert ds.inputs[0, 0, 0] == 1.0
        assert ds.inputs[1, 27, 27] == 128 / 255

    def test_gzip(self, idx_pair, tmp_path):
        img, lab = idx_pair
        gz = tmp_path / "img.gz"
        gz.write_bytes(gzip.compress(img.read_bytes()))
        np.testing.assert_array_equal(load_idx(gz, lab).inputs, load_idx(img, lab).inputs)

    def test_bad_magic(self, idx_pair, tmp_path):
        bad = tmp_path / "bad"
        bad.write_bytes(idx_bytes(np.zeros((1, 2, 2)), 0x802))
        with pytest.raises(DataFormatError):
            load_idx(bad, idx_pair[1])

    def test_truncated(self, idx_pair, tmp_path):
        cut = tmp_path / "cut"
        cut.write_bytes(idx_pair[0].read_bytes()[:-10])
        with pytest.raises(DataFormatError):
            load_idx(cut, idx_pair[1])

    def test_count_mismatch(self, idx_pair, tmp_path):
        lab = tmp_path / "lab3"
        lab.write_bytes(idx_bytes([1, 2, 3], 0x801))
        with pytest.raises(DataFormatError):
            load_idx(idx_pair[0], lab)

    def test_find_mnist_missing(self, tmp_path, monkeypatch):
        monkeypatch.setenv("TTRNN_DATA_DIR", str(tmp_path))
        with pytest.raises(FileNotFoundError):
            find_mnist()

    def test_find_mnist(self, tmp_path, monkeypatch):
        for name in ("train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte.gz",
                     "t10k-labels-idx1-ubyte"):
            (tmp_path / name).write_bytes(b"")
        monkeypatch.setenv("TTRNN_DATA_DIR", str(tmp_path))
        assert find_mnist()["test"][0].name == "t10k-images-idx3-ubyte.gz"


def image_ds(rng, n=5, side=28):
    return SequenceDataset(rng.uniform(size=(n, side, side)), rng.integers(0, 10, n), "train",
                           {"source": "test", "transforms": []})


class TestTransforms:
    def test_permutation_deterministic_and_invertible(self, rng):
        ds = image_ds(rng)
        a, b = permute_pixels(ds, 3), permute_pixels(ds, 3)
        np.testing.assert_array_equal(a.inputs, b.inputs)
        perm = np.array(a.meta["permutation"])
        inv = np.argsort(perm)
        restored = a.inputs.reshape(5, -1)[:, inv].reshape(ds.inputs.shape)
        np.testing.assert_array_equal(restored, ds.inputs)

    def test_permutation_keeps_histogram(self, rng):
        ds = image_ds(rng)
        p = permute_pixels(ds, 9)
        np.testing.assert_array_equal(np.sort(p.inputs.reshape(5, -1)), np.sort(ds.inputs.reshape(5, -1)))

    def test_permutation_same_across_splits(self, rng):
        a, b = permute_pixels(image_ds(rng), 4), permute_pixels(image_ds(rng, 2), 4)
        assert a.meta["permutation"] == b.meta["permutation"]

    def test_downsample_constant(self):
        ds = SequenceDataset(np.full((1, 4, 4), 0.3), np.zeros(1, int))
        np.testing.assert_allclose(downsample(ds, 2).inputs, 0.3, rtol=1e-15)

    def test_downsample_block(self):
        ds = SequenceDataset(np.array([[[0.0, 0.0], [1.0, 1.0]]]), np.zeros(1, int))
        assert downsample(ds, 2).inputs[0, 0, 0] == 0.5

    def test_downsample_preserves_mean(self, rng):
        ds = image_ds(rng)
        small = downsample(ds, 2)
        assert small.inputs.shape == (5, 14, 14)
        np.testing.assert_allclose(small.inputs.mean(axis=(1, 2)), ds.inputs.mean(axis=(1, 2)), rtol=1e-13)

    def test_downsample_indivisible(self, rng):
        with pytest.raises(ValueError):
            downsample(image_ds(rng), 3)

    def test_pixel_layout(self, rng):
        assert as_sequences(image_ds(rng), "pixel").inputs.shape == (5, 784, 1)

    def test_fingerprint(self, rng):
        fp = fingerprint(permute_pixels(downsample(image_ds(rng), 2), 5))
        assert "seed=5" in fp and "downsample2|permute5" in fp

    def test_split(self, rng):
        ds = image_ds(rng, 10)
        train, val = train_val_split(ds, 3)
        assert len(train) == 7 and len(val) == 3
        np.testing.assert_array_equal(np.concatenate([train.inputs, val.inputs]), ds.inputs)


class TestBatches:
    @given(st.integers(1, 40), st.integers(1, 12), st.integers(0, 100))
    def test_cover_once(self, n, b, seed):
        ds = SequenceDataset(np.arange(n, dtype=float).reshape(n, 1, 1), np.arange(n))
        got = list(batches(ds, b, shuffle_seed=seed))
        assert len(got) == math.ceil(n / b)
        assert sorted(np.concatenate([y for _, y in got]).tolist()) == list(range(n))

    def test_same_seed_same_order(self):
        ds = SequenceDataset(np.zeros((20, 1, 1)), np.arange(20))
        a = [y.tolist() for _, y in batches(ds, 6, 1)]
        assert a == [y.tolist() for _, y in batches(ds, 6, 1)]
        assert a != [y.tolist() for _, y in batches(ds, 6, 2)]


class TestSpeakers:
    def test_directions_separated(self, rng):
        for N, M in ((5, 12), (20, 12)):
            v = voice_directions(N, M, 0.5, rng)
            cos = np.abs(v @ v.T)[~np.eye(N, dtype=bool)]
            assert cos.max() <= 0.5 + 1e-12
            np.testing.assert_allclose(np.linalg.norm(v, axis=1), 1.0, rtol=1e-12)

    def test_infeasible(self, rng):
        with pytest.raises(ValueError):
            voice_directions(10, 2, 0.99, rng, max_tries=200)

    def test_noise_free_envelope(self):
        ds = synth_speakers(3, 4, 10, 6, noise=0.0, seed=1)
        v = np.array(ds.meta["directions"])
        for j in range(3):
            for i in range(4):
                env = ds.utterances[j, i] @ v[j]
                np.testing.assert_allclose(ds.utterances[j, i], np.outer(env, v[j]), atol=1e-12)

    def test_well_separated_nearest_centroid(self):
        ds = synth_speakers(6, 5, 10, 8, sep=1.0, noise=1e-6, seed=2)
        feats = ds.utterances.mean(axis=2)
        cents = feats.mean(axis=1)
        pred = np.argmax(feats @ cents.T / np.linalg.norm(cents, axis=1), axis=-1)
        np.testing.assert_array_equal(pred, np.arange(6)[:, None].repeat(5, 1))

    def test_seed_determinism(self):
        np.testing.assert_array_equal(synth_speakers(3, 2, 4, 5, seed=7).utterances,
                                      synth_speakers(3, 2, 4, 5, seed=7).utterances)

    def test_margin_monotone_in_sep(self):
        margins = []
        for sep in (0.2, 0.5, 0.8):
            ms = []
            for seed in range(5):
                ds = synth_speakers(6, 6, 10, 12, sep=sep, noise=0.3, seed=seed)
                f = ds.utterances.mean(axis=2)
                f /= np.linalg.norm(f, axis=-1, keepdims=True)
                flat = f.reshape(36, -1)
                cos = flat @ flat.T
                same = np.kron(np.eye(6), np.ones((6, 6))).astype(bool) & ~np.eye(36, dtype=bool)
                diff = ~np.kron(np.eye(6), np.ones((6, 6))).astype(bool)
                ms.append(cos[same].mean() - cos[diff].mean())
            margins.append(np.mean(ms))
        assert margins[0] < margins[1] < margins[2]

    def test_preconditions(self):
        with pytest.raises(ValueError):
            synth_speakers(1, 4, 4, 4)
        with pytest.raises(ValueError):
            SpeakerDataset(np.zeros((2, 1, 3, 3)), np.arange(2))

    def test_speaker_batch(self, rng):
        ds = synth_speakers(10, 6, 4, 12, seed=0)
        utts, ids = speaker_batch(ds, 4, 3, rng)
        assert utts.shape == (4, 3, 4, 12) and len(set(ids.tolist())) == 4


def test_toy_is_linearly_separable():
    ds = toy_sequences(400, T=8, M=4, margin=1.0, noise=0.5, seed=0)
    feats = ds.inputs.mean(axis=1)
    w = np.linalg.lstsq(np.c_[feats, np.ones(400)], 2.0 * ds.labels - 1, rcond=None)[0]
    assert np.mean((np.c_[feats, np.ones(400)] @ w > 0) == ds.labels) >= 0.99
