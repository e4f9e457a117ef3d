"""Datasets: MNIST IDX parsing, pixel permutation, pooling, synthetic speakers."""
from __future__ import annotations

import gzip
import hashlib
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class DataFormatError(ValueError):
    pass


@dataclass
class SequenceDataset:
    """Labelled sequences ``inputs: [examples, T, M]``.

    ``meta`` records provenance: source hash, permutation seed and the
    transform chain applied so far.
    """

    inputs: np.ndarray
    labels: np.ndarray
    split: str = "train"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.inputs.ndim != 3:
            raise ValueError(f"inputs must be [examples, T, M], got {self.inputs.shape}")
        if len(self.labels) != len(self.inputs):
            raise ValueError("label count does not match example count")

    def __len__(self):
        return len(self.inputs)

    def subset(self, index, split: str | None = None) -> "SequenceDataset":
        return replace(self, inputs=self.inputs[index], labels=self.labels[index],
                       split=split or self.split, meta=dict(self.meta))

    def with_transform(self, inputs, step: str, **meta) -> "SequenceDataset":
        chain = list(self.meta.get("transforms", [])) + [step]
        return replace(self, inputs=inputs, meta={**self.meta, **meta, "transforms": chain})


@dataclass
class SpeakerDataset:
    """Utterance features ``[speakers, utterances, T, M]``."""

    utterances: np.ndarray
    speaker_ids: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.utterances.ndim != 4:
            raise ValueError("utterances must be [speakers, utterances, T, M]")
        if self.utterances.shape[0] < 2 or self.utterances.shape[1] < 2:
            raise ValueError("need at least 2 speakers with 2 utterances each")

    @property
    def n_speakers(self):
        return self.utterances.shape[0]

    @property
    def n_utterances(self):
        return self.utterances.shape[1]

    def subset(self, speakers=None, utterances=None) -> "SpeakerDataset":
        u, ids = self.utterances, self.speaker_ids
        if speakers is not None:
            u, ids = u[speakers], ids[speakers]
        if utterances is not None:
            u = u[:, utterances]
        return SpeakerDataset(u, ids, dict(self.meta))


# ---------------------------------------------------------------------------
# IDX

def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, expected_magic: int) -> np.ndarray:
    if len(raw) < 8:
        raise DataFormatError("file too short for an IDX header")
    magic = int.from_bytes(raw[:4], "big")
    if magic != expected_magic:
        raise DataFormatError(f"bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataFormatError("truncated IDX header")
    dims = [int.from_bytes(raw[4 + 4 * i:8 + 4 * i], "big") for i in range(ndim)]
    count = math.prod(dims)
    if len(raw) - header < count:
        raise DataFormatError(f"truncated payload: need {count} bytes, have {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(images_path, labels_path, split: str = "train") -> SequenceDataset:
    """Parse an IDX image/label pair; pixels are scaled to ``[0, 1]``.

    Each image becomes a ``[rows, cols]`` sequence (one image row per step).
    """
    img_raw, lab_raw = _read_bytes(images_path), _read_bytes(labels_path)
    images = _parse_idx(img_raw, IMAGE_MAGIC)
    labels = _parse_idx(lab_raw, LABEL_MAGIC)
    if images.ndim != 3:
        raise DataFormatError(f"expected 3-d image array, got {images.shape}")
    if len(images) != len(labels):
        raise DataFormatError(f"{len(images)} images but {len(labels)} labels")
    digest = hashlib.sha256(img_raw + lab_raw).hexdigest()[:16]
    return SequenceDataset(images.astype(np.float64) / 255.0, labels.astype(np.int64), split,
                           {"source": Path(images_path).name, "sha256": digest, "transforms": []})


MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def find_mnist(root=None) -> dict[str, tuple[Path, Path]]:
    """Locate the MNIST IDX files under ``root`` or ``$TTRNN_DATA_DIR``."""
    root = root or os.environ.get("TTRNN_DATA_DIR")
    if not root:
        raise FileNotFoundError("no data directory given and TTRNN_DATA_DIR is unset")
    root = Path(root)
    found = {}
    for split, names in MNIST_FILES.items():
        paths = []
        for name in names:
            for cand in (root / name, root / f"{name}.gz", root / "mnist" / name, root / "mnist" / f"{name}.gz"):
                if cand.exists():
                    paths.append(cand)
                    break
            else:
                raise FileNotFoundError(f"{name}[.gz] not found under {root}")
        found[split] = tuple(paths)
    return found


def train_val_split(ds: SequenceDataset, n_val: int) -> tuple[SequenceDataset, SequenceDataset]:
    """Hold out the last ``n_val`` examples for validation."""
    if not 0 < n_val < len(ds):
        raise ValueError("n_val must be between 0 and the dataset size")
    cut = len(ds) - n_val
    return ds.subset(slice(0, cut), "train"), ds.subset(slice(cut, None), "val")


def downsample(ds: SequenceDataset, factor: int) -> SequenceDataset:
    """Non-overlapping mean pooling of ``[rows, cols]`` images."""
    n, rows, cols = ds.inputs.shape
    if factor < 1 or rows % factor or cols % factor:
        raise ValueError(f"image {rows}x{cols} is not divisible by factor {factor}")
    pooled = ds.inputs.reshape(n, rows // factor, factor, cols // factor, factor).mean(axis=(2, 4))
    return ds.with_transform(pooled, f"downsample{factor}", downsample_factor=factor)


def pixel_permutation(length: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).permutation(length)


def permute_pixels(ds: SequenceDataset, seed: int) -> SequenceDataset:
    """Scramble the flattened pixels of every example with one fixed permutation."""
    n, T, M = ds.inputs.shape
    perm = pixel_permutation(T * M, seed)
    flat = ds.inputs.reshape(n, T * M)[:, perm]
    return ds.with_transform(flat.reshape(n, T, M), f"permute{seed}", permutation_seed=seed,
                             permutation=perm.tolist())


def as_sequences(ds: SequenceDataset, step: str = "row") -> SequenceDataset:
    """Lay images out one row per step (``row``) or one pixel per step (``pixel``)."""
    n, T, M = ds.inputs.shape
    if step == "row":
        return ds
    if step == "pixel":
        return ds.with_transform(ds.inputs.reshape(n, T * M, 1), "pixel")
    raise ValueError(f"unknown step layout {step!r}")


def fingerprint(ds) -> str:
    meta = ds.meta
    return (f"source={meta.get('source', 'unknown')} sha256={meta.get('sha256', '-')} "
            f"seed={meta.get('permutation_seed', meta.get('seed', '-'))} "
            f"transforms={'|'.join(meta.get('transforms', [])) or '-'}")


def batches(ds: SequenceDataset, batch_size: int, shuffle_seed=None) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(inputs [b, T, M], labels)``; the last short batch is kept."""
    order = np.arange(len(ds))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(ds))
    for start in range(0, len(ds), batch_size):
        idx = order[start:start + batch_size]
        yield ds.inputs[idx], ds.labels[idx]


# ---------------------------------------------------------------------------
# synthetic speakers

def voice_directions(N: int, M: int, sep: float, rng: np.random.Generator, max_tries: int = 10000) -> np.ndarray:
    """``N`` unit vectors in ``R^M`` with pairwise ``|cos| <= 1 - sep``.

    When ``N < M`` the vectors share a common component so every pairwise
    cosine equals ``1 - sep`` exactly; otherwise they are drawn by rejection.
    """
    if not 0.0 <= sep <= 1.0:
        raise ValueError("sep must lie in [0, 1]")
    target = 1.0 - sep
    if N < M:
        q, _ = np.linalg.qr(rng.standard_normal((M, N + 1)))
        common, own = q[:, 0], q[:, 1:]
        v = math.sqrt(target) * common[None, :] + math.sqrt(1.0 - target) * own.T
        return v
    vs = []
    tries = 0
    while len(vs) < N:
        tries += 1
        if tries > max_tries:
            raise ValueError(f"cannot place {N} directions in R^{M} with separation {sep}")
        cand = rng.standard_normal(M)
        cand /= np.linalg.norm(cand)
        if all(abs(cand @ v) <= target for v in vs):
            vs.append(cand)
    return np.array(vs)


def synth_speakers(N: int, P: int, T: int, M: int, sep: float = 0.5, noise: float = 0.3,
                   seed: int = 0) -> SpeakerDataset:
    """Utterances ``x_t = envelope_t * v_j + noise * eps_t`` for speaker ``j``.

    The envelope is a random positive sinusoid per utterance.
    """
    if N < 2 or P < 2:
        raise ValueError("need N >= 2 speakers and P >= 2 utterances")
    rng = np.random.default_rng(seed)
    v = voice_directions(N, M, sep, rng)
    t = np.arange(T)
    freq = rng.uniform(0.1, 0.5, size=(N, P, 1))
    phase = rng.uniform(0, 2 * np.pi, size=(N, P, 1))
    envelope = 1.0 + 0.5 * np.sin(freq * t + phase)  # [N, P, T]
    x = envelope[..., None] * v[:, None, None, :]
    x = x + noise * rng.standard_normal((N, P, T, M))
    meta = {"source": "synthetic-speakers", "seed": seed, "sep": sep, "noise": noise,
            "transforms": [], "directions": v.tolist()}
    return SpeakerDataset(x, np.arange(N), meta)


def speaker_batch(ds: SpeakerDataset, n_speakers: int, n_utts: int, rng: np.random.Generator):
    """Sample ``n_speakers x n_utts`` utterances: returns ``[N, P, T, M]`` and speaker ids."""
    if n_speakers < 2:
        raise ValueError("a verification batch needs at least 2 speakers")
    n_speakers = min(n_speakers, ds.n_speakers)
    n_utts = min(n_utts, ds.n_utterances)
    spk = np.sort(rng.choice(ds.n_speakers, size=n_speakers, replace=False))
    utt = np.stack([np.sort(rng.choice(ds.n_utterances, size=n_utts, replace=False)) for _ in spk])
    return ds.utterances[spk[:, None], utt], ds.speaker_ids[spk]


def toy_sequences(n: int, T: int = 8, M: int = 4, margin: float = 1.0, noise: float = 0.5,
                  seed: int = 0, split: str = "train") -> SequenceDataset:
    """Two-class sequences whose per-step mean is ``+-margin * v`` for a fixed unit ``v``.

    The time-averaged input separates the classes linearly.
    """
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(M)
    v /= np.linalg.norm(v)
    labels = rng.integers(0, 2, size=n)
    sign = (2 * labels - 1).astype(np.float64)
    x = margin * sign[:, None, None] * v[None, None, :] + noise * rng.standard_normal((n, T, M))
    return SequenceDataset(x, labels.astype(np.int64), split,
                           {"source": "toy", "seed": seed, "transforms": []})
