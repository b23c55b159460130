"""Synthetic raw clips, the frozen framing extractor, and feature files.

Clips are periodic patterns built from a small set of fixed zero-mean atoms
plus white noise.  A domain's bona fide and spoof classes differ in the atom
coefficients, so class identity survives per-sample normalization as a
direction in coefficient space.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .errors import CountMismatchError, ShapeError, ValidationError
from .serialize import load_tensor, read_container, save_tensor, write_container

BONA_FIDE = 0
SPOOF = 1
SPLITS = ("train", "dev", "eval")


@dataclass
class RawClip:
    samples: np.ndarray
    label: int
    domain_id: int
    cluster_id: int = -1

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size < 1:
            raise ValidationError("clip must be a non-empty 1-D sequence")
        if self.label not in (0, 1):
            raise ValidationError(f"label must be 0 or 1, got {self.label}")


@dataclass
class FeatureMatrix:
    frames: np.ndarray
    label: int
    domain_id: int
    cluster_id: int = -1

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2:
            raise ShapeError(f"feature block must be T x D, got {self.frames.shape}")
        if self.label not in (0, 1):
            raise ValidationError(f"label must be 0 or 1, got {self.label}")


@dataclass
class AttackCluster:
    mean: list
    scale: float


@dataclass
class DomainSpec:
    """One synthetic domain.  Means are coefficients over the shared atoms.

    JSON schema (all keys required except ``bona_fide_drift``)::

        {"domain_id": 1, "bona_fide_mean": [D floats], "bona_fide_scale": 0.1,
         "bona_fide_drift": 0.0,
         "attack_clusters": [{"mean": [D floats], "scale": 0.2}, ...],
         "counts": {"train": [n_real, n_fake], "dev": [...], "eval": [...]},
         "seed": 7}
    """

    domain_id: int
    bona_fide_mean: list
    bona_fide_scale: float
    attack_clusters: list
    counts: dict
    seed: int
    bona_fide_drift: float = 0.0

    def __post_init__(self):
        self.attack_clusters = [c if isinstance(c, AttackCluster) else AttackCluster(**c)
                                for c in self.attack_clusters]
        self.counts = {k: tuple(int(n) for n in v) for k, v in self.counts.items()}
        if not self.attack_clusters:
            raise ValidationError("a domain needs at least one attack cluster")
        if self.bona_fide_scale <= 0 or any(c.scale <= 0 for c in self.attack_clusters):
            raise ValidationError("cluster scales must be positive")
        for split, (n_real, n_fake) in self.counts.items():
            if n_real <= 0 or n_fake <= 0:
                raise ValidationError(f"counts for split {split!r} must be positive")

    def to_dict(self):
        d = asdict(self)
        d["counts"] = {k: list(v) for k, v in self.counts.items()}
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class SynthConfig:
    """Geometry shared by every domain of one experiment."""

    clip_len: int = 256
    crop_len: int = 256
    frame_width: int = 16
    hop: int = 8
    feat_dim: int = 8
    period: int = 16
    noise_std: float = 0.3
    world_seed: int = 0

    @property
    def n_frames(self):
        return (self.crop_len - self.frame_width) // self.hop + 1


# ------------------------------------------------------------------ preprocessing

MIN_STD = 1e-8


def normalize_sample(clip: RawClip) -> RawClip:
    return RawClip(normalize_rows(clip.samples), clip.label, clip.domain_id, clip.cluster_id)


def normalize_rows(x: np.ndarray) -> np.ndarray:
    """Zero mean, unit population std along the last axis.

    Rows with std below ``MIN_STD`` count as constant and map to zeros; dividing
    their rounding residue by the clamp would otherwise leave a tiny nonzero
    constant and break idempotence.
    """
    centred = x - x.mean(axis=-1, keepdims=True)
    std = centred.std(axis=-1, keepdims=True)
    flat = std < MIN_STD
    return np.where(flat, 0.0, centred / np.where(flat, 1.0, std))


def crop_starts(length: int, crop_len: int, n_crops: int) -> list[int]:
    if crop_len < 1 or n_crops < 1:
        raise ValidationError("crop_len and n_crops must be >= 1")
    slack = length - crop_len
    if slack <= 0 or n_crops == 1:
        return [0] * n_crops
    return [i * slack // (n_crops - 1) for i in range(n_crops)]


def crop_array(x: np.ndarray, crop_len: int, n_crops: int) -> np.ndarray:
    """Crops of a 1-D signal as an ``[n_crops, crop_len]`` array (zero right-padded)."""
    out = np.zeros((n_crops, crop_len))
    for i, s in enumerate(crop_starts(x.size, crop_len, n_crops)):
        seg = x[s:s + crop_len]
        out[i, :seg.size] = seg
    return out


def crop_segments(clip: RawClip, crop_len: int, n_crops: int) -> list[RawClip]:
    return [RawClip(row, clip.label, clip.domain_id, clip.cluster_id)
            for row in crop_array(clip.samples, crop_len, n_crops)]


# ------------------------------------------------------------------ extractor

@dataclass
class FrozenExtractor:
    projection: np.ndarray  # [W, D]
    frame_width: int
    hop: int

    def __post_init__(self):
        self.projection = np.array(self.projection, dtype=np.float64)
        self.projection.setflags(write=False)
        if self.projection.shape[0] != self.frame_width:
            raise ShapeError(f"projection rows {self.projection.shape[0]} != frame width {self.frame_width}")

    @property
    def feat_dim(self):
        return self.projection.shape[1]

    def checksum(self) -> str:
        return hashlib.sha256(self.projection.tobytes()).hexdigest()

    def n_frames(self, length):
        return (length - self.frame_width) // self.hop + 1

    def save(self, path):
        save_tensor(Path(path), self.projection)
        Path(path).with_suffix(".json").write_text(
            json.dumps({"frame_width": self.frame_width, "hop": self.hop}))

    @classmethod
    def load(cls, path):
        meta = json.loads(Path(path).with_suffix(".json").read_text())
        return cls(load_tensor(path), meta["frame_width"], meta["hop"])


def make_extractor(cfg: SynthConfig) -> FrozenExtractor:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.world_seed, 101]))
    proj = rng.uniform(-1.0, 1.0, size=(cfg.frame_width, cfg.feat_dim))
    # unit L1 columns: a raw perturbation bounded by eps moves any feature by at most eps
    proj /= np.abs(proj).sum(axis=0, keepdims=True)
    return FrozenExtractor(proj, cfg.frame_width, cfg.hop)


def _frame_index(length, width, hop):
    n = (length - width) // hop + 1
    return np.arange(n)[:, None] * hop + np.arange(width)[None, :]


def extract_array(x: np.ndarray, ex: FrozenExtractor) -> np.ndarray:
    """Features for ``[..., L]`` raw samples, as ``[..., T, D]``."""
    if x.shape[-1] < ex.frame_width:
        raise ValidationError(f"clip length {x.shape[-1]} shorter than frame width {ex.frame_width}")
    windows = x[..., _frame_index(x.shape[-1], ex.frame_width, ex.hop)]
    return np.tanh(windows @ ex.projection)


def extract_tensor(x: ad.Tensor, ex: FrozenExtractor) -> ad.Tensor:
    """Differentiable extraction; gradients reach ``x`` but never the projection."""
    windows = ad.frame(x, ex.frame_width, ex.hop)
    return ad.tanh(ad.matmul(windows, ad.Tensor._wrap(ex.projection)))


def frozen_extract(clip: RawClip, ex: FrozenExtractor) -> FeatureMatrix:
    return FeatureMatrix(extract_array(clip.samples, ex), clip.label, clip.domain_id, clip.cluster_id)


# ------------------------------------------------------------------ synthesis

def make_atoms(cfg: SynthConfig) -> np.ndarray:
    """``[period, D]`` orthonormal zero-mean atoms shared by all domains."""
    if cfg.period <= cfg.feat_dim:
        raise ValidationError("period must exceed feat_dim to fit D zero-mean atoms")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.world_seed, 202]))
    raw = rng.standard_normal((cfg.period, cfg.feat_dim))
    raw -= raw.mean(axis=0, keepdims=True)
    q, _ = np.linalg.qr(raw)
    return q


def drift_direction(cfg: SynthConfig) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.world_seed, 303]))
    v = rng.standard_normal(cfg.feat_dim)
    return v / np.linalg.norm(v)


def _render(coefs, atoms, length, noise, rng):
    patterns = coefs @ atoms.T  # [N, period]
    reps = -(-length // atoms.shape[0])
    clips = np.tile(patterns, (1, reps))[:, :length]
    return clips + noise * rng.standard_normal(clips.shape)


def synth_domain(spec: DomainSpec, split: str, cfg: SynthConfig | None = None) -> list[RawClip]:
    cfg = cfg or SynthConfig()
    if split not in spec.counts:
        raise ValidationError(f"domain {spec.domain_id} has no counts for split {split!r}")
    n_real, n_fake = spec.counts[split]
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, SPLITS.index(split) + 1]))
    atoms = make_atoms(cfg)
    D = cfg.feat_dim

    bona_mean = np.asarray(spec.bona_fide_mean, dtype=np.float64)
    if bona_mean.shape != (D,):
        raise ShapeError(f"bona_fide_mean must have {D} entries")
    bona_mean = bona_mean + spec.bona_fide_drift * spec.domain_id * drift_direction(cfg)
    real_coefs = bona_mean + spec.bona_fide_scale * rng.standard_normal((n_real, D))

    k = len(spec.attack_clusters)
    cluster_ids = np.arange(n_fake) % k
    means = np.array([c.mean for c in spec.attack_clusters], dtype=np.float64)
    scales = np.array([c.scale for c in spec.attack_clusters])
    if means.shape != (k, D):
        raise ShapeError(f"attack cluster means must have {D} entries")
    fake_coefs = means[cluster_ids] + scales[cluster_ids, None] * rng.standard_normal((n_fake, D))

    reals = _render(real_coefs, atoms, cfg.clip_len, cfg.noise_std, rng)
    fakes = _render(fake_coefs, atoms, cfg.clip_len, cfg.noise_std, rng)
    clips = [RawClip(x, BONA_FIDE, spec.domain_id, -1) for x in reals]
    clips += [RawClip(x, SPOOF, spec.domain_id, int(c)) for x, c in zip(fakes, cluster_ids)]
    return clips


# ------------------------------------------------------------------ file I/O

def save_features(batch: Sequence[FeatureMatrix], path) -> None:
    T, D = batch[0].frames.shape if batch else (0, 0)
    for fm in batch:
        if fm.frames.shape != (T, D):
            raise ShapeError(f"mixed feature shapes {fm.frames.shape} vs {(T, D)}")
    header = {
        "format": "uffeat-1",
        "count": len(batch),
        "T": T,
        "D": D,
        "labels": [int(f.label) for f in batch],
        "domain_ids": [f.domain_id for f in batch],
        "cluster_ids": [int(f.cluster_id) for f in batch],
    }
    write_container(path, header, [f.frames for f in batch])


def load_features(path) -> list[FeatureMatrix]:
    header, records = read_container(path)
    if header.get("count") != len(records):
        raise CountMismatchError(f"manifest count {header.get('count')} but {len(records)} tensor records")
    T, D = header["T"], header["D"]
    out = []
    for i, frames in enumerate(records):
        if frames.shape != (T, D):
            raise ShapeError(f"record {i} has shape {frames.shape}, manifest says {(T, D)}")
        out.append(FeatureMatrix(frames, header["labels"][i], header["domain_ids"][i],
                                 header.get("cluster_ids", [-1] * len(records))[i]))
    return out


def save_clips(clips: Sequence[RawClip], path) -> None:
    header = {
        "format": "ufclip-1",
        "count": len(clips),
        "labels": [int(c.label) for c in clips],
        "domain_ids": [int(c.domain_id) for c in clips],
        "cluster_ids": [int(c.cluster_id) for c in clips],
    }
    write_container(path, header, [c.samples for c in clips])


def load_clips(path) -> list[RawClip]:
    header, records = read_container(path)
    if header.get("count") != len(records):
        raise CountMismatchError(f"manifest count {header.get('count')} but {len(records)} tensor records")
    return [RawClip(r, header["labels"][i], header["domain_ids"][i], header["cluster_ids"][i])
            for i, r in enumerate(records)]


# ------------------------------------------------------------------ stacked views

@dataclass
class SplitArrays:
    """One domain split as stacked arrays; what training and scoring consume."""

    features: np.ndarray  # [N, T, D]
    labels: np.ndarray  # [N]
    cluster_ids: np.ndarray  # [N]
    domain_id: int
    clips: np.ndarray | None = None  # [N, L] normalized, uncropped
    extra: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.labels)

    @property
    def reals(self):
        return self.features[self.labels == BONA_FIDE]

    def subset(self, mask):
        return SplitArrays(self.features[mask], self.labels[mask], self.cluster_ids[mask], self.domain_id,
                           None if self.clips is None else self.clips[mask])


def train_features(clips: np.ndarray, ex: FrozenExtractor, crop_len: int) -> np.ndarray:
    """Single fixed-length crop at offset 0, the training-time view of a clip."""
    cropped = np.zeros((clips.shape[0], crop_len))
    n = min(crop_len, clips.shape[1])
    cropped[:, :n] = clips[:, :n]
    return extract_array(cropped, ex)


def stack(feats: Sequence[FeatureMatrix], clips: Sequence[RawClip] | None = None) -> SplitArrays:
    if not feats:
        raise ValidationError("empty split")
    arr = np.stack([f.frames for f in feats])
    labels = np.array([f.label for f in feats], dtype=np.int64)
    cl = np.array([f.cluster_id for f in feats], dtype=np.int64)
    raw = None
    if clips is not None:
        raw = normalize_rows(np.stack([c.samples for c in clips]))
    return SplitArrays(arr, labels, cl, int(feats[0].domain_id), raw)


def materialize(domains: Sequence[DomainSpec], cfg: SynthConfig, out_dir) -> Path:
    """Write extractor, clips and features for every domain and split."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ex = make_extractor(cfg)
    ex.save(out / "extractor.uft")
    (out / "synth.json").write_text(json.dumps(asdict(cfg), sort_keys=True, indent=1))
    for spec in domains:
        ddir = out / f"domain_{spec.domain_id}"
        ddir.mkdir(exist_ok=True)
        (ddir / "spec.json").write_text(json.dumps(spec.to_dict(), sort_keys=True, indent=1))
        for split in SPLITS:
            if split not in spec.counts:
                continue
            clips = synth_domain(spec, split, cfg)
            save_clips(clips, ddir / f"{split}.ufclip")
            normed = normalize_rows(np.stack([c.samples for c in clips]))
            feats = train_features(normed, ex, cfg.crop_len)
            save_features([FeatureMatrix(f, c.label, c.domain_id, c.cluster_id)
                           for f, c in zip(feats, clips)], ddir / f"{split}.uffeat")
    return out
