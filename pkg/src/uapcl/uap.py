"""Universal adversarial perturbations against a frozen detector.

A single perturbation ``p`` (shared by every input) is grown by signed
gradient steps that lower the cross-entropy toward the spoof label, then
clipped back into the L-infinity ball of radius ``epsilon``.  Feature-level
perturbations live on the ``T x D`` features; waveform-level ones live on the
raw crop and reach the detector through the frozen extractor.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import FeatureMatrix, FrozenExtractor, extract_tensor
from .errors import ShapeError, ValidationError
from .serialize import load_tensor, save_tensor

log = logging.getLogger(__name__)

LEVELS = ("feature", "waveform")


@dataclass
class UapGenConfig:
    epsilon: float = 0.03
    alpha: float = 0.0001
    sigma: float = 0.8
    max_iters: int = 2000
    level: str = "feature"
    seed: int = 0
    batch_size: int = 32
    check_every: int = 10

    def __post_init__(self):
        if self.alpha <= 0 or self.epsilon <= 0:
            raise ValidationError("alpha and epsilon must be positive")
        if not 0 <= self.sigma <= 1:
            raise ValidationError("sigma must lie in [0, 1]")
        if self.max_iters < 1 or self.check_every < 1 or self.batch_size < 1:
            raise ValidationError("max_iters, check_every and batch_size must be >= 1")
        if self.level not in LEVELS:
            raise ValidationError(f"level must be one of {LEVELS}")


@dataclass
class UapRecord:
    perturbation: np.ndarray
    stage_index: int
    level: str
    epsilon: float
    achieved_fooling_rate: float
    iterations_used: int
    converged: bool = True
    history: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.perturbation = np.asarray(self.perturbation, dtype=np.float64)
        if np.max(np.abs(self.perturbation), initial=0.0) > self.epsilon:
            raise ValidationError("perturbation exceeds its epsilon budget")
        if not 0.0 <= self.achieved_fooling_rate <= 1.0:
            raise ValidationError("fooling rate outside [0, 1]")

    def meta(self) -> dict:
        return {
            "stage": self.stage_index,
            "level": self.level,
            "epsilon": self.epsilon,
            "fooling_rate": self.achieved_fooling_rate,
            "iterations": self.iterations_used,
            "converged": self.converged,
            "file": f"uap_{self.stage_index}_{self.level}.uft",
        }


def project_linf(p, epsilon: float):
    if epsilon <= 0:
        raise ValidationError("epsilon must be positive")
    return np.clip(p, -epsilon, epsilon)


def apply_uap(x, p):
    x = np.asarray(x, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if x.shape[-p.ndim:] != p.shape:
        raise ShapeError(f"perturbation shape {p.shape} does not match input {x.shape}")
    return x + p


def _stack_frames(reals):
    if isinstance(reals, np.ndarray):
        return reals
    if not reals:
        raise ValidationError("need at least one bona fide sample")
    if any(r.label != 0 for r in reals):
        raise ValidationError("UAP targets bona fide samples only")
    return np.stack([r.frames if isinstance(r, FeatureMatrix) else r.samples for r in reals])


def _spoof_rate(model, x):
    logits = model.logits(ad.Tensor._wrap(x)).data
    return float(np.mean(logits > 0))


def fooling_rate(model, reals, p) -> float:
    """Fraction of bona fide inputs the model labels spoof once ``p`` is added."""
    x = _stack_frames(reals)
    if len(x) == 0:
        raise ValidationError("fooling rate needs a non-empty bona fide set")
    return _spoof_rate(model, apply_uap(x, p))


class _WaveformModel:
    """Raw crop -> frozen extractor -> detector, as one differentiable map."""

    def __init__(self, model, extractor):
        self.model = model
        self.extractor = extractor

    def logits(self, x):
        return self.model.logits(extract_tensor(x, self.extractor))


def _full_ce(model, x, p):
    logits = model.logits(ad.Tensor._wrap(x + p))
    return ad.bce_with_logits(logits, np.ones(logits.shape)).item()


def _run(model, x, cfg: UapGenConfig, stage_index: int, track_ce: bool) -> UapRecord:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 23]))
    p = np.zeros(x.shape[1:])
    n = len(x)
    history = {"linf": [], "ce": []}
    rate = None
    used = 0
    with ad.Tape():
        for it in range(cfg.max_iters):
            if it % cfg.check_every == 0:
                rate = _spoof_rate(model, x + p)
                if rate >= cfg.sigma:
                    break
            idx = rng.choice(n, size=min(cfg.batch_size, n), replace=False)
            pt = ad.Tensor(p, requires_grad=True)
            logits = model.logits(ad.Tensor._wrap(x[idx]) + pt)
            loss = ad.bce_with_logits(logits, np.ones(logits.shape))
            ad.backward(loss)
            # descend CE toward the spoof label; np.sign(0) == 0 leaves flat coordinates alone
            p = project_linf(p - cfg.alpha * np.sign(pt.grad), cfg.epsilon)
            used = it + 1
            rate = None
            history["linf"].append(float(np.max(np.abs(p))))
            if track_ce:
                history["ce"].append(_full_ce(model, x, p))
    if rate is None:
        rate = _spoof_rate(model, x + p)
    converged = rate >= cfg.sigma
    if not converged:
        msg = (f"UAP ({cfg.level}, stage {stage_index}) reached fooling rate {rate:.3f} "
               f"< sigma {cfg.sigma} after {used} iterations")
        warnings.warn(msg, RuntimeWarning, stacklevel=3)
        log.warning(msg)
    return UapRecord(p, stage_index, cfg.level, cfg.epsilon, rate, used, converged, history)


def generate_uap(model, reals, cfg: UapGenConfig, stage_index: int = 0, track_ce: bool = False) -> UapRecord:
    """Feature-level UAP for ``model`` over bona fide feature blocks.

    ``model`` is anything with a ``logits(Tensor) -> Tensor`` method, normally
    a :class:`~uapcl.classifier.ClassifierSnapshot`.  Its parameters are only
    read.  Returns a record flagged ``converged=False`` (with a warning) if
    the fooling rate is still below ``sigma`` after ``max_iters`` steps.
    """
    x = _stack_frames(reals)
    return _run(model, x, cfg, stage_index, track_ce)


def generate_uap_waveform(model, extractor: FrozenExtractor, real_clips, cfg: UapGenConfig,
                          stage_index: int = 0, track_ce: bool = False) -> UapRecord:
    """Waveform-level UAP; clips must already be normalized and cropped."""
    if cfg.level != "waveform":
        raise ValidationError("generate_uap_waveform needs cfg.level == 'waveform'")
    x = _stack_frames(real_clips)
    return _run(_WaveformModel(model, extractor), x, cfg, stage_index, track_ce)


# ------------------------------------------------------------------ pool

@dataclass
class UapPool:
    records: list = field(default_factory=list)
    manifest: dict = field(default_factory=dict)
    directory: Path | None = None

    def __len__(self):
        return len(self.records)

    def eligible(self, stage_t, level=None):
        return [r for r in self.records if r.stage_index < stage_t and (level is None or r.level == level)]

    def save(self, directory=None):
        directory = Path(directory or self.directory)
        directory.mkdir(parents=True, exist_ok=True)
        entries = []
        for r in self.records:
            meta = r.meta()
            save_tensor(directory / meta["file"], r.perturbation)
            entries.append(meta)
        doc = dict(self.manifest, entries=entries)
        (directory / "manifest.json").write_text(json.dumps(doc, sort_keys=True, indent=1))
        self.directory = directory

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        doc = json.loads((directory / "manifest.json").read_text())
        records = []
        for e in doc.pop("entries"):
            records.append(UapRecord(load_tensor(directory / e["file"]), e["stage"], e["level"],
                                     e["epsilon"], e["fooling_rate"], e["iterations"], e["converged"]))
        return cls(records, doc, directory)


def pool_append(pool: UapPool, record: UapRecord, allow_multiple: bool = False) -> UapPool:
    if not allow_multiple and any(r.stage_index == record.stage_index and r.level == record.level
                                  for r in pool.records):
        raise ValidationError(f"pool already holds a {record.level} UAP for stage {record.stage_index}")
    pool.records.append(record)
    pool.records.sort(key=lambda r: r.stage_index)
    if pool.directory is not None:
        pool.save()
    return pool


def pool_sample(pool: UapPool, stage_t: int, rng: np.random.Generator, level: str | None = None) -> UapRecord:
    """Uniform draw among records made before ``stage_t``."""
    candidates = pool.eligible(stage_t, level)
    if not candidates:
        raise ValidationError(f"no UAP in the pool from a stage before {stage_t}")
    return candidates[int(rng.integers(len(candidates)))]
