"""Stage-wise training: base, sequential fine-tuning, UAP rehearsal, joint.

A stage sees only its own domain's training and dev data.  What survives
between stages is the previous model (as a frozen teacher) and the pool of
perturbations generated from earlier models.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .classifier import ClassifierParams, ClassifierSnapshot, forward, head_logit
from .data import BONA_FIDE, SPOOF, FeatureMatrix, FrozenExtractor, SplitArrays, extract_array, load_clips, \
    load_features, stack
from .errors import ShapeError, ValidationError
from .metrics import eer_from_scores, score_split
from .uap import UapGenConfig, UapPool, UapRecord, generate_uap, generate_uap_waveform, pool_append, pool_sample

log = logging.getLogger(__name__)

STRATEGIES = ("base", "sft", "uap_feature", "uap_waveform", "joint")


@dataclass
class StageConfig:
    lr: float = 5e-5
    lam: float = 5.0
    epochs: int = 10
    batch_size: int = 128
    strategy: str = "base"
    distill_on: str = "embedding"
    uap_per_iteration: str = "one"
    pseudo: bool = True
    pseudo_in_ce: bool = True
    balance_with_pseudo: bool = False
    select_on_dev: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.lam < 0 or self.epochs < 1 or self.batch_size < 2:
            raise ValidationError("need lr > 0, lambda >= 0, epochs >= 1, batch_size >= 2")
        if self.strategy not in STRATEGIES:
            raise ValidationError(f"unknown strategy {self.strategy!r}")
        if self.distill_on not in ("embedding", "logit"):
            raise ValidationError("distill_on must be 'embedding' or 'logit'")
        if self.uap_per_iteration not in ("one", "one_per_stage"):
            raise ValidationError("uap_per_iteration must be 'one' or 'one_per_stage'")

    @property
    def uses_uap(self):
        return self.strategy in ("uap_feature", "uap_waveform")

    @property
    def uap_level(self):
        return {"uap_feature": "feature", "uap_waveform": "waveform"}.get(self.strategy)

    def to_dict(self):
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        return cls(**d)


class Adam:
    def __init__(self, params: Sequence[ad.Tensor], lr: float, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self):
        ad.zero_grads(self.params)

    def step(self):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainerState:
    params: ClassifierParams
    teacher: ClassifierSnapshot | None = None
    pool: UapPool = field(default_factory=UapPool)
    stage: int = 1
    optimizer: Adam | None = None


# ------------------------------------------------------------------ audited data access

class AuditedStore:
    """File-backed domain data that logs every read with the current stage."""

    def __init__(self, root):
        self.root = Path(root)
        self.entries: list[dict] = []
        self.stage = 0
        self.phase = "setup"
        self._extractor = None

    def begin(self, stage: int, phase: str):
        self.stage = stage
        self.phase = phase

    def note(self, kind: str, path, domain=None, split=None):
        self.entries.append({"stage": self.stage, "phase": self.phase, "kind": kind, "domain": domain,
                             "split": split, "path": str(path)})

    def _path(self, domain, split, ext):
        return self.root / f"domain_{domain}" / f"{split}.{ext}"

    def split(self, domain: int, split: str, with_clips: bool = False) -> SplitArrays:
        fpath = self._path(domain, split, "uffeat")
        self.note("data", fpath, domain, split)
        feats = load_features(fpath)
        clips = None
        if with_clips:
            cpath = self._path(domain, split, "ufclip")
            self.note("data", cpath, domain, split)
            clips = load_clips(cpath)
        return stack(feats, clips)

    def extractor(self) -> FrozenExtractor:
        if self._extractor is None:
            path = self.root / "extractor.uft"
            self.note("extractor", path)
            self._extractor = FrozenExtractor.load(path)
        return self._extractor

    def domains(self) -> list[int]:
        return sorted(int(p.name.split("_")[1]) for p in self.root.glob("domain_*"))

    def stage_entries(self, stage):
        return [e for e in self.entries if e["stage"] == stage]

    def write(self, path, stage):
        with open(path, "w") as fh:
            for e in self.stage_entries(stage):
                fh.write(json.dumps(e, sort_keys=True) + "\n")


@dataclass
class StageData:
    train: SplitArrays
    dev: SplitArrays
    domain_id: int


# ------------------------------------------------------------------ pseudo batch and losses

def build_pseudo_batch(reals_t: Sequence[FeatureMatrix], p: UapRecord) -> list[FeatureMatrix]:
    """Bona fide features plus a feature-level UAP, relabelled spoof."""
    if p.level != "feature":
        raise ValidationError("waveform UAPs are applied before extraction, not to features")
    out = []
    for r in reals_t:
        if r.label != BONA_FIDE:
            raise ValidationError("pseudo samples are built from bona fide features only")
        if r.frames.shape != p.perturbation.shape:
            raise ShapeError(f"UAP shape {p.perturbation.shape} vs frames {r.frames.shape}")
        out.append(FeatureMatrix(r.frames + p.perturbation, SPOOF, pseudo_domain_tag(p.stage_index)))
    return out


def pseudo_domain_tag(stage_index):
    return f"pseudo({stage_index})"


def _pseudo_arrays(real_feats, real_clips, record: UapRecord, extractor, crop_len):
    if record.level == "feature":
        if real_feats.shape[1:] != record.perturbation.shape:
            raise ShapeError(f"UAP shape {record.perturbation.shape} vs frames {real_feats.shape[1:]}")
        return real_feats + record.perturbation
    crops = np.zeros((len(real_clips), crop_len))
    n = min(crop_len, real_clips.shape[1])
    crops[:, :n] = real_clips[:, :n]
    return extract_array(crops + record.perturbation, extractor)


def _tap(logit, pooled, distill_on):
    return ad.reshape(logit, (logit.shape[0], 1)) if distill_on == "logit" else pooled


def _teacher_tap(teacher, x, distill_on):
    logit, pooled = forward(teacher.params, x, "eval")
    return (logit.data[:, None] if distill_on == "logit" else pooled.data)


def distill_loss(student: ClassifierParams, teacher: ClassifierSnapshot | None, x, distill_on="embedding"):
    """(1/N) * sum of squared tap differences, teacher side held constant."""
    if teacher is None:
        raise ValidationError("distillation needs a teacher snapshot")
    x = np.asarray(x.features if isinstance(x, SplitArrays) else x, dtype=np.float64)
    if len(x) == 0:
        raise ValidationError("distillation needs a non-empty batch")
    logit, pooled = forward(student, x, "eval")
    return ad.mse(_tap(logit, pooled, distill_on), ad.Tensor._wrap(_teacher_tap(teacher, x, distill_on)))


def _as_array(samples):
    if isinstance(samples, np.ndarray):
        return samples
    return np.stack([s.frames for s in samples])


def loss_lp(student, teacher, pseudo, distill_on="embedding"):
    return distill_loss(student, teacher, _as_array(pseudo), distill_on)


def loss_lr(student, teacher, reals_t, distill_on="embedding"):
    return distill_loss(student, teacher, _as_array(reals_t), distill_on)


def total_loss(ce, lr_loss, lp_loss, lam):
    """``ce + lam * (lr_loss + lp_loss)`` plus the separate terms for logging."""
    if lam < 0:
        raise ValidationError("lambda must be non-negative")
    terms = {"ce": ce.item(), "lr": _value(lr_loss), "lp": _value(lp_loss)}
    if lam == 0 or (lr_loss is None and lp_loss is None):
        return ce, terms
    reg = lr_loss if lp_loss is None else (lp_loss if lr_loss is None else lr_loss + lp_loss)
    return ce + reg * lam, terms


def _value(t):
    return 0.0 if t is None else t.item()


# ------------------------------------------------------------------ sampling

def _streams(seed, stage):
    names = ("batch", "dropout", "pool", "uap")
    return {n: np.random.default_rng(np.random.SeedSequence([seed, stage, i])) for i, n in enumerate(names)}


def balanced_indices(labels: np.ndarray, n_draws: int, rng: np.random.Generator, real_share=0.5) -> np.ndarray:
    """Weighted sampling with replacement; each class drawn with the given share."""
    is_real = labels == BONA_FIDE
    n_real, n_fake = int(is_real.sum()), int((~is_real).sum())
    if n_real == 0 or n_fake == 0:
        raise ValidationError("training split needs both classes")
    w = np.where(is_real, real_share / n_real, (1.0 - real_share) / n_fake)
    return rng.choice(len(labels), size=n_draws, replace=True, p=w / w.sum())


# ------------------------------------------------------------------ one stage

@dataclass
class StageResult:
    params: ClassifierParams
    snapshot: ClassifierSnapshot
    dev_eers: list
    best_epoch: int
    uap: UapRecord | None = None
    loss_log: list = field(default_factory=list)


def finetune_stage(state: TrainerState, data: StageData, cfg: StageConfig, extractor: FrozenExtractor | None = None,
                   crop_len: int | None = None, uap_cfg: UapGenConfig | None = None, make_uap: bool = False,
                   n_crops: int = 3) -> StageResult:
    """Train one stage in place on ``state.params`` and return the selected model."""
    if len(data.train) == 0 or len(data.dev) == 0:
        raise ValidationError("stage data is empty")
    if set(np.unique(data.train.labels)) != {0, 1}:
        raise ValidationError("training split needs both classes")
    use_pseudo = cfg.uses_uap and cfg.pseudo and state.stage > 1
    use_distill = cfg.uses_uap and state.stage > 1 and cfg.lam > 0
    if use_pseudo and not state.pool.eligible(state.stage, cfg.uap_level):
        raise ValidationError(f"stage {state.stage}: no {cfg.uap_level} UAP in the pool")
    if use_distill and state.teacher is None:
        raise ValidationError(f"stage {state.stage}: distillation needs a teacher")
    if cfg.uap_level == "waveform" and (use_pseudo or make_uap):
        if data.train.clips is None or extractor is None or crop_len is None:
            raise ValidationError("waveform rehearsal needs raw clips, the extractor and crop_len")

    rng = _streams(cfg.seed, state.stage)
    params = state.params
    opt = Adam(params.values(), cfg.lr)
    state.optimizer = opt
    X, y = data.train.features, data.train.labels
    clips = data.train.clips
    n = len(y)
    real_share = 2.0 / 3.0 if (use_pseudo and cfg.balance_with_pseudo) else 0.5
    if crop_len is None:
        crop_len = clips.shape[1] if clips is not None else 0

    best = ((np.inf, np.inf), -1, None)
    dev_eers = []
    loss_log = []
    with ad.Tape():
        for epoch in range(cfg.epochs):
            order = balanced_indices(y, n, rng["batch"], real_share)
            for s in range(0, n, cfg.batch_size):
                idx = order[s:s + cfg.batch_size]
                xb, yb = X[idx], y[idx].astype(np.float64)
                real_rows = np.flatnonzero(yb == BONA_FIDE)
                parts, labels = [xb], [yb]
                pseudo_rows = []
                if use_pseudo and len(real_rows):
                    src = real_rows
                    if cfg.balance_with_pseudo:
                        src = rng["pool"].permutation(real_rows)[: max(1, len(real_rows) // 2)]
                    if cfg.uap_per_iteration == "one":
                        records = [pool_sample(state.pool, state.stage, rng["pool"], cfg.uap_level)]
                    else:
                        records = _one_per_stage(state.pool, state.stage, cfg.uap_level, rng["pool"])
                    offset = len(yb)
                    for rec in records:
                        px = _pseudo_arrays(xb[src], None if clips is None else clips[idx][src], rec,
                                            extractor, crop_len)
                        parts.append(px)
                        labels.append(np.ones(len(px)))
                        pseudo_rows.append(np.arange(offset, offset + len(px)))
                        offset += len(px)
                inputs = np.concatenate(parts)
                all_labels = np.concatenate(labels)
                logit, pooled = forward(params, inputs, "train", rng["dropout"])
                if pseudo_rows and not cfg.pseudo_in_ce:
                    ce = ad.bce_with_logits(ad.take(logit, np.arange(len(yb))), yb)
                else:
                    ce = ad.bce_with_logits(logit, all_labels)
                lr_loss = lp_loss = None
                if use_distill:
                    # the logit tap skips dropout so it is comparable with the eval-mode teacher
                    tap = pooled if cfg.distill_on == "embedding" else _tap(head_logit(params, pooled), pooled, "logit")
                    if len(real_rows):
                        lr_loss = ad.mse(ad.take(tap, real_rows),
                                         ad.Tensor._wrap(_teacher_tap(state.teacher, xb[real_rows], cfg.distill_on)))
                    if pseudo_rows:
                        rows = np.concatenate(pseudo_rows)
                        lp_loss = ad.mse(ad.take(tap, rows),
                                         ad.Tensor._wrap(_teacher_tap(state.teacher, inputs[rows], cfg.distill_on)))
                loss, terms = total_loss(ce, lr_loss, lp_loss, cfg.lam if use_distill else 0.0)
                opt.zero_grad()
                ad.backward(loss)
                opt.step()
                loss_log.append(terms)

            snap = ClassifierSnapshot.of(params, state.stage)
            if cfg.select_on_dev:
                key = _dev_key(snap, data.dev, extractor, crop_len, n_crops)
            else:
                key = (0.0, 0.0)
            dev_eers.append(key[0])
            if key < best[0] or not cfg.select_on_dev:
                best = (key, epoch, snap)

    chosen = best[2]
    for k, t in params.tensors.items():
        t.data = np.array(chosen.params[k].data)
    snapshot = ClassifierSnapshot.of(params, state.stage)

    record = None
    if make_uap and cfg.uses_uap:
        ucfg = replace(uap_cfg or UapGenConfig(), level=cfg.uap_level,
                       seed=int(rng["uap"].integers(2 ** 31)))
        reals = data.train.features[data.train.labels == BONA_FIDE]
        if cfg.uap_level == "feature":
            record = generate_uap(snapshot, reals, ucfg, stage_index=state.stage)
        else:
            real_clips = data.train.clips[data.train.labels == BONA_FIDE]
            crops = np.zeros((len(real_clips), crop_len))
            m = min(crop_len, real_clips.shape[1])
            crops[:, :m] = real_clips[:, :m]
            record = generate_uap_waveform(snapshot, extractor, crops, ucfg, stage_index=state.stage)
        pool_append(state.pool, record)
    return StageResult(params, snapshot, dev_eers, best[1], record, loss_log)


def _dev_key(model, dev, extractor, crop_len, n_crops):
    """(EER, mean BCE) on the dev split; the loss breaks ties between epochs
    whose ranking is equally good, which is common once dev EER reaches 0."""
    scores = score_split(model, dev, extractor, crop_len, n_crops)
    real = dev.labels == BONA_FIDE
    eer = eer_from_scores(scores[real], scores[~real])
    z = -scores  # back to logits
    ce = float(np.mean(np.logaddexp(0.0, z) - dev.labels * z))
    return eer, ce


def _one_per_stage(pool, stage, level, rng):
    stages = sorted({r.stage_index for r in pool.eligible(stage, level)})
    out = []
    for s in stages:
        cands = [r for r in pool.eligible(stage, level) if r.stage_index == s]
        out.append(cands[int(rng.integers(len(cands)))])
    return out
