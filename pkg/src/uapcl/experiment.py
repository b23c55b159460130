"""Experiment configuration and the multi-stage runners.

A run directory looks like::

    <run>/config.json
    <run>/stage_<t>/model.ufckpt  metrics.json  audit.log
    <run>/pool/manifest.json      uap_<stage>_<level>.uft
    <run>/embedding.json          (UAP strategies)
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .classifier import ClassifierConfig, config_digest, init_params, load_checkpoint, save_checkpoint
from .continual import AuditedStore, StageConfig, StageData, TrainerState, finetune_stage
from .data import DomainSpec, SplitArrays, SynthConfig, materialize
from .errors import ValidationError
from .metrics import split_eer
from .uap import UapGenConfig, UapPool

log = logging.getLogger(__name__)


@dataclass
class ExperimentConfig:
    name: str = "desk"
    seed: int = 0
    synth: SynthConfig = field(default_factory=SynthConfig)
    domains: list = field(default_factory=list)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    stage: StageConfig = field(default_factory=StageConfig)
    uap: UapGenConfig = field(default_factory=UapGenConfig)
    order: list = field(default_factory=lambda: [1, 2, 3])
    strategy: str = "sft"
    n_crops: int = 3
    data_dir: str | None = None

    def to_dict(self):
        return {
            "name": self.name,
            "seed": self.seed,
            "synth": asdict(self.synth),
            "domains": [d.to_dict() for d in self.domains],
            "classifier": asdict(self.classifier),
            "stage": self.stage.to_dict(),
            "uap": asdict(self.uap),
            "order": list(self.order),
            "strategy": self.strategy,
            "n_crops": self.n_crops,
            "data_dir": self.data_dir,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        return cls(
            name=d.get("name", "desk"),
            seed=d.get("seed", 0),
            synth=SynthConfig(**d.get("synth", {})),
            domains=[DomainSpec.from_dict(x) for x in d.get("domains", [])],
            classifier=ClassifierConfig(**d.get("classifier", {})),
            stage=StageConfig.from_dict(d.get("stage", {})),
            uap=UapGenConfig(**d.get("uap", {})),
            order=list(d.get("order", [1, 2, 3])),
            strategy=d.get("strategy", "sft"),
            n_crops=d.get("n_crops", 3),
            data_dir=d.get("data_dir"),
        )

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=1))

    def digest(self):
        return config_digest(self.to_dict())


# ------------------------------------------------------------------ default synthetic stream

def default_domains(seed: int = 0, n_train=(400, 400), n_dev=(150, 150), n_eval=(200, 200), drift=0.05,
                    spoof_shift=2.0, turn_deg=120.0):
    """Three domains sharing one bona fide centre (up to ``drift``).

    Domain ``t``'s spoof clusters leave the centre along a direction in a
    fixed plane of coefficient space, rotated ``turn_deg`` degrees per
    domain, so a detector fitted on one attack alone leans away from the
    previous one.  Each domain has two attack clusters split along a
    private axis.
    """
    D = 8
    bona = np.zeros(D)
    bona[0] = 4.0
    counts = {"train": list(n_train), "dev": list(n_dev), "eval": list(n_eval)}
    domains = []
    for t in range(3):
        ang = np.deg2rad(turn_deg * t)
        u = np.zeros(D)
        u[1], u[2] = np.cos(ang), np.sin(ang)
        w = np.zeros(D)
        w[3 + t] = 1.0
        clusters = [{"mean": list(bona + spoof_shift * u + 0.6 * w), "scale": 0.35},
                    {"mean": list(bona + spoof_shift * u - 0.6 * w), "scale": 0.35}]
        domains.append(DomainSpec(domain_id=t + 1, bona_fide_mean=list(bona), bona_fide_scale=0.25,
                                  attack_clusters=clusters, counts=counts, seed=1000 * seed + t + 1,
                                  bona_fide_drift=drift))
    return domains


# Desk-scale settings.  The learning rate is far above the large-model
# value because the detector is tiny and trains for few steps; epsilon is
# raised until feature-level UAPs reach the fooling threshold on the
# synthetic margins (0.05 missed it on 2 of 5 seeds, 0.08 on none).
DESK_LR = 6e-3
DESK_BATCH = 32
DESK_EPSILON = 0.08
DESK_ALPHA = DESK_EPSILON / 50
DESK_MODEL_DIM = 16


def desk_experiment(seed: int = 0, strategy: str = "sft", order=(1, 2, 3), **overrides) -> ExperimentConfig:
    """The desk-scale configuration used by the scripts and acceptance suite.

    The frozen world (atoms, extractor) is the same for every seed; the seed
    drives the sampled clips, the initialization and all training streams.
    """
    stage = StageConfig(lr=DESK_LR, lam=5.0, epochs=10, batch_size=DESK_BATCH, strategy=strategy, seed=seed)
    uap = UapGenConfig(epsilon=DESK_EPSILON, alpha=DESK_ALPHA, sigma=0.8, max_iters=2000, seed=seed)
    clf = ClassifierConfig(model_dim=DESK_MODEL_DIM, ff_dim=2 * DESK_MODEL_DIM, seed=seed)
    cfg = ExperimentConfig(name=f"desk-{strategy}-s{seed}", seed=seed, synth=SynthConfig(),
                           domains=default_domains(seed), classifier=clf,
                           stage=stage, uap=uap, order=list(order), strategy=strategy)
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg


# ------------------------------------------------------------------ running

def ensure_data(cfg: ExperimentConfig, fallback_dir) -> Path:
    if cfg.data_dir:
        root = Path(cfg.data_dir)
        if not (root / "extractor.uft").exists():
            materialize(cfg.domains, cfg.synth, root)
        return root
    return materialize(cfg.domains, cfg.synth, Path(fallback_dir))


def _stage_strategy(strategy, t):
    if strategy in ("base", "joint") or t == 1:
        return "base" if strategy in ("sft", "base", "joint") else strategy
    return strategy


def evaluate_all(snapshot, store: AuditedStore, domains, extractor, crop_len, n_crops) -> dict:
    out = {}
    for d in domains:
        split = store.split(d, "eval", with_clips=True)
        out[str(d)] = 100.0 * split_eer(snapshot, split, extractor, crop_len, n_crops)
    return out


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=1))


def run_sequence(cfg: ExperimentConfig, out_dir, order=None, strategy=None):
    """Train stage by stage over ``order`` and evaluate every domain after each."""
    order = list(order or cfg.order)
    strategy = (strategy or cfg.strategy).replace("-", "_")
    if not order or len(set(order)) != len(order):
        raise ValidationError("sequence order must be non-empty with distinct domains")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = replace(cfg, order=order, strategy=strategy)
    cfg.save(out / "config.json")
    store = AuditedStore(ensure_data(cfg, out / "data"))
    extractor = store.extractor()
    all_domains = sorted(d.domain_id for d in cfg.domains) or store.domains()
    missing = [d for d in order if d not in all_domains]
    if missing:
        raise ValidationError(f"order names unknown domains {missing}")

    state = TrainerState(init_params(cfg.classifier), pool=UapPool(manifest={"experiment": cfg.name,
                                                                            "seed": cfg.seed}))
    state.pool.directory = out / "pool"
    for t, dom in enumerate(order, start=1):
        state.stage = t
        sdir = out / f"stage_{t}"
        sdir.mkdir(exist_ok=True)
        stage_cfg = replace(cfg.stage, strategy=_stage_strategy(strategy, t), seed=cfg.seed)
        need_clips = stage_cfg.uap_level == "waveform"
        store.begin(t, "train")
        if t > 1 and stage_cfg.uses_uap:
            store.note("pool", out / "pool" / "manifest.json")
            store.note("checkpoint", out / f"stage_{t - 1}" / "model.ufckpt")
        data = StageData(store.split(dom, "train", with_clips=need_clips), store.split(dom, "dev"), dom)
        try:
            res = finetune_stage(state, data, stage_cfg, extractor, cfg.synth.crop_len, cfg.uap,
                                 make_uap=stage_cfg.uses_uap and t < len(order), n_crops=cfg.n_crops)
        except ValidationError as exc:
            raise ValidationError(f"stage {t} (domain {dom}): {exc}") from exc
        save_checkpoint(res.params, sdir / "model.ufckpt", stage=t)
        state.teacher = res.snapshot

        store.begin(t, "eval")
        eers = evaluate_all(res.snapshot, store, all_domains, extractor, cfg.synth.crop_len, cfg.n_crops)
        metrics = {
            "stage": t,
            "trained_domain": dom,
            "strategy": strategy,
            "stage_strategy": stage_cfg.strategy,
            "eer": eers,
            "average": float(np.mean(list(eers.values()))),
            "dev_eer": [100.0 * e for e in res.dev_eers],
            "best_epoch": res.best_epoch,
            "uap": None if res.uap is None else res.uap.meta(),
            "final_loss": res.loss_log[-1] if res.loss_log else None,
        }
        _write_json(sdir / "metrics.json", metrics)
        store.write(sdir / "audit.log", t)
        log.info("stage %d (domain %d, %s): %s", t, dom, stage_cfg.strategy, eers)

    if strategy in ("uap_feature", "uap_waveform") and state.pool.records:
        from .embedding import centroid_report
        store.begin(len(order), "eval")
        first = store.split(order[0], "eval", with_clips=True)
        emb = centroid_report(state.teacher, first, state.pool.records[0], extractor, cfg.synth.crop_len)
        _write_json(out / "embedding.json", emb)

    from .report import build_report
    return build_report(out)


def train_base(cfg: ExperimentConfig, domain: int, out_dir):
    """Base training on one domain: a one-stage sequence."""
    return run_sequence(cfg, out_dir, order=[domain], strategy="base")


def evaluate_checkpoint(ckpt, data_dir, domain: int, split: str = "eval", n_crops: int = 3) -> dict:
    """EER (in %) of a saved checkpoint on one domain split."""
    snap = load_checkpoint(ckpt)
    store = AuditedStore(data_dir)
    extractor = store.extractor()
    crop_len = json.loads((Path(data_dir) / "synth.json").read_text())["crop_len"]
    data = store.split(domain, split, with_clips=True)
    eer = 100.0 * split_eer(snap, data, extractor, crop_len, n_crops)
    return {"checkpoint": str(ckpt), "domain": domain, "split": split, "stage": snap.stage, "eer": eer}


def joint_train(cfg: ExperimentConfig, out_dir, domains=None):
    """Single base-training run over the union of all training splits."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    domains = list(domains or cfg.order)
    if not domains:
        raise ValidationError("joint training needs at least one domain")
    cfg = replace(cfg, order=domains, strategy="joint")
    cfg.save(out / "config.json")
    store = AuditedStore(ensure_data(cfg, out / "data"))
    extractor = store.extractor()
    store.begin(1, "train")
    train = union([store.split(d, "train") for d in domains])
    dev = union([store.split(d, "dev") for d in domains])
    state = TrainerState(init_params(cfg.classifier), stage=1)
    res = finetune_stage(state, StageData(train, dev, domains[0]), replace(cfg.stage, strategy="base", seed=cfg.seed),
                         extractor, cfg.synth.crop_len, n_crops=cfg.n_crops)
    sdir = out / "stage_1"
    sdir.mkdir(exist_ok=True)
    save_checkpoint(res.params, sdir / "model.ufckpt", stage=1)
    store.begin(1, "eval")
    all_domains = sorted(d.domain_id for d in cfg.domains)
    eers = evaluate_all(res.snapshot, store, all_domains, extractor, cfg.synth.crop_len, cfg.n_crops)
    _write_json(sdir / "metrics.json", {
        "stage": 1, "trained_domain": domains if len(domains) > 1 else domains[0], "strategy": "joint",
        "stage_strategy": "base", "eer": eers, "average": float(np.mean(list(eers.values()))),
        "dev_eer": [100.0 * e for e in res.dev_eers], "best_epoch": res.best_epoch, "uap": None,
        "final_loss": res.loss_log[-1] if res.loss_log else None,
    })
    store.write(sdir / "audit.log", 1)
    from .report import build_report
    return build_report(out)


def union(splits) -> SplitArrays:
    if len(splits) == 1:
        return splits[0]
    clips = None
    if all(s.clips is not None for s in splits):
        clips = np.concatenate([s.clips for s in splits])
    return SplitArrays(np.concatenate([s.features for s in splits]), np.concatenate([s.labels for s in splits]),
                       np.concatenate([s.cluster_ids for s in splits]), splits[0].domain_id, clips)
