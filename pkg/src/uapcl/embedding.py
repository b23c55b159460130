"""Pooled-embedding projection and the pseudo-spoof proximity metric."""

from __future__ import annotations

import csv
import logging
import warnings
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import BONA_FIDE, extract_array
from .errors import ValidationError

log = logging.getLogger(__name__)


def top_components(x: np.ndarray, k: int = 2, tol: float = 1e-9, max_iter: int = 10000) -> tuple[np.ndarray, np.ndarray]:
    """Leading ``k`` eigenpairs of the covariance of ``x`` by power iteration
    with deflation.  Returns ``(eigenvalues[k], vectors[D, k])``.

    Each vector's sign is fixed so its largest-magnitude entry is positive.
    Components with no remaining variance come back as zero vectors.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or len(x) < 3:
        raise ValidationError("PCA needs a 2-D array with at least 3 rows")
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / len(x)
    d = cov.shape[0]
    vals = np.zeros(k)
    vecs = np.zeros((d, k))
    scale = max(np.trace(cov), 0.0)
    for j in range(min(k, d)):
        if scale == 0 or np.trace(cov) <= tol * scale:
            break
        # deterministic start: the diagonal direction of largest remaining variance plus a tilt
        v = np.eye(d)[np.argmax(np.diag(cov))] + 1e-3 * np.arange(1, d + 1) / d
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(max_iter):
            w = cov @ v
            nrm = np.linalg.norm(w)
            if nrm == 0:
                break
            w /= nrm
            done = min(np.linalg.norm(w - v), np.linalg.norm(w + v)) < tol
            v = w
            lam = float(v @ cov @ v)
            if done:
                break
        if lam <= tol * scale:
            break
        v = v * np.sign(v[np.argmax(np.abs(v))])
        vals[j], vecs[:, j] = lam, v
        cov = cov - lam * np.outer(v, v)
    return vals, vecs


def project(x: np.ndarray, k: int = 2, tol: float = 1e-9) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    vals, vecs = top_components(x, k, tol)
    if not np.any(vals):
        warnings.warn("embeddings have zero variance; projections are all zero", RuntimeWarning, stacklevel=2)
        return np.zeros((len(x), k))
    return (x - x.mean(axis=0)) @ vecs


def embed(model, features: np.ndarray, batch: int = 1024) -> np.ndarray:
    out = [model.embed(ad.Tensor._wrap(features[s:s + batch])).data for s in range(0, len(features), batch)]
    return np.concatenate(out)


def write_projection(path, ids, domains, labels, clusters, pcs) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "domain", "label", "cluster", "pc1", "pc2"])
        for row in zip(ids, domains, labels, clusters, pcs[:, 0], pcs[:, 1]):
            w.writerow(list(row[:4]) + [repr(float(row[4])), repr(float(row[5]))])
    return path


def embedding_dump(model, split, out_path, pseudo: np.ndarray | None = None, pseudo_tag="pseudo") -> Path:
    """Project pooled embeddings of ``split`` (and optional pseudo-spoof
    features) onto their top two principal components and write a CSV."""
    feats = split.features
    n = len(feats)
    ids = [f"{split.domain_id}-{i}" for i in range(n)]
    domains = [split.domain_id] * n
    labels = list(split.labels)
    clusters = list(split.cluster_ids)
    if pseudo is not None:
        feats = np.concatenate([feats, pseudo])
        ids += [f"{pseudo_tag}-{i}" for i in range(len(pseudo))]
        domains += [pseudo_tag] * len(pseudo)
        labels += [1] * len(pseudo)
        clusters += [-2] * len(pseudo)
    pcs = project(embed(model, feats))
    return write_projection(out_path, ids, domains, [int(v) for v in labels], [int(c) for c in clusters], pcs)


def pseudo_features(split, record, extractor, crop_len) -> np.ndarray:
    """Bona fide features of ``split`` with ``record`` applied at its own level."""
    reals = split.labels == BONA_FIDE
    if record.level == "feature":
        return split.features[reals] + record.perturbation
    if split.clips is None:
        raise ValidationError("waveform UAP needs the split's raw clips")
    clips = split.clips[reals]
    crops = np.zeros((len(clips), crop_len))
    m = min(crop_len, clips.shape[1])
    crops[:, :m] = clips[:, :m]
    return extract_array(crops + record.perturbation, extractor)


def centroid_distances(bona: np.ndarray, pseudo: np.ndarray, spoof_by_cluster: dict) -> dict:
    """Mean distance from the pseudo-spoof centroid to each true-spoof
    cluster centroid, raw and divided by the same mean taken from the bona
    fide centroid (so 1.0 means the pseudo-spoofs moved nowhere useful)."""
    cb, cp = bona.mean(axis=0), pseudo.mean(axis=0)
    cents = [spoof_by_cluster[k].mean(axis=0) for k in sorted(spoof_by_cluster)]
    d_pseudo = float(np.mean([np.linalg.norm(cp - c) for c in cents]))
    d_bona = float(np.mean([np.linalg.norm(cb - c) for c in cents]))
    return {"pseudo_to_spoof": d_pseudo, "bona_to_spoof": d_bona,
            "normalized": d_pseudo / d_bona if d_bona > 0 else float("inf")}


def centroid_report(model, split, record, extractor, crop_len) -> dict:
    """Centroid metric in ``model``'s embedding space for one eval split."""
    emb = embed(model, split.features)
    pemb = embed(model, pseudo_features(split, record, extractor, crop_len))
    spoof = {int(c): emb[split.cluster_ids == c] for c in np.unique(split.cluster_ids[split.labels != BONA_FIDE])}
    out = centroid_distances(emb[split.labels == BONA_FIDE], pemb, spoof)
    out.update({"domain": int(split.domain_id), "level": record.level, "uap_stage": record.stage_index})
    return out
