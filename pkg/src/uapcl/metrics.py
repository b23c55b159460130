"""Equal error rate and utterance scoring.

Scores follow the anti-spoofing convention: higher means more bona fide, and
a detector's score is the negated logit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .data import BONA_FIDE, RawClip, crop_array, extract_array, normalize_sample
from .errors import ValidationError


@dataclass
class ScoreRecord:
    utterance_id: str
    domain_id: int
    label: int
    score: float


def _crossing(n_rej: np.ndarray, n_acc: np.ndarray, n_bona: int, n_spoof: int) -> float:
    """Crossing point of FRR = n_rej / n_bona and FAR = n_acc / n_spoof.

    Rates are compared through integer cross products so that equal gaps are
    recognised exactly; float subtraction would break ties arbitrarily.
    """
    # n_bona * n_spoof * (FRR - FAR), non-decreasing along the sweep
    diff = n_rej.astype(np.int64) * n_spoof - n_acc.astype(np.int64) * n_bona
    frr = n_rej / n_bona
    far = n_acc / n_spoof
    i = int(np.argmax(diff >= 0))
    if diff[i] == 0:
        return float(frr[i])
    mid_here = 0.5 * (frr[i] + far[i])
    if i == 0:
        return float(mid_here)
    mid_prev = 0.5 * (frr[i - 1] + far[i - 1])
    gap_here, gap_prev = diff[i], -diff[i - 1]
    if gap_here < gap_prev:
        return float(mid_here)
    if gap_prev < gap_here:
        return float(mid_prev)
    return float(0.5 * (mid_here + mid_prev))


def eer_from_scores(bona: np.ndarray, spoof: np.ndarray) -> float:
    """EER in [0, 1] from bona fide and spoof score arrays.

    Thresholds sweep the distinct scores plus +inf.  At threshold ``th`` a
    bona fide score below ``th`` is a false rejection and a spoof score at or
    above ``th`` a false acceptance.  If the two rates never meet exactly,
    the crossing is taken between the last step where FAR > FRR and the first
    where FRR > FAR: the midpoint ``(FAR + FRR) / 2`` of whichever step has
    the smaller gap, or the mean of both midpoints when the gaps tie.
    """
    bona = np.sort(np.asarray(bona, dtype=np.float64))
    spoof = np.sort(np.asarray(spoof, dtype=np.float64))
    if bona.size == 0 or spoof.size == 0:
        raise ValidationError("EER needs at least one bona fide and one spoof score")
    thresholds = np.append(np.unique(np.concatenate([bona, spoof])), np.inf)
    n_rej = np.searchsorted(bona, thresholds, side="left")
    n_acc = spoof.size - np.searchsorted(spoof, thresholds, side="left")
    return _crossing(n_rej, n_acc, bona.size, spoof.size)


def compute_eer(records: Sequence[ScoreRecord]) -> float:
    bona = [r.score for r in records if r.label == BONA_FIDE]
    spoof = [r.score for r in records if r.label != BONA_FIDE]
    if not bona or not spoof:
        raise ValidationError("EER needs records of both labels")
    return eer_from_scores(np.array(bona), np.array(spoof))


# ------------------------------------------------------------------ scoring

def score_features(model, features: np.ndarray, batch: int = 1024) -> np.ndarray:
    """Negated logits for a stack of feature blocks."""
    out = []
    for s in range(0, len(features), batch):
        out.append(-model.logits(ad.Tensor._wrap(features[s:s + batch])).data)
    return np.concatenate(out) if out else np.zeros(0)


def score_clips(model, clips: np.ndarray, extractor, crop_len: int, n_crops: int = 3) -> np.ndarray:
    """Mean crop score for each normalized clip in an ``[N, L]`` array."""
    crops = np.stack([crop_array(c, crop_len, n_crops) for c in clips])  # [N, n_crops, crop_len]
    feats = extract_array(crops.reshape(-1, crop_len), extractor)
    return score_features(model, feats).reshape(len(clips), n_crops).mean(axis=1)


def score_utterance(model, clip: RawClip, extractor, crop_len: int, n_crops: int = 3) -> float:
    x = normalize_sample(clip).samples
    return float(score_clips(model, x[None, :], extractor, crop_len, n_crops)[0])


def score_split(model, split, extractor, crop_len: int, n_crops: int = 3) -> np.ndarray:
    """Scores for a stacked split.

    A clip no longer than ``crop_len`` yields ``n_crops`` identical offset-0
    crops, whose features are exactly the stored ones, so those are reused.
    """
    if split.clips is None or split.clips.shape[1] <= crop_len:
        return score_features(model, split.features)
    return score_clips(model, split.clips, extractor, crop_len, n_crops)


def split_eer(model, split, extractor, crop_len: int, n_crops: int = 3) -> float:
    scores = score_split(model, split, extractor, crop_len, n_crops)
    return eer_from_scores(scores[split.labels == BONA_FIDE], scores[split.labels != BONA_FIDE])

