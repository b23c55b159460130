import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from uapcl.classifier import ClassifierConfig, ClassifierSnapshot, init_params
from uapcl.data import FrozenExtractor, RawClip, crop_segments, frozen_extract, normalize_sample
from uapcl.errors import ValidationError
from uapcl.metrics import ScoreRecord, compute_eer, eer_from_scores, score_clips, score_utterance

from oracles import eer_bruteforce


def records(bona, spoof):
    out = [ScoreRecord(f"b{i}", 1, 0, s) for i, s in enumerate(bona)]
    return out + [ScoreRecord(f"s{i}", 1, 1, s) for i, s in enumerate(spoof)]


def test_eer_examples():
    assert compute_eer(records([0.9, 0.8], [0.1, 0.2])) == 0.0
    assert compute_eer(records([0.1], [0.9])) == 1.0
    assert abs(compute_eer(records([0.8, 0.6, 0.4], [0.7, 0.3, 0.2])) - 1 / 3) <= 1e-12


def test_eer_equal_gaps_average_both_midpoints():
    # gaps on both sides of the crossing are 2/3; float subtraction would split them
    assert eer_from_scores([2.0], [3.0, 1.0, 2.0]) == 0.5
    assert eer_bruteforce([2.0], [3.0, 1.0, 2.0]) == 0.5


def test_eer_needs_both_labels():
    with pytest.raises(ValidationError):
        compute_eer(records([0.1, 0.2], []))


def _random_set(rng):
    n_b, n_s = rng.integers(1, 101, size=2)
    kind = rng.integers(3)
    if kind == 0:  # continuous, few ties
        return rng.normal(0.5, 1, n_b), rng.normal(-0.5, 1, n_s)
    if kind == 1:  # coarse grid, many ties
        return rng.integers(0, 6, n_b).astype(float), rng.integers(0, 6, n_s).astype(float)
    return rng.normal(0, 1, n_b), rng.normal(0, 1, n_s)  # overlapping


def test_eer_matches_bruteforce_on_1000_sets():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(1000):
        bona, spoof = _random_set(rng)
        worst = max(worst, abs(eer_from_scores(bona, spoof) - eer_bruteforce(bona, spoof)))
    assert worst <= 1e-12


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(-20, 20), min_size=1, max_size=30),
       st.lists(st.integers(-20, 20), min_size=1, max_size=30))
def test_eer_invariant_under_increasing_maps(bona, spoof):
    b, s = np.array(bona, float), np.array(spoof, float)
    base = eer_from_scores(b, s)
    for f in (lambda v: 3 * v + 7, np.exp, lambda v: np.tanh(v / 10), lambda v: v ** 3):
        assert eer_from_scores(f(b), f(s)) == base
    assert 0.0 <= base <= 1.0


# ---------------------------------------------------------------- utterance scoring

@pytest.fixture(scope="module")
def scorer():
    cfg = ClassifierConfig(feat_dim=4, seed=3)
    rng = np.random.default_rng(0)
    ex = FrozenExtractor(rng.uniform(-1, 1, (8, 4)), 8, 4)
    return ClassifierSnapshot.of(init_params(cfg), 1), ex


def _single(model, ex, samples):
    return -model.logits(frozen_extract(RawClip(samples, 0, 1), ex).frames).item()


def test_score_one_crop(scorer):
    model, ex = scorer
    clip = RawClip(np.random.default_rng(1).normal(size=40), 0, 1)
    x = normalize_sample(clip).samples
    assert abs(score_utterance(model, clip, ex, 32, 1) - _single(model, ex, x[:32])) <= 1e-12


def test_score_short_clip_pads(scorer):
    model, ex = scorer
    clip = RawClip(np.random.default_rng(2).normal(size=20), 0, 1)
    padded = np.zeros(32)
    padded[:20] = normalize_sample(clip).samples
    single = _single(model, ex, padded)
    assert abs(score_utterance(model, clip, ex, 32, 3) - single) <= 1e-12


def test_score_is_mean_of_crops(scorer):
    model, ex = scorer
    clip = RawClip(np.random.default_rng(3).normal(size=70), 1, 1)
    crops = crop_segments(normalize_sample(clip), 32, 3)
    want = sum(_single(model, ex, c.samples) for c in crops) / 3
    got = score_utterance(model, clip, ex, 32, 3)
    assert abs(got - want) <= 1e-12
    assert got == score_utterance(model, clip, ex, 32, 3)


def test_score_clips_batch(scorer):
    model, ex = scorer
    x = np.random.default_rng(4).normal(size=(3, 50))
    batch = score_clips(model, x, ex, 32, 3)
    # rows are taken as already normalized
    for i in range(3):
        crops = crop_segments(RawClip(x[i], 0, 1), 32, 3)
        want = sum(_single(model, ex, c.samples) for c in crops) / 3
        assert abs(batch[i] - want) <= 1e-12
