import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import adjusted_rand_score

from slotground.synth import (
    DomainShift,
    SynthConfigError,
    SynthSpec,
    ari,
    ari_single,
    gen_dataset,
    gen_video,
    partition_grid,
    slot_assignment,
)


def test_spec_validation():
    with pytest.raises(SynthConfigError):
        SynthSpec(n_entities=70)
    with pytest.raises(SynthConfigError):
        SynthSpec(min_window=5, max_window=3)
    with pytest.raises(SynthConfigError):
        SynthSpec(n_event_classes=8)
    with pytest.raises(SynthConfigError):
        SynthSpec(separation=0)


def test_grid_and_duration():
    assert SynthSpec(N=64).grid == (8, 8)
    assert SynthSpec(N=16).grid == (4, 4)
    assert SynthSpec(N=6).grid == (2, 3)
    assert SynthSpec(T=20, frame_interval=0.5).duration == 10.0


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 8))
def test_partition_blocks_are_rectangles(seed, parts):
    lab = partition_grid(np.random.default_rng(seed), (4, 4), parts).reshape(4, 4)
    assert sorted(np.unique(lab)) == list(range(parts))
    for k in range(parts):
        rows, cols = np.nonzero(lab == k)
        box = lab[rows.min() : rows.max() + 1, cols.min() : cols.max() + 1]
        assert np.all(box == k)


def test_video_structure():
    spec = SynthSpec(seed=3, N=16)
    v = gen_video(spec)
    assert v.frames.shape == (20, 16, 16)
    assert v.planted_labels.shape == (20, 16)
    s, e = v.gt_window
    inside = (v.times >= s) & (v.times <= e)
    assert 3 <= inside.sum() <= 10
    for t in range(20):
        assert (0 in v.planted_labels[t]) == inside[t]
        assert set(v.planted_labels[t]) >= {1, 2, 3}
    assert v.query == (v.entity_words[0],)
    assert v.entity_words[0] in ("person", "dog", "car", "ball")
    assert not set(v.entity_words[1:]) & {"person", "dog", "car", "ball"}
    assert np.array_equal(v.gt_affinity[0], np.where(v.planted_labels[0][:, None] == v.planted_labels[0][None], 1.0, -1.0))


def test_generation_is_deterministic():
    a, b = gen_video(SynthSpec(seed=7)), gen_video(SynthSpec(seed=7))
    assert a.frames.tobytes() == b.frames.tobytes() and a.gt_window == b.gt_window
    assert gen_video(SynthSpec(seed=8)).frames.tobytes() != a.frames.tobytes()


def test_token_noise_matches_separation():
    spec = SynthSpec(seed=1, N=64, separation=4.0)
    v = gen_video(spec)
    from slotground.synth import class_centroids

    cents = class_centroids(spec)
    classes = [["person", "dog", "car", "ball", "chair", "cup", "tree", "bike"].index(w) for w in v.entity_words]
    resid = v.frames - cents[np.array(classes)[v.planted_labels]]
    assert abs(resid.std() - 0.25) < 0.01


def test_window_lengths_cover_range():
    lengths = set()
    for s in range(200):
        v = gen_video(SynthSpec(seed=s, N=4))
        lengths.add(round((v.gt_window[1] - v.gt_window[0]) / 0.5) + 1)
    assert lengths == set(range(3, 11))


def test_domain_shift_is_rotation_plus_bias():
    sh = DomainShift(rotation_seed=5, bias=1.0)
    R = sh.matrix(16)
    assert np.allclose(R @ R.T, np.eye(16), atol=1e-12)
    x = np.random.default_rng(0).normal(size=(3, 4, 16))
    y = sh.apply(x)
    assert np.allclose(np.linalg.norm(y - 1.0, axis=-1), np.linalg.norm(x, axis=-1), atol=1e-12)


def test_dataset_splits():
    train, ev = gen_dataset(SynthSpec(seed=0, N=4), 5, 3)
    assert len(train) == 5 and len(ev) == 3
    assert len({v.sample_id for v in train + ev}) == 8
    _, ood = gen_dataset(SynthSpec(seed=0, N=4), 5, 3, ood=True)
    # same videos before the shift
    sh = DomainShift()
    assert np.allclose(ood[0].frames, sh.apply(ev[0].frames))


def test_ari_matches_sklearn():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(2, 30))
        a = rng.integers(0, 4, n)
        b = rng.integers(0, 4, n)
        assert abs(ari_single(a, b) - adjusted_rand_score(a, b)) <= 1e-12


def test_ari_examples():
    assert ari_single([0, 0, 1, 1], [5, 5, 2, 2]) == 1.0
    assert ari_single([0, 0, 0], [0, 0, 0]) == 1.0
    assert ari_single([0, 1, 2], [0, 1, 2]) == 1.0
    assert ari_single([0, 0, 0], [0, 1, 2]) == 0.0
    lab = np.array([[0, 0, 1, 1], [0, 1, 1, 1]])
    assert ari(lab, lab + 3) == 1.0
    with pytest.raises(ValueError):
        ari_single([0, 1], [0, 1, 2])


def test_slot_assignment_ties_lowest():
    assert slot_assignment(np.array([[0.5, 0.5], [0.2, 0.8]])).tolist() == [0, 1]
