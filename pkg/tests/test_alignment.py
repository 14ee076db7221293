import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slotground import autodiff as ad
from slotground.alignment import feature_affinity, labels_affinity, sa_loss, slot_similarity, total_loss
from slotground.autodiff import Tensor, numerical_grad, rel_error


def test_one_hot_attention_gives_label_affinity():
    labels = np.array([0, 0, 1, 2, 1])
    attn = np.eye(3)[labels]
    m = slot_similarity(Tensor(attn)).data
    assert np.array_equal(m, labels_affinity(labels))
    assert sa_loss(Tensor(m), labels_affinity(labels)).item() <= 1e-12


def test_uniform_attention_is_all_ones():
    m = slot_similarity(Tensor(np.full((4, 3), 1 / 3))).data
    assert np.allclose(m, 1.0, atol=1e-12)


def test_similarity_matches_loop():
    rng = np.random.default_rng(0)
    a = rng.dirichlet(np.ones(3), size=5)
    m = slot_similarity(Tensor(a)).data
    for i in range(5):
        for j in range(5):
            ref = 2 * a[i] @ a[j] / (np.linalg.norm(a[i]) * np.linalg.norm(a[j])) - 1
            assert abs(m[i, j] - ref) <= 1e-12


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6), st.integers(1, 9))
def test_slot_similarity_invariants(seed, K, N):
    rng = np.random.default_rng(seed)
    attn = ad.softmax_axis(Tensor(rng.normal(0, 3, size=(2, N, K))), -1)
    m = slot_similarity(attn).data
    assert np.allclose(m, np.swapaxes(m, -1, -2), atol=0)
    assert np.all(np.abs(np.diagonal(m, axis1=-2, axis2=-1) - 1.0) <= 1e-6)
    assert m.min() >= -1.0 - 1e-12 and m.max() <= 1.0 + 1e-12
    tgt = labels_affinity(rng.integers(0, 3, size=(2, N)))
    loss = sa_loss(Tensor(m), tgt).item()
    assert 0.0 <= loss <= 2.0
    assert sa_loss(Tensor(m), m).item() <= 1e-12


def test_sa_loss_opposite_is_two():
    t = labels_affinity(np.array([[0, 1, 1]]))
    assert sa_loss(Tensor(-t), t).item() == pytest.approx(2.0, abs=1e-12)


def test_sa_loss_zero_target_frame_contributes_zero_cosine():
    m = Tensor(np.ones((1, 2, 2)))
    assert sa_loss(m, np.zeros((1, 2, 2))).item() == 1.0


def test_sa_loss_shape_mismatch():
    with pytest.raises(ad.DimensionError):
        sa_loss(Tensor(np.ones((2, 3, 3))), np.ones((2, 4, 4)))


def test_mask_diagonal():
    t = labels_affinity(np.array([[0, 1]]))
    m = Tensor(np.array([[[0.3, -1.0], [-1.0, -0.2]]]))
    assert sa_loss(m, t, mask_diagonal=True).item() == pytest.approx(0.0, abs=1e-12)
    assert sa_loss(m, t).item() > 0.1


def test_feature_affinity_examples():
    f = np.array([[1.0, 0.0], [2.0, 0.0], [0.0, 3.0]])
    m = feature_affinity(f).data
    assert np.allclose(m, [[1, 1, 0], [1, 1, 0], [0, 0, 1]], atol=1e-15)
    with pytest.raises(ad.NumericError):
        feature_affinity(np.array([[np.inf, 0.0]]))


def test_sa_gradient_through_attention():
    rng = np.random.default_rng(3)
    logits = Tensor(rng.normal(size=(2, 5, 3)), requires_grad=True)
    tgt = labels_affinity(rng.integers(0, 3, size=(2, 5)))

    def loss():
        return sa_loss(slot_similarity(ad.softmax_axis(logits, -1)), tgt)

    loss().backward()
    assert rel_error(logits.grad, numerical_grad(loss, logits), floor=1e-6) <= 1e-6


def test_total_loss():
    ce, sa = Tensor(1.5), Tensor(0.4)
    assert total_loss(ce, sa, 0.1).item() == pytest.approx(1.54)
    assert total_loss(ce, sa, 0.0) is ce
    assert total_loss(ce, None, 0.1) is ce
    with pytest.raises(ValueError):
        total_loss(ce, sa, -0.1)
