import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from simva.sampler import global_alignment, sample_classes, scatter_logits, top_m
from simva.similarity import SingularityError

TEXT = np.eye(4)


def test_eval_mode_is_plain_top_m():
    voc = sample_classes(np.array([0.9, 0.1, 0.5, 0.3]), TEXT, M=2, training=False)
    assert voc.indices == [0, 2]
    assert not voc.noise_applied
    np.testing.assert_array_equal(voc.restricted_embeddings, TEXT[[0, 2]])


def test_training_forces_gt_in():
    # with noise < 0.5, class 3 (0.3) cannot overtake 0 (0.9) but it is forced in
    scores = np.array([0.9, 0.1, 0.5, 0.3])
    for seed in range(50):
        voc = sample_classes(scores, TEXT, M=2, training=True, gt=3, rng_seed=seed, noise_high=0.0)
        assert voc.indices == [0, 3]
        assert voc.gt_position == 1


def test_gt_replaces_weaker_selected_class():
    scores = np.array([0.9, 0.1, 0.5, 0.3])
    voc = sample_classes(scores, TEXT, M=2, training=True, gt=3, rng_seed=0, noise_high=1e-9)
    assert voc.indices == [0, 3]


def test_dominant_class_survives_noise():
    for seed in range(200):
        voc = sample_classes(np.array([1.0, 0.0, 0.0, 0.0]), TEXT, M=1, training=True, gt=0, rng_seed=seed)
        assert voc.indices == [0]


def test_clamp_to_vocabulary():
    text = np.zeros((100, 3))
    voc = sample_classes(np.linspace(0, 1, 100), text, M=400, training=False)
    assert voc.indices == list(range(100))


def test_validation():
    with pytest.raises(ValueError):
        sample_classes(np.zeros(4), TEXT, M=0, training=False)
    with pytest.raises(ValueError):
        sample_classes(np.zeros(4), TEXT, M=2, training=True, gt=7)
    with pytest.raises(ValueError):
        sample_classes(np.zeros(4), TEXT, M=2, training=True)


def test_ties_prefer_lower_index():
    assert top_m(np.array([0.5, 0.7, 0.5, 0.5]), 2).tolist() == [1, 0]


def test_seed_determinism():
    s = np.random.default_rng(0).random(20)
    text = np.zeros((20, 2))
    a = sample_classes(s, text, 5, True, gt=3, rng_seed=9)
    b = sample_classes(s, text, 5, True, gt=3, rng_seed=9)
    assert a.indices == b.indices


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 40), st.integers(1, 40), st.integers(0, 2**32 - 1), st.data())
def test_sampler_properties(n_c, M, seed, data):
    g = np.random.default_rng(seed)
    scores = g.uniform(-1, 1, n_c)
    gt = data.draw(st.integers(0, n_c - 1))
    voc = sample_classes(scores, np.zeros((n_c, 2)), M, True, gt=gt, rng_seed=seed)
    assert gt in voc.indices
    assert len(voc.indices) == min(M, n_c)
    assert voc.indices == sorted(set(voc.indices))
    ev = sample_classes(scores, np.zeros((n_c, 2)), M, False)
    assert int(np.argmax(scores)) in ev.indices


def loop_alignment(cls, text):
    T, D = cls.shape
    v = np.array([sum(cls[t, d] for t in range(T)) / T for d in range(D)])
    v = v / np.sqrt(sum(v * v))
    return v, np.array([sum(v * row) / np.sqrt(sum(row * row)) for row in text])


def test_global_alignment_matches_loop(rng):
    cls = rng.standard_normal((5, 7))
    text = rng.standard_normal((6, 7))
    al = global_alignment(cls, text)
    v, s = loop_alignment(cls, text)
    np.testing.assert_allclose(al.video_vec.numpy(), v, atol=1e-12)
    np.testing.assert_allclose(al.prior_scores.numpy(), s, atol=1e-12)
    assert abs(al.video_vec.norm().item() - 1) < 1e-6


def test_single_frame_alignment(rng):
    cls = rng.standard_normal((1, 4))
    al = global_alignment(cls, rng.standard_normal((3, 4)))
    np.testing.assert_allclose(al.video_vec.numpy(), cls[0] / np.linalg.norm(cls[0]), atol=1e-12)


def test_cancelling_cls_tokens():
    v = np.array([1.0, -2.0, 3.0])
    with pytest.raises(SingularityError):
        global_alignment(np.stack([v, -v]), np.eye(3))


def test_scatter_logits():
    out = scatter_logits(torch.tensor([[1.0, 2.0]]), [1, 3], 5)
    assert out[0, 1] == 1 and out[0, 3] == 2
    assert torch.isinf(out[0, [0, 2, 4]]).all()
