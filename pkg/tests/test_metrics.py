import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edsslads.metrics import distortion_image, misclassification_rate, total_distortion
from edsslads.reconstruction import InputError

from .fakes import half_plane


def test_identical_images_zero():
    img = half_plane(16)
    assert total_distortion(img, img) == 0.0


def test_complement_two_labels_one():
    img = half_plane(16)
    assert total_distortion(img, 3 - img) == 1.0


def test_25_wrong_on_128():
    truth = np.ones((128, 128), dtype=int)
    recon = truth.copy()
    recon.ravel()[:25] = 2
    assert total_distortion(truth, recon) == pytest.approx(25 / 16384)
    assert round(total_distortion(truth, recon), 4) == 0.0015
    assert distortion_image(truth, recon).sum() == 25


def test_total_distortion_shape_mismatch():
    with pytest.raises(InputError):
        total_distortion(np.ones((4, 4)), np.ones((4, 5)))


def test_misclassification_one_in_5000():
    actual = np.ones(5000, dtype=int)
    pred = actual.copy()
    pred[1234] = 2
    assert misclassification_rate(pred, actual) == pytest.approx(0.0002)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 4)), min_size=1, max_size=200),
       st.randoms(use_true_random=False))
def test_misclassification_permutation_invariant(pairs, rnd):
    pred, act = map(np.array, zip(*pairs))
    perm = list(range(len(pairs)))
    rnd.shuffle(perm)
    rate = misclassification_rate(pred, act)
    assert 0.0 <= rate <= 1.0
    assert misclassification_rate(pred[perm], act[perm]) == rate


def test_misclassification_errors():
    with pytest.raises(InputError):
        misclassification_rate([], [])
    with pytest.raises(InputError):
        misclassification_rate([1, 2], [1])
