import itertools
import math

import numpy as np
import pytest

from reidlm import autodiff as ad
from reidlm.autodiff import Tensor, grad_check
from reidlm.losses import TripletConfig, id_loss, lm_nll, overall_loss, pairwise_distance, triplet_loss


def _triplet_enumerated(x, labels, m, distance="euclidean"):
    """Enumerates every (anchor, positive, negative) triple with plain loops."""
    n = len(x)

    def d(i, j):
        if distance == "euclidean":
            return math.sqrt(sum((a - b) ** 2 for a, b in zip(x[i], x[j])))
        u, v = x[i], x[j]
        dot = sum(a * b for a, b in zip(u, v))
        return 1.0 - dot / ((math.sqrt(sum(a * a for a in u)) + 1e-12) * (math.sqrt(sum(b * b for b in v)) + 1e-12))

    per_anchor = []
    for a in range(n):
        best = -math.inf
        for p, q in itertools.product(range(n), range(n)):
            if labels[p] == labels[a] and labels[q] != labels[a]:
                best = max(best, m + d(a, p) - d(a, q))
        per_anchor.append(max(best, 0.0))
    return per_anchor


# ---------------------------------------------------------------------------
# continuation NLL


def test_lm_nll_uniform_single_token():
    ids = np.array([1, 3])
    mask = np.array([0, 1])
    assert abs(lm_nll(Tensor(np.zeros((2, 8))), ids, mask).item() - math.log(8)) <= 1e-9


def test_lm_nll_half_probability():
    # two classes with equal logits give p=0.5 for each target
    ids = np.array([0, 1, 0])
    mask = np.array([0, 1, 1])
    assert abs(lm_nll(Tensor(np.zeros((3, 2))), ids, mask).item() - math.log(2)) <= 1e-12


def test_lm_nll_matches_hand_mean():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(6, 5))
    ids = rng.integers(0, 5, size=6)
    mask = np.array([0, 0, 1, 1, 0, 1])
    expect = []
    for i in np.flatnonzero(mask):
        row = z[i - 1]
        expect.append(-(row[ids[i]] - math.log(sum(math.exp(v) for v in row))))
    assert abs(lm_nll(Tensor(z), ids, mask).item() - np.mean(expect)) <= 1e-12


def test_lm_nll_ignores_unmasked_logits():
    rng = np.random.default_rng(1)
    ids = rng.integers(0, 7, size=9)
    mask = np.array([0, 0, 0, 0, 1, 1, 1, 0, 0])
    z = rng.normal(size=(9, 7))
    z2 = z.copy()
    free = np.ones(9, bool)
    free[np.flatnonzero(mask) - 1] = False
    z2[free] = rng.normal(size=(free.sum(), 7)) * 10
    assert lm_nll(Tensor(z), ids, mask).item() == lm_nll(Tensor(z2), ids, mask).item()


def test_lm_nll_empty_mask():
    with pytest.raises(ValueError):
        lm_nll(Tensor(np.zeros((3, 4))), np.array([0, 1, 2]), np.zeros(3))
    with pytest.raises(ValueError):
        # only position 0 masked: nothing predicts it
        lm_nll(Tensor(np.zeros((3, 4))), np.array([0, 1, 2]), np.array([1, 0, 0]))


# ---------------------------------------------------------------------------
# identity loss


def test_id_loss_uniform():
    assert abs(id_loss(Tensor(np.zeros((4, 100))), [0, 1, 2, 3]).item() - math.log(100)) <= 1e-9


def test_id_loss_saturated():
    z = np.full((4, 5), -50.0)
    labels = [0, 1, 2, 3]
    z[np.arange(4), labels] = 50.0
    assert id_loss(Tensor(z), labels).item() < 1e-12


def test_id_loss_is_mean_of_per_sample():
    rng = np.random.default_rng(2)
    z = rng.normal(size=(4, 6))
    labels = np.array([0, 0, 3, 3])
    per = [-(z[i, labels[i]] - math.log(sum(math.exp(v) for v in z[i]))) for i in range(4)]
    assert abs(id_loss(Tensor(z), labels).item() - sum(per) / 4) <= 1e-12


def test_id_loss_row_shift_invariance():
    rng = np.random.default_rng(3)
    z = rng.normal(size=(8, 10))
    labels = rng.integers(0, 10, size=8)
    shifted = z + rng.normal(size=(8, 1)) * 20
    assert abs(id_loss(Tensor(z), labels).item() - id_loss(Tensor(shifted), labels).item()) <= 1e-10


def test_id_loss_label_range():
    with pytest.raises(IndexError):
        id_loss(Tensor(np.zeros((2, 3))), [0, 3])


# ---------------------------------------------------------------------------
# triplet


SUM = TripletConfig(margin=0.3, reduction="sum")


def test_triplet_identical_embeddings():
    x = Tensor(np.ones((4, 5)))
    assert triplet_loss(x, [0, 0, 1, 1], SUM).item() == 4 * 0.3 == 1.2
    mean = triplet_loss(x, [0, 0, 1, 1], TripletConfig(margin=0.3)).item()
    assert abs(mean - 0.3) <= 1e-15


def test_triplet_separated_clusters():
    x = np.zeros((4, 3))
    x[2:, 0] = 10.0
    assert triplet_loss(Tensor(x), [0, 0, 1, 1], SUM).item() == 0.0


def test_triplet_one_dimensional_example():
    x = Tensor(np.array([[0.0], [1.0], [4.0], [5.0]]))
    labels = [0, 0, 1, 1]
    assert triplet_loss(x, labels, SUM).item() == 0.0
    got = triplet_loss(x, labels, TripletConfig(margin=2.5, reduction="sum")).item()
    # outer anchors 0 and 5 have their nearest negative at 4, so only 1 and 4 violate: 2 * (2.5 + 1 - 3)
    assert abs(got - 1.0) <= 1e-12
    assert abs(got - sum(_triplet_enumerated(x.data.tolist(), labels, 2.5))) <= 1e-12


def test_triplet_shape_errors():
    with pytest.raises(ValueError, match="P >= 2"):
        triplet_loss(Tensor(np.zeros((3, 2))), [0, 0, 0])
    with pytest.raises(ValueError, match="K >= 2"):
        triplet_loss(Tensor(np.zeros((3, 2))), [0, 0, 1])
    with pytest.raises(ValueError):
        TripletConfig(margin=-0.1)
    with pytest.raises(ValueError):
        TripletConfig(distance="manhattan")


@pytest.mark.parametrize("distance", ["euclidean", "cosine"])
def test_triplet_matches_enumeration(distance):
    rng = np.random.default_rng(4)
    labels = np.repeat(np.arange(4), 4)
    worst = 0.0
    for _ in range(100):
        x = rng.normal(size=(16, 8))
        m = float(rng.uniform(0, 2))
        per = _triplet_enumerated(x.tolist(), labels, m, distance)
        got = triplet_loss(Tensor(x), labels, TripletConfig(margin=m, distance=distance, reduction="sum")).item()
        worst = max(worst, abs(got - sum(per)))
        got_mean = triplet_loss(Tensor(x), labels, TripletConfig(margin=m, distance=distance)).item()
        worst = max(worst, abs(got_mean - sum(per) / len(per)))
    assert worst <= 1e-10


def test_triplet_nonnegative_and_zero_iff_margin_met():
    rng = np.random.default_rng(5)
    labels = np.repeat(np.arange(3), 2)
    for _ in range(50):
        x = rng.normal(size=(6, 2))
        m = float(rng.uniform(0, 1))
        val = triplet_loss(Tensor(x), labels, TripletConfig(margin=m, reduction="sum")).item()
        per = _triplet_enumerated(x.tolist(), labels, m)
        assert val >= 0
        assert (val == 0) == all(p == 0 for p in per)


def test_pairwise_distance_symmetric_zero_diagonal():
    x = np.random.default_rng(6).normal(size=(5, 3))
    d = pairwise_distance(Tensor(x)).data
    assert np.array_equal(d, d.T) and np.array_equal(np.diag(d), np.zeros(5))


# ---------------------------------------------------------------------------
# overall loss


def test_overall_loss_arithmetic():
    assert abs(overall_loss(2.0, 1.0, 0.5, 0.3) - 1.65) <= 1e-12
    assert overall_loss(2.0, 1.0, 0.5, 1.0) == 2.0
    assert overall_loss(2.0, 1.0, 0.5, 0.0) == 1.5
    with pytest.raises(ValueError):
        overall_loss(1.0, 1.0, 1.0, 1.5)
    with pytest.raises(ValueError):
        overall_loss(1.0, 1.0, 1.0, -0.1)


def test_overall_loss_affine():
    rng = np.random.default_rng(7)
    for _ in range(20):
        lam = float(rng.uniform())
        a, b, c, h = rng.normal(size=4)
        base = overall_loss(a, b, c, lam)
        assert abs(overall_loss(a + h, b, c, lam) - base - lam * h) <= 1e-12
        assert abs(overall_loss(a, b + h, c, lam) - base - (1 - lam) * h) <= 1e-12
        assert abs(overall_loss(a, b, c + h, lam) - base - (1 - lam) * h) <= 1e-12


def test_overall_loss_on_tensors():
    out = overall_loss(Tensor(2.0), Tensor(1.0), Tensor(0.5), 0.3)
    assert isinstance(out, Tensor) and abs(out.item() - 1.65) <= 1e-12


# ---------------------------------------------------------------------------
# gradients


@pytest.mark.parametrize("seed", range(10))
def test_loss_gradients(seed):
    rng = np.random.default_rng(seed)
    z = Tensor(rng.normal(size=(6, 5)))
    ids = rng.integers(0, 5, size=6)
    mask = np.array([0, 1, 1, 0, 1, 1])
    assert grad_check(lambda t: lm_nll(t, ids, mask), [z]) <= 1e-4
    labels = np.repeat(np.arange(3), 2)
    assert grad_check(lambda t: id_loss(t, labels), [z]) <= 1e-4
    x = Tensor(rng.normal(size=(6, 4)))
    for cfg in (TripletConfig(), TripletConfig(reduction="sum"), TripletConfig(distance="cosine")):
        assert grad_check(lambda t: triplet_loss(t, labels, cfg), [x]) <= 1e-4
    W = Tensor(rng.normal(size=(4, 3)))

    def total(t, w):
        logits = ad.matmul(t, w)
        return overall_loss(lm_nll(logits, labels, np.ones(6)), id_loss(logits, labels),
                            triplet_loss(t, labels), 0.3)

    assert grad_check(total, [x, W]) <= 1e-4
