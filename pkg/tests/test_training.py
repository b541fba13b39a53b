"""Labels, losses, optimizer, and the training loop."""

import numpy as np
import pytest

from sparsematch import autodiff as ad
from sparsematch import training as tr
from sparsematch.autodiff import Parameter, Tensor
from sparsematch.encoder import KeypointSet
from sparsematch.errors import ContractError
from sparsematch.synth import SceneConfig, generate_dataset

from conftest import check_param_grad


def kps_at(positions, size=(640, 480), dim=4):
    positions = np.asarray(positions, dtype=np.float64)
    return KeypointSet(positions, np.zeros((len(positions), dim), dtype=np.float32),
                       size)


# ---------------------------------------------------------------------------
# Label generation
# ---------------------------------------------------------------------------

def test_labels_exact_hit_is_match():
    kps_a = kps_at([[100.0, 100.0]])
    kps_b = kps_at([[200.0, 150.0]])
    labels = tr.make_labels(np.array([[200.0, 150.0]]), np.array([[100.0, 100.0]]),
                            kps_a, kps_b)
    assert labels.matches.tolist() == [[0, 0]]
    assert len(labels.non_repeatable_a) == 0


def test_labels_far_keypoint_is_non_repeatable():
    kps_a = kps_at([[100.0, 100.0]])
    kps_b = kps_at([[200.0, 150.0]])
    labels = tr.make_labels(np.array([[215.0, 150.0]]),  # 15 px away from b0
                            np.array([[300.0, 300.0]]), kps_a, kps_b)
    assert labels.non_repeatable_a.tolist() == [0]
    assert labels.non_repeatable_b.tolist() == [0]
    assert len(labels.matches) == 0


def test_labels_band_keypoint_neither_match_nor_non_repeatable():
    # 5 px reprojection: inside [3, 10), binary label stays 1
    kps_a = kps_at([[100.0, 100.0]])
    kps_b = kps_at([[200.0, 150.0]])
    labels = tr.make_labels(np.array([[205.0, 150.0]]), np.array([[105.0, 100.0]]),
                            kps_a, kps_b)
    assert len(labels.matches) == 0
    assert len(labels.non_repeatable_a) == 0
    assert labels.binary_a().tolist() == [1.0]


def test_labels_mutual_nearest_required():
    # a0 and a1 both reproject near b0; only the closer one matches
    kps_a = kps_at([[10.0, 10.0], [20.0, 10.0]])
    kps_b = kps_at([[50.0, 50.0]])
    proj_ab = np.array([[50.0, 50.5], [50.0, 52.0]])
    proj_ba = np.array([[10.0, 10.4]])  # closest to a0
    labels = tr.make_labels(proj_ab, proj_ba, kps_a, kps_b)
    assert labels.matches.tolist() == [[0, 0]]


def test_labels_swap_symmetric(rng):
    m, n = 7, 9
    kps_a = kps_at(rng.uniform(10, 600, size=(m, 2)))
    kps_b = kps_at(rng.uniform(10, 400, size=(n, 2)))
    pab = rng.uniform(0, 640, size=(m, 2))
    pba = rng.uniform(0, 640, size=(n, 2))
    fwd = tr.make_labels(pab, pba, kps_a, kps_b)
    swp = tr.make_labels(pba, pab, kps_b, kps_a)
    assert np.array_equal(np.sort(fwd.matches[:, ::-1], axis=0),
                          np.sort(swp.matches, axis=0))
    assert np.array_equal(fwd.non_repeatable_a, swp.non_repeatable_b)
    assert np.array_equal(fwd.non_repeatable_b, swp.non_repeatable_a)


def test_labels_match_keypoints_appear_once(rng):
    data = generate_dataset(SceneConfig(num_shared_points=20,
                                        num_unmatched_per_image=10, seed=5), 3)
    for pair in data:
        labels = pair.labels
        assert len(np.unique(labels.matches[:, 0])) == len(labels.matches)
        assert len(np.unique(labels.matches[:, 1])) == len(labels.matches)
        assert not set(labels.matches[:, 0]) & set(labels.non_repeatable_a)
        assert not set(labels.matches[:, 1]) & set(labels.non_repeatable_b)


# ---------------------------------------------------------------------------
# Matching loss
# ---------------------------------------------------------------------------

def labels_single_match(m=2, n=2, non_rep_a=(), non_rep_b=()):
    return tr.GroundTruthLabels(np.array([[0, 0]]), np.array(non_rep_a, dtype=np.int64),
                                np.array(non_rep_b, dtype=np.int64), m, n)


def test_matching_loss_perfect_assignment_is_zero():
    labels = labels_single_match(non_rep_a=[1], non_rep_b=[1])
    p_hat = np.full((3, 3), 1e-9)
    p_hat[0, 0] = 1.0  # match cell
    p_hat[1, 2] = 1.0  # a1 -> dustbin column
    p_hat[2, 1] = 1.0  # b1 -> dustbin row
    loss = tr.matching_loss(Tensor(p_hat, dtype=np.float64), labels)
    assert loss.item() == pytest.approx(0.0, abs=1e-9)


def test_matching_loss_single_match_e_inverse():
    labels = labels_single_match()
    p_hat = np.ones((3, 3))
    p_hat[0, 0] = np.exp(-1.0)
    loss = tr.matching_loss(Tensor(p_hat, dtype=np.float64), labels)
    assert loss.item() == pytest.approx(1.0, abs=1e-7)


def test_matching_loss_halving_a_match_cell_adds_ln2_over_count():
    labels = tr.GroundTruthLabels(np.array([[0, 0], [1, 1]]),
                                  np.zeros(0, dtype=np.int64),
                                  np.zeros(0, dtype=np.int64), 2, 2)
    p1 = np.full((3, 3), 0.8)
    p2 = p1.copy()
    p2[1, 1] = 0.4
    l1 = tr.matching_loss(Tensor(p1, dtype=np.float64), labels).item()
    l2 = tr.matching_loss(Tensor(p2, dtype=np.float64), labels).item()
    assert l2 - l1 == pytest.approx(np.log(2) / 2, abs=1e-9)


def test_matching_loss_empty_matches_rejected():
    labels = tr.GroundTruthLabels(np.zeros((0, 2), dtype=np.int64),
                                  np.array([0]), np.array([0]), 1, 1)
    with pytest.raises(ContractError):
        tr.matching_loss(Tensor(np.ones((2, 2))), labels)


def test_matching_loss_empty_non_repeatable_drops_term():
    labels = labels_single_match()
    p = np.full((3, 3), 0.5)
    loss = tr.matching_loss(Tensor(p, dtype=np.float64), labels)
    assert loss.item() == pytest.approx(np.log(2), abs=1e-7)  # match term only


# ---------------------------------------------------------------------------
# Classification loss
# ---------------------------------------------------------------------------

def two_sided_labels():
    return tr.GroundTruthLabels(np.array([[0, 0]]), np.array([1]),
                                np.array([1]), 2, 2)


def test_classification_loss_perfect_prediction():
    labels = two_sided_labels()
    ga = Tensor([[1.0], [0.0]], dtype=np.float64)
    gb = Tensor([[1.0], [0.0]], dtype=np.float64)
    assert tr.classification_loss(ga, gb, labels).item() <= 1e-6


def test_classification_loss_uniform_half_is_ln2():
    labels = two_sided_labels()
    ga = Tensor([[0.5], [0.5]], dtype=np.float64)
    gb = Tensor([[0.5], [0.5]], dtype=np.float64)
    assert tr.classification_loss(ga, gb, labels).item() == pytest.approx(np.log(2), abs=1e-9)


def test_classification_loss_inverted_hits_clamp_ceiling():
    labels = two_sided_labels()
    ga = Tensor([[0.0], [1.0]], dtype=np.float64)
    gb = Tensor([[0.0], [1.0]], dtype=np.float64)
    loss = tr.classification_loss(ga, gb, labels).item()
    assert loss == pytest.approx(-np.log(tr.BCE_EPS), rel=1e-6)


def test_classification_loss_gradient(rng, f64):
    labels = tr.GroundTruthLabels(np.array([[0, 0]]), np.array([2]),
                                  np.array([1]), 3, 2)
    raw_a = Parameter(rng.uniform(-1, 1, size=(3, 1)))
    raw_b = Parameter(rng.uniform(-1, 1, size=(2, 1)))

    def loss_fn():
        return tr.classification_loss(ad.sigmoid(raw_a), ad.sigmoid(raw_b), labels)

    check_param_grad(loss_fn, raw_a, tol=1e-4)
    check_param_grad(loss_fn, raw_b, tol=1e-4)


# ---------------------------------------------------------------------------
# Total loss
# ---------------------------------------------------------------------------

def test_total_loss_lambda_zero():
    match = Tensor([[2.5]])
    cls = [Tensor([[9.0]]), Tensor([[9.0]])]
    assert tr.total_loss(match, cls, 0.0, 2).item() == pytest.approx(2.5)


def test_total_loss_weighted_sum():
    match = Tensor([[1.0]], dtype=np.float64)
    cls = [Tensor([[0.1]], dtype=np.float64) for _ in range(6)]
    out = tr.total_loss(match, cls, 5.0, 6)
    assert out.item() == pytest.approx(1.0 + 3.0, abs=1e-7)


def test_total_loss_all_zero():
    out = tr.total_loss(Tensor([[0.0]]), [Tensor([[0.0]])], 5.0, 1)
    assert out.item() == 0.0


def test_total_loss_count_mismatch():
    with pytest.raises(ContractError):
        tr.total_loss(Tensor([[1.0]]), [Tensor([[1.0]])], 5.0, 2)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

def reference_adam_trace(x0, grad_fn, lr, steps):
    """Hand-rolled 64-bit Adam on a scalar."""
    b1, b2, eps = 0.9, 0.999, 1e-8
    x, m, v = float(x0), 0.0, 0.0
    trace = []
    for t in range(1, steps + 1):
        g = grad_fn(x)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        trace.append(x)
    return trace


def test_adam_zero_gradient_no_move():
    p = Parameter(np.array([[1.5]]))
    state = tr.AdamState()
    tr.adam_step([p], state, 0.1)
    assert p.data[0, 0] == pytest.approx(1.5)


def test_adam_descends_against_constant_gradient():
    p = Parameter(np.array([[1.0]]))
    state = tr.AdamState()
    for _ in range(20):
        p.grad[:] = 2.0
        tr.adam_step([p], state, 0.01)
    assert p.data[0, 0] < 1.0


def test_adam_matches_reference_trace_on_quadratic(f64):
    # f(x) = (x - 3)^2, grad = 2 (x - 3)
    p = Parameter(np.array([[10.0]]))
    state = tr.AdamState()
    mine = []
    for _ in range(10):
        p.grad[:] = 2 * (p.data[0, 0] - 3.0)
        tr.adam_step([p], state, 0.05)
        mine.append(p.data[0, 0])
    ref = reference_adam_trace(10.0, lambda x: 2 * (x - 3.0), 0.05, 10)
    assert np.abs(np.array(mine) - np.array(ref)).max() <= 1e-6


def test_adam_zeroes_gradients():
    p = Parameter(np.array([[1.0]]))
    p.grad[:] = 5.0
    tr.adam_step([p], tr.AdamState(), 0.01)
    assert np.all(p.grad == 0.0)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_dataset():
    scene = SceneConfig(num_shared_points=16, num_unmatched_per_image=8,
                        descriptor_noise=0.05, descriptor_dim=16, seed=42)
    return generate_dataset(scene, 4)


def tiny_config(**kw):
    base = dict(dim=16, heads=2, init_layers=1, unit_layers=1, k=6,
                iterations=10, sinkhorn_iters=25, eval_every=0, seed=3,
                min_gt_matches=5)
    base.update(kw)
    return tr.TrainConfig(**base)


def test_train_same_seed_identical_loss_curves(tiny_dataset):
    _, m1 = tr.train(tiny_config(), tiny_dataset)
    _, m2 = tr.train(tiny_config(), tiny_dataset)
    assert [r.total for r in m1] == [r.total for r in m2]  # bitwise equality


def test_train_loss_decreases(tiny_dataset):
    _, metrics = tr.train(tiny_config(iterations=60, learning_rate=1e-3),
                          tiny_dataset)
    first = np.mean([r.total for r in metrics[:10]])
    last = np.mean([r.total for r in metrics[-10:]])
    assert last < first


def test_train_filters_low_match_pairs(tiny_dataset):
    with pytest.raises(ValueError):
        tr.train(tiny_config(min_gt_matches=10_000), tiny_dataset)


def test_losses_nonnegative_and_finite(tiny_dataset):
    _, metrics = tr.train(tiny_config(), tiny_dataset)
    for row in metrics:
        assert np.isfinite(row.total) and row.total >= 0
        assert np.isfinite(row.match_loss) and row.match_loss >= 0
        assert np.isfinite(row.cls_loss) and row.cls_loss >= 0


def test_metrics_csv_roundtrip(tmp_path, tiny_dataset):
    _, metrics = tr.train(tiny_config(iterations=4, eval_every=2), tiny_dataset)
    path = tmp_path / "metrics.csv"
    tr.write_metrics_csv(path, metrics)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "iteration,match_loss,cls_loss,total,precision,matching_score"
    assert len(lines) == 5


def test_end_to_end_gradients_tiny_config(rng, f64, tiny_dataset):
    # every module participates in one finite-difference assertion
    from sparsematch.layers import iter_parameters
    from sparsematch.model import forward_pair, init_matcher_params

    cfg = tiny_config(dim=8, heads=2, k=3, sinkhorn_iters=10).matcher_config()
    params = init_matcher_params(cfg, np.random.default_rng(0))
    pair = tiny_dataset[0]

    def loss_fn():
        fwd = forward_pair(params, cfg, pair.kps_a, pair.kps_b)
        loss, _, _ = tr.pair_loss(fwd, pair.labels, lam=5.0)
        return loss

    named = list(iter_parameters(params))
    picks = np.random.default_rng(1).choice(len(named), size=6, replace=False)
    for i in picks:
        check_param_grad(loss_fn, named[i][1], tol=1e-4)
