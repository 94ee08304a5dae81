import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from infocons.baselines import (
    Lime3DConfig, PCSAMConfig, cp_maxpool, cppp_meanpool, lime3d, lime_masks, meanpool_scores, pcsam,
    radial_scores, random_scores,
)
from infocons.diffcore import make_rng
from infocons.pcmodel import PointClassifier, encoder_forward, init_params
from infocons.shapes import PointCloud

from oracles import spearman


@pytest.fixture(scope="module")
def model():
    return PointClassifier(init_params("pointnet-lite", n_classes=3, seed=2))


def _cloud(n=64, seed=0, label=0):
    return PointCloud(make_rng(seed).normal(size=(n, 3)), label=label)


def test_dominant_point_wins_every_channel():
    p = init_params("pointnet-lite", n_classes=2, seed=0)
    p.encoder = [(np.abs(w), np.zeros_like(b)) for w, b in p.encoder]
    pts = make_rng(0).uniform(-1, 1, size=(30, 3))
    pts[17] = 5.0
    assert cp_maxpool(PointClassifier(p), PointCloud(pts, 0)).tolist() == [17]


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 300))
def test_critical_set_never_exceeds_width_or_size(seed, n):
    m = PointClassifier(init_params("pointnet-lite", n_classes=2, seed=seed % 7))
    cp = cp_maxpool(m, _cloud(n, seed))
    assert 1 <= len(cp) <= min(256, n)


def test_deleting_a_non_critical_point_keeps_global_feature(model):
    pc = _cloud(80, 3)
    cp = cp_maxpool(model, pc)
    other = np.setdiff1d(np.arange(80), cp)[0]
    _, _, g = encoder_forward(model.params, pc.points)
    _, _, g2 = encoder_forward(model.params, np.delete(pc.points, other, axis=0))
    assert np.array_equal(g, g2)


def test_meanpool_dominant_point_scores_one():
    z = make_rng(0).random((10, 6))
    z[4] = 5.0
    s = meanpool_scores(z)
    assert s[4] == 1.0 and s.max() == 1.0


def test_meanpool_is_scale_invariant():
    z = make_rng(1).normal(size=(20, 8))
    np.testing.assert_allclose(meanpool_scores(10 * z), meanpool_scores(z), atol=1e-15)


def test_meanpool_constant_map_is_one_half():
    np.testing.assert_array_equal(meanpool_scores(np.ones((5, 3))), 0.5)


def test_cppp_ranking_follows_mean_activation(model):
    pc = _cloud(50, 4)
    sm = cppp_meanpool(model, pc)
    z, _, _ = encoder_forward(model.params, pc.points)
    act = np.abs(z).mean(axis=1)
    assert np.array_equal(np.argsort(sm.scores, kind="stable"), np.argsort(act, kind="stable"))


def test_radial_score_for_outward_gradient():
    pts = np.array([[2.0, 0, 0], [0, 3.0, 0]])
    grad = np.array([[0.5, 0, 0], [0, 0.25, 0]])
    s = radial_scores(pts, grad, np.zeros(3), alpha=0.0)
    np.testing.assert_allclose(s, [-0.5 * 2, -0.25 * 3])


def test_point_at_center_scores_zero():
    s = radial_scores(np.zeros((1, 3)), np.ones((1, 3)), np.zeros(3))
    assert s[0] == 0.0


def test_radial_derivative_matches_finite_differences():
    rng = make_rng(6)
    A = rng.normal(size=(3, 3))
    A = A @ A.T
    c = rng.normal(size=3)
    x = rng.normal(size=3)
    loss = lambda p: 0.5 * (p - 0.3) @ A @ (p - 0.3)  # noqa: E731
    grad = A @ (x - 0.3)
    r = np.linalg.norm(x - c)
    u = (x - c) / r
    h = 1e-3
    numeric = (loss(c + (r + h) * u) - loss(c + (r - h) * u)) / (2 * h)
    analytic = -radial_scores(x[None], grad[None], c, alpha=0.0)[0] / r
    assert abs(analytic - numeric) < 1e-4 * max(1.0, abs(numeric))


class RadialBlackBox:
    """Loss depending only on each point's distance to the coordinate-wise median."""

    def __init__(self):
        self.calls = 0

    def loss_and_input_grad(self, points, labels):
        self.calls += 1
        c = np.median(points, axis=0)
        d = points - c
        r2 = (d**2).sum(1)
        w = np.sin(3 * r2)
        return float(np.sum(np.cos(3 * r2))), (-6 * w[:, None] * d)[None]


def test_pcsam_scores_survive_an_axis_rotation():
    pc = _cloud(120, 8)
    rot = np.array([[0.0, -1, 0], [1, 0, 0], [0, 0, 1]])
    cfg = PCSAMConfig(alpha=1.0, iters=4, drop_per_iter=5)
    a = pcsam(RadialBlackBox(), pc, 0, cfg)
    b = pcsam(RadialBlackBox(), PointCloud(pc.points @ rot.T, 0), 0, cfg)
    np.testing.assert_allclose(a.scores, b.scores, atol=1e-12)


def test_pcsam_counts_one_forward_and_backward_per_round(model):
    model.counter.reset()
    sm = pcsam(model, _cloud(256, 1, label=2), 2)
    assert (model.counter.forwards, model.counter.backwards) == (20, 20)
    assert len(np.unique(sm.dropped)) == 200 and sm.iterations == 20


def test_pcsam_rejects_excessive_drops(model):
    with pytest.raises(ValueError, match="drop"):
        pcsam(model, _cloud(30), 0, PCSAMConfig(iters=3, drop_per_iter=10))


class LinearBlackBox:
    """Output is an exact linear function of which points are present."""

    def __init__(self, w, coords):
        self.w, self.coords, self.calls = w, coords, 0

    def predict_proba(self, points):
        self.calls += 1
        present = np.isin(self.coords[:, 0], points[:, 0])
        return np.array([[float(self.w @ present)]])


def _linear_case(n=32, seed=0):
    rng = make_rng(seed)
    coords = np.column_stack([np.arange(n, dtype=float), rng.normal(size=(n, 2))])
    w = rng.normal(size=n)
    return PointCloud(coords, 0), LinearBlackBox(w, coords), w


def test_lime_recovers_linear_weights():
    pc, box, w = _linear_case()
    sm = lime3d(box, pc, Lime3DConfig(n_queries=pc.n + 10, ridge=1e-12, seed=1))
    np.testing.assert_allclose(sm.scores, (w - w.min()) / (w.max() - w.min()), atol=1e-6)


def test_lime_ranking_with_default_query_budget():
    pc, box, w = _linear_case(seed=3)
    sm = lime3d(box, pc, Lime3DConfig(n_queries=200, ridge=1e-6, seed=2))
    assert spearman(sm.scores, w) >= 0.95


def test_lime_forward_count_is_query_count(model):
    model.counter.reset()
    lime3d(model, _cloud(64), Lime3DConfig(n_queries=100))
    assert (model.counter.forwards, model.counter.backwards) == (100, 0)


def test_lime_masks_never_drop_everything():
    masks = lime_masks(3, Lime3DConfig(n_queries=200, drop_prob=0.9), make_rng(0))
    assert masks[0].all() and masks.any(axis=1).all()


def test_lime_rejects_tiny_query_budget():
    with pytest.raises(ValueError, match="10 queries"):
        Lime3DConfig(n_queries=5)


def test_random_scores_are_seeded_and_uniform():
    pc = _cloud(10_000)
    a, b = random_scores(pc, make_rng(4)), random_scores(pc, make_rng(4))
    assert np.array_equal(a.scores, b.scores)
    assert abs(a.scores.mean() - 0.5) < 0.02
