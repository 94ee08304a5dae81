import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from infocons import bottleneck as bn
from infocons import diffcore as dc
from infocons.bottleneck import (
    ExplainerConfig, ExplainerDiverged, attention_bottleneck, dynamic_score_map, infocons_loss,
    init_bottleneck, interpolate_scores, load_explainer, save_explainer, score_map, selective_cp_loss,
    train_explainer,
)
from infocons.pcmodel import PointClassifier, init_params
from infocons.shapes import PointCloud, make_dataset

from oracles import (
    central_difference, concrete_kl_uniform_sampled, gaussian_kl_monte_carlo, max_relative_error,
)


@pytest.fixture(scope="module")
def model():
    return PointClassifier(init_params("pointnet-lite", n_classes=3, seed=1))


@pytest.fixture(scope="module")
def tiny():
    return make_dataset(("sphere", "cube", "cone"), per_class_train=4, per_class_test=2, n_points=32, seed=2)


def _features(model, n=32, b=2, seed=0):
    pts = make_rng_points(seed, b, n)
    z, ctx = model.features(pts)
    return pts, z, ctx


def make_rng_points(seed, b, n):
    return dc.make_rng(seed).normal(size=(b, n, 3))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 20))
def test_mask_lies_strictly_inside_unit_interval(seed, scale):
    rng = dc.make_rng(seed)
    theta = init_bottleneck(16, 4, seed=seed)
    theta.W_2 = rng.normal(size=theta.W_2.shape)
    m = attention_bottleneck(theta, scale * rng.normal(size=(2, 9, 16))).data
    assert m.shape == (2, 9, 16)
    assert np.all(m > 0) and np.all(m < 1)


def test_fresh_bottleneck_outputs_one_half():
    theta = init_bottleneck(8, 3)
    np.testing.assert_array_equal(attention_bottleneck(theta, np.ones((1, 5, 8))).data, 0.5)


def test_feature_width_mismatch_is_rejected():
    with pytest.raises(ValueError, match="expected"):
        attention_bottleneck(init_bottleneck(8, 3), np.ones((1, 5, 7)))


def test_bottleneck_weight_gradients_match_finite_differences():
    rng = dc.make_rng(4)
    theta = init_bottleneck(6, 3, seed=4)
    theta.W_2 = rng.normal(size=theta.W_2.shape)
    theta.W_q = rng.normal(size=theta.W_q.shape)
    z = rng.normal(size=(2, 5, 6))
    proj = rng.normal(size=(2, 5, 6))
    names = bn._ARRAY_NAMES

    def loss_with(i, value):
        arrays = theta.arrays()
        arrays[i] = value
        return float(np.sum(attention_bottleneck(theta, z, [dc.constant(a) for a in arrays]).data * proj))

    weights = [dc.param(a) for a in theta.arrays()]
    out = attention_bottleneck(theta, z, weights)
    grads = dc.backward(dc.sum_reduce(dc.mul(out, proj)))
    for i, w in enumerate(weights):
        numeric = central_difference(lambda v, i=i: loss_with(i, v), theta.arrays()[i])
        assert max_relative_error(grads[w], numeric) < 1e-4, names[i]


def _loss_parts(model, z, ctx, labels, beta=0.5):
    theta = init_bottleneck(256, 8, beta=beta)
    head = lambda zh: model.head_from(3, zh, ctx)  # noqa: E731
    mu = z.reshape(-1, 256).mean(0)
    sigma = np.maximum(z.reshape(-1, 256).std(0), 1e-4)
    return theta, head, mu, sigma


def test_unit_mask_passes_features_through(model):
    pts, z, ctx = _features(model)
    labels = np.array([0, 2])
    theta, head, mu, sigma = _loss_parts(model, z, ctx, labels)
    frozen = dc.cross_entropy(dc.constant(model.logits(pts)[0]), labels).data
    _, ce, _, _ = selective_cp_loss(theta, z, labels, head, dc.make_rng(0), mask=np.ones_like(z))
    assert abs(ce.data - frozen) < 1e-12
    # the noise branch carries zero weight, so the masked features are z itself
    _, ce, _, _ = infocons_loss(theta, z, labels, head, mu, sigma, dc.make_rng(0),
                                mask=np.nextafter(np.ones_like(z), 0))
    assert abs(ce.data - frozen) < 1e-9


def test_info_term_diverges_as_mask_approaches_one(model):
    _, z, ctx = _features(model)
    theta, head, mu, sigma = _loss_parts(model, z, ctx, [0, 1])
    infos = [float(infocons_loss(theta, z, [0, 1], head, mu, sigma, dc.make_rng(0), mask=np.full(z.shape, m))[2].data)
             for m in (0.9, 0.999, 0.999999)]
    assert infos[0] < infos[1] < infos[2] and infos[2] > 13
    with pytest.raises(ValueError, match="sigma"):
        infocons_loss(theta, z, [0, 1], head, mu, sigma, dc.make_rng(0), mask=np.ones_like(z))


def test_zero_mask_at_prior_mean_has_no_information(model):
    _, z, ctx = _features(model)
    theta, head, mu, sigma = _loss_parts(model, z, ctx, [0, 1])
    zz = np.broadcast_to(mu, z.shape).copy()
    _, _, info, _ = infocons_loss(theta, zz, [0, 1], head, mu, sigma, dc.make_rng(0), mask=np.zeros_like(z))
    assert abs(info.data) < 1e-15


def test_zero_beta_total_is_cross_entropy(model):
    _, z, ctx = _features(model)
    theta, head, mu, sigma = _loss_parts(model, z, ctx, [0, 1], beta=0.0)
    total, ce, info, _ = infocons_loss(theta, z, [0, 1], head, mu, sigma, dc.make_rng(0))
    assert total.data == ce.data and info.data > 0
    total, ce, _, _ = selective_cp_loss(theta, z, [0, 1], head, dc.make_rng(0))
    assert total.data == ce.data


@pytest.mark.parametrize("seed", range(5))
def test_closed_form_info_matches_sampling(seed):
    rng = dc.make_rng(seed)
    m = rng.uniform(0.05, 0.95, 40)
    z, mu = rng.normal(size=40), rng.normal(size=40)
    sigma = rng.uniform(0.5, 2, 40)
    keep = 1 - m
    closed = dc.gaussian_kl(m * z + keep * mu, keep * sigma, mu, sigma).data
    sampled = gaussian_kl_monte_carlo(m * z + keep * mu, keep * sigma, mu, sigma, 10**5, rng)
    assert abs(closed - sampled) <= 0.01 * closed


def test_selective_info_estimator_matches_direct_sampling():
    ref = concrete_kl_uniform_sampled(0.5, 0.7, 10**6, dc.make_rng(9))
    est = dc.relaxed_bernoulli_kl_uniform(np.full((128, 256), 0.5), 0.7, 32, dc.make_rng(3)).data.mean()
    assert abs(est - ref) <= 0.02 * ref


def test_config_validation():
    with pytest.raises(ValueError, match="objective"):
        ExplainerConfig(objective="vib")
    with pytest.raises(ValueError, match="beta"):
        ExplainerConfig(beta=-1)


def _train(model, tiny, **kw):
    cfg = dict(epochs=2, batch_size=4, d_r=8, seed=5)
    cfg.update(kw)
    return train_explainer(model, tiny, ExplainerConfig(**cfg), log_fn=lambda s: None)


def test_training_leaves_model_untouched_and_is_deterministic(model, tiny):
    before = model.params.checksum()
    a, ha = _train(model, tiny)
    b, hb = _train(model, tiny)
    assert model.params.checksum() == before
    assert all(np.array_equal(x, y) for x, y in zip(a.arrays(), b.arrays()))
    assert [h["ce"] for h in ha] == [h["ce"] for h in hb] and len(ha) == 2
    assert a.prior_mu.shape == (256,)


def test_selective_objective_trains(model, tiny):
    theta, hist = _train(model, tiny, objective="selective-cp", epochs=1, k=2)
    assert theta.objective == "selective-cp" and np.isfinite(hist[0]["info"])


def test_non_finite_loss_aborts_with_last_good_parameters(model, tiny):
    with pytest.raises(ExplainerDiverged) as err:
        _train(model, tiny, beta=float("nan"))
    assert err.value.last_good.W_q.shape == (256, 8)


def test_explainer_checkpoint_round_trip(tmp_path, model, tiny):
    theta, _ = _train(model, tiny, epochs=1)
    save_explainer(tmp_path / "e.bin", theta)
    back = load_explainer(tmp_path / "e.bin")
    assert (back.beta, back.d_r, back.tau, back.k, back.objective, back.tap_layer) == \
        (theta.beta, theta.d_r, theta.tau, theta.k, theta.objective, theta.tap_layer)
    for x, y in zip(theta.arrays(), back.arrays()):
        np.testing.assert_array_equal(x.astype(np.float32), y)
    np.testing.assert_allclose(back.prior_sigma, theta.prior_sigma)


def _cloud(n=40, seed=0):
    return PointCloud(dc.make_rng(seed).normal(size=(n, 3)), label=0)


def test_score_map_costs_one_forward_of_each(model):
    theta = init_bottleneck(256, 8)
    model.counter.reset()
    sm = score_map(theta, model, _cloud())
    assert len(sm) == 40 and model.counter.forwards == 1 and model.counter.backwards == 0
    assert theta.counter.forwards == 1


def test_score_is_channel_mean_of_mask(model, monkeypatch):
    mask = np.full((1, 40, 256), 0.1)
    mask[0, 7] = 0.9
    monkeypatch.setattr(bn, "attention_bottleneck", lambda theta, z: dc.constant(mask))
    s = score_map(init_bottleneck(256, 8), model, _cloud()).scores
    assert s[7] == pytest.approx(0.9) and np.allclose(np.delete(s, 7), 0.1)


def test_score_map_is_permutation_equivariant(model):
    rng = dc.make_rng(2)
    theta = init_bottleneck(256, 8, seed=2)
    theta.W_2 = rng.normal(size=theta.W_2.shape)
    pc = _cloud()
    perm = rng.permutation(pc.n)
    a = score_map(theta, model, pc).scores
    b = score_map(theta, model, PointCloud(pc.points[perm], 0)).scores
    np.testing.assert_allclose(b, a[perm], atol=1e-12)


def test_hierarchical_maps_are_interpolated_to_every_point():
    m = PointClassifier(init_params("hier-lite", n_classes=2, seed=0))
    theta = init_bottleneck(256, 8, tap_layer=3)
    theta.W_2 = dc.make_rng(1).normal(size=theta.W_2.shape)
    sm = score_map(theta, m, _cloud(100))
    assert len(sm) == 100 and m.counter.forwards == 1


def test_interpolation_reproduces_anchor_scores_exactly():
    rng = dc.make_rng(0)
    anchors = rng.normal(size=(20, 3))
    s = rng.random(20)
    assert np.array_equal(interpolate_scores(anchors, s, anchors), s)


def test_interpolation_of_constant_scores():
    rng = dc.make_rng(1)
    out = interpolate_scores(rng.normal(size=(10, 3)), np.full(10, 0.3), rng.normal(size=(50, 3)))
    np.testing.assert_allclose(out, 0.3, rtol=1e-14)


def test_equidistant_target_averages_near_anchors():
    anchors = np.array([[-1.0, 0, 0], [1.0, 0, 0], [0, 50.0, 0]])
    out = interpolate_scores(anchors, np.array([0.0, 1.0, 0.0]), np.zeros((1, 3)))
    assert abs(out[0] - 0.5) < 0.05


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_interpolation_is_a_convex_combination(seed):
    rng = dc.make_rng(seed)
    anchors, targets, s = rng.normal(size=(8, 3)), rng.normal(size=(30, 3)), rng.random(8)
    out = interpolate_scores(anchors, s, targets)
    d = ((targets[:, None] - anchors[None]) ** 2).sum(-1)
    near = np.argsort(d, axis=1, kind="stable")[:, :3]
    assert np.all(out >= s[near].min(1) - 1e-12) and np.all(out <= s[near].max(1) + 1e-12)


def test_too_few_anchors_warns_and_uses_all():
    with pytest.warns(UserWarning, match="anchors"):
        out = interpolate_scores(np.array([[0.0, 0, 0], [1.0, 0, 0]]), np.array([0.2, 0.4]), np.array([[0.5, 0, 0]]))
    assert out[0] == pytest.approx(0.3)


def _scored_theta(seed=3):
    theta = init_bottleneck(256, 8, seed=seed)
    theta.W_2 = dc.make_rng(seed).normal(size=theta.W_2.shape)
    return theta


def test_single_iteration_dynamic_map_marks_one_pass_top_points(model):
    theta, pc = _scored_theta(), _cloud()
    one = score_map(theta, model, pc)
    dyn = dynamic_score_map(theta, model, pc, iters=1, drop_per_iter=5)
    assert sorted(dyn.dropped.tolist()) == sorted(one.top(5).tolist())
    assert np.array_equal(dyn.top(5), dyn.dropped)


def test_dynamic_map_protocol_shape_and_cost(model):
    theta, pc = _scored_theta(), _cloud(256)
    model.counter.reset()
    dyn = dynamic_score_map(theta, model, pc, iters=20, drop_per_iter=10)
    assert model.counter.forwards == 20
    assert len(np.unique(dyn.dropped)) == 200 and dyn.iterations == 20
    assert np.all(dyn.scores[dyn.dropped] > 0.5) and np.all(np.delete(dyn.scores, dyn.dropped) <= 0.5)


def test_dynamic_map_rejects_dropping_everything(model):
    with pytest.raises(ValueError, match="drop"):
        dynamic_score_map(_scored_theta(), model, _cloud(40), iters=4, drop_per_iter=10)
