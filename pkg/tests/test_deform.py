import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.stats import spearmanr

from artikin import quaternion as quat
from artikin.deform import (DeformError, DeformNet, FitConfig, apply_offsets, deform, fit,
                            forward, interpolate, load_checkpoint, save_checkpoint)
from artikin.field import GaussianPrimitive, SceneBundle, covariance_of

from oracles import gradient_check, rel_error

IDENT = [1.0, 0.0, 0.0, 0.0]
T_GRID = (0.0, 0.25, 0.5, 0.75, 1.0)


def _prim(q=IDENT, s=(0.2, 0.3, 0.4)):
    return GaussianPrimitive([0.1, -0.2, 0.3], q, s, [0.3, 0.6, 0.9], 0.7, 2)


def _zero_net(latent_dim=4):
    return DeformNet.init(latent_dim, (5, 5), np.random.default_rng(0), output_scale=0.0)


def test_identity_offsets():
    p = _prim()
    out = apply_offsets(p, np.zeros(3), IDENT, np.zeros(3))
    assert np.array_equal(out.mu, p.mu) and np.array_equal(out.q, p.q)
    assert np.array_equal(out.s, p.s)


def test_rotation_offset_normalized():
    out = apply_offsets(_prim(), np.zeros(3), [0, 0, 0, 2.0], np.zeros(3))
    np.testing.assert_array_equal(out.q, [0, 0, 0, 1])


def test_zero_rotation_offset_rejected():
    with pytest.raises(DeformError):
        apply_offsets(_prim(), np.zeros(3), np.zeros(4), np.zeros(3))


def test_scale_floor():
    out = apply_offsets(_prim(), np.zeros(3), IDENT, [-1.0, 0, 0])
    assert out.s[0] == 1e-6


vec3 = arrays(float, 3, elements=st.floats(-0.1, 0.1))
vec4 = arrays(float, 4, elements=st.floats(-1, 1)).filter(lambda v: np.linalg.norm(v) > 1e-2)


@given(vec3, vec4, vec3, vec4)
def test_offsets_recompose_covariance(dmu, dq, ds, q):
    p = _prim(q=quat.normalize(q))
    out = apply_offsets(p, dmu, dq, ds)
    assert abs(np.linalg.norm(out.q) - 1) <= 1e-9
    R = quat.to_matrix(out.q)
    np.testing.assert_allclose(covariance_of(out), R @ np.diag((out.s / 2) ** 2) @ R.T,
                               atol=1e-14)
    np.testing.assert_allclose(out.q, quat.normalize(
        quat.multiply(quat.normalize(dq), p.q)), atol=1e-15)
    assert np.array_equal(out.rgb, p.rgb) and out.opacity == p.opacity and out.label == p.label


def test_zero_network_gives_identity_offsets(rng):
    net = _zero_net()
    for _ in range(5):
        dmu, dq, ds = forward(net, _prim(q=quat.normalize(rng.normal(size=4))),
                              rng.normal(size=4))
        assert not dmu.any() and not ds.any()
        np.testing.assert_array_equal(dq, IDENT)


def test_forward_is_deterministic(rng):
    net = DeformNet.init(4, (6, 6), rng, output_scale=0.5)
    lat = rng.normal(size=4)
    a, b = forward(net, _prim(), lat), forward(net, _prim(), lat)
    for x, y in zip(a, b):
        assert np.array_equal(x, y)


def test_single_weight_perturbation_matches_backprop(rng):
    net = DeformNet.init(4, (6, 6), rng, output_scale=0.5)
    p, lat = _prim(), rng.normal(size=4)
    X = net.inputs(p.mu[None], p.q[None], p.s[None], lat)
    out, acts = net.forward_batch(X)
    channel = 5
    dout = np.zeros_like(out)
    dout[0, channel] = 1.0
    grads, _ = net.backward_batch(acts, dout)
    h = 1e-6
    for layer in range(len(net.weights)):
        w = net.weights[layer]
        i, j = rng.integers(w.shape[0]), rng.integers(w.shape[1])
        w[i, j] += h
        up = net.forward_batch(X)[0][0, channel]
        w[i, j] -= 2 * h
        down = net.forward_batch(X)[0][0, channel]
        w[i, j] += h
        numeric = (up - down) / (2 * h)
        assert rel_error(grads[2 * layer][i, j], numeric) <= 1e-4


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_loss_gradient_matches_central_differences(seed):
    assert gradient_check(seed) <= 1e-4


def test_static_scene_learns_identity(storage2):
    st_ = storage2.canonical
    same = SceneBundle(st_, [st_.with_geometry(state_index=k) for k in range(2)],
                       storage2.cameras[:2])
    res = fit(same, FitConfig(epochs=200, seed=0))
    assert res.final_loss < 1e-6


def test_fit_needs_two_states(storage2):
    b = SceneBundle(storage2.canonical, storage2.states[:1], storage2.cameras[:1])
    with pytest.raises(DeformError):
        fit(b)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported(small_storage2):
    cfg = FitConfig(epochs=50, learning_rate=1e6, optimizer="gd", cosine_decay=False)
    with pytest.raises(DeformError, match="diverged"):
        fit(small_storage2, cfg)


def test_fit_is_bit_reproducible(small_storage2):
    cfg = FitConfig(epochs=30, seed=7, hidden=(16, 16))
    a, b = fit(small_storage2, cfg), fit(small_storage2, cfg)
    assert a.history == b.history
    assert np.array_equal(a.latents, b.latents)
    assert all(np.array_equal(x, y) for x, y in zip(a.net.params(), b.net.params()))


def _center_rmse(bundle, res):
    errs = []
    for k, st_ in enumerate(bundle.states):
        pred = deform(res.net, bundle.canonical, res.latents[k])
        errs.append(np.sqrt(np.mean(np.sum((pred.mu - st_.mu) ** 2, axis=1))))
    return max(errs)


def test_prismatic_scene_reconstruction(drawer_fits):
    rmse = [_center_rmse(b, r) for b, r in drawer_fits.values()]
    assert np.median(rmse) < 1e-2


def _drawer_displacement(bundle, res, t):
    moving = bundle.ground_truth.labels == 1
    canon = bundle.canonical.with_labels(bundle.ground_truth.labels)
    a, b = res.latents[0], res.latents[-1]
    st_ = interpolate(res.net, a, b, t, canon, part_filter=[1])
    start = deform(res.net, canon, a)
    return float(np.mean(np.linalg.norm(st_.mu[moving] - start.mu[moving], axis=1)))


def test_interpolation_monotone(drawer_fits):
    rhos = []
    for bundle, res in drawer_fits.values():
        d = [_drawer_displacement(bundle, res, t) for t in T_GRID]
        assert np.all(np.diff(d) > 0)
        rhos.append(spearmanr(T_GRID, d).statistic)
    assert np.median(rhos) == pytest.approx(1.0, abs=1e-12)


def test_interpolation_endpoints_exact(drawer_fits):
    bundle, res = drawer_fits[0]
    a, b = res.latents[0], res.latents[-1]
    for t, lat in ((0.0, a), (1.0, b)):
        got = interpolate(res.net, a, b, t, bundle.canonical)
        assert got == deform(res.net, bundle.canonical, lat)


def test_part_filter_keeps_other_parts_at_start(drawer_fits):
    bundle, res = drawer_fits[1]
    canon = bundle.canonical.with_labels(bundle.ground_truth.labels)
    a, b = res.latents[0], res.latents[-1]
    got = interpolate(res.net, a, b, 0.6, canon, part_filter=[1])
    base = deform(res.net, canon, a)
    static = canon.label == 0
    assert np.array_equal(got.mu[static], base.mu[static])
    assert not np.array_equal(got.mu[~static], base.mu[~static])
    assert np.array_equal(got.rgb, canon.rgb) and np.array_equal(got.opacity, canon.opacity)
    np.testing.assert_allclose(np.linalg.norm(got.q, axis=1), 1.0, atol=1e-9)


def test_part_filter_unknown_label(drawer_fits):
    bundle, res = drawer_fits[0]
    with pytest.raises(DeformError, match="unknown part"):
        interpolate(res.net, res.latents[0], res.latents[1], 0.5, bundle.canonical,
                    part_filter=[9])


def test_checkpoint_round_trip(tmp_path, drawer_fits):
    _, res = drawer_fits[2]
    save_checkpoint(res, tmp_path / "ck.json")
    back = load_checkpoint(tmp_path / "ck.json")
    assert np.array_equal(back.latents, res.latents)
    assert back.config == res.config and back.final_loss == res.final_loss
    assert all(np.array_equal(x, y) for x, y in zip(back.net.params(), res.net.params()))
    assert np.array_equal(back.net.mu_center, res.net.mu_center)


def test_checkpoint_format_checked(tmp_path):
    (tmp_path / "ck.json").write_text('{"format": "other"}')
    with pytest.raises(DeformError, match="format"):
        load_checkpoint(tmp_path / "ck.json")
