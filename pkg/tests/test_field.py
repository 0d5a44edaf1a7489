import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from artikin import quaternion as quat
from artikin import synth
from artikin.field import (FieldError, GaussianPrimitive, JointModel, SceneBundle,
                           StateSnapshot, bundle_to_dict, covariance_of, covariances,
                           load_scene, look_at, save_field)

IDENT = [1.0, 0.0, 0.0, 0.0]


def _prim(mu=(0, 0, 0), q=IDENT, s=(1, 1, 1), label=0):
    return GaussianPrimitive(mu, q, s, (0.5, 0.5, 0.5), 0.8, label)


def _minimal_doc():
    cam = look_at([0, -3, 0], [0, 0, 0], 50, 50, 32, 24)
    st = StateSnapshot.from_primitives([_prim()])
    b = SceneBundle(st, [st, st.with_geometry(state_index=1)], [[cam], [cam]])
    return bundle_to_dict(b)


def _write(tmp_path, doc):
    path = tmp_path / "scene.json"
    path.write_text(json.dumps(doc))
    return path


def test_minimal_manifest_loads(tmp_path):
    b = load_scene(_write(tmp_path, _minimal_doc()))
    assert b.K == 2 and b.N == 1
    assert len(b.states) == 2


def test_directory_path_resolves_to_manifest(tmp_path):
    _write(tmp_path, _minimal_doc())
    assert load_scene(tmp_path).N == 1


def test_primitive_count_mismatch(tmp_path):
    doc = _minimal_doc()
    doc["states"][1]["primitives"] = []
    with pytest.raises(FieldError, match="primitive count mismatch"):
        load_scene(_write(tmp_path, doc))


def test_non_unit_quaternion_rejected_not_renormalized(tmp_path):
    doc = _minimal_doc()
    doc["states"][0]["primitives"][0]["q"] = [1.0, 1e-3, 0.0, 0.0]
    with pytest.raises(FieldError, match="quaternion"):
        load_scene(_write(tmp_path, doc))


def test_missing_file(tmp_path):
    with pytest.raises(FieldError, match="not found"):
        load_scene(tmp_path / "nope.json")


def test_malformed_record(tmp_path):
    doc = _minimal_doc()
    del doc["states"][0]["primitives"][0]["mu"]
    with pytest.raises(FieldError, match="malformed"):
        load_scene(_write(tmp_path, doc))


def test_single_state_rejected(tmp_path):
    doc = _minimal_doc()
    doc["states"] = doc["states"][:1]
    doc["cameras"] = doc["cameras"][:1]
    with pytest.raises(FieldError, match="at least two states"):
        load_scene(_write(tmp_path, doc))


def test_state_without_camera_rejected(tmp_path):
    doc = _minimal_doc()
    doc["cameras"][1] = []
    with pytest.raises(FieldError, match="no cameras"):
        load_scene(_write(tmp_path, doc))


def test_round_trip_three_part_scene(tmp_path, storage3):
    save_field(storage3, tmp_path)
    back = load_scene(tmp_path)
    assert back == storage3
    for a, b in zip(back.states, storage3.states):
        assert np.array_equal(a.mu, b.mu) and np.array_equal(a.q, b.q)


def test_round_trip_ten_thousand_primitives(tmp_path):
    b = synth.generate_scene(synth.preset("storage2", seed=5, total_gaussians=10_000,
                                          cameras=synth.CameraRing(count=1)))
    assert b.N == 10_000
    save_field(b, tmp_path / "big.json")
    assert load_scene(tmp_path / "big.json") == b


def test_no_ground_truth_block_omitted(tmp_path):
    doc = _minimal_doc()
    assert "ground_truth" not in doc
    b = load_scene(_write(tmp_path, doc))
    save_field(b, tmp_path / "out.json")
    assert "ground_truth" not in json.loads((tmp_path / "out.json").read_text())


def test_nan_center_rejected_before_writing(tmp_path):
    b = load_scene(_write(tmp_path, _minimal_doc()))
    bad = b.states[0].with_geometry(mu=[[math.nan, 0, 0]])
    broken = SceneBundle(b.canonical, [bad, b.states[1]], b.cameras)
    with pytest.raises(FieldError, match="non-finite"):
        save_field(broken, tmp_path / "bad.json")
    assert not (tmp_path / "bad.json").exists()


def test_appearance_must_match_canonical(tmp_path):
    doc = _minimal_doc()
    doc["states"][1]["primitives"][0]["rgb"] = [0.1, 0.1, 0.1]
    with pytest.raises(FieldError, match="appearance"):
        load_scene(_write(tmp_path, doc))


def test_primitive_validation():
    with pytest.raises(FieldError):
        _prim(s=(1, 0, 1))
    with pytest.raises(FieldError):
        _prim(label=-1)
    with pytest.raises(FieldError):
        GaussianPrimitive([0, 0, 0], IDENT, [1, 1, 1], [1.5, 0, 0], 0.5)


def test_isotropic_covariance():
    np.testing.assert_allclose(covariance_of(_prim(s=(2, 2, 2))), np.eye(3), atol=1e-15)


def test_quarter_turn_permutes_axes():
    q = quat.from_axis_angle([0, 0, 1], math.pi / 2)
    a, b, c = 0.3, 0.7, 1.1
    cov = covariance_of(_prim(q=q, s=(2 * a, 2 * b, 2 * c)))
    np.testing.assert_allclose(cov, np.diag([b * b, a * a, c * c]), atol=1e-15)


unit = arrays(float, 4, elements=st.floats(-1, 1)).filter(lambda v: np.linalg.norm(v) > 0.1)
scales = arrays(float, 3, elements=st.floats(1e-3, 5.0))


@given(unit, scales)
def test_covariance_eigenvalues(q, s):
    cov = covariance_of(_prim(q=quat.normalize(q), s=s))
    assert np.max(np.abs(cov - cov.T)) <= 1e-12
    assert np.linalg.det(cov) > 0
    np.testing.assert_allclose(np.sort(np.linalg.eigvalsh(cov)), np.sort((s / 2) ** 2),
                               rtol=1e-9, atol=1e-14)


def test_batched_covariances_match(rng):
    q = quat.normalize(rng.normal(size=(20, 4)))
    s = rng.uniform(0.1, 2, size=(20, 3))
    batch = covariances(q, s)
    for i in range(20):
        np.testing.assert_allclose(batch[i], covariance_of(_prim(q=q[i], s=s[i])), atol=1e-15)


def test_appearance_shared_in_synthetic_scene(storage2):
    for st_ in storage2.states:
        assert np.array_equal(st_.rgb, storage2.canonical.rgb)
        assert np.array_equal(st_.opacity, storage2.canonical.opacity)


def test_joint_model_invariants():
    with pytest.raises(FieldError):
        JointModel("revolute", [0, 0, 1], 0.5)
    with pytest.raises(FieldError):
        JointModel("prismatic", [0, 0, 2], 0.5)
    j = JointModel("prismatic", [1, 0, 0], -0.2).canonical()
    assert j.magnitude == 0.2 and np.array_equal(j.axis, [-1, 0, 0])


def test_revolute_transform_fixes_pivot():
    j = JointModel("revolute", [0, 0, 1], 0.7, [1, 2, 3])
    R, t = j.transform()
    np.testing.assert_allclose(R @ j.pivot + t, j.pivot, atol=1e-15)


def test_snapshot_arrays_are_read_only(storage2):
    with pytest.raises(ValueError):
        storage2.canonical.mu[0, 0] = 1.0


def test_look_at_projects_target_to_principal_point():
    cam = look_at([1, -4, 2], [0.2, 0.1, 0.3], 80, 80, 65, 49)
    np.testing.assert_allclose(cam.project([0.2, 0.1, 0.3]), [32, 24], atol=1e-12)
    cam.validate()
