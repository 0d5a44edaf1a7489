import math
from dataclasses import replace

import numpy as np
import pytest

from artikin import synth
from artikin.field import Box, FieldError, JointModel, SceneBundle
from artikin.splat import render_view, silhouette


def test_static_scene_has_identical_states():
    b = synth.generate_scene(synth.preset("static", seed=1))
    assert not b.ground_truth.labels.any() and b.ground_truth.movable_labels == []
    for st in b.states[1:]:
        assert np.array_equal(st.mu, b.canonical.mu) and np.array_equal(st.q, b.canonical.q)


def test_drawer_moves_by_schedule():
    b = synth.generate_scene(synth.preset("drawer", seed=2))
    moving = b.ground_truth.labels == 1
    for k, st in enumerate(b.states):
        step = np.broadcast_to([0, -0.1 * k, 0], (moving.sum(), 3))
        np.testing.assert_allclose(st.mu[moving] - b.canonical.mu[moving], step, atol=1e-12)
        assert np.array_equal(st.mu[~moving], b.canonical.mu[~moving])


def test_door_keeps_distance_to_hinge(storage2):
    door = storage2.ground_truth.part(1)
    sel = storage2.ground_truth.labels == 1

    def hinge_distance(mu):
        w = mu - door.pivot
        return np.linalg.norm(w - np.outer(w @ door.axis, door.axis), axis=1)

    ref = hinge_distance(storage2.canonical.mu[sel])
    for st in storage2.states[1:]:
        np.testing.assert_allclose(hinge_distance(st.mu[sel]), ref, atol=1e-12)


def test_states_follow_declared_joints(storage3):
    gt = storage3.ground_truth
    for lab in gt.movable_labels:
        sel = gt.labels == lab
        for k in range(storage3.K):
            R, t = gt.part(lab).joint_between(0, k).transform()
            np.testing.assert_allclose(storage3.states[k].mu[sel],
                                       storage3.canonical.mu[sel] @ R.T + t, atol=1e-12)


def test_generation_is_deterministic():
    a = synth.generate_scene(synth.preset("box", seed=5))
    b = synth.generate_scene(synth.preset("box", seed=5))
    c = synth.generate_scene(synth.preset("box", seed=6))
    assert a == b
    assert not np.array_equal(a.canonical.mu, c.canonical.mu)


def test_every_preset_builds():
    for name in synth.PRESETS:
        b = synth.generate_scene(synth.preset(name, seed=0, total_gaussians=300,
                                              cameras=synth.CameraRing(count=2)))
        assert b.K == 4 and len(b.cameras[0]) == 2
    with pytest.raises(KeyError):
        synth.preset("teapot")


def test_overlapping_parts_rejected():
    spec = synth.preset("drawer")
    bad = synth.PartSpec(Box([0, 0, 0.5], [0.2, 0.2, 0.2]), JointModel("prismatic", (1, 0, 0), 0),
                         (0, 0.1, 0.2, 0.3))
    with pytest.raises(FieldError, match="overlap"):
        synth.generate_scene(replace(spec, parts=(bad,)))


def test_schedule_length_checked():
    spec = synth.preset("drawer")
    part = replace(spec.parts[0], schedule=(0.0, 0.1))
    with pytest.raises(FieldError, match="schedule"):
        synth.generate_scene(replace(spec, parts=(part,)))


def test_camera_elevations_in_range(storage2):
    target = np.array(synth.CameraRing().target)
    for cam in storage2.cameras[0]:
        d = cam.center - target
        el = math.degrees(math.asin(d[2] / np.linalg.norm(d)))
        assert 30 - 1e-9 <= el <= 60 + 1e-9


def test_empty_part_gives_empty_mask():
    b = synth.generate_scene(synth.preset("drawer", seed=0, total_gaussians=200))
    nobody = replace(b.ground_truth, labels=np.zeros(b.N, np.int64))
    masks = {m.label: m.mask for m in synth.ground_truth_masks(
        SceneBundle(b.canonical, b.states, b.cameras, nobody), 0)}
    assert not masks[1].any() and masks[0].any()


def test_masks_disjoint_and_cover_silhouette(storage2):
    keep = np.setdiff1d(np.arange(storage2.N), storage2.ground_truth.straddlers)
    for v in (0, 5, 10, 15):
        masks = [m.mask for m in synth.ground_truth_masks(storage2, v)]
        total = np.sum(masks, axis=0)
        assert total.max() <= 1
        union = total > 0
        sil = silhouette(render_view(storage2.canonical.subset(keep), storage2.cameras[0][v]))
        iou = np.sum(union & sil) / np.sum(union | sil)
        assert iou >= 0.98
