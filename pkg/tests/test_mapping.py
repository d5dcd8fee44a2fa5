import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynslam import geometry as g
from dynslam import mapping as mp
from dynslam.dataio import Settings, parse_poses
from dynslam.frontend import Points

K = g.CameraIntrinsics(500.0, 500.0, 320.0, 240.0, baseline=0.5)
S = Settings(K, th_depth=20.0, th_depth_obj=15.0, depth_map_factor=256.0)


def two_views(rng, n=40, baseline=1.0):
    Xa = g.Pose.identity()
    Xb = g.Pose.from_rt(g.so3_exp([0, 0.02, 0]), [baseline, 0.0, 0.2])
    P = np.stack([rng.uniform(-3, 3, n), rng.uniform(-2, 2, n), rng.uniform(6, 20, n)], axis=1)
    uva = g.project(Xa.inverse().apply(P), K)
    uvb = g.project(Xb.inverse().apply(P), K)
    return Xa, Xb, P, uva, uvb


def test_zero_baseline_pair_all_rejected_by_parallax():
    rng = np.random.default_rng(0)
    Xa, _, P, uva, _ = two_views(rng)
    res = mp.insert_triangulated(uva, uva, Xa, Xa, K, S)
    assert not res.accepted.any()
    assert not res.parallax_ok.any()


def test_exact_pixels_triangulate_to_truth():
    rng = np.random.default_rng(1)
    Xa, Xb, P, uva, uvb = two_views(rng)
    res = mp.insert_triangulated(uva, uvb, Xa, Xb, K, S)
    ok = res.accepted
    assert ok.sum() > 30
    assert np.max(np.linalg.norm(res.xyz[ok] - P[ok], axis=1)) < 1e-6


def test_five_pixel_error_rejected_by_reprojection_gate():
    rng = np.random.default_rng(2)
    Xa, Xb, P, uva, uvb = two_views(rng)
    res0 = mp.insert_triangulated(uva, uvb, Xa, Xb, K, S)
    uvb = uvb.copy()
    uvb[0, 1] += 5.0  # vertical error cannot be absorbed along the epipolar line
    res = mp.insert_triangulated(uva, uvb, Xa, Xb, K, S)
    assert res0.accepted[0] and not res.accepted[0]
    assert not res.reprojection_ok[0]
    assert (res.accepted[1:] == res0.accepted[1:]).all()


def test_accepted_points_reproject_within_gate():
    rng = np.random.default_rng(3)
    Xa, Xb, P, uva, uvb = two_views(rng, n=200)
    uvb = uvb + rng.normal(scale=1.0, size=uvb.shape)
    res = mp.insert_triangulated(uva, uvb, Xa, Xb, K, S)
    P_ok = res.xyz[res.accepted]
    for X, uv in ((Xa, uva), (Xb, uvb)):
        err = np.linalg.norm(g.project(X.inverse().apply(P_ok), K) - uv[res.accepted], axis=1)
        assert np.all(err < S.reproj_gate)


def _points(ids, uv, xyz, close, depth=10.0):
    n = len(ids)
    return Points.build(ids, uv, xyz, np.zeros(n, int), np.full(n, depth), close)


def test_close_points_created_far_points_wait_for_triangulation():
    rng = np.random.default_rng(4)
    Xa, Xb, P, uva, uvb = two_views(rng, n=10)
    smap = mp.SparseMap()
    close = np.array([True] * 5 + [False] * 5)
    smap.add_keyframe(0, Xa, _points(np.arange(10), uva, P, close), K, S)
    assert sorted(smap.points) == [0, 1, 2, 3, 4]
    assert all(p.single for p in smap.points.values())
    assert sorted(smap.pending) == [5, 6, 7, 8, 9]
    smap.add_keyframe(1, Xb, _points(np.arange(10), uvb, P, close), K, S)
    triangulated = [p for p in smap.points.values() if not p.single]
    assert {p.id for p in triangulated} <= {5, 6, 7, 8, 9}
    assert len(triangulated) >= 3
    for p in triangulated:
        assert p.nobs == 2
        assert np.linalg.norm(p.xyz - P[p.id]) < 1e-6
    # invariant: each point is multi-view or a flagged single back-projection
    assert all(p.nobs >= 2 or p.single for p in smap.points.values())


def test_keyframes_must_increase():
    smap = mp.SparseMap()
    smap.add_keyframe(3, g.Pose.identity(), Points.empty(), K, S)
    with pytest.raises(ValueError):
        smap.add_keyframe(3, g.Pose.identity(), Points.empty(), K, S)


def _map_with(obs_counts, created, n_keyframes=None):
    smap = mp.SparseMap()
    for i in range(n_keyframes or max(created) + 5):
        smap.keyframes.append(mp.Keyframe(i, g.Pose.identity()))
    for pid, (nobs, c) in enumerate(zip(obs_counts, created)):
        smap.points[pid] = mp.MapPoint(pid, np.zeros(3), {f: (0.0, 0.0) for f in range(nobs)}, {}, c, True)
    return smap


def test_cull_examples():
    # five keyframes, so the current ordinal is 4
    smap = _map_with([5, 1, 1], [0, 0, 3], n_keyframes=5)
    mp.cull_points(smap)
    assert 0 in smap.points  # observed 5 times
    assert 1 not in smap.points  # seen once, 4 keyframes old
    assert 2 in smap.points  # seen once but still inside the grace window


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 4), st.integers(0, 8)), min_size=0, max_size=20))
def test_cull_idempotent(rows):
    if not rows:
        rows = [(1, 0)]
    smap = _map_with([r[0] for r in rows], [r[1] for r in rows])
    once = sorted(mp.cull_points(smap).points)
    twice = sorted(mp.cull_points(smap).points)
    assert once == twice


def test_sparse_map_export(tmp_path):
    smap = mp.SparseMap()
    path = tmp_path / "map.txt"
    mp.export_sparse_map(smap, path)
    assert path.read_text() == "x y z id nobs\n"
    rng = np.random.default_rng(5)
    xyz = np.round(rng.normal(size=(7, 3)) * 10, 6)
    for pid in (9, 2, 5, 0, 7, 1, 3):
        smap.points[pid] = mp.MapPoint(pid, xyz[pid % 7], {0: (0, 0), 1: (0, 0)}, {}, 0, False)
    mp.export_sparse_map(smap, path)
    lines = path.read_text().splitlines()
    assert len(lines) == len(smap) + 1
    got, ids, nobs = mp.read_sparse_map(path)
    assert list(ids) == sorted(smap.points)
    assert np.array_equal(got, np.array([smap.points[i].xyz for i in ids]))
    assert (nobs == 2).all()


def test_trajectory_round_trip(tmp_path):
    rng = np.random.default_rng(6)
    traj = mp.TrajectoryMap()
    for f in range(5):
        traj.add_camera(f, g.random_pose(rng, max_trans=10))
    for f in (1, 2, 4):  # object absent in frame 3
        traj.add_object(mp.ObjectEntry(f, 7, rng.normal(size=3), g.random_pose(rng), 3.5 + f))
    mp.export_trajectories(traj, tmp_path)
    cam, motions, speeds = mp.load_trajectories(tmp_path)
    for f, T in traj.camera.items():
        assert np.abs(cam[f].matrix() - T.matrix()).max() < 1e-12
    assert sorted(motions) == [(1, 7), (2, 7), (4, 7)]
    for e in traj.objects[7]:
        assert np.abs(motions[(e.frame, 7)].matrix() - e.motion.matrix()).max() < 1e-12
        assert speeds[(e.frame, 7)] == pytest.approx(e.speed, rel=1e-9)
    rows = [ln for ln in (tmp_path / mp.OBJECT_FILE).read_text().splitlines() if not ln.startswith("#")]
    assert [int(r.split()[0]) for r in rows] == [1, 2, 4]


def test_identity_trajectory_rows(tmp_path):
    traj = mp.TrajectoryMap()
    for f in range(3):
        traj.add_camera(f, g.Pose.identity())
    mp.export_trajectories(traj, tmp_path)
    for f, T in parse_poses(tmp_path / mp.CAMERA_FILE):
        assert np.array_equal(T.matrix(), np.eye(4))


def test_trajectory_is_append_only():
    traj = mp.TrajectoryMap()
    traj.add_object(mp.ObjectEntry(2, 1, np.zeros(3), g.Pose.identity(), 0.0))
    with pytest.raises(ValueError):
        traj.add_object(mp.ObjectEntry(2, 1, np.zeros(3), g.Pose.identity(), 0.0))
