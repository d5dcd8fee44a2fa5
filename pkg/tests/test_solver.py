import numpy as np
import pytest

from dynslam import geometry as g
from dynslam import solver as s
from dynslam.errors import NoConsensus

from helpers import numeric_jacobian, random_state

K = g.CameraIntrinsics(500.0, 500.0, 320.0, 240.0, baseline=0.5)


def scene(rng, n=20, truth=None):
    truth = truth or g.se3_exp([0.05, -0.1, 0.02, 0.3, -0.1, 0.8])
    pc = np.stack([rng.uniform(-4, 4, n), rng.uniform(-3, 3, n), rng.uniform(5, 25, n)], axis=1)
    world = truth.apply(pc)
    uv = g.project(pc, K)
    return truth, world, uv


def pose_gap(a, b):
    e = g.compose(g.inverse(a), b)
    return np.linalg.norm(e.t), g.rotation_angle(e.R)


def test_robust_weight_examples():
    assert s.robust_weight(0.0, 2.0) == 1.0
    assert s.robust_weight(2.0, 2.0) == 1.0
    assert s.robust_weight(4.0, 2.0) == 0.5


def test_quadratic_toy_converges_fast():
    p = s.LeastSquaresProblem()
    vid = p.add_point([0.0, 0.0, 0.0])
    a = np.array([1.5, -2.0, 3.25])
    p.add(s.PointPriorFactors([vid], [a]))
    _, rep = s.lm_minimize(p)
    assert rep.iterations <= 3
    np.testing.assert_allclose(p.point(vid), a, atol=1e-12)


def test_already_optimal_problem_stays_put():
    rng = np.random.default_rng(0)
    truth, world, uv = scene(rng)
    p = s.LeastSquaresProblem()
    cid = p.add_pose(truth)
    pids = p.add_points(world, fixed=True)
    p.add(s.ReprojectionFactors(np.full(len(pids), cid), pids, uv, K))
    before = p.cost()
    _, rep = s.lm_minimize(p)
    assert rep.iterations <= 1
    assert abs(rep.final_cost - before) < 1e-12
    dt, dr = pose_gap(p.pose(cid), truth)
    assert dt < 1e-12 and dr < 1e-12


@pytest.mark.parametrize("path", ["graph", "fast"])
def test_single_pose_recovered_from_perturbed_init(path):
    rng = np.random.default_rng(1)
    truth, world, uv = scene(rng)
    init = g.perturb(truth, [0.1 / np.sqrt(3)] * 3 + [0.1 / np.sqrt(3)] * 3)
    if path == "graph":
        p = s.LeastSquaresProblem()
        cid = p.add_pose(init)
        pids = p.add_points(world, fixed=True)
        p.add(s.ReprojectionFactors(np.full(len(pids), cid), pids, uv, K))
        _, rep = s.lm_minimize(p)
        est = p.pose(cid)
    else:
        est, rep = s.refine_pose(init, world, uv, K, delta=2.0)
    dt, dr = pose_gap(est, truth)
    assert dt < 1e-6 and dr < 1e-6
    assert rep.monotone()
    assert rep.converged


def test_object_motion_fast_path_recovers_motion():
    rng = np.random.default_rng(2)
    X = g.se3_exp([0.0, 0.05, 0.0, 0.2, 0.0, 1.0])
    O = g.se3_exp([0.0, 0.03, 0.0, 0.5, 0.0, 0.1])
    P_prev = X.apply(np.stack([rng.uniform(-1, 1, 40), rng.uniform(-1, 1, 40), rng.uniform(8, 10, 40)], axis=1))
    uv = g.project(g.inverse(X).apply(O.apply(P_prev)), K)
    est, rep = s.refine_pose(g.Pose.identity(), P_prev, uv, K, delta=2.0, transform=X)
    dt, dr = pose_gap(est, O)
    assert dt < 1e-6 and dr < 1e-6


def test_all_factor_jacobians_match_central_differences_at_100_states():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        R, t = random_state(rng, 3, 2)
        obs = rng.uniform(0, 600, (1, 3))
        groups = [
            s.ReprojectionFactors([0], [3], obs, K, has_depth=[1]),
            s.ObjectReprojectionFactors([0], [1], [4], obs[:, :2], K),
            s.PointMotionFactors([3], [2], [4]),
            s.MotionSmoothnessFactors([1], [2]),
            s.PointPriorFactors([4], rng.normal(size=(1, 3))),
        ]
        for grp in groups:
            _, Js = grp.evaluate(R, t)
            for slot, (ids, J) in enumerate(zip(grp.slots, Js)):
                num = numeric_jacobian(grp, R, t, slot, ids[0])[0]
                rel = np.linalg.norm(J[0] - num) / max(np.linalg.norm(num), 1e-9)
                worst = max(worst, rel)
    assert worst < 1e-5


def test_schur_solution_matches_dense_solution():
    """Joint pose+point problem: eliminating points gives the same optimum as
    jointly minimising with every variable kept in a single dense system."""
    rng = np.random.default_rng(4)
    truth = [g.Pose.identity(), g.se3_exp([0, 0.05, 0, 0.5, 0, 0.2]), g.se3_exp([0, 0.1, 0, 1.0, 0, 0.3])]
    pts = np.stack([rng.uniform(-3, 3, 30), rng.uniform(-2, 2, 30), rng.uniform(6, 15, 30)], axis=1)

    def build(fix_points_to=None):
        p = s.LeastSquaresProblem()
        cids = [p.add_pose(truth[0], fixed=True)] + [p.add_pose(g.perturb(T, rng.normal(0, 0.01, 6))) for T in truth[1:]]
        noisy = pts + rng.normal(0, 0.05, pts.shape)
        pids = p.add_points(noisy)
        cams, ids, obs, hd = [], [], [], []
        for c, T in zip(cids, truth):
            pc = g.inverse(T).apply(pts)
            uv = g.project(pc, K)
            o = np.concatenate([uv, (uv[:, 0] - K.bf / pc[:, 2])[:, None]], axis=1)
            cams += [c] * len(pts)
            ids += list(pids)
            obs.append(o)
            hd += [1] * len(pts)
        p.add(s.ReprojectionFactors(cams, ids, np.concatenate(obs), K, has_depth=hd))
        return p, cids, pids

    p, cids, pids = build()
    _, rep = s.lm_minimize(p)
    assert rep.monotone()
    for c, T in zip(cids, truth):
        dt, dr = pose_gap(p.pose(c), T)
        assert dt < 1e-6 and dr < 1e-6
    np.testing.assert_allclose(np.array([p.point(i) for i in pids]), pts, atol=1e-6)


def test_ransac_exact_data_all_inliers():
    rng = np.random.default_rng(5)
    truth, world, uv = scene(rng, n=60, truth=g.se3_exp([0.02, 0.1, -0.03, 0.2, 0.05, 0.4]))
    pose, inl = s.ransac_pnp(world, uv, K)
    assert inl.all()
    dt, dr = pose_gap(pose, truth)
    assert dt < 1e-6 and dr < 1e-6


def test_ransac_deterministic_given_seed():
    rng = np.random.default_rng(6)
    truth, world, uv = scene(rng, n=80)
    bad = rng.random(80) < 0.3
    uv[bad] = rng.uniform(0, 640, (bad.sum(), 2))
    a = s.ransac_pnp(world, uv, K, s.RansacParams(seed=11))
    b = s.ransac_pnp(world, uv, K, s.RansacParams(seed=11))
    np.testing.assert_array_equal(a[1], b[1])
    np.testing.assert_array_equal(a[0].matrix(), b[0].matrix())


def test_ransac_needs_four_and_reports_no_consensus():
    rng = np.random.default_rng(7)
    _, world, uv = scene(rng, n=3)
    with pytest.raises(ValueError):
        s.ransac_pnp(world, uv, K)
    _, world, uv = scene(rng, n=30)
    uv = rng.uniform(0, 640, uv.shape)
    with pytest.raises(NoConsensus):
        s.ransac_pnp(world, uv, K, s.RansacParams(iterations=30))


def test_collect_reports_sees_every_solve():
    rng = np.random.default_rng(8)
    truth, world, uv = scene(rng)
    with s.collect_reports() as reports:
        s.refine_pose(g.Pose.identity(), world, uv, K)
        s.refine_pose(truth, world, uv, K)
    assert len(reports) == 2
    assert all(r.monotone() for r in reports)


def test_depth_row_is_a_pure_disparity_difference():
    rng = np.random.default_rng(9)
    X = g.random_pose(rng, max_angle=0.3, max_trans=0.5)
    P = X.apply(np.array([[0.4, -0.3, 9.0], [-1.0, 0.5, 15.0]]))
    z_obs = np.array([8.7, 15.4])
    uv_obs = np.array([[300.0, 250.0], [200.0, 210.0]])
    obs = np.column_stack([uv_obs, uv_obs[:, 0] - K.bf / z_obs])
    grp = s.ReprojectionFactors([0, 0], [1, 2], obs, K, has_depth=[1, 1])
    R = np.stack([X.R, np.eye(3), np.eye(3)])
    t = np.stack([X.t, P[0], P[1]])
    res = grp.evaluate(R, t)[0]
    z_pred = X.inverse().apply(P)[:, 2]
    # pixel noise in u must not leak into the depth row
    np.testing.assert_allclose(res[:, 2], K.bf / z_obs - K.bf / z_pred, atol=1e-10)
    np.testing.assert_allclose(res[:, :2], uv_obs - g.project(X.inverse().apply(P), K), atol=1e-10)
