import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from metamorph.rigidbody import Pose, chain_structure, planar_form
from metamorph.spring_energy import (
    DegenerateSpringError,
    Spring,
    rodrigues,
    rotation_gradient,
    skew,
    spring_gradient,
    spring_hessian,
    spring_potential,
    total_energy_report,
)
from tests.conftest import central_diff, random_axis_angle, random_pose, random_spring, rel_err

vectors = st.lists(st.floats(-4.0, 4.0, allow_nan=False), min_size=3, max_size=3)


def test_rodrigues_special_values():
    assert np.allclose(rodrigues(np.zeros(3)), np.eye(3))
    assert np.allclose(rodrigues([0, 0, np.pi]), np.diag([-1.0, -1.0, 1.0]), atol=1e-15)


@settings(max_examples=200, deadline=None)
@given(vectors, st.sampled_from([None, 1e-9, 1e-7, 1e-3, 3.0]))
def test_rodrigues_orthonormal(v, magnitude):
    a = np.array(v)
    if magnitude is not None and np.linalg.norm(a) > 0:
        a = a / np.linalg.norm(a) * magnitude
    R = rodrigues(a)
    assert np.max(np.abs(R.T @ R - np.eye(3))) <= 1e-12
    assert abs(np.linalg.det(R) - 1.0) <= 1e-10


def test_rotation_gradient_small_angle_limit():
    for i in range(3):
        e = np.zeros(3)
        e[i] = 1.0
        assert np.allclose(rotation_gradient(np.zeros(3), i), skew(e))


def test_rotation_gradient_planar_derivative():
    dR = rotation_gradient([0, 0, np.pi / 2], 2)
    assert dR[0, 0] == pytest.approx(-1.0)
    assert dR[0, 1] == pytest.approx(0.0, abs=1e-15)
    assert dR[1, 0] == pytest.approx(0.0, abs=1e-15)


@pytest.mark.parametrize("magnitude", [1e-9, 1e-3, 0.7, 3.0])
def test_rotation_gradient_matches_finite_differences(rng, magnitude):
    for _ in range(25):
        a = random_axis_angle(rng, magnitude)
        fd = central_diff(lambda x: rodrigues(x).ravel(), a, 1e-6)
        for i in range(3):
            assert np.max(np.abs(rotation_gradient(a, i).ravel() - fd[:, i])) <= 1e-5


def test_potential_examples():
    sp = Spring(0, 0, 1, [0, 0, 0], [0, 0, 0], 2.0, 1.0, 1.0)
    p1 = Pose([0, 0, 0], [0, 0, 0])
    p2 = Pose([3, 0, 0], [0, 0, 0])
    assert spring_potential(sp, p1, p2) == pytest.approx(4.0)
    rest = Spring(0, 0, 1, [0, 0, 0], [0, 0, 0], 2.0, 3.0, 3.0)
    assert spring_potential(rest, p1, p2) == 0.0
    assert np.allclose(spring_gradient(rest, p1, p2), 0.0)


def test_potential_against_world_distance(rng):
    from metamorph.rigidbody import world_point
    for _ in range(20):
        sp, a, b = random_spring(rng), random_pose(rng), random_pose(rng)
        d = np.linalg.norm(world_point(a, sp.u1_local) - world_point(b, sp.u2_local))
        assert spring_potential(sp, a, b) == pytest.approx(0.5 * sp.k * (sp.l - d) ** 2)


def test_gradient_newton_third_law(rng):
    sp, a, b = random_spring(rng), random_pose(rng), random_pose(rng)
    g = spring_gradient(sp, a, b)
    assert np.allclose(g[0:3], -g[6:9])


def _energy_at(sp, x):
    return spring_potential(sp, Pose(x[0:3], x[3:6]), Pose(x[6:9], x[9:12]))


def _grad_at(sp, x):
    return spring_gradient(sp, Pose(x[0:3], x[3:6]), Pose(x[6:9], x[9:12]))


def test_gradient_matches_finite_differences(rng):
    worst = 0.0
    for _ in range(100):
        sp, a, b = random_spring(rng), random_pose(rng), random_pose(rng)
        x = np.concatenate([a.p, a.a, b.p, b.a])
        fd = central_diff(lambda z: _energy_at(sp, z), x, 1e-6)
        worst = max(worst, rel_err(_grad_at(sp, x), fd))
    assert worst <= 1e-6


def test_hessian_matches_finite_differences_and_is_symmetric(rng):
    worst = 0.0
    for _ in range(100):
        sp, a, b = random_spring(rng), random_pose(rng), random_pose(rng)
        x = np.concatenate([a.p, a.a, b.p, b.a])
        H = spring_hessian(sp, a, b)
        fd = central_diff(lambda z: _grad_at(sp, z), x, 1e-6)
        worst = max(worst, rel_err(H, fd))
        assert np.max(np.abs(H - H.T)) <= 1e-9 * np.max(np.abs(H))
    assert worst <= 1e-5


def test_hessian_zero_rest_length_translation_block():
    sp = Spring(0, 0, 1, [0, 0, 0], [0, 0, 0], 3.0, 1e-12, 1.0)
    H = spring_hessian(sp, Pose([0, 0, 0], [0, 0, 0]), Pose([2.0, 1.0, 0], [0, 0, 0]))
    assert np.allclose(H[0:3, 0:3], 3.0 * np.eye(3), atol=1e-9)


def test_rigid_motion_invariance(rng):
    for _ in range(20):
        sp, a, b = random_spring(rng), random_pose(rng), random_pose(rng)
        V = spring_potential(sp, a, b)
        th = rng.uniform(-np.pi, np.pi)
        t = rng.normal(size=3) * 30
        Rg = rodrigues([0, 0, th])

        def move(p):
            from scipy.spatial.transform import Rotation
            R = Rg @ rodrigues(p.a)
            return Pose(Rg @ p.p + t, Rotation.from_matrix(R).as_rotvec())

        assert spring_potential(sp, move(a), move(b)) == pytest.approx(V, rel=1e-10, abs=1e-12)


def test_degenerate_spring():
    sp = Spring(3, 0, 1, [0, 0, 0], [0, 0, 0], 1.0, 1.0, 1.0)
    p = Pose([1, 1, 0], [0, 0, 0])
    with pytest.raises(DegenerateSpringError) as err:
        spring_gradient(sp, p, p)
    assert err.value.spring_id == 3


def test_total_energy_gravity_only():
    st = chain_structure([100.0], fixed_pose=Pose.planar(0, 0, 0))
    form = planar_form(st, [[-50, 20], [50, 20]])
    rep = total_energy_report(st, form)
    m = st.bars[0].mass
    assert rep.V == pytest.approx(m * 9810.0 * 20)
    assert rep.grad[1] == pytest.approx(m * 9810.0)
    assert np.count_nonzero(rep.grad) == 1
    assert np.all(rep.hess == 0.0)


def test_total_energy_gradient_consistency(rng):
    st = chain_structure([60.0, 70.0, 80.0], gravity=[0, -9810.0, 0])
    springs = [Spring(0, 0, 2, st.bars[0].local_point(0.3), st.bars[2].local_point(0.8), 2.0, 40.0, 40.0),
               Spring(1, 1, 2, st.bars[1].local_point(0.1), st.bars[2].local_point(0.5), 1.5, 20.0, 20.0)]
    st = st.with_springs(springs)
    from metamorph.rigidbody import Form
    for _ in range(10):
        q = rng.normal(scale=0.6, size=18) + np.repeat([0, 30, 60], 6) * np.tile([1, 0, 0, 0, 0, 0], 3)
        rep = total_energy_report(st, Form.from_array(q))
        fd = central_diff(lambda z: total_energy_report(st, Form.from_array(z), with_hessian=False).V, q, 1e-6)
        assert rel_err(rep.grad, fd) <= 1e-6


def test_springs_at_rest_without_gravity_have_zero_gradient():
    st = chain_structure([50.0, 50.0], gravity=[0, 0, 0])
    form = planar_form(st, [[0, 0], [50, 0], [50, 50]])
    a = st.bars[0].local_point(0.0)
    b = st.bars[1].local_point(1.0)
    d = np.hypot(50, 50)
    st = st.with_springs([Spring(0, 0, 1, a, b, 1.0, d, d)])
    assert np.allclose(total_energy_report(st, form).grad, 0.0, atol=1e-9)
