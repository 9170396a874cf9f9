import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stormsplat.gaussians import (
    DegenerateRotationError,
    DiffGaussians,
    GaussianGroup,
    GaussianSequence,
    compose,
    covariance,
    decompose,
    morton_encode,
    morton_sort,
    read_gseq,
    write_gseq,
)
from stormsplat.renderer import RenderPlane, render_plane
from stormsplat.volume import FormatError

finite = st.floats(-3, 3, allow_nan=False)


def random_group(rng, M, N=2):
    return GaussianGroup(rng.uniform(0, 8, (M, 3)), rng.normal(size=(M, N)), rng.normal(0, 0.3, (M, 3)),
                         rng.normal(size=(M, 4)), nonneg=[True] + [False] * (N - 1))


def test_identity_covariance():
    np.testing.assert_allclose(covariance(np.zeros(3), [1, 0, 0, 0]), np.eye(3), atol=1e-15)


def test_diagonal_covariance():
    s = np.log([1.0, 2.0, 3.0])
    np.testing.assert_allclose(covariance(s, [1, 0, 0, 0]), np.diag([1.0, 4.0, 9.0]), atol=1e-12)


def test_rotated_covariance():
    # 90 degrees about z, built with scipy as an independent rotation routine
    from scipy.spatial.transform import Rotation

    q = [np.cos(np.pi / 4), 0, 0, np.sin(np.pi / 4)]
    R = Rotation.from_quat([q[1], q[2], q[3], q[0]]).as_matrix()
    S = np.diag([1.0, 2.0, 1.0])
    expected = R @ S @ S.T @ R.T
    got = covariance(np.log([1.0, 2.0, 1.0]), q)
    np.testing.assert_allclose(got, expected, atol=1e-12)
    np.testing.assert_allclose(got, np.diag([4.0, 1.0, 1.0]), atol=1e-12)


def test_degenerate_rotation():
    with pytest.raises(DegenerateRotationError):
        covariance(np.zeros(3), np.zeros(4))


@given(arrays(float, 3, elements=finite), arrays(float, 4, elements=st.floats(-5, 5)))
def test_covariance_spd_and_determinant(s, q):
    if np.linalg.norm(q) < 1e-3:
        q = q + np.array([1.0, 0, 0, 0])
    S = covariance(s, q)
    np.testing.assert_allclose(S, S.T, atol=1e-12)
    np.linalg.cholesky(S)
    np.testing.assert_allclose(np.linalg.det(S), np.exp(2 * s.sum()), rtol=1e-9)


def test_morton_code_layout():
    assert int(morton_encode(3, 5, 6)) == 427


def _hand_interleave(x, y, z, bits):
    code = 0
    for i in range(bits):
        code |= ((x >> i) & 1) << (3 * i) | ((y >> i) & 1) << (3 * i + 1) | ((z >> i) & 1) << (3 * i + 2)
    return code


@given(st.integers(0, 2**21 - 1), st.integers(0, 2**21 - 1), st.integers(0, 2**21 - 1))
def test_morton_matches_bit_loop(x, y, z):
    assert int(morton_encode(x, y, z)) == _hand_interleave(x, y, z, 21)


def test_morton_sort_edge_cases(rng):
    g1 = random_group(rng, 1)
    assert morton_sort(g1).tolist() == [0]
    g = random_group(rng, 2)
    g.positions[1] = g.positions[0]
    assert morton_sort(g).tolist() == [0, 1]
    same = random_group(rng, 5)
    same.positions[:] = 2.0
    assert morton_sort(same).tolist() == list(range(5))


def test_morton_sort_orders_octants():
    pos = np.array([[7, 7, 7], [0, 0, 0], [7, 0, 0], [0, 7, 0], [0, 0, 7]], float)
    g = GaussianGroup(pos, np.zeros((5, 1)), np.zeros((5, 3)), np.tile([1.0, 0, 0, 0], (5, 1)))
    assert morton_sort(g, 1).tolist() == [1, 2, 3, 4, 0]


@given(st.integers(1, 60), st.integers(1, 21), st.integers(0, 1000))
def test_morton_sort_is_permutation(M, bits, seed):
    g = random_group(np.random.default_rng(seed), M)
    perm = morton_sort(g, bits)
    assert sorted(perm.tolist()) == list(range(M))


def test_sorting_does_not_change_render(rng):
    g = random_group(rng, 12)
    perm = morton_sort(g)
    plane = RenderPlane((0, 0, 4.0), (1, 0, 0), (0, 1, 0), 8, 8)
    a = render_plane(g, plane).image
    b = render_plane(g.subset(perm), plane).image
    assert np.max(np.abs(a - b)) < 1e-12


def test_compose_zero_and_inverse(rng):
    g0 = random_group(rng, 6)
    assert compose(g0, DiffGaussians.zeros_like(g0)).allclose(g0)
    gt = random_group(rng, 6)
    back = compose(g0, decompose(gt, g0))
    for k in ("positions", "features", "scales", "quats"):
        np.testing.assert_allclose(getattr(back, k), getattr(gt, k), rtol=0, atol=1e-12)


@given(st.integers(0, 10_000))
def test_decompose_compose_round_trip(seed):
    rng = np.random.default_rng(seed)
    g0 = random_group(rng, 5)
    d = DiffGaussians(*(rng.normal(size=a.shape) for a in (g0.positions, g0.features, g0.scales, g0.quats)))
    r = decompose(compose(g0, d), g0)
    for k in ("positions", "features", "scales", "quats"):
        np.testing.assert_allclose(getattr(r, k), getattr(d, k), atol=1e-12)


def test_compose_cardinality_mismatch(rng):
    with pytest.raises(ValueError, match="cardinality"):
        compose(random_group(rng, 3), DiffGaussians.zeros_like(random_group(rng, 4)))


def _f32_group(rng, M):
    g = random_group(rng, M)
    for k in ("positions", "features", "scales", "quats"):
        setattr(g, k, getattr(g, k).astype(np.float32).astype(np.float64))
    return g


def test_gseq_one_frame_round_trip(tmp_path, rng):
    seq = GaussianSequence(_f32_group(rng, 4), [], (4, 8, 8), ("reflectivity", "velocity"))
    write_gseq(seq, tmp_path / "a.gseq")
    back = read_gseq(tmp_path / "a.gseq")
    assert back.anchor.allclose(seq.anchor) and len(back) == 1
    assert back.dims == (4, 8, 8) and back.channel_names == ("reflectivity", "velocity")


def test_gseq_large_round_trip_bytes(tmp_path, rng):
    groups = [_f32_group(rng, 4096) for _ in range(3)]
    seq = GaussianSequence(groups[0], [decompose(g, groups[0]) for g in groups[1:]] * 12, (16, 32, 32))
    assert len(seq) == 25
    p = tmp_path / "big.gseq"
    write_gseq(seq, p)
    write_gseq(read_gseq(p), tmp_path / "again.gseq")
    assert p.read_bytes() == (tmp_path / "again.gseq").read_bytes()


def test_gseq_truncated(tmp_path, rng):
    p = tmp_path / "t.gseq"
    write_gseq(GaussianSequence(random_group(rng, 4)), p)
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(FormatError, match="expected .* got"):
        read_gseq(p)


def test_gseq_version_mismatch(tmp_path, rng):
    p = tmp_path / "v.gseq"
    write_gseq(GaussianSequence(random_group(rng, 2)), p)
    p.write_bytes(b"GSEQ0002" + p.read_bytes()[8:])
    with pytest.raises(FormatError, match="version"):
        read_gseq(p)


def test_sequence_frames(rng):
    groups = [random_group(rng, 5) for _ in range(3)]
    seq = GaussianSequence.from_groups(groups)
    assert np.all(seq.delta(0).to_matrix() == 0)
    for t, g in enumerate(seq.frames()):
        np.testing.assert_allclose(g.to_matrix(), groups[t].to_matrix(), atol=1e-12)
