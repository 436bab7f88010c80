import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from glico.errors import (
    CapacityError,
    DegenerateInputError,
    DegeneratePairError,
    InvalidArgumentError,
)
from glico.latent_space import (
    UNLABELED,
    LatentCodebook,
    NoiseSpec,
    gray_vertex,
    init_from_features,
    init_hypercube,
    init_random,
    lerp,
    make_generator_input,
    pick_class_partner,
    project_to_sphere,
    slerp,
)


def unit(rng, d):
    v = rng.standard_normal(d)
    return torch.from_numpy(v / np.linalg.norm(v))


# ------------------------------------------------------------- initialization


def test_init_random_single_code_is_unit():
    cb = init_random(1, 2, seed=11)
    assert cb.codes.shape == (1, 2)
    assert abs(float(torch.linalg.vector_norm(cb.codes[0])) - 1) < 1e-6


def test_init_random_deterministic():
    a = init_random(500, 128, seed=7)
    b = init_random(500, 128, seed=7)
    assert torch.equal(a.codes, b.codes)
    assert a.codes.dtype == torch.float32


def test_init_random_near_orthogonal():
    cb = init_random(10000, 128, seed=3)
    # Monte-Carlo over a random subset of pairs; the expected |cos| in d=128 is ~0.07
    rng = np.random.default_rng(0)
    i = rng.integers(0, 10000, 20000)
    j = rng.integers(0, 10000, 20000)
    keep = i != j
    cos = (cb.codes[i[keep]].double() * cb.codes[j[keep]].double()).sum(1).abs()
    assert float(cos.mean()) < 0.25
    assert cb.max_norm_error() < 1e-5


@pytest.mark.parametrize("n,d", [(0, 4), (3, 0), (-1, 2)])
def test_init_random_rejects_bad_sizes(n, d):
    with pytest.raises(InvalidArgumentError):
        init_random(n, d, seed=0)


def test_hypercube_zero_jitter_two_classes():
    labels = [0, 0, 1, 1, 1]
    cb = init_hypercube(labels, d=2, jitter=0.0, seed=0)
    c = cb.codes.double()
    assert torch.allclose(c[0], c[1]) and torch.allclose(c[2], c[4])
    dot = float(c[0] @ c[2])
    assert abs(dot) < 1e-6 or abs(dot + 1) < 1e-6
    assert cb.max_norm_error() < 1e-6


def test_hypercube_within_class_tighter_than_between():
    labels = np.repeat(np.arange(10), 20)
    cb = init_hypercube(labels, d=128, jitter=0.1, seed=5)
    c = cb.codes.double()
    sims = c @ c.T
    same = labels[:, None] == labels[None, :]
    off = ~np.eye(len(labels), dtype=bool)
    within = float(sims[torch.from_numpy(same & off)].mean())
    between = float(sims[torch.from_numpy(~same)].mean())
    assert within > between


def test_hypercube_capacity():
    with pytest.raises(CapacityError):
        init_hypercube([0, 1, 2], d=1, jitter=0.0, seed=0)


def test_gray_vertices_distinct():
    verts = {tuple(gray_vertex(k, 4)) for k in range(16)}
    assert len(verts) == 16
    # consecutive Gray codes differ in exactly one coordinate
    assert np.sum(gray_vertex(5, 4) != gray_vertex(6, 4)) == 1


def test_init_from_features_projects_and_normalizes():
    rng = np.random.default_rng(0)
    feats = rng.standard_normal((30, 64))
    cb = init_from_features(feats, np.repeat([0, 1, 2], 10), d=16, seed=1)
    assert cb.codes.shape == (30, 16)
    assert cb.max_norm_error() < 1e-5


# ----------------------------------------------------------------- projection


def test_project_unit_vector_unchanged():
    v = torch.zeros(5, dtype=torch.float64)
    v[0] = 1
    assert torch.equal(project_to_sphere(v), v)


def test_project_three_four():
    out = project_to_sphere([3.0, 4.0])
    np.testing.assert_allclose(out.numpy(), [0.6, 0.8], atol=1e-12)


def test_project_zero_raises():
    with pytest.raises(DegenerateInputError):
        project_to_sphere(np.zeros(4))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=16).filter(lambda v: np.linalg.norm(v) > 1e-3))
def test_project_idempotent(v):
    once = project_to_sphere(v)
    twice = project_to_sphere(once)
    np.testing.assert_allclose(once.numpy(), twice.numpy(), atol=1e-12)


# ---------------------------------------------------------------------- slerp


def test_slerp_endpoints():
    rng = np.random.default_rng(1)
    q1, q2 = unit(rng, 128), unit(rng, 128)
    np.testing.assert_allclose(slerp(q1, q2, 0.0).numpy(), q1.numpy(), atol=1e-12)
    np.testing.assert_allclose(slerp(q1, q2, 1.0).numpy(), q2.numpy(), atol=1e-12)


def test_slerp_orthogonal_midpoint():
    e1 = torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64)
    e2 = torch.tensor([0.0, 1.0, 0.0], dtype=torch.float64)
    expected = (math.sqrt(2) / 2) * (e1 + e2)
    np.testing.assert_allclose(slerp(e1, e2, 0.5).numpy(), expected.numpy(), atol=1e-12)


def test_slerp_identical_points_lerp_fallback():
    rng = np.random.default_rng(2)
    q = unit(rng, 32)
    np.testing.assert_allclose(slerp(q, q, 0.3).numpy(), q.numpy(), atol=1e-12)


def test_slerp_antipodal_raises():
    rng = np.random.default_rng(3)
    q = unit(rng, 8)
    with pytest.raises(DegeneratePairError):
        slerp(q, -q, 0.3)


def test_slerp_rejects_t_out_of_range():
    e1 = torch.tensor([1.0, 0.0], dtype=torch.float64)
    e2 = torch.tensor([0.0, 1.0], dtype=torch.float64)
    with pytest.raises(InvalidArgumentError):
        slerp(e1, e2, 1.5)


def test_slerp_batched_matches_rowwise():
    rng = np.random.default_rng(4)
    q1 = torch.stack([unit(rng, 16) for _ in range(5)])
    q2 = torch.stack([unit(rng, 16) for _ in range(5)])
    t = torch.tensor([0.0, 0.1, 0.5, 0.9, 1.0], dtype=torch.float64)
    batched = slerp(q1, q2, t)
    for k in range(5):
        np.testing.assert_allclose(batched[k].numpy(), slerp(q1[k], q2[k], float(t[k])).numpy(), atol=1e-12)


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0, 1), st.integers(2, 64))
def test_slerp_properties(seed, t, d):
    rng = np.random.default_rng(seed)
    q1, q2 = unit(rng, d), unit(rng, d)
    out = slerp(q1, q2, t)
    assert abs(float(torch.linalg.vector_norm(out)) - 1) < 1e-5
    theta = math.acos(max(-1.0, min(1.0, float(q1 @ q2))))
    got = math.acos(max(-1.0, min(1.0, float(q1 @ out))))
    assert abs(got - t * theta) < 1e-4
    np.testing.assert_allclose(out.numpy(), slerp(q2, q1, 1 - t).numpy(), atol=1e-6)


# ----------------------------------------------------------------------- lerp


def test_lerp_start():
    rng = np.random.default_rng(5)
    q1, q2 = unit(rng, 10), unit(rng, 10)
    np.testing.assert_allclose(lerp(q1, q2, 0.0).numpy(), q1.numpy(), atol=1e-12)


def test_lerp_orthogonal_midpoint_projected():
    e1 = torch.tensor([1.0, 0.0], dtype=torch.float64)
    e2 = torch.tensor([0.0, 1.0], dtype=torch.float64)
    mid = 0.5 * e1 + 0.5 * e2
    expected = mid / torch.linalg.vector_norm(mid)
    np.testing.assert_allclose(lerp(e1, e2, 0.5).numpy(), expected.numpy(), atol=1e-12)


def test_lerp_antipodal_midpoint_raises():
    q = torch.tensor([0.6, 0.8], dtype=torch.float64)
    with pytest.raises(DegeneratePairError):
        lerp(q, -q, 0.5)


# ------------------------------------------------------------ class partners


def _codebook(labels):
    return init_random(len(labels), 4, seed=0, labels=labels)


def test_partner_two_members():
    cb = _codebook([0, 0, 1])
    rng = np.random.default_rng(0)
    assert all(pick_class_partner(cb, 0, rng) == 1 for _ in range(50))


def test_partner_singleton_is_self():
    cb = _codebook([0, 0, 1])
    assert pick_class_partner(cb, 2, np.random.default_rng(0)) == 2


def test_partner_unlabeled_raises():
    cb = _codebook([0, 0, UNLABELED])
    with pytest.raises(InvalidArgumentError):
        pick_class_partner(cb, 2, np.random.default_rng(0))


def test_partner_uniform_over_remaining_members():
    labels = [0] * 11 + [1] * 4
    cb = _codebook(labels)
    rng = np.random.default_rng(123)
    draws = np.array([pick_class_partner(cb, 0, rng) for _ in range(10_000)])
    assert 0 not in draws
    counts = np.bincount(draws, minlength=15)
    # binomial(1e4, 0.1): sd = 30, so +-150 is a 5-sigma band
    assert np.all(np.abs(counts[1:11] - 1000) <= 150)
    assert counts[11:].sum() == 0


def test_class_index_excludes_unlabeled():
    cb = _codebook([0, UNLABELED, 1, 0, UNLABELED])
    assert set(cb.class_index) == {0, 1}
    members = np.concatenate(list(cb.class_index.values()))
    assert not np.isin([1, 4], members).any()


# ------------------------------------------------------------ generator input


def test_generator_input_no_noise_is_identity():
    z = project_to_sphere(torch.randn(8, dtype=torch.float64))
    out = make_generator_input(z, NoiseSpec(0, 1.0), torch.Generator().manual_seed(0))
    assert out is z


def test_generator_input_zero_sigma():
    z = project_to_sphere(torch.randn(8))
    out = make_generator_input(z, NoiseSpec(16, 0.0), torch.Generator().manual_seed(0))
    assert out.shape == (24,)
    assert torch.equal(out[:8], z)
    assert torch.all(out[8:] == 0)


def test_generator_input_noise_std():
    z = project_to_sphere(torch.randn(100_000, 4, dtype=torch.float64))
    out = make_generator_input(z, NoiseSpec(32, 1.0), torch.Generator().manual_seed(1))
    assert torch.equal(out[:, :4], z)
    assert abs(float(out[:, 4:].std()) - 1.0) < 0.01


def test_additive_noise_keeps_input_dim_and_unit_norm():
    z = project_to_sphere(torch.randn(10_000, 16, dtype=torch.float64))
    out = make_generator_input(z, NoiseSpec(32, 0.3), torch.Generator().manual_seed(2), mode="additive")
    assert out.shape == z.shape
    assert float((torch.linalg.vector_norm(out, dim=1) - 1).abs().max()) < 1e-5


def test_additive_noise_zero_sigma_matches_no_noise():
    z = project_to_sphere(torch.randn(5, 16))
    out = make_generator_input(z, NoiseSpec(32, 0.0), torch.Generator().manual_seed(2), mode="additive")
    assert torch.equal(out, make_generator_input(z, NoiseSpec(0, 0.0), None))


def test_noise_spec_validation():
    with pytest.raises(InvalidArgumentError):
        NoiseSpec(-1, 0.1)
    with pytest.raises(InvalidArgumentError):
        NoiseSpec(4, -0.1)


# --------------------------------------------------------------- persistence


def test_codebook_roundtrip(tmp_path):
    cb = init_random(20, 8, seed=9, labels=[0, 1, UNLABELED, 2] * 5)
    path = tmp_path / "codes.npz"
    cb.save(path)
    back = LatentCodebook.load(path)
    assert torch.equal(back.codes, cb.codes)
    np.testing.assert_array_equal(back.labels, cb.labels)
    assert back.seed == 9 and back.dim == 8
