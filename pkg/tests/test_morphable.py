"""Blendshape model tests: template, bases, decode linearity, sampling."""

import numpy as np
import pytest

from facestyle import mesh as ms
from facestyle import morphable as mm

from conftest import point_mesh_distance


@pytest.fixture(scope="module")
def model():
    return mm.build_toy_model(seed=7)


def lap_energy_oracle(faces, col):
    """Independent uniform-Laplacian Rayleigh quotient."""
    n = col.shape[0]
    nbrs = [set() for _ in range(n)]
    for a, b, c in faces:
        nbrs[a].update((b, c))
        nbrs[b].update((a, c))
        nbrs[c].update((a, b))
    lap = np.zeros_like(col)
    for v in range(n):
        if nbrs[v]:
            lap[v] = col[v] - col[sorted(nbrs[v])].mean(axis=0)
    return float((lap * lap).sum()) / float((col * col).sum())


def test_template_shape_counts():
    t = mm.build_head_template()
    assert t.n_vertices == 602
    assert t.n_faces == 1200
    assert 0.9 < ms.bounding_radius(t) < 1.2


def test_template_is_manifold_and_outward():
    t = mm.build_head_template()
    ms.loop_subdivide(t)  # raises on non-manifold edges
    n = ms.face_normals(t)
    centroids = t.vertices[t.faces].mean(axis=1)
    centroids = centroids - t.vertices.mean(axis=0)
    assert float((n * centroids).sum(axis=1).min()) > 0.0


def test_template_landmarks():
    t = mm.build_head_template()
    assert set(t.landmark_sets) == {"left_eye", "right_eye", "nose", "lips"}
    for name, idx in t.landmark_sets.items():
        assert len(idx) == 6
        assert all(0 <= i < t.n_vertices for i in idx)
    left = t.vertices[t.landmark_sets["left_eye"]].mean(axis=0)
    right = t.vertices[t.landmark_sets["right_eye"]].mean(axis=0)
    assert left[0] < 0 < right[0]
    assert left[2] > 0 and right[2] > 0  # on the face, not the skull


def test_model_basis_shapes(model):
    assert model.shape_basis.shape == (602, 3, 16)
    assert model.expr_basis.shape == (602, 3, 8)


def test_model_deterministic_per_seed():
    a = mm.build_toy_model(seed=3)
    b = mm.build_toy_model(seed=3)
    assert np.array_equal(a.shape_basis, b.shape_basis)
    assert np.array_equal(a.expr_basis, b.expr_basis)
    c = mm.build_toy_model(seed=4)
    assert not np.array_equal(a.shape_basis, c.shape_basis)


def test_basis_columns_satisfy_laplacian_cap(model):
    cap = model.config.laplacian_cap
    for k in range(model.k_shape):
        assert lap_energy_oracle(model.template.faces, model.shape_basis[:, :, k]) <= cap
    for k in range(model.k_expr):
        assert lap_energy_oracle(model.template.faces, model.expr_basis[:, :, k]) <= cap


def test_expression_basis_zero_on_back(model):
    back = model.template.vertices[:, 2] <= 0.0
    assert back.sum() > 100  # the mask actually covers a real region
    assert np.array_equal(
        model.expr_basis[back], np.zeros_like(model.expr_basis[back])
    )


def test_decode_zero_is_template(model):
    out = mm.decode(model, mm.MorphParams.zeros(model))
    assert np.array_equal(out.vertices, model.template.vertices)
    assert np.array_equal(out.faces, model.template.faces)


def test_decode_linearity(model):
    rng = np.random.Generator(np.random.PCG64(21))
    beta = rng.uniform(-2, 2, model.k_shape)
    tpl = model.template.vertices
    d1 = mm.decode(model, mm.MorphParams(2 * beta, np.zeros(model.k_expr))).vertices - tpl
    d2 = mm.decode(model, mm.MorphParams(beta, np.zeros(model.k_expr))).vertices - tpl
    assert np.max(np.abs(d1 - 2 * d2)) <= 1e-12


def test_decode_superposition(model):
    rng = np.random.Generator(np.random.PCG64(22))
    p = mm.sample_params(model, rng)
    both = mm.decode(model, p).vertices
    beta_only = mm.decode(model, mm.MorphParams(p.beta, np.zeros(model.k_expr))).vertices
    psi_only = mm.decode(model, mm.MorphParams(np.zeros(model.k_shape), p.psi)).vertices
    assert np.max(np.abs(both - (beta_only + psi_only - model.template.vertices))) <= 1e-12


def test_decode_rank_mismatch(model):
    with pytest.raises(ValueError, match="rank"):
        mm.decode(model, mm.MorphParams(np.zeros(3), np.zeros(model.k_expr)))


def test_sample_params_bounds_and_determinism(model):
    p = mm.sample_params(model, seed=5)
    assert np.all(p.beta >= -2) and np.all(p.beta <= 2)
    assert np.all(p.psi >= -2) and np.all(p.psi <= 2)
    q = mm.sample_params(model, seed=5)
    assert np.array_equal(p.beta, q.beta) and np.array_equal(p.psi, q.psi)


def test_sample_params_uniform_moments(model):
    rng = np.random.Generator(np.random.PCG64(77))
    n = 100_000
    total = np.zeros(model.k_shape + model.k_expr)
    for _ in range(n):
        p = mm.sample_params(model, rng)
        total += np.concatenate([p.beta, p.psi])
    mean = total / n
    sigma = np.sqrt((4.0**2 / 12.0) / n)
    assert np.max(np.abs(mean - 0.0)) < 3.0 * sigma


def test_user_template_needs_landmarks():
    t = mm.build_head_template()
    bare = ms.TriMesh(t.vertices, t.faces)
    with pytest.raises(ValueError, match="landmark"):
        mm.build_toy_model(seed=0, template=bare)


def test_decode_random_draw_displaces_visibly(model):
    p = mm.sample_params(model, seed=9)
    out = mm.decode(model, p)
    disp = np.linalg.norm(out.vertices - model.template.vertices, axis=1)
    r = ms.bounding_radius(model.template)
    assert 0.005 * r < disp.mean() < 0.25 * r


def test_loop_then_simplify_stays_near_template():
    t = mm.build_head_template()
    sub = ms.loop_subdivide(t)
    res = ms.simplify(sub, t.n_vertices / sub.n_vertices)
    assert res.reached_target
    r = ms.bounding_radius(t)
    d_fwd = point_mesh_distance(res.mesh.vertices, t.vertices, t.faces)
    d_bwd = point_mesh_distance(t.vertices, res.mesh.vertices, res.mesh.faces)
    assert float(d_fwd.mean()) < 0.03 * r
    assert float(d_bwd.mean()) < 0.03 * r
