"""Pipeline tests: style ops, stylization topology, blending, metrics."""

import math

import numpy as np
import pytest

from facestyle import mesh as ms
from facestyle import morphable as mm
from facestyle.checkpoint import load_checkpoint, save_checkpoint
from facestyle.deform import DeformConfig, DeformModel
from facestyle.embed import FeatureEmbedder
from facestyle.mage import MageConfig, MageModel, pretrain_pointset_encoders
from facestyle.morphable import MorphParams, decode, sample_params
from facestyle.pipeline import (
    ABLATION_HEADER,
    BlendSpec,
    EXEMPLAR_PRESETS,
    StyleOp,
    apply_style_op,
    eval_metrics,
    gen_exemplar,
    interpolate,
    preset_ops,
    reconstruction_errors,
    sampling_ablation,
    stylize,
    template_variants,
)
from facestyle.render import Camera, RenderRig
from facestyle.training import Schedule

CFG = mm.MorphConfig(n_lat=6, n_lon=7, k_shape=2, k_expr=1, laplacian_cap=0.3)
MORPH = mm.build_toy_model(CFG, seed=3)
TEMPLATE = MORPH.template
TINY_DEFORM = DeformConfig(
    d_s=8, d_e=4, map_hidden=8, siren_hidden=8, siren_layers=2, hyper_hidden=16
)
TINY_MAGE = MageConfig(
    d_s=8, d_e=4, feat_hidden=16, feat_dim=24, mapper_hidden=32,
    n_points=64, pretrain_iterations=40, heldout_count=2,
)


def _bumped_model(seed=9):
    model = DeformModel(CFG.k_shape, CFG.k_expr, config=TINY_DEFORM, seed=seed)
    rng = np.random.Generator(np.random.PCG64(60 + seed))
    final = f"hyper.{len(model.config.field_dims()) - 2}"
    for name in (f"{final}.w1", f"{final}.b1"):
        t = model.params[name]
        t.data = t.data + 0.05 * rng.standard_normal(t.data.shape)
    return model


@pytest.fixture(scope="module")
def mage():
    pre = pretrain_pointset_encoders(MORPH, TINY_MAGE, seed=4)
    return MageModel(pre.encoder_id, pre.encoder_exp, seed=5)


def _rig():
    center = TEMPLATE.vertices.mean(axis=0)
    r = ms.bounding_radius(TEMPLATE)

    def cam(azimuth_deg):
        a = math.radians(azimuth_deg)
        eye = center + 2.5 * r * np.array([math.sin(a), 0.0, math.cos(a)])
        return Camera(eye=eye, look_at=center, near=0.01 * r, far=100.0 * r)

    return RenderRig(levels=[[cam(0.0)], [cam(40.0)]])


RIG = _rig()
EMB = FeatureEmbedder()


# ---------------------------------------------------------------------------
# style ops


def test_styleop_validation():
    with pytest.raises(ValueError, match="unknown kind"):
        StyleOp("emboss", "nose", 1.0)
    with pytest.raises(ValueError, match="finite"):
        StyleOp("flatten", "nose", float("nan"))


def test_region_resolution_errors():
    with pytest.raises(ValueError, match="unknown region"):
        apply_style_op(TEMPLATE, StyleOp("flatten", "chin", 1.0))
    with pytest.raises(ValueError, match="mask length"):
        apply_style_op(TEMPLATE, StyleOp("flatten", np.ones(3, dtype=bool), 1.0))
    with pytest.raises(ValueError, match="out of range"):
        apply_style_op(TEMPLATE, StyleOp("flatten", np.array([10 ** 6]), 1.0))
    with pytest.raises(ValueError, match="no vertices"):
        apply_style_op(
            TEMPLATE,
            StyleOp("flatten", np.zeros(TEMPLATE.n_vertices, dtype=bool), 1.0),
        )


def test_region_scale_inverse_composition():
    once = apply_style_op(TEMPLATE, StyleOp("region_scale", "nose", 1.5))
    back = apply_style_op(once, StyleOp("region_scale", "nose", 1.0 / 1.5))
    assert np.max(np.abs(back.vertices - TEMPLATE.vertices)) < 1e-9


def test_region_scale_locality():
    out = apply_style_op(TEMPLATE, StyleOp("region_scale", "nose", 1.5))
    mask = np.zeros(TEMPLATE.n_vertices, dtype=bool)
    mask[TEMPLATE.landmark_sets["nose"]] = True
    assert np.array_equal(out.vertices[~mask], TEMPLATE.vertices[~mask])
    assert not np.array_equal(out.vertices[mask], TEMPLATE.vertices[mask])
    assert np.array_equal(out.faces, TEMPLATE.faces)


def test_normal_bump_profile():
    height = 0.3
    out = apply_style_op(TEMPLATE, StyleOp("normal_bump", "lips", height))
    mask = np.zeros(TEMPLATE.n_vertices, dtype=bool)
    mask[TEMPLATE.landmark_sets["lips"]] = True
    assert np.array_equal(out.vertices[~mask], TEMPLATE.vertices[~mask])

    moved = out.vertices[mask] - TEMPLATE.vertices[mask]
    sizes = np.linalg.norm(moved, axis=1)
    assert sizes.max() <= height + 1e-12
    # displacement follows the vertex normal wherever it is non-negligible
    normals = ms.vertex_normals(TEMPLATE)[mask]
    big = sizes > 1e-6
    cos = (moved[big] * normals[big]).sum(axis=1) / sizes[big]
    assert np.min(cos) > 0.999
    # the vertex closest to the region centroid gets the largest push
    region = TEMPLATE.vertices[mask]
    d = np.linalg.norm(region - region.mean(axis=0), axis=1)
    assert np.argmax(sizes) == np.argmin(d)


def test_flatten_projects_region_onto_plane():
    out = apply_style_op(TEMPLATE, StyleOp("flatten", "nose", 1.0))
    mask = np.zeros(TEMPLATE.n_vertices, dtype=bool)
    mask[TEMPLATE.landmark_sets["nose"]] = True
    region = TEMPLATE.vertices[mask]
    centered = region - region.mean(axis=0)
    _, vecs = np.linalg.eigh(centered.T @ centered)
    n = vecs[:, 0]
    residual = (out.vertices[mask] - region.mean(axis=0)) @ n
    assert np.max(np.abs(residual)) < 1e-12


def test_smooth_blends_toward_neighbor_mean():
    target = int(TEMPLATE.landmark_sets["nose"][0])
    region = np.array([target])
    out = apply_style_op(TEMPLATE, StyleOp("smooth", region, 0.5))
    neighbors = set()
    for face in TEMPLATE.faces:
        if target in face:
            neighbors.update(int(i) for i in face)
    neighbors.discard(target)
    # neighbor means accumulate per edge, so shared vertices count per face
    acc = np.zeros(3)
    count = 0
    for face in TEMPLATE.faces:
        f = [int(i) for i in face]
        if target not in f:
            continue
        for a, b in ((0, 1), (1, 2), (2, 0)):
            if f[a] == target:
                acc += TEMPLATE.vertices[f[b]]
                count += 1
            if f[b] == target:
                acc += TEMPLATE.vertices[f[a]]
                count += 1
    expected = 0.5 * TEMPLATE.vertices[target] + 0.5 * acc / count
    assert np.allclose(out.vertices[target], expected, rtol=0, atol=1e-15)
    untouched = np.ones(TEMPLATE.n_vertices, dtype=bool)
    untouched[target] = False
    assert np.array_equal(out.vertices[untouched], TEMPLATE.vertices[untouched])


# ---------------------------------------------------------------------------
# exemplar generation


def test_gen_exemplar_empty_ops_is_identity():
    phi = sample_params(MORPH, seed=2)
    pair = gen_exemplar(MORPH, phi)
    assert np.array_equal(pair.source.vertices, pair.stylized.vertices)
    assert np.array_equal(pair.source.faces, pair.stylized.faces)
    assert pair.ref_params is phi


def test_gen_exemplar_draws_reference_from_seed():
    pair = gen_exemplar(MORPH, None, seed=7)
    expected = decode(MORPH, sample_params(MORPH, seed=7))
    assert np.array_equal(pair.source.vertices, expected.vertices)


def test_gen_exemplar_applies_ops_in_sequence():
    phi = sample_params(MORPH, seed=2)
    ops = [StyleOp("region_scale", "nose", 1.4),
           StyleOp("flatten", "lips", 1.0)]
    pair = gen_exemplar(MORPH, phi, ops)
    manual = apply_style_op(
        apply_style_op(decode(MORPH, phi), ops[0]), ops[1]
    )
    assert np.array_equal(pair.stylized.vertices, manual.vertices)


def test_presets_resolve_on_desk_template():
    template = mm.build_head_template()
    for name in EXEMPLAR_PRESETS:
        styled = template
        for op in preset_ops(name, template):
            styled = apply_style_op(styled, op)
        assert not np.array_equal(styled.vertices, template.vertices)
        assert np.array_equal(styled.faces, template.faces)
    with pytest.raises(ValueError, match="unknown preset"):
        preset_ops("gargoyle", template)


# ---------------------------------------------------------------------------
# stylization


def test_stylize_output_matches_desired_topology(mage):
    model_dt = _bumped_model()
    target = decode(MORPH, sample_params(MORPH, seed=21))
    for desired in (
        TEMPLATE,
        ms.loop_subdivide(TEMPLATE),
        ms.simplify(TEMPLATE, 0.25).mesh,
    ):
        out = stylize(target, mage, model_dt, desired, seed=1)
        assert np.array_equal(out.faces, desired.faces)
        assert out.n_vertices == desired.n_vertices
        assert np.all(np.isfinite(out.vertices))
        assert not np.array_equal(out.vertices, desired.vertices)


def test_stylize_deterministic(mage):
    model_dt = _bumped_model()
    target = decode(MORPH, sample_params(MORPH, seed=22))
    a = stylize(target, mage, model_dt, TEMPLATE, seed=3)
    b = stylize(target, mage, model_dt, TEMPLATE, seed=3)
    assert np.array_equal(a.vertices, b.vertices)


# ---------------------------------------------------------------------------
# interpolation


def _saved_model_checkpoint(tmp_path, tag, seed):
    model = _bumped_model(seed)
    path = tmp_path / f"{tag}.ckpt.json"
    save_checkpoint({"dt": model}, path, fingerprint="fp", seed=seed)
    return model, path


def test_blendspec_validates_alpha(tmp_path):
    with pytest.raises(ValueError, match="alpha"):
        BlendSpec(1.5, tmp_path / "a", tmp_path / "b")


def test_interpolate_endpoints_and_midpoint(tmp_path):
    model_a, path_a = _saved_model_checkpoint(tmp_path, "a", 1)
    model_b, path_b = _saved_model_checkpoint(tmp_path, "b", 2)
    top = interpolate(BlendSpec(1.0, path_a, path_b))
    bottom = interpolate(BlendSpec(0.0, path_a, path_b))
    mid = interpolate(BlendSpec(0.5, path_a, path_b))
    for name, t in model_a.params.items():
        assert np.array_equal(top.tensors[f"dt.{name}"], t.data)
    for name, t in model_b.params.items():
        assert np.array_equal(bottom.tensors[f"dt.{name}"], t.data)
    for name in top.tensors:
        expect = 0.5 * top.tensors[name] + 0.5 * bottom.tensors[name]
        assert np.array_equal(mid.tensors[name], expect)


def test_interpolate_round_trips_through_save(tmp_path):
    _, path_a = _saved_model_checkpoint(tmp_path, "a", 1)
    _, path_b = _saved_model_checkpoint(tmp_path, "b", 2)
    blended = interpolate(BlendSpec(0.25, path_a, path_b))
    out = tmp_path / "blend.ckpt.json"
    blended.save(out)
    again = load_checkpoint(out, expected_fingerprint=blended.fingerprint)
    assert again.tensors.keys() == blended.tensors.keys()
    for name in blended.tensors:
        assert np.array_equal(again.tensors[name], blended.tensors[name])


def test_blended_model_stays_in_inflated_endpoint_box(tmp_path):
    model_a, path_a = _saved_model_checkpoint(tmp_path, "a", 1)
    model_b, path_b = _saved_model_checkpoint(tmp_path, "b", 2)
    blended = interpolate(BlendSpec(0.5, path_a, path_b))
    model_mid = DeformModel(CFG.k_shape, CFG.k_expr, config=TINY_DEFORM, seed=0)
    model_mid.load_state_arrays(blended.group("dt"))

    phi = sample_params(MORPH, seed=31)
    outputs = [
        m.deform_mesh(m.map_params(phi), TEMPLATE).vertices
        for m in (model_a, model_b, model_mid)
    ]
    lo = np.minimum(outputs[0].min(axis=0), outputs[1].min(axis=0))
    hi = np.maximum(outputs[0].max(axis=0), outputs[1].max(axis=0))
    pad = 0.25 * (hi - lo)
    assert np.all(outputs[2] >= lo - pad)
    assert np.all(outputs[2] <= hi + pad)


# ---------------------------------------------------------------------------
# metrics


def test_eval_metrics_self_similarity():
    a = decode(MORPH, sample_params(MORPH, seed=41))
    b = decode(MORPH, sample_params(MORPH, seed=42))
    out = eval_metrics(a, a, b, RIG, EMB, sigma=2e-4, gamma=1e-3)
    assert abs(out["sp"] - 1.0) < 1e-12
    assert out["ip"] < 1.0
    assert out["avg"] == 0.5 * (out["sp"] + out["ip"])
    flipped = eval_metrics(a, b, a, RIG, EMB, sigma=2e-4, gamma=1e-3)
    assert abs(flipped["ip"] - 1.0) < 1e-12


def test_eval_metrics_bounded():
    a = decode(MORPH, sample_params(MORPH, seed=43))
    b = decode(MORPH, sample_params(MORPH, seed=44))
    c = decode(MORPH, sample_params(MORPH, seed=45))
    out = eval_metrics(a, b, c, RIG, EMB, sigma=2e-4, gamma=1e-3)
    for key in ("sp", "ip", "avg"):
        assert -1.0 - 1e-12 <= out[key] <= 1.0 + 1e-12


# ---------------------------------------------------------------------------
# sampling ablation plumbing


def test_template_variants_reproduce_their_own_build():
    for name, variant, maps in template_variants(TEMPLATE):
        gt = TEMPLATE.vertices
        for m in maps:
            gt = m.apply(gt)
        assert np.array_equal(gt, variant.vertices), name


def test_reconstruction_errors_zero_for_identity_on_template():
    model = DeformModel(CFG.k_shape, CFG.k_expr, config=TINY_DEFORM, seed=0)
    phi = MorphParams(np.zeros(CFG.k_shape), np.zeros(CFG.k_expr))
    errs = reconstruction_errors(model, MORPH, [phi])
    # zero coefficients decode to the template itself and the untrained
    # field is the exact identity, so every surface reconstructs exactly
    for value in errs.values():
        assert value == 0.0


def test_reconstruction_errors_positive_off_template():
    model = DeformModel(CFG.k_shape, CFG.k_expr, config=TINY_DEFORM, seed=0)
    errs = reconstruction_errors(model, MORPH, [sample_params(MORPH, seed=5)])
    assert all(v > 0.0 for v in errs.values())
    assert errs["average"] == pytest.approx(
        np.mean([errs["original"], errs["simplified"],
                 errs["loop1"], errs["loop2"]])
    )


def test_sampling_ablation_row_shape():
    rows = sampling_ablation(
        MORPH, schedule=Schedule(1e-3, 1e-3, 3, "constant"),
        seeds=(0,), eval_count=2, pool_size=4, methods=("vertex",),
    )
    assert len(rows) == 1
    assert rows[0][0] == "vertex"
    assert len(rows[0]) == len(ABLATION_HEADER)
    assert all(np.isfinite(v) for v in rows[0][1:])
