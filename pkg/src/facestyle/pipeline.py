"""Exemplar synthesis, end-to-end stylization, blending, quality metrics.

Style exemplars are produced procedurally: a small set of vertex-only
edits (scale, bump, flatten, smooth) applied to named face regions of a
decoded mesh, standing in for an artist's sculpt. Connectivity is never
touched, so the pair keeps exact vertex correspondence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import mesh as ms
from .checkpoint import Checkpoint, blend_checkpoints, load_checkpoint
from .embed import cos
from .losses import ExemplarPair, embed_views
from .mage import MageModel, encode
from .mesh import TriMesh
from .morphable import decode, sample_params

_OP_KINDS = ("region_scale", "normal_bump", "flatten", "smooth")


@dataclass
class StyleOp:
    """One vertex-position edit on a named region or an explicit mask."""

    kind: str
    region: object  # landmark-set name, boolean mask, or index array
    magnitude: float

    def __post_init__(self):
        if self.kind not in _OP_KINDS:
            raise ValueError(
                f"StyleOp: unknown kind {self.kind!r}, expected one of {_OP_KINDS}"
            )
        self.magnitude = float(self.magnitude)
        if not np.isfinite(self.magnitude):
            raise ValueError("StyleOp: magnitude must be finite")


def _resolve_region(mesh: TriMesh, region) -> np.ndarray:
    """Boolean vertex mask from a landmark-set name, mask, or index list."""
    if isinstance(region, str):
        sets = mesh.landmark_sets or {}
        if region not in sets:
            raise ValueError(
                f"unknown region {region!r}; mesh has {sorted(sets)}"
            )
        mask = np.zeros(mesh.n_vertices, dtype=bool)
        mask[list(sets[region])] = True
    else:
        arr = np.asarray(region)
        if arr.dtype == bool:
            if arr.shape != (mesh.n_vertices,):
                raise ValueError(
                    f"region mask length {arr.shape} does not match "
                    f"{mesh.n_vertices} vertices"
                )
            mask = arr.copy()
        else:
            idx = arr.astype(np.int64, casting="safe")
            if idx.size and (idx.min() < 0 or idx.max() >= mesh.n_vertices):
                raise ValueError("region index out of range")
            mask = np.zeros(mesh.n_vertices, dtype=bool)
            mask[idx] = True
    if not mask.any():
        raise ValueError("region resolves to no vertices")
    return mask


def _neighbor_means(mesh: TriMesh):
    """Per-vertex mean of adjacent vertex positions (face adjacency)."""
    v, f = mesh.vertices, mesh.faces
    acc = np.zeros_like(v)
    count = np.zeros(len(v))
    for a, b in ((0, 1), (1, 2), (2, 0)):
        np.add.at(acc, f[:, a], v[f[:, b]])
        np.add.at(count, f[:, a], 1.0)
        np.add.at(acc, f[:, b], v[f[:, a]])
        np.add.at(count, f[:, b], 1.0)
    count[count == 0] = 1.0
    return acc / count[:, None]


def apply_style_op(mesh: TriMesh, op: StyleOp) -> TriMesh:
    """One edit: moves only the region's vertices, keeps connectivity."""
    mask = _resolve_region(mesh, op.region)
    v = mesh.vertices.copy()
    region = v[mask]
    centroid = region.mean(axis=0)
    m = op.magnitude

    if op.kind == "region_scale":
        v[mask] = centroid + m * (region - centroid)
    elif op.kind == "normal_bump":
        normals = ms.vertex_normals(mesh)[mask]
        d = np.linalg.norm(region - centroid, axis=1)
        radius = float(d.max())
        if radius > 0.0:
            w = 0.5 * (1.0 + np.cos(np.pi * np.minimum(d / radius, 1.0)))
        else:
            w = np.ones_like(d)
        v[mask] = region + (m * w)[:, None] * normals
    elif op.kind == "flatten":
        x = region - centroid
        _, vecs = np.linalg.eigh(x.T @ x)
        n = vecs[:, 0]  # best-fit plane normal: smallest principal axis
        v[mask] = region - m * (x @ n)[:, None] * n
    else:  # smooth
        means = _neighbor_means(mesh)[mask]
        v[mask] = (1.0 - m) * region + m * means
    return mesh.with_vertices(v)


def gen_exemplar(morphable, phi_ref=None, ops=(), seed=0) -> ExemplarPair:
    """Decode a reference face and sculpt its stylized twin.

    With phi_ref=None a reference is drawn from the sampling prior using
    the seed; an explicit phi_ref makes the result seed-independent.
    """
    if phi_ref is None:
        phi_ref = sample_params(morphable, seed)
    source = decode(morphable, phi_ref)
    styled = source
    for op in ops:
        styled = apply_style_op(styled, op)
    return ExemplarPair(source, styled, phi_ref)


# ---------------------------------------------------------------------------
# exemplar presets


def _direction_mask(mesh: TriMesh, direction, cos_min):
    v = mesh.vertices - mesh.vertices.mean(axis=0)
    unit = v / np.linalg.norm(v, axis=1, keepdims=True)
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    return unit @ d >= cos_min


def _horn_ops(template: TriMesh):
    # upper-front patch; no landmark set covers it, so build a mask
    mask = _direction_mask(template, (0.0, 0.72, 0.69), 0.93)
    return [StyleOp("normal_bump", mask, 0.45)]


def _flat_nose_ops(template: TriMesh):
    return [StyleOp("flatten", "nose", 1.0), StyleOp("smooth", "nose", 0.5)]


def _big_nose_ops(template: TriMesh):
    return [StyleOp("region_scale", "nose", 1.6)]


EXEMPLAR_PRESETS = {
    "horn": _horn_ops,
    "flat_nose": _flat_nose_ops,
    "big_nose": _big_nose_ops,
}


def preset_ops(name: str, template: TriMesh):
    """StyleOp list for a named preset, resolved against this template."""
    if name not in EXEMPLAR_PRESETS:
        raise ValueError(
            f"unknown preset {name!r}; available: {sorted(EXEMPLAR_PRESETS)}"
        )
    return EXEMPLAR_PRESETS[name](template)


# ---------------------------------------------------------------------------
# stylization and blending


def stylize(deformation_target: TriMesh, mage: MageModel, model_dt,
            desired_template: TriMesh, n_points: int = None, seed=0) -> TriMesh:
    """Project the target into latent space, deform the requested topology."""
    with ad.no_grad():
        code = encode(mage, deformation_target, n_points, seed)
    return model_dt.deform_mesh(code, desired_template)


@dataclass
class BlendSpec:
    """Weight-space interpolation request between two stylized fields."""

    alpha: float
    checkpoint_a: object  # path
    checkpoint_b: object  # path

    def __post_init__(self):
        self.alpha = float(self.alpha)
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"BlendSpec: alpha must lie in [0, 1], got {self.alpha}")


def interpolate(spec: BlendSpec) -> Checkpoint:
    """alpha * A + (1 - alpha) * B over every named tensor."""
    a = load_checkpoint(spec.checkpoint_a)
    b = load_checkpoint(spec.checkpoint_b)
    return blend_checkpoints(a, b, spec.alpha)


# ---------------------------------------------------------------------------
# metrics


def eval_metrics(stylized: TriMesh, style_exemplar: TriMesh,
                 deformation_target: TriMesh, rig, embedder,
                 sigma=1e-4, gamma=1e-4) -> dict:
    """View-averaged embedding similarities of the stylization result.

    sp: stylized vs. the style exemplar; ip: stylized vs. the deformation
    target; avg: their mean. All three are mean cosine similarity over
    the rig's views.
    """
    with ad.no_grad():
        e_sty = embed_views(stylized, rig, embedder, sigma, gamma)
        e_ref = embed_views(style_exemplar, rig, embedder, sigma, gamma)
        e_tgt = embed_views(deformation_target, rig, embedder, sigma, gamma)
        sp = float(np.mean([cos(a, b).item() for a, b in zip(e_sty, e_ref)]))
        ip = float(np.mean([cos(a, b).item() for a, b in zip(e_sty, e_tgt)]))
    return {"sp": sp, "ip": ip, "avg": 0.5 * (sp + ip)}


# ---------------------------------------------------------------------------
# sampling-strategy ablation


def template_variants(template: TriMesh):
    """Eval surfaces with exact correspondence maps back to the template.

    Returns [(name, variant_mesh, maps)] where applying the maps in order
    to any vertex array of template topology yields the variant's
    ground-truth vertex positions for that geometry.
    """
    loop1, map1 = ms.loop_subdivide_with_map(template)
    loop2, map2 = ms.loop_subdivide_with_map(loop1)
    simp = ms.simplify(template, 0.25)
    return [
        ("original", template, ()),
        ("simplified", simp.mesh, (simp.vertex_map,)),
        ("loop1", loop1, (map1,)),
        ("loop2", loop2, (map1, map2)),
    ]


def reconstruction_errors(model, morphable, phis, variants=None) -> dict:
    """Mean squared field error per eval surface, averaged over draws.

    For each surface the ground truth comes from pushing the decoded
    vertices through the variant's correspondence maps; the field is
    evaluated at the variant template's own vertices.
    """
    variants = variants or template_variants(morphable.template)
    totals = {name: 0.0 for name, _, _ in variants}
    with ad.no_grad():
        for phi in phis:
            code = model.map_params(phi)
            decoded = decode(morphable, phi)
            for name, variant, maps in variants:
                gt = decoded.vertices
                for m in maps:
                    gt = m.apply(gt)
                pred = model.deform_points(code, variant.vertices).data
                d = pred - gt
                totals[name] += float((d * d).sum(axis=1).mean())
    out = {name: total / len(phis) for name, total in totals.items()}
    out["average"] = float(np.mean(list(out.values())))
    return out


def sampling_ablation(morphable, schedule=None, seeds=(0, 1, 2),
                      eval_count=20, eval_seed=9000, pool_size=2000,
                      methods=("sims", "hybrid", "vertex"), batch=8) -> list:
    """Train the source field under each sampling strategy, compare errors.

    Returns one row per method: (method, original, simplified, loop1,
    loop2, average), each error averaged over the training seeds and a
    shared held-out draw set.
    """
    from .training import train_ds

    eval_rng = np.random.Generator(np.random.PCG64(eval_seed))
    phis = [sample_params(morphable, eval_rng) for _ in range(eval_count)]
    variants = template_variants(morphable.template)
    rows = []
    for method in methods:
        cols = None
        for seed in seeds:
            model, _ = train_ds(
                morphable, sampling=method, schedule=schedule,
                seed=seed, pool_size=pool_size, batch=batch,
            )
            errs = reconstruction_errors(model, morphable, phis, variants)
            if cols is None:
                cols = {k: 0.0 for k in errs}
            for k, v in errs.items():
                cols[k] += v / len(seeds)
        rows.append((method, cols["original"], cols["simplified"],
                     cols["loop1"], cols["loop2"], cols["average"]))
    return rows


ABLATION_HEADER = ("method", "original", "simplified", "loop1", "loop2", "average")
