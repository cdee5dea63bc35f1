"""Training objectives for the deformation models.

Every loss returns a scalar autodiff Tensor. Mesh arguments accept either a
TriMesh (constant geometry) or a ``(vertices, faces)`` pair whose vertices may
be a Tensor, in which case gradients flow back to the vertices and through
them to whatever produced them.

The render-based losses accumulate per-view terms in rig order and do not
average over views; the loss weights absorb the view count. Each of them has
an ``*_embedded`` twin operating on precomputed per-view embedding lists so a
training step can render each mesh once and reuse the embeddings across
losses without changing the summation order.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor
from .deform import LatentCode
from .mesh import SurfaceSample, TriMesh, barycentric_positions, face_normals
from .morphable import decode
from .render import rasterize_soft


@dataclass
class LossWeights:
    """Multipliers for the five adaptation loss terms."""

    lambda_vert: float = 80.0
    lambda_clip: float = 2e-3
    lambda_in: float = 6e-3
    lambda_across: float = 6e-3
    lambda_style: float = 4e-3

    def __post_init__(self):
        for name in (
            "lambda_vert",
            "lambda_clip",
            "lambda_in",
            "lambda_across",
            "lambda_style",
        ):
            value = float(getattr(self, name))
            if not np.isfinite(value) or value < 0.0:
                raise ValueError(f"LossWeights.{name} must be finite and >= 0")
            setattr(self, name, value)


@dataclass
class ExemplarPair:
    """A stylization exemplar: source face, its stylized twin, and the
    morphable coefficients the source decodes from.

    Both meshes must share one face array so vertices correspond one-to-one.
    """

    source: TriMesh
    stylized: TriMesh
    ref_params: object

    def __post_init__(self):
        if not np.array_equal(self.source.faces, self.stylized.faces):
            raise ValueError("ExemplarPair: meshes must share connectivity")


def _vertices_only(mesh):
    """Vertex Tensor from a TriMesh, a (vertices, faces) pair, or raw vertices."""
    if isinstance(mesh, TriMesh):
        v = Tensor(mesh.vertices)
    elif isinstance(mesh, tuple):
        v = as_tensor(mesh[0])
    else:
        v = as_tensor(mesh)
    if v.ndim != 2 or v.shape[1] != 3:
        raise ValueError(f"expected (V, 3) vertices, got {v.shape}")
    return v


def _vertices_faces(mesh):
    if isinstance(mesh, TriMesh):
        return Tensor(mesh.vertices), mesh.faces
    vertices, faces = mesh
    return _vertices_only(vertices), np.asarray(faces, dtype=np.int64)


def l_vert(mesh, target):
    """Mean squared vertex distance between two meshes in correspondence."""
    va = _vertices_only(mesh)
    vb = _vertices_only(target)
    if va.shape != vb.shape:
        raise ValueError(
            f"l_vert: vertex counts differ, {va.shape} vs {vb.shape}"
        )
    d = va - vb
    return (d * d).sum(axis=1).mean()


def embed_views(mesh, rig, embedder, sigma=1e-4, gamma=1e-4):
    """Embed every rig view of a mesh; returns embeddings in rig order."""
    return [
        embedder.embed(rasterize_soft(mesh, cam, sigma, gamma))
        for _, _, cam in rig.views()
    ]


def _check_view_lists(name, lists):
    n = len(lists[0])
    for other in lists[1:]:
        if len(other) != n:
            raise ValueError(f"{name}: embedding lists cover different view counts")
    if n == 0:
        raise ValueError(f"{name}: no views")


def l_clip_embedded(emb_a, emb_b):
    _check_view_lists("l_clip", (emb_a, emb_b))
    total = as_tensor(0.0)
    for ea, eb in zip(emb_a, emb_b):
        d = ea - eb
        total = total + (d * d).sum()
    return total


def l_clip(mesh, target, rig, embedder, sigma=1e-4, gamma=1e-4):
    """Summed squared embedding distance between two meshes over all views."""
    return l_clip_embedded(
        embed_views(mesh, rig, embedder, sigma, gamma),
        embed_views(target, rig, embedder, sigma, gamma),
    )


def l_in_embedded(emb_src_samp, emb_src, emb_sty_samp, emb_sty):
    _check_view_lists("l_in", (emb_src_samp, emb_src, emb_sty_samp, emb_sty))
    total = as_tensor(0.0)
    for a, b, c, d in zip(emb_src_samp, emb_src, emb_sty_samp, emb_sty):
        diff = (a - b) - (c - d)
        total = total + (diff * diff).sum()
    return total


def l_in(src_samp, src, sty_samp, sty, rig, embedder, sigma=1e-4, gamma=1e-4):
    """Within-pair direction match: the sampled-vs-reference embedding shift
    of the source family must equal that of the stylized family, per view."""
    return l_in_embedded(
        embed_views(src_samp, rig, embedder, sigma, gamma),
        embed_views(src, rig, embedder, sigma, gamma),
        embed_views(sty_samp, rig, embedder, sigma, gamma),
        embed_views(sty, rig, embedder, sigma, gamma),
    )


def l_across_embedded(emb_sty, emb_src, emb_sty_samp, emb_src_samp):
    _check_view_lists("l_across", (emb_sty, emb_src, emb_sty_samp, emb_src_samp))
    total = as_tensor(0.0)
    for a, b, c, d in zip(emb_sty, emb_src, emb_sty_samp, emb_src_samp):
        diff = (a - b) - (c - d)
        total = total + (diff * diff).sum()
    return total


def l_across(sty, src, sty_samp, src_samp, rig, embedder, sigma=1e-4, gamma=1e-4):
    """Across-identity direction match: the stylization shift of the
    reference face must equal that of the sampled face, per view."""
    return l_across_embedded(
        embed_views(sty, rig, embedder, sigma, gamma),
        embed_views(src, rig, embedder, sigma, gamma),
        embed_views(sty_samp, rig, embedder, sigma, gamma),
        embed_views(src_samp, rig, embedder, sigma, gamma),
    )


def l_style(mesh, reference):
    """Summed per-face normal misalignment, 1 - cos(n, n'), over all faces."""
    va, fa = _vertices_faces(mesh)
    vb, fb = _vertices_faces(reference)
    if not np.array_equal(fa, fb):
        raise ValueError("l_style: meshes must share connectivity")
    na = face_normals(va, fa)
    nb = face_normals(vb, fb)
    return (1.0 - (na * nb).sum(axis=1)).sum()


def pseudo_style_code(code_samp: LatentCode, code_ref: LatentCode, direct=False):
    """Latent code of the normal-alignment target for a sampled identity.

    Splices the sampled shape half with the reference expression half, so the
    alignment target shares the sample's identity but never depends on its
    expression. ``direct=True`` keeps the sampled expression instead; that
    variant ties the stylized output to the exemplar's expression and exists
    to reproduce the rigidity it causes.
    """
    if direct:
        return LatentCode(code_samp.z_s, code_samp.z_e)
    return LatentCode(code_samp.z_s, code_ref.z_e)


_COMPONENT_KEYS = ("vert", "clip", "in", "across", "style")


def l_total(components, weights: LossWeights = None):
    """Weighted sum of the five adaptation losses.

    ``components`` maps "vert", "clip", "in", "across", "style" to scalars.
    """
    weights = weights or LossWeights()
    missing = [k for k in _COMPONENT_KEYS if k not in components]
    if missing:
        raise ValueError(f"l_total: missing components {missing}")
    return (
        weights.lambda_vert * as_tensor(components["vert"])
        + weights.lambda_clip * as_tensor(components["clip"])
        + weights.lambda_in * as_tensor(components["in"])
        + weights.lambda_across * as_tensor(components["across"])
        + weights.lambda_style * as_tensor(components["style"])
    )


def l_enc(z_true: LatentCode, z_pred: LatentCode):
    """Squared distance between two latent codes over both halves."""
    if z_true.z_s.shape != z_pred.z_s.shape or z_true.z_e.shape != z_pred.z_e.shape:
        raise ValueError(
            "l_enc: code dims differ, "
            f"({z_true.z_s.shape}, {z_true.z_e.shape}) vs "
            f"({z_pred.z_s.shape}, {z_pred.z_e.shape})"
        )
    d = z_true.concat() - z_pred.concat()
    return (d * d).sum()


def loss_ds(model_ds, morphable, params, sample_points):
    """Reconstruction error of the deformation field against a decoded face.

    ``sample_points`` is a list of SurfaceSample drawn on
    ``decode(morphable, params)``; their (face, barycentric) coordinates are
    replayed on the template so every ground-truth position has a
    corresponding template-surface input point. Position-only arrays carry no
    correspondence and are rejected; vertex_samples and sims_sample both
    produce the required form.
    """
    if not isinstance(sample_points, (list, tuple)):
        raise TypeError(
            "loss_ds: sample_points must be a list of SurfaceSample, "
            f"got {type(sample_points).__name__}"
        )
    if not sample_points:
        raise ValueError("loss_ds: need at least one sample")
    if not isinstance(sample_points[0], SurfaceSample):
        raise TypeError(
            "loss_ds: sample_points must be SurfaceSample instances, "
            f"got {type(sample_points[0]).__name__}"
        )
    face_idx = np.array([s.face_index for s in sample_points], dtype=np.int64)
    bary = np.stack([s.bary for s in sample_points])
    gt = np.stack([s.position for s in sample_points])

    template = morphable.template
    x = barycentric_positions(template.vertices, template.faces, face_idx, bary)
    code = model_ds.map(params.beta, params.psi)
    pred = model_ds.deform_points(code, Tensor(x))
    d = pred - Tensor(gt)
    return (d * d).sum(axis=1).mean()


def decoded_samples(morphable, params, sample_points):
    """SurfaceSamples with positions replayed on decode(morphable, params).

    Lets one fixed (face, barycentric) draw serve many parameter vectors, so
    a training pool can reuse its sample set across identities.
    """
    mesh = decode(morphable, params)
    face_idx = np.array([s.face_index for s in sample_points], dtype=np.int64)
    bary = np.stack([s.bary for s in sample_points])
    pos = barycentric_positions(mesh.vertices, mesh.faces, face_idx, bary)
    return [
        SurfaceSample(int(f), bary[i].copy(), pos[i].copy())
        for i, f in enumerate(face_idx)
    ]
