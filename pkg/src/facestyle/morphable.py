"""Procedural linear blendshape face model.

A desk-scale stand-in for a licensed morphable face model: a procedural
head template (latitude/longitude ellipsoid with nose, eye, and lip
features plus landmark sets) and seeded random low-frequency blendshape
bases. decode() is exactly linear in the coefficients, identity and
expression factorize, and the expression basis is supported only on the
front of the head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .mesh import TriMesh, bounding_radius


@dataclass
class MorphConfig:
    k_shape: int = 16
    k_expr: int = 8
    n_lat: int = 24
    n_lon: int = 25
    coeff_low: float = -2.0
    coeff_high: float = 2.0
    basis_amplitude: float = 0.008
    max_modes: int = 8
    laplacian_cap: float = 0.1
    freq_scale: float = 1.5


@dataclass
class MorphParams:
    """Identity (beta) and expression (psi) coefficients."""

    beta: np.ndarray
    psi: np.ndarray

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=np.float64).reshape(-1)
        self.psi = np.asarray(self.psi, dtype=np.float64).reshape(-1)
        if not (np.all(np.isfinite(self.beta)) and np.all(np.isfinite(self.psi))):
            raise ValueError("MorphParams must be finite")

    @classmethod
    def zeros(cls, model):
        return cls(np.zeros(model.k_shape), np.zeros(model.k_expr))


@dataclass
class ToyMorphable:
    template: TriMesh
    shape_basis: np.ndarray  # (V, 3, K_s)
    expr_basis: np.ndarray  # (V, 3, K_e)
    sampling_low: np.ndarray  # per-coefficient bounds, beta then psi
    sampling_high: np.ndarray
    seed: int
    config: MorphConfig = field(default_factory=MorphConfig)

    @property
    def k_shape(self):
        return self.shape_basis.shape[2]

    @property
    def k_expr(self):
        return self.expr_basis.shape[2]


# ---------------------------------------------------------------------------
# procedural head template

_FEATURES = {
    # direction on the unit sphere, angular width, protrusion amplitude
    "nose": ((0.0, -0.12, 0.99), 0.22, 0.16),
    "left_eye": ((-0.42, 0.38, 0.83), 0.14, -0.045),
    "right_eye": ((0.42, 0.38, 0.83), 0.14, -0.045),
    "lips": ((0.0, -0.52, 0.85), 0.17, 0.06),
}

_HEAD_RADII = np.array([0.82, 1.0, 0.88])


def build_head_template(n_lat=24, n_lon=25) -> TriMesh:
    """Ellipsoid head looking along +z, with feature bumps and landmarks.

    V = n_lat * n_lon + 2 (rings plus two poles), F = 2 * n_lat * n_lon.
    The defaults give V = 602, F = 1200, bounding radius about 1.
    """
    if n_lat < 2 or n_lon < 3:
        raise ValueError("head template needs n_lat >= 2 and n_lon >= 3")
    units = [np.array([0.0, 1.0, 0.0])]
    for i in range(1, n_lat + 1):
        theta = math.pi * i / (n_lat + 1)
        for j in range(n_lon):
            phi = 2.0 * math.pi * j / n_lon
            units.append(
                np.array(
                    [
                        math.sin(theta) * math.cos(phi),
                        math.cos(theta),
                        math.sin(theta) * math.sin(phi),
                    ]
                )
            )
    units.append(np.array([0.0, -1.0, 0.0]))
    units = np.stack(units)
    verts = units * _HEAD_RADII

    for name, (direction, width, amp) in _FEATURES.items():
        d = np.asarray(direction, dtype=np.float64)
        d = d / np.linalg.norm(d)
        angle = np.arccos(np.clip(units @ d, -1.0, 1.0))
        w = np.exp(-0.5 * (angle / width) ** 2)
        verts = verts + amp * w[:, None] * units

    ring = lambda i: 1 + (i - 1) * n_lon  # first vertex of ring i (1-based)
    south = len(verts) - 1
    faces = []
    for j in range(n_lon):
        jn = (j + 1) % n_lon
        faces.append((0, ring(1) + jn, ring(1) + j))
    for i in range(1, n_lat):
        u, l = ring(i), ring(i + 1)
        for j in range(n_lon):
            jn = (j + 1) % n_lon
            faces.append((u + j, l + jn, l + j))
            faces.append((u + j, u + jn, l + jn))
    for j in range(n_lon):
        jn = (j + 1) % n_lon
        faces.append((south, ring(n_lat) + j, ring(n_lat) + jn))

    landmarks = {}
    for name, (direction, _, _) in _FEATURES.items():
        d = np.asarray(direction, dtype=np.float64)
        d = d / np.linalg.norm(d)
        nearest = np.argsort(-(units @ d))[:6]
        landmarks[name] = sorted(int(i) for i in nearest)

    return TriMesh(verts, np.asarray(faces, dtype=np.int64), landmarks)


def front_mask(template: TriMesh, z_start=0.0, z_full=0.45):
    """Smoothstep in z: exactly 0 at the back of the head, 1 at the face."""
    z = template.vertices[:, 2]
    t = np.clip((z - z_start) / (z_full - z_start), 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def _vertex_neighbors(mesh: TriMesh):
    nbrs = [set() for _ in range(mesh.n_vertices)]
    for a, b, c in mesh.faces:
        nbrs[a].update((b, c))
        nbrs[b].update((a, c))
        nbrs[c].update((a, b))
    return nbrs


def laplacian_energy(mesh: TriMesh, column):
    """Rayleigh quotient of the uniform graph Laplacian on a basis column."""
    col = np.asarray(column, dtype=np.float64)
    lap = np.zeros_like(col)
    for v, nbrs in enumerate(_vertex_neighbors(mesh)):
        if nbrs:
            idx = sorted(nbrs)
            lap[v] = col[v] - col[idx].mean(axis=0)
    denom = float((col * col).sum())
    if denom <= 0.0:
        return 0.0
    return float((lap * lap).sum()) / denom


def _smooth_column(rng, verts, freq_scale, max_modes):
    """Sum of <= max_modes random spatial cosine modes, one (V, 3) field."""
    n_modes = int(rng.integers(3, max_modes + 1))
    col = np.zeros((len(verts), 3))
    for _ in range(n_modes):
        wavevec = rng.normal(size=3) * freq_scale
        amps = rng.normal(size=3)
        phases = rng.uniform(0.0, 2.0 * math.pi, size=3)
        col += np.cos(verts @ wavevec[:, None] + phases) * amps
    return col


def build_toy_model(config: MorphConfig = None, seed=0, template: TriMesh = None):
    """Seeded model: procedural (or user) template plus smooth random bases.

    A user template must carry its landmark sets (the render rig anchors
    on them); bases are regenerated at lower frequency if a column
    violates the Laplacian smoothness cap.
    """
    config = config or MorphConfig()
    if template is None:
        template = build_head_template(config.n_lat, config.n_lon)
    elif not template.landmark_sets:
        raise ValueError("user template requires landmark sets (sidecar JSON)")
    rng = np.random.Generator(np.random.PCG64(seed))
    scale = config.freq_scale / max(bounding_radius(template), 1e-9)
    mask = front_mask(template)

    def make_basis(count, support):
        cols = []
        for _ in range(count):
            freq = scale
            for attempt in range(6):
                col = _smooth_column(rng, template.vertices, freq, config.max_modes)
                if support is not None:
                    col = col * support[:, None]
                rms = math.sqrt(float((col * col).mean()))
                if rms > 0.0:
                    col = col * (config.basis_amplitude / rms)
                if laplacian_energy(template, col) <= config.laplacian_cap:
                    break
                freq *= 0.7  # too wiggly for the cap; redraw smoother
            else:
                raise RuntimeError("could not draw a basis column under the cap")
            cols.append(col)
        return np.stack(cols, axis=2)

    shape_basis = make_basis(config.k_shape, None)
    expr_basis = make_basis(config.k_expr, mask)
    k_total = config.k_shape + config.k_expr
    return ToyMorphable(
        template=template,
        shape_basis=shape_basis,
        expr_basis=expr_basis,
        sampling_low=np.full(k_total, config.coeff_low),
        sampling_high=np.full(k_total, config.coeff_high),
        seed=seed,
        config=config,
    )


def decode(model: ToyMorphable, params: MorphParams) -> TriMesh:
    """T-bar + shape_basis @ beta + expr_basis @ psi, template connectivity."""
    if len(params.beta) != model.k_shape or len(params.psi) != model.k_expr:
        raise ValueError(
            f"rank mismatch: model is ({model.k_shape}, {model.k_expr}), "
            f"params are ({len(params.beta)}, {len(params.psi)})"
        )
    verts = (
        model.template.vertices
        + model.shape_basis @ params.beta
        + model.expr_basis @ params.psi
    )
    return model.template.with_vertices(verts)


def sample_params(model: ToyMorphable, seed) -> MorphParams:
    """Coefficients i.i.d. uniform within the model's per-coefficient bounds."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.Generator(
        np.random.PCG64(seed)
    )
    draw = rng.uniform(model.sampling_low, model.sampling_high)
    return MorphParams(draw[: model.k_shape], draw[model.k_shape:])
