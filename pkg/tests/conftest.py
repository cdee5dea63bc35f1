"""Shared test helpers and session fixtures."""

import numpy as np
import pytest


def central_diff(f, x, step=1e-5):
    """Independent finite-difference gradient of a scalar numpy function.

    ``f`` takes and returns plain numpy (scalar out); no autodiff types
    involved, so this is a genuinely separate oracle.
    """
    x = np.array(x, dtype=np.float64)  # private copy; perturbed in place below
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f(x))
        flat[i] = orig - step
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return g


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    return np.max(np.abs(a - b) / denom)


@pytest.fixture(scope="session")
def rng():
    return np.random.Generator(np.random.PCG64(12345))


def point_mesh_distance(points, vertices, faces):
    """Exact distance from each query point to a triangle soup.

    The closest point on a triangle is either the in-triangle plane
    projection or a point on one of the three edge segments, so the
    minimum over those four candidates is exact. Vectorized over all
    (point, face) pairs; independent of the package's geometry code.
    """
    p = np.asarray(points, dtype=np.float64)[:, None, :]  # (n,1,3)
    v = np.asarray(vertices, dtype=np.float64)
    f = np.asarray(faces, dtype=np.int64)
    a, b, c = v[f[:, 0]][None], v[f[:, 1]][None], v[f[:, 2]][None]  # (1,m,3)

    best = np.full((p.shape[0], f.shape[0]), np.inf)
    for e0, e1 in ((a, b), (b, c), (c, a)):
        d = e1 - e0
        t = np.einsum("nmk,nmk->nm", p - e0, d) / np.maximum(
            np.einsum("nmk,nmk->nm", d, d), 1e-300
        )
        t = np.clip(t, 0.0, 1.0)
        seg = e0 + t[..., None] * d
        best = np.minimum(best, np.linalg.norm(p - seg, axis=-1))

    e0, e1 = b - a, c - a
    n = np.cross(e0, e1)
    nn = np.einsum("nmk,nmk->nm", n, n)
    w = p - a
    u = np.einsum("nmk,nmk->nm", np.cross(w, e1), n) / np.maximum(nn, 1e-300)
    vv = np.einsum("nmk,nmk->nm", np.cross(e0, w), n) / np.maximum(nn, 1e-300)
    inside = (u >= 0) & (vv >= 0) & (u + vv <= 1) & (nn > 1e-300)
    plane = np.abs(
        np.einsum("nmk,nmk->nm", w, n) / np.sqrt(np.maximum(nn, 1e-300))
    )
    best = np.where(inside, np.minimum(best, plane), best)
    return best.min(axis=1)


def icosahedron():
    """Unit icosahedron (V=12, E=30, F=20), ccw outward winding."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            (-1, phi, 0), (1, phi, 0), (-1, -phi, 0), (1, -phi, 0),
            (0, -1, phi), (0, 1, phi), (0, -1, -phi), (0, 1, -phi),
            (phi, 0, -1), (phi, 0, 1), (-phi, 0, -1), (-phi, 0, 1),
        ],
        dtype=np.float64,
    )
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = np.array(
        [
            (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
            (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
            (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
            (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
        ],
        dtype=np.int64,
    )
    return verts, faces
