"""Triangle meshes: OBJ I/O, normals, surface sampling, remeshing.

Meshes are immutable after construction (the arrays are frozen), so they
can be shared freely. The two remeshing operators, Loop subdivision and
greedy quadric-error edge collapse with midpoint placement, both expose
their action on vertex positions as a sparse ``LinearMap``: applying the
map to any other vertex array of the same topology reproduces the
remeshed variant exactly, which is what gives remeshed meshes dense
point correspondence with their source topology.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class ObjFormatError(ValueError):
    """Malformed OBJ input; message carries the 1-based line number."""


def _as_rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.PCG64(seed))


@dataclass(eq=False)
class TriMesh:
    """Indexed triangle surface.

    ``faces`` may be empty (point-cloud-like inputs for the encoder
    paths). Faces are counter-clockwise; indices are validated against
    the vertex count and must be three distinct vertices each.
    """

    vertices: np.ndarray
    faces: np.ndarray
    landmark_sets: dict | None = None

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64)
        f = np.array(self.faces, dtype=np.int64).reshape(-1, 3)
        if v.ndim != 2 or v.shape[1] != 3:
            raise ValueError(f"vertices must be Vx3, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("vertices contain non-finite values")
        if f.size:
            if f.min() < 0 or f.max() >= len(v):
                raise ValueError("face index out of range")
            distinct = (
                (f[:, 0] != f[:, 1]) & (f[:, 1] != f[:, 2]) & (f[:, 0] != f[:, 2])
            )
            if not np.all(distinct):
                bad = int(np.argmin(distinct))
                raise ValueError(f"degenerate face {bad}: repeated vertex index")
        if self.landmark_sets is not None:
            for name, idx in self.landmark_sets.items():
                idx = list(idx)
                if any((i < 0 or i >= len(v)) for i in idx):
                    raise ValueError(f"landmark set {name!r}: index out of range")
        v.setflags(write=False)
        f.setflags(write=False)
        self.vertices = v
        self.faces = f

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_faces(self):
        return len(self.faces)

    def with_vertices(self, vertices):
        """Same topology and landmarks, new vertex positions."""
        return TriMesh(vertices, self.faces, self.landmark_sets)

    def __repr__(self):
        return f"TriMesh(V={self.n_vertices}, F={self.n_faces})"


@dataclass
class SurfaceSample:
    """One point on a mesh surface, pinned by face and barycentrics."""

    face_index: int
    bary: np.ndarray  # (w0, w1, w2), nonnegative, sums to 1
    position: np.ndarray


@dataclass
class LinearMap:
    """Sparse linear map on per-vertex attributes: y[row] += val * x[col]."""

    n_out: int
    n_in: int
    row: np.ndarray
    col: np.ndarray
    val: np.ndarray

    def apply(self, x):
        x = np.asarray(x, dtype=np.float64)
        if len(x) != self.n_in:
            raise ValueError(f"LinearMap: expected {self.n_in} rows, got {len(x)}")
        out = np.zeros((self.n_out,) + x.shape[1:], dtype=np.float64)
        contrib = self.val.reshape((-1,) + (1,) * (x.ndim - 1)) * x[self.col]
        np.add.at(out, self.row, contrib)
        return out

    @classmethod
    def from_rows(cls, rows, n_in):
        """Build from a list of {column: weight} dicts, one per output row."""
        r, c, v = [], [], []
        for i, entries in enumerate(rows):
            for j in sorted(entries):
                r.append(i)
                c.append(j)
                v.append(entries[j])
        return cls(
            len(rows), n_in,
            np.asarray(r, dtype=np.int64),
            np.asarray(c, dtype=np.int64),
            np.asarray(v, dtype=np.float64),
        )


# ---------------------------------------------------------------------------
# OBJ subset


def obj_read(data) -> TriMesh:
    """Parse the OBJ subset: `v x y z`, `f i j k` (1-indexed), comments."""
    text = data.decode("utf-8") if isinstance(data, (bytes, bytearray)) else data
    verts = []
    faces = []
    face_lines = []
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if parts[0] == "v":
            if len(parts) != 4:
                raise ObjFormatError(f"line {ln}: expected 'v x y z'")
            try:
                verts.append([float(p) for p in parts[1:]])
            except ValueError:
                raise ObjFormatError(f"line {ln}: malformed number") from None
        elif parts[0] == "f":
            if len(parts) != 4:
                raise ObjFormatError(f"line {ln}: only triangle faces are supported")
            try:
                idx = [int(p) for p in parts[1:]]
            except ValueError:
                raise ObjFormatError(f"line {ln}: malformed face index") from None
            faces.append(idx)
            face_lines.append(ln)
        else:
            raise ObjFormatError(f"line {ln}: unsupported keyword {parts[0]!r}")
    n = len(verts)
    clean = []
    for idx, ln in zip(faces, face_lines):
        if any(i < 1 or i > n for i in idx):
            raise ObjFormatError(f"line {ln}: face index out of range (V={n})")
        if len(set(idx)) != 3:
            raise ObjFormatError(f"line {ln}: face repeats a vertex index")
        clean.append([i - 1 for i in idx])
    return TriMesh(
        np.asarray(verts, dtype=np.float64).reshape(-1, 3),
        np.asarray(clean, dtype=np.int64).reshape(-1, 3),
    )


def obj_write(mesh: TriMesh) -> bytes:
    """Serialize with shortest-round-trip floats; read-back is exact."""
    out = [f"# facestyle mesh V={mesh.n_vertices} F={mesh.n_faces}"]
    for x, y, z in mesh.vertices:
        out.append(f"v {float(x)!r} {float(y)!r} {float(z)!r}")
    for a, b, c in mesh.faces:
        out.append(f"f {a + 1} {b + 1} {c + 1}")
    return ("\n".join(out) + "\n").encode("utf-8")


def landmarks_write(landmark_sets: dict) -> bytes:
    return json.dumps(
        {k: [int(i) for i in v] for k, v in sorted(landmark_sets.items())},
        indent=1,
    ).encode("utf-8")


def landmarks_read(data) -> dict:
    text = data.decode("utf-8") if isinstance(data, (bytes, bytearray)) else data
    raw = json.loads(text)
    return {str(k): [int(i) for i in v] for k, v in raw.items()}


# ---------------------------------------------------------------------------
# normals and sampling


def face_normals(vertices, faces=None):
    """Unit normals per ccw face; degenerate faces yield the zero vector.

    Pass a TriMesh, or (vertices, faces) where vertices may be an autodiff
    Tensor; the Tensor path records gradients. Both paths use the guarded
    normalization, so a zero cross product maps to a zero normal with a
    zero (not NaN) gradient.
    """
    if isinstance(vertices, TriMesh):
        vertices, faces = vertices.vertices, vertices.faces
    faces = np.asarray(faces, dtype=np.int64)
    if isinstance(vertices, Tensor):
        v0 = ad.take(vertices, faces[:, 0])
        v1 = ad.take(vertices, faces[:, 1])
        v2 = ad.take(vertices, faces[:, 2])
        return ad.normalize(ad.cross(v1 - v0, v2 - v0), axis=-1)
    v = np.asarray(vertices, dtype=np.float64)
    n = np.cross(v[faces[:, 1]] - v[faces[:, 0]], v[faces[:, 2]] - v[faces[:, 0]])
    return n / np.sqrt((n * n).sum(axis=-1, keepdims=True) + ad.NORM_EPS_SQ)


def vertex_normals(mesh: TriMesh):
    """Area-weighted unit vertex normals.

    Each face contributes its unnormalized cross product (twice its area
    times the unit normal) to its three corners, so large faces dominate.
    Isolated vertices get the zero vector.
    """
    v, f = mesh.vertices, mesh.faces
    if len(f) == 0:
        return np.zeros_like(v)
    n = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    acc = np.zeros_like(v)
    for corner in range(3):
        np.add.at(acc, f[:, corner], n)
    return acc / np.sqrt((acc * acc).sum(axis=-1, keepdims=True) + ad.NORM_EPS_SQ)


def degenerate_faces(mesh: TriMesh, tol=1e-12):
    """Mask of faces whose cross product is shorter than `tol`."""
    v, f = mesh.vertices, mesh.faces
    n = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    return np.linalg.norm(n, axis=-1) <= tol


def face_areas(mesh: TriMesh):
    v, f = mesh.vertices, mesh.faces
    n = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    return 0.5 * np.linalg.norm(n, axis=-1)


def bounding_radius(mesh: TriMesh):
    """Max vertex distance from the vertex centroid."""
    c = mesh.vertices.mean(axis=0)
    return float(np.linalg.norm(mesh.vertices - c, axis=1).max())


def barycentric_positions(vertices, faces, face_idx, bary):
    """w0*v0 + w1*v1 + w2*v2 per sample; differentiable on Tensor vertices."""
    faces = np.asarray(faces, dtype=np.int64)
    face_idx = np.asarray(face_idx, dtype=np.int64)
    tri = faces[face_idx]  # (n, 3)
    if isinstance(vertices, Tensor):
        corners = ad.take(vertices, tri.reshape(-1)).reshape(len(tri), 3, 3)
        return (corners * Tensor(np.asarray(bary)[:, :, None])).sum(axis=1)
    v = np.asarray(vertices, dtype=np.float64)
    return np.einsum("nij,ni->nj", v[tri], np.asarray(bary, dtype=np.float64))


def sample_surface(mesh: TriMesh, count: int, seed=0):
    """Area-weighted face choice + uniform simplex barycentrics.

    Returns (face_idx, bary, positions) arrays; the square-root trick
    makes the per-face point distribution uniform.
    """
    if mesh.n_faces < 1:
        raise ValueError("sample_surface: mesh has no faces")
    rng = _as_rng(seed)
    areas = face_areas(mesh)
    total = float(areas.sum())
    if total <= 0.0:
        raise ValueError("sample_surface: zero total surface area")
    face_idx = rng.choice(mesh.n_faces, size=count, p=areas / total)
    r1 = rng.random(count)
    r2 = rng.random(count)
    s = np.sqrt(r1)
    bary = np.stack([1.0 - s, s * (1.0 - r2), s * r2], axis=1)
    pos = barycentric_positions(mesh.vertices, mesh.faces, face_idx, bary)
    return face_idx.astype(np.int64), bary, pos


def sims_sample(mesh: TriMesh, ratio=4.0, seed=0):
    """Surface-intensive sampling: ceil(ratio * V) random surface points."""
    if ratio <= 0:
        raise ValueError("sims_sample: ratio must be positive")
    count = math.ceil(ratio * mesh.n_vertices)
    face_idx, bary, pos = sample_surface(mesh, count, seed)
    return [
        SurfaceSample(int(f), bary[i].copy(), pos[i].copy())
        for i, f in enumerate(face_idx)
    ]


def vertex_only_points(mesh: TriMesh):
    return mesh.vertices.copy()


def vertex_samples(mesh: TriMesh):
    """One SurfaceSample per vertex: one-hot barycentrics on its first face.

    Gives vertex positions the same (face, bary) currency as random surface
    samples, so correspondence transfers to any mesh sharing the connectivity.
    """
    flat = mesh.faces.reshape(-1)
    ids, first = np.unique(flat, return_index=True)
    if len(ids) != mesh.n_vertices or ids[0] != 0 or ids[-1] != mesh.n_vertices - 1:
        raise ValueError("vertex_samples: mesh has vertices not used by any face")
    out = []
    for v in range(mesh.n_vertices):
        pos = first[v]
        bary = np.zeros(3)
        bary[pos % 3] = 1.0
        out.append(SurfaceSample(int(pos // 3), bary, mesh.vertices[v].copy()))
    return out


def hybrid_sample(mesh: TriMesh, seed=0):
    """All vertices plus ceil(1.1 * V) surface points, stacked."""
    extra = math.ceil(1.1 * mesh.n_vertices)
    _, _, pos = sample_surface(mesh, extra, seed)
    return np.concatenate([mesh.vertices, pos], axis=0)


# ---------------------------------------------------------------------------
# Loop subdivision


def _edge_incidence(faces):
    """(a,b)->[(face, opposite vertex), ...] with a<b; rejects >2 faces/edge."""
    edges = {}
    for fi, (a, b, c) in enumerate(faces):
        for u, v, w in ((a, b, c), (b, c, a), (c, a, b)):
            key = (u, v) if u < v else (v, u)
            edges.setdefault(key, []).append((fi, w))
    for key, inc in edges.items():
        if len(inc) > 2:
            raise ValueError(f"non-manifold edge {key}: {len(inc)} incident faces")
    return edges


def loop_subdivide_with_map(mesh: TriMesh):
    """Loop subdivision returning (mesh', LinearMap old-vertices -> new)."""
    if mesh.n_faces == 0:
        raise ValueError("loop_subdivide: mesh has no faces")
    V = mesh.n_vertices
    faces = [tuple(int(i) for i in f) for f in mesh.faces]
    edges = _edge_incidence(faces)
    edge_keys = sorted(edges)
    edge_id = {key: V + k for k, key in enumerate(edge_keys)}

    neighbors = [set() for _ in range(V)]
    boundary_nbrs = [set() for _ in range(V)]
    for (a, b), inc in edges.items():
        neighbors[a].add(b)
        neighbors[b].add(a)
        if len(inc) == 1:
            boundary_nbrs[a].add(b)
            boundary_nbrs[b].add(a)

    rows = []
    for v in range(V):
        if boundary_nbrs[v]:
            if len(boundary_nbrs[v]) != 2:
                raise ValueError(
                    f"vertex {v} lies on {len(boundary_nbrs[v])} boundary edges"
                )
            b0, b1 = sorted(boundary_nbrs[v])
            rows.append({v: 0.75, b0: 0.125, b1: 0.125})
        elif neighbors[v]:
            n = len(neighbors[v])
            beta = 3.0 / 16.0 if n == 3 else 3.0 / (8.0 * n)
            row = {u: beta for u in neighbors[v]}
            row[v] = 1.0 - n * beta
            rows.append(row)
        else:
            rows.append({v: 1.0})
    for a, b in edge_keys:
        inc = edges[(a, b)]
        if len(inc) == 1:
            rows.append({a: 0.5, b: 0.5})
        else:
            c, d = inc[0][1], inc[1][1]
            row = {a: 0.375, b: 0.375}
            # opposite vertices coincide on pathological folds; sum weights
            row[c] = row.get(c, 0.0) + 0.125
            row[d] = row.get(d, 0.0) + 0.125
            rows.append(row)

    new_faces = []
    for a, b, c in faces:
        mab = edge_id[(a, b) if a < b else (b, a)]
        mbc = edge_id[(b, c) if b < c else (c, b)]
        mca = edge_id[(c, a) if c < a else (a, c)]
        new_faces.extend([(a, mab, mca), (b, mbc, mab), (c, mca, mbc), (mab, mbc, mca)])

    lin = LinearMap.from_rows(rows, V)
    out = TriMesh(lin.apply(mesh.vertices), np.asarray(new_faces, dtype=np.int64),
                  mesh.landmark_sets)
    return out, lin


def loop_subdivide(mesh: TriMesh) -> TriMesh:
    """One round of Loop subdivision: V' = V + E, F' = 4F."""
    out, _ = loop_subdivide_with_map(mesh)
    return out


# ---------------------------------------------------------------------------
# quadric-error simplification


@dataclass
class SimplifyResult:
    mesh: TriMesh
    reached_target: bool
    vertex_map: LinearMap = field(repr=False, default=None)


def _plane_quadric(p0, p1, p2):
    n = np.cross(p1 - p0, p2 - p0)
    norm = np.linalg.norm(n)
    if norm <= 1e-18:
        return np.zeros((4, 4))
    n = n / norm
    d = -float(n @ p0)
    p = np.array([n[0], n[1], n[2], d])
    return np.outer(p, p)


def simplify(mesh: TriMesh, target_vertex_fraction: float) -> SimplifyResult:
    """Greedy quadric-error edge collapse to ceil(fraction * V) vertices.

    Collapsed edges place the merged vertex at the edge midpoint, so every
    surviving vertex stays a fixed linear combination of the input
    vertices (exposed as ``vertex_map``). Collapses that would break the
    edge link condition, duplicate a face, or flip a face normal are
    skipped; if the target can't be reached, the best achieved mesh is
    returned with ``reached_target=False``.
    """
    if not (0.0 < target_vertex_fraction < 1.0):
        raise ValueError("simplify: fraction must be in (0, 1)")
    if mesh.n_faces == 0:
        raise ValueError("simplify: mesh has no faces")
    V = mesh.n_vertices
    _edge_incidence(mesh.faces)  # manifoldness check up front
    # always attempt at least one collapse, so a blocked minimal mesh
    # (e.g. a tetrahedron) reports best-effort instead of a silent no-op
    target = min(math.ceil(target_vertex_fraction * V), V - 1)

    pos = mesh.vertices.copy()
    rows = [{i: 1.0} for i in range(V)]
    quadrics = np.zeros((V, 4, 4))
    faces = {fi: tuple(int(i) for i in f) for fi, f in enumerate(mesh.faces)}
    vert_faces = [set() for _ in range(V)]
    for fi, f in faces.items():
        q = _plane_quadric(pos[f[0]], pos[f[1]], pos[f[2]])
        for v in f:
            quadrics[v] += q
            vert_faces[v].add(fi)
    alive = np.ones(V, dtype=bool)
    version = np.zeros(V, dtype=np.int64)

    def current_neighbors(v):
        nbrs = set()
        for fi in vert_faces[v]:
            nbrs.update(faces[fi])
        nbrs.discard(v)
        return nbrs

    def edge_cost(i, j):
        m = 0.5 * (pos[i] + pos[j])
        h = np.array([m[0], m[1], m[2], 1.0])
        return float(h @ (quadrics[i] + quadrics[j]) @ h)

    heap = []
    pushed = set()
    for a, b, c in faces.values():
        for i, j in ((a, b), (b, c), (c, a)):
            key = (i, j) if i < j else (j, i)
            if key not in pushed:
                pushed.add(key)
                heapq.heappush(heap, (edge_cost(*key), key, 0, 0))

    def face_normal_raw(f, override=None, at=None):
        p = [at if (override is not None and v == override) else pos[v] for v in f]
        return np.cross(p[1] - p[0], p[2] - p[0])

    n_alive = V
    while n_alive > target and heap:
        cost, (i, j), vi, vj = heapq.heappop(heap)
        if not (alive[i] and alive[j]) or version[i] != vi or version[j] != vj:
            continue
        shared = vert_faces[i] & vert_faces[j]
        if not shared:
            continue  # stale entry; no longer an edge
        # link condition: shared neighborhood must be exactly the apexes
        # of the shared faces, otherwise the collapse pinches the surface
        apexes = {v for fi in shared for v in faces[fi] if v not in (i, j)}
        if current_neighbors(i) & current_neighbors(j) != apexes:
            continue
        midpoint = 0.5 * (pos[i] + pos[j])
        moved = (vert_faces[i] | vert_faces[j]) - shared
        ok = True
        seen_sets = set()
        for fi in moved:
            f = faces[fi]
            before = face_normal_raw(f)
            remap = tuple(i if v == j else v for v in f)
            after = face_normal_raw(remap, override=i, at=midpoint)
            if float(before @ after) <= 1e-18:
                ok = False  # flipped or collapsed to zero area
                break
            key = frozenset(remap)
            if key in seen_sets:
                ok = False  # two faces would fold onto the same vertex set
                break
            seen_sets.add(key)
        if not ok:
            continue

        # commit: j merges into i at the midpoint
        pos[i] = midpoint
        ri, rj = rows[i], rows[j]
        merged = {k: 0.5 * w for k, w in ri.items()}
        for k, w in rj.items():
            merged[k] = merged.get(k, 0.0) + 0.5 * w
        rows[i] = merged
        quadrics[i] = quadrics[i] + quadrics[j]
        for fi in shared:
            for v in faces[fi]:
                vert_faces[v].discard(fi)
            del faces[fi]
        for fi in list(vert_faces[j]):
            f = faces[fi]
            faces[fi] = tuple(i if v == j else v for v in f)
            vert_faces[j].discard(fi)
            vert_faces[i].add(fi)
        alive[j] = False
        version[i] += 1
        n_alive -= 1
        for u in sorted(current_neighbors(i)):
            key = (i, u) if i < u else (u, i)
            heapq.heappush(
                heap, (edge_cost(*key), key, int(version[key[0]]), int(version[key[1]]))
            )

    keep = np.flatnonzero(alive)
    remap = -np.ones(V, dtype=np.int64)
    remap[keep] = np.arange(len(keep))
    new_faces = np.asarray(
        [[remap[v] for v in f] for _, f in sorted(faces.items())], dtype=np.int64
    ).reshape(-1, 3)
    lin = LinearMap.from_rows([rows[v] for v in keep], V)
    out = TriMesh(lin.apply(mesh.vertices), new_faces)
    return SimplifyResult(out, bool(n_alive <= target), lin)
