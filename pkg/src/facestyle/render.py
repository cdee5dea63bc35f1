"""Differentiable soft rasterizer and the three-level camera rig.

Each triangle splats a sigmoid coverage profile around its projected
outline and pixels blend face colors with a softmax over inverse depth,
so the image is a smooth function of vertex positions. Shading is
normal-based: a face's color is (n+1)/2 with n its unit normal in camera
space, which makes renders carry exactly the geometric signal the image
losses need.

The rig places ten cameras on three levels: four close-ups anchored at
the facial-part landmark centroids, then three close-face and three
full-face views around the mesh centroid at azimuths -45/0/+45 degrees.
Meshes are assumed y-up with the face looking along +z, the convention
of the bundled head model.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor
from .mesh import TriMesh, bounding_radius

_PART_VIEWS = ("left_eye", "right_eye", "nose", "lips")

# Pixels farther than this from a face's screen bbox see a coverage
# sigmoid below 1e-17 at the default sigma, so culling them changes
# nothing at float64 precision.
_PAD_PX = 3


@dataclass
class RenderConfig:
    resolution: int = 64
    sigma: float = 1e-4
    gamma: float = 1e-4
    fov_deg: float = 50.0
    part_distance: float = 0.6
    close_distance: float = 1.5
    full_distance: float = 2.5
    azimuths_deg: tuple = (-45.0, 0.0, 45.0)
    near_scale: float = 0.01
    far_scale: float = 100.0


@dataclass
class Camera:
    """Perspective pinhole camera with a square image plane.

    ``near``/``far`` bound the depth range used for the inverse-depth
    softmax; when left as None they default to 0.01 and 100 bounding
    radii of whatever mesh is rasterized.
    """

    eye: np.ndarray
    look_at: np.ndarray
    up: np.ndarray = (0.0, 1.0, 0.0)
    fov_deg: float = 50.0
    resolution: int = 64
    near: float = None
    far: float = None

    def __post_init__(self):
        self.eye = np.asarray(self.eye, dtype=np.float64)
        self.look_at = np.asarray(self.look_at, dtype=np.float64)
        self.up = np.asarray(self.up, dtype=np.float64)
        for name in ("eye", "look_at", "up"):
            v = getattr(self, name)
            if v.shape != (3,) or not np.all(np.isfinite(v)):
                raise ValueError(f"Camera: {name} must be 3 finite reals")
        if np.linalg.norm(self.look_at - self.eye) <= 1e-12:
            raise ValueError("Camera: eye and look_at coincide")
        if not 0.0 < self.fov_deg < 120.0:
            raise ValueError("Camera: vertical fov must lie in (0, 120) degrees")
        self.resolution = int(self.resolution)
        if self.resolution < 4:
            raise ValueError("Camera: resolution must be at least 4 pixels")
        forward = self.look_at - self.eye
        if np.linalg.norm(np.cross(forward, self.up)) <= 1e-12:
            raise ValueError("Camera: up vector is parallel to the view direction")
        if self.near is not None and self.far is not None and not (
            0.0 < self.near < self.far
        ):
            raise ValueError("Camera: need 0 < near < far")


@dataclass
class RenderRig:
    """Ordered camera levels; level 1 part views, then close and full face."""

    levels: list = field(default_factory=list)

    @property
    def n_views(self):
        return sum(len(cams) for cams in self.levels)

    def views(self):
        """Yield (level, view, camera) in render order; levels are 1-based."""
        for level_idx, cams in enumerate(self.levels, start=1):
            for view_idx, cam in enumerate(cams):
                yield level_idx, view_idx, cam


def _camera_frame(camera):
    """Row-stacked (right, up, back) basis; camera looks along -back."""
    f = camera.look_at - camera.eye
    f = f / np.linalg.norm(f)
    r = np.cross(f, camera.up)
    r = r / np.linalg.norm(r)
    u = np.cross(r, f)
    return np.stack([r, u, -f])


def build_rig(mesh: TriMesh, config: RenderConfig = None) -> RenderRig:
    """Place the ten rig cameras around a landmarked mesh.

    Part close-ups sit ``part_distance`` bounding radii in front of each
    landmark centroid; the two outer levels orbit the mesh centroid at
    ``close_distance`` and ``full_distance`` radii.
    """
    cfg = config if config is not None else RenderConfig()
    sets = mesh.landmark_sets or {}
    missing = [p for p in _PART_VIEWS if p not in sets]
    if missing:
        raise ValueError(f"build_rig: mesh is missing landmark sets {missing}")
    radius = bounding_radius(mesh)
    center = mesh.vertices.mean(axis=0)
    near = cfg.near_scale * radius
    far = cfg.far_scale * radius

    def cam(eye, look_at):
        return Camera(
            eye=eye,
            look_at=look_at,
            up=(0.0, 1.0, 0.0),
            fov_deg=cfg.fov_deg,
            resolution=cfg.resolution,
            near=near,
            far=far,
        )

    parts = []
    for part in _PART_VIEWS:
        anchor = mesh.vertices[mesh.landmark_sets[part]].mean(axis=0)
        parts.append(cam(anchor + [0.0, 0.0, cfg.part_distance * radius], anchor))

    def ring(distance):
        cams = []
        for azimuth in cfg.azimuths_deg:
            a = math.radians(azimuth)
            direction = np.array([math.sin(a), 0.0, math.cos(a)])
            cams.append(cam(center + distance * radius * direction, center))
        return cams

    return RenderRig(
        levels=[parts, ring(cfg.close_distance), ring(cfg.full_distance)]
    )


def _mesh_arrays(mesh):
    if isinstance(mesh, TriMesh):
        return Tensor(mesh.vertices), mesh.faces
    vertices, faces = mesh
    vertices = as_tensor(vertices)
    faces = np.asarray(faces, dtype=np.int64)
    if vertices.ndim != 2 or vertices.shape[1] != 3:
        raise ValueError("rasterize_soft: vertices must be (V, 3)")
    if faces.ndim != 2 or faces.shape[1] != 3:
        raise ValueError("rasterize_soft: faces must be (F, 3)")
    return vertices, faces


def _segment_dist2(qx, qy, x0, y0, x1, y1):
    """Squared distance from constant points (qx, qy) to segments."""
    ex = x1 - x0
    ey = y1 - y0
    len2 = ex * ex + ey * ey + 1e-18
    t = ad.clamp(((qx - x0) * ex + (qy - y0) * ey) / len2, 0.0, 1.0)
    dx = qx - (x0 + t * ex)
    dy = qy - (y0 + t * ey)
    return dx * dx + dy * dy


def _cross2(ax, ay, bx, by):
    return ax * by - ay * bx


def rasterize_soft(mesh, camera: Camera, sigma: float = 1e-4, gamma: float = 1e-4):
    """Render one soft-rasterized, normal-shaded view.

    ``mesh`` is a TriMesh or a ``(vertices, faces)`` pair whose vertices
    may be a Tensor; the returned (res, res, 3) image Tensor is then
    differentiable with respect to those vertices. Faces with any corner
    outside the camera's depth range are culled, as are pixels more than
    a few pixels away from a face's screen bbox; both cuts fall below
    the coverage sigmoid's float64 tail.
    """
    if sigma <= 0.0 or gamma <= 0.0:
        raise ValueError("rasterize_soft: sigma and gamma must be positive")
    vertices, faces = _mesh_arrays(mesh)
    if faces.shape[0] < 1:
        raise ValueError("rasterize_soft: mesh has no faces")
    res = camera.resolution
    n_pix = res * res

    near, far = camera.near, camera.far
    if near is None or far is None:
        data = vertices.data
        radius = max(
            float(np.linalg.norm(data - data.mean(axis=0), axis=1).max()), 1e-9
        )
        near = 0.01 * radius if near is None else near
        far = 100.0 * radius if far is None else far

    frame = _camera_frame(camera)
    cam = (vertices - camera.eye) @ frame.T
    depth_raw = -cam[:, 2]
    # Clamped copy keeps behind-camera vertices finite; their faces are
    # culled below so the clamp never touches a contributing value.
    depth = ad.clamp(depth_raw, lo=0.5 * near)
    tan_half = math.tan(math.radians(camera.fov_deg) / 2.0)
    xn = cam[:, 0] / (depth * tan_half)
    yn = cam[:, 1] / (depth * tan_half)

    white = Tensor(np.ones((res, res, 3)))
    corner_depth = depth_raw.data[faces]
    keep = np.flatnonzero(
        (corner_depth > near).all(axis=1) & (corner_depth < far).all(axis=1)
    )
    if keep.size == 0:
        return white
    fk = faces[keep]

    # Screen bboxes in fractional pixel coordinates (row 0 at the top).
    xd, yd = xn.data, yn.data
    col = (xd + 1.0) * (res / 2.0) - 0.5
    row = (1.0 - yd) * (res / 2.0) - 0.5
    cmin = np.ceil(col[fk].min(axis=1) - _PAD_PX).astype(np.int64)
    cmax = np.floor(col[fk].max(axis=1) + _PAD_PX).astype(np.int64)
    rmin = np.ceil(row[fk].min(axis=1) - _PAD_PX).astype(np.int64)
    rmax = np.floor(row[fk].max(axis=1) + _PAD_PX).astype(np.int64)
    onscreen = (
        (cmax >= 0) & (cmin <= res - 1) & (rmax >= 0) & (rmin <= res - 1)
    )
    fk = fk[onscreen]
    if fk.shape[0] == 0:
        return white
    cmin = np.clip(cmin[onscreen], 0, res - 1)
    cmax = np.clip(cmax[onscreen], 0, res - 1)
    rmin = np.clip(rmin[onscreen], 0, res - 1)
    rmax = np.clip(rmax[onscreen], 0, res - 1)

    # One (face, pixel) pair per bbox cell, face-major then row-major.
    width = cmax - cmin + 1
    counts = width * (rmax - rmin + 1)
    total = int(counts.sum())
    face_of = np.repeat(np.arange(fk.shape[0]), counts)
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    offset = np.arange(total) - starts[face_of]
    pair_w = width[face_of]
    pr = rmin[face_of] + offset // pair_w
    pc = cmin[face_of] + offset % pair_w
    pix = pr * res + pc
    qx = (pc + 0.5) * (2.0 / res) - 1.0
    qy = 1.0 - (pr + 0.5) * (2.0 / res)

    ia, ib, ic = fk[face_of, 0], fk[face_of, 1], fk[face_of, 2]
    axt, ayt = xn[ia], yn[ia]
    bxt, byt = xn[ib], yn[ib]
    cxt, cyt = xn[ic], yn[ic]

    d2 = ad.minimum(
        _segment_dist2(qx, qy, axt, ayt, bxt, byt),
        ad.minimum(
            _segment_dist2(qx, qy, bxt, byt, cxt, cyt),
            _segment_dist2(qx, qy, cxt, cyt, axt, ayt),
        ),
    )

    # Inside test on the current values only: the sign is locally
    # constant and the coverage profile is flat where it flips.
    axd, ayd = xd[ia], yd[ia]
    bxd, byd = xd[ib], yd[ib]
    cxd, cyd = xd[ic], yd[ic]
    s0 = (bxd - axd) * (qy - ayd) - (byd - ayd) * (qx - axd)
    s1 = (cxd - bxd) * (qy - byd) - (cyd - byd) * (qx - bxd)
    s2 = (axd - cxd) * (qy - cyd) - (ayd - cyd) * (qx - cxd)
    inside = ((s0 >= 0) & (s1 >= 0) & (s2 >= 0)) | (
        (s0 <= 0) & (s1 <= 0) & (s2 <= 0)
    )
    signed_scale = np.where(inside, 1.0, -1.0) / sigma
    coverage = -ad.softplus(-(d2 * signed_scale))

    # Depth at the pixel from clamped, renormalized barycentrics; the
    # signed-area denominator is floored away from zero for slivers.
    den = _cross2(bxt - axt, byt - ayt, cxt - axt, cyt - ayt)
    den_sign = np.where(den.data >= 0.0, 1.0, -1.0)
    den_safe = ad.clamp(ad.abs_(den), lo=1e-12) * den_sign
    w0 = ad.clamp(_cross2(bxt - qx, byt - qy, cxt - qx, cyt - qy) / den_safe, 0.0, 1.0)
    w1 = ad.clamp(_cross2(cxt - qx, cyt - qy, axt - qx, ayt - qy) / den_safe, 0.0, 1.0)
    w2 = ad.clamp(_cross2(axt - qx, ayt - qy, bxt - qx, byt - qy) / den_safe, 0.0, 1.0)
    wsum = w0 + w1 + w2 + 1e-12
    za, zb, zc = depth[ia], depth[ib], depth[ic]
    z_pix = ad.clamp((w0 * za + w1 * zb + w2 * zc) / wsum, lo=near, hi=far)
    zinv = (1.0 / z_pix - 1.0 / far) * (1.0 / (1.0 / near - 1.0 / far))

    logit = coverage + zinv * (1.0 / gamma)

    # Per-pixel max logit, background's zero logit included via the
    # zero init. Softmax is exactly invariant to this shift, so using
    # the detached values loses nothing.
    m = np.zeros(n_pix)
    np.maximum.at(m, pix, logit.data)
    weight = ad.exp(logit - m[pix])

    # Normal shading in camera space with back faces flipped toward the
    # viewer. A face is back-facing when the eye sits behind its plane,
    # which is exactly where its projected area vanishes, so the flip
    # only switches while the face is an edge-on sliver.
    va = ad.take(cam, fk[:, 0])
    vb = ad.take(cam, fk[:, 1])
    vc = ad.take(cam, fk[:, 2])
    normal = ad.normalize(ad.cross(vb - va, vc - va), axis=-1)
    centroid = (va.data + vb.data + vc.data) / 3.0
    facing = np.einsum("ij,ij->i", normal.data, centroid)
    toward = np.where(facing > 0.0, -1.0, 1.0)[:, None]
    face_color = (normal * toward + 1.0) * 0.5
    pair_color = face_color[face_of]

    numer = ad.index_add(weight.reshape(total, 1) * pair_color, pix, n_pix)
    denom = ad.index_add(weight, pix, n_pix)
    background = np.exp(-m)
    img = (numer + background[:, None]) / (denom + background).reshape(n_pix, 1)
    return ad.clamp(img, 0.0, 1.0).reshape(res, res, 3)


def render_all(mesh, rig: RenderRig, sigma: float = 1e-4, gamma: float = 1e-4):
    """Rasterize every rig view in order; returns (level, view, image) triples."""
    out = []
    for level, view, camera in rig.views():
        out.append((level, view, rasterize_soft(mesh, camera, sigma, gamma)))
    return out


def image_to_uint8(image):
    """Linear 8-bit quantization of a rendered image."""
    data = image.data if isinstance(image, Tensor) else np.asarray(image)
    return np.clip(np.rint(data * 255.0), 0, 255).astype(np.uint8)


def save_png(path, image):
    from PIL import Image as PILImage

    PILImage.fromarray(image_to_uint8(image), mode="RGB").save(path)
