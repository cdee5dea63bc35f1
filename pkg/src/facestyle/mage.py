"""Topology-agnostic mesh encoder: any face, any tessellation, one code.

Two frozen point-set encoders read (position, unit normal) samples off the
surface; small trainable translator MLPs turn their features into the
latent code the deformation field understands. Pooling is max plus a
value-sorted mean, so the encoder output is bitwise invariant to the
ordering of its input points, not just invariant up to rounding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import mesh as ms
from .autodiff import Tensor
from .deform import LatentCode
from .losses import l_enc
from .mesh import TriMesh
from .morphable import decode, sample_params
from .training import Adam, Schedule, TrainingDiverged, grads_finite


@dataclass
class MageConfig:
    d_s: int = 64
    d_e: int = 32
    feat_hidden: int = 64
    feat_dim: int = 128
    mapper_hidden: int = 256
    n_points: int = 512
    pretrain_iterations: int = 1500
    pretrain_rate: float = 1e-3
    heldout_count: int = 32


# ---------------------------------------------------------------------------
# point features


def _sorted_mean_forward(x):
    return np.sort(x, axis=0).mean(axis=0), x.shape


def _sorted_mean_backward(shape, g):
    return (np.broadcast_to(g / shape[0], shape).copy(),)


# Mean over points with a canonical accumulation order: values are sorted
# per feature before summing, so any permutation of the rows produces the
# same float sequence and therefore the same bits. The gradient of a mean
# is uniform no matter the order, so the backward pass ignores the sort.
sorted_mean = ad.custom_op(
    "sorted_mean", _sorted_mean_forward, _sorted_mean_backward
)


def mesh_to_pointset(m: TriMesh, n_points: int, seed=0):
    """(N, 6) position + unit-normal rows, the encoders' input currency.

    Meshes with faces get area-weighted surface samples with barycentric
    interpolation of area-weighted vertex normals. A mesh with no faces is
    treated as a point cloud: every vertex is kept (n_points is ignored)
    and normals come from the smallest principal axis of each point's
    k-nearest neighborhood, oriented away from the cloud centroid.
    """
    if n_points <= 0:
        raise ValueError("mesh_to_pointset: n_points must be positive")
    if m.n_faces > 0:
        fidx, bary, pos = ms.sample_surface(m, n_points, seed)
        vn = ms.vertex_normals(m)
        n = (bary[:, :, None] * vn[m.faces[fidx]]).sum(axis=1)
        n = n / np.sqrt((n * n).sum(axis=-1, keepdims=True) + ad.NORM_EPS_SQ)
        return np.concatenate([pos, n], axis=1)

    pts = m.vertices
    k = 8
    if len(pts) < k + 1:
        raise ValueError(
            f"mesh_to_pointset: point cloud needs at least {k + 1} points"
        )
    d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=-1)
    order = np.argsort(d2, axis=1, kind="stable")
    center = pts.mean(axis=0)
    normals = np.empty_like(pts)
    for i in range(len(pts)):
        nbr = pts[order[i, : k + 1]]
        x = nbr - nbr.mean(axis=0)
        _, vecs = np.linalg.eigh(x.T @ x)
        n = vecs[:, 0]
        if float(n @ (pts[i] - center)) < 0.0:
            n = -n
        normals[i] = n
    return np.concatenate([pts, normals], axis=1)


# ---------------------------------------------------------------------------
# encoders


def _uniform(rng, bound, shape):
    return rng.uniform(-bound, bound, size=shape)


def _init_linear(params, rng, name, fan_in, fan_out):
    params[f"{name}.w"] = Tensor(
        _uniform(rng, math.sqrt(6.0 / fan_in), (fan_in, fan_out)),
        requires_grad=True,
    )
    params[f"{name}.b"] = Tensor(np.zeros(fan_out), requires_grad=True)


def _linear(params, name, x):
    return x @ params[f"{name}.w"] + params[f"{name}.b"]


class PointSetEncoder:
    """Shared per-point MLP, order-free pooling, feature head.

    Layer names: ``point0``/``point1`` (per-point), ``head0``/``head1``.
    """

    def __init__(self, config: MageConfig = None, seed=0):
        c = config or MageConfig()
        self.config = c
        rng = np.random.Generator(np.random.PCG64(seed))
        self.params = {}
        _init_linear(self.params, rng, "point0", 6, c.feat_hidden)
        _init_linear(self.params, rng, "point1", c.feat_hidden, c.feat_dim)
        _init_linear(self.params, rng, "head0", 2 * c.feat_dim, c.feat_dim)
        _init_linear(self.params, rng, "head1", c.feat_dim, c.feat_dim)

    def forward(self, points) -> Tensor:
        """Feature vector (feat_dim,) of one (N, 6) point set."""
        x = points if isinstance(points, Tensor) else Tensor(
            np.asarray(points, dtype=np.float64)
        )
        if x.ndim != 2 or x.shape[1] != 6:
            raise ad.ShapeError(
                f"PointSetEncoder: expected (N, 6) points, got {x.shape}"
            )
        h = ad.tanh(_linear(self.params, "point0", x))
        h = ad.tanh(_linear(self.params, "point1", h))
        pooled = ad.concat([h.max(axis=0), sorted_mean(h)])
        y = ad.tanh(_linear(self.params, "head0", pooled))
        return _linear(self.params, "head1", y)

    def freeze(self):
        for t in self.params.values():
            t.requires_grad = False
            t.grad = None

    @property
    def frozen(self):
        return not any(t.requires_grad for t in self.params.values())

    def state_arrays(self):
        return {name: t.data for name, t in self.params.items()}

    def load_state_arrays(self, arrays):
        for name, t in self.params.items():
            if name not in arrays:
                raise KeyError(f"missing parameter {name!r}")
            if arrays[name].shape != t.data.shape:
                raise ValueError(f"shape mismatch for {name!r}")
            t.data = np.array(arrays[name], dtype=np.float64)
            t.grad = None


class MageModel:
    """Frozen channel encoders plus the trainable latent translator.

    Trainable parts: ``id2id`` and ``exp2exp`` (feature-space MLPs, one
    tanh hidden layer each) and ``mapper`` (concatenated features to the
    stacked latent code). The encoders never move after pretraining.
    """

    def __init__(self, encoder_id: PointSetEncoder,
                 encoder_exp: PointSetEncoder,
                 config: MageConfig = None, seed=0):
        c = config or encoder_id.config
        for enc in (encoder_id, encoder_exp):
            if enc.config.feat_dim != c.feat_dim:
                raise ValueError("MageModel: encoder feature width disagrees")
        self.config = c
        self.encoder_id = encoder_id
        self.encoder_exp = encoder_exp
        rng = np.random.Generator(np.random.PCG64(seed))
        self.params = {}
        d = c.feat_dim
        _init_linear(self.params, rng, "id2id.0", d, d)
        _init_linear(self.params, rng, "id2id.1", d, d)
        _init_linear(self.params, rng, "exp2exp.0", d, d)
        _init_linear(self.params, rng, "exp2exp.1", d, d)
        _init_linear(self.params, rng, "mapper.0", 2 * d, c.mapper_hidden)
        _init_linear(self.params, rng, "mapper.1", c.mapper_hidden, c.d_s + c.d_e)

    def _mlp(self, prefix, x):
        h = ad.tanh(_linear(self.params, f"{prefix}.0", x))
        return _linear(self.params, f"{prefix}.1", h)

    def forward_points(self, points) -> LatentCode:
        f_id = self.encoder_id.forward(points)
        f_exp = self.encoder_exp.forward(points)
        z = self._mlp(
            "mapper", ad.concat([self._mlp("id2id", f_id),
                                 self._mlp("exp2exp", f_exp)])
        )
        return LatentCode(z[: self.config.d_s], z[self.config.d_s:])

    def trainable(self):
        return dict(self.params)

    def state_arrays(self):
        out = {name: t.data for name, t in self.params.items()}
        for prefix, enc in (("enc_id", self.encoder_id),
                            ("enc_exp", self.encoder_exp)):
            for name, data in enc.state_arrays().items():
                out[f"{prefix}.{name}"] = data
        return out

    def load_state_arrays(self, arrays):
        enc_id = {}
        enc_exp = {}
        own = {}
        for name, data in arrays.items():
            if name.startswith("enc_id."):
                enc_id[name[len("enc_id."):]] = data
            elif name.startswith("enc_exp."):
                enc_exp[name[len("enc_exp."):]] = data
            else:
                own[name] = data
        self.encoder_id.load_state_arrays(enc_id)
        self.encoder_exp.load_state_arrays(enc_exp)
        for name, t in self.params.items():
            if name not in own:
                raise KeyError(f"missing parameter {name!r}")
            if own[name].shape != t.data.shape:
                raise ValueError(f"shape mismatch for {name!r}")
            t.data = np.array(own[name], dtype=np.float64)
            t.grad = None


def encode(mage: MageModel, m: TriMesh, n_points: int = None, seed=0) -> LatentCode:
    """Latent code of an arbitrary mesh or point cloud."""
    pts = mesh_to_pointset(m, n_points or mage.config.n_points, seed)
    return mage.forward_points(pts)


# ---------------------------------------------------------------------------
# training


def remesh_variant(mesh: TriMesh, rng):
    """Uniform draw over the augmentation set: as-is, refined, decimated."""
    choice = int(rng.integers(3))
    if choice == 1:
        return ms.loop_subdivide(mesh)
    if choice == 2:
        return ms.simplify(mesh, 0.25).mesh
    return mesh


@dataclass
class PretrainResult:
    encoder_id: PointSetEncoder
    encoder_exp: PointSetEncoder
    history: list
    heldout_beta_mse: float
    heldout_psi_mse: float
    prior_variance: float  # mean per-coefficient variance of the sampling prior

    @property
    def passed(self):
        """Both channels beat a tenth of the prior's per-coefficient variance."""
        bound = 0.1 * self.prior_variance
        return self.heldout_beta_mse < bound and self.heldout_psi_mse < bound


def pretrain_pointset_encoders(morphable, config: MageConfig = None, seed=0):
    """Fit the two channel encoders, then freeze them.

    Each channel carries a throwaway linear probe: the identity channel
    regresses the shape coefficients, the expression channel the
    expression coefficients, both from point sets of randomly remeshed
    decodes. The probes are dropped afterward; held-out regression error
    per channel is measured first and reported on the result.
    """
    c = config or MageConfig()
    master = np.random.Generator(np.random.PCG64(seed))
    enc_id = PointSetEncoder(c, seed=int(master.integers(2 ** 63)))
    enc_exp = PointSetEncoder(c, seed=int(master.integers(2 ** 63)))
    probes = {}
    probe_rng = np.random.Generator(np.random.PCG64(int(master.integers(2 ** 63))))
    _init_linear(probes, probe_rng, "probe_id", c.feat_dim, morphable.k_shape)
    _init_linear(probes, probe_rng, "probe_exp", c.feat_dim, morphable.k_expr)

    trainable = {}
    for prefix, enc in (("id", enc_id), ("exp", enc_exp)):
        for name, t in enc.params.items():
            trainable[f"{prefix}.{name}"] = t
    trainable.update(probes)
    opt = Adam(trainable)

    def channel_losses(pts, params):
        pred_beta = _linear(probes, "probe_id", enc_id.forward(pts))
        pred_psi = _linear(probes, "probe_exp", enc_exp.forward(pts))
        err_b = pred_beta - Tensor(params.beta)
        err_p = pred_psi - Tensor(params.psi)
        return (err_b * err_b).mean(), (err_p * err_p).mean()

    history = []
    for it in range(c.pretrain_iterations):
        params = sample_params(morphable, master)
        variant = remesh_variant(decode(morphable, params), master)
        pts = mesh_to_pointset(variant, c.n_points, seed=master)
        loss_b, loss_p = channel_losses(pts, params)
        loss = loss_b + loss_p
        value = float(loss.data)
        if not np.isfinite(value):
            raise TrainingDiverged("pretrain_pointset_encoders", it, f"loss {value}")
        opt.zero_grad()
        loss.backward()
        if not grads_finite(trainable):
            raise TrainingDiverged(
                "pretrain_pointset_encoders", it, "non-finite gradient"
            )
        opt.step(c.pretrain_rate)
        history.append((it, value))

    beta_mse = []
    psi_mse = []
    with ad.no_grad():
        for _ in range(c.heldout_count):
            params = sample_params(morphable, master)
            variant = remesh_variant(decode(morphable, params), master)
            pts = mesh_to_pointset(variant, c.n_points, seed=master)
            loss_b, loss_p = channel_losses(pts, params)
            beta_mse.append(float(loss_b.data))
            psi_mse.append(float(loss_p.data))
    enc_id.freeze()
    enc_exp.freeze()
    spread = morphable.sampling_high - morphable.sampling_low
    return PretrainResult(
        enc_id, enc_exp, history,
        float(np.mean(beta_mse)), float(np.mean(psi_mse)),
        float(np.mean(spread * spread / 12.0)),
    )


def train_mage(mage: MageModel, model_ds, morphable,
               schedule: Schedule = None, seed=0):
    """Self-supervised latent regression against the source field's codes.

    Draws coefficients, maps them through the (frozen) mapping networks
    for the target code, deforms the template with the source field,
    randomly remeshes that mesh, and trains the translator MLPs so that
    encoding it reproduces the code. Returns (mage, history) with history
    rows (iteration, loss).
    """
    schedule = schedule or Schedule(3e-4, 5e-5, 3000, "linear")
    if not (mage.encoder_id.frozen and mage.encoder_exp.frozen):
        raise ValueError("train_mage: channel encoders must be frozen first")
    d = model_ds.config
    if (d.d_s, d.d_e) != (mage.config.d_s, mage.config.d_e):
        raise ValueError(
            "train_mage: latent split disagrees with the deformation model"
        )
    master = np.random.Generator(np.random.PCG64(seed))
    opt = Adam(mage.trainable())
    template = morphable.template
    history = []
    for it in range(schedule.total_iterations):
        params = sample_params(morphable, master)
        with ad.no_grad():
            code = model_ds.map_params(params)
        deformed = model_ds.deform_mesh(code, template)
        variant = remesh_variant(deformed, master)
        pts = mesh_to_pointset(variant, mage.config.n_points, seed=master)
        loss = l_enc(code, mage.forward_points(pts))
        value = float(loss.data)
        if not np.isfinite(value):
            raise TrainingDiverged("train_mage", it, f"loss {value}")
        opt.zero_grad()
        loss.backward()
        if not grads_finite(mage.params):
            raise TrainingDiverged("train_mage", it, "non-finite gradient")
        opt.step(schedule.rate(it))
        history.append((it, value))
    return mage, history
