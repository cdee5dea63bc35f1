"""Optimization loops: field pretraining and one-shot style adaptation.

Both loops are single-threaded and bit-reproducible per (seed, config):
every random draw comes from one master generator consumed in a fixed
order, and gradient accumulation order is fixed by the graph structure.
"""

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import mesh as ms
from .deform import DeformModel
from .losses import (
    ExemplarPair,
    LossWeights,
    embed_views,
    l_across_embedded,
    l_clip_embedded,
    l_in_embedded,
    l_style,
    l_total,
    l_vert,
    loss_ds,
    pseudo_style_code,
)
from .morphable import decode, sample_params

DS_LOSS_HEADER = ("iteration", "loss")
DT_LOSS_HEADER = (
    "iteration", "loss_vert", "loss_clip", "loss_in", "loss_across",
    "loss_style", "total",
)


@dataclass
class Schedule:
    """Learning-rate plan; linear decay interpolates start to end."""

    initial_rate: float
    final_rate: float = None
    total_iterations: int = 1000
    decay: str = "linear"

    def __post_init__(self):
        if self.final_rate is None:
            self.final_rate = self.initial_rate
        self.initial_rate = float(self.initial_rate)
        self.final_rate = float(self.final_rate)
        self.total_iterations = int(self.total_iterations)
        if not (self.initial_rate > 0.0 and self.final_rate > 0.0):
            raise ValueError("Schedule: rates must be positive")
        if self.final_rate > self.initial_rate:
            raise ValueError("Schedule: final rate must not exceed the initial")
        if self.total_iterations < 0:
            raise ValueError("Schedule: negative iteration count")
        if self.decay not in ("linear", "constant"):
            raise ValueError(f"Schedule: unknown decay {self.decay!r}")

    def rate(self, iteration: int) -> float:
        if self.decay == "constant" or self.total_iterations <= 1:
            return self.initial_rate
        t = iteration / (self.total_iterations - 1)
        return self.initial_rate + (self.final_rate - self.initial_rate) * t


class Adam:
    """Standard Adam over a named parameter dict, fixed update order."""

    def __init__(self, params: dict, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.t = 0

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def step(self, lr: float):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, t in self.params.items():
            g = t.grad
            if g is None:
                continue
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            mhat = self.m[name] / c1
            vhat = self.v[name] / c2
            t.data = t.data - lr * mhat / (np.sqrt(vhat) + self.eps)


class TrainingDiverged(RuntimeError):
    """Raised when a loss or gradient goes non-finite.

    The model still holds the last parameters that produced a finite loss,
    so callers can checkpoint it before surfacing the failure.
    """

    def __init__(self, stage, iteration, detail):
        super().__init__(
            f"{stage} diverged at iteration {iteration}: {detail}"
        )
        self.stage = stage
        self.iteration = iteration


def grads_finite(params: dict) -> bool:
    for t in params.values():
        if t.grad is not None and not np.all(np.isfinite(t.grad)):
            return False
    return True


def draw_samples(mesh, mode: str, rng, count: int = None):
    """One sampling draw on a mesh, always as correspondence-bearing samples.

    With count=None each mode draws at its native size (sims: ceil(4V),
    vertex: V, hybrid: V + ceil(1.1V)); the full hybrid draw consumes the
    generator exactly like hybrid_sample, so its positions match that op's
    output for the same seed. A count caps the draw so a batched training
    step can split its point budget across several identity draws: sims
    then samples exactly count surface points, vertex a count-sized subset
    of the vertices, hybrid an even vertex/surface split.
    """
    if mode == "sims":
        if count is None:
            return ms.sims_sample(mesh, ratio=4.0, seed=rng)
        fidx, bary, pos = ms.sample_surface(mesh, count, seed=rng)
        return [
            ms.SurfaceSample(int(f), bary[i].copy(), pos[i].copy())
            for i, f in enumerate(fidx)
        ]
    if mode == "vertex":
        samples = ms.vertex_samples(mesh)
        if count is None or count >= len(samples):
            return samples
        keep = rng.choice(len(samples), size=count, replace=False)
        return [samples[int(i)] for i in keep]
    if mode == "hybrid":
        if count is None:
            samples = ms.vertex_samples(mesh)
            extra = math.ceil(1.1 * mesh.n_vertices)
        else:
            samples = draw_samples(mesh, "vertex", rng, count=count // 2)
            extra = count - len(samples)
        fidx, bary, pos = ms.sample_surface(mesh, extra, seed=rng)
        samples.extend(
            ms.SurfaceSample(int(f), bary[i].copy(), pos[i].copy())
            for i, f in enumerate(fidx)
        )
        return samples
    raise ValueError(f"unknown sampling mode {mode!r}")


def train_ds(
    morphable,
    sampling: str = "sims",
    schedule: Schedule = None,
    seed: int = 0,
    pool_size: int = 2000,
    model: DeformModel = None,
    batch: int = 8,
):
    """Fit the source field: template surface -> decoded face, per-draw MSE.

    Each step averages the loss over ``batch`` identity draws, splitting a
    fixed point budget of ceil(4V) samples evenly among them, so the cost
    per step stays flat while the across-identity gradient noise drops.
    Batch 1 recovers one full-size draw per step. Returns (model, history)
    where history rows are (iteration, loss).
    """
    schedule = schedule or Schedule(1e-3, 3e-6, 5000, "linear")
    if sampling not in ("sims", "hybrid", "vertex"):
        raise ValueError(f"unknown sampling mode {sampling!r}")
    if batch < 1:
        raise ValueError(f"batch must be >= 1, got {batch}")
    master = np.random.Generator(np.random.PCG64(seed))
    if model is None:
        model = DeformModel(morphable.k_shape, morphable.k_expr, seed=seed)
    pool = [sample_params(morphable, master) for _ in range(pool_size)]
    opt = Adam(model.params)
    budget = math.ceil(4.0 * morphable.template.n_vertices)
    count = None if batch == 1 else math.ceil(budget / batch)
    history = []
    for it in range(schedule.total_iterations):
        total = None
        for _ in range(batch):
            phi = pool[int(master.integers(pool_size))]
            decoded = decode(morphable, phi)
            samples = draw_samples(decoded, sampling, master, count=count)
            term = loss_ds(model, morphable, phi, samples)
            total = term if total is None else total + term
        loss = total if batch == 1 else total * (1.0 / batch)
        value = float(loss.data)
        if not np.isfinite(value):
            raise TrainingDiverged("train_ds", it, f"loss {value}")
        opt.zero_grad()
        loss.backward()
        if not grads_finite(model.params):
            raise TrainingDiverged("train_ds", it, "non-finite gradient")
        opt.step(schedule.rate(it))
        history.append((it, value))
    return model, history


def train_dt(
    model_ds: DeformModel,
    morphable,
    exemplar: ExemplarPair,
    rig,
    embedder,
    weights: LossWeights = None,
    schedule: Schedule = None,
    seed: int = 0,
    style_mode: str = "pseudo",
    sigma: float = 1e-4,
    gamma: float = 1e-4,
):
    """Adapt a clone of the source field to one exemplar pair.

    Only the clone's hypernetwork parameters move; its mapping networks
    stay shared with the source field so both speak the same latent
    space, and the source model itself is never touched. Returns
    (model_dt, history); history rows carry the five loss components and
    the weighted total per iteration.
    """
    weights = weights or LossWeights()
    schedule = schedule or Schedule(3e-5, 1e-5, 2000, "linear")
    if style_mode not in ("pseudo", "direct"):
        raise ValueError(f"unknown style_mode {style_mode!r}")
    template = morphable.template
    if not np.array_equal(exemplar.source.faces, template.faces):
        raise ValueError("exemplar connectivity must match the model template")

    model_dt = model_ds.clone_for_target()
    hyper = {
        name: t for name, t in model_dt.params.items()
        if name.startswith("hyper.")
    }
    opt = Adam(hyper)
    master = np.random.Generator(np.random.PCG64(seed))
    faces = template.faces

    with ad.no_grad():
        emb_style = embed_views(exemplar.stylized, rig, embedder, sigma, gamma)
        emb_source = embed_views(exemplar.source, rig, embedder, sigma, gamma)
        code_ref = model_dt.map_params(exemplar.ref_params)

    history = []
    for it in range(schedule.total_iterations):
        phi_samp = sample_params(morphable, master)
        code_samp = model_dt.map_params(phi_samp)
        with ad.no_grad():
            src_verts = model_ds.deform_points(
                model_ds.map_params(phi_samp), template.vertices
            )
            emb_src_samp = embed_views(
                (src_verts, faces), rig, embedder, sigma, gamma
            )
        sty_samp = model_dt.deform_points(code_samp, template.vertices)
        sty_star = model_dt.deform_points(code_ref, template.vertices)
        pseudo = model_dt.deform_points(
            pseudo_style_code(code_samp, code_ref, direct=style_mode == "direct"),
            template.vertices,
        )
        emb_sty_samp = embed_views((sty_samp, faces), rig, embedder, sigma, gamma)
        emb_sty_star = embed_views((sty_star, faces), rig, embedder, sigma, gamma)
        components = {
            "vert": l_vert(exemplar.stylized, (sty_star, faces)),
            "clip": l_clip_embedded(emb_style, emb_sty_star),
            "in": l_in_embedded(emb_src_samp, emb_source, emb_sty_samp, emb_style),
            "across": l_across_embedded(
                emb_style, emb_source, emb_sty_samp, emb_src_samp
            ),
            "style": l_style(exemplar.stylized, (pseudo, faces)),
        }
        total = l_total(components, weights)
        value = float(total.data)
        if not np.isfinite(value):
            raise TrainingDiverged("train_dt", it, f"loss {value}")
        opt.zero_grad()
        total.backward()
        if not grads_finite(hyper):
            raise TrainingDiverged("train_dt", it, "non-finite gradient")
        opt.step(schedule.rate(it))
        history.append(
            (it,) + tuple(float(components[k].data) for k in
                          ("vert", "clip", "in", "across", "style"))
            + (value,)
        )
    return model_dt, history


def write_loss_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(x) if isinstance(x, float) else x for x in row])
