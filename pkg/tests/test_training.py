"""Training-loop tests: Adam oracle, schedules, determinism, divergence."""

import csv
import math

import numpy as np
import pytest

from facestyle import mesh as ms
from facestyle import morphable as mm
from facestyle.autodiff import Tensor
from facestyle.deform import DeformConfig, DeformModel
from facestyle.embed import FeatureEmbedder
from facestyle.losses import ExemplarPair, LossWeights
from facestyle.morphable import decode, sample_params
from facestyle.render import Camera, RenderRig
from facestyle.training import (
    DS_LOSS_HEADER,
    DT_LOSS_HEADER,
    Adam,
    Schedule,
    TrainingDiverged,
    draw_samples,
    train_ds,
    train_dt,
    write_loss_csv,
)

CFG = mm.MorphConfig(n_lat=6, n_lon=7, k_shape=2, k_expr=1, laplacian_cap=0.3)
MORPH = mm.build_toy_model(CFG, seed=3)
TEMPLATE = MORPH.template
TINY = DeformConfig(
    d_s=8, d_e=4, map_hidden=8, siren_hidden=8, siren_layers=2, hyper_hidden=16
)


def tiny_model(seed=1):
    return DeformModel(CFG.k_shape, CFG.k_expr, config=TINY, seed=seed)


def bumped_model(seed=9):
    """Tiny model nudged off the identity so codes actually move points."""
    model = tiny_model(seed)
    rng = np.random.Generator(np.random.PCG64(55))
    final = f"hyper.{len(model.config.field_dims()) - 2}"
    for name in (f"{final}.w1", f"{final}.b1"):
        t = model.params[name]
        t.data = t.data + 0.05 * rng.standard_normal(t.data.shape)
    return model


# ---------------------------------------------------------------------------
# schedule


def test_schedule_constant():
    s = Schedule(1e-3, 1e-3, 50, "constant")
    assert s.rate(0) == 1e-3
    assert s.rate(49) == 1e-3


def test_schedule_linear_endpoints_and_midpoint():
    s = Schedule(4e-4, 2e-4, 5, "linear")
    assert s.rate(0) == 4e-4
    assert s.rate(4) == 2e-4
    assert s.rate(2) == pytest.approx(3e-4, rel=1e-12)


def test_schedule_single_iteration_is_initial():
    assert Schedule(1e-2, 1e-3, 1, "linear").rate(0) == 1e-2


def test_schedule_default_final_rate_tracks_initial():
    s = Schedule(5e-4, total_iterations=10)
    assert s.final_rate == 5e-4
    assert s.rate(9) == 5e-4


def test_schedule_validation():
    with pytest.raises(ValueError, match="positive"):
        Schedule(0.0, 0.0, 10)
    with pytest.raises(ValueError, match="exceed"):
        Schedule(1e-4, 1e-3, 10)
    with pytest.raises(ValueError, match="decay"):
        Schedule(1e-3, 1e-4, 10, "cosine")
    with pytest.raises(ValueError, match="negative"):
        Schedule(1e-3, 1e-4, -1)


# ---------------------------------------------------------------------------
# Adam


def _adam_reference(x0, grads, rates, beta1=0.9, beta2=0.999, eps=1e-8):
    x = x0.copy()
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    for t, (g, lr) in enumerate(zip(grads, rates), start=1):
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        mhat = m / (1.0 - beta1 ** t)
        vhat = v / (1.0 - beta2 ** t)
        x = x - lr * mhat / (np.sqrt(vhat) + eps)
    return x


def test_adam_matches_reference_over_steps():
    rng = np.random.Generator(np.random.PCG64(7))
    x0 = rng.standard_normal((4, 3))
    grads = [rng.standard_normal((4, 3)) for _ in range(5)]
    rates = [1e-2, 1e-2, 5e-3, 5e-3, 1e-3]
    p = Tensor(x0.copy(), requires_grad=True)
    opt = Adam({"x": p})
    for g, lr in zip(grads, rates):
        p.grad = g.copy()
        opt.step(lr)
    assert np.array_equal(p.data, _adam_reference(x0, grads, rates))


def test_adam_first_step_is_signed_rate():
    # Bias correction makes step one move by ~lr*sign(g) for |g| >> eps.
    g = np.array([2.0, -0.5, 1e-3])
    p = Tensor(np.zeros(3), requires_grad=True)
    opt = Adam({"p": p})
    p.grad = g.copy()
    opt.step(1e-2)
    assert np.max(np.abs(p.data + 1e-2 * np.sign(g))) < 1e-2 * 1e-5


def test_adam_skips_missing_grads():
    a = Tensor(np.ones(2), requires_grad=True)
    b = Tensor(np.ones(2), requires_grad=True)
    opt = Adam({"a": a, "b": b})
    a.grad = np.ones(2)
    opt.step(1e-2)
    assert np.array_equal(b.data, np.ones(2))
    assert not np.array_equal(a.data, np.ones(2))


def test_adam_zero_grad_clears():
    a = Tensor(np.ones(2), requires_grad=True)
    opt = Adam({"a": a})
    a.grad = np.ones(2)
    opt.zero_grad()
    assert a.grad is None


# ---------------------------------------------------------------------------
# sampling draws


def test_draw_samples_hybrid_matches_public_op():
    rng = np.random.Generator(np.random.PCG64(17))
    samples = draw_samples(TEMPLATE, "hybrid", rng)
    stacked = np.stack([s.position for s in samples])
    assert np.array_equal(stacked, ms.hybrid_sample(TEMPLATE, seed=17))


def test_draw_samples_counts():
    rng = np.random.Generator(np.random.PCG64(0))
    v = TEMPLATE.n_vertices
    assert len(draw_samples(TEMPLATE, "vertex", rng)) == v
    assert len(draw_samples(TEMPLATE, "sims", rng)) == math.ceil(4.0 * v)
    assert len(draw_samples(TEMPLATE, "hybrid", rng)) == v + math.ceil(1.1 * v)


def test_draw_samples_unknown_mode():
    with pytest.raises(ValueError, match="sampling mode"):
        draw_samples(TEMPLATE, "poisson", np.random.default_rng(0))


# ---------------------------------------------------------------------------
# source-field training


def test_train_ds_reduces_loss():
    model, history = train_ds(
        MORPH, sampling="sims",
        schedule=Schedule(1e-3, 1e-3, 40, "constant"),
        seed=3, pool_size=8, model=tiny_model(),
    )
    assert len(history) == 40
    values = [loss for _, loss in history]
    assert all(np.isfinite(values))
    assert np.mean(values[-10:]) < np.mean(values[:10])


def test_train_ds_deterministic():
    kwargs = dict(
        sampling="hybrid", schedule=Schedule(1e-3, 1e-3, 6, "constant"),
        seed=11, pool_size=4,
    )
    model_a, hist_a = train_ds(MORPH, model=tiny_model(5), **kwargs)
    model_b, hist_b = train_ds(MORPH, model=tiny_model(5), **kwargs)
    assert hist_a == hist_b
    for name in model_a.params:
        assert np.array_equal(model_a.params[name].data, model_b.params[name].data)


def test_train_ds_vertex_mode_runs():
    _, history = train_ds(
        MORPH, sampling="vertex",
        schedule=Schedule(1e-3, 1e-3, 4, "constant"),
        seed=2, pool_size=3, model=tiny_model(),
    )
    assert len(history) == 4 and all(np.isfinite(v) for _, v in history)


def test_train_ds_rejects_unknown_sampling():
    with pytest.raises(ValueError, match="sampling mode"):
        train_ds(MORPH, sampling="poisson", model=tiny_model(),
                 schedule=Schedule(1e-3, 1e-3, 1, "constant"))


def test_train_ds_divergence_keeps_last_good_params():
    model = tiny_model()
    # poison the displacement head: its output feeds the final linear field
    # layer directly, so the first forward pass overflows to inf
    name = f"hyper.{len(model.config.field_dims()) - 2}.b1"
    poisoned = np.full_like(model.params[name].data, 1e200)
    model.params[name].data = poisoned
    with np.errstate(over="ignore"), pytest.raises(TrainingDiverged) as err:
        train_ds(MORPH, sampling="vertex", model=model,
                 schedule=Schedule(1e-3, 1e-3, 3, "constant"), seed=0)
    assert err.value.iteration == 0
    # no optimizer step ran, so the model still holds its pre-failure state
    assert np.array_equal(model.params[name].data, poisoned)


# ---------------------------------------------------------------------------
# one-shot adaptation


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


def _exemplar():
    ref = sample_params(MORPH, seed=11)
    source = decode(MORPH, ref)
    stylized = source.with_vertices(source.vertices * 1.06)
    return ExemplarPair(source, stylized, ref)


def test_train_dt_leaves_source_model_untouched():
    model_ds = tiny_model(9)
    before = {n: t.data.copy() for n, t in model_ds.params.items()}
    model_dt, history = train_dt(
        model_ds, MORPH, _exemplar(), RIG, EMB,
        schedule=Schedule(1e-4, 1e-4, 3, "constant"), seed=5,
        sigma=2e-4, gamma=1e-3,
    )
    assert model_dt is not model_ds
    for name, data in before.items():
        assert np.array_equal(model_ds.params[name].data, data)
    # mapping networks stay shared with the source field; only the
    # hypernetwork of the clone moves
    moved = []
    for name, t in model_dt.params.items():
        same = np.array_equal(t.data, before[name])
        if name.startswith(("map_shape.", "map_exp.")):
            assert same, name
        else:
            moved.append(not same)
    assert any(moved)
    assert len(history) == 3
    assert all(len(row) == len(DT_LOSS_HEADER) for row in history)


def test_train_dt_totals_recombine_from_components():
    _, history = train_dt(
        tiny_model(9), MORPH, _exemplar(), RIG, EMB,
        schedule=Schedule(1e-4, 1e-4, 2, "constant"), seed=5,
        sigma=2e-4, gamma=1e-3,
    )
    w = LossWeights()
    for _, vert, clip, within, across, style, total in history:
        recomposed = (
            w.lambda_vert * vert + w.lambda_clip * clip + w.lambda_in * within
            + w.lambda_across * across + w.lambda_style * style
        )
        assert total == pytest.approx(recomposed, rel=1e-12)


def test_train_dt_deterministic():
    runs = []
    for _ in range(2):
        model_dt, history = train_dt(
            tiny_model(9), MORPH, _exemplar(), RIG, EMB,
            schedule=Schedule(1e-4, 1e-4, 2, "constant"), seed=7,
            sigma=2e-4, gamma=1e-3,
        )
        runs.append((model_dt, history))
    assert runs[0][1] == runs[1][1]
    for name in runs[0][0].params:
        assert np.array_equal(
            runs[0][0].params[name].data, runs[1][0].params[name].data
        )


def test_train_dt_direct_mode_changes_style_term():
    losses = {}
    for mode in ("pseudo", "direct"):
        _, history = train_dt(
            bumped_model(), MORPH, _exemplar(), RIG, EMB,
            schedule=Schedule(1e-4, 1e-4, 1, "constant"), seed=7,
            style_mode=mode, sigma=2e-4, gamma=1e-3,
        )
        losses[mode] = history[0][5]
    assert losses["pseudo"] != losses["direct"]


def test_train_dt_rejects_unknown_style_mode():
    with pytest.raises(ValueError, match="style_mode"):
        train_dt(tiny_model(), MORPH, _exemplar(), RIG, EMB,
                 schedule=Schedule(1e-4, 1e-4, 1), style_mode="mixed")


def test_train_dt_rejects_foreign_connectivity():
    ref = sample_params(MORPH, seed=11)
    refined = ms.loop_subdivide(decode(MORPH, ref))
    pair = ExemplarPair(refined, refined, ref)
    with pytest.raises(ValueError, match="connectivity"):
        train_dt(tiny_model(), MORPH, pair, RIG, EMB,
                 schedule=Schedule(1e-4, 1e-4, 1))


# ---------------------------------------------------------------------------
# CSV emission


def test_write_loss_csv_round_trips(tmp_path):
    rows = [(0, 0.125), (1, 1.0 / 3.0)]
    path = tmp_path / "loss.csv"
    write_loss_csv(path, DS_LOSS_HEADER, rows)
    with open(path, newline="") as f:
        got = list(csv.reader(f))
    assert got[0] == list(DS_LOSS_HEADER)
    assert [(int(i), float(v)) for i, v in got[1:]] == rows


def test_write_loss_csv_dt_header_shape():
    assert DT_LOSS_HEADER == (
        "iteration", "loss_vert", "loss_clip", "loss_in", "loss_across",
        "loss_style", "total",
    )
