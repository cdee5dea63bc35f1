"""Command line over the stylization pipeline.

Every stage is one subcommand reading a JSON config (see
``--print-config-schema``) plus a handful of path flags, and writing its
artifacts into ``--out``. Exit codes: 0 success, 1 usage error, 2
runtime failure.
"""

import argparse
import json
import os
import sys

import numpy as np

from .config import (
    PRESETS,
    build_deform_config,
    build_mage_config,
    build_morphable,
    build_render_config,
    build_schedule,
    build_weights,
    default_config,
    fingerprint,
    load_config,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .deform import DeformModel
from .embed import FeatureEmbedder
from .losses import ExemplarPair
from .mage import MageModel, PointSetEncoder, pretrain_pointset_encoders, train_mage
from .mesh import (
    TriMesh,
    landmarks_read,
    landmarks_write,
    loop_subdivide,
    obj_read,
    obj_write,
    simplify,
)
from .morphable import MorphParams
from .pipeline import (
    ABLATION_HEADER,
    BlendSpec,
    EXEMPLAR_PRESETS,
    eval_metrics,
    gen_exemplar,
    interpolate,
    preset_ops,
    sampling_ablation,
    stylize,
)
from .render import build_rig, render_all, save_png
from .training import (
    DS_LOSS_HEADER,
    DT_LOSS_HEADER,
    TrainingDiverged,
    train_ds,
    train_dt,
    write_loss_csv,
)


class _Parser(argparse.ArgumentParser):
    """Argument parser whose usage failures exit with code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


# ---------------------------------------------------------------------------
# shared plumbing


def _load_cfg(args):
    """Merged config and its fingerprint; --seed overrides the file."""
    cfg = load_config(args.config, preset=args.scale)
    if args.seed is not None:
        cfg["seed"] = int(args.seed)
    return cfg, fingerprint(cfg)


def _out_dir(args):
    path = args.out
    os.makedirs(path, exist_ok=True)
    return path


def _read_mesh(path, landmarks_path=None) -> TriMesh:
    with open(path, "rb") as f:
        mesh = obj_read(f.read())
    if landmarks_path is not None:
        with open(landmarks_path, "rb") as f:
            sets = landmarks_read(f.read())
        mesh = TriMesh(mesh.vertices, mesh.faces, landmark_sets=sets)
    return mesh


def _write_mesh(out, stem, mesh):
    obj_path = os.path.join(out, stem + ".obj")
    with open(obj_path, "wb") as f:
        f.write(obj_write(mesh))
    if mesh.landmark_sets:
        with open(os.path.join(out, stem + ".landmarks.json"), "wb") as f:
            f.write(landmarks_write(mesh.landmark_sets))
    return obj_path


def _write_json(out, name, payload):
    path = os.path.join(out, name)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def _load_model_group(ckpt, prefix, builder):
    """Restore one named model from a checkpoint, with a legible error."""
    if prefix not in ckpt.prefixes():
        raise ValueError(
            f"checkpoint holds {sorted(ckpt.prefixes())}, not a {prefix!r} model"
        )
    model = builder()
    model.load_state_arrays(ckpt.group(prefix))
    return model


def _load_deform(args, path, prefix, cfg, fp, morphable):
    ckpt = load_checkpoint(path, expected_fingerprint=fp, force=args.force)
    return _load_model_group(
        ckpt,
        prefix,
        lambda: DeformModel(
            morphable.k_shape,
            morphable.k_expr,
            config=build_deform_config(cfg),
            seed=cfg["seed"],
        ),
    )


def _load_mage(args, path, cfg, fp):
    ckpt = load_checkpoint(path, expected_fingerprint=fp, force=args.force)
    mcfg = build_mage_config(cfg)

    def build():
        enc_id = PointSetEncoder(mcfg, seed=cfg["seed"])
        enc_exp = PointSetEncoder(mcfg, seed=cfg["seed"] + 1)
        return MageModel(enc_id, enc_exp, config=mcfg, seed=cfg["seed"])

    mage = _load_model_group(ckpt, "mage", build)
    mage.encoder_id.freeze()
    mage.encoder_exp.freeze()
    return mage


def _read_exemplar(path, morphable) -> ExemplarPair:
    """Rebuild an ExemplarPair from a gen-exemplar output directory."""
    source = _read_mesh(
        os.path.join(path, "source.obj"),
        os.path.join(path, "source.landmarks.json"),
    )
    stylized = _read_mesh(os.path.join(path, "stylized.obj"))
    with open(os.path.join(path, "exemplar.json"), "r", encoding="utf-8") as f:
        meta = json.load(f)
    params = MorphParams(
        beta=np.asarray(meta["beta"], dtype=np.float64),
        psi=np.asarray(meta["psi"], dtype=np.float64),
    )
    k_s, k_e = morphable.k_shape, morphable.k_expr
    if len(params.beta) != k_s or len(params.psi) != k_e:
        raise ValueError(
            f"exemplar coefficients are {len(params.beta)}+{len(params.psi)} "
            f"wide, model expects {k_s}+{k_e}"
        )
    return ExemplarPair(source, stylized, params)


def _resolve_template(name, morphable) -> TriMesh:
    """Named topology variant of the model template, or an OBJ path."""
    template = morphable.template
    if name == "original":
        return template
    if name == "loop1":
        return loop_subdivide(template)
    if name == "loop2":
        return loop_subdivide(loop_subdivide(template))
    if name == "simplified":
        return simplify(template, 0.25).mesh
    if os.path.exists(name):
        return _read_mesh(name)
    raise ValueError(
        f"template {name!r} is neither a variant name "
        f"(original/loop1/loop2/simplified) nor an existing OBJ path"
    )


# ---------------------------------------------------------------------------
# subcommands


def _cmd_gen_model(args):
    cfg, fp = _load_cfg(args)
    out = _out_dir(args)
    morphable = build_morphable(cfg)
    _write_mesh(out, "template", morphable.template)
    _write_json(out, "model.json", {
        "fingerprint": fp,
        "seed": cfg["seed"],
        "vertices": int(len(morphable.template.vertices)),
        "faces": int(len(morphable.template.faces)),
        "k_shape": int(morphable.k_shape),
        "k_expr": int(morphable.k_expr),
    })
    print(
        f"wrote template ({len(morphable.template.vertices)} vertices, "
        f"{len(morphable.template.faces)} faces) to {out}"
    )
    return 0


def _cmd_gen_exemplar(args):
    cfg, _ = _load_cfg(args)
    out = _out_dir(args)
    morphable = build_morphable(cfg)
    ops = preset_ops(args.style, morphable.template)
    pair = gen_exemplar(morphable, ops=ops, seed=cfg["seed"])
    _write_mesh(out, "source", pair.source)
    _write_mesh(out, "stylized", pair.stylized)
    _write_json(out, "exemplar.json", {
        "style": args.style,
        "seed": cfg["seed"],
        "beta": pair.ref_params.beta.tolist(),
        "psi": pair.ref_params.psi.tolist(),
    })
    print(f"wrote {args.style} exemplar pair to {out}")
    return 0


def _cmd_train_ds(args):
    cfg, fp = _load_cfg(args)
    out = _out_dir(args)
    morphable = build_morphable(cfg)
    model = DeformModel(
        morphable.k_shape,
        morphable.k_expr,
        config=build_deform_config(cfg),
        seed=cfg["seed"],
    )
    section = cfg["train_ds"]
    ckpt_path = os.path.join(out, "ds.ckpt.json")
    try:
        model, history = train_ds(
            morphable,
            sampling=section["sampling"],
            schedule=build_schedule(cfg, "train_ds"),
            seed=cfg["seed"],
            pool_size=section["pool_size"],
            model=model,
            batch=section["batch"],
        )
    except TrainingDiverged as exc:
        save_checkpoint({"ds": model}, ckpt_path, fingerprint=fp, seed=cfg["seed"])
        print(
            f"error: {exc}; {ckpt_path} holds the last finite parameters",
            file=sys.stderr,
        )
        return 2
    save_checkpoint({"ds": model}, ckpt_path, fingerprint=fp, seed=cfg["seed"])
    write_loss_csv(os.path.join(out, "loss_ds.csv"), DS_LOSS_HEADER, history)
    final = history[-1][1] if history else float("nan")
    print(f"wrote {ckpt_path} (final loss {final:.3e})")
    return 0


def _cmd_train_dt(args):
    cfg, fp = _load_cfg(args)
    out = _out_dir(args)
    morphable = build_morphable(cfg)
    model_ds = _load_deform(args, args.ds, "ds", cfg, fp, morphable)
    exemplar = _read_exemplar(args.exemplar, morphable)
    rc = build_render_config(cfg)
    rig = build_rig(morphable.template, rc)
    embedder = FeatureEmbedder(resolution=rc.resolution)
    model_dt, history = train_dt(
        model_ds,
        morphable,
        exemplar,
        rig,
        embedder,
        weights=build_weights(cfg),
        schedule=build_schedule(cfg, "train_dt"),
        seed=cfg["seed"],
        style_mode=cfg["train_dt"]["style_mode"],
        sigma=rc.sigma,
        gamma=rc.gamma,
    )
    ckpt_path = os.path.join(out, "dt.ckpt.json")
    save_checkpoint({"dt": model_dt}, ckpt_path, fingerprint=fp, seed=cfg["seed"])
    write_loss_csv(os.path.join(out, "loss_dt.csv"), DT_LOSS_HEADER, history)
    final = history[-1][-1] if history else float("nan")
    print(f"wrote {ckpt_path} (final total loss {final:.3e})")
    return 0


def _cmd_train_mage(args):
    cfg, fp = _load_cfg(args)
    out = _out_dir(args)
    morphable = build_morphable(cfg)
    model_ds = _load_deform(args, args.ds, "ds", cfg, fp, morphable)
    mcfg = build_mage_config(cfg)
    pre = pretrain_pointset_encoders(morphable, mcfg, seed=cfg["seed"])
    _write_json(out, "pretrain.json", {
        "heldout_beta_mse": np.asarray(pre.heldout_beta_mse).tolist(),
        "heldout_psi_mse": np.asarray(pre.heldout_psi_mse).tolist(),
        "prior_variance": float(pre.prior_variance),
        "passed": bool(pre.passed),
    })
    if not pre.passed:
        print(
            "warning: encoder pretraining missed its held-out target; "
            "latent codes may be unreliable",
            file=sys.stderr,
        )
    mage = MageModel(pre.encoder_id, pre.encoder_exp, config=mcfg, seed=cfg["seed"])
    mage, history = train_mage(
        mage,
        model_ds,
        morphable,
        schedule=build_schedule(cfg, "train_mage"),
        seed=cfg["seed"],
    )
    ckpt_path = os.path.join(out, "mage.ckpt.json")
    save_checkpoint({"mage": mage}, ckpt_path, fingerprint=fp, seed=cfg["seed"])
    write_loss_csv(os.path.join(out, "loss_mage.csv"), DS_LOSS_HEADER, history)
    final = history[-1][1] if history else float("nan")
    print(f"wrote {ckpt_path} (final loss {final:.3e})")
    return 0


def _cmd_stylize(args):
    cfg, fp = _load_cfg(args)
    out = _out_dir(args)
    for path in (args.dt, args.mage):
        if not os.path.exists(path):
            raise FileNotFoundError(f"checkpoint not found: {path}")
    morphable = build_morphable(cfg)
    model_dt = _load_deform(args, args.dt, "dt", cfg, fp, morphable)
    mage = _load_mage(args, args.mage, cfg, fp)
    target = _read_mesh(args.target)
    desired = _resolve_template(args.template, morphable)
    result = stylize(target, mage, model_dt, desired, seed=cfg["seed"])
    path = _write_mesh(out, "stylized", result)
    print(f"wrote {path} ({len(result.vertices)} vertices)")
    return 0


def _cmd_interpolate(args):
    _out = _out_dir(args)
    blended = interpolate(BlendSpec(args.alpha, args.a, args.b))
    path = os.path.join(_out, "dt_blend.ckpt.json")
    blended.save(path)
    print(f"wrote {path} (alpha {args.alpha})")
    return 0


def _cmd_render(args):
    cfg, _ = _load_cfg(args)
    out = _out_dir(args)
    mesh = _read_mesh(args.mesh, args.landmarks)
    rc = build_render_config(cfg)
    rig = build_rig(mesh, rc)
    count = 0
    for level, view, image in render_all(mesh, rig, rc.sigma, rc.gamma):
        save_png(os.path.join(out, f"L{level}_V{view}.png"), image)
        count += 1
    print(f"wrote {count} views to {out}")
    return 0


def _cmd_eval(args):
    cfg, _ = _load_cfg(args)
    out = _out_dir(args)
    source = _read_mesh(
        os.path.join(args.exemplar, "source.obj"),
        os.path.join(args.exemplar, "source.landmarks.json"),
    )
    style = _read_mesh(os.path.join(args.exemplar, "stylized.obj"))
    stylized = _read_mesh(args.stylized)
    target = _read_mesh(args.target)
    rc = build_render_config(cfg)
    rig = build_rig(source, rc)
    embedder = FeatureEmbedder(resolution=rc.resolution)
    metrics = eval_metrics(
        stylized, style, target, rig, embedder, sigma=rc.sigma, gamma=rc.gamma
    )
    _write_json(out, "metrics.json", metrics)
    print(
        f"sp={metrics['sp']:.4f} ip={metrics['ip']:.4f} avg={metrics['avg']:.4f}"
    )
    return 0


def _cmd_ablate_sims(args):
    cfg, _ = _load_cfg(args)
    out = _out_dir(args)
    section = cfg["ablate"]
    rows = sampling_ablation(
        build_morphable(cfg),
        schedule=build_schedule(cfg, "train_ds"),
        seeds=tuple(section["seeds"]),
        eval_count=section["eval_count"],
        eval_seed=section["eval_seed"],
        pool_size=cfg["train_ds"]["pool_size"],
        batch=cfg["train_ds"]["batch"],
    )
    path = os.path.join(out, "ablation.csv")
    write_loss_csv(path, ABLATION_HEADER, rows)
    for row in rows:
        cells = " ".join(f"{v:.4e}" for v in row[1:])
        print(f"{row[0]:>8}: {cells}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> _Parser:
    parser = _Parser(
        prog="facestyle",
        description="One-shot geometric stylization of face meshes.",
    )
    parser.add_argument(
        "--print-config-schema",
        action="store_true",
        help="print the full default config as JSON and exit",
    )

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="JSON", default=None,
                        help="config file merged over the scale preset")
    common.add_argument("--scale", choices=sorted(PRESETS), default="desk",
                        help="preset the config file is merged over")
    common.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
    common.add_argument("--out", metavar="DIR", default=".",
                        help="output directory (created if missing)")
    common.add_argument("--force", action="store_true",
                        help="ignore checkpoint fingerprint mismatches")

    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("gen-model", parents=[common],
                       help="write the morphable template and its manifest")
    p.set_defaults(func=_cmd_gen_model)

    p = sub.add_parser("gen-exemplar", parents=[common],
                       help="synthesize a source/stylized exemplar pair")
    p.add_argument("--style", choices=sorted(EXEMPLAR_PRESETS), required=True,
                   help="procedural style preset")
    p.set_defaults(func=_cmd_gen_exemplar)

    p = sub.add_parser("train-ds", parents=[common],
                       help="fit the source deformation field")
    p.set_defaults(func=_cmd_train_ds)

    p = sub.add_parser("train-dt", parents=[common],
                       help="adapt the field to one exemplar pair")
    p.add_argument("--ds", required=True, metavar="CKPT",
                   help="source-field checkpoint from train-ds")
    p.add_argument("--exemplar", required=True, metavar="DIR",
                   help="gen-exemplar output directory")
    p.set_defaults(func=_cmd_train_dt)

    p = sub.add_parser("train-mage", parents=[common],
                       help="pretrain the point-set encoders and fit the "
                            "latent translator")
    p.add_argument("--ds", required=True, metavar="CKPT")
    p.set_defaults(func=_cmd_train_mage)

    p = sub.add_parser("stylize", parents=[common],
                       help="stylize a target mesh of any topology")
    p.add_argument("--dt", required=True, metavar="CKPT")
    p.add_argument("--mage", required=True, metavar="CKPT")
    p.add_argument("--target", required=True, metavar="OBJ",
                   help="deformation target mesh")
    p.add_argument("--template", default="original",
                   help="output topology: original, loop1, loop2, "
                        "simplified, or an OBJ path")
    p.set_defaults(func=_cmd_stylize)

    p = sub.add_parser("interpolate", parents=[common],
                       help="blend two stylized-field checkpoints")
    p.add_argument("--a", required=True, metavar="CKPT")
    p.add_argument("--b", required=True, metavar="CKPT")
    p.add_argument("--alpha", type=float, required=True,
                   help="weight on checkpoint A, in [0, 1]")
    p.set_defaults(func=_cmd_interpolate)

    p = sub.add_parser("render", parents=[common],
                       help="rasterize every rig view of a mesh to PNGs")
    p.add_argument("--mesh", required=True, metavar="OBJ")
    p.add_argument("--landmarks", default=None, metavar="JSON",
                   help="landmark sidecar (required if the OBJ has none)")
    p.set_defaults(func=_cmd_render)

    p = sub.add_parser("eval", parents=[common],
                       help="embedding similarity metrics for a stylization")
    p.add_argument("--stylized", required=True, metavar="OBJ")
    p.add_argument("--exemplar", required=True, metavar="DIR")
    p.add_argument("--target", required=True, metavar="OBJ")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate-sims", parents=[common],
                       help="compare surface sampling strategies for train-ds")
    p.set_defaults(func=_cmd_ablate_sims)

    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 1
    if args.print_config_schema:
        print(json.dumps(default_config(), indent=2))
        return 0
    if args.command is None:
        parser.print_usage(sys.stderr)
        sys.stderr.write(f"{parser.prog}: error: a command is required\n")
        return 1
    try:
        return args.func(args)
    except Exception as exc:  # runtime failures map to exit code 2
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
