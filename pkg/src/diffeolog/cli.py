"""Command-line pipelines over the deformation-field toolkit.

Subcommands: gen (synthetic dataset), log (iss or leda logarithm of a
field), exp (exponential of a velocity), train (fit the autoencoder), eval
(held-in quality report), pca (modes of log maps or latents), regress
(covariate regression on latents), walk (latent-space walks), render (grid
and log-determinant images).

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 a square-root
stage failed to converge while --strict was set.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from .fields import GridMismatchError
from .fileio import (
    DatasetManifest,
    FormatError,
    PairRecord,
    checkpoint_load,
    checkpoint_save,
    field_read,
    field_read_deformation,
    field_write,
    manifest_load,
    manifest_save,
    render_grid_ppm,
    render_logdet_ppm,
)
from .groupmaps import ExpConfig, IssConfig, NonConvergenceWarning, exp_ode_oracle, exp_scaling_squaring, iss_log
from .model import ModelConfig, encode, evaluate, infer_log, train
from .stats import (
    RegressionModel,
    latent_walk,
    ols_fit,
    pca_fit,
    pca_reconstruct,
    top_regression_directions,
)
from .synth import SynthConfig, gen_synthetic_pair


def _parse_size(text: str) -> tuple[int, int]:
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"size must look like 32x32, got {text!r}") from exc


def _cmd_gen(args) -> int:
    out = Path(args.out)
    (out / "fields").mkdir(parents=True, exist_ok=True)
    h, w = args.size
    cfg = SynthConfig(
        height=h,
        width=w,
        n_pairs=args.pairs,
        max_disp=args.max_disp,
        smooth_sigma=args.smooth_sigma,
        n_factors=args.factors,
        seed=args.seed,
    )
    records = []
    for i in range(cfg.n_pairs):
        fwd, bwd, vel, coeffs, covariate = gen_synthetic_pair(cfg, i)
        rec = PairRecord(
            pair_id=i,
            path_fwd=f"fields/pair_{i:05d}_fwd.ledf",
            path_bwd=f"fields/pair_{i:05d}_bwd.ledf",
            path_gt_velocity=f"fields/pair_{i:05d}_vel.ledf",
            covariates={"c": covariate},
            factor_coeffs=[float(v) for v in coeffs],
        )
        field_write(out / rec.path_fwd, fwd)
        field_write(out / rec.path_bwd, bwd)
        field_write(out / rec.path_gt_velocity, vel)
        records.append(rec)
    manifest = DatasetManifest(
        format_version=1, height=h, width=w, records=records, root=out
    )
    manifest_save(out / "manifest.json", manifest)
    print(f"wrote {cfg.n_pairs} pairs under {out}")
    return 0


def _cmd_log(args) -> int:
    phi = field_read_deformation(args.field)
    if args.method == "iss":
        cfg = IssConfig(n_roots=args.n_roots)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            logv = iss_log(phi, cfg)
        stuck = [w for w in caught if issubclass(w.category, NonConvergenceWarning)]
        for w in stuck:
            print(f"warning: {w.message}", file=sys.stderr)
        if stuck and args.strict:
            print("error: square roots did not converge (--strict)", file=sys.stderr)
            return 3
    else:
        if not args.model:
            print("error: --method leda requires --model", file=sys.stderr)
            return 1
        params = checkpoint_load(args.model)
        logv = infer_log(params, phi)
    field_write(args.out, logv)
    return 0


def _cmd_exp(args) -> int:
    v = field_read(args.velocity)
    if args.oracle:
        phi = exp_ode_oracle(v, 1.0, ExpConfig())
    else:
        phi = exp_scaling_squaring(v, ExpConfig())
    field_write(args.out, phi)
    return 0


def _load_pairs(manifest: DatasetManifest):
    return [manifest.load_pair(i) for i in range(len(manifest.records))]


def _cmd_train(args) -> int:
    manifest = manifest_load(Path(args.data) / "manifest.json")
    pairs = _load_pairs(manifest)
    cfg = ModelConfig(
        height=manifest.height,
        width=manifest.width,
        latent_dim=args.latent,
        n_stages=args.stages,
        epochs=args.epochs,
        seed=args.seed,
        batch_size=args.batch,
        lr=args.lr,
    )
    params, _history = train(pairs, cfg, progress=print)
    checkpoint_save(args.out, params)
    print(f"saved model to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    manifest = manifest_load(Path(args.data) / "manifest.json")
    params = checkpoint_load(args.model)
    pairs = _load_pairs(manifest)
    velocities = [manifest.load_velocity(i) for i in range(len(manifest.records))]
    if any(v is None for v in velocities):
        velocities = None
    report = {"metrics": evaluate(params, pairs, velocities)}
    if args.timing_fields > 0:
        fields = [p[0] for p in pairs[: args.timing_fields]]
        infer_log(params, fields[0])
        t0 = time.perf_counter()
        for f in fields:
            iss_log(f, IssConfig())
        iss_s = (time.perf_counter() - t0) / len(fields)
        t0 = time.perf_counter()
        for f in fields:
            infer_log(params, f)
        amortized_s = (time.perf_counter() - t0) / len(fields)
        report["timing"] = {
            "iss_seconds_per_field": iss_s,
            "amortized_seconds_per_field": amortized_s,
            "speedup": iss_s / amortized_s if amortized_s > 0 else float("inf"),
        }
    with open(args.report, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote report to {args.report}")
    return 0


def _render_mode_walk(out_dir: Path, tag: str, fields) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, phi in enumerate(fields):
        render_grid_ppm(out_dir / f"{tag}_step{i}_grid.ppm", phi)
        render_logdet_ppm(out_dir / f"{tag}_step{i}_logdet.ppm", phi)


def _cmd_pca(args) -> int:
    manifest = manifest_load(Path(args.data) / "manifest.json")
    params = checkpoint_load(args.model) if args.model else None
    if args.source == "latents" and params is None:
        print("error: --source latents requires --model", file=sys.stderr)
        return 1
    vectors = []
    for i in range(len(manifest.records)):
        fwd, _ = manifest.load_pair(i)
        if args.source == "latents":
            vectors.append(encode(params, fwd))
        else:
            logv = infer_log(params, fwd) if params is not None else iss_log(fwd, IssConfig())
            vectors.append(logv.data.ravel())
    model = pca_fit(np.asarray(vectors), args.k)
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(model.to_json_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote PCA model to {args.out}")
    if args.render:
        grid = manifest.grid
        steps = (-2.0, -1.0, 0.0, 1.0, 2.0)
        for mode in range(min(args.k, 3)):
            sd = float(np.sqrt(model.eigenvalues[mode]))
            fields = []
            for s in steps:
                coords = np.zeros(args.k)
                coords[mode] = s * sd
                vec = pca_reconstruct(model, coords)
                if args.source == "latents":
                    from .model import decode_root

                    fields.append(decode_root(params, vec, 0))
                else:
                    from .fields import VectorField

                    vel = VectorField(grid, vec.reshape(grid.height, grid.width, 2))
                    fields.append(exp_scaling_squaring(vel, ExpConfig()))
            _render_mode_walk(Path(args.render), f"mode{mode}", fields)
        print(f"rendered modes under {args.render}")
    return 0


def _cmd_regress(args) -> int:
    manifest = manifest_load(Path(args.data) / "manifest.json")
    params = checkpoint_load(args.model)
    latents, targets = [], []
    for i, rec in enumerate(manifest.records):
        if args.covariate not in rec.covariates:
            print(f"error: covariate {args.covariate!r} missing on pair {rec.pair_id}", file=sys.stderr)
            return 2
        fwd, _ = manifest.load_pair(i)
        latents.append(encode(params, fwd))
        targets.append(rec.covariates[args.covariate])
    model = ols_fit(np.asarray(latents), np.asarray(targets), test_fraction=0.2, seed=params.config.seed)
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(model.to_json_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote regression model to {args.out} (test_r={model.test_r:.3f})")
    return 0


def _cmd_walk(args) -> int:
    params = checkpoint_load(args.model)
    L = params.config.latent_dim
    if args.mode == "random":
        rng = np.random.default_rng(params.config.seed)
        direction = rng.standard_normal(L)
        direction /= np.linalg.norm(direction)
    else:
        if not args.regression:
            print("error: --mode regression-top requires --regression", file=sys.stderr)
            return 1
        with open(args.regression, "r", encoding="utf-8") as fh:
            reg = RegressionModel.from_json_dict(json.load(fh))
        direction = top_regression_directions(reg, 1)[0]
    fields = latent_walk(params, np.zeros(L), direction, args.steps, args.scale)
    _render_mode_walk(Path(args.render), "walk", fields)
    print(f"rendered {args.steps} walk steps under {args.render}")
    return 0


def _cmd_render(args) -> int:
    phi = field_read_deformation(args.field)
    render_grid_ppm(args.out_grid, phi, args.line_every)
    render_logdet_ppm(args.out_logdet, phi)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diffeolog", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pairs", type=int, default=500)
    p.add_argument("--size", type=_parse_size, default=(32, 32))
    p.add_argument("--max-disp", type=float, default=3.0)
    p.add_argument("--smooth-sigma", type=float, default=3.0)
    p.add_argument("--factors", type=int, default=4)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_gen)

    p = sub.add_parser("log", help="logarithm of a deformation field")
    p.add_argument("--method", choices=("iss", "leda"), required=True)
    p.add_argument("--field", required=True)
    p.add_argument("--model")
    p.add_argument("--n-roots", type=int, default=6)
    p.add_argument("--out", required=True)
    p.add_argument("--strict", action="store_true")
    p.set_defaults(func=_cmd_log)

    p = sub.add_parser("exp", help="exponential of a velocity field")
    p.add_argument("--velocity", required=True)
    p.add_argument("--oracle", action="store_true", help="integrate the flow instead of scaling and squaring")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_exp)

    p = sub.add_parser("train", help="train the root-predicting autoencoder")
    p.add_argument("--data", required=True)
    p.add_argument("--latent", type=int, default=32)
    p.add_argument("--stages", type=int, default=4)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="quality report of a trained model")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--timing-fields", type=int, default=0)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("pca", help="modes of variation of log maps or latents")
    p.add_argument("--source", choices=("logmaps", "latents"), required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--model")
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--render")
    p.set_defaults(func=_cmd_pca)

    p = sub.add_parser("regress", help="regress a covariate on latents")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--covariate", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_regress)

    p = sub.add_parser("walk", help="decode a straight walk through latent space")
    p.add_argument("--model", required=True)
    p.add_argument("--mode", choices=("random", "regression-top"), required=True)
    p.add_argument("--steps", type=int, default=5)
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--regression", help="regression JSON for regression-top mode")
    p.add_argument("--render", required=True)
    p.set_defaults(func=_cmd_walk)

    p = sub.add_parser("render", help="grid and log-determinant images of a field")
    p.add_argument("--field", required=True)
    p.add_argument("--out-grid", required=True)
    p.add_argument("--out-logdet", required=True)
    p.add_argument("--line-every", type=int, default=4)
    p.set_defaults(func=_cmd_render)

    return parser


def cli_dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except (FormatError, FileNotFoundError, GridMismatchError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli_dispatch(sys.argv[1:]))
