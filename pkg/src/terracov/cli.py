"""Command-line pipeline: ingest, synth, train, eval, map, baseline, krige, compose.

Every command writes its outputs plus a ``manifest.json`` into a fresh
output directory (``ingest`` writes ``<out>.manifest.json`` beside its grid).
Outputs are staged in a temporary sibling directory and moved into place
only when the command succeeds, so a failed run leaves nothing behind.
Errors are reported as one JSON line on stderr with a nonzero exit code.
"""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import math
import shutil
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__, baselines, geostat, mapgen, synth
from .dataset import (
    DATASET_FORMAT_VERSION,
    Dataset,
    TargetTransformError,
    apply_detection_limit,
    assemble_dataset,
    read_sites_csv,
    transform_target,
)
from .evaluation import evaluate_fold, export_scatter, fold_predictions, r_squared, write_metrics
from .network import (
    PARAM_FORMAT_VERSION,
    ArchConfig,
    arch_to_text,
    build_network,
    default_arch,
    demo_arch,
    load_arch,
    load_parameters,
    parameter_count,
    predict,
    save_parameters,
)
from .raster import block_aggregate, grid_stats, read_ascii_grid, render_png, write_ascii_grid
from .training import FoldAssignment, TrainConfig, train

logger = logging.getLogger("terracov")

MANIFEST_FORMAT_VERSION = 1


class CliError(Exception):
    """Invalid invocation detected before any computation."""


def file_fingerprint(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"{what} not found: {p}")
    return p


def _require_dir(path, what: str, marker: str | None = None) -> Path:
    p = Path(path)
    if not p.is_dir() or (marker and not (p / marker).exists()):
        raise CliError(f"{what} not found or incomplete: {p}")
    return p


@contextlib.contextmanager
def staged_output(out: Path, force: bool):
    """Yield a temporary directory that replaces ``out`` on success."""
    out = Path(out)
    if out.exists() and (not out.is_dir() or any(out.iterdir())):
        if not force:
            raise CliError(f"output {out} exists and is not empty (use --force to replace it)")
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if out.exists():
        shutil.rmtree(out) if out.is_dir() else out.unlink()
    tmp.rename(out)


def write_manifest(directory: Path, args: argparse.Namespace, inputs: dict[str, Path], extra: dict | None = None,
                   name: str = "manifest.json", started: float | None = None):
    config = {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items()) if k != "func"}
    manifest = {
        "manifest_version": MANIFEST_FORMAT_VERSION,
        "tool": "terracov",
        "tool_version": __version__,
        "command": args.command,
        "config": config,
        "seed": getattr(args, "seed", None),
        "inputs": {k: {"path": str(p), "sha256": file_fingerprint(p)} for k, p in inputs.items()},
        "started": time.strftime("%Y-%m-%dT%H:%M:%S%z", time.localtime(started or time.time())),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    if extra:
        manifest.update(extra)
    (directory / name).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _json_dump(obj, path: Path):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# run directory helpers


def _resolve_arch(spec: str | None, seed: int) -> ArchConfig:
    if spec in (None, "default"):
        return default_arch(seed=seed)
    if spec == "demo":
        return demo_arch(seed=seed)
    arch = load_arch(_require_file(spec, "architecture file"))
    return ArchConfig(arch.input_size, arch.conv_layers, arch.pool, arch.dense_layers, seed)


def _load_run(run: Path):
    run = _require_dir(run, "run directory", "params.bin")
    params, arch = load_parameters(run / "params.bin")
    info = json.loads((run / "train.json").read_text())
    folds = FoldAssignment(**info["folds"])
    return params, arch, info, folds


def _site_dataset(run_info: dict, dem, sites_path: Path, arch: ArchConfig):
    sites = read_sites_csv(sites_path)
    return assemble_dataset(
        dem,
        sites,
        k=arch.input_size,
        transform=run_info["target_transform"],
        k_folds=run_info["folds"]["k_folds"],
        seed=run_info["folds"]["seed"],
        national_sd=run_info["national_sd"],
    )


# ---------------------------------------------------------------------------
# commands


def cmd_ingest(args):
    src = _require_file(args.dem, "DEM")
    out = Path(args.out)
    manifest_path = out.with_name(out.name + ".manifest.json")
    if (out.exists() or manifest_path.exists()) and not args.force:
        raise CliError(f"output {out} exists (use --force to replace it)")
    started = time.time()
    grid = block_aggregate(read_ascii_grid(src), args.aggregate)
    stats = grid_stats(grid)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = out.with_name(f".{out.name}.tmp")
    write_ascii_grid(grid, tmp)
    tmp.replace(out)
    if args.png:
        render_png(grid, out.with_suffix(".png"), ramp="terrain")
    summary = {"shape": list(grid.shape), "cell_size": grid.cell_size, "mean": stats.mean, "sd": stats.sd,
               "valid_count": stats.valid_count}
    write_manifest(out.parent, args, {"dem": src}, {"grid": summary}, name=manifest_path.name, started=started)
    print(json.dumps(summary, sort_keys=True))


def cmd_synth(args):
    recipe = synth.SynthRecipe(
        size=args.size,
        hurst=args.hurst,
        rule=args.rule,
        noise_sd=args.noise,
        n_sites=args.sites,
        seed=args.seed,
        relief_sd=args.relief,
        tri_window=args.tri_window,
    )
    started = time.time()
    with staged_output(args.out, args.force) as d:
        info = synth.write_world(recipe, d)
        write_manifest(d, args, {}, {"r2_ceiling": info["r2_ceiling"]}, started=started)
    print(f"r2_ceiling={info['r2_ceiling']!r}")


def cmd_train(args):
    dem_path = _require_file(args.dem, "DEM")
    sites_path = _require_file(args.sites, "sites file")
    folds = FoldAssignment(k_folds=args.folds, test_fold=args.test_fold, seed=args.seed, val_fold=args.val_fold)
    arch = _resolve_arch(args.arch, args.seed)
    config = TrainConfig(
        batch_size=args.batch_size,
        max_epochs=args.epochs,
        learning_rate=args.lr,
        early_stop_patience=math.inf if args.patience <= 0 else args.patience,
        seed=args.seed,
    )
    started = time.time()
    with staged_output(args.out, args.force) as d:
        dem = read_ascii_grid(dem_path)
        national_sd = grid_stats(dem).sd
        ds, report = assemble_dataset(
            dem, read_sites_csv(sites_path), arch.input_size, args.transform, folds.k_folds, folds.seed, national_sd
        )
        params = build_network(arch)
        logger.info("network has %d trainable parameters", parameter_count(params))
        params, history = train(params, arch, ds, folds, config)
        save_parameters(params, arch, d / "params.bin")
        (d / "arch.cfg").write_text(arch_to_text(arch))
        history.to_csv(d / "history.csv")
        ds.save(d / "dataset")
        _json_dump(report.to_dict(), d / "exclusions.json")
        info = {
            "folds": {"k_folds": folds.k_folds, "test_fold": folds.test_fold, "seed": folds.seed,
                      "val_fold": folds.val_fold},
            "monitor_fold": folds.monitor_fold,
            "test_fold_used_for_early_stopping": folds.val_fold is None,
            "national_sd": national_sd,
            "target_transform": args.transform,
            "dem": {"path": str(dem_path.resolve()), "sha256": file_fingerprint(dem_path)},
            "train_config": {k: (None if v == math.inf else v) for k, v in vars(config).items()},
            "parameter_count": parameter_count(params),
            "history": history.summary(),
        }
        _json_dump(info, d / "train.json")
        write_manifest(d, args, {"dem": dem_path, "sites": sites_path}, started=started)
    print(f"best_epoch={history.best_epoch} best_holdout_mse={history.best_holdout_mse!r}")


def cmd_eval(args):
    run = Path(args.run)
    params, arch, info, folds = _load_run(run)
    started = time.time()
    with staged_output(args.out, args.force) as d:
        ds = Dataset.load(run / "dataset")
        metrics = evaluate_fold(params, arch, ds, folds)
        idx, pred, obs = fold_predictions(params, arch, ds, folds)
        export_scatter(pred, obs, d / "scatter.csv")
        extra = {"test_fold": folds.test_fold, "monitor_fold": folds.monitor_fold}
        if folds.val_fold is None:
            extra["warning"] = "test fold also served as the early-stopping monitor"
        write_metrics(metrics, d, extra)
        write_manifest(d, args, {"params": run / "params.bin"}, started=started)
    print(metrics.as_text(), end="")


def cmd_map(args):
    dem_path = _require_file(args.dem, "DEM")
    run = Path(args.run)
    params, arch, info, _ = _load_run(run)
    started = time.time()
    with staged_output(args.out, args.force) as d:
        dem = read_ascii_grid(dem_path)
        cov = mapgen.predict_grid(params, arch, dem, info["national_sd"], stride=args.stride)
        cov.save(d, png=args.png)
        write_manifest(d, args, {"dem": dem_path, "params": run / "params.bin"}, started=started)


def _parse_derivatives(text: str) -> list[str]:
    names = [n.strip() for n in text.split(",") if n.strip()]
    unknown = [n for n in names if n not in baselines.DERIVATIVES]
    if not names or unknown:
        raise CliError(f"unknown derivatives {unknown}; choose from {sorted(baselines.DERIVATIVES)}")
    return names


def cmd_baseline(args):
    dem_path = _require_file(args.dem, "DEM")
    sites_path = _require_file(args.sites, "sites file")
    names = _parse_derivatives(args.derivatives)
    run_info = None
    if args.run:
        _, _, run_info, folds = _load_run(Path(args.run))
    started = time.time()
    with staged_output(args.out, args.force) as d:
        dem = read_ascii_grid(dem_path)
        grids = {n: baselines.derivative(dem, n) for n in names}
        for n, g in grids.items():
            write_ascii_grid(g, d / f"{n}.asc")
        transform = run_info["target_transform"] if run_info else args.transform
        sites = read_sites_csv(sites_path)
        z, keep = [], []
        for s in sites:
            v = apply_detection_limit(s)
            if math.isnan(v):
                continue
            try:
                z.append(transform_target(v, transform, s.site_id))
            except TargetTransformError:
                continue
            keep.append(s)
        dm = baselines.build_design_matrix([s.easting for s in keep], [s.northing for s in keep], grids)
        z = np.array(z)[dm.site_index]
        ids = [keep[i].site_id for i in dm.site_index]
        result = {"n_sites": len(sites), "n_used": dm.n_rows, "excluded_nodata": dm.excluded, "columns": dm.columns}
        if run_info:
            ds = Dataset.load(Path(args.run) / "dataset")
            fold_of = dict(zip((s.site_id for s in ds.sites), ds.fold_labels.tolist()))
            labels = np.array([fold_of.get(i, -1) for i in ids])
            tr = np.isin(labels, folds.train_folds())
            te = labels == folds.test_fold
            fit = baselines.ols_fit(dm.X[tr], z[tr], dm.columns)
            pred = baselines.ols_predict(dm.X[te], fit.coefficients)
            result.update(r_squared_train=fit.r_squared, r_squared_test=r_squared(pred, z[te]),
                          n_train=int(tr.sum()), n_test=int(te.sum()), test_fold=folds.test_fold)
            export_scatter(pred, z[te], d / "scatter.csv")
        else:
            fit = baselines.ols_fit(dm.X, z, dm.columns)
            result.update(r_squared_in_sample=fit.r_squared)
        with open(d / "coefficients.csv", "w", encoding="utf-8", newline="\n") as fh:
            fh.write("column,coefficient\n")
            for c, v in fit.as_dict().items():
                fh.write(f"{c},{v!r}\n")
        lines = [f"{k} = {v}" for k, v in result.items()]
        (d / "report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
        (d / "metrics.kv").write_text(
            "".join(f"{k}={v!r}\n" for k, v in result.items() if isinstance(v, (int, float))), encoding="utf-8"
        )
        inputs = {"dem": dem_path, "sites": sites_path}
        if args.run:
            inputs["params"] = Path(args.run) / "params.bin"
        write_manifest(d, args, inputs, started=started)
    print("\n".join(lines))


def cmd_krige(args):
    run = Path(args.run)
    params, arch, info, _ = _load_run(run)
    sites_path = _require_file(args.sites, "sites file")
    dem_path = _require_file(args.dem or info["dem"]["path"], "DEM")
    started = time.time()
    with staged_output(args.out, args.force) as d:
        dem = read_ascii_grid(dem_path)
        ds, _ = _site_dataset(info, dem, sites_path, arch)
        cov_at_sites = predict(params, arch, ds.patches)
        r = geostat.residuals(ds.targets, cov_at_sites)
        coords = ds.coords
        span = np.ptp(coords, axis=0)
        max_lag = args.max_lag or float(np.hypot(*span)) / 4
        bin_width = args.bin_width or max_lag / 15
        vg = geostat.empirical_variogram(coords, r, bin_width, max_lag)
        model = geostat.fit_exponential(vg)
        vg.to_csv(d / "variogram.csv")
        _json_dump({**model.to_dict(), "bin_width": bin_width, "max_lag": max_lag,
                    "residual_mean": float(r.mean()), "n_sites": len(r)}, d / "variogram.json")
        with open(d / "residuals.csv", "w", encoding="utf-8", newline="\n") as fh:
            fh.write("site_id,easting,northing,residual\n")
            for s, v in zip(ds.sites, r.tolist()):
                fh.write(f"{s.site_id},{s.easting!r},{s.northing!r},{v!r}\n")
        template = mapgen.output_template(dem, args.stride)
        out = geostat.krige_residual_grid(coords, r, model, template, with_variance=args.variance)
        if args.variance:
            out, var = out
            write_ascii_grid(var, d / "variance.asc")
        write_ascii_grid(out, d / "residual.asc")
        write_manifest(d, args, {"dem": dem_path, "sites": sites_path, "params": run / "params.bin"},
                       started=started)
    print(json.dumps(model.to_dict(), sort_keys=True))


def cmd_compose(args):
    cov_dir = _require_dir(args.cov, "covariate map directory", "covariate.asc")
    res_dir = _require_dir(args.resid, "residual directory", "residual.asc")
    started = time.time()
    with staged_output(args.out, args.force) as d:
        cov = mapgen.CovariateGrid.load(cov_dir)
        resid = read_ascii_grid(res_dir / "residual.asc")
        total = mapgen.compose_prediction(cov, resid)
        write_ascii_grid(total, d / "prediction.asc")
        if args.png:
            render_png(total, d / "prediction.png")
        write_manifest(d, args, {"covariate": cov_dir / "covariate.asc", "residual": res_dir / "residual.asc"},
                       started=started)


# ---------------------------------------------------------------------------
# argument parsing


def _add_common(p: argparse.ArgumentParser, seed: bool = True):
    p.add_argument("--config", help="flat key = value file; command-line flags override it")
    p.add_argument("--force", action="store_true", help="replace a non-empty output")
    p.add_argument("--threads", type=int, default=1, help="BLAS thread cap (1 guarantees bit-determinism)")
    p.add_argument("-v", "--verbose", action="store_true")
    if seed:
        p.add_argument("--seed", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="terracov", description=__doc__.splitlines()[0])
    parser.add_argument(
        "--version",
        action="version",
        version=(
            f"terracov {__version__} (params format {PARAM_FORMAT_VERSION}, "
            f"dataset format {DATASET_FORMAT_VERSION}, manifest format {MANIFEST_FORMAT_VERSION})"
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="block-aggregate an ASCII DEM")
    p.add_argument("--dem", required=True)
    p.add_argument("--aggregate", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--png", action="store_true")
    _add_common(p, seed=False)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", help="generate a synthetic DEM and site table")
    p.add_argument("--size", type=int, default=512)
    p.add_argument("--hurst", type=float, default=0.7)
    p.add_argument("--rule", choices=synth.RULES, default="tri_nonlinear")
    p.add_argument("--sites", type=int, default=5000)
    p.add_argument("--noise", type=float, default=0.42)
    p.add_argument("--relief", type=float, default=100.0, help="terrain SD in metres")
    p.add_argument("--tri-window", type=int, default=5)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the covariate network")
    p.add_argument("--dem", required=True)
    p.add_argument("--sites", required=True)
    p.add_argument("--transform", choices=("identity", "log"), default="identity")
    p.add_argument("--arch", default="default", help="'default', 'demo', or a config file")
    p.add_argument("--folds", type=int, default=10)
    p.add_argument("--test-fold", type=int, default=9)
    p.add_argument("--val-fold", type=int, default=None, help="separate early-stopping fold")
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--batch-size", type=int, default=4096)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--patience", type=int, default=50, help="epochs without improvement; 0 disables")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="held-out metrics for a trained run")
    p.add_argument("--run", required=True)
    p.add_argument("--out", required=True)
    _add_common(p, seed=False)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("map", help="predict the covariate over a DEM")
    p.add_argument("--run", required=True)
    p.add_argument("--dem", required=True)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--png", action="store_true")
    p.add_argument("--out", required=True)
    _add_common(p, seed=False)
    p.set_defaults(func=cmd_map)

    p = sub.add_parser("baseline", help="OLS on standard terrain derivatives")
    p.add_argument("--dem", required=True)
    p.add_argument("--sites", required=True)
    p.add_argument("--derivatives", default="slope,tri,roughness,curvature")
    p.add_argument("--transform", choices=("identity", "log"), default="identity")
    p.add_argument("--run", help="reuse this run's folds and transform for a held-out comparison")
    p.add_argument("--out", required=True)
    _add_common(p, seed=False)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("krige", help="variogram and ordinary kriging of covariate residuals")
    p.add_argument("--run", required=True)
    p.add_argument("--sites", required=True)
    p.add_argument("--dem", help="defaults to the DEM recorded in the run")
    p.add_argument("--stride", type=int, default=1, help="must match the covariate map")
    p.add_argument("--bin-width", type=float, default=None)
    p.add_argument("--max-lag", type=float, default=None)
    p.add_argument("--variance", action="store_true", help="also write the kriging variance grid")
    p.add_argument("--out", required=True)
    _add_common(p, seed=False)
    p.set_defaults(func=cmd_krige)

    p = sub.add_parser("compose", help="covariate map + kriged residual")
    p.add_argument("--cov", required=True)
    p.add_argument("--resid", required=True)
    p.add_argument("--png", action="store_true")
    p.add_argument("--out", required=True)
    _add_common(p, seed=False)
    p.set_defaults(func=cmd_compose)
    return parser


def read_config_file(path: str) -> dict[str, str]:
    cfg = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{lineno}: expected key = value")
        k, v = line.split("=", 1)
        cfg[k.strip().replace("-", "_")] = v.strip()
    return cfg


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        cfg = read_config_file(_require_file(args.config, "config file"))
        sub = parser._subparsers._group_actions[0].choices[args.command]
        actions = {a.dest: a for a in sub._actions}
        unknown = sorted(set(cfg) - set(actions) - {"config"})
        if unknown:
            raise CliError(f"unknown config keys for {args.command}: {unknown}")
        defaults = {}
        for k, v in cfg.items():
            a = actions[k]
            if isinstance(a, argparse._StoreTrueAction):
                defaults[k] = v.lower() in ("1", "true", "yes")
            else:
                defaults[k] = a.type(v) if a.type else v
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    if getattr(args, "command", None) == "train":
        if args.folds < 2:
            raise CliError(f"--folds must be at least 2, got {args.folds}")
        if not 0 <= args.test_fold < args.folds:
            raise CliError(f"--test-fold {args.test_fold} must lie in [0, {args.folds})")
        if args.val_fold is not None and (not 0 <= args.val_fold < args.folds or args.val_fold == args.test_fold):
            raise CliError(f"--val-fold {args.val_fold} must lie in [0, {args.folds}) and differ from the test fold")
    return args


def main(argv=None) -> int:
    command = None
    try:
        args = parse_args(argv)
        command = args.command
        logging.basicConfig(
            level=logging.INFO if args.verbose else logging.WARNING,
            format="%(asctime)s %(name)s %(levelname)s %(message)s",
            stream=sys.stderr,
        )
        with threadpool_limits(limits=max(1, args.threads)):
            args.func(args)
    except SystemExit:
        raise
    except KeyboardInterrupt:
        return 130
    except Exception as exc:  # reported as one machine-readable line
        err = {"error": type(exc).__name__, "message": " ".join(str(exc).split()), "command": command}
        print(json.dumps(err, sort_keys=True), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
