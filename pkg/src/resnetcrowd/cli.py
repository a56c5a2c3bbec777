"""``resnetcrowd`` command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 data error
(missing or malformed manifests, images, checkpoints), 3 numeric failure
(divergence, failed gradient check, EM breakdown).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import sys
from importlib import metadata
from pathlib import Path

import numpy as np

from . import __version__
from . import autograd as ag
from .anomaly import GMMFitError, anomaly_score, evaluate_anomaly, extract_features, fit_gmm, write_scores_csv
from .config import ConfigError, DESK_SCALE, RunConfig, field_help, load_config_file, resolve_config
from .data import (
    ManifestError,
    SynthSpec,
    load_image,
    load_manifest,
    prepare_sample,
    resize_image,
    stratified_folds,
    synth_generate,
)
from .evaluation import (
    BAND_COLUMNS,
    UndefinedMetric,
    cross_validate,
    render_text_report,
    roc_auc,
    roc_curve,
    band_rows,
    write_reports,
)
from .gradcheck import run_layer_checks, run_model_check
from .model import (
    BEHAVIOUR_CONCEPTS,
    REPORTED_PARAMETER_COUNT,
    build_model,
    load_checkpoint,
    normalize_images,
    parameter_count,
)
from .plotting import plot_banded_mae, plot_loss_curves, plot_roc_curves, save_heatmap_png
from .serialization import BundleError
from .training import CANONICAL_RUNS, TrainHistory, TrainingDiverged, run_ablation_suite

logger = logging.getLogger("resnetcrowd")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


class DataError(Exception):
    """Input files are missing or inconsistent."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _versions() -> dict[str, str]:
    out = {"resnetcrowd": __version__, "python": platform.python_version()}
    for dist in ("numpy", "scipy", "Pillow", "matplotlib"):
        try:
            out[dist] = metadata.version(dist)
        except metadata.PackageNotFoundError:
            out[dist] = "unknown"
    return out


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")
    return path


def write_run_metadata(out: Path, command: str, config: RunConfig, **extra) -> Path:
    model = build_model(config.model_config())
    count = parameter_count(model)
    body = {
        "command": command,
        "seed": config.seed,
        "config_sha256": config.digest(),
        "config": config.to_dict(),
        "versions": _versions(),
        "parameter_count": count,
        "reported_parameter_count": REPORTED_PARAMETER_COUNT,
        "parameter_count_note": (
            f"layer-by-layer count {count} differs from the originally reported "
            f"{REPORTED_PARAMETER_COUNT} by {REPORTED_PARAMETER_COUNT - count}; "
            "no described layer accounts for the gap"
        ),
        **extra,
    }
    return _write_json(out / "run_metadata.json", body)


def _prepared_samples(manifest_path: Path, config: RunConfig):
    manifest = load_manifest(manifest_path, check_images=True)
    size = config.model_config().input_resolution
    params = config.heatmap_params()
    return manifest, [prepare_sample(s, manifest.root, size, params) for s in manifest.samples]


def _colormap(config: RunConfig) -> str | None:
    return config.colormap or None


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_synth(args, config: RunConfig) -> int:
    spec = SynthSpec(
        num_images=config.synth_images,
        violent_fraction=config.synth_violent_fraction,
        seed=config.seed,
        width=config.synth_width,
        height=config.synth_height,
    )
    manifest = synth_generate(spec, args.out)
    write_run_metadata(args.out, "gen-synth", config, images=len(manifest))
    print(f"wrote {len(manifest)} scenes and manifest.json to {args.out}")
    return EXIT_OK


def cmd_train(args, config: RunConfig) -> int:
    out: Path = args.out
    _, samples = _prepared_samples(args.manifest, config)
    folds = stratified_folds(samples, k=config.folds, seed=config.seed)
    _write_json(out / "folds.json", {"folds": folds})
    _write_json(out / "run_config.json", {"manifest": str(args.manifest), "config": config.to_dict()})
    results = run_ablation_suite(
        samples, folds, config.model_config(), config.train_config(), out_dir=out, runs=config.runs
    )
    for run, fold_runs in results.items():
        plot_loss_curves({f"fold {fr.fold}": fr.history for fr in fold_runs}, out / run / "loss_curves.png")
    write_run_metadata(out, "train", config, manifest=str(args.manifest), runs=list(results))
    print(f"trained {len(results)} run(s) x {len(folds)} folds into {out}")
    return EXIT_OK


def _load_run_dir(run_dir: Path):
    try:
        run_cfg = json.loads((run_dir / "run_config.json").read_text(encoding="utf-8"))
        folds = json.loads((run_dir / "folds.json").read_text(encoding="utf-8"))["folds"]
    except FileNotFoundError as exc:
        raise DataError(f"{run_dir} is not a training output directory ({exc.filename} missing)") from exc
    return run_cfg, folds


def cmd_eval(args, config: RunConfig) -> int:
    run_dir: Path = args.run_dir
    run_cfg, folds = _load_run_dir(run_dir)
    trained = resolve_config(run_cfg["config"])
    manifest_path = args.manifest or Path(run_cfg["manifest"])
    _, samples = _prepared_samples(manifest_path, trained)

    reports, histories = [], {}
    for run in trained.runs:
        label, mask = CANONICAL_RUNS[run]
        models = [load_checkpoint(run_dir / run / f"fold_{k}" / "model") for k in range(len(folds))]
        reports.append(cross_validate(models, folds, samples, mask, run=run, label=label))
        history_path = run_dir / run / "fold_0" / "history.csv"
        if history_path.exists():
            histories[label] = TrainHistory.read_csv(history_path)

    out: Path = args.out
    write_reports(reports, out)
    _write_figures(reports, histories, out)
    write_run_metadata(out, "eval", trained, run_dir=str(run_dir), manifest=str(manifest_path))
    print(render_text_report(reports), end="")
    return EXIT_OK


def _write_figures(reports, histories, out: Path) -> None:
    for concept in BEHAVIOUR_CONCEPTS:
        curves = {}
        for r in reports:
            if not r.tasks.behaviour:
                continue
            scores = [row[f"p_{concept}"] for row in r.predictions]
            labels = [row[concept] for row in r.predictions]
            try:
                fpr, tpr = roc_curve(scores, labels)
            except UndefinedMetric:
                continue
            curves[r.label] = (fpr, tpr, roc_auc(scores, labels))
        if curves:
            plot_roc_curves(curves, out / f"roc_{concept}.png", title=f"{concept.capitalize()} (pooled folds)")
    rows = band_rows(reports)
    if rows:
        plot_banded_mae(rows, BAND_COLUMNS, out / "banded_mae.png")
    if histories:
        plot_loss_curves(histories, out / "loss_curves.png")


def cmd_infer(args, config: RunConfig) -> int:
    model = load_checkpoint(args.checkpoint)
    image = resize_image(load_image(args.image), model.config.input_resolution)
    with ag.no_grad():
        out = model.forward(normalize_images(image, model.config), "eval")
    density = out.density.data[0].astype(np.float64)
    result = {
        "image": str(args.image),
        "count_regression": float(out.count_reg.data[0, 0]),
        "count_heatmap": float(out.heatmap_counts()[0]),
        "density_level": int(density.argmax()) + 1,
        "density_probabilities": [float(p) for p in density],
        "fight_probability": float(out.behaviour.data[0, 0]),
        "mob_probability": float(out.behaviour.data[0, 1]),
    }
    if not args.no_heatmap:
        path = save_heatmap_png(out.heatmap.data[0, 0], args.out / "heatmap.png", _colormap(config))
        result["heatmap_png"] = path.name
    _write_json(args.out / "prediction.json", result)
    write_run_metadata(args.out, "infer", config, checkpoint=str(args.checkpoint))
    print(json.dumps(result, indent=2))
    return EXIT_OK


def _read_frame_labels(path: Path) -> dict[str, bool]:
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"frame", "label"} <= set(reader.fieldnames):
            raise DataError(f"{path}: needs 'frame' and 'label' columns")
        return {row["frame"]: row["label"].strip() in ("1", "true", "True") for row in reader}


def cmd_anomaly(args, config: RunConfig) -> int:
    model = load_checkpoint(args.checkpoint)
    if not args.frames.is_dir():
        raise DataError(f"frame directory not found: {args.frames}")
    paths = sorted(p for p in args.frames.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not paths:
        raise DataError(f"no images in {args.frames}")
    labels = None
    if args.labels is not None:
        table = _read_frame_labels(args.labels)
        missing = [p.name for p in paths if p.name not in table]
        if missing:
            raise DataError(f"{args.labels}: no label for {missing[:5]}")
        labels = np.array([table[p.name] for p in paths])

    features = extract_features(model, [load_image(p) for p in paths])
    fit_rows = features if labels is None else features[~labels]
    gmm = fit_gmm(
        fit_rows, config.gmm_components, seed=config.seed, max_iter=config.gmm_max_iter,
        tol=config.gmm_tol, variance_floor=config.gmm_variance_floor,
    )
    scores = anomaly_score(gmm, features)
    out: Path = args.out
    write_scores_csv(out / "scores.csv", scores, labels, [p.name for p in paths])
    summary = {"frames": len(paths), "fit_frames": len(fit_rows), "auc": None, "gmm": gmm.to_dict()}
    if labels is not None and 0 < labels.sum() < len(labels):
        summary["auc"] = evaluate_anomaly(scores, labels)
        fpr, tpr = roc_curve(scores, labels)
        plot_roc_curves({"GMM score": (fpr, tpr, summary["auc"])}, out / "roc_anomaly.png", title="Anomaly detection")
    _write_json(out / "anomaly.json", summary)
    write_run_metadata(out, "anomaly", config, checkpoint=str(args.checkpoint), frames=str(args.frames))
    print(f"scored {len(paths)} frames; AUC {summary['auc']}")
    return EXIT_OK


def cmd_check_grads(args, config: RunConfig) -> int:
    if args.inject_fault:
        ag.FAULTS.add(args.inject_fault)
    try:
        results = run_layer_checks(seed=config.seed)
        if not args.layers_only:
            results.append(run_model_check(seed=config.seed))
    finally:
        ag.FAULTS.discard(args.inject_fault)
    lines, body = [], {}
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"{status} {r.name:<20} max_rel_err={r.report.max_error:.3e} tol={r.report.tol:g} ({r.seconds:.2f}s)")
        body[r.name] = {"passed": r.passed, "max_error": r.report.max_error, "tol": r.report.tol, "errors": r.report.errors}
    ok = all(r.passed for r in results)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "grad_check.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    _write_json(args.out / "grad_check.json", {"passed": ok, "cases": body})
    write_run_metadata(args.out, "check-grads", config)
    print("\n".join(lines))
    if not ok:
        print("gradient check FAILED", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _config_epilog() -> str:
    lines = ["configuration keys (JSON config file or --flag; precedence: defaults < desk_scale preset < file < flags):"]
    for key, (default, text) in field_help().items():
        shown = json.dumps(default)
        preset = f", desk_scale: {json.dumps(DESK_SCALE[key])}" if key in DESK_SCALE else ""
        lines.append(f"  {key} = {shown}{preset}  {text}")
    return "\n".join(lines)


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("configuration (overrides --config)")
    group.add_argument("--config", type=Path, help="JSON file of configuration keys")
    for key, (default, text) in field_help().items():
        flag = "--" + key.replace("_", "-")
        meta = RunConfig.__dataclass_fields__[key].metadata
        kwargs = {"dest": key, "default": argparse.SUPPRESS, "help": f"{text} (default: {json.dumps(default)})"}
        if isinstance(default, bool):
            kwargs["action"] = argparse.BooleanOptionalAction
        elif isinstance(default, list):
            kwargs.update(nargs="+", choices=meta.get("choices"))
        else:
            kwargs["type"] = type(default)
            if "choices" in meta:
                kwargs["choices"] = meta["choices"]
        group.add_argument(flag, **kwargs)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="resnetcrowd",
        description="Multi-task crowd analysis: counting, density level and violent behaviour.",
        epilog=_config_epilog(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-q", "--quiet", action="store_true", help="only log warnings and errors")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def command(name, handler, help):
        p = sub.add_parser(name, help=help, description=help, epilog=_config_epilog(),
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.set_defaults(handler=handler)
        p.add_argument("--out", type=Path, required=True, help="output directory")
        _add_config_flags(p)
        return p

    command("gen-synth", cmd_gen_synth, "render a synthetic labelled dataset")
    p = command("train", cmd_train, "train the selected runs on every cross-validation fold")
    p.add_argument("--manifest", type=Path, required=True, help="dataset manifest.json")
    p = command("eval", cmd_eval, "cross-validated report of a training output directory")
    p.add_argument("--run-dir", type=Path, required=True, help="output directory of a train command")
    p.add_argument("--manifest", type=Path, help="override the manifest recorded at training time")
    p = command("infer", cmd_infer, "all four task outputs for one image")
    p.add_argument("--checkpoint", type=Path, required=True, help="model checkpoint directory")
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--no-heatmap", action="store_true", help="skip the heatmap PNG")
    p = command("anomaly", cmd_anomaly, "GMM outlier scores for a directory of frames")
    p.add_argument("--checkpoint", type=Path, required=True, help="model checkpoint directory")
    p.add_argument("--frames", type=Path, required=True, help="directory of frame images")
    p.add_argument("--labels", type=Path, help="CSV with frame,label columns (1 = anomalous); the GMM is fit on label 0")
    p = command("check-grads", cmd_check_grads, "finite-difference gradient checks")
    p.add_argument("--layers-only", action="store_true", help="skip the full-model check")
    p.add_argument("--inject-fault", choices=["conv2d"], help=argparse.SUPPRESS)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    cli_values = {key: getattr(args, key) for key in field_help() if hasattr(args, key)}
    try:
        file_values = load_config_file(args.config) if args.config else {}
        config = resolve_config(file_values, cli_values)
    except ConfigError as exc:
        print(f"resnetcrowd: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.handler(args, config)
    except (DataError, ManifestError, BundleError, OSError, ValueError) as exc:
        print(f"resnetcrowd: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as exc:
        print(f"resnetcrowd: training diverged: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ag.NonFiniteError, GMMFitError) as exc:
        print(f"resnetcrowd: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
