"""Command-line pipeline: synth -> train -> eval/basins/profile -> longitudinal -> plotdata.

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 validation error.
Failures print one JSON object ``{"error": <category>, "message": ...}`` on stderr.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import jsonschema
import numpy as np

from . import checkpoint, geometry, inr, io, longitudinal, phantom, training
from .errors import (ConfigurationError, FormatError, InputError, TissueManifoldError)
from .tables import VoxelTable, read_voxel_table, write_voxel_table

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_VALIDATION = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _manifest_path(out: Path) -> Path:
    return out / "manifest.json" if out.suffix == "" else out.with_suffix(".manifest.json")


def _floats(text: str) -> np.ndarray:
    try:
        return np.array([float(v) for v in text.split(",")], dtype=np.float64)
    except ValueError:
        raise ConfigurationError(f"expected comma-separated numbers, got {text!r}") from None


# --------------------------------------------------------------- run config

def _option_schema(parser: argparse.ArgumentParser) -> dict:
    props = {}
    for action in parser._actions:
        if action.dest in ("help", "config") or not action.option_strings:
            continue
        props[action.dest] = {}
    return {"type": "object", "additionalProperties": False, "properties": props}


def _apply_config(parser, args, argv_dests):
    """Fill options from ``--config`` JSON; flags given on the command line win."""
    if not getattr(args, "config", None):
        return args
    try:
        cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{args.config}: malformed JSON ({exc})") from None
    try:
        jsonschema.validate(cfg, _option_schema(parser))
    except jsonschema.ValidationError as exc:
        raise FormatError(f"run config rejected: {exc.message}") from None
    for key, value in cfg.items():
        if key not in argv_dests:
            setattr(args, key, value)
    return args


# ------------------------------------------------------------------ commands

SCENARIOS = ("stable", "recurrence", "two-mode", "gaussian")


def cmd_synth(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if args.spec:
        spec = phantom.ScenarioSpec.from_dict(json.loads(Path(args.spec).read_text()))
    elif args.scenario == "stable":
        spec = phantom.stable_scenario(n=args.n, n_followup=args.n_followup, seed=args.seed)
    elif args.scenario == "recurrence":
        spec = phantom.recurrence_scenario(n=args.n, n_followup=args.n_followup, seed=args.seed)
    elif args.scenario == "two-mode":
        spec = phantom.ScenarioSpec(phantom.two_mode(), (), n=args.n, seed=args.seed)
    else:
        spec = phantom.ScenarioSpec(phantom.single_gaussian(np.zeros(5), 1.0), (), n=args.n,
                                    seed=args.seed, healthy="c0", tumour="c0")
    if args.scenario == "gaussian" and not args.spec:
        table = phantom.sample(spec.baseline, spec.n, spec.seed)
        write_voxel_table(out / "t0.csv", table)
        written.append(out / "t0.csv")
    else:
        sc = phantom.build_scenario(spec)
        write_voxel_table(out / "t0.csv", sc.baseline)
        written.append(out / "t0.csv")
        for label, table in zip(sc.labels, sc.followups):
            write_voxel_table(out / f"{label}.csv", table)
            written.append(out / f"{label}.csv")
        rois = {name: {"rows": rows.tolist()} for name, rows in sc.rois.items()}
        written.append(io.write_json(out / "rois.json", {"version": 1, **rois}))
        written.append(io.write_json(out / "expectations.json",
                                     {"version": 1, "timepoints": sc.expectations}))
    written.append(io.write_json(out / "scenario.json", spec.to_dict()))
    io.write_manifest(_manifest_path(out), "synth", vars_for_manifest(args), [], written)
    return EXIT_OK


_PATH_OPTIONS = {"out", "inp", "model", "baseline", "roi", "followups", "plotdata", "spec"}


def vars_for_manifest(args) -> dict:
    """Options as recorded in a manifest; file paths are reduced to their names so
    that identical runs in different directories give identical manifests."""
    out = {}
    for key, value in sorted(vars(args).items()):
        if key in ("func", "config"):
            continue
        if key in _PATH_OPTIONS and value is not None:
            value = [Path(v).name for v in value] if isinstance(value, list) else Path(value).name
        out[key] = value
    return out


def _train_config(args) -> training.TrainConfig:
    return training.TrainConfig(
        sigma=args.sigma, epochs=args.epochs, batch_size=args.batch_size,
        learning_rate=args.lr, seed=args.seed, normalization=args.normalization,
        m=args.m, widths=tuple(args.widths), omega0=args.omega0, freq_std=args.freq_std,
        schedule=args.schedule, ema=args.ema,
    )


def cmd_train(args):
    cfg = _train_config(args)
    table = read_voxel_table(args.inp)
    model, trace = training.train(VoxelTable(table.masked_values(), table.channels), cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    checkpoint.save_checkpoint(out, model)
    trace_path = io.write_json(out.with_suffix(".trace.json"), {
        "version": 1, "epoch_loss": trace.epoch_loss, "rng_digest": trace.rng_digest})
    print(f"trained in {trace.seconds:.1f}s, final loss {trace.epoch_loss[-1]:.4f}",
          file=sys.stderr)
    io.write_manifest(_manifest_path(out), "train", cfg.to_dict(), [args.inp], [out, trace_path])
    return EXIT_OK


def cmd_eval(args):
    model = checkpoint.load_checkpoint(args.model)
    table = read_voxel_table(args.inp)
    ev = inr.energy_batch(model, table.values, energy=True, score=True,
                          laplacian=args.laplacian, raw=not args.normalized)
    header = ["energy"] + [f"score_{c}" for c in table.channels]
    cols = [ev.energy[:, None], ev.score]
    if args.laplacian:
        header.append("laplacian")
        cols.append(ev.laplacian[:, None])
    data = np.hstack(cols)
    lines = [",".join(header)] + [",".join(repr(float(v)) for v in row) for row in data]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    io.write_manifest(_manifest_path(out), "eval", vars_for_manifest(args),
                      [args.model, args.inp], [out])
    return EXIT_OK


def _flow(args) -> geometry.FlowConfig:
    return geometry.FlowConfig(step_size=args.step_size, max_steps=args.max_steps,
                               grad_tol=args.grad_tol, merge_radius=args.merge_radius)


def cmd_basins(args):
    model = checkpoint.load_checkpoint(args.model)
    table = read_voxel_table(args.inp)
    u = model.normalize(table.masked_values())
    rng = np.random.default_rng(args.seed)
    rows = np.sort(rng.choice(u.shape[0], size=min(args.n_seeds, u.shape[0]), replace=False))
    basins = geometry.find_basins(model, u[rows], _flow(args))
    obj = basins.to_dict()
    obj["seed_rows"] = rows.tolist()
    obj["minima_raw"] = [model.denormalize(loc).tolist() for loc in basins.locations]
    out = io.write_json(args.out, obj)
    io.write_manifest(_manifest_path(Path(args.out)), "basins", vars_for_manifest(args),
                      [args.model, args.inp], [out])
    return EXIT_OK


def _load_rois(path) -> dict:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: malformed JSON ({exc})") from None
    schema = {
        "type": "object",
        "additionalProperties": False,
        "required": ["healthy", "tumour"],
        "properties": {"version": {"const": 1}, "healthy": {"type": "object"},
                       "tumour": {"type": "object"}},
    }
    try:
        jsonschema.validate(obj, schema)
    except jsonschema.ValidationError as exc:
        raise FormatError(f"ROI file rejected: {exc.message}") from None
    return {name: longitudinal.ROI.from_dict(name, obj[name]) for name in ("healthy", "tumour")}


def cmd_profile(args):
    model = checkpoint.load_checkpoint(args.model)
    inputs = [args.model]
    if args.p0 is not None and args.p1 is not None:
        p0, p1 = model.normalize(_floats(args.p0)), model.normalize(_floats(args.p1))
    elif args.baseline and args.roi:
        table = read_voxel_table(args.baseline)
        rois = _load_rois(args.roi)
        u = model.normalize(table.values)
        p0 = longitudinal.roi_centroid(u, rois["healthy"].resolve(table))
        p1 = longitudinal.roi_centroid(u, rois["tumour"].resolve(table))
        inputs += [args.baseline, args.roi]
    else:
        raise ConfigurationError("give --p0 and --p1, or --baseline and --roi")
    prof = geometry.line_profile(model, p0, p1, args.K, args.margin)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(prof.to_csv(), encoding="utf-8")
    summary = {"version": 1, "barrier": geometry.barrier_height(prof),
               "length": prof.length}
    side = io.write_json(out.with_suffix(".json"), summary)
    io.write_manifest(_manifest_path(out), "profile", vars_for_manifest(args), inputs,
                      [out, side])
    return EXIT_OK


def _run_longitudinal(args):
    model = checkpoint.load_checkpoint(args.model)
    baseline = read_voxel_table(args.baseline)
    rois = _load_rois(args.roi)
    followups = [read_voxel_table(p) for p in args.followups]
    labels = args.labels or [Path(p).stem for p in args.followups]
    cfg = longitudinal.LongitudinalConfig(
        flow=_flow(args), n_seeds=args.n_seeds, n_perm=args.n_perm, seed=args.seed,
        reuse_baseline_norm=not args.per_scan_norm)
    report = longitudinal.run_longitudinal(model, baseline, rois, followups, labels, cfg)
    inputs = [args.model, args.baseline, args.roi, *args.followups]
    return report, inputs


def cmd_longitudinal(args):
    report, inputs = _run_longitudinal(args)
    out = io.write_report(args.out, report)
    outputs = [out]
    if args.plotdata:
        outputs += io.write_plotdata(args.plotdata, report)
    io.write_manifest(_manifest_path(Path(args.out)), "longitudinal", vars_for_manifest(args),
                      inputs, outputs)
    return EXIT_OK


def cmd_plotdata(args):
    report, inputs = _run_longitudinal(args)
    outputs = io.write_plotdata(args.out, report)
    io.write_manifest(Path(args.out) / "manifest.json", "plotdata", vars_for_manifest(args),
                      inputs, outputs)
    return EXIT_OK


# -------------------------------------------------------------------- parser

def _add_flow(p):
    d = geometry.FlowConfig()
    p.add_argument("--step-size", type=float, default=d.step_size)
    p.add_argument("--max-steps", type=int, default=d.max_steps)
    p.add_argument("--grad-tol", type=float, default=d.grad_tol)
    p.add_argument("--merge-radius", type=float, default=d.merge_radius)


def _add_longitudinal(p, out_help):
    p.add_argument("--model", required=True)
    p.add_argument("--baseline", required=True)
    p.add_argument("--roi", required=True, help="ROI JSON with 'healthy' and 'tumour'")
    p.add_argument("--followups", nargs="*", default=[])
    p.add_argument("--labels", nargs="*")
    p.add_argument("--out", required=True, help=out_help)
    p.add_argument("--n-seeds", type=int, default=2000)
    p.add_argument("--n-perm", type=int, default=10_000)
    norm = p.add_mutually_exclusive_group()
    norm.add_argument("--reuse-baseline-norm", dest="per_scan_norm", action="store_false",
                      help="map follow-ups through the model's baseline statistics (default)")
    norm.add_argument("--per-scan-norm", dest="per_scan_norm", action="store_true",
                      help="normalize each follow-up with its own robust statistics")
    _add_flow(p)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tissue-manifold", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def command(name, func, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--config", help="JSON file with option values (unknown keys rejected)")
        p.set_defaults(func=func)
        return p

    p = command("synth", cmd_synth, "write a phantom scenario as voxel-table CSVs")
    p.add_argument("--scenario", choices=SCENARIOS, default="stable")
    p.add_argument("--spec", help="scenario spec JSON (overrides --scenario)")
    p.add_argument("--n", type=int, default=50_000)
    p.add_argument("--n-followup", type=int)
    p.add_argument("--out", required=True)

    t = training.TrainConfig()
    p = command("train", cmd_train, "fit an energy model by denoising score matching")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sigma", type=float, default=t.sigma)
    p.add_argument("--epochs", type=int, default=t.epochs)
    p.add_argument("--batch-size", type=int, default=t.batch_size)
    p.add_argument("--lr", type=float, default=t.learning_rate)
    p.add_argument("--normalization", choices=("robust", "zscore", "none"),
                   default=t.normalization)
    p.add_argument("--m", type=int, default=t.m)
    p.add_argument("--widths", type=int, nargs="+", default=list(t.widths))
    p.add_argument("--omega0", type=float, default=t.omega0)
    p.add_argument("--freq-std", type=float, default=t.freq_std)
    p.add_argument("--schedule", choices=("constant", "cosine"), default=t.schedule)
    p.add_argument("--ema", type=float, default=t.ema,
                   help="parameter-averaging decay in [0, 1); 0 keeps the last iterate")

    p = command("eval", cmd_eval, "energy, score and Laplacian for every voxel")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--laplacian", action="store_true")
    p.add_argument("--normalized", action="store_true",
                   help="inputs are already in model coordinates")

    p = command("basins", cmd_basins, "detect basin attractors from seed voxels")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n-seeds", type=int, default=2000)
    _add_flow(p)

    p = command("profile", cmd_profile, "energy profile along a segment")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--p0", help="comma-separated raw start point")
    p.add_argument("--p1", help="comma-separated raw end point")
    p.add_argument("--baseline")
    p.add_argument("--roi")
    p.add_argument("--K", type=int, default=512)
    p.add_argument("--margin", type=float, default=0.1)

    p = command("longitudinal", cmd_longitudinal, "evaluate follow-ups against a baseline model")
    _add_longitudinal(p, "report JSON path")
    p.add_argument("--plotdata", help="also write plot CSVs to this directory")

    p = command("plotdata", cmd_plotdata, "write projection/energy plot CSVs")
    _add_longitudinal(p, "output directory")
    return parser


def _given_dests(parser, argv) -> set:
    given = set()
    sub = None
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            sub = action
    if sub is None or not argv or argv[0] not in sub.choices:
        return given
    sp = sub.choices[argv[0]]
    flags = {s: a.dest for a in sp._actions for s in a.option_strings}
    for tok in argv[1:]:
        key = tok.split("=", 1)[0]
        if key in flags:
            given.add(flags[key])
    return given


def _fail(category: str, message: str, code: int) -> int:
    print(json.dumps({"error": category, "message": message}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args = _apply_config(parser._subparsers._group_actions[0].choices[args.command], args,
                             _given_dests(parser, argv))
    except UsageError as exc:
        return _fail("usage", str(exc), EXIT_USAGE)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except FormatError as exc:
        return _fail(exc.category, str(exc), EXIT_VALIDATION)
    try:
        return args.func(args)
    except (ConfigurationError, InputError, FormatError) as exc:
        return _fail(exc.category, str(exc), EXIT_VALIDATION)
    except TissueManifoldError as exc:
        return _fail(exc.category, str(exc), EXIT_RUNTIME)
    except OSError as exc:
        return _fail("io", str(exc), EXIT_RUNTIME)


if __name__ == "__main__":
    sys.exit(main())
