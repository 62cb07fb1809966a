"""Command-line front end: ``aliased-percept <command> ...``.

Exit status is 0 on success, 1 for usage errors and missing inputs, 2 for
runtime or numerical failures. Diagnostics go to stderr; results only to
the files named on the command line. Every output gets a sibling
``<name>.manifest.json`` recording how it was made.

Options may also come from a JSON object passed with ``--config``; its keys
use the long option names (``epochs``, ``l2``, ...) and explicit flags win.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import bayesopt as bo
from . import evalsdm as ev
from . import models as md
from . import plotting
from . import tactile_sim as ts
from .persist import atomic_write_text

log = logging.getLogger("aliased_percept")

class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage().rstrip()}")


# -- option handling ----------------------------------------------------------

# Defaults live here rather than in argparse so a config file can fill any
# option the command line leaves unset.
DEFAULTS = {
    "seed": 0, "samples": 1000, "sensor_noise": 0.05,
    "epochs": 500, "hidden": "64,64", "l2": 0.01, "lr": 1e-3, "batch": 256,
    "dropout": 0.0, "components": 5, "activation": "elu", "dtype": "float32",
    "kernel": "matern52", "length": None, "inducing": 512,
    "budget": 40, "valid_fraction": 0.2, "thresholds": 64, "runs": 10, "workers": None,
}


def _merge_config(args, parser_dests) -> None:
    cfg = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            cfg = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: not valid JSON ({exc})") from None
        if not isinstance(cfg, dict):
            raise UsageError(f"{path}: config must be a JSON object")
        unknown = sorted(k for k in cfg if k.replace("-", "_") not in parser_dests)
        if unknown:
            raise UsageError(f"{path}: unknown option(s) for {args.command}: {', '.join(unknown)}")
    for key, value in cfg.items():
        key = key.replace("-", "_")
        if getattr(args, key) is None:
            setattr(args, key, value)
    for key in parser_dests:
        if getattr(args, key) is None and key in DEFAULTS:
            setattr(args, key, DEFAULTS[key])


def _hidden(text) -> tuple:
    if isinstance(text, (list, tuple)):
        return tuple(int(v) for v in text)
    try:
        widths = tuple(int(v) for v in str(text).split(","))
    except ValueError:
        raise UsageError(f"--hidden expects comma-separated widths, got {text!r}") from None
    return widths


def _model_config(args) -> md.ModelConfig:
    try:
        return md.ModelConfig(
            hidden=_hidden(args.hidden), activation=args.activation, dtype=args.dtype,
            epochs=int(args.epochs), batch_size=int(args.batch), learning_rate=float(args.lr),
            l2=float(args.l2), dropout=float(args.dropout), n_components=int(args.components),
            kernel=args.kernel, length=None if args.length is None else float(args.length),
            inducing=int(args.inducing), prediction_rule=args.rule or "mode_density")
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid model options: {exc}") from None


def _need_file(path) -> Path:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"input file not found: {path}")
    return path


def _read_dataset(path) -> ts.TactileDataset:
    return ts.read_csv(_need_file(path))


# -- manifests ----------------------------------------------------------------


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _write_manifest(out, args, started: str, inputs: list, outputs: list, extra=None) -> None:
    snapshot = {k: v for k, v in sorted(vars(args).items()) if k not in ("func",)}
    doc = {
        "command": args.command,
        "configuration": snapshot,
        "seeds": [snapshot[k] for k in ("seed",) if snapshot.get(k) is not None],
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "tool_version": __version__,
        "started": started,
        "finished": _now(),
    }
    if extra:
        doc.update(extra)
    target = Path(out)
    atomic_write_text(target.with_name(target.name + ".manifest.json"),
                      json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")


# -- commands -----------------------------------------------------------------


def cmd_gen_data(args, started):
    noise = ts.NoiseSpec(sensor=float(args.sensor_noise))
    data = ts.generate_dataset(noise, seed=int(args.seed), samples_per_stimulus=int(args.samples))
    ts.write_csv(data, args.out)
    log.info("wrote %d rows to %s", len(data), args.out)
    _write_manifest(args.out, args, started, [], [args.out])


def cmd_filter(args, started):
    data = _read_dataset(args.data)
    out = ts.filter_no_aliasing(data, args.mode)
    ts.write_csv(out, args.out)
    log.info("kept %d of %d rows", len(out), len(data))
    _write_manifest(args.out, args, started, [args.data], [args.out], {"rows": len(out)})


def cmd_train(args, started):
    data = _read_dataset(args.data)
    config = _model_config(args)
    model = md.fit(args.model, data, args.target, config, seed=int(args.seed))
    model.save(args.out)
    log.info("trained %s for %s on %d rows", args.model, args.target, len(data))
    _write_manifest(args.out, args, started, [args.data], [args.out],
                    {"model_config": config.to_dict()})


def _split(data, fraction, seed):
    rng = np.random.default_rng([seed, 7])
    order = rng.permutation(len(data))
    n_valid = max(1, int(round(fraction * len(data))))
    valid = np.zeros(len(data), dtype=bool)
    valid[order[:n_valid]] = True
    return data.subset(~valid), data.subset(valid)


def cmd_hyperopt(args, started):
    data = _read_dataset(args.data)
    inputs = [args.data]
    if args.valid:
        train, valid = data, _read_dataset(args.valid)
        inputs.append(args.valid)
    else:
        train, valid = _split(data, float(args.valid_fraction), int(args.seed))
    base = _model_config(args)
    if args.model == "gp":
        space = bo.gp_space()

        def configure(c):
            return md.ModelConfig(**{**base.to_dict(), "kernel": c["kernel"], "length": c["length"]})
    else:
        space = bo.network_space()

        def configure(c):
            width = int(round(c["width"]))
            return md.ModelConfig(**{**base.to_dict(), "hidden": (width,) * int(c["layers"]),
                                     "dropout": c["dropout"], "l2": c["l2"]})

    y_valid = valid.target(args.target)

    def objective(c, trial_seed):
        try:
            model = md.fit(args.model, train, args.target, configure(c), seed=trial_seed)
        except ArithmeticError as exc:
            log.warning("trial diverged: %s", exc)
            return math.inf
        return ev.rms_error(model.predict(valid.X), y_valid)

    result = bo.optimize(objective, space, budget=int(args.budget), seed=int(args.seed),
                         log=log.info)
    atomic_write_text(args.out, result.to_csv(space))
    best = configure(result.best).to_dict() if math.isfinite(result.best_loss) else None
    if args.best_config:
        atomic_write_text(args.best_config, json.dumps(best, indent=2, sort_keys=True) + "\n")
    log.info("best validation RMS %.6g", result.best_loss)
    outs = [args.out] + ([args.best_config] if args.best_config else [])
    _write_manifest(args.out, args, started, inputs, outs,
                    {"best": result.best, "best_loss": result.best_loss})


def cmd_eval(args, started):
    model = md.TrainedModel.load(_need_file(args.model_file))
    data = _read_dataset(args.data)
    unc = args.uncertainty
    if unc is None:  # point models get no uncertainty column unless one is asked for
        unc = "entropy" if model.kind == "mdn5" else "none"
    preds = ev.predict_with_uncertainty(model, data, args.rule, None if unc == "none" else unc)
    atomic_write_text(args.out, preds.to_csv())
    rms = ev.rms_error(preds.prediction, preds.target)
    log.info("%s %s RMS %.6g on %d rows", model.kind, model.target, rms, len(data))
    _write_manifest(args.out, args, started, [args.model_file, args.data], [args.out],
                    {"rms": rms, "model": model.kind, "target": model.target})


def _read_predictions(path) -> ev.Predictions:
    return ev.Predictions.from_csv(_need_file(path).read_text())


def cmd_sdm_sweep(args, started):
    preds = _read_predictions(args.predictions)
    if preds.uncertainty is None:
        raise ValueError(f"{args.predictions}: no uncertainty column to sweep")
    th = ev.default_thresholds(preds.uncertainty, int(args.thresholds))
    curve = ev.sdm_sweep(preds.prediction, preds.uncertainty, preds.target, th)
    doc = curve.to_dict()
    doc["auc"] = ev.aliasing_separation(preds.uncertainty, preds.aliased) \
        if 0 < preds.aliased.sum() < len(preds) else None
    atomic_write_text(args.out, json.dumps(doc, indent=2, sort_keys=True) + "\n")
    _write_manifest(args.out, args, started, [args.predictions], [args.out])


def cmd_plot(args, started):
    src = _need_file(args.input)
    out = Path(args.out)
    if args.kind == "scatter_uncertainty":
        svg = plotting.scatter_uncertainty(_read_predictions(src), title=args.title or "")
        plotting.write_svg(out, svg)
    elif args.kind == "sdm_curve":
        try:
            doc = json.loads(src.read_text())
        except json.JSONDecodeError as exc:
            raise ValueError(f"{src}: not an SDM curve ({exc})") from None
        plotting.write_svg(out, plotting.sdm_curve(ev.SdmCurve.from_dict(doc), title=args.title or ""))
    else:
        reports = ev.reports_from_json(src.read_text())
        if out.suffix.lower() == ".csv":
            rows = [r for r in reports if args.target is None or r.target == args.target]
            if not rows:
                raise ValueError(f"{src}: no reports to tabulate")
            atomic_write_text(out, ev.table_csv(rows))
        else:
            if args.target is None:
                raise UsageError("rms_table as SVG needs --target")
            plotting.write_svg(out, plotting.rms_table(reports, args.target))
    _write_manifest(out, args, started, [src], [out])


def cmd_experiment(args, started):
    train, test = _read_dataset(args.train), _read_dataset(args.test)
    config = _model_config(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    keep = lambda kind, target, tag: kind == "mdn5" and tag == "aliasing"  # noqa: E731
    reports, models = ev.desk_experiment(train, test, int(args.runs), config,
                                         workers=args.workers and int(args.workers), keep=keep)
    atomic_write_text(out / "reports.json", ev.reports_json(reports))
    atomic_write_text(out / "table.csv", ev.table_csv(reports))
    outputs = [out / "reports.json", out / "table.csv"]
    for (kind, target, tag), kept in models.items():
        if kept:
            path = out / f"{kind}-{target}-{tag}.json"
            kept[0].save(path)
            outputs.append(path)
    _write_manifest(out / "reports.json", args, started, [args.train, args.test], outputs,
                    {"model_config": config.to_dict()})


# -- parser -------------------------------------------------------------------


def _model_options(p):
    g = p.add_argument_group("model")
    g.add_argument("--hidden", help="comma-separated hidden widths (default 64,64)")
    g.add_argument("--activation", choices=("elu", "softplus", "linear"))
    g.add_argument("--dtype", choices=("float32", "float64"))
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--l2", type=float)
    g.add_argument("--dropout", type=float)
    g.add_argument("--components", type=int)
    g.add_argument("--kernel", choices=("squared_exponential", "exponential", "matern32",
                                        "matern52", "rational_quadratic"))
    g.add_argument("--length", type=float, help="fix the GP length scale")
    g.add_argument("--inducing", type=int)
    g.add_argument("--rule", choices=md.PREDICTION_RULES, help="MDN point prediction")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="aliased-percept", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON file of option defaults")
        p.set_defaults(func=func)
        return p

    p = command("gen-data", cmd_gen_data, "simulate a tactile dataset")
    p.add_argument("--seed", type=int)
    p.add_argument("--samples", type=int, help="rows per stimulus")
    p.add_argument("--sensor-noise", type=float)
    p.add_argument("--out", required=True)

    p = command("filter", cmd_filter, "drop aliasing rows for one target family")
    p.add_argument("--data", required=True)
    p.add_argument("--mode", required=True, choices=tuple(ts.FILTER_MODES))
    p.add_argument("--out", required=True)

    p = command("train", cmd_train, "train one model")
    p.add_argument("--model", required=True, choices=md.MODEL_KINDS)
    p.add_argument("--target", required=True, choices=md.TARGETS)
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    _model_options(p)

    p = command("hyperopt", cmd_hyperopt, "Bayesian optimisation of hyperparameters")
    p.add_argument("--model", required=True, choices=md.MODEL_KINDS)
    p.add_argument("--target", required=True, choices=md.TARGETS)
    p.add_argument("--data", required=True)
    p.add_argument("--valid", help="validation CSV (default: hold out part of --data)")
    p.add_argument("--valid-fraction", type=float)
    p.add_argument("--budget", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="trial trace CSV")
    p.add_argument("--best-config", help="write the winning model config as JSON")
    _model_options(p)

    p = command("eval", cmd_eval, "predict a dataset with a trained model")
    p.add_argument("--model-file", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--rule", choices=md.PREDICTION_RULES)
    p.add_argument("--uncertainty", choices=ev.UNCERTAINTY_RULES + ("none",))
    p.add_argument("--out", required=True)

    p = command("sdm-sweep", cmd_sdm_sweep, "error and rejection rate over uncertainty thresholds")
    p.add_argument("--predictions", required=True)
    p.add_argument("--thresholds", type=int)
    p.add_argument("--out", required=True)

    p = command("plot", cmd_plot, "render a figure or table")
    p.add_argument("--kind", required=True, choices=("scatter_uncertainty", "sdm_curve", "rms_table"))
    p.add_argument("--input", required=True)
    p.add_argument("--target", choices=md.TARGETS)
    p.add_argument("--title")
    p.add_argument("--out", required=True)

    p = command("experiment", cmd_experiment, "multi-run comparison of all models and targets")
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--runs", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--out-dir", required=True)
    _model_options(p)
    return parser


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        sub = parser._subparsers._group_actions[0].choices[args.command]
        dests = {a.dest for a in sub._actions if a.dest not in ("help", "config")}
        _merge_config(args, dests)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)

    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    logging.getLogger("numba").setLevel(logging.WARNING)
    started = _now()
    t0 = time.perf_counter()
    try:
        args.func(args, started)
    except (UsageError, md.CapabilityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, ArithmeticError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    log.debug("%s finished in %.1f s", args.command, time.perf_counter() - t0)
    return 0


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
