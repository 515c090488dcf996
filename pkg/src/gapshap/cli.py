"""Command-line entry point: ``gapshap <subcommand>``.

Exit codes: 0 success, 2 invalid input, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from . import envlab, guidance, report, runner, shapley, surrogate, trainers
from ._kernels import BACKEND
from .config_space import load_space
from .errors import GapshapError, StageError, ValidationError

log = logging.getLogger("gapshap")

RESULTS = "results.jsonl"
MODEL = "model_global.npz"
MODELS_PER_ALGO = "models_per_algorithm.json"
FIT_REPORT = "fit_report.json"
ATTRIBUTIONS = "beeswarm_global.csv"
INTERACTIONS = "interactions.csv"
DEPENDENCE = "dependence.csv"
DEPENDENCE_FITS = "dependence.json"
SELECTION = "selection.json"
VALIDATION = "validation.json"
SENSITIVITIES = "sensitivities.jsonl"
BOUND = "bound.json"
DEPENDENCE_FEATURES = ("learning_rate", "gamma")
STAGE_NUMBERS = {"run": 1, "fit": 2, "explain": 3, "select": 4, "validate": 5,
                 "sensitivity": 6, "bound": 7, "report": 8}


# -- shared helpers -----------------------------------------------------------------

def _presets(args):
    return envlab.load_presets(args.physics) if getattr(args, "physics", None) else None


def _budget(args):
    return trainers.TrainBudget(args.steps, args.eval_episodes)


def _load_results(path):
    records = runner.ResultStore.load(path).canonical()
    if not records:
        raise ValidationError(f"{path}: no records")
    return records


def _manifest(results_path):
    mp = runner.manifest_path(results_path)
    if not mp.exists():
        raise ValidationError(f"{mp} not found; sensitivities need the run manifest")
    return json.loads(mp.read_text())


def _algo_name(space, algorithm_id):
    return space.algorithm(algorithm_id).name


def _fit_models(records, space, params, seed, cv_folds):
    """Global and per-algorithm surrogates over seed-averaged records."""
    agg = runner.aggregate_seeds(records)
    data = surrogate.dataset_from_records(agg, space)
    models = {"global": surrogate.fit(data, params, seed)}
    fit_doc = {"n_rows": len(data), "params": params.as_dict(), "seed": seed}
    if cv_folds and len(data) >= surrogate.MIN_CV_ROWS:
        fit_doc["global"] = surrogate.cross_validate(data, params, seed, cv_folds).as_dict()
    for algo in sorted({r.algorithm_id for r in agg}):
        sub = surrogate.dataset_from_records(agg, space, algo)
        models[str(algo)] = surrogate.fit(sub, params, seed + 1 + algo)
        if cv_folds and len(sub) >= surrogate.MIN_CV_ROWS:
            fit_doc[_algo_name(space, algo)] = surrogate.cross_validate(
                sub, params, seed + 1 + algo, cv_folds).as_dict()
    return models, fit_doc


def _save_models(models, out_dir):
    surrogate.save(models["global"], out_dir / MODEL)
    per = {k: v for k, v in models.items() if k != "global"}
    if per:
        surrogate.save_bundle(per, out_dir / MODELS_PER_ALGO)


def _load_models(path):
    path = Path(path)
    if path.is_dir():
        models = {"global": surrogate.load(path / MODEL)}
        if (path / MODELS_PER_ALGO).exists():
            models.update(surrogate.load_any(path / MODELS_PER_ALGO))
        return models
    return surrogate.load_any(path)


def _explain(models, records, space, out_dir, workers):
    """Beeswarm tables per algorithm, interaction table, dependence series."""
    agg = runner.aggregate_seeds(records)
    known = {surrogate.record_id(r) for r in agg}
    written = []
    per_algo_inter, inter_names = {}, {}
    g = models["global"]
    data = surrogate.dataset_from_records(agg, space)
    phi_all = shapley.batch_explain(g, data.X, g.background, workers).phi
    written.append(out_dir / ATTRIBUTIONS)
    report.emit_beeswarm_data(out_dir / ATTRIBUTIONS, phi_all, data.X, data.ids,
                              data.feature_names, known)
    for key in sorted(k for k in models if k != "global"):
        algo = int(key)
        name = _algo_name(space, algo)
        model = models[key]
        sub = surrogate.dataset_from_records(agg, space, algo)
        att = shapley.batch_explain(model, sub.X, model.background, workers)
        path = out_dir / f"beeswarm_{name}.csv"
        report.emit_beeswarm_data(path, att.phi, sub.X, sub.ids, sub.feature_names, known)
        written.append(path)
        per_algo_inter[name] = shapley.batch_interactions(model, sub.X, model.background)
        inter_names[name] = sub.feature_names
    if per_algo_inter:
        report.emit_interaction_matrix(out_dir / INTERACTIONS, per_algo_inter, inter_names)
        written.append(out_dir / INTERACTIONS)

    # dependence of the global attribution on learning rate and gamma, per (task, direction)
    series = []
    cells = sorted({(r.task, r.direction) for r in agg})
    for task, direction in cells:
        idx = [i for i, r in enumerate(agg) if (r.task, r.direction) == (task, direction)]
        if len(idx) < 3:
            continue
        for feature in DEPENDENCE_FEATURES:
            j = data.feature_names.index(feature)
            raw = [agg[i].hp1 if j == 1 else agg[i].hp2 for i in idx]
            series.append(report.fit_dependence(
                raw, data.X[idx, j], phi_all[idx, j], feature,
                label=f"{task}/{direction}/{feature}", ids=[data.ids[i] for i in idx]))
    if series:
        report.emit_dependence(out_dir / DEPENDENCE, series)
        report.write_json(out_dir / DEPENDENCE_FITS, {"series": [s.as_dict() for s in series]})
        written += [out_dir / DEPENDENCE, out_dir / DEPENDENCE_FITS]
    return written


def _select(model, space, n_candidates, master_seed):
    rng = np.random.default_rng(int(master_seed))
    return guidance.select_configurations(model, space, n_candidates, rng)


def _sensitivity_rows(pairs):
    out = []
    for rec, est in pairs:
        out.append({"task": rec.task, "direction": rec.direction, "config_id": rec.config_id,
                    "seed": rec.seed, **est.as_dict()})
    return out


def _write_jsonl(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(report.to_jsonable(row), sort_keys=True) + "\n")


def _read_sensitivities(path):
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                out[(d["task"], d["direction"], d["config_id"], d["seed"])] = float(d["S"])
    return out


def _distances(records, presets):
    presets = presets or envlab.default_presets()
    out = {}
    for task in sorted({r.task for r in records}):
        out[task] = envlab.physics_distance(presets.physics(task, "M"),
                                            presets.physics(task, "P"), presets)
    return out


def _bound(records, sens, presets, soft_threshold):
    return guidance.check_bound(records, sens, _distances(records, presets), soft_threshold)


# -- subcommands ----------------------------------------------------------------------

def cmd_space(args):
    space = load_space(args.space)
    print(json.dumps(space.to_dict(), indent=2, sort_keys=True))
    return 0


def _run_spec(args):
    return runner.RunSpec(tuple(args.tasks), tuple(args.directions), args.n_configs,
                          args.seeds, _budget(args), args.master_seed)


def cmd_run(args):
    space = load_space(args.space)
    out = Path(args.out or Path(args.out_dir) / RESULTS)
    out.parent.mkdir(parents=True, exist_ok=True)
    recs = runner.run_experiments(_run_spec(args), space, out, workers=args.workers,
                                  presets=_presets(args))
    print(f"{len(recs)} records -> {out}")
    return 0


def cmd_fit(args):
    space = load_space(args.space)
    records = _load_results(args.results)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    models, doc = _fit_models(records, space, surrogate.ForestParams(args.trees),
                              args.master_seed, args.cv_folds)
    _save_models(models, out_dir)
    report.write_json(out_dir / FIT_REPORT, doc)
    if "global" in doc:
        print(f"global surrogate cv r2 = {doc['global']['r2']:.4f}")
    return 0


def cmd_explain(args):
    space = load_space(args.space)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for p in _explain(_load_models(args.model), _load_results(args.results), space, out_dir,
                      args.workers):
        print(p)
    return 0


def cmd_interact(args):
    space = load_space(args.space)
    models = _load_models(args.model)
    agg = runner.aggregate_seeds(_load_results(args.results))
    mats, names = {}, {}
    for key in sorted(k for k in models if k != "global"):
        sub = surrogate.dataset_from_records(agg, space, int(key))
        name = _algo_name(space, int(key))
        mats[name] = shapley.batch_interactions(models[key], sub.X, models[key].background)
        names[name] = sub.feature_names
    if not mats:
        raise ValidationError("interactions need per-algorithm models")
    out = Path(args.out or Path(args.out_dir) / INTERACTIONS)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.emit_interaction_matrix(out, mats, names)
    print(out)
    return 0


def cmd_select(args):
    space = load_space(args.space)
    model = _load_models(args.model)["global"]
    sel = _select(model, space, args.candidates, args.master_seed)
    out = Path(args.out or Path(args.out_dir) / SELECTION)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.write_json(out, sel.as_dict())
    print(f"best predicted {sel.best[1]:.4f}, worst predicted {sel.worst[1]:.4f}")
    return 0


def cmd_validate(args):
    space = load_space(args.space)
    sel = guidance.SelectionReport.from_dict(json.loads(Path(args.selection).read_text()))
    val = guidance.validate_selection(sel, _load_results(args.results), space)
    out = Path(args.out or Path(args.out_dir) / VALIDATION)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.write_json(out, val.as_dict())
    print(f"mean actual gap best {val.mean_actual_best:.4f} worst {val.mean_actual_worst:.4f} "
          f"consistent={val.directional_consistent}")
    return 0


def cmd_sensitivity(args):
    records = _load_results(args.results)
    pairs = guidance.sweep_sensitivities(records, _manifest(args.results), args.delta_rel,
                                         args.episodes, 0, args.workers)
    out = Path(args.out or Path(args.out_dir) / SENSITIVITIES)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_jsonl(out, _sensitivity_rows(pairs))
    print(out)
    return 0


def cmd_bound(args):
    records = _load_results(args.results)
    manifest = _manifest(args.results)
    presets = envlab.presets_from_dict(manifest["presets"])
    rep = _bound(records, _read_sensitivities(args.sensitivities), presets, args.soft_threshold)
    out = Path(args.out or Path(args.out_dir) / BOUND)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.write_json(out, rep.as_dict())
    print(f"spearman {rep.spearman:.4f} over {rep.n} records; "
          f"bound satisfied for {rep.satisfied_fraction:.1%}")
    for flag in rep.flags:
        print(f"FLAG: {flag}")
    return 0


def cmd_report(args):
    bundle = Path(args.bundle or args.out_dir)
    if not bundle.is_dir():
        raise ValidationError(f"{bundle} is not a directory")
    for p in report.render_plots(bundle, args.x_range):
        print(p)
    doc = report.write_bundle_manifest(bundle, {"master_seed": args.master_seed})
    print(f"bundle hash {doc['bundle_hash']}")
    return 0


def _stage(name, fn, *a, **kw):
    log.info("stage %s", name)
    try:
        return fn(*a, **kw)
    except StageError:
        raise
    except (GapshapError, ValueError, OSError, RuntimeError) as exc:
        raise StageError(f"stage {STAGE_NUMBERS[name]} {name}", str(exc)) from exc


def cmd_pipeline(args):
    out_dir = Path(args.out_dir)
    # stage 1 checks its inputs before any output exists
    space = _stage("run", load_space, args.space)
    presets = _stage("run", _presets, args)
    spec = _stage("run", _run_spec, args)
    fresh = not out_dir.exists()
    out_dir.mkdir(parents=True, exist_ok=True)
    results = out_dir / RESULTS
    try:
        records = _stage("run", runner.run_experiments, spec, space, results,
                         workers=args.workers, presets=presets)
    except StageError:
        if fresh and not results.exists():
            shutil.rmtree(out_dir, ignore_errors=True)
        raise

    params = surrogate.ForestParams(args.trees)
    models, fit_doc = _stage("fit", _fit_models, records, space, params, args.master_seed,
                             args.cv_folds)
    _stage("fit", _save_models, models, out_dir)
    report.write_json(out_dir / FIT_REPORT, fit_doc)

    _stage("explain", _explain, models, records, space, out_dir, args.workers)

    sel = _stage("select", _select, models["global"], space, args.candidates, args.master_seed)
    report.write_json(out_dir / SELECTION, sel.as_dict())

    val = _stage("validate", guidance.validate_selection, sel, records, space)
    report.write_json(out_dir / VALIDATION, val.as_dict())

    summary = {"fit": fit_doc.get("global"), "validation": {
        "mean_actual_best": val.mean_actual_best, "mean_actual_worst": val.mean_actual_worst,
        "directional_consistent": val.directional_consistent}}
    if args.bound:
        manifest = json.loads(runner.manifest_path(results).read_text())
        pairs = _stage("sensitivity", guidance.sweep_sensitivities, records, manifest,
                       args.delta_rel, args.episodes, 0, args.workers)
        _write_jsonl(out_dir / SENSITIVITIES, _sensitivity_rows(pairs))
        sens = {guidance.record_key(r): est for r, est in pairs}
        rep = _stage("bound", _bound, records, sens, presets, args.soft_threshold)
        report.write_json(out_dir / BOUND, rep.as_dict())
        summary["bound"] = {"spearman": rep.spearman, "flags": rep.flags,
                            "per_cell_spearman": rep.per_cell}

    def finish():
        report.render_plots(out_dir, args.x_range)
        settings = {k: v for k, v in sorted(vars(args).items())
                    if k not in ("func", "out_dir", "workers", "verbose")}
        settings["backend"] = BACKEND
        return report.write_bundle_manifest(out_dir, settings)

    report.write_json(out_dir / "summary.json", summary)
    doc = _stage("report", finish)
    print(json.dumps(report.to_jsonable(summary), sort_keys=True))
    print(f"bundle hash {doc['bundle_hash']}")
    return 0


# -- argument parsing -------------------------------------------------------------------

def _global_flags(parser, suppress):
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--master-seed", type=int, default=d(0))
    parser.add_argument("--workers", type=int, default=d(1))
    parser.add_argument("--out-dir", default=d("gapshap_out"))
    parser.add_argument("-v", "--verbose", action="store_true", default=d(False))


def _run_flags(p):
    p.add_argument("--space", default=None, help="configuration space file (YAML or JSON)")
    p.add_argument("--physics", default=None, help="physics presets file")
    p.add_argument("--tasks", nargs="+", default=list(envlab.TASKS), choices=envlab.TASKS)
    p.add_argument("--directions", nargs="+", default=list(runner.DIRECTIONS))
    p.add_argument("--n-configs", type=int, default=25, help="configurations per algorithm")
    p.add_argument("--seeds", type=int, default=2, help="training seeds per configuration")
    p.add_argument("--steps", type=int, default=20_000, help="environment steps per run")
    p.add_argument("--eval-episodes", type=int, default=20)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    parser = argparse.ArgumentParser(prog="gapshap", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.set_defaults(func=fn)
        return p

    p = add("space", cmd_space, "validate and print a configuration space")
    p.add_argument("--space", default=None)

    p = add("run", cmd_run, "run the training and transfer sweep")
    _run_flags(p)
    p.add_argument("--out", default=None, help="results file (default <out-dir>/results.jsonl)")

    p = add("fit", cmd_fit, "fit global and per-algorithm surrogates")
    p.add_argument("--results", required=True)
    p.add_argument("--space", default=None)
    p.add_argument("--trees", type=int, default=200)
    p.add_argument("--cv-folds", type=int, default=5)

    for name, fn, help_ in (("explain", cmd_explain, "attribution tables"),
                            ("interact", cmd_interact, "interaction table")):
        p = add(name, fn, help_)
        p.add_argument("--model", required=True, help="model file, bundle index or fit directory")
        p.add_argument("--results", required=True)
        p.add_argument("--space", default=None)
        if name == "interact":
            p.add_argument("--out", default=None)

    p = add("select", cmd_select, "best and worst predicted configurations")
    p.add_argument("--model", required=True)
    p.add_argument("--space", default=None)
    p.add_argument("--candidates", type=int, default=guidance.DEFAULT_CANDIDATES)
    p.add_argument("--out", default=None)

    p = add("validate", cmd_validate, "check a selection against measured records")
    p.add_argument("--selection", required=True)
    p.add_argument("--results", required=True)
    p.add_argument("--space", default=None)
    p.add_argument("--out", default=None)

    p = add("sensitivity", cmd_sensitivity, "physics sensitivity of every trained policy")
    p.add_argument("--results", required=True)
    p.add_argument("--delta-rel", type=float, default=0.01)
    p.add_argument("--episodes", type=int, default=20)
    p.add_argument("--out", default=None)

    p = add("bound", cmd_bound, "compare gaps with sensitivity times physics distance")
    p.add_argument("--results", required=True)
    p.add_argument("--sensitivities", required=True)
    p.add_argument("--soft-threshold", type=float, default=0.2)
    p.add_argument("--out", default=None)

    p = add("report", cmd_report, "render plots and write the bundle manifest")
    p.add_argument("--bundle", default=None)
    p.add_argument("--x-range", type=float, nargs=2, default=None,
                   help="pin the beeswarm attribution axis")

    p = add("pipeline", cmd_pipeline, "run every stage and write a report bundle")
    _run_flags(p)
    p.add_argument("--trees", type=int, default=200)
    p.add_argument("--cv-folds", type=int, default=5)
    p.add_argument("--candidates", type=int, default=guidance.DEFAULT_CANDIDATES)
    p.add_argument("--bound", action="store_true", help="add the sensitivity and bound stages")
    p.add_argument("--delta-rel", type=float, default=0.01)
    p.add_argument("--episodes", type=int, default=20)
    p.add_argument("--soft-threshold", type=float, default=0.2)
    p.add_argument("--x-range", type=float, nargs=2, default=None)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2 if isinstance(exc.__cause__, ValidationError) else 3
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (GapshapError, OSError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
