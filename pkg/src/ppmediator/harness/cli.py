"""Command line driver: ``ppmediator <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ..features import FeatureLayout, SimilarityTable, layout_for
from ..mediator import TrainConfig, infer_phi, load_model, save_model, train, argmin_pair
from ..parser import default_grammar_text, load_grammar
from ..scenegen import (DEFAULT_PREPOSITIONS, GenConfig, filter_ambiguous, generate_dataset, read_categories,
                        read_scenes, write_categories, write_scenes)
from . import experiments as ex
from . import plots
from .data import HypConfig, build_records, generate_hypotheses

log = logging.getLogger("ppmediator")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _names(text: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _beside(args, attr: str, name: str) -> Path:
    """Explicit flag value, else the file of that name next to --scenes."""
    val = getattr(args, attr, None)
    if val:
        return Path(val)
    if not args.scenes:
        raise SystemExit(f"--{attr.replace('_', '-')} or --scenes is required")
    return Path(args.scenes).parent / name


def _out(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _grammar(args):
    path = _beside(args, "grammar", "grammar.txt") if (args.grammar or args.scenes) else None
    if path is not None and path.exists():
        return load_grammar(path.read_text())
    return load_grammar(default_grammar_text())


def _layout(args) -> FeatureLayout:
    return FeatureLayout.from_json(json.loads(_beside(args, "layout", "layout.json").read_text()))


def _records(args, layout: FeatureLayout):
    scenes = read_scenes(args.scenes)
    sims = SimilarityTable.read(_beside(args, "sims", "sims.tsv"))
    hyps = Path(args.hyps_dir) if args.hyps_dir else Path(args.scenes).parent
    return build_records(scenes, hyps / "parses.jsonl", hyps / "seg_hyps.jsonl", layout, sims)


def _cv_config(args) -> ex.CVConfig:
    return ex.CVConfig(alpha=args.alpha, epochs=args.epochs, seed=args.seed, mask=_names(args.mask),
                       standardize=args.standardize)


def _grid(args) -> ex.Grid:
    return ex.Grid(_ints(args.my), _ints(args.mz), _floats(args.c_grid))


def cmd_gen_data(args) -> None:
    out = _out(args)
    grammar_text = Path(args.grammar).read_text() if args.grammar else default_grammar_text()
    grammar = load_grammar(grammar_text)
    preps = _names(args.prepositions) if args.prepositions else DEFAULT_PREPOSITIONS
    cfg = GenConfig(prepositions=preps, grid=(args.height, args.width), grammar=grammar,
                    synonym_noise=args.synonym_noise)
    scenes = generate_dataset(cfg, args.n, args.seed)
    kept, stats = filter_ambiguous(scenes, grammar, args.k, preps)
    write_scenes(out / "scenes.jsonl", kept)
    write_categories(out / "categories.tsv", cfg.categories)
    SimilarityTable.from_categories(cfg.categories).write(out / "sims.tsv")
    layout = layout_for(cfg.categories, preps, use_category_presence=not args.no_presence)
    (out / "layout.json").write_text(json.dumps(layout.to_json(), indent=1) + "\n")
    (out / "grammar.txt").write_text(grammar_text)
    (out / "ambiguity.json").write_text(json.dumps(stats.as_dict(), indent=1) + "\n")
    print(f"wrote {len(kept)} scenes to {out} (ambiguity rate {stats.ambiguity_rate})")


def cmd_gen_hyps(args) -> None:
    out = Path(args.out_dir) if args.out_dir else Path(args.scenes).parent
    scenes = read_scenes(args.scenes)
    n_labels = len(read_categories(_beside(args, "categories", "categories.tsv")))
    cfg = HypConfig(k=args.k, M=args.m, noise=args.noise, lam=args.lam, potts=args.potts, seed=args.seed)
    p, s = generate_hypotheses(scenes, _grammar(args), n_labels, cfg, out)
    print(f"wrote {p} and {s}")


def cmd_train(args) -> None:
    layout = _layout(args)
    records = _records(args, layout)
    my, mz = max(_ints(args.my)), max(_ints(args.mz))
    cfg = TrainConfig(C=_floats(args.c_grid)[0], alpha=args.alpha, epochs=args.epochs, seed=args.seed,
                      mask=_names(args.mask), standardize=args.standardize)
    model = train([r.instance(args.alpha, my, mz) for r in records], layout, cfg)
    path = _out(args) / "model.json"
    save_model(path, model)
    print(f"trained on {len(records)} scenes, final objective {model.trace[-1]:.6f}; wrote {path}")


def cmd_eval(args) -> None:
    layout = _layout(args)
    records = _records(args, layout)
    model = load_model(args.model, layout)
    my, mz = max(_ints(args.my)), max(_ints(args.mz))
    choices = {
        "indep": [ex.PairIndex(1, 1)] * len(records),
        "mediator": [infer_phi(model, r.phi[:my, :mz]) for r in records],
        "oracle": [argmin_pair(r.instance(args.alpha, my, mz).loss) for r in records],
    }
    rows = []
    for method, pairs in choices.items():
        seg, parse = ex._evaluate(records, pairs)
        rows.append(ex.MetricsRow(method, "all", seg, parse, my, mz, model.cfg.C))
    text = ex.metrics_csv(ex.CVResult(rows, [], []))
    (_out(args) / "metrics.csv").write_text(text)
    sys.stdout.write(text)


def _write_cv(out: Path, res: ex.CVResult) -> None:
    (out / "metrics.csv").write_text(ex.metrics_csv(res))
    (out / "val_surface.csv").write_text(ex.surface_csv(res))
    tests = ex.paired_differences(res)
    (out / "paired_tests.csv").write_text(ex.rows_to_csv(
        ["granularity", "metric", "n", "mean_diff", "t_stat"],
        [(t["granularity"], t["metric"], t["n"], t["mean_diff"], t["t_stat"]) for t in tests]))
    (out / "outcomes.csv").write_text(ex.rows_to_csv(
        ["fold", "scene_id", "method", "i", "j", "jaccard", "ppar_acc", "preps", "hits"],
        [(o.fold, o.scene_id, o.method, o.pair.i, o.pair.j, o.seg, o.parse, " ".join(o.preps),
          " ".join(str(int(h)) for h in o.hits)) for o in res.outcomes]))
    (out / "fold_audit.json").write_text(json.dumps(res.audit, indent=1) + "\n")
    plots.plot_val_surface(out / "val_surface.png", res.surface)


def cmd_cv(args) -> None:
    layout = _layout(args)
    res = ex.cross_validate(_records(args, layout), _grid(args), _cv_config(args), layout)
    out = _out(args)
    _write_cv(out, res)
    sys.stdout.write(ex.metrics_csv(ex.CVResult([r for r in res.rows if r.fold == "mean"], [], [])))


def cmd_ablate(args) -> None:
    layout = _layout(args)
    groups = _names(args.groups) if args.groups else tuple(ex.ABLATION_GROUPS)
    rows = ex.ablate_features(_records(args, layout), groups, _grid(args), _cv_config(args), layout)
    out = _out(args)
    text = ex.rows_to_csv(["ablation", "jaccard", "ppar_acc", "average"],
                          [(name, r.seg, r.parse, r.average) for name, r in rows])
    (out / "ablation.csv").write_text(text)
    plots.plot_bars(out / "ablation.png", [n for n, _ in rows],
                    {"Jaccard": [r.seg for _, r in rows], "attachment accuracy": [r.parse for _, r in rows]},
                    "accuracy")
    sys.stdout.write(text)


def cmd_sweep_alpha(args) -> None:
    layout = _layout(args)
    rows = ex.sweep_alpha(_records(args, layout), _floats(args.alphas), _grid(args), _cv_config(args), layout)
    out = _out(args)
    text = ex.rows_to_csv(["alpha", "jaccard", "ppar_acc"], [(r["alpha"], r["seg"], r["parse"]) for r in rows])
    (out / "alpha_sweep.csv").write_text(text)
    plots.plot_alpha_sweep(out / "alpha_sweep.png", rows)
    sys.stdout.write(text)


def _read_outcomes(path: Path) -> list[ex.Outcome]:
    import csv

    out = []
    with open(path) as f:
        for row in csv.DictReader(f):
            out.append(ex.Outcome(int(row["fold"]), row["scene_id"], row["method"],
                                  ex.PairIndex(int(row["i"]), int(row["j"])), float(row["jaccard"]),
                                  float(row["ppar_acc"]), [h == "1" for h in row["hits"].split()],
                                  row["preps"].split()))
    return out


def cmd_report_preps(args) -> None:
    out = _out(args)
    src = Path(args.outcomes) if args.outcomes else out / "outcomes.csv"
    if src.exists():
        outcomes = _read_outcomes(src)
    else:
        layout = _layout(args)
        res = ex.cross_validate(_records(args, layout), _grid(args), _cv_config(args), layout)
        _write_cv(out, res)
        outcomes = res.outcomes
    preps = _names(args.prepositions) if args.prepositions else None
    rows, notes = ex.report_per_preposition(outcomes, preps)
    text = ex.rows_to_csv(["preposition", "count", "mediator_acc", "indep_acc", "gain"],
                          [(r.preposition, r.count, r.accuracy, r.indep_accuracy, r.gain) for r in rows])
    (out / "prep_report.csv").write_text(text)
    if rows:
        plots.plot_bars(out / "prep_report.png", [r.preposition for r in rows],
                        {"mediator": [r.accuracy for r in rows], "indep": [r.indep_accuracy for r in rows]},
                        "attachment accuracy")
    sys.stdout.write(text)
    for n in notes:
        print(f"note: {n}", file=sys.stderr)


def cmd_viz_prep(args) -> None:
    layout = _layout(args)
    model = load_model(args.model, layout)
    grid = ex.viz_preposition(model, args.prep, (args.height, args.width))
    out = _out(args)
    stem = f"viz_{args.prep}"
    (out / f"{stem}.csv").write_text(
        "".join(",".join(f"{v:.6f}" for v in row) + "\n" for row in grid))
    plots.write_ppm(out / f"{stem}.ppm", grid)
    plots.plot_heatmap(out / f"{stem}.png", grid, args.prep)
    print(f"wrote {out / stem}.csv/.ppm/.png")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--scenes", help="scenes.jsonl; sibling files are used as defaults")
    common.add_argument("--grammar")
    common.add_argument("--sims")
    common.add_argument("--layout")
    common.add_argument("--categories")
    common.add_argument("--hyps-dir", help="directory holding parses.jsonl and seg_hyps.jsonl")
    common.add_argument("--out-dir", default=".")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("-v", "--verbose", action="store_true")

    train_opts = argparse.ArgumentParser(add_help=False)
    train_opts.add_argument("--my", default="1,2,5,10", help="comma separated M_y values")
    train_opts.add_argument("--mz", default="1,3,5,10", help="comma separated M_z values")
    train_opts.add_argument("--c-grid", default="0.1,1,10")
    train_opts.add_argument("--alpha", type=float, default=0.5)
    train_opts.add_argument("--epochs", type=int, default=20)
    train_opts.add_argument("--mask", default="", help="comma separated slices or feature groups to zero")
    train_opts.add_argument("--standardize", action="store_true", help="z-score features on the training folds")

    p = argparse.ArgumentParser(prog="ppmediator", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", parents=[common], help="generate captioned scenes")
    s.add_argument("--n", type=int, default=500)
    s.add_argument("--k", type=int, default=10)
    s.add_argument("--height", type=int, default=32)
    s.add_argument("--width", type=int, default=32)
    s.add_argument("--synonym-noise", type=float, default=0.2)
    s.add_argument("--prepositions", default="")
    s.add_argument("--no-presence", action="store_true", help="omit category-presence features")
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("gen-hyps", parents=[common], help="k-best parses and DivMBest segmentations")
    s.add_argument("--k", type=int, default=10)
    s.add_argument("--m", type=int, default=10)
    s.add_argument("--noise", type=float, default=0.3)
    s.add_argument("--lam", type=float, default=0.5)
    s.add_argument("--potts", type=float, default=0.6)
    s.set_defaults(func=cmd_gen_hyps, out_dir=None)

    s = sub.add_parser("train", parents=[common, train_opts], help="train one mediator on every scene")
    s.set_defaults(func=cmd_train, my="10", mz="10", c_grid="1")

    s = sub.add_parser("eval", parents=[common, train_opts], help="evaluate a saved model")
    s.add_argument("--model", required=True)
    s.set_defaults(func=cmd_eval, my="10", mz="10")

    s = sub.add_parser("cv", parents=[common, train_opts], help="10-fold cross-validation")
    s.set_defaults(func=cmd_cv)

    s = sub.add_parser("ablate", parents=[common, train_opts], help="feature group ablations")
    s.add_argument("--groups", default="", help=f"subset of {','.join(ex.ABLATION_GROUPS)}")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("sweep-alpha", parents=[common, train_opts], help="vary the loss weight")
    s.add_argument("--alphas", default="0,0.25,0.5,0.75,1")
    s.set_defaults(func=cmd_sweep_alpha)

    s = sub.add_parser("report-preps", parents=[common, train_opts], help="per-preposition accuracy")
    s.add_argument("--outcomes", help="outcomes.csv from a cv run; runs cv when absent")
    s.add_argument("--prepositions", default="")
    s.set_defaults(func=cmd_report_preps)

    s = sub.add_parser("viz-prep", parents=[common], help="distance-weight heat map for a preposition")
    s.add_argument("--model", required=True)
    s.add_argument("--prep", required=True)
    s.add_argument("--height", type=int, default=32)
    s.add_argument("--width", type=int, default=32)
    s.set_defaults(func=cmd_viz_prep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (ex.GridError, KeyError, ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0
