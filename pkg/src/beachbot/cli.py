"""Command line entry point: ``beachbot <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import BeachbotError

log = logging.getLogger("beachbot")


def _out_dir(p) -> Path:
    d = Path(p)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _dump(obj, path: Path):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _config(args):
    from .mission import MissionConfig

    return MissionConfig.load(args.config) if args.config else MissionConfig.default()


def cmd_simulate(args) -> int:
    from .mission import build_scene, load_classifier, run_mission
    from .plots import mission_figure

    cfg = _config(args)
    out = _out_dir(args.out)
    seed = cfg.doc["mission"]["seed"] if args.seed is None else args.seed
    mlog, summary = run_mission(cfg, seed, load_classifier(cfg))
    mlog.write(out / "mission_log.csv")
    _dump(summary.to_json(), out / "summary.json")
    if not args.no_plots:
        mission_figure(build_scene(cfg, seed), summary, out / "mission.png")
    print(f"found {summary.found}/{summary.total}  correct {summary.classified_correct}  "
          f"missed {summary.missed}  out of swath {summary.out_of_swath}")
    return 0


def cmd_sweep(args) -> int:
    from .experiments import servo_sweep, sweep_success, write_sweep_csv
    from .plots import sweep_figure

    out = _out_dir(args.out)
    rows = servo_sweep(args.trials, args.seed, args.max_offset_mm * 1e-3)
    write_sweep_csv(rows, out / "sweep.csv")
    rate = sweep_success(rows, args.tol_mm)
    _dump({"trials": len(rows), "tol_mm": args.tol_mm, "success_rate": rate,
           "statuses": {s: sum(r.status == s for r in rows) for s in sorted({r.status for r in rows})}},
          out / "sweep_summary.json")
    if not args.no_plots:
        sweep_figure(rows, out / "sweep.png", args.tol_mm)
    print(f"{rate:.1%} of {len(rows)} trials within {args.tol_mm} mm after terminal search")
    return 0


def cmd_sensitivity(args) -> int:
    from .experiments import sensitivity_sweep, write_sensitivity_csv
    from .plots import sensitivity_figure
    from .spectra import DEFAULT_GRID

    out = _out_dir(args.out)
    offsets = [float(x) for x in args.offsets.split(",")]
    pts = sensitivity_sweep(offsets, args.material, args.repeats, args.seed)
    summary = write_sensitivity_csv(pts, DEFAULT_GRID.points, out / "sensitivity_summary.csv", out / "sensitivity_spectra.csv")
    if not args.no_plots:
        sensitivity_figure(pts, DEFAULT_GRID.points, summary, out / "sensitivity.png")
    for r in summary:
        print(f"z={r['z_mm']:g} mm  valid={r['valid_fraction']:.2f}  snr={r['snr']:.1f}  band={r['band_amplitude']:.3g}")
    return 0


def cmd_train(args) -> int:
    from .classifier import make_dataset, train
    from .spectra import default_library

    data = make_dataset(default_library(), args.data_seed)
    model = train(data, args.variant, args.C, seed=args.seed)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    model.save(args.out)
    print(f"{args.variant}: {len(model.machines)} machines, {len(model.support_vectors)} support vectors -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    from .classifier import TrainedClassifier, evaluate, make_dataset
    from .plots import confusion_figure
    from .spectra import default_library

    model = TrainedClassifier.load(args.model)
    data = make_dataset(default_library(), args.data_seed)
    if args.subset == "interferant":
        data = [d for d in data if d.interferant]
    elif args.subset == "clean":
        data = [d for d in data if not d.interferant]
    if args.snr is not None:
        data = [d for d in data if d.snr == args.snr]
    if not data:
        raise BeachbotError("evaluation subset is empty")
    ev = evaluate(model, data)
    out = _out_dir(args.out)
    ev.confusion.to_csv(out / "confusion.csv")
    _dump({"variant": model.variant, "subset": args.subset, "snr": args.snr, "n": len(data), "accuracy": ev.accuracy,
           "false_positives": ev.false_positives, "false_negatives": ev.false_negatives}, out / "eval.json")
    if not args.no_plots:
        confusion_figure(ev.confusion, out / "confusion.png", f"{model.variant} accuracy {ev.accuracy:.1%}")
    print(f"{model.variant} accuracy {ev.accuracy:.2%} on {len(data)} spectra")
    return 0


def cmd_endurance(args) -> int:
    from .mission import endurance_report

    rep = endurance_report(_config(args))
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        _dump(rep, Path(args.out))
    print(json.dumps(rep, indent=2, sort_keys=True))
    return 0


def cmd_replay(args) -> int:
    from .mission import replay

    same, old, new = replay(args.log)
    if same:
        print(f"replay identical ({len(old.records)} records)")
        return 0
    for i, (a, b) in enumerate(zip(old.records, new.records)):
        if a != b:
            print(f"first difference at record {i}:\n  log:    {a}\n  replay: {b}")
            break
    else:
        print(f"record count differs: {len(old.records)} vs {len(new.records)}")
    return 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="beachbot", description="Beach microplastics rover simulator and analysis tools")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run a seeded survey mission")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", default="out/simulate")
    s.add_argument("--no-plots", action="store_true")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("sweep", help="Monte-Carlo servo trials, before/after terminal error")
    s.add_argument("--trials", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--max-offset-mm", type=float, default=30.0)
    s.add_argument("--tol-mm", type=float, default=1.0)
    s.add_argument("--out", default="out/sweep")
    s.add_argument("--no-plots", action="store_true")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("sensitivity", help="absorbance against focus offset")
    s.add_argument("--offsets", default="0,0.25,0.5,1.0,2.0", help="comma-separated, mm")
    s.add_argument("--material", default="PP")
    s.add_argument("--repeats", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="out/sensitivity")
    s.add_argument("--no-plots", action="store_true")
    s.set_defaults(func=cmd_sensitivity)

    s = sub.add_parser("train", help="train a classifier on the synthetic bench set")
    s.add_argument("--variant", choices=("SVM3", "SVM3+I"), default="SVM3+I")
    s.add_argument("--C", type=float, default=10.0)
    s.add_argument("--seed", type=int, default=0, help="training shuffle seed")
    s.add_argument("--data-seed", type=int, default=0)
    s.add_argument("--out", default="out/model.json")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="confusion matrix on a fresh synthetic set")
    s.add_argument("--model", required=True)
    s.add_argument("--data-seed", type=int, default=1000)
    s.add_argument("--subset", choices=("all", "clean", "interferant"), default="all")
    s.add_argument("--snr", type=float)
    s.add_argument("--out", default="out/eval")
    s.add_argument("--no-plots", action="store_true")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("endurance", help="path length and area per charge")
    s.add_argument("--config")
    s.add_argument("--out")
    s.set_defaults(func=cmd_endurance)

    s = sub.add_parser("replay", help="re-run a mission log and compare")
    s.add_argument("log")
    s.set_defaults(func=cmd_replay)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (BeachbotError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
