"""``maplab`` command line: teachers, students, preset sweeps, analysis and plots."""
import argparse
import logging
import sys
from pathlib import Path

from .analysis import emit_plots, export_results, fit_power_law, gain_table, read_results, summarize
from .errors import MaplabError, UnreachableTargetError
from .trainer import ExperimentConfig, load_config

log = logging.getLogger("maplab")


def _config(args):
    """Config file first, then ``--set key=value`` pairs, then explicit flags."""
    base = load_config(args.config) if args.config else ExperimentConfig()
    overrides = list(args.set or [])
    for key in ("seed", "steps"):
        value = getattr(args, key, None)
        if value is not None:
            overrides.append(f"{key}={value}")
    return base.with_overrides(overrides)


def _common(p):
    p.add_argument("--config", help="flat key/value YAML config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)


def cmd_train_teacher(args):
    from .teacherbank import build_bank, train_teacher_to_accuracy

    config = _config(args)
    out = Path(args.out)
    if len(args.target) > 1 or out.suffix != ".pt":
        bank, failures = build_bank(sorted(args.target), config, out, args.tol, args.max_steps, args.val_every,
                                    args.val_subset, keep_best=args.keep_best)
        for c in bank:
            print(f"{c.path}\ttarget={c.target_acc:.2f}\tachieved={c.achieved_acc:.4f}\tstep={c.step_reached}")
        return 1 if failures else 0
    try:
        ckpt = train_teacher_to_accuracy(config, args.target[0], args.tol, args.max_steps, args.val_every,
                                         args.val_subset)
    except UnreachableTargetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if args.keep_best and exc.best is not None:
            exc.best.save(out)
            print(f"kept best checkpoint at {out}", file=sys.stderr)
        return 1
    ckpt.save(out)
    print(f"{out}\ttarget={ckpt.target_acc:.2f}\tachieved={ckpt.achieved_acc:.4f}\tstep={ckpt.step_reached}")
    return 0


def cmd_train_student(args):
    from .analysis import ResultRow
    from .nets import save_checkpoint
    from .trainer import train_student

    config = _config(args)
    if args.teacher:
        config = config.replace(teacher=args.teacher)
    t_acc = t_aug = None
    if config.teacher and config.strategy != "A":
        from .teacherbank import TeacherCheckpoint

        meta = TeacherCheckpoint.load(config.teacher)
        t_acc, t_aug = meta.target_acc, meta.aug_policy.kind.value

    def progress(r):
        print(f"step {r.step:>6d}  top1 {r.top1:.4f}  L_B {r.loss_backbone:.4f}  L_H {r.loss_classifier:.4f}")

    run = train_student(config, progress=progress)
    if args.out:
        teacher = "none" if t_acc is None else f"{t_acc:.2f}"
        eid = f"single/{config.strategy}/t{teacher}/{t_aug or 'none'}/{config.aug_kind}/ipc{config.ipc or 'all'}"
        rows = [ResultRow(eid, "single", config.strategy, t_acc, config.aug_kind, t_aug, config.ipc, config.seed,
                          r.step, r.top1, r.loss_backbone, r.loss_classifier) for r in run.records]
        if rows:
            export_results(rows, args.out)
    if args.checkpoint:
        save_checkpoint(run.model, args.checkpoint, config=config.to_mapping())
    return 0


def _floats(text):
    return [float(v) for v in text.split(",")] if text else None


def cmd_sweep(args):
    from .experiments import get_preset, plan_runs, run_experiment

    axes = {
        "teachers": _floats(args.teachers),
        "seeds": [int(v) for v in args.seeds.split(",")] if args.seeds else None,
        "ipcs": [int(v) for v in args.ipcs.split(",")] if args.ipcs else None,
        "strategies": args.strategies.split(",") if args.strategies else None,
        "teacher_augs": args.teacher_augs.split(",") if args.teacher_augs else None,
        "student_augs": args.student_augs.split(",") if args.student_augs else None,
    }
    preset = get_preset(args.preset, **axes)
    if args.dry_run:
        runs = plan_runs(preset)
        for cell, seed in runs:
            print(f"{cell.experiment_id}\tseed={seed}")
        print(f"{len(runs)} runs")
        return 0
    base = load_config(args.config) if args.config else ExperimentConfig()
    overrides = list(args.set or [])
    if args.steps is not None:
        overrides.append(f"steps={args.steps}")

    def progress(cell, seed, run):
        print(f"{cell.experiment_id}\tseed={seed}\ttop1={run.final_top1:.4f}", flush=True)

    result = run_experiment(preset, base, overrides, args.bank, progress)
    for s in result.skipped:
        print(f"skipped {s.experiment_id} seed={s.seed}: {s.reason}", file=sys.stderr)
    if result.rows:
        export_results(result.rows, args.out)
        print(f"wrote {len(result.rows)} rows to {args.out}")
    return 0


def cmd_analyze(args):
    rows = read_results(args.results)
    print("experiment_id\tstep\tmean\tstd\tn")
    for (eid, step), (mean, std, n) in summarize(rows).items():
        print(f"{eid}\t{step}\t{mean:.4f}\t{std:.4f}\t{n}")
    if args.gain:
        first, second = args.gain
        skipped = []
        print(f"\nteacher_acc\tstep\tacc_{first}\tacc_{second}\tgain")
        for g in gain_table(rows, first, second, skipped):
            print(f"{g.teacher_acc}\t{g.step}\t{g.acc_first:.4f}\t{g.acc_second:.4f}\t{g.gain:.4f}")
        for key in skipped:
            print(f"skipped key {key}: missing one strategy", file=sys.stderr)
    if args.power_law:
        final = {}
        for r in rows:
            if r.ipc is None or r.top1 is None:
                continue
            key = (r.strategy, r.teacher_acc, r.student_aug)
            if r.step >= final.get((key, r.ipc, r.seed), (-1, None))[0]:
                final[(key, r.ipc, r.seed)] = (r.step, r.top1)
        series = {}
        for (key, ipc, _), (_, top1) in final.items():
            series.setdefault(key, []).append((ipc, top1))
        print("\nseries\ta\tb\tc\tresidual")
        for key, pts in sorted(series.items(), key=str):
            try:
                fit = fit_power_law([p[0] for p in pts], [p[1] for p in pts])
            except (MaplabError, ValueError) as exc:
                print(f"{key}\tfit failed: {exc}")
                continue
            print(f"{key}\t{fit.a:.4f}\t{fit.b:.4f}\t{fit.c:.4f}\t{fit.residual:.2e}")
    return 0


def cmd_plot(args):
    rows = read_results(args.results)
    presets = [args.preset] if args.preset else sorted({r.preset for r in rows})
    for preset in presets:
        for path in emit_plots(rows, preset, args.outdir, args.fraction):
            print(path)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="maplab", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-teacher", help="train teachers to preset accuracy levels")
    _common(p)
    p.add_argument("--target", type=float, nargs="+", required=True, help="target top-1 level(s) in [0, 1]")
    p.add_argument("--tol", type=float, default=0.01)
    p.add_argument("--max-steps", type=int, default=20000)
    p.add_argument("--val-every", type=int, default=50)
    p.add_argument("--val-subset", type=int, default=1000)
    p.add_argument("--keep-best", action="store_true", help="save the best checkpoint when a level is unreachable")
    p.add_argument("--out", default="bank", help="checkpoint path (.pt) or bank directory")
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("train-student", help="train one student")
    _common(p)
    p.add_argument("--teacher", help="teacher checkpoint for strategies B and C")
    p.add_argument("--out", help="results CSV")
    p.add_argument("--checkpoint", help="where to save the final student")
    p.set_defaults(func=cmd_train_student)

    p = sub.add_parser("sweep", help="run a preset study")
    p.add_argument("preset")
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--steps", type=int)
    p.add_argument("--bank", help="teacher bank directory")
    p.add_argument("--teachers", help="comma-separated teacher levels")
    p.add_argument("--seeds", help="comma-separated seeds")
    p.add_argument("--ipcs", help="comma-separated IPC values")
    p.add_argument("--strategies", help="comma-separated strategies")
    p.add_argument("--teacher-augs", help="comma-separated teacher augmentations")
    p.add_argument("--student-augs", help="comma-separated student augmentations")
    p.add_argument("--out", default="results.csv")
    p.add_argument("--dry-run", action="store_true", help="list the planned runs and exit")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("analyze", help="summaries, gain tables and power-law fits")
    p.add_argument("results")
    p.add_argument("--gain", nargs=2, metavar=("FIRST", "SECOND"))
    p.add_argument("--power-law", action="store_true")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("plot", help="render preset plots")
    p.add_argument("results")
    p.add_argument("--preset")
    p.add_argument("--outdir", default="plots")
    p.add_argument("--fraction", type=float, default=0.1)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except MaplabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
