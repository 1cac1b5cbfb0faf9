"""Command-line entry points.

Subcommands mirror the scenario lifecycle: `train-target`, `stage0`,
`adapt --stage i`, `eval`, `run` (full scenario), `attack-gen`, and `report`.
All of them share --config/--seed/--out; the dataset root can also be set via
the CONTINUAL_DEFENSE_DATA_ROOT environment variable.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .attacks import generate, save_adversarial_batch, with_seed
from .config import load_config, stage_attack_specs
from .data import load_dataset
from .ensemble import predict
from .harness import ScenarioRun, emit_report, evaluate_acc, load_records, run_scenario
from .utils import seed_for


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", required=True, help="scenario config file (YAML/JSON)")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--out", default=None, help="override the config output directory")


def _load(args) -> "ScenarioRun":
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = args.out
    config = load_config(args.config, overrides)
    run = ScenarioRun(config, quiet=False)
    run.out.mkdir(parents=True, exist_ok=True)
    return run


def cmd_train_target(args) -> int:
    run = _load(args)
    run.ensure_target(resume=args.resume)
    print(f"target checkpoint: {run.ckpt_dir / 'target.pt'}")
    return 0


def cmd_stage0(args) -> int:
    run = _load(args)
    run.ensure_target(resume=True)
    run.ensure_stage0(resume=args.resume)
    record = run.evaluate_stage(0)
    (run.out / "record_stage0.json").write_text(json.dumps(record.to_dict(), sort_keys=True, indent=2))
    print(f"stage-0 Acc on initial attack: {record.adv_acc[0]:.4f}, clean {record.clean_acc:.4f}")
    return 0


def cmd_adapt(args) -> int:
    run = _load(args)
    run.ensure_target(resume=True)
    run.ensure_stage0(resume=True)
    for stage in range(1, args.stage + 1):
        run.run_stage(stage, resume=stage < args.stage or args.resume)
    record = run.records[-1]
    print(f"stage {args.stage}: AIAcc {record.aiacc:.4f}, clean {record.clean_acc:.4f}")
    return 0


def cmd_run(args) -> int:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = args.out
    config = load_config(args.config, overrides)
    records = run_scenario(config, resume=args.resume, quiet=False)
    print(f"wrote {Path(config.out_dir) / 'results.json'} ({len(records)} stage records)")
    return 0


def cmd_eval(args) -> int:
    run = _load(args)
    run.ensure_target(resume=True)
    run.ensure_stage0(resume=True)
    for stage in range(1, args.stage + 1):
        run.run_stage(stage, resume=True)
    if args.attack == "clean":
        images, labels = run.test_set.images, run.test_set.labels
    else:
        spec_dict = {"name": args.attack} if args.attack else stage_attack_specs(run.config, 0)[0]
        adv = run.adv_test_set(spec_dict)
        images, labels = adv.images, adv.labels
    fn = run._ensemble_predict_fn()
    acc = evaluate_acc(fn, (images, labels))
    print(f"accuracy: {acc:.4f} over {len(images)} inputs")
    if args.dump_predictions:
        estimator = None if run.config.ablation.disable_fp else run.estimator
        records = predict(
            images, run.target, run.defense, estimator, run.config.num_classes,
            scales=run.scales, space=run.config.ensemble.space,
        )
        with open(args.dump_predictions, "w") as fh:
            for rec in records:
                fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")
        print(f"wrote per-input records to {args.dump_predictions}")
    return 0


def cmd_attack_gen(args) -> int:
    run = _load(args)
    run.ensure_target(resume=True)
    dataset = run.test_set if args.split == "test" else run.train_set
    spec = with_seed(
        run._resolve_spec({"name": args.attack}, f"attack-gen-{args.split}"),
        seed_for(run.config.seed, f"attack-gen-{args.split}-{args.attack}"),
    )
    batch = generate(spec, run.target, dataset.images, dataset.labels)
    save_adversarial_batch(batch, args.archive)
    print(f"wrote {len(batch.images)} adversarial samples to {args.archive}")
    return 0


def cmd_report(args) -> int:
    run = _load(args)
    records = load_records(run.out)
    paths = emit_report(
        records, run.out, config=run.config,
        formats=tuple(args.formats.split(",")), make_plot=args.plot,
    )
    for path in paths:
        print(f"wrote {path}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="continual-defense", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-target", help="train (or resume) the protected target model")
    _add_common(p)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_train_target)

    p = sub.add_parser("stage0", help="stage-0 defense + weight estimator training")
    _add_common(p)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_stage0)

    p = sub.add_parser("adapt", help="adapt through stage i (earlier stages are resumed)")
    _add_common(p)
    p.add_argument("--stage", type=int, required=True)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("run", help="run the full scenario end to end")
    _add_common(p)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="evaluate the ensemble on clean or attacked data")
    _add_common(p)
    p.add_argument("--stage", type=int, default=0, help="defense stage to evaluate at")
    p.add_argument("--attack", default="clean", help="attack name, or 'clean'")
    p.add_argument("--dump-predictions", default=None, help="write per-input records (jsonl)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("attack-gen", help="generate and archive an adversarial batch")
    _add_common(p)
    p.add_argument("--attack", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--archive", required=True, help="output .npz path")
    p.set_defaults(func=cmd_attack_gen)

    p = sub.add_parser("report", help="re-emit tables/plots from recorded results")
    _add_common(p)
    p.add_argument("--formats", default="json,table")
    p.add_argument("--plot", action="store_true")
    p.set_defaults(func=cmd_report)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
