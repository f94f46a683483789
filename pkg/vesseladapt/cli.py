"""
Command Line Interface
python -m vesseladapt {prep,synth,train,resume,eval,sweep,serve}
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from vesseladapt.config import get_settings, load_train_config
from vesseladapt.exceptions import VesselAdaptError
from vesseladapt.logging_config import setup_logging
from vesseladapt.schemas import DomainTag, Scenario, Split, TrainConfig

logger = logging.getLogger(__name__)


def _grid(text: str) -> tuple:
    parts = tuple(int(p) for p in text.split(","))
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected A,B,C, got {text!r}")
    return parts


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vesseladapt", description="Semi-supervised vessel segmentation adaptation")
    commands = parser.add_subparsers(dest="command", required=True)

    prep = commands.add_parser("prep", help="resample and normalize one domain directory")
    prep.add_argument("--domain", type=Path, required=True)
    prep.add_argument("--out", type=Path, required=True)
    prep.add_argument("--max-grid", type=_grid, default=(64, 64, 32))
    prep.add_argument("--channels", type=int, default=3)
    prep.add_argument("--invert", action="store_true")

    synth = commands.add_parser("synth", help="write a synthetic phantom scenario")
    synth.add_argument("--scenario", type=Scenario, choices=list(Scenario), default=Scenario.WIDE_GAP)
    synth.add_argument("--n-source", type=int, default=35)
    synth.add_argument("--n-target", type=int, default=20)
    synth.add_argument("--n-val", type=int, default=4)
    synth.add_argument("--n-test", type=int, default=4)
    synth.add_argument("--n-labeled", type=int, default=3)
    synth.add_argument("--labeled-mode", choices=["slice", "volume"], default=None)
    synth.add_argument("--grid", type=_grid, default=None)
    synth.add_argument("--seed", type=int, default=7)
    synth.add_argument("--out", type=Path, required=True)

    train = commands.add_parser("train", help="train all phases into a run directory")
    train.add_argument("--config", type=Path, default=None)
    train.add_argument("--data", type=Path, required=True)
    train.add_argument("--out", type=Path, required=True)
    train.add_argument("--split", type=Path, default=None, help="split JSON (default <data>/split.json)")
    train.add_argument("--max-steps", type=int, default=None)

    resume = commands.add_parser("resume", help="continue an interrupted run")
    resume.add_argument("--run", type=Path, required=True)
    resume.add_argument("--max-steps", type=int, default=None)

    evaluate = commands.add_parser("eval", help="score a checkpoint on a data split")
    evaluate.add_argument("--checkpoint", type=Path, required=True)
    evaluate.add_argument("--data", type=Path, required=True)
    evaluate.add_argument("--split", type=Split, choices=list(Split), default=Split.TEST)
    evaluate.add_argument("--split-file", type=Path, default=None)
    evaluate.add_argument("--domain", type=DomainTag, choices=list(DomainTag), default=DomainTag.TARGET)
    evaluate.add_argument("--out", type=Path, required=True)
    evaluate.add_argument("--translations", type=int, default=0,
                          help="also render input, reconstruction and translation for this many volumes")

    sweep = commands.add_parser("sweep", help="run an experiment spec")
    sweep.add_argument("--spec", type=Path, required=True)
    sweep.add_argument("--out", type=Path, default=None)

    commands.add_parser("serve", help="start the HTTP service")
    return parser


# ==================== Commands ====================

def cmd_prep(args) -> int:
    from vesseladapt.services.preprocess import preprocess_domain

    provenance = preprocess_domain(args.domain, args.out, args.max_grid, args.channels, args.invert)
    logger.info(f"Preprocessed {len(provenance.get('subjects', []))} subjects into {args.out}")
    return 0


def cmd_synth(args) -> int:
    from vesseladapt.services.harness import labeled_mode
    from vesseladapt.services.synth_data import DEFAULT_GRID, make_scenario, write_scenario

    held_out = args.n_val + args.n_test
    source, target = make_scenario(args.scenario, args.n_source + held_out, args.n_target + held_out,
                                   args.seed, args.grid or DEFAULT_GRID)
    write_scenario(args.out, source, target, n_val=args.n_val, n_test=args.n_test, n_labeled=args.n_labeled,
                   labeled_mode=args.labeled_mode or labeled_mode(args.scenario))
    return 0


def cmd_train(args) -> int:
    from vesseladapt.services.synth_data import SPLIT_FILE
    from vesseladapt.services.train import train_run
    from vesseladapt.services.volume_io import load_split_spec

    cfg = load_train_config(args.config)
    split = load_split_spec(args.split or args.data / SPLIT_FILE)
    result = train_run(cfg, args.data, args.out, split, max_steps=args.max_steps)
    if result.best is not None:
        logger.info(f"Best checkpoint {result.best.phase}@{result.best.iteration}: "
                    f"S={result.best.source_dice:.3f} T={result.best.target_dice:.3f}")
    return 0


def cmd_resume(args) -> int:
    from vesseladapt.services.train import resume_run

    resume_run(args.run, max_steps=args.max_steps)
    return 0


def cmd_eval(args) -> int:
    from vesseladapt.nets import build_models, load_checkpoint, restore_models
    from vesseladapt.services.infer_eval import emit_report, evaluate, load_pair, render_translations
    from vesseladapt.services.preprocess import extract_slices, midpoint_slice
    from vesseladapt.services.synth_data import SPLIT_FILE
    from vesseladapt.services.volume_io import build_index, load_split_spec

    payload = load_checkpoint(args.checkpoint)
    cfg = TrainConfig.model_validate(payload["config"])
    bundle = restore_models(build_models(cfg.net, cfg.ablation, cfg.seed), payload)
    index = build_index(args.data, load_split_spec(args.split_file or args.data / SPLIT_FILE))
    report = evaluate(bundle, index, cfg, args.domain, args.split)
    emit_report(report, args.out)
    if args.translations:
        samples = []
        for entry in index.select(args.split, args.domain)[:args.translations]:
            volume, _ = load_pair(entry, cfg)
            samples.append(extract_slices(volume, channels=cfg.net.channels)[midpoint_slice(entry.depth)])
        if samples:
            render_translations(bundle, samples, Path(args.out) / "plots" / "translations.png")
    return 0


def cmd_sweep(args) -> int:
    from vesseladapt.database import SessionLocal, init_db
    from vesseladapt.services.harness import load_experiment_spec, run_experiment

    spec = load_experiment_spec(args.spec)
    outdir = args.out or get_settings().runs_root / spec.name
    init_db()
    db = SessionLocal()
    try:
        result = run_experiment(spec, outdir, db=db)
    finally:
        db.close()
    print(json.dumps(result.table, indent=2, default=str))
    return 1 if result.diverged else 0


def cmd_serve(args) -> int:
    import uvicorn

    settings = get_settings()
    uvicorn.run("vesseladapt.main:app", host=settings.host, port=settings.port,
                log_level=settings.log_level.lower())
    return 0


COMMANDS = {
    "prep": cmd_prep,
    "synth": cmd_synth,
    "train": cmd_train,
    "resume": cmd_resume,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "serve": cmd_serve,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except VesselAdaptError as e:
        logger.error(f"{e.error}: {e.detail}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
