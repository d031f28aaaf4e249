"""Command-line entry point: gen, aiou, train, eval, grid, track and plot."""

import argparse
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import torch

from lakf.config import DEFAULT_CONFIG_PATH, RunConfig, Settings, dump_run_config, load_run_config
from lakf.dataio import (
    DatasetSplit,
    Trajectory,
    dataset_aiou_report,
    load_mot_root,
    make_splits,
    read_dataset,
    simulate_dataset,
    write_dataset,
)
from lakf.errors import DomainError, LakfError
from lakf.evaluation import EvalReport, FilterModel, evaluate, kf_model, mismatch_grid, network_model, observation_model
from lakf.learned_filters import Variant
from lakf.logger import get_logger, setup_logging
from lakf.plots import plot_aiou, plot_mismatch_grid, plot_recall_curves
from lakf.synthetic import maneuvering_tracks
from lakf.tracker import KalmanMotion, LearnedMotion, oracle_detections, read_detections, track_sequence, write_mot_results
from lakf.training import load_checkpoint, train

logger = get_logger(__name__)


class UsageError(Exception):
    """Bad command-line input detected after argparse."""


def parse_alpha(text: str, spec: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise UsageError(f"bad alpha in {spec!r}") from None


class Pipeline:
    """Runs one subcommand against a validated RunConfig."""

    def __init__(self, cfg: RunConfig, run_dir: Path, workers: int = 1):
        self.cfg = cfg
        self.run_dir = run_dir
        self.workers = workers

    # ------------------------------------------------------------------ data

    def ground_truth(self) -> List[Trajectory]:
        data = self.cfg.data
        if data.source == "mot":
            if not data.mot_root:
                raise UsageError("data.source=mot needs data.mot_root (--mot-root)")
            return load_mot_root(data.mot_root, data.dataset, data.categories, data.default_category)
        return maneuvering_tracks(data.synthetic_tracks, data.synthetic_length, data.seed)

    def simulate_split(self, alpha_p: float) -> DatasetSplit:
        data = self.cfg.data
        trajs = simulate_dataset(self.ground_truth(), alpha_p, data.seed, workers=self.workers)
        return make_splits(trajs, data.val_fraction, data.seed)

    def dataset(self) -> DatasetSplit:
        path = Path(self.cfg.data.dataset_path)
        if not path.exists():
            raise UsageError(f"dataset file not found: {path} (run gen first)")
        return read_dataset(path)

    def resolve_model(self, spec: Optional[str] = None) -> FilterModel:
        """KF from model.alpha_p, ``kf@ALPHA``, or a checkpoint path."""
        model = self.cfg.model
        if spec is not None and spec.lower().startswith("kf"):
            alpha = parse_alpha(spec.split("@", 1)[1], spec) if "@" in spec else model.alpha_p
            return kf_model(alpha, model.alpha_v, model.mode)
        checkpoint = spec or model.checkpoint
        if checkpoint is None:
            if model.variant is not Variant.KF:
                raise UsageError(f"variant {model.variant.value} needs model.checkpoint (--model PATH)")
            return kf_model(model.alpha_p, model.alpha_v, model.mode)
        ckpt = load_checkpoint(checkpoint, expect_mode=model.mode,
                               allow_mismatch=self.cfg.eval.allow_mode_mismatch)
        return network_model(ckpt.build_network(), label=f"{ckpt.variant.value}({Path(checkpoint).stem})")

    # -------------------------------------------------------------- commands

    def gen(self) -> int:
        split = self.simulate_split(self.cfg.data.alpha_p)
        path = write_dataset(split, self.cfg.data.dataset_path)
        print(f"✓ Dataset written to {path}: train={len(split.train)}, val={len(split.val)}, "
              f"test={len(split.test)}, skipped={split.skipped}")
        return 0

    def aiou(self) -> int:
        report = dataset_aiou_report(self.ground_truth())
        path = self.run_dir / "aiou.csv"
        report.to_csv(path, index=False)
        print(report.to_string(index=False))
        print(f"✓ AIoU report written to {path}")
        return 0

    def train(self) -> int:
        split = self.dataset()
        train_cfg = self.cfg.train.model_copy(update={"mode": self.cfg.model.mode})
        _, history = train(split, train_cfg, self.cfg.model.network_config(),
                           log_path=self.run_dir / "train_log.jsonl",
                           checkpoint_path=self.run_dir / "model.pt")
        print(f"✓ Trained {train_cfg.variant.value} for {len(history)} epochs; "
              f"checkpoint {self.run_dir / 'model.pt'}")
        return 0

    def eval(self, spec: Optional[str] = None) -> int:
        split = self.dataset()
        if not split.test:
            raise UsageError("dataset has no test trajectories")
        model = self.resolve_model(spec)
        reports = [evaluate(model, split.test, self.cfg.eval, data_mode=self.cfg.model.mode)]
        if self.cfg.eval.include_observation:
            reports.append(evaluate(observation_model(model.mode), split.test, self.cfg.eval))
        report = EvalReport.concat(reports)
        path = report.to_csv(self.run_dir / "report.csv")
        report.summary().to_csv(self.run_dir / "summary.csv", index=False)
        print(report.summary().to_string(index=False))
        print(f"✓ Report written to {path}")
        return 0

    def grid(self, model_specs: Sequence[str], test_specs: Sequence[str]) -> int:
        if not model_specs:
            raise UsageError("grid needs at least one --model")
        models: Dict[str, FilterModel] = {}
        for spec in model_specs:
            model = self.resolve_model(spec)
            models[model.label] = model
        tests = {}
        if test_specs:
            for spec in test_specs:
                alpha, _, path = spec.partition("=")
                if not path:
                    raise UsageError(f"--test must look like ALPHA=PATH, got {spec!r}")
                tests[parse_alpha(alpha, spec)] = read_dataset(path).test
        else:
            for alpha in self.cfg.eval.grid_alphas:
                tests[alpha] = self.simulate_split(alpha).test
        grid = mismatch_grid(models, tests)
        path = self.run_dir / "grid.csv"
        grid.to_csv(path)
        print(grid.to_string())
        print(f"✓ Mismatch grid written to {path}")
        return 0

    def track(self, spec: Optional[str] = None) -> int:
        model = self.resolve_model(spec)
        out_dir = self.run_dir / self.cfg.track.output_dir
        source = self.cfg.track.detections
        sequences = {}
        if source is not None:
            paths = sorted(Path(source).glob("*.txt")) if Path(source).is_dir() else [Path(source)]
            for path in paths:
                with open(path, encoding="utf-8") as handle:
                    sequences[path.stem] = (read_detections(handle), None)
        else:
            by_sequence: Dict[str, List[Trajectory]] = {}
            for traj in self.ground_truth():
                by_sequence.setdefault(traj.sequence, []).append(traj)
            for name, trajs in by_sequence.items():
                sequences[name] = (oracle_detections(trajs), (trajs[0].img_w, trajs[0].img_h))
        for name, (detections, img_size) in sorted(sequences.items()):
            if model.net is not None:
                motion = LearnedMotion(model.net, model.linear, img_size=img_size)
            else:
                motion = KalmanMotion(model.linear)
            results = track_sequence(detections, motion, self.cfg.track)
            path = write_mot_results(results, out_dir / f"{name}.txt")
            print(f"✓ {name}: {sum(len(v) for v in results.values())} boxes -> {path}")
        return 0

    def plot(self, kind: str, input_csv: str, out: Optional[str]) -> int:
        out_path = Path(out) if out else self.run_dir / f"{kind}.png"
        plotters = {"recall": plot_recall_curves, "grid": plot_mismatch_grid, "aiou": plot_aiou}
        path = plotters[kind](input_csv, out_path)
        print(f"✓ Figure written to {path}")
        return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None, help="YAML run configuration")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="Dotted configuration override, repeatable")
    common.add_argument("--run-dir", type=str, default=None, help="Output directory of this run")
    common.add_argument("--log-level", type=str, default=None, help="DEBUG, INFO, WARNING or ERROR")
    common.add_argument("--seed", type=int, default=None, help="data.seed and train.seed")
    common.add_argument("--alpha-p", type=float, default=None,
                        help="data.alpha_p for gen, model.alpha_p for eval/grid/track")
    common.add_argument("--mode", type=str, default=None, help="model.mode: XYAH or XYWH")
    common.add_argument("--dataset", type=str, default=None, help="data.dataset_path")

    parser = argparse.ArgumentParser(
        prog="lakf",
        description="Model-based and learning-aided Kalman filtering of bounding boxes",
        formatter_class=argparse.RawDescriptionHelpFormatter
    )
    subparsers = parser.add_subparsers(dest="command", help="Available commands")

    gen = subparsers.add_parser("gen", parents=[common], help="Generate a semi-simulated dataset")
    gen.add_argument("--synthetic", type=int, default=None, metavar="N", help="Use N synthetic trajectories")
    gen.add_argument("--mot-root", type=str, default=None, help="MOTChallenge split directory")
    gen.add_argument("--out", type=str, default=None, help="data.dataset_path")

    aiou = subparsers.add_parser("aiou", parents=[common], help="Adjacent-frame AIoU per category")
    aiou.add_argument("--synthetic", type=int, default=None, metavar="N", help="Use N synthetic trajectories")
    aiou.add_argument("--mot-root", type=str, default=None, help="MOTChallenge split directory")

    train_parser = subparsers.add_parser("train", parents=[common], help="Train a learned filter")
    train_parser.add_argument("--variant", type=str, default=None, help="KNET, SKNET or SIKNET")
    train_parser.add_argument("--epochs", type=int, default=None, help="train.epochs")

    eval_parser = subparsers.add_parser("eval", parents=[common], help="Evaluate KF or a checkpoint")
    eval_parser.add_argument("--model", type=str, default=None, help="kf, kf@ALPHA or checkpoint path")

    grid = subparsers.add_parser("grid", parents=[common], help="Mismatched-noise mAR grid")
    grid.add_argument("--model", dest="models", action="append", default=[], help="kf@ALPHA or checkpoint, repeatable")
    grid.add_argument("--test", dest="tests", action="append", default=[], metavar="ALPHA=PATH",
                      help="Test dataset per noise level, repeatable; default simulates eval.grid_alphas")

    track = subparsers.add_parser("track", parents=[common], help="Track detections into MOT result files")
    track.add_argument("--model", type=str, default=None, help="kf, kf@ALPHA or checkpoint path")
    track.add_argument("--detections", type=str, default=None, help="Detection file or directory; default GT")
    track.add_argument("--mot-root", type=str, default=None, help="MOTChallenge split directory for oracle mode")

    plot = subparsers.add_parser("plot", parents=[common], help="Render a CSV report")
    plot.add_argument("kind", choices=["recall", "grid", "aiou"], help="Report type")
    plot.add_argument("input", type=str, help="CSV report")
    plot.add_argument("--out", type=str, default=None, help="Image path")
    return parser


def flag_overrides(args: argparse.Namespace) -> List[str]:
    """Maps convenience flags to dotted configuration keys."""
    items: List[str] = []
    command = args.command
    if args.seed is not None:
        items += [f"data.seed={args.seed}", f"train.seed={args.seed}"]
    if args.alpha_p is not None:
        items.append(f"{'data' if command == 'gen' else 'model'}.alpha_p={args.alpha_p}")
    if args.mode is not None:
        items.append(f"model.mode={args.mode}")
    if args.dataset is not None:
        items.append(f"data.dataset_path={args.dataset}")
    if getattr(args, "synthetic", None) is not None:
        items += ["data.source=synthetic", f"data.synthetic_tracks={args.synthetic}"]
    if getattr(args, "mot_root", None) is not None:
        items += ["data.source=mot", f"data.mot_root={args.mot_root}"]
    if getattr(args, "out", None) is not None and command == "gen":
        items.append(f"data.dataset_path={args.out}")
    if getattr(args, "variant", None) is not None:
        items += [f"train.variant={args.variant}", f"model.variant={args.variant}"]
    if getattr(args, "epochs", None) is not None:
        items.append(f"train.epochs={args.epochs}")
    if getattr(args, "detections", None) is not None:
        items.append(f"track.detections={args.detections}")
    return items


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Parses arguments, runs one subcommand and returns the exit code.

    Returns:
        0 on success, 1 on a runtime failure, 2 on bad usage
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else 2
    if not args.command:
        parser.print_help()
        return 2

    try:
        settings = Settings()
        if args.log_level is not None:
            settings = settings.model_copy(update={"log_level": args.log_level.upper()})
        cfg_path = args.config or (DEFAULT_CONFIG_PATH if DEFAULT_CONFIG_PATH.exists() else None)
        cfg = load_run_config(cfg_path, flag_overrides(args) + list(args.overrides))
    except (DomainError, ValueError, OSError) as exc:
        print(f"lakf {args.command}: usage error: {exc}", file=sys.stderr)
        return 2

    run_dir = Path(args.run_dir or settings.run_dir)
    run_context = {"command": args.command, "run_dir": str(run_dir), "config": str(cfg_path) if cfg_path else None}
    setup_logging(log_dir=str(run_dir / settings.log_dir), log_level=settings.log_level, console_output=True,
                  run_context=run_context)
    torch.set_num_threads(settings.num_threads)
    dump_run_config(cfg, run_dir)
    logger.info(f"Running {args.command}")

    pipeline = Pipeline(cfg, run_dir, workers=settings.num_threads)
    try:
        if args.command == "gen":
            return pipeline.gen()
        if args.command == "aiou":
            return pipeline.aiou()
        if args.command == "train":
            return pipeline.train()
        if args.command == "eval":
            return pipeline.eval(args.model)
        if args.command == "grid":
            return pipeline.grid(args.models, args.tests)
        if args.command == "track":
            return pipeline.track(args.model)
        return pipeline.plot(args.kind, args.input, args.out)
    except UsageError as exc:
        print(f"lakf {args.command}: usage error: {exc}", file=sys.stderr)
        return 2
    except LakfError as exc:
        module = type(exc).__module__
        logger.error(f"{args.command} failed: {exc}", exc_info=True)
        print(f"❌ {module}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        logger.error(f"{args.command} failed: {exc}", exc_info=True)
        print(f"❌ {args.command}: {exc}", file=sys.stderr)
        return 1
