"""
Command-line experiment runner.

    tempest gen   --phantom shepp-logan --size 64 --out data/
    tempest run   --manifest exp.json [--set run.iterations=500] [--out DIR] [--seed N]
    tempest bo    --manifest exp.json
    tempest table RUN_DIR [RUN_DIR ...] --out table.csv

Exit codes: 0 ok, 2 invalid input, 3 numerical failure.
"""

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import ValidationError

from tempest import presets
from tempest.bayes_opt import BoResult, bo_loop, gp_grid
from tempest.errors import (
    DomainError,
    EvaluationFailedError,
    InvalidArgumentError,
    InvalidStateError,
    NumericalFailureError,
)
from tempest.forward_ops import Sinogram, baseline, corrupt, prepare_ground_truth
from tempest.helpers import format_value, read_pgm, write_pgm
from tempest.metrics import metrics_row, psnr
from tempest.phantoms import make_phantom
from tempest.schema import (
    ExperimentManifest,
    PhantomKind,
    PhantomSpec,
    TaskKind,
    apply_overrides,
)
from tempest.settings import configure_logging, load_settings
from tempest.trainer import Reconstructor, RunResult

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_NUMERICAL = 3

METRIC_COLUMNS = ["psnr", "ssim", "uce"]


def load_image(path) -> np.ndarray:
    """Read an 8- or 16-bit PGM into [0, 1]."""
    return read_pgm(path)


def cmd_gen(kind: PhantomKind, size: int, out_dir, seed: int = 0) -> List[Path]:
    """
    Write a phantom (and, for text-mask, its mask) as 16-bit PGM.

    Returns:
        Paths written
    """
    image, mask = make_phantom(PhantomSpec(kind=kind, size=size, seed=seed))
    out_dir = Path(out_dir)
    stem = PhantomKind(kind).value
    paths = [out_dir / f"{stem}-{size}.pgm"]
    write_pgm(paths[0], image)
    if mask is not None:
        paths.append(out_dir / f"{stem}-{size}-mask.pgm")
        write_pgm(paths[1], mask)
    logger.info("wrote %s", ", ".join(str(p) for p in paths))
    return paths


def load_inputs(manifest: ExperimentManifest) -> Tuple[Optional[np.ndarray], np.ndarray, Optional[np.ndarray]]:
    """
    Resolve the manifest's data sources.

    Returns:
        (ground truth or None, observation, inpainting mask or None)
    """
    task = manifest.run.task
    gt, mask = None, None
    if manifest.phantom is not None:
        gt, mask = make_phantom(manifest.phantom)
    elif manifest.image is not None:
        gt = load_image(manifest.image)
        if manifest.image_size is not None:
            gt = prepare_ground_truth(gt, manifest.image_size)
    if manifest.mask is not None:
        mask = (load_image(manifest.mask) > 0.5).astype(float)

    if manifest.observation is not None:
        if task.kind == TaskKind.CT:
            y = Sinogram.from_csv(manifest.observation, task.angles()).values
        else:
            y = load_image(manifest.observation)
            if task.kind == TaskKind.DENOISE and task.log_domain:
                raise InvalidArgumentError("log-domain observations must be generated from an image")
    else:
        y = corrupt(gt, task, manifest.run.seed, mask)
    return gt, y, mask


def _normalized(image: np.ndarray) -> Tuple[np.ndarray, float]:
    top = float(np.max(image))
    return (image / top if top > 0 else np.zeros_like(image)), top


def _write_metrics(path: Path, rows: List[Dict]) -> None:
    frame = pd.DataFrame([{k: format_value(v) if isinstance(v, float) else v for k, v in row.items()} for row in rows])
    frame.to_csv(path, index=False)


def config_hash(manifest: ExperimentManifest) -> str:
    key = json.dumps(manifest.config_key(), sort_keys=True)
    return hashlib.sha1(key.encode("utf-8")).hexdigest()[:12]


def cmd_run(manifest: ExperimentManifest, out_dir=None, progress: bool = False,
            checkpoint: bool = False) -> RunResult:
    """
    Train one configuration and write its artifacts.

    Writes recon.pgm, uncert.pgm (Bayesian methods), epistemic.pgm and
    aleatoric.pgm (when a variance head is used), trace.csv, metrics.csv and run.json.

    Returns:
        RunResult

    Raises:
        NumericalFailureError: If training diverged
    """
    out = Path(out_dir or manifest.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    gt, y, mask = load_inputs(manifest)
    cfg = manifest.run

    result = Reconstructor(cfg).run(
        y,
        gt=gt,
        mask=mask,
        trace_path=out / "trace.csv",
        checkpoint_path=out / "net.ckpt" if checkpoint else None,
        progress=progress,
    )
    info = {
        "name": manifest.name,
        "config_key": config_hash(manifest),
        "manifest": manifest.model_dump(mode="json"),
        **result.to_dict(),
    }
    if result.status != "ok":
        (out / "run.json").write_text(json.dumps(info, indent=2))
        result.raise_for_status()

    write_pgm(out / "recon.pgm", result.reconstruction)
    for label, image in (("uncert", result.uncertainty), ("epistemic", result.epistemic),
                         ("aleatoric", result.aleatoric)):
        if image is None or (label != "uncert" and result.aleatoric is None):
            continue
        scaled, top = _normalized(image)
        write_pgm(out / f"{label}.pgm", scaled)
        info[f"{label}_max"] = top

    base = {"image": manifest.name, "method": cfg.method.value, "task": cfg.task.kind.value, "seed": cfg.seed}
    rows = [{**base, **metrics_row(result.reconstruction, gt, result.uncertainty)}]
    classical = baseline(cfg.task, y)
    if classical is not None and gt is not None:
        label, image = classical
        rows.append({**base, "method": label, **metrics_row(image, gt, None)})
    _write_metrics(out / "metrics.csv", rows)
    (out / "run.json").write_text(json.dumps(info, indent=2))
    logger.info("run %s finished in %.1fs: %s", manifest.name, result.wall_time, rows[0])
    return result


def make_objective(manifest: ExperimentManifest) -> Callable[[np.ndarray], float]:
    """Objective of the BO sweep: final PSNR of a run at the given log10 point."""
    gt, y, mask = load_inputs(manifest)
    if gt is None:
        raise InvalidArgumentError("BO needs a ground-truth image or phantom to score against")
    method = manifest.run.method

    def objective(point: np.ndarray) -> float:
        cfg = presets.apply_point(manifest.run, method, point)
        result = Reconstructor(cfg).run(y, mask=mask)
        result.raise_for_status()
        return psnr(gt, result.reconstruction)

    return objective


def cmd_bo(manifest: ExperimentManifest, out_dir=None,
           objective: Optional[Callable[[np.ndarray], float]] = None, threads: Optional[int] = None) -> BoResult:
    """
    Tune the method's two hyperparameters and write history.jsonl, gp_grid.csv and best.json.

    Args:
        manifest: Experiment; ``bo`` holds the sweep settings
        out_dir: Output directory (defaults to the manifest's)
        objective: Replaces the training objective, e.g. a stub in tests
        threads: Cap on concurrent evaluations (defaults to TEMPEST_THREADS)

    Returns:
        BoResult

    Raises:
        EvaluationFailedError: If every evaluation failed
    """
    out = Path(out_dir or manifest.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    method = manifest.run.method
    space = manifest.bo.space or presets.search_space(method)
    init = manifest.bo.init_points or presets.initial_candidates(method)
    threads = threads or load_settings().threads
    objective = objective or make_objective(manifest)

    result = bo_loop(
        space,
        objective,
        init,
        manifest.bo.iterations,
        batch=manifest.bo.batch,
        seed=manifest.run.seed,
        threads=threads,
        history_path=out / "history.jsonl",
    )
    grid = gp_grid(result.surrogate, space, result.best_value, manifest.bo.grid_size)
    grid.to_csv(out / "gp_grid.csv", index=False)
    best = {
        "axes": space.names,
        "point": [float(v) for v in result.best_point],
        "values": {name: float(10.0 ** v) for name, v in zip(space.names, result.best_point)},
        "psnr": result.best_value,
        "evaluations": len(result.history),
        "failed": sum(o.status != "ok" for o in result.history),
    }
    (out / "best.json").write_text(json.dumps(best, indent=2))
    logger.info("best %s = %s with %.4g", space.names, best["values"], result.best_value)
    return result


def cmd_table(run_dirs: Sequence, out_path=None) -> pd.DataFrame:
    """
    Consolidate metrics of several runs; runs that differ only by seed are averaged.

    Returns:
        One row per (image, method, task, configuration) with metric means,
        population stds and the number of runs
    """
    if not run_dirs:
        raise InvalidArgumentError("table needs at least one run directory")
    frames = []
    for run_dir in run_dirs:
        run_dir = Path(run_dir)
        metrics_path = run_dir / "metrics.csv"
        if not metrics_path.exists():
            raise FileNotFoundError(f"{metrics_path} is missing")
        frame = pd.read_csv(metrics_path)
        info_path = run_dir / "run.json"
        key = json.loads(info_path.read_text()).get("config_key") if info_path.exists() else str(run_dir)
        frame["config"] = key
        frames.append(frame)
    data = pd.concat(frames, ignore_index=True)
    keys = ["image", "method", "task", "config"]
    metrics = [c for c in METRIC_COLUMNS if c in data.columns]
    grouped = data.groupby(keys, sort=True)
    table = grouped[metrics].mean()
    for column in metrics:
        table[f"{column}_std"] = grouped[column].std(ddof=0).fillna(0.0)
    table["n_runs"] = grouped.size()
    table = table.reset_index()
    if out_path is not None:
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        table.to_csv(out_path, index=False)
    return table


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tempest", description="Tempered-posterior image reconstruction")
    parser.add_argument("--log-level", default=None, help="Overrides TEMPEST_LOG_LEVEL")
    commands = parser.add_subparsers(dest="command", required=True)

    gen = commands.add_parser("gen", help="Write a synthetic phantom")
    gen.add_argument("--phantom", type=PhantomKind, choices=list(PhantomKind), default=PhantomKind.SHEPP_LOGAN)
    gen.add_argument("--size", type=int, default=64)
    gen.add_argument("--out", default=".")
    gen.add_argument("--seed", type=int, default=0)

    for name, text in (("run", "Train one configuration"), ("bo", "Tune hyperparameters with BO")):
        sub = commands.add_parser(name, help=text)
        sub.add_argument("--manifest", required=True)
        sub.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
        sub.add_argument("--out", default=None)
        sub.add_argument("--seed", type=int, default=None)
        if name == "run":
            sub.add_argument("--progress", action="store_true")
            sub.add_argument("--checkpoint", action="store_true", help="Save the trained network")

    table = commands.add_parser("table", help="Consolidate metrics of several runs")
    table.add_argument("run_dirs", nargs="+")
    table.add_argument("--out", default="table.csv")
    return parser


def _manifest_from_args(args) -> ExperimentManifest:
    manifest = ExperimentManifest.load(args.manifest)
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    if args.out is not None:
        overrides.append(f"output_dir={json.dumps(args.out)}")
    return apply_overrides(manifest, overrides) if overrides else manifest


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    settings = load_settings()
    configure_logging((args.log_level or settings.log_level).upper())
    try:
        if args.command == "gen":
            cmd_gen(args.phantom, args.size, args.out, args.seed)
        elif args.command == "run":
            cmd_run(_manifest_from_args(args), progress=args.progress, checkpoint=args.checkpoint)
        elif args.command == "bo":
            cmd_bo(_manifest_from_args(args), threads=settings.threads)
        else:
            cmd_table(args.run_dirs, args.out)
    except (NumericalFailureError, EvaluationFailedError) as e:
        logger.error("%s", e)
        return EXIT_NUMERICAL
    except (ValidationError, InvalidArgumentError, DomainError, InvalidStateError, OSError, ValueError) as e:
        logger.error("%s", e)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
