from __future__ import annotations

import argparse
import asyncio
import json
import sys
from collections.abc import Sequence
from pathlib import Path
from typing import Any, NoReturn, TypeVar

from pydantic import BaseModel, ValidationError

from paddit.core.config import settings
from paddit.core.errors import PadditError, UsageError
from paddit.core.events import drain, subscribe, unsubscribe
from paddit.core.logging import get_logger
from paddit.models.volumes import LabelVolume
from paddit.registration.template_em import estimate_template
from paddit.schemas import DatasetManifest, PairProvenance, RunConfig
from worker.augmentation.pipeline import (
    BASELINE_GRID_CP,
    BASELINE_GRID_SD,
    run_baseline,
    run_baseline_grid,
    run_paddit,
)
from worker.augmentation.preview import render_preview
from worker.augmentation.synthetic import generate_synthetic
from worker.ingestion.checkpoint import CHECKPOINT_FILE, load_checkpoint, save_checkpoint
from worker.ingestion.manifest import load_dataset, load_manifest
from worker.ingestion.volume_io import load_volume

logger = get_logger(__name__)

M = TypeVar("M", bound=BaseModel)


class _ArgumentParser(argparse.ArgumentParser):
    """Usage errors exit with 1; 2 is reserved for data errors."""

    def error(self, message: str) -> NoReturn:
        self.print_usage(sys.stderr)
        self.exit(UsageError.exit_code, f"{self.prog}: error: {message}\n")


def _add_common(parser: argparse.ArgumentParser, manifest: bool = True) -> None:
    if manifest:
        parser.add_argument("--manifest", type=Path, required=True, help="Dataset manifest JSON")
    parser.add_argument("--out", type=Path, default=None, help="Output directory")
    parser.add_argument("--seed", type=int, default=None, help="Global 64-bit seed")
    parser.add_argument("--jobs", type=int, default=None, help="Concurrent subjects/chains")
    parser.add_argument("--config", type=Path, default=None, help="RunConfig JSON file")


def _add_kernel(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--control-spacing", type=int, default=None, help="Voxels between control points"
    )
    parser.add_argument(
        "--support-radius", type=float, default=None, help="Kernel support radius in mm"
    )


def build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(
        prog="paddit",
        description="Probabilistic diffeomorphic augmentation of image/label pairs",
    )
    commands = parser.add_subparsers(dest="command", required=True, parser_class=_ArgumentParser)

    estimate = commands.add_parser("estimate-template", help="Estimate the population template")
    _add_common(estimate)
    _add_kernel(estimate)
    estimate.add_argument(
        "--hmc-samples", type=int, default=None, help="HMC samples kept per chain"
    )
    estimate.add_argument("--em-iters", type=int, default=None, help="EM iterations")
    estimate.add_argument("--channel", default=None, help="Channel to estimate on (default: first)")
    estimate.add_argument(
        "--resume", action="store_true", help="Continue from the checkpoint in --out if present"
    )

    augment = commands.add_parser("augment", help="Write augmented image/label pairs")
    _add_common(augment)
    _add_kernel(augment)
    augment.add_argument("--method", choices=["paddit", "bspline"], default=None)
    augment.add_argument("--template", type=Path, default=None, help="Template checkpoint dir")
    augment.add_argument("--augmentations", type=int, default=None, help="Pairs per subject (A)")
    augment.add_argument("--cp", type=int, default=None, help="B-spline control points per axis")
    augment.add_argument("--sd", type=float, default=None, help="B-spline noise std in voxels")
    augment.add_argument("--channel", default=None, help="Channel the chains register")
    augment.add_argument("--include-originals", action="store_true", default=None)
    augment.add_argument(
        "--reuse-samples",
        action="store_true",
        default=None,
        help="Use the stored E-step samples instead of fresh chains",
    )
    augment.add_argument(
        "--fixed-time", type=float, default=None, help="Integrate every sample to this time"
    )
    augment.add_argument("--format", choices=["raw", "nifti"], default="raw")

    grid = commands.add_parser("baseline-grid", help="Run the B-spline Cp x Sd grid")
    _add_common(grid)
    grid.add_argument("--augmentations", type=int, default=None, help="Pairs per subject (A)")
    grid.add_argument("--cp", dest="grid_cp", type=int, nargs="+", default=list(BASELINE_GRID_CP))
    grid.add_argument("--sd", dest="grid_sd", type=float, nargs="+", default=list(BASELINE_GRID_SD))
    grid.add_argument("--format", choices=["raw", "nifti"], default="raw")

    synth = commands.add_parser("synthgen", help="Generate a synthetic 2D population")
    _add_common(synth, manifest=False)
    synth.add_argument("--subjects", type=int, default=None)
    synth.add_argument("--dims", type=int, nargs=2, default=None)
    synth.add_argument("--noise", type=float, default=None, help="Intensity noise std")
    synth.add_argument("--deformation-scale", type=float, default=None)
    synth.add_argument("--control-spacing", type=int, default=None)

    preview = commands.add_parser("preview", help="Render a slice as PNG")
    preview.add_argument("volume", type=Path)
    preview.add_argument("--out", type=Path, required=True, help="PNG path")
    preview.add_argument("--axis", type=int, default=None)
    preview.add_argument("--index", type=int, default=None)
    preview.add_argument("--label", action="store_true", help="Render as a label volume")

    inspect = commands.add_parser("inspect", help="Print geometry, provenance or checkpoint info")
    inspect.add_argument("path", type=Path)
    return parser


def _update(model: M, **changes: Any) -> M:
    """Validated copy of ``model`` with every non-None change applied."""
    changes = {k: v for k, v in changes.items() if v is not None}
    if not changes:
        return model
    return type(model).model_validate({**model.model_dump(), **changes})


def load_run_config(args: argparse.Namespace) -> RunConfig:
    """RunConfig from ``--config`` (or defaults) with explicit flags layered on top."""
    try:
        cfg = (
            RunConfig.model_validate_json(args.config.read_text(encoding="utf-8"))
            if args.config
            else RunConfig()
        )
    except FileNotFoundError as exc:
        raise UsageError(f"config file not found: {args.config}") from exc

    def get(name: str) -> Any:
        return getattr(args, name, None)

    seed = args.seed
    if seed is None and args.config is None:
        seed = settings.default_seed

    kernel = _update(
        cfg.kernel, control_spacing=get("control_spacing"), support_radius=get("support_radius")
    )
    hmc = _update(cfg.em.hmc, samples=get("hmc_samples"), seed=seed)
    em = _update(cfg.em, iterations=get("em_iters")).model_copy(update={"hmc": hmc})
    bspline = _update(cfg.bspline, cp=get("cp"), sd=get("sd"), seed=seed)
    augmentation = _update(
        cfg.augmentation,
        method=get("method"),
        augmentations_per_subject=get("augmentations"),
        seed=seed,
        include_originals=get("include_originals"),
        reuse_samples=get("reuse_samples"),
        fixed_time=get("fixed_time"),
        template_checkpoint=get("template"),
    ).model_copy(update={"bspline": bspline})
    population = _update(
        cfg.population,
        n_subjects=get("subjects"),
        dims=tuple(get("dims")) if get("dims") else None,
        noise_std=get("noise"),
        deformation_scale=get("deformation_scale"),
        control_spacing=get("control_spacing"),
        seed=seed,
    )
    return cfg.model_copy(
        update={
            "kernel": kernel,
            "em": em,
            "bspline": bspline,
            "augmentation": augmentation,
            "population": population,
        }
    )


def _out_dir(args: argparse.Namespace) -> Path:
    return args.out if args.out is not None else Path(settings.output_dir)


def _jobs(args: argparse.Namespace) -> int:
    jobs = args.jobs if args.jobs is not None else settings.default_jobs
    if jobs < 1:
        raise UsageError(f"--jobs must be at least 1, got {jobs}")
    return jobs


async def cmd_estimate_template(args: argparse.Namespace, cfg: RunConfig) -> int:
    out_dir = _out_dir(args)
    manifest = load_manifest(args.manifest)
    channel = args.channel or manifest.channels[0]
    if channel not in manifest.channels:
        raise UsageError(f"channel {channel!r} not in manifest channels {manifest.channels}")
    subjects = await asyncio.to_thread(load_dataset, manifest)
    images = [subject.images[channel] for subject in subjects]

    resume_from = None
    if args.resume and (out_dir / CHECKPOINT_FILE).exists():
        resume_from = load_checkpoint(out_dir)

    model = await asyncio.to_thread(
        estimate_template,
        images,
        cfg.kernel,
        cfg.em,
        cfg.registration,
        _jobs(args),
        lambda m, _: save_checkpoint(m, out_dir),
        resume_from,
        [subject.subject_id for subject in subjects],
    )
    save_checkpoint(model, out_dir)
    trace = model.em_trace[-1] if model.em_trace else None
    print(
        f"Template estimated from {len(images)} images ({channel}): "
        f"sigma={model.sigma:.4g}, iterations={model.iterations_done}"
        + (f", objective={trace.neg_log_posterior:.6g}" if trace else "")
    )
    print(f"Checkpoint: {out_dir / CHECKPOINT_FILE}")
    return 0


def _print_event(event: dict[str, Any]) -> None:
    if event["type"] == "pair_written":
        print(
            f"  {event['subject_id']} #{event['augmentation_index']} "
            f"min_jacobian={event['min_jacobian']:.3f}"
        )
    elif event["type"] == "subject_failed":
        print(f"  {event['subject_id']} skipped: {event['error']}")


async def _print_progress(queue: asyncio.Queue) -> None:
    while True:
        _print_event(await queue.get())


async def cmd_augment(args: argparse.Namespace, cfg: RunConfig) -> int:
    manifest = load_manifest(args.manifest)
    spec = cfg.augmentation
    out_dir = _out_dir(args)
    queue = await subscribe()
    printer = asyncio.create_task(_print_progress(queue))
    try:
        if spec.method == "paddit":
            if spec.template_checkpoint is None:
                raise UsageError("--method paddit needs --template <checkpoint dir>")
            model = load_checkpoint(spec.template_checkpoint)
            if args.control_spacing is not None or args.support_radius is not None:
                model = model.updated(kernel=cfg.kernel)
            report = await run_paddit(
                manifest,
                spec,
                model,
                cfg.registration,
                cfg.em.hmc,
                out_dir,
                _jobs(args),
                args.channel,
                args.format,
            )
        else:
            report = await run_baseline(manifest, spec, out_dir, _jobs(args), args.format)
    finally:
        printer.cancel()
        unsubscribe(queue)
    for event in drain(queue):
        _print_event(event)

    print(
        f"Wrote {report.pairs_written} augmented pairs"
        + (f" and {report.originals} originals" if report.originals else "")
        + f" to {out_dir}"
    )
    if report.failed_subjects:
        print(f"Skipped subjects: {', '.join(report.failed_subjects)}")
    return report.exit_code


async def cmd_baseline_grid(args: argparse.Namespace, cfg: RunConfig) -> int:
    manifest = load_manifest(args.manifest)
    out_dir = _out_dir(args)
    summary = await run_baseline_grid(
        manifest, cfg.augmentation, out_dir, args.grid_cp, args.grid_sd, _jobs(args), args.format
    )
    for entry in summary:
        print(
            f"{entry.directory}: {entry.pairs} pairs, min_jacobian={entry.min_jacobian:.3f}, "
            f"folded={entry.folded_pairs}"
        )
    print(f"Summary: {out_dir / 'grid_summary.json'}")
    return 0


async def cmd_synthgen(args: argparse.Namespace, cfg: RunConfig) -> int:
    out_dir = _out_dir(args)
    population = await asyncio.to_thread(generate_synthetic, cfg.population, out_dir)
    print(f"Generated {len(population.images)} subjects in {out_dir}")
    return 0


def cmd_preview(args: argparse.Namespace) -> int:
    volume = load_volume(args.volume, kind="label" if args.label else "auto")
    try:
        path = render_preview(volume, args.out, args.axis, args.index)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    print(f"Preview written to {path}")
    return 0


def describe(path: Path) -> dict[str, Any]:
    """JSON-ready summary of a checkpoint, provenance record, manifest or volume."""
    if path.is_dir() or path.name == CHECKPOINT_FILE:
        model = load_checkpoint(path)
        g = model.template.geometry
        return {
            "kind": "checkpoint",
            "dims": list(g.dims),
            "spacing": list(g.spacing),
            "sigma": model.sigma,
            "iterations": model.iterations_done,
            "subjects": len(model.subject_ids),
            "em_trace": [entry.model_dump() for entry in model.em_trace],
        }
    if path.name.endswith(".provenance.json"):
        record = PairProvenance.model_validate_json(path.read_text(encoding="utf-8"))
        return {"kind": "provenance", **record.model_dump(mode="json")}
    if path.suffix == ".json" and not path.with_suffix(".raw").exists():
        manifest = DatasetManifest.model_validate_json(path.read_text(encoding="utf-8"))
        return {
            "kind": "manifest",
            "subjects": len(manifest.subjects),
            "channels": manifest.channels,
        }
    volume = load_volume(path)
    g = volume.geometry
    data = volume.labels if isinstance(volume, LabelVolume) else volume.values
    info: dict[str, Any] = {
        "kind": "labels" if isinstance(volume, LabelVolume) else "image",
        "dims": list(g.dims),
        "spacing": list(g.spacing),
        "origin": list(g.origin),
        "min": float(data.min()),
        "max": float(data.max()),
    }
    if isinstance(volume, LabelVolume):
        info["labels"] = sorted(volume.label_set())
    return info


async def run(args: argparse.Namespace) -> int:
    if args.command == "preview":
        return cmd_preview(args)
    if args.command == "inspect":
        print(json.dumps(describe(args.path), indent=2))
        return 0

    try:
        cfg = load_run_config(args)
    except ValidationError as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc
    handlers = {
        "estimate-template": cmd_estimate_template,
        "augment": cmd_augment,
        "baseline-grid": cmd_baseline_grid,
        "synthgen": cmd_synthgen,
    }
    return await handlers[args.command](args, cfg)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return asyncio.run(run(args))
    except PadditError as exc:
        logger.error(str(exc))
        return exc.exit_code
    except ValidationError as exc:
        logger.error(f"invalid input: {exc}")
        return UsageError.exit_code


if __name__ == "__main__":
    raise SystemExit(main())
