"""The ``pnpmix`` command line."""

import argparse
import logging
from collections.abc import Sequence
from pathlib import Path

import polars as pl
from rich.console import Console
from rich.logging import RichHandler
from rich.markup import escape
from rich.table import Table

from . import __version__
from ._util import save_heatmap, save_previews
from .blending import BlendConfig
from .config import default_checkpoint_dir, get_settings
from .errors import NumericError, StageError, TrainingError
from .inversion import invert, reconstruct
from .masks import expand_to_rect, load_mask_pgm, save_mask_pgm
from .pipeline import (
    STAGES,
    PipelineTrace,
    ablation_config,
    ablation_ladder,
    blend,
    sweep,
)
from .predictor import (
    ConditioningVector,
    ToyConfig,
    ToyDenoiser,
    load_dataset,
    load_predictor,
    make_blob_dataset,
    save_dataset,
    train_toy,
)
from .scene import load_scene, make_scene
from .schedule import NoiseSchedule, build_schedule, default_beta_range
from .tensor import load_latent, save_latent

logger = logging.getLogger(__name__)

console = Console(soft_wrap=True)
err_console = Console(stderr=True, soft_wrap=True)

BACKGROUND_TOLERANCE = 1e-4

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_RUNTIME = 3


def exit_code_for(e: BaseException) -> int:
    """2 for invalid inputs and missing files, 3 for failures while computing."""
    if isinstance(e, StageError):
        return exit_code_for(e.cause)
    if isinstance(e, TrainingError):
        return EXIT_USAGE if e.step is None else EXIT_RUNTIME
    if isinstance(e, NumericError):
        return EXIT_RUNTIME
    if isinstance(e, (ValueError, FileNotFoundError)):
        return EXIT_USAGE
    return EXIT_RUNTIME


def _schedule_from(args: argparse.Namespace) -> NoiseSchedule:
    start, end = default_beta_range(args.T) if args.T >= 1 else (None, None)
    return build_schedule(
        args.T,
        args.beta_start if args.beta_start is not None else start,
        args.beta_end if args.beta_end is not None else end,
    )


def _parse_floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def cmd_schedule_dump(args: argparse.Namespace) -> int:
    sched = _schedule_from(args)
    if args.out:
        sched.write_csv(args.out)
        console.print(f"[green]Wrote {sched.T}-step schedule to {args.out}")
    else:
        console.print(
            sched.to_polars().select("t", "beta", "alpha_bar", "sigma").write_csv(),
            end="",
            markup=False,
            highlight=False,
        )
    return EXIT_OK


def cmd_mask_expand(args: argparse.Namespace) -> int:
    m = load_mask_pgm(args.input)
    out = expand_to_rect(m, args.margin)
    save_mask_pgm(out, args.out)
    console.print(f"[green]Expanded mask ({m.count()} -> {out.count()} pixels) written to {args.out}")
    return EXIT_OK


def cmd_invert(args: argparse.Namespace) -> int:
    x_0 = load_latent(args.input)
    sched = _schedule_from(args)
    predictor = load_predictor(args.predictor, get_settings().checkpoint_path)
    cond = ConditioningVector.one_hot(args.cond, predictor.cond_dim or args.cond_dim)
    rec = invert(x_0, sched, predictor, cond, args.seed)
    rec.save(args.out)
    err = reconstruct(rec, sched, predictor, cond).max_abs_diff(x_0)
    console.print(f"Wrote inversion record ({sched.T} steps, seed {args.seed}) to {args.out}")
    console.print(f"round-trip max-abs error: {err:.3e}")
    return EXIT_OK


def cmd_blend(args: argparse.Namespace) -> int:
    manifest, bundle = load_scene(args.manifest)
    sched = manifest.schedule()
    predictor = load_predictor(args.predictor, get_settings().checkpoint_path)
    base = manifest.blend_config()
    overrides = {
        k: v
        for k, v in (("alpha", args.alpha), ("beta", args.beta), ("me_margin", args.me_margin))
        if v is not None
    }
    if args.dilution_convex:
        overrides["dilution_convex"] = True
    if overrides:
        base = BlendConfig(**(base.model_dump() | overrides))
    stage = args.stage or manifest.stage
    cfg = ablation_config(stage, base)

    trace = PipelineTrace(snapshots=True) if args.trace else None
    res = blend(bundle, sched, predictor, cfg, trace=trace)

    out = Path(args.out)
    save_latent(res.out, out)
    console.print(f"Wrote stage {stage} output to {out}")
    if args.preview:
        for p in save_previews(res.out, out.with_suffix("")):
            console.print(f"  preview {p}")
    if args.heatmap:
        save_heatmap(res.out, args.heatmap)
    if trace is not None:
        trace.write(args.trace)
        console.print(f"  trace written to {args.trace}")

    err = res.background_error(bundle.maskset)
    if err <= BACKGROUND_TOLERANCE:
        console.print(f"[green]background check passed: max |out - back| on background = {err:.3e}")
        return EXIT_OK
    err_console.print(f"[red]background check failed: max |out - back| on background = {err:.3e}")
    return EXIT_RUNTIME


def cmd_ablate(args: argparse.Namespace) -> int:
    manifest, bundle = load_scene(args.manifest)
    predictor = load_predictor(args.predictor, get_settings().checkpoint_path)
    report = ablation_ladder(bundle, manifest.schedule(), predictor, manifest.blend_config())
    d = Path(args.out_dir)
    d.mkdir(parents=True, exist_ok=True)
    for stage, x in report.outputs.items():
        save_latent(x, d / f"stage_{stage}.pnpl")
    report.table.write_csv(d / "ablation.csv")

    table = Table("stage", "sha256", "diff from previous", "background error")
    for row in report.table.iter_rows(named=True):
        diff = "" if row["diff_prev"] is None else f"{row['diff_prev']:.3e}"
        table.add_row(row["stage"], row["sha256"][:16], diff, f"{row['background_error']:.3e}")
    console.print(table)
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    manifest, bundle = load_scene(args.manifest)
    predictor = load_predictor(args.predictor, get_settings().checkpoint_path)
    df = sweep(bundle, manifest.schedule(), predictor, args.alphas, args.betas, manifest.blend_config())
    df.write_csv(args.out)
    summary = df.group_by("alpha", "beta", maintain_order=True).agg(
        pl.col("concept_shift").mean(), pl.col("background_error").max()
    )
    console.print(summary)
    return EXIT_OK


def cmd_make_dataset(args: argparse.Namespace) -> int:
    examples = make_blob_dataset(args.n, (args.channels, args.size, args.size), args.seed)
    save_dataset(examples, args.out)
    console.print(f"[green]Wrote {len(examples)} examples to {args.out}")
    return EXIT_OK


def cmd_train_toy(args: argparse.Namespace) -> int:
    dataset = load_dataset(args.data)
    if not dataset:
        raise TrainingError("empty dataset")
    c, h, w = dataset[0].x_0.shape
    cond_dim = max(2, max(ex.label for ex in dataset) + 1)
    model = ToyDenoiser(
        ToyConfig(channels=c, height=h, width=w, model_width=args.width, cond_dim=cond_dim),
        seed=args.seed,
    )
    sched = _schedule_from(args)
    report = train_toy(
        model, dataset, sched, args.steps, args.lr, args.seed, batch_size=args.batch_size
    )
    if args.out is None:
        out = default_checkpoint_dir() / get_settings().checkpoint_path.name
    else:
        out = Path(args.out)
    model.save(out)
    loss_csv = Path(args.loss_csv) if args.loss_csv else out.with_suffix(".loss.csv")
    report.write_csv(loss_csv)
    console.print(
        f"[green]Trained {args.steps} steps: loss {report.initial_loss:.4f} -> {report.final_loss:.4f}"
    )
    console.print(f"checkpoint {out}, losses {loss_csv}")
    return EXIT_OK


def cmd_make_scene(args: argparse.Namespace) -> int:
    path = make_scene(args.out, args.size, args.n, args.seed, channels=args.channels, T=args.T)
    console.print(f"[green]Wrote {args.n}-concept scene manifest {path}")
    return EXIT_OK


def _add_schedule_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--T", type=int, default=50, help="number of timesteps")
    p.add_argument("--beta-start", type=float, default=None)
    p.add_argument("--beta-end", type=float, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pnpmix", description="Tuning-free multi-concept compositing with diffusion latents."
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="log progress (twice for debug)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("schedule-dump", help="write the noise schedule as CSV")
    _add_schedule_args(p)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_schedule_dump)

    p = sub.add_parser("mask-expand", help="grow a mask to its padded bounding rectangle")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--margin", type=int, default=8)
    p.set_defaults(func=cmd_mask_expand)

    p = sub.add_parser("invert", help="invert a latent into noise codes")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--predictor", default="zero")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cond", type=int, default=0, help="prompt id")
    p.add_argument("--cond-dim", type=int, default=2)
    _add_schedule_args(p)
    p.set_defaults(func=cmd_invert)

    p = sub.add_parser("blend", help="composite the concepts of a scene manifest")
    p.add_argument("manifest")
    p.add_argument("--out", default="out.pnpl")
    p.add_argument("--predictor", default="toy")
    p.add_argument("--stage", choices=STAGES, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--me-margin", type=int, default=None)
    p.add_argument("--dilution-convex", action="store_true")
    p.add_argument("--preview", action="store_true", help="write one PGM preview per channel")
    p.add_argument("--heatmap", default=None, help="write a heatmap image of channel 0")
    p.add_argument("--trace", default=None, help="directory for per-timestep snapshots")
    p.set_defaults(func=cmd_blend)

    p = sub.add_parser("ablate", help="run all ablation stages of a scene")
    p.add_argument("manifest")
    p.add_argument("--out-dir", default="ablation")
    p.add_argument("--predictor", default="toy")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="sweep the guidance and dilution scales")
    p.add_argument("manifest")
    p.add_argument("--out", default="sweep.csv")
    p.add_argument("--predictor", default="toy")
    p.add_argument("--alphas", type=_parse_floats, default=[0.0, 0.15, 0.3])
    p.add_argument("--betas", type=_parse_floats, default=[0.6, 0.8, 1.0])
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("make-dataset", help="write a blob training dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--size", type=int, default=8)
    p.add_argument("--channels", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_dataset)

    p = sub.add_parser("train-toy", help="train the toy denoiser")
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None, help="checkpoint path (default: user data dir)")
    p.add_argument("--loss-csv", default=None)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--lr", type=float, default=0.02)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    _add_schedule_args(p)
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("make-scene", help="write a procedural toy scene")
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--n", type=int, default=2)
    p.add_argument("--channels", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--T", type=int, default=50)
    p.set_defaults(func=cmd_make_scene)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0) if not isinstance(e.code, str) else EXIT_USAGE

    if args.verbose:
        logging.basicConfig(
            level=logging.DEBUG if args.verbose > 1 else logging.INFO,
            format="%(message)s",
            handlers=[RichHandler(console=err_console)],
        )

    try:
        return args.func(args)
    except Exception as e:
        code = exit_code_for(e)
        if isinstance(e, FileNotFoundError) and e.filename:
            msg = f"file not found: {e.filename}"
        else:
            msg = str(e)
        err_console.print(f"[red]Error:[/red] {escape(msg)}", highlight=False)
        logger.debug("command failed", exc_info=True)
        return code
