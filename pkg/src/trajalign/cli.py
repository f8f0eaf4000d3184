"""Command-line entry point.

Every subcommand accepts ``--config``, ``--seed`` and ``--out``. Exit status is
0 on success and nonzero with a one-line diagnostic on failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .config import Config, load_config
from .dataset import TASK_TYPES, TASKS
from .errors import TrajAlignError, UnknownSubcommand
from .evaluation import MetricReport, ablation_report, format_table, rows_to_jsonl
from .geom import Footprint, QueryPoint, project_onto_footprint, synthetic_query_time
from .io import (
    DATA_FILES,
    EMBED_HEADER,
    SVIRecord,
    atomic_write_text,
    fmt_vector,
    load_checkpoint,
    load_data_dir,
    load_predictions,
    load_queries,
    save_checkpoint,
    write_features,
    write_labels,
    write_loss_log,
    write_predictions,
    write_roads,
    write_svi_manifest,
    write_trajectories,
)
from .nif import window_trajectory
from .pipeline import PretrainRun, ablation_cells, report_from_predictions, run_ablation, start_finetune

log = logging.getLogger("trajalign")

SUBCOMMANDS = ("gen-synth", "pretrain", "finetune", "evaluate", "export-embeddings", "ablate", "report")


def _config(args, **extra) -> Config:
    return load_config(args.config, seed=args.seed, **extra)


def _load_data(args, cfg: Config):
    ds, dropped = load_data_dir(args.data, cfg.epsilon, cfg.geo_bounds, cfg.quality_threshold)
    if dropped:
        log.info("dropped %d street-view rows below quality %.2f", dropped, cfg.quality_threshold)
    return ds


def cmd_gen_synth(args) -> None:
    from .synth import generate_world

    world = generate_world(
        args.seed if args.seed is not None else 7,
        grid_n=args.grid_n,
        n_trajectories=args.trajectories,
        n_svis=args.svis,
        image_mode=args.image_mode,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_trajectories(out / DATA_FILES["trajectories"], world.trajectories)
    write_roads(out / DATA_FILES["roads"], world.road_graph)
    write_labels(out / DATA_FILES["labels"], world.labels)
    if args.image_mode == "image":
        np.save(out / DATA_FILES["images"], world.images, allow_pickle=False)
        refs = [f"npy:{DATA_FILES['images']}#{k}" for k in range(len(world.svi_ids))]
    else:
        write_features(out / DATA_FILES["features"], dict(zip(world.svi_ids, world.features)))
        refs = [f"feat:{DATA_FILES['features']}"] * len(world.svi_ids)
    records = [SVIRecord(s, tuple(loc), r, float(q)) for s, loc, r, q in zip(world.svi_ids, world.svi_locs, refs, world.quality)]
    write_svi_manifest(out / DATA_FILES["svis"], records)
    log.info("wrote %d trajectories and %d street-view records to %s", len(world.trajectories), len(records), out)


def cmd_pretrain(args) -> None:
    if args.resume:
        run = PretrainRun.from_state(load_checkpoint(args.resume))
        cfg = run.cfg
    else:
        cfg = _config(args)
        run = None
    ds = _load_data(args, cfg)
    if run is None:
        run = PretrainRun.new(cfg, tuple(ds.images.shape[1:]))
    epochs = args.epochs if args.epochs is not None else cfg.pretrain_epochs - run.epoch
    run.train(ds, max(0, epochs), lambda r: log.info("epoch %d loss %.6f", r.epoch, r.total))
    out = Path(args.out)
    save_checkpoint(out / "pretrain.ckpt", run.state())
    write_loss_log(out / "loss_log.tsv", run.records)


def cmd_finetune(args) -> None:
    state = load_checkpoint(args.checkpoint)
    run = PretrainRun.from_state(state)
    cfg = run.cfg
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    ds = _load_data(args, cfg)
    ft = start_finetune(run.model, ds, cfg, args.task)
    epochs = args.epochs if args.epochs is not None else cfg.finetune_epochs
    ft.train(epochs)
    out = Path(args.out)
    save_checkpoint(out / "finetune.ckpt", {**ft.state(), "encoders": state["encoders"], "obs_shape": state["obs_shape"]})
    write_predictions(out / "predictions.tsv", ft.predictions())
    atomic_write_text(out / "finetune_loss.tsv", "epoch\tloss\n" + "".join(f"{i}\t{l!r}\n" for i, l in enumerate(ft.losses, 1)))


def cmd_evaluate(args) -> None:
    preds = load_predictions(args.predictions)
    if not preds:
        raise TrajAlignError(f"{args.predictions}: no predictions")
    tasks = sorted({p.task for p in preds})
    cfg = json.loads(Path(args.run_config).read_text()) if args.run_config else {}
    reports = [report_from_predictions(t, [p for p in preds if p.task == t], cfg) for t in tasks]
    out = Path(args.out)
    lines = []
    for r in reports:
        lines.append(f"task {r.task} (n={r.n})")
        lines += [f"  {k:<8}{v:.6f}" for k, v in r.metrics.items()]
    atomic_write_text(out / "report.txt", "\n".join(lines) + "\n")
    atomic_write_text(out / "report.jsonl", "".join(r.to_json() + "\n" for r in reports))
    print("\n".join(lines))


@torch.no_grad()
def cmd_export_embeddings(args) -> None:
    run = PretrainRun.from_state(load_checkpoint(args.checkpoint))
    cfg = run.cfg
    ds = _load_data(args, cfg)
    model = run.model.eval()
    lines = [EMBED_HEADER]
    for traj_id, svi_id in load_queries(args.queries):
        if traj_id not in ds.traj_index or svi_id not in ds.svi_index:
            raise TrajAlignError(f"unknown query pair ({traj_id}, {svi_id})")
        ti = ds.traj_index[traj_id]
        traj = ds.trajectories[ti]
        loc = ds.svi_location(svi_id)
        seg, lam = project_onto_footprint(loc, Footprint.from_trajectory(traj))
        qp = QueryPoint(svi_id, (float(loc[0]), float(loc[1])), seg, lam, synthetic_query_time(traj, seg, lam))
        window = window_trajectory(traj, cfg.L, [cfg.seed, ti])
        e = model.localized([traj], [window], [[qp]])[0][0]
        h_svi = model.encode_images(ds.image(svi_id)[None])[0]
        h_loc = model.encode_locations(loc[None])[0]
        lines.append("\t".join([traj_id, svi_id, fmt_vector(e.tolist()), fmt_vector(h_svi.tolist()), fmt_vector(h_loc.tolist())]))
    atomic_write_text(Path(args.out) / "embeddings.tsv", "\n".join(lines) + "\n")


def _write_ablation(out: Path, reports: Sequence[MetricReport], cells) -> str:
    rows = ablation_report(reports, cells)
    table = format_table(rows)
    atomic_write_text(out / "ablation.txt", table)
    atomic_write_text(out / "ablation.jsonl", rows_to_jsonl(rows))
    return table


def cmd_ablate(args) -> None:
    cfg = _config(args)
    ds = _load_data(args, cfg)
    seeds = args.seeds or [cfg.seed]
    cells = ablation_cells(args.grid)
    reports = run_ablation(
        ds,
        cfg,
        seeds,
        cells,
        args.pretrain_epochs if args.pretrain_epochs is not None else cfg.pretrain_epochs,
        args.finetune_epochs if args.finetune_epochs is not None else cfg.finetune_epochs,
        args.task,
        progress=log.info,
    )
    out = Path(args.out)
    atomic_write_text(out / "runs.jsonl", "".join(r.to_json() + "\n" for r in reports))
    print(_write_ablation(out, reports, cells), end="")


def cmd_report(args) -> None:
    reports = [MetricReport.from_json(l) for l in Path(args.runs).read_text().splitlines() if l.strip()]
    cells = ablation_cells(args.grid) if args.grid else list(dict.fromkeys(
        (str(r.config.get("alignment_mode")), str(r.config.get("modality_mode")), str(r.config.get("time_mode"))) for r in reports
    ))
    print(_write_ablation(Path(args.out), reports, cells), end="")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON or YAML config file")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="trajalign", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", parents=[common], help="write a synthetic world to --out")
    p.add_argument("--grid-n", type=int, default=8)
    p.add_argument("--trajectories", type=int, default=200)
    p.add_argument("--svis", type=int, default=500)
    p.add_argument("--image-mode", choices=("image", "features"), default="image")
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("pretrain", parents=[common], help="contrastive pretraining")
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int, help="defaults to pretrain_epochs minus epochs already done")
    p.add_argument("--resume", help="continue from a pretraining checkpoint")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", parents=[common], help="train the task head on frozen encoders")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--task", choices=TASKS, required=True)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", parents=[common], help="metrics for a prediction file")
    p.add_argument("--predictions", required=True)
    p.add_argument("--run-config", help="JSON config echo attached to the report")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("export-embeddings", parents=[common], help="e_traj, h_svi and h_loc per query")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--queries", required=True)
    p.set_defaults(func=cmd_export_embeddings)

    p = sub.add_parser("ablate", parents=[common], help="run the ablation grid")
    p.add_argument("--data", required=True)
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--grid", choices=("full", "oneway"), default="full")
    p.add_argument("--task", choices=TASKS, default="speed")
    p.add_argument("--pretrain-epochs", type=int)
    p.add_argument("--finetune-epochs", type=int)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", parents=[common], help="format existing ablation runs")
    p.add_argument("--runs", required=True, help="runs.jsonl written by ablate")
    p.add_argument("--grid", choices=("full", "oneway"))
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        command = argv[0] if argv and not argv[0].startswith("-") else None
        if command is not None and command not in SUBCOMMANDS:
            raise UnknownSubcommand(f"unknown subcommand {command!r}; expected one of {', '.join(SUBCOMMANDS)}")
        args = build_parser().parse_args(argv)
    except UnknownSubcommand as exc:
        print(f"trajalign: error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except (TrajAlignError, OSError, ValueError, KeyError) as exc:
        print(f"trajalign: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
