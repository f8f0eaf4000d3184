"""End-to-end runs: pretraining, fine-tuning, retrieval probes, and the ablation grid."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .config import ALIGNMENT_MODES, MODALITY_BLOCKS, MODALITY_MODES, Config, make_config
from .dataset import TASK_TYPES, GeoDataset
from .downstream import (
    AnchorCache,
    FinetuneModel,
    build_anchor_cache,
    build_finetune_model,
    predict_rows,
    run_finetuning,
    split_anchors,
)
from .evaluation import MetricReport, evaluate
from .io import Prediction
from .model import Encoders
from .nif import TIME_MODES, window_trajectory
from .ssl import MODALITY_TERMS, EpochRecord, NegativeQueue, initial_queue, make_optimizer, run_pretraining

log = logging.getLogger(__name__)


@dataclass
class PretrainRun:
    cfg: Config
    obs_shape: tuple[int, ...]
    model: Encoders
    optimizer: torch.optim.Optimizer
    queue: NegativeQueue
    epoch: int = 0
    records: list[EpochRecord] = field(default_factory=list)

    @classmethod
    def new(cls, cfg: Config, obs_shape: Sequence[int]) -> "PretrainRun":
        model = Encoders.build(cfg, obs_shape)
        return cls(cfg, tuple(int(s) for s in obs_shape), model, make_optimizer(model, cfg), initial_queue(model, cfg))

    def train(self, dataset: GeoDataset, epochs: int, on_epoch: Callable[[EpochRecord], None] | None = None) -> list[EpochRecord]:
        recs, _, _ = run_pretraining(
            self.model, dataset, self.cfg, epochs, self.queue, self.optimizer, self.epoch + 1, on_epoch
        )
        self.epoch += epochs
        self.records.extend(recs)
        return recs

    def state(self) -> dict:
        return {
            "kind": "pretrain",
            "config": self.cfg.echo(),
            "obs_shape": list(self.obs_shape),
            "epoch": self.epoch,
            "encoders": dict(self.model.state_dict()),
            "optimizer": self.optimizer.state_dict(),
            "queue": self.queue.state(),
            "records": [[r.epoch, r.total, *r.terms] for r in self.records],
        }

    @classmethod
    def from_state(cls, state: dict) -> "PretrainRun":
        cfg = make_config(state["config"])
        run = cls.new(cfg, state["obs_shape"])
        run.model.load_state_dict(state["encoders"])
        run.optimizer.load_state_dict(state["optimizer"])
        run.queue = NegativeQueue.from_state(cfg.d, state["queue"])
        run.epoch = int(state["epoch"])
        run.records = [EpochRecord(int(r[0]), float(r[1]), tuple(float(x) for x in r[2:])) for r in state["records"]]
        return run


def reference_world_dataset(seed: int = 7, epsilon: float = 0.002, **overrides):
    """The seeded 8x8-grid reference world: 200 trajectories, 500 SVIs."""
    from .synth import generate_world

    world = generate_world(seed, grid_n=8, n_trajectories=200, n_svis=500, **overrides)
    return world, world.to_dataset(epsilon)


def holdout_svis(dataset: GeoDataset, n: int, seed: int) -> list[str]:
    """``n`` SVIs with at least one intersecting trajectory, drawn from a seeded RNG."""
    candidates = [s for s in dataset.svi_ids if dataset.intersecting[s]]
    rng = np.random.default_rng([seed, 5])
    picked = rng.choice(len(candidates), size=min(n, len(candidates)), replace=False)
    return [candidates[i] for i in np.sort(picked)]


@torch.no_grad()
def retrieval_top1(model: Encoders, dataset: GeoDataset, svi_ids: Sequence[str], cfg: Config) -> float:
    """Top-1 accuracy of matching each localized trajectory embedding to its location among ``svi_ids``."""
    model.eval()
    rows = [dataset.svi_index[s] for s in svi_ids]
    cand = F.normalize(model.encode_locations(dataset.svi_locs[rows]), dim=-1)
    target = {s: i for i, s in enumerate(svi_ids)}
    per_traj: dict[int, list] = {}
    for s in svi_ids:
        for ti, qp in dataset.intersecting[s]:
            per_traj.setdefault(ti, []).append(qp)
    hits = total = 0
    order = sorted(per_traj)
    for start in range(0, len(order), 16):
        tis = order[start : start + 16]
        trajs = [dataset.trajectories[t] for t in tis]
        windows = [window_trajectory(t, cfg.L, [cfg.seed, ti]) for t, ti in zip(trajs, tis)]
        outs = model.localized(trajs, windows, [per_traj[t] for t in tis])
        for ti, out in zip(tis, outs):
            best = (F.normalize(out, dim=-1) @ cand.T).argmax(dim=1).tolist()
            truth = [target[p.svi_id] for p in per_traj[ti]]
            hits += sum(b == t for b, t in zip(best, truth))
            total += len(truth)
    model.train()
    return hits / total


@dataclass
class FinetuneRun:
    cfg: Config
    task: str
    model: FinetuneModel
    optimizer: torch.optim.Optimizer
    cache: AnchorCache
    train_rows: np.ndarray
    test_rows: np.ndarray
    losses: list[float] = field(default_factory=list)

    @property
    def task_type(self) -> str:
        return TASK_TYPES[self.task]

    def train(self, epochs: int) -> list[float]:
        losses, _ = run_finetuning(self.model, self.cache, self.train_rows, self.cfg, epochs, self.optimizer, len(self.losses) + 1)
        self.losses.extend(losses)
        return losses

    def predictions(self, rows: Sequence[int] | None = None) -> list[Prediction]:
        rows = self.test_rows if rows is None else rows
        ids, out = predict_rows(self.model, self.cache, rows, self.cfg)
        labels = self.cache.targets[torch.as_tensor(np.asarray(rows), dtype=torch.long)]
        preds = []
        for s, p, y in zip(ids, out, labels):
            if self.task_type == "regression":
                preds.append(Prediction(s, self.task, float(p), float(y)))
            elif self.task_type == "classification":
                preds.append(Prediction(s, self.task, p.tolist(), int(y)))
            else:
                preds.append(Prediction(s, self.task, p.tolist(), y.tolist()))
        return preds

    def report(self, rows: Sequence[int] | None = None) -> MetricReport:
        preds = self.predictions(rows)
        return report_from_predictions(self.task, preds, self.cfg)

    def state(self) -> dict:
        return {
            "kind": "finetune",
            "config": self.cfg.echo(),
            "task": self.task,
            "epoch": len(self.losses),
            "losses": list(self.losses),
            "head": dict(self.model.state_dict()),
            "optimizer": self.optimizer.state_dict(),
        }


def report_from_predictions(task: str, preds: Sequence[Prediction], cfg: Config | dict | None = None) -> MetricReport:
    echo = cfg.echo() if isinstance(cfg, Config) else dict(cfg or {})
    config = {k: echo.get(k) for k in ("alignment_mode", "modality_mode", "time_mode", "seed")}
    return evaluate(task, TASK_TYPES[task], [p.prediction for p in preds], [p.label for p in preds], config)


def start_finetune(encoders: Encoders, dataset: GeoDataset, cfg: Config, task: str, cache: AnchorCache | None = None) -> FinetuneRun:
    for p in encoders.parameters():
        p.requires_grad_(False)
    cache = cache or build_anchor_cache(encoders, dataset, cfg, task)
    train_rows, test_rows = split_anchors(len(cache), cfg.train_fraction, cfg.seed)
    n_classes = None
    if TASK_TYPES[task] == "classification":
        n_classes = int(max(int(v) for v in dataset.labels[task].values())) + 1
    model = build_finetune_model(cfg, cache, train_rows, n_classes)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.finetune_lr, weight_decay=cfg.weight_decay)
    return FinetuneRun(cfg, task, model, opt, cache, train_rows, test_rows)


# ablation grid

CELL = tuple[str, str, str]  # (alignment, modality, time)


def ablation_cells(grid: str = "full") -> list[CELL]:
    """``full``: every alignment x modality x time combination.

    ``oneway``: fine_grain/full/synthetic plus each single-factor change from it.
    """
    if grid == "full":
        return list(itertools.product(ALIGNMENT_MODES, MODALITY_MODES, TIME_MODES))
    if grid == "oneway":
        base = ("fine_grain", "full", "synthetic")
        cells = [base]
        cells += [(a, "full", "synthetic") for a in ALIGNMENT_MODES if a != base[0]]
        cells += [("fine_grain", m, "synthetic") for m in MODALITY_MODES if m != base[1]]
        cells += [("fine_grain", "full", t) for t in TIME_MODES if t != base[2]]
        return cells
    raise ValueError(f"unknown grid {grid!r}")


def _uses_trajectory(modality: str) -> bool:
    return "trajectory" in MODALITY_BLOCKS[modality] or any(MODALITY_TERMS[modality][1:])


def pretrain_key(cell: CELL) -> tuple:
    """Cells with equal keys train bit-identical encoders for a given seed."""
    align, modality, time = cell
    if align == "no_align":
        return ("untrained",)
    terms = MODALITY_TERMS[modality]
    traj = any(terms[1:])
    return (terms, align if traj else "-", time if traj and align == "fine_grain" else "-")


def finetune_key(cell: CELL) -> tuple:
    """Cells with equal keys produce identical fine-tuning results for a given seed."""
    align, modality, time = cell
    traj = "trajectory" in MODALITY_BLOCKS[modality]
    embed = ("segment" if align == "segment_based" else ("localized", time)) if traj else "-"
    return (pretrain_key(cell), modality, embed)


def run_ablation(
    dataset: GeoDataset,
    base: Config,
    seeds: Sequence[int],
    cells: Sequence[CELL],
    pretrain_epochs: int,
    finetune_epochs: int,
    task: str = "speed",
    progress: Callable[[str], None] | None = None,
) -> list[MetricReport]:
    """One report per (cell, seed). Cells sharing an effective computation share its result."""
    reports = []
    for seed in seeds:
        encoders: dict[tuple, Encoders] = {}
        finetuned: dict[tuple, MetricReport] = {}
        for cell in cells:
            align, modality, time = cell
            cfg = base.replace(seed=seed, alignment_mode=align, modality_mode=modality, time_mode=time)
            fk = finetune_key(cell)
            if fk not in finetuned:
                pk = pretrain_key(cell)
                if pk not in encoders:
                    run = PretrainRun.new(cfg, tuple(dataset.images.shape[1:]))
                    if pk != ("untrained",):
                        run.train(dataset, pretrain_epochs)
                    encoders[pk] = run.model
                ft = start_finetune(encoders[pk], dataset, cfg, task)
                ft.train(finetune_epochs)
                finetuned[fk] = ft.report()
            rep = finetuned[fk]
            reports.append(MetricReport(rep.task, dict(rep.metrics), rep.n, {**rep.config, "alignment_mode": align, "modality_mode": modality, "time_mode": time, "seed": seed}))
            if progress is not None:
                progress(f"seed {seed} {'/'.join(cell)} " + " ".join(f"{k}={v:.4f}" for k, v in rep.metrics.items()))
    return reports
