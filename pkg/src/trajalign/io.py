"""Line-record file formats, data-directory ingestion, and checkpoints.

Every text file starts with one header line. Coordinates on disk are
(lat, lon) and are normalized against the configured bounds on load.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch

from .dataset import TASK_TYPES, GeoDataset
from .errors import InvalidTrajectory, OutOfBounds, ParseError
from .geom import GeoBounds, RoadSegment, Trajectory, denormalize_coords, normalize_coords

TRAJ_HEADER = "traj_id\twaypoints"
SVI_HEADER = "svi_id\tlat\tlon\tref\tquality"
LABEL_HEADER = "svi_id\ttask\tvalue"
LOSS_HEADER = "epoch\ttotal\tterm1\tterm2\tterm3"
PRED_HEADER = "svi_id\ttask\tprediction\tlabel"
ROAD_HEADER = "segment_id\tstart\tend"
QUERY_HEADER = "traj_id\tsvi_id"
EMBED_HEADER = "traj_id\tsvi_id\te_traj\th_svi\th_loc"

CHECKPOINT_MAGIC = b"TRAJALIGN-CKPT\n"
CHECKPOINT_VERSION = 1


def fmt_float(x: float) -> str:
    return repr(float(x))


def fmt_vector(v: Iterable[float]) -> str:
    return ",".join(fmt_float(x) for x in v)


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _records(path: str | Path, header: str | None = None):
    """Yield (line number, tab-split fields) after the header; blank lines are skipped."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        return
    if header is not None and lines[0].split("\t")[0] != header.split("\t")[0]:
        raise ParseError(f"{path}: expected header starting with {header.split(chr(9))[0]!r}", 1)
    for no, line in enumerate(lines[1:], start=2):
        if line.strip():
            yield no, line.split("\t")


def _float(text: str, line: int, what: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise ParseError(f"bad {what} {text!r}", line) from None


# trajectories


def load_trajectories(path: str | Path, bounds: GeoBounds | None = None) -> list[Trajectory]:
    bounds = bounds or GeoBounds.unit()
    out = []
    for no, fields in _records(path, TRAJ_HEADER):
        if len(fields) != 2:
            raise ParseError(f"expected 2 fields, got {len(fields)}", no)
        traj_id, body = fields
        coords, times = [], []
        for k, triple in enumerate(body.split(";")):
            parts = triple.split(",")
            if len(parts) != 3:
                raise ParseError(f"waypoint {k} of {traj_id!r} is not lat,lon,t", no)
            lat, lon, t = (_float(p, no, "number") for p in parts)
            try:
                coords.append(normalize_coords(lat, lon, bounds))
            except OutOfBounds:
                raise OutOfBounds(f"trajectory {traj_id!r} waypoint {k} outside bounds") from None
            times.append(t)
        try:
            out.append(Trajectory(traj_id, np.array(coords), np.array(times)))
        except InvalidTrajectory as exc:
            raise InvalidTrajectory(f"trajectory {traj_id!r} (line {no}): {exc}") from None
    return out


def write_trajectories(path: str | Path, trajectories: Sequence[Trajectory], bounds: GeoBounds | None = None) -> None:
    bounds = bounds or GeoBounds.unit()
    lines = [TRAJ_HEADER]
    for t in trajectories:
        pts = []
        for (x, y), time in zip(t.coords, t.times):
            lat, lon = denormalize_coords(x, y, bounds)
            pts.append(f"{fmt_float(lat)},{fmt_float(lon)},{fmt_float(time)}")
        lines.append(f"{t.id}\t{';'.join(pts)}")
    atomic_write_text(path, "\n".join(lines) + "\n")


# street-view manifest


@dataclass(frozen=True)
class SVIRecord:
    svi_id: str
    location: tuple[float, float]  # normalized
    ref: str
    quality: float


def load_svi_manifest(
    path: str | Path, bounds: GeoBounds | None = None, quality_threshold: float = 0.8
) -> tuple[list[SVIRecord], int]:
    """Records at or above the quality threshold, and the number dropped."""
    bounds = bounds or GeoBounds.unit()
    kept, dropped, seen = [], 0, set()
    for no, fields in _records(path, SVI_HEADER):
        if len(fields) != 5:
            raise ParseError(f"expected 5 fields, got {len(fields)}", no)
        svi_id, lat, lon, ref, quality = fields
        if svi_id in seen:
            raise ParseError(f"duplicate svi_id {svi_id!r}", no)
        seen.add(svi_id)
        q = _float(quality, no, "quality")
        if q < quality_threshold:
            dropped += 1
            continue
        try:
            loc = normalize_coords(_float(lat, no, "lat"), _float(lon, no, "lon"), bounds)
        except OutOfBounds:
            raise OutOfBounds(f"svi {svi_id!r} (line {no}) outside bounds") from None
        kept.append(SVIRecord(svi_id, loc, ref, q))
    return kept, dropped


def write_svi_manifest(path: str | Path, records: Sequence[SVIRecord], bounds: GeoBounds | None = None) -> None:
    bounds = bounds or GeoBounds.unit()
    lines = [SVI_HEADER]
    for r in records:
        lat, lon = denormalize_coords(*r.location, bounds)
        lines.append(f"{r.svi_id}\t{fmt_float(lat)}\t{fmt_float(lon)}\t{r.ref}\t{fmt_float(r.quality)}")
    atomic_write_text(path, "\n".join(lines) + "\n")


# labels


def load_labels(path: str | Path) -> dict[str, dict[str, object]]:
    """task -> svi_id -> value (float, int class, or list for distributions)."""
    out: dict[str, dict[str, object]] = {}
    for no, fields in _records(path, LABEL_HEADER):
        if len(fields) != 3:
            raise ParseError(f"expected 3 fields, got {len(fields)}", no)
        svi_id, task, value = fields
        kind = TASK_TYPES.get(task)
        if kind is None:
            raise ParseError(f"unknown task {task!r}", no)
        if kind == "distribution":
            vec = [_float(v, no, "proportion") for v in value.split(",")]
            if any(v < 0 for v in vec) or abs(sum(vec) - 1.0) > 1e-6:
                raise ParseError(f"distribution for {svi_id!r} is not on the simplex", no)
            parsed: object = vec
        elif kind == "classification":
            try:
                parsed = int(value)
            except ValueError:
                raise ParseError(f"bad class {value!r}", no) from None
        else:
            parsed = _float(value, no, "value")
        out.setdefault(task, {})[svi_id] = parsed
    return out


def _fmt_value(v) -> str:
    if isinstance(v, (list, tuple, np.ndarray)):
        return fmt_vector(v)
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return fmt_float(v)


def write_labels(path: str | Path, labels: Mapping[str, Mapping[str, object]]) -> None:
    lines = [LABEL_HEADER]
    for task in sorted(labels):
        for svi_id, v in labels[task].items():
            lines.append(f"{svi_id}\t{task}\t{_fmt_value(v)}")
    atomic_write_text(path, "\n".join(lines) + "\n")


# feature vectors


def load_features(path: str | Path) -> dict[str, np.ndarray]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("svi_id\tdim="):
        raise ParseError("feature file must start with 'svi_id<TAB>dim=K'", 1)
    dim = int(_float(lines[0].split("dim=")[1], 1, "dimension"))
    out = {}
    for no, fields in _records(path):
        if len(fields) != 2:
            raise ParseError(f"expected 2 fields, got {len(fields)}", no)
        vec = np.array([_float(v, no, "feature") for v in fields[1].split(",")])
        if len(vec) != dim:
            raise ParseError(f"expected {dim} values, got {len(vec)}", no)
        out[fields[0]] = vec
    return out


def write_features(path: str | Path, features: Mapping[str, np.ndarray]) -> None:
    dims = {len(v) for v in features.values()}
    if len(dims) > 1:
        raise ValueError("feature vectors differ in length")
    dim = dims.pop() if dims else 0
    lines = [f"svi_id\tdim={dim}"] + [f"{k}\t{fmt_vector(v)}" for k, v in features.items()]
    atomic_write_text(path, "\n".join(lines) + "\n")


# road graph


def load_roads(path: str | Path, bounds: GeoBounds | None = None) -> list[RoadSegment]:
    bounds = bounds or GeoBounds.unit()
    out = []
    for no, fields in _records(path, ROAD_HEADER):
        if len(fields) != 3:
            raise ParseError(f"expected 3 fields, got {len(fields)}", no)
        ends = []
        for f in fields[1:]:
            lat, lon = (_float(v, no, "coordinate") for v in f.split(","))
            ends.append(normalize_coords(lat, lon, bounds))
        out.append(RoadSegment(int(fields[0]), *ends))
    return out


def write_roads(path: str | Path, segments: Sequence[RoadSegment], bounds: GeoBounds | None = None) -> None:
    bounds = bounds or GeoBounds.unit()
    lines = [ROAD_HEADER]
    for s in segments:
        a = denormalize_coords(*s.start, bounds)
        b = denormalize_coords(*s.end, bounds)
        lines.append(f"{s.segment_id}\t{fmt_vector(a)}\t{fmt_vector(b)}")
    atomic_write_text(path, "\n".join(lines) + "\n")


# logs, predictions, queries


def write_loss_log(path: str | Path, records) -> None:
    atomic_write_text(path, "\n".join([LOSS_HEADER] + [r.line() for r in records]) + "\n")


def load_loss_log(path: str | Path) -> list[tuple[int, float, float, float, float]]:
    out = []
    for no, fields in _records(path, LOSS_HEADER):
        if len(fields) != 5:
            raise ParseError(f"expected 5 fields, got {len(fields)}", no)
        out.append((int(fields[0]), *(_float(f, no, "loss") for f in fields[1:])))
    return out


@dataclass(frozen=True)
class Prediction:
    svi_id: str
    task: str
    prediction: object
    label: object


def write_predictions(path: str | Path, preds: Sequence[Prediction]) -> None:
    lines = [PRED_HEADER] + [f"{p.svi_id}\t{p.task}\t{_fmt_value(p.prediction)}\t{_fmt_value(p.label)}" for p in preds]
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_predictions(path: str | Path) -> list[Prediction]:
    out = []
    for no, fields in _records(path, PRED_HEADER):
        if len(fields) != 4:
            raise ParseError(f"expected 4 fields, got {len(fields)}", no)
        svi_id, task, pred, label = fields
        kind = TASK_TYPES.get(task)
        if kind is None:
            raise ParseError(f"unknown task {task!r}", no)
        pv = [_float(v, no, "prediction") for v in pred.split(",")]
        if kind == "regression":
            out.append(Prediction(svi_id, task, pv[0], _float(label, no, "label")))
        elif kind == "classification":
            out.append(Prediction(svi_id, task, pv, int(label)))
        else:
            out.append(Prediction(svi_id, task, pv, [_float(v, no, "label") for v in label.split(",")]))
    return out


def load_queries(path: str | Path) -> list[tuple[str, str]]:
    out = []
    for no, fields in _records(path, QUERY_HEADER):
        if len(fields) != 2:
            raise ParseError(f"expected 2 fields, got {len(fields)}", no)
        out.append((fields[0], fields[1]))
    return out


def write_queries(path: str | Path, queries: Sequence[tuple[str, str]]) -> None:
    atomic_write_text(path, "\n".join([QUERY_HEADER] + [f"{t}\t{s}" for t, s in queries]) + "\n")


# data directories

DATA_FILES = {
    "trajectories": "trajectories.tsv",
    "svis": "svi.tsv",
    "labels": "labels.tsv",
    "roads": "roads.tsv",
    "images": "images.npy",
    "features": "features.tsv",
}


def resolve_observations(records: Sequence[SVIRecord], root: Path) -> torch.Tensor:
    """Resolve ``npy:<file>#<row>`` image refs and ``feat:<file>`` feature refs."""
    arrays: dict[str, np.ndarray] = {}
    tables: dict[str, dict[str, np.ndarray]] = {}
    rows = []
    for r in records:
        scheme, _, rest = r.ref.partition(":")
        if scheme == "npy":
            name, _, idx = rest.partition("#")
            if name not in arrays:
                arrays[name] = np.load(root / name, allow_pickle=False)
            rows.append(arrays[name][int(idx)])
        elif scheme == "feat":
            if rest not in tables:
                tables[rest] = load_features(root / rest)
            if r.svi_id not in tables[rest]:
                raise ParseError(f"no feature row for {r.svi_id!r} in {rest}")
            rows.append(tables[rest][r.svi_id])
        else:
            raise ParseError(f"unsupported reference {r.ref!r} for {r.svi_id!r}")
    if not rows:
        return torch.zeros(0)
    return torch.as_tensor(np.stack(rows).astype(np.float32))


def load_data_dir(
    root: str | Path, epsilon: float, bounds: GeoBounds | None = None, quality_threshold: float = 0.8
) -> tuple[GeoDataset, int]:
    """Dataset from a directory in the standard layout, and the count of SVIs dropped for quality."""
    root = Path(root)
    trajs = load_trajectories(root / DATA_FILES["trajectories"], bounds)
    records, dropped = load_svi_manifest(root / DATA_FILES["svis"], bounds, quality_threshold)
    obs = resolve_observations(records, root)
    roads = load_roads(root / DATA_FILES["roads"], bounds) if (root / DATA_FILES["roads"]).exists() else None
    labels = load_labels(root / DATA_FILES["labels"]) if (root / DATA_FILES["labels"]).exists() else {}
    kept = {r.svi_id for r in records}
    labels = {t: {s: v for s, v in lab.items() if s in kept} for t, lab in labels.items()}
    ds = GeoDataset(
        trajectories=trajs,
        svi_ids=[r.svi_id for r in records],
        svi_locs=np.array([r.location for r in records]).reshape(-1, 2),
        images=obs,
        epsilon=epsilon,
        road_graph=roads,
        labels=labels,
    )
    return ds, dropped


# checkpoints


def _pack(obj, blobs: list[np.ndarray]):
    if torch.is_tensor(obj):
        blobs.append(obj.detach().cpu().contiguous().numpy())
        return {"__tensor__": len(blobs) - 1, "torch": True}
    if isinstance(obj, np.ndarray):
        blobs.append(np.ascontiguousarray(obj))
        return {"__tensor__": len(blobs) - 1, "torch": False}
    if isinstance(obj, dict):
        if all(isinstance(k, str) for k in obj):
            return {"__dict__": [[k, _pack(v, blobs)] for k, v in obj.items()]}
        return {"__intdict__": [[int(k), _pack(v, blobs)] for k, v in obj.items()]}
    if isinstance(obj, (list, tuple)):
        return {"__list__": [_pack(v, blobs) for v in obj]}
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def _unpack(obj, blobs: list[np.ndarray]):
    if isinstance(obj, dict):
        if "__tensor__" in obj:
            arr = blobs[obj["__tensor__"]]
            return torch.from_numpy(arr.copy()) if obj["torch"] else arr.copy()
        if "__dict__" in obj:
            return {k: _unpack(v, blobs) for k, v in obj["__dict__"]}
        if "__intdict__" in obj:
            return {int(k): _unpack(v, blobs) for k, v in obj["__intdict__"]}
        if "__list__" in obj:
            return [_unpack(v, blobs) for v in obj["__list__"]]
    return obj


def checkpoint_bytes(state: Mapping) -> bytes:
    """Serialize nested dicts/lists of tensors, arrays and JSON scalars deterministically."""
    blobs: list[np.ndarray] = []
    tree = _pack({"format_version": CHECKPOINT_VERSION, **state}, blobs)
    meta = [{"dtype": b.dtype.str, "shape": list(b.shape)} for b in blobs]
    header = json.dumps({"tree": tree, "blobs": meta}, sort_keys=True, allow_nan=True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<Q", len(header)), header]
    parts += [b.tobytes() for b in blobs]
    return b"".join(parts)


def checkpoint_from_bytes(data: bytes) -> dict:
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ParseError("not a checkpoint file")
    pos = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    header = json.loads(data[pos : pos + hlen].decode("utf-8"))
    pos += hlen
    blobs = []
    for m in header["blobs"]:
        dt = np.dtype(m["dtype"])
        n = int(np.prod(m["shape"], dtype=np.int64)) * dt.itemsize
        blobs.append(np.frombuffer(data[pos : pos + n], dtype=dt).reshape(m["shape"]))
        pos += n
    state = _unpack(header["tree"], blobs)
    if state.get("format_version") != CHECKPOINT_VERSION:
        raise ParseError(f"unsupported checkpoint version {state.get('format_version')}")
    return state


def save_checkpoint(path: str | Path, state: Mapping) -> None:
    atomic_write_bytes(path, checkpoint_bytes(state))


def load_checkpoint(path: str | Path) -> dict:
    return checkpoint_from_bytes(Path(path).read_bytes())
