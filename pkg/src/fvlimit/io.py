"""Run directories: delimited outputs, event summaries, population snapshots and the manifest."""

from __future__ import annotations

import csv
import datetime as _dt
import json
import os
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import __version__
from .config import canonical_json, config_hash
from .engine.simulate import TrajectoryRecord
from .model import PopulationState


def fmt(x) -> str:
    """Shortest round-trip text for a number; stable across runs."""
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, float) and not np.isfinite(obj):
        return str(obj)
    return obj


def dumps(obj) -> str:
    return json.dumps(_jsonable(obj), sort_keys=True, indent=1)


def run_hash(raw: dict, command: Sequence[str]) -> str:
    return config_hash({"config": raw, "command": list(command)})


class RunDir:
    """Collects the files of one run under ``root/<hash>/``; the manifest is written last."""

    def __init__(self, root: str | Path, raw: dict, command: Sequence[str], seed: Optional[int]):
        self.raw = raw
        self.command = list(command)
        self.seed = seed
        self.hash = run_hash(raw, command)
        self.path = Path(root) / self.hash
        self.path.mkdir(parents=True, exist_ok=True)
        self.files: list[str] = []
        self.started = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")

    def _register(self, name: str) -> Path:
        if name not in self.files:
            self.files.append(name)
        return self.path / name

    def write_text(self, name: str, text: str) -> Path:
        p = self._register(name)
        p.write_text(text)
        return p

    def write_json(self, name: str, obj) -> Path:
        return self.write_text(name, dumps(obj) + "\n")

    def write_csv(self, name: str, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
        p = self._register(name)
        with p.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([fmt(x) for x in row])
        return p

    def write_jsonl(self, name: str, records: Iterable[dict]) -> Path:
        p = self._register(name)
        with p.open("w") as fh:
            for r in records:
                fh.write(json.dumps(_jsonable(r), sort_keys=True) + "\n")
        return p

    def figure(self, name: str, fig) -> Path:
        from .plotting import save

        p = self._register(name)
        save(fig, p)
        return p

    def finish(self, status: str, exit_code: int, summary: Optional[dict] = None) -> Path:
        manifest = {
            "config_hash": config_hash(self.raw),
            "run_hash": self.hash,
            "command": self.command,
            "seed": self.seed,
            "code_version": __version__,
            "status": status,
            "exit_code": exit_code,
            "started": self.started,
            "finished": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
            "files": sorted(self.files),
            "config": json.loads(canonical_json(self.raw)),
        }
        if summary is not None:
            manifest["summary"] = _jsonable(summary)
        tmp = self.path / ".manifest.json.tmp"
        tmp.write_text(dumps(manifest) + "\n")
        os.replace(tmp, self.path / "manifest.json")
        return self.path / "manifest.json"


TIMESTAMP_KEYS = ("started", "finished")


def read_manifest(path: str | Path, strip_timestamps: bool = False) -> dict:
    m = json.loads(Path(path).read_text())
    if strip_timestamps:
        for k in TIMESTAMP_KEYS:
            m.pop(k, None)
    return m


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------


def trajectory_rows(records: Sequence[TrajectoryRecord]):
    names = sorted(records[0].observables) if records else []
    q = records[0].q if records else 0
    header = ["replicate", "t"] + [f"n_{i + 1}" for i in range(q)] + [f"h_{i + 1}" for i in range(q)]
    header += [f"{n}|mu_{i + 1}" for n in names for i in range(q)]

    def rows():
        for r, rec in enumerate(records):
            for g, t in enumerate(rec.times):
                row = [r, t, *rec.counts[g], *(rec.counts[g] / rec.N)]
                for n in names:
                    row.extend(rec.observables[n][g])
                yield row

    return header, rows()


def trajectory_meta(records: Sequence[TrajectoryRecord]) -> dict:
    return {
        "replicates": [
            {"N": rec.N, "q": rec.q, "t_N": rec.t_N, "T_end": rec.T_end, "status": rec.status,
             "status_time": rec.status_time, "counters": rec.counters}
            for rec in records
        ]
    }


def read_trajectories(csv_path: str | Path, meta_path: str | Path) -> list[TrajectoryRecord]:
    """Rebuild records from ``trajectories.csv`` and its metadata so diagnostics can be recomputed."""
    meta = json.loads(Path(meta_path).read_text())["replicates"]
    with Path(csv_path).open() as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [r for r in reader]
    q = meta[0]["q"] if meta else 0
    obs_cols = header[2 + 2 * q:]
    names = []
    for c in obs_cols[::q] if q else []:
        names.append(c.rsplit("|", 1)[0])
    out = []
    for r, m in enumerate(meta):
        mine = [row for row in rows if int(row[0]) == r]
        times = np.array([float(row[1]) for row in mine])
        counts = np.array([[int(x) for x in row[2:2 + q]] for row in mine], dtype=np.int64).reshape(-1, q)
        obs = {}
        for k, n in enumerate(names):
            lo = 2 + 2 * q + k * q
            obs[n] = np.array([[float(x) for x in row[lo:lo + q]] for row in mine]).reshape(-1, q)
        out.append(TrajectoryRecord(N=m["N"], q=q, times=times, counts=counts, observables=obs,
                                    counters=m["counters"], status=m["status"], status_time=m["status_time"],
                                    t_N=m["t_N"], T_end=m["T_end"]))
    return out


def event_summaries(records: Sequence[TrajectoryRecord]):
    for r, rec in enumerate(records):
        yield {"replicate": r, "N": rec.N, "status": rec.status, "status_time": rec.status_time,
               "events": rec.counters, "final_h": (rec.counts[-1] / rec.N).tolist() if len(rec.counts) else []}


# ---------------------------------------------------------------------------
# population snapshots
# ---------------------------------------------------------------------------


def snapshot_text(pop: PopulationState) -> str:
    """One line per particle: type, location coordinates, clan id (or '-')."""
    lines = [f"# N={pop.N} t={fmt(pop.t)} q={pop.q}", "# type coords... clan"]
    for i, loc in enumerate(pop.locations):
        clans = pop.clans[i] if pop.clans is not None else None
        for a in range(len(loc)):
            coords = " ".join(fmt(float(x)) for x in loc[a])
            c = fmt(float(clans[a])) if clans is not None else "-"
            lines.append(f"{i + 1} {coords} {c}")
    return "\n".join(lines) + "\n"


def read_snapshot(text: str) -> PopulationState:
    head = text.splitlines()[0].lstrip("# ").split()
    kv = dict(item.split("=") for item in head)
    N, q, t = int(kv["N"]), int(kv["q"]), float(kv["t"])
    locs: list[list] = [[] for _ in range(q)]
    clans: list[list] = [[] for _ in range(q)]
    has_clans = False
    for line in text.splitlines()[2:]:
        parts = line.split()
        i = int(parts[0]) - 1
        locs[i].append([float(x) for x in parts[1:-1]])
        if parts[-1] != "-":
            has_clans = True
            clans[i].append(float(parts[-1]))
    dim = max((len(l[0]) for l in locs if l), default=1)
    return PopulationState(N, [np.array(l, dtype=float).reshape(len(l), dim) for l in locs],
                           [np.array(c) for c in clans] if has_clans else None, t)


__all__ = [
    "RunDir", "dumps", "event_summaries", "fmt", "read_manifest", "read_snapshot", "read_trajectories",
    "run_hash", "snapshot_text", "trajectory_meta", "trajectory_rows",
]
