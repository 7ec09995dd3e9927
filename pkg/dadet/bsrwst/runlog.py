"""Append-only run record: ``events.jsonl`` plus ``metrics.csv``.

``metrics.csv`` holds no wall-clock data, so two runs of the same config on
the same platform produce byte-identical files. Timestamps live only in
``events.jsonl``.
"""
import csv
import json
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence

from .dadet_logger import DadetLogger
from .errors import DatasetError

LOSS_COLUMNS = ("loss_total", "cls_pos", "cls_neg", "loc", "adv", "domain", "st_cls_pos", "st_cls_neg")
EVENTS_FILE = "events.jsonl"
METRICS_FILE = "metrics.csv"


def metric_columns(class_names: Mapping[int, str]) -> List[str]:
    ap = [f"ap_{class_names[c]}" for c in sorted(class_names)]
    return ["iteration", "epoch", "phase", *LOSS_COLUMNS, "target_mAP", *ap, "pseudo_count", "mean_srrs", "epsilon"]


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


class RunLog(DadetLogger):
    def __init__(self, out_dir, seed: int, class_names: Mapping[int, str]):
        DadetLogger.__init__(self)
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.seed = int(seed)
        self.class_names = dict(class_names)
        self.columns = metric_columns(self.class_names)
        self.events_path = self.out_dir / EVENTS_FILE
        self.metrics_path = self.out_dir / METRICS_FILE
        self.rows: List[Dict[str, str]] = []
        self.events: List[dict] = []
        self.events_path.write_text("")
        with open(self.metrics_path, "w", newline="") as fh:
            csv.writer(fh).writerow(self.columns)

    def _event(self, event: str, **payload):
        record = {"event": event, "time": datetime.now(timezone.utc).isoformat(), "seed": self.seed, **payload}
        self.events.append(record)
        with open(self.events_path, "a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
        return record

    def _row(self, values: Mapping[str, object]):
        row = {c: _cell(values.get(c)) for c in self.columns}
        self.rows.append(row)
        with open(self.metrics_path, "a", newline="") as fh:
            csv.DictWriter(fh, fieldnames=self.columns).writerow(row)

    def iteration(self, iteration: int, epoch: int, phase: str, losses: Mapping[str, float], pseudo: Optional[Mapping] = None):
        values = {"iteration": iteration, "epoch": epoch, "phase": phase}
        values.update({c: losses.get(c) for c in LOSS_COLUMNS})
        values["loss_total"] = losses.get("total")
        if pseudo:
            values.update(pseudo)
        self._row(values)
        self._event("iteration", **{k: v for k, v in values.items() if v is not None})

    def evaluation(self, iteration: int, epoch: int, phase: str, result):
        values = {"iteration": iteration, "epoch": epoch, "phase": "eval", "target_mAP": result.map}
        for c, name in self.class_names.items():
            values[f"ap_{name}"] = result.per_class_ap.get(c)
        self._row(values)
        self._event("evaluation", iteration=iteration, epoch=epoch, phase=phase, result=result.to_dict())
        self.log.info(f"[{phase}] epoch {epoch} iteration {iteration}: target mAP {result.map}")

    def checkpoint(self, iteration: int, epoch: int, path, tag: str):
        self._event("checkpoint", iteration=iteration, epoch=epoch, path=str(path), tag=tag)

    def diagnostic(self, iteration: int, error: Exception, **payload):
        self._event("diagnostic", iteration=iteration, kind=type(error).__name__, message=str(error), **payload)
        self.log.error(f"Iteration {iteration}: {error}")

    def note(self, event: str, **payload):
        return self._event(event, **payload)


def read_metrics(path) -> List[Dict[str, str]]:
    path = Path(path)
    if path.is_dir():
        path = path / METRICS_FILE
    try:
        with open(path, newline="") as fh:
            return list(csv.DictReader(fh))
    except OSError as e:
        raise DatasetError(f"Cannot read metrics {path}: {e}") from e


def read_events(path) -> List[dict]:
    path = Path(path)
    if path.is_dir():
        path = path / EVENTS_FILE
    try:
        return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
    except (OSError, ValueError) as e:
        raise DatasetError(f"Cannot read events {path}: {e}") from e


def eval_rows(rows: Sequence[Mapping[str, str]]) -> List[Mapping[str, str]]:
    return [r for r in rows if r.get("phase") == "eval"]
