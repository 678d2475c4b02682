"""Accuracy, teacher drift and the per-epoch metrics CSV."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Callable, Iterable, Optional

import numpy as np
import torch

from .errors import ContractViolation
from .losses import anchor_penalty
from .models import ParameterSnapshot

METRIC_COLUMNS = (
    "epoch", "split", "top1", "feat_mse", "anchor", "ce", "total",
    "teacher_drift_rms", "lr", "wall_time_s",
)


def top1(predictions, labels) -> float:
    """Percentage of rows whose argmax equals the label (ties go to the lowest index)."""
    p = np.asarray(predictions.detach() if torch.is_tensor(predictions) else predictions)
    y = np.asarray(labels.detach() if torch.is_tensor(labels) else labels)
    if p.ndim != 2 or len(p) == 0:
        raise ContractViolation("top1 needs a non-empty (n, K) prediction array")
    if len(p) != len(y):
        raise ContractViolation("predictions and labels differ in length")
    return 100.0 * float(np.mean(p.argmax(axis=1) == y))


def teacher_drift(snapshot: ParameterSnapshot, encoder) -> float:
    """RMS distance between the encoder's parameters and the snapshot."""
    with torch.no_grad():
        return math.sqrt(anchor_penalty(snapshot, encoder).item())


@torch.no_grad()
def predict_in_batches(fn: Callable, x: torch.Tensor, batch_size: int = 512) -> torch.Tensor:
    return torch.cat([fn(x[i : i + batch_size]) for i in range(0, len(x), batch_size)])


@torch.no_grad()
def evaluate(predict: Callable, split, modules: Iterable = ()) -> float:
    for m in modules:
        m.eval()
    probs = predict_in_batches(lambda xb: torch.softmax(predict(xb), dim=-1), split.x)
    return top1(probs, split.y)


def evaluate_teacher(teacher_encoder, classifier, split) -> float:
    return evaluate(lambda xb: classifier(teacher_encoder(xb)), split, (teacher_encoder, classifier))


@dataclass
class MetricRow:
    epoch: int
    split: str
    top1: float
    feat_mse: Optional[float] = None
    anchor: Optional[float] = None
    ce: Optional[float] = None
    total: Optional[float] = None
    teacher_drift_rms: Optional[float] = None
    lr: Optional[float] = None
    wall_time_s: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.top1 <= 100.0:
            raise ContractViolation(f"top1 out of range: {self.top1}")
        if self.teacher_drift_rms is not None and self.teacher_drift_rms < 0:
            raise ContractViolation("teacher drift must be non-negative")

    def as_csv(self) -> list:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            out.append("" if v is None else (repr(float(v)) if isinstance(v, float) else str(v)))
        return out


def write_metrics(path, rows: Iterable[MetricRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow(r.as_csv())


def read_metrics(path) -> list:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != METRIC_COLUMNS:
            raise ContractViolation(f"{path}: unexpected columns {reader.fieldnames}")
        rows = []
        for rec in reader:
            kw = {}
            for k in METRIC_COLUMNS:
                v = rec[k]
                if k == "epoch":
                    kw[k] = int(v)
                elif k == "split":
                    kw[k] = v
                else:
                    kw[k] = None if v == "" else float(v)
            if kw["wall_time_s"] is None:
                kw["wall_time_s"] = 0.0
            rows.append(MetricRow(**kw))
    return rows
