"""Radial error, successful detection rate and evaluation reports."""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .landmarks import LandmarkSet

SDR_THRESHOLDS_MM = (2.0, 2.5, 3.0, 4.0)


def radial_errors(pred: LandmarkSet, gt: LandmarkSet) -> np.ndarray:
    """Euclidean error in mm per landmark; NaN unless present in both sets."""
    if pred.count != gt.count:
        raise ValueError(f"landmark count mismatch: {pred.count} vs {gt.count}")
    if not np.allclose(pred.spacing, gt.spacing):
        raise ValueError(f"spacing mismatch: {pred.spacing} vs {gt.spacing}")
    delta = (pred.coords - gt.coords) * np.asarray(gt.spacing)
    err = np.sqrt((delta ** 2).sum(axis=1))
    return np.where(pred.present & gt.present, err, np.nan)


def mre(pred: LandmarkSet, gt: LandmarkSet) -> tuple[float, float, np.ndarray]:
    """Mean and population std of radial error over mutually present landmarks."""
    err = radial_errors(pred, gt)
    both = err[~np.isnan(err)]
    if both.size == 0:
        raise ValueError("mre: no landmark is present in both prediction and ground truth")
    return float(both.mean()), float(both.std()), err


def sdr(errors, thresholds: Sequence[float] = SDR_THRESHOLDS_MM) -> np.ndarray:
    """Percentage of errors ``<=`` each threshold."""
    e = np.asarray(errors, dtype=np.float64).ravel()
    th = np.asarray(thresholds, dtype=np.float64)
    if np.any(np.diff(th) < 0):
        raise ValueError("sdr: thresholds must be sorted ascending")
    if e.size == 0:
        return np.zeros(len(th))
    return 100.0 * (e[:, None] <= th[None, :]).mean(axis=0)


@dataclass
class EvalReport:
    """Per (case, landmark) radial errors plus presence agreement."""

    thresholds: tuple[float, ...] = SDR_THRESHOLDS_MM
    rows: list[tuple[str, int, float]] = field(default_factory=list)
    presence: dict[str, int] = field(default_factory=lambda: {
        "both_present": 0, "both_absent": 0, "false_present": 0, "missed": 0})

    def add_case(self, case: str, pred: LandmarkSet, gt: LandmarkSet) -> None:
        err = radial_errors(pred, gt)
        for i, e in enumerate(err):
            if not np.isnan(e):
                self.rows.append((case, i, float(e)))
        self.presence["both_present"] += int((pred.present & gt.present).sum())
        self.presence["both_absent"] += int((~pred.present & ~gt.present).sum())
        self.presence["false_present"] += int((pred.present & ~gt.present).sum())
        self.presence["missed"] += int((~pred.present & gt.present).sum())

    @property
    def errors(self) -> np.ndarray:
        return np.array([r[2] for r in self.rows])

    @property
    def mre(self) -> float:
        return float(self.errors.mean()) if self.rows else float("nan")

    @property
    def std(self) -> float:
        return float(self.errors.std()) if self.rows else float("nan")

    @property
    def sdr(self) -> np.ndarray:
        return sdr(self.errors, self.thresholds)

    @property
    def presence_agreement(self) -> float:
        total = sum(self.presence.values())
        agree = self.presence["both_present"] + self.presence["both_absent"]
        return 100.0 * agree / total if total else float("nan")

    def to_table(self) -> str:
        out = io.StringIO()
        out.write(f"landmarks evaluated : {len(self.rows)}\n")
        out.write(f"MRE +/- std (mm)    : {self.mre:.2f} +/- {self.std:.2f}\n")
        for t, s in zip(self.thresholds, self.sdr):
            out.write(f"SDR @ {t:g} mm{'':<{6 - len(f'{t:g}')}}: {s:6.2f} %\n")
        out.write(f"presence agreement  : {self.presence_agreement:6.2f} %\n")
        for k, v in self.presence.items():
            out.write(f"  {k:<17} : {v}\n")
        return out.getvalue()

    def to_records(self) -> str:
        head = ["case", "landmark", "error_mm"] + [f"hit_{t:g}mm" for t in self.thresholds]
        lines = [",".join(head)]
        for case, i, e in self.rows:
            hits = ["1" if e <= t else "0" for t in self.thresholds]
            lines.append(",".join([case, str(i), repr(e)] + hits))
        return "\n".join(lines) + "\n"
