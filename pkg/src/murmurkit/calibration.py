"""Temperature scaling and expected calibration error.

A single temperature divides the logits before the softmax; it is fitted
on validation data by minimising the mean negative log-likelihood with a
golden-section search over log T, and never changes a single logit
vector's argmax. Calibration quality is summarised by ECE over 15
equal-width confidence bins (half-open, last bin closed at 1.0) and by
per-bin reliability data for plotting.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .uncertainty import softmax

N_BINS = 15
_LOG_T_LO = math.log(0.05)
_LOG_T_HI = math.log(20.0)
_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def scale(logits: np.ndarray, temperature: float) -> np.ndarray:
    """softmax(z / T); preserves the argmax for any T > 0."""
    if temperature <= 0.0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    return softmax(np.asarray(logits, dtype=np.float64) / temperature)


def nll(logits: np.ndarray, labels: np.ndarray, temperature: float) -> float:
    """Mean negative log-likelihood of the true labels under softmax(z/T)."""
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return float(-log_probs[np.arange(len(labels)), labels].mean())


def golden_minimize(objective, lo: float = _LOG_T_LO, hi: float = _LOG_T_HI,
                    max_iter: int = 200, tol: float = 1e-6) -> float:
    """Derivative-free 1-D minimisation; returns the bracket midpoint."""
    c = hi - _GOLDEN * (hi - lo)
    d = lo + _GOLDEN * (hi - lo)
    fc, fd = objective(c), objective(d)
    for _ in range(max_iter):
        if hi - lo < tol:
            break
        if fc < fd:
            hi, d, fd = d, c, fc
            c = hi - _GOLDEN * (hi - lo)
            fc = objective(c)
        else:
            lo, c, fc = c, d, fd
            d = lo + _GOLDEN * (hi - lo)
            fd = objective(d)
    return 0.5 * (lo + hi)


def fit_temperature(logits: np.ndarray, labels: np.ndarray,
                    max_iter: int = 200, tol: float = 1e-6) -> float:
    """Golden-section search for the NLL-minimising temperature.

    The search runs on log T over [log 0.05, log 20]; ``tol`` is the final
    bracket width in log-space, comfortably below the 1e-4 accuracy the
    fitted T is held to. A single-label input is degenerate (NLL is
    monotone in T), so T = 1 is returned with a warning.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(logits) == 0:
        raise ValueError("cannot fit a temperature on an empty set")
    if len(logits) != len(labels):
        raise ValueError("logits and labels must have equal length")
    if len(np.unique(labels)) < 2:
        warnings.warn("single-class validation set; returning T = 1")
        return 1.0
    best = golden_minimize(lambda u: nll(logits, labels, math.exp(u)),
                           max_iter=max_iter, tol=tol)
    return math.exp(best)


@dataclass(frozen=True)
class ReliabilityBin:
    lo: float
    hi: float
    count: int
    avg_confidence: float
    accuracy: float


def _bin_index(confidences: np.ndarray, n_bins: int) -> np.ndarray:
    # Half-open [lo, hi) bins; the final bin is closed so 1.0 lands in it.
    idx = np.floor(np.asarray(confidences, dtype=np.float64) * n_bins).astype(int)
    return np.clip(idx, 0, n_bins - 1)


def reliability_data(confidences: np.ndarray, correct: np.ndarray,
                     n_bins: int = N_BINS) -> list[ReliabilityBin]:
    """Per-bin counts, mean confidence, and accuracy over [0, 1]."""
    confidences = np.asarray(confidences, dtype=np.float64)
    correct = np.asarray(correct, dtype=bool)
    if len(confidences) == 0:
        raise ValueError("reliability data requires at least one sample")
    if confidences.min() < 0.0 or confidences.max() > 1.0:
        raise ValueError("confidences must lie in [0, 1]")
    idx = _bin_index(confidences, n_bins)
    bins = []
    for b in range(n_bins):
        members = idx == b
        count = int(members.sum())
        bins.append(ReliabilityBin(
            lo=b / n_bins,
            hi=(b + 1) / n_bins,
            count=count,
            avg_confidence=float(confidences[members].mean()) if count else 0.0,
            accuracy=float(correct[members].mean()) if count else 0.0,
        ))
    return bins


def ece_from_bins(bins: list[ReliabilityBin]) -> float:
    total = sum(b.count for b in bins)
    return sum(b.count / total * abs(b.accuracy - b.avg_confidence)
               for b in bins if b.count)


def ece(confidences: np.ndarray, correct: np.ndarray,
        n_bins: int = N_BINS) -> float:
    """Expected calibration error; same binning path as reliability_data."""
    return ece_from_bins(reliability_data(confidences, correct, n_bins))


@dataclass
class CalibrationReport:
    level: str                    # "segment" or "patient"
    temperature: float
    n: int
    ece_before: float
    ece_after: float
    accuracy: float
    mean_confidence_before: float
    mean_confidence_after: float
    bins_before: list[ReliabilityBin]
    bins_after: list[ReliabilityBin]


def build_report(level: str, temperature: float,
                 conf_before: np.ndarray, correct_before: np.ndarray,
                 conf_after: np.ndarray, correct_after: np.ndarray,
                 n_bins: int = N_BINS) -> CalibrationReport:
    bins_before = reliability_data(conf_before, correct_before, n_bins)
    bins_after = reliability_data(conf_after, correct_after, n_bins)
    return CalibrationReport(
        level=level,
        temperature=temperature,
        n=len(conf_before),
        ece_before=ece_from_bins(bins_before),
        ece_after=ece_from_bins(bins_after),
        accuracy=float(np.asarray(correct_after, dtype=bool).mean()),
        mean_confidence_before=float(np.mean(conf_before)),
        mean_confidence_after=float(np.mean(conf_after)),
        bins_before=bins_before,
        bins_after=bins_after,
    )


def report_to_json(reports: list[CalibrationReport]) -> str:
    return json.dumps([asdict(r) for r in reports], sort_keys=True, indent=2) + "\n"


def write_bins_csv(path: Path | str, bins: list[ReliabilityBin]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_lo", "bin_hi", "count", "avg_conf", "accuracy"])
        for b in bins:
            writer.writerow([f"{b.lo:.6f}", f"{b.hi:.6f}", b.count,
                             f"{b.avg_confidence:.6f}", f"{b.accuracy:.6f}"])
