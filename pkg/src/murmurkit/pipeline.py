"""Prediction artifacts and the segment -> record -> patient assembly.

A prediction run produces one directory holding, in lockstep row order:

  predictions.csv   one line per segment: provenance, MC-mean probabilities,
                    entropy, and the argmax label
  logits.bin        per-pass logits, float32, shape (segments, passes, classes)
  meta.json         passes, seed, config hash, split

Temperature scaling is applied to the per-pass logits before the softmax
and averaging, so re-deriving decisions at a new temperature only needs
logits.bin. Confidence of a segment is the max of its scaled MC-mean
distribution; record and patient confidences follow the roll-up rules.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .aggregation import PatientDecision, RecordDecision, decide_patient, decide_record
from .calibration import golden_minimize
from .dataio import ClassLabel, DatasetManifest
from .uncertainty import entropy, softmax

PREDICTIONS_CSV = "predictions.csv"
LOGITS_BIN = "logits.bin"
META_JSON = "meta.json"

_LOGITS_MAGIC = b"MKPL"
_LOGITS_VERSION = 1


@dataclass
class PredictionSet:
    patient_ids: list[str]
    paths: list[str]
    offsets: np.ndarray      # (S,)
    truths: np.ndarray       # (S,) int codes from the manifest
    logits: np.ndarray       # (S, N, C) float64
    meta: dict

    def __len__(self) -> int:
        return len(self.patient_ids)


def write_predictions(out_dir: Path | str, patient_ids: list[str],
                      paths: list[str], offsets: np.ndarray,
                      logits: np.ndarray, meta: dict) -> None:
    """``logits`` is (S, N, C); the CSV row order matches its first axis."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    probs = softmax(logits).mean(axis=1)          # (S, C), temperature 1
    ent = entropy(probs)
    labels = probs.argmax(axis=1)
    with open(out_dir / PREDICTIONS_CSV, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patient_id", "path", "offset_s", "p_absent",
                         "p_present", "p_unknown", "entropy", "label"])
        for s in range(len(patient_ids)):
            writer.writerow([
                patient_ids[s], paths[s], f"{float(offsets[s]):g}",
                f"{probs[s, 0]:.6f}", f"{probs[s, 1]:.6f}", f"{probs[s, 2]:.6f}",
                f"{float(ent[s]):.6f}", ClassLabel(int(labels[s])).token])
    n_segments, n_passes, n_classes = logits.shape
    with open(out_dir / LOGITS_BIN, "wb") as fh:
        fh.write(_LOGITS_MAGIC)
        fh.write(struct.pack("<IIII", _LOGITS_VERSION, n_segments, n_passes,
                             n_classes))
        fh.write(np.ascontiguousarray(logits, dtype="<f4").tobytes())
    (out_dir / META_JSON).write_text(
        json.dumps(meta, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def read_predictions(pred_dir: Path | str,
                     manifest: DatasetManifest) -> PredictionSet:
    pred_dir = Path(pred_dir)
    for required in (PREDICTIONS_CSV, LOGITS_BIN, META_JSON):
        if not (pred_dir / required).is_file():
            raise FileNotFoundError(f"{pred_dir}: missing {required}")
    with open(pred_dir / LOGITS_BIN, "rb") as fh:
        if fh.read(4) != _LOGITS_MAGIC:
            raise ValueError(f"{pred_dir / LOGITS_BIN}: not a logits file")
        version, n_segments, n_passes, n_classes = struct.unpack("<IIII",
                                                                 fh.read(16))
        if version != _LOGITS_VERSION:
            raise ValueError(f"{pred_dir / LOGITS_BIN}: unsupported version")
        flat = np.frombuffer(fh.read(4 * n_segments * n_passes * n_classes),
                             dtype="<f4")
    logits = flat.astype(np.float64).reshape(n_segments, n_passes, n_classes)
    labels_by_patient = {e.patient_id: int(e.label) for e in manifest.entries}
    patient_ids, paths, offsets, truths = [], [], [], []
    with open(pred_dir / PREDICTIONS_CSV, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            pid = row["patient_id"]
            if pid not in labels_by_patient:
                raise ValueError(f"patient {pid!r} not present in the manifest")
            patient_ids.append(pid)
            paths.append(row["path"])
            offsets.append(float(row["offset_s"]))
            truths.append(labels_by_patient[pid])
    if len(patient_ids) != n_segments:
        raise ValueError(
            f"{pred_dir}: {len(patient_ids)} CSV rows but {n_segments} logit rows")
    meta = json.loads((pred_dir / META_JSON).read_text(encoding="utf-8"))
    return PredictionSet(patient_ids=patient_ids, paths=paths,
                         offsets=np.asarray(offsets),
                         truths=np.asarray(truths, dtype=np.int64),
                         logits=logits, meta=meta)


def scaled_mean_probs(logits: np.ndarray, temperature: float) -> np.ndarray:
    """Scale-then-average: mean over passes of softmax(z_n / T). (S, C)."""
    if temperature <= 0.0:
        raise ValueError("temperature must be positive")
    return softmax(logits / temperature).mean(axis=1)


@dataclass
class LevelDecisions:
    """Per-level labels, confidences, and correctness for one temperature."""

    temperature: float
    segment_labels: np.ndarray
    segment_conf: np.ndarray
    segment_entropy: np.ndarray
    segment_correct: np.ndarray
    records: list[dict]          # patient_id, path, decision, truth
    patients: list[dict]         # patient_id, decision, truth, entropy_mean

    @property
    def patient_conf(self) -> np.ndarray:
        return np.asarray([p["decision"].confidence for p in self.patients])

    @property
    def patient_correct(self) -> np.ndarray:
        return np.asarray([int(p["decision"].label) == p["truth"]
                           for p in self.patients])


def assemble_levels(preds: PredictionSet, temperature: float) -> LevelDecisions:
    """Run the decision hierarchy at the given temperature."""
    probs = scaled_mean_probs(preds.logits, temperature)
    seg_labels = probs.argmax(axis=1)
    seg_conf = probs.max(axis=1)
    seg_entropy = np.asarray(entropy(probs))

    by_record: dict[tuple[str, str], list[int]] = {}
    for s, key in enumerate(zip(preds.patient_ids, preds.paths)):
        by_record.setdefault(key, []).append(s)

    records = []
    for (pid, path), seg_idx in by_record.items():
        labels = [ClassLabel(int(seg_labels[s])) for s in seg_idx]
        confs = [float(seg_conf[s]) for s in seg_idx]
        decision = decide_record(labels, confs)
        contributing = [seg_idx[i] for i in decision.contributing_segments]
        records.append({"patient_id": pid, "path": path, "decision": decision,
                        "truth": int(preds.truths[seg_idx[0]]),
                        "contributing_segments": contributing})

    by_patient: dict[str, list[int]] = {}
    for r, record in enumerate(records):
        by_patient.setdefault(record["patient_id"], []).append(r)

    patients = []
    for pid, rec_idx in by_patient.items():
        labels = [records[r]["decision"].label for r in rec_idx]
        confs = [records[r]["decision"].confidence for r in rec_idx]
        decision = decide_patient(labels, confs)
        seg_pool: list[int] = []
        for local, r in enumerate(rec_idx):
            if local in decision.contributing_records:
                seg_pool.extend(records[r]["contributing_segments"])
        patients.append({
            "patient_id": pid,
            "decision": decision,
            "truth": records[rec_idx[0]]["truth"],
            "entropy_mean": float(seg_entropy[seg_pool].mean()),
        })

    return LevelDecisions(
        temperature=temperature,
        segment_labels=seg_labels,
        segment_conf=seg_conf,
        segment_entropy=seg_entropy,
        segment_correct=seg_labels == preds.truths,
        records=records,
        patients=patients,
    )


def fit_patient_temperature(preds: PredictionSet) -> float:
    """Refit T against patient-level NLL.

    A patient's class distribution at temperature T is the mean of
    softmax(z/T) over all the patient's segment passes (a point on the
    simplex), scored against the patient's true label.
    """
    by_patient: dict[str, list[int]] = {}
    for s, pid in enumerate(preds.patient_ids):
        by_patient.setdefault(pid, []).append(s)
    groups = [(np.asarray(idx), int(preds.truths[idx[0]]))
              for idx in by_patient.values()]
    if len({truth for _, truth in groups}) < 2:
        return 1.0

    def objective(log_t: float) -> float:
        t = float(np.exp(log_t))
        probs = scaled_mean_probs(preds.logits, t)
        total = 0.0
        for idx, truth in groups:
            total -= float(np.log(max(probs[idx, truth].mean(), 1e-300)))
        return total / len(groups)

    return float(np.exp(golden_minimize(objective)))


def write_patient_decisions(path: Path | str, levels: LevelDecisions) -> None:
    """CSV interface: patient_id,label,confidence,entropy_mean."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patient_id", "label", "confidence", "entropy_mean"])
        for p in sorted(levels.patients, key=lambda p: p["patient_id"]):
            writer.writerow([p["patient_id"], p["decision"].label.token,
                             f"{p['decision'].confidence:.6f}",
                             f"{p['entropy_mean']:.6f}"])


def read_patient_decisions(path: Path | str) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [{"patient_id": row["patient_id"],
                 "label": ClassLabel.parse(row["label"]),
                 "confidence": float(row["confidence"]),
                 "entropy_mean": float(row["entropy_mean"])}
                for row in csv.DictReader(fh)]
