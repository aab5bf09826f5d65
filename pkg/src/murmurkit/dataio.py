"""Dataset ingest: manifests, WAV audio, and synthetic fixtures.

A dataset is a manifest CSV plus one mono 16-bit PCM WAV per recording.
The manifest is the single ingest path for both real corpora (converted
into this layout) and the synthetic fixtures generated here for tests.

Manifest format (UTF-8, comma-separated, one header line):

    patient_id,location,split,label,path

``path`` is resolved relative to the manifest's directory. All recordings
of a patient carry the patient's murmur label and live in one split.
"""

from __future__ import annotations

import csv
import os
import wave
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np

from . import rng

SAMPLE_RATE = 4000

LOCATIONS = ("AV", "PV", "MV", "TV", "Phc")
SPLITS = ("train", "validation", "test")


class ClassLabel(IntEnum):
    """Murmur annotation. Integer codes are fixed across the pipeline."""

    ABSENT = 0
    PRESENT = 1
    UNKNOWN = 2

    @classmethod
    def parse(cls, token: str) -> "ClassLabel":
        try:
            return cls[token.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown label token {token!r}") from None

    @property
    def token(self) -> str:
        return self.name.capitalize()


class ManifestError(ValueError):
    """Raised for malformed or inconsistent manifests."""


class AudioError(ValueError):
    """Raised for unreadable or out-of-contract WAV files."""


@dataclass(frozen=True)
class RecordingMeta:
    patient_id: str
    location: str
    split: str
    label: ClassLabel
    path: Path
    sample_rate: int = SAMPLE_RATE


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray  # float, scaled to [-1, 1]
    sample_rate: int

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[RecordingMeta, ...]
    root: Path = field(default_factory=Path)

    def patients(self) -> dict[str, list[RecordingMeta]]:
        by_patient: dict[str, list[RecordingMeta]] = {}
        for entry in self.entries:
            by_patient.setdefault(entry.patient_id, []).append(entry)
        return by_patient

    def split_of(self, patient_id: str) -> str:
        for entry in self.entries:
            if entry.patient_id == patient_id:
                return entry.split
        raise KeyError(patient_id)

    def subset(self, split: str) -> "DatasetManifest":
        if split not in SPLITS:
            raise ManifestError(f"unknown split {split!r}")
        kept = tuple(e for e in self.entries if e.split == split)
        return DatasetManifest(entries=kept, root=self.root)

    def counts(self) -> dict[str, dict[str, int]]:
        """Patient and recording totals per split and per label."""
        out: dict[str, dict[str, int]] = {}
        for split in SPLITS + ("all",):
            entries = [e for e in self.entries if split == "all" or e.split == split]
            row = {"patients": len({e.patient_id for e in entries}),
                   "recordings": len(entries)}
            for label in ClassLabel:
                with_label = [e for e in entries if e.label == label]
                row[f"patients_{label.token.lower()}"] = len(
                    {e.patient_id for e in with_label})
                row[f"recordings_{label.token.lower()}"] = len(with_label)
            out[split] = row
        return out


_HEADER = ["patient_id", "location", "split", "label", "path"]


def load_manifest(path: Path | str, check_files: bool = True) -> DatasetManifest:
    """Parse and validate a manifest CSV.

    Raises ManifestError with the offending line number for malformed rows,
    duplicate (patient, path) pairs, unknown location/label/split tokens,
    patients spanning multiple splits, and (with ``check_files``) paths that
    do not resolve to a readable file.
    """
    path = Path(path)
    root = path.parent
    entries: list[RecordingMeta] = []
    seen: set[tuple[str, str]] = set()
    splits_by_patient: dict[str, str] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError(f"{path}: no entries") from None
        if [h.strip() for h in header] != _HEADER:
            raise ManifestError(
                f"{path}:1: bad header {header!r}, expected {','.join(_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(_HEADER):
                raise ManifestError(
                    f"{path}:{lineno}: expected {len(_HEADER)} fields, got {len(row)}")
            patient_id, location, split, label_tok, rel_path = (c.strip() for c in row)
            if not patient_id:
                raise ManifestError(f"{path}:{lineno}: empty patient_id")
            if location not in LOCATIONS:
                raise ManifestError(f"{path}:{lineno}: unknown location {location!r}")
            if split not in SPLITS:
                raise ManifestError(f"{path}:{lineno}: unknown split {split!r}")
            try:
                label = ClassLabel.parse(label_tok)
            except ValueError as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from None
            key = (patient_id, rel_path)
            if key in seen:
                raise ManifestError(
                    f"{path}:{lineno}: duplicate (patient, path) pair {key}")
            seen.add(key)
            prior = splits_by_patient.setdefault(patient_id, split)
            if prior != split:
                raise ManifestError(
                    f"{path}:{lineno}: patient {patient_id} appears in splits"
                    f" {prior!r} and {split!r}")
            wav_path = root / rel_path
            if check_files and not wav_path.is_file():
                raise ManifestError(f"{path}:{lineno}: missing audio file {wav_path}")
            entries.append(RecordingMeta(
                patient_id=patient_id, location=location, split=split,
                label=label, path=wav_path))
    if not entries:
        raise ManifestError(f"{path}: no entries")
    return DatasetManifest(entries=tuple(entries), root=root)


def write_manifest(manifest: DatasetManifest, path: Path | str) -> None:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(_HEADER)
        for e in manifest.entries:
            rel = Path(os.path.relpath(e.path, path.parent))
            writer.writerow([e.patient_id, e.location, e.split, e.label.token,
                             rel.as_posix()])


def load_audio(meta: RecordingMeta) -> Waveform:
    """Read a mono 16-bit PCM WAV, scaling samples to [-1, 1].

    The corpus sample rate is fixed; a mismatch is an error rather than a
    silent resample so corpus mistakes surface immediately.
    """
    try:
        with wave.open(str(meta.path), "rb") as wf:
            nch = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            nframes = wf.getnframes()
            if nch != 1:
                raise AudioError(f"{meta.path}: mono required, got {nch} channels")
            if width != 2:
                raise AudioError(
                    f"{meta.path}: unsupported encoding ({8 * width}-bit), "
                    "16-bit PCM required")
            if rate != meta.sample_rate:
                raise AudioError(
                    f"{meta.path}: sample rate {rate} Hz, expected"
                    f" {meta.sample_rate} Hz (resampling not supported)")
            if nframes == 0:
                raise AudioError(f"{meta.path}: zero-length audio")
            raw = wf.readframes(nframes)
    except wave.Error as exc:
        raise AudioError(f"{meta.path}: not a PCM WAV file ({exc})") from None
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples=samples, sample_rate=rate)


def write_audio(path: Path | str, samples: np.ndarray,
                sample_rate: int = SAMPLE_RATE) -> None:
    """Write float samples in [-1, 1] as mono 16-bit PCM."""
    quantized = np.clip(np.rint(np.asarray(samples, dtype=np.float64) * 32768.0),
                        -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(sample_rate)
        wf.writeframes(quantized.tobytes())


def _largest_remainder(total: int, proportions: np.ndarray) -> list[int]:
    ideal = proportions * total
    counts = np.floor(ideal).astype(int)
    remainder = total - counts.sum()
    order = np.argsort(-(ideal - counts), kind="stable")
    for i in range(remainder):
        counts[order[i]] += 1
    return counts.tolist()


def assign_splits(patient_labels: dict[str, ClassLabel],
                  fractions: tuple[float, float, float] = (2 / 3, 1 / 6, 1 / 6),
                  seed: int = 0) -> dict[str, str]:
    """Stratified patient-level split assignment.

    Patients are grouped by label, shuffled with a seeded stream, and dealt
    to train/validation/test by largest-remainder apportionment so the label
    mix of each split tracks the corpus mix.
    """
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("split fractions must sum to 1")
    out: dict[str, str] = {}
    for label in ClassLabel:
        group = sorted(p for p, lab in patient_labels.items() if lab == label)
        if not group:
            continue
        gen = rng.stream(seed, "splits", int(label))
        gen.shuffle(group)
        counts = _largest_remainder(len(group), np.asarray(fractions))
        start = 0
        for split, count in zip(SPLITS, counts):
            for p in group[start:start + count]:
                out[p] = split
            start += count
    return out


def _band_noise(gen: np.random.Generator, n: int, lo_hz: float, hi_hz: float,
                sample_rate: int) -> np.ndarray:
    """Unit-variance noise restricted to [lo_hz, hi_hz] via FFT masking."""
    white = gen.standard_normal(n)
    spec = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(n, d=1.0 / sample_rate)
    spec[(freqs < lo_hz) | (freqs > hi_hz)] = 0.0
    shaped = np.fft.irfft(spec, n)
    std = shaped.std()
    return shaped / std if std > 0 else shaped


def _add_gauss_pulse(x: np.ndarray, center: float, width: float, freq: float,
                     amp: float) -> None:
    # Add in place over the +-6 sigma support only.
    lo = max(0, int((center - 6 * width) * SAMPLE_RATE))
    hi = min(len(x), int((center + 6 * width) * SAMPLE_RATE) + 1)
    if hi <= lo:
        return
    t = np.arange(lo, hi) / SAMPLE_RATE - center
    x[lo:hi] += amp * np.exp(-0.5 * (t / width) ** 2) * np.sin(2.0 * np.pi * freq * t)


def _synth_recording(gen: np.random.Generator, duration_s: float,
                     label: ClassLabel) -> np.ndarray:
    """One synthetic phonocardiogram.

    Absent recordings are S1/S2 pulse trains over faint noise. Present
    recordings add a band-limited murmur burst filling each systole, so the
    class is learnable from sustained mid-band energy. Unknown recordings are
    drowned in broadband noise, mimicking takes too corrupted to annotate.
    """
    n = int(round(duration_s * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE
    x = np.zeros(n)

    cycle = gen.uniform(0.65, 0.95)
    s1_freq = gen.uniform(40.0, 80.0)
    s2_freq = gen.uniform(60.0, 110.0)
    phase = gen.uniform(0.0, cycle)
    systole = 0.35 * cycle
    beat = -phase
    gate = np.zeros(n)
    while beat < duration_s + cycle:
        _add_gauss_pulse(x, beat, 0.018, s1_freq, 0.75)
        _add_gauss_pulse(x, beat + systole, 0.014, s2_freq, 0.55)
        lo = beat + 0.05
        hi = beat + systole - 0.03
        if hi > lo:
            a = max(0, int(lo * SAMPLE_RATE))
            b = min(n, int(hi * SAMPLE_RATE) + 1)
            if b > a:
                ramp = t[a:b]
                gate[a:b] += np.clip((ramp - lo) / 0.01, 0.0, 1.0) * np.clip(
                    (hi - ramp) / 0.01, 0.0, 1.0)
        beat += cycle

    if label == ClassLabel.PRESENT:
        murmur = _band_noise(gen, n, 150.0, 450.0, SAMPLE_RATE)
        x += 0.35 * np.clip(gate, 0.0, 1.0) * murmur
    x += 0.01 * gen.standard_normal(n)
    if label == ClassLabel.UNKNOWN:
        x += 0.45 * gen.standard_normal(n)

    peak = np.abs(x).max()
    if peak > 0.9:
        x *= 0.9 / peak
    return x


def synth_dataset(out_dir: Path | str, seed: int, n_patients: int,
                  class_mix: tuple[float, float, float] = (0.6, 0.3, 0.1),
                  split_fractions: tuple[float, float, float] = (2 / 3, 1 / 6, 1 / 6),
                  ) -> DatasetManifest:
    """Generate a deterministic synthetic dataset under ``out_dir``.

    Writes ``manifest.csv`` plus ``audio/*.wav`` and returns the loaded
    manifest. All outputs are pure functions of the arguments: running twice
    with the same seed produces byte-identical files.
    """
    if n_patients < 1:
        raise ValueError("n_patients must be >= 1")
    mix = np.asarray(class_mix, dtype=np.float64)
    if mix.shape != (3,) or abs(mix.sum() - 1.0) > 1e-9 or (mix < 0).any():
        raise ValueError("class_mix must be three non-negative proportions summing to 1")

    out_dir = Path(out_dir)
    audio_dir = out_dir / "audio"
    audio_dir.mkdir(parents=True, exist_ok=True)

    label_counts = _largest_remainder(n_patients, mix)
    labels = [ClassLabel(c) for c, count in enumerate(label_counts) for _ in range(count)]
    rng.stream(seed, "labels").shuffle(labels)

    patient_ids = [f"p{i:04d}" for i in range(n_patients)]
    splits = assign_splits(dict(zip(patient_ids, labels)), split_fractions, seed=seed)

    entries: list[RecordingMeta] = []
    for idx, (patient_id, label) in enumerate(zip(patient_ids, labels)):
        gen = rng.stream(seed, "patient", idx)
        n_recordings = int(gen.integers(1, 5))
        locations = list(gen.choice(LOCATIONS, size=n_recordings, replace=False))
        for location in locations:
            duration = float(gen.uniform(8.0, 15.0))
            samples = _synth_recording(gen, duration, label)
            rel = Path("audio") / f"{patient_id}_{location}.wav"
            write_audio(out_dir / rel, samples)
            entries.append(RecordingMeta(
                patient_id=patient_id, location=location, split=splits[patient_id],
                label=label, path=out_dir / rel))

    manifest = DatasetManifest(entries=tuple(entries), root=out_dir)
    write_manifest(manifest, out_dir / "manifest.csv")
    return manifest
