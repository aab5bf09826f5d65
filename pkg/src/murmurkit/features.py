"""Log-Mel feature extraction over fixed 3-second segments.

A recording is cut into 3 s windows hopped by 2 s (1 s overlap between
neighbours); each window becomes a 128x241 log-Mel map: 25 ms frames,
12.5 ms step, 512-point FFT, 128 triangular HTK-mel filters spanning
0-2000 Hz (Nyquist), log(power + eps).

The 241-frame count requires centred framing, so each 12000-sample segment
is reflect-padded by half a frame (50 samples) on both sides before the
STFT: 12000 / 50 + 1 = 241 frames.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataio import SAMPLE_RATE, RecordingMeta, Waveform

SEGMENT_SECONDS = 3.0
HOP_SECONDS = 2.0
SEGMENT_SAMPLES = int(SEGMENT_SECONDS * SAMPLE_RATE)  # 12000

FRAME_LENGTH = 100  # 25 ms at 4 kHz
FRAME_STEP = 50     # 12.5 ms
N_FFT = 512
N_MELS = 128
N_FRAMES = SEGMENT_SAMPLES // FRAME_STEP + 1  # 241
FMIN_HZ = 0.0
FMAX_HZ = SAMPLE_RATE / 2.0
LOG_EPS = 1e-10


@dataclass(frozen=True)
class SegmentAudio:
    samples: np.ndarray  # exactly SEGMENT_SAMPLES values
    source: RecordingMeta | None
    offset_s: float


def segment(waveform: Waveform, hop_seconds: float = HOP_SECONDS,
            source: RecordingMeta | None = None) -> list[SegmentAudio]:
    """Cut a recording into full 3 s windows at offsets 0, hop, 2*hop, ...

    Recordings shorter than one window are zero-padded at the tail into a
    single segment rather than dropped.
    """
    if waveform.sample_rate != SAMPLE_RATE:
        raise ValueError(
            f"expected {SAMPLE_RATE} Hz audio, got {waveform.sample_rate} Hz")
    hop = int(round(hop_seconds * SAMPLE_RATE))
    if hop <= 0:
        raise ValueError("hop must be positive")
    x = np.asarray(waveform.samples, dtype=np.float64)
    n = len(x)
    if n < SEGMENT_SAMPLES:
        padded = np.zeros(SEGMENT_SAMPLES)
        padded[:n] = x
        return [SegmentAudio(samples=padded, source=source, offset_s=0.0)]
    count = (n - SEGMENT_SAMPLES) // hop + 1
    return [
        SegmentAudio(samples=x[k * hop:k * hop + SEGMENT_SAMPLES],
                     source=source, offset_s=k * hop / SAMPLE_RATE)
        for k in range(count)
    ]


def hz_to_mel(f: np.ndarray | float) -> np.ndarray | float:
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m: np.ndarray | float) -> np.ndarray | float:
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filter_bank(n_mels: int = N_MELS, n_fft: int = N_FFT,
                    sample_rate: int = SAMPLE_RATE, fmin: float = FMIN_HZ,
                    fmax: float = FMAX_HZ) -> np.ndarray:
    """Triangular HTK-mel filters, no area normalisation. Shape (n_mels, n_fft//2+1)."""
    edges_hz = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    fft_hz = np.arange(n_fft // 2 + 1) * (sample_rate / n_fft)
    bank = np.zeros((n_mels, len(fft_hz)))
    for m in range(n_mels):
        left, center, right = edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]
        up = (fft_hz - left) / (center - left)
        down = (right - fft_hz) / (right - center)
        bank[m] = np.clip(np.minimum(up, down), 0.0, None)
    return bank


_BANK: np.ndarray | None = None
_WINDOW: np.ndarray | None = None


def _cached_bank() -> np.ndarray:
    global _BANK
    if _BANK is None:
        _BANK = mel_filter_bank()
    return _BANK


def _cached_window() -> np.ndarray:
    # Periodic Hann, the STFT convention.
    global _WINDOW
    if _WINDOW is None:
        n = np.arange(FRAME_LENGTH)
        _WINDOW = 0.5 * (1.0 - np.cos(2.0 * np.pi * n / FRAME_LENGTH))
    return _WINDOW


def mel_spectrogram(seg: SegmentAudio, normalize: bool = False) -> np.ndarray:
    """Log-Mel map of one segment, shape (N_MELS, N_FRAMES), float32."""
    x = np.asarray(seg.samples, dtype=np.float64)
    if x.shape != (SEGMENT_SAMPLES,):
        raise ValueError(f"segment must have {SEGMENT_SAMPLES} samples, got {x.shape}")
    pad = FRAME_STEP
    padded = np.pad(x, pad, mode="reflect")
    starts = np.arange(N_FRAMES) * FRAME_STEP
    frames = np.lib.stride_tricks.sliding_window_view(padded, FRAME_LENGTH)[starts]
    frames = frames * _cached_window()
    spectrum = np.fft.rfft(frames, n=N_FFT, axis=1)
    power = spectrum.real ** 2 + spectrum.imag ** 2  # (N_FRAMES, N_FFT//2+1)
    mel_power = power @ _cached_bank().T               # (N_FRAMES, N_MELS)
    logmel = np.log(mel_power.T + LOG_EPS)
    if normalize:
        logmel = (logmel - logmel.mean()) / (logmel.std() + 1e-8)
    return logmel.astype(np.float32)


def extract_recording(waveform: Waveform, hop_seconds: float = HOP_SECONDS,
                      source: RecordingMeta | None = None,
                      normalize: bool = False,
                      ) -> tuple[np.ndarray, np.ndarray]:
    """All feature maps of one recording.

    Returns (offsets_s shape (S,), maps shape (S, N_MELS, N_FRAMES) float32).
    """
    segments = segment(waveform, hop_seconds=hop_seconds, source=source)
    offsets = np.asarray([s.offset_s for s in segments], dtype=np.float32)
    maps = np.stack([mel_spectrogram(s, normalize=normalize) for s in segments])
    return offsets, maps


_CACHE_MAGIC = b"MKFC"
_CACHE_VERSION = 1


def write_feature_cache(path: Path | str, offsets: np.ndarray,
                        maps: np.ndarray) -> None:
    """Binary per-recording cache; reload is bit-exact."""
    maps = np.ascontiguousarray(maps, dtype="<f4")
    offsets = np.ascontiguousarray(offsets, dtype="<f4")
    n_segments, n_mels, n_frames = maps.shape
    if offsets.shape != (n_segments,):
        raise ValueError("offsets length must match segment count")
    with open(path, "wb") as fh:
        fh.write(_CACHE_MAGIC)
        fh.write(struct.pack("<IIII", _CACHE_VERSION, n_segments, n_mels, n_frames))
        fh.write(offsets.tobytes())
        fh.write(maps.tobytes())


def read_feature_cache(path: Path | str) -> tuple[np.ndarray, np.ndarray]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _CACHE_MAGIC:
            raise ValueError(f"{path}: not a feature cache (magic {magic!r})")
        version, n_segments, n_mels, n_frames = struct.unpack("<IIII", fh.read(16))
        if version != _CACHE_VERSION:
            raise ValueError(f"{path}: unsupported cache version {version}")
        offsets = np.frombuffer(fh.read(4 * n_segments), dtype="<f4").copy()
        data = np.frombuffer(fh.read(4 * n_segments * n_mels * n_frames), dtype="<f4")
        if data.size != n_segments * n_mels * n_frames:
            raise ValueError(f"{path}: truncated cache")
    return offsets, data.reshape(n_segments, n_mels, n_frames).copy()
