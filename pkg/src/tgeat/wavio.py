"""Minimal PCM16 mono WAV reader/writer."""
from __future__ import annotations

import wave
from pathlib import Path

import numpy as np

from .errors import AudioError

SAMPLE_RATE = 16000


def read_wav(path: str | Path) -> np.ndarray:
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as fh:
            if fh.getnchannels() != 1 or fh.getsampwidth() != 2:
                raise AudioError(f"{path}: expected mono PCM16")
            if fh.getframerate() != SAMPLE_RATE:
                raise AudioError(f"{path}: expected {SAMPLE_RATE} Hz, got {fh.getframerate()}")
            raw = fh.readframes(fh.getnframes())
    except FileNotFoundError as exc:
        raise AudioError(f"audio file not found: {path}") from exc
    except wave.Error as exc:
        raise AudioError(f"{path}: {exc}") from exc
    return (np.frombuffer(raw, dtype="<i2").astype(np.float32) / 32768.0)


def to_pcm16(samples: np.ndarray) -> np.ndarray:
    q = np.round(np.asarray(samples, dtype=np.float64) * 32768.0)
    return np.clip(q, -32768, 32767).astype("<i2")


def write_wav(path: str | Path, samples: np.ndarray) -> None:
    path = Path(path)
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(SAMPLE_RATE)
        fh.writeframes(to_pcm16(samples).tobytes())
