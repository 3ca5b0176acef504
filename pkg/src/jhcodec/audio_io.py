"""WAV interchange: 16-bit PCM, mono, one fixed sample rate, nothing else."""

from __future__ import annotations

import wave

import numpy as np


class AudioFormatError(ValueError):
    pass


def read_wav(path, expected_rate: int = 16000) -> np.ndarray:
    """Load a mono PCM16 file as float32 in [-1, 1); rejects other formats."""
    with wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1:
            raise AudioFormatError(f"need mono audio, got {w.getnchannels()} channels")
        if w.getsampwidth() != 2:
            raise AudioFormatError(f"need 16-bit PCM, got {8 * w.getsampwidth()}-bit")
        if w.getframerate() != expected_rate:
            raise AudioFormatError(
                f"need {expected_rate} Hz audio, got {w.getframerate()} Hz (no resampling)"
            )
        raw = w.readframes(w.getnframes())
    pcm = np.frombuffer(raw, dtype="<i2")
    return (pcm.astype(np.float32) / 32768.0).copy()


def write_wav(path, samples: np.ndarray, rate: int = 16000) -> None:
    samples = np.asarray(samples, dtype=np.float32)
    pcm = np.clip(np.round(samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(rate)
        w.writeframes(pcm.tobytes())
