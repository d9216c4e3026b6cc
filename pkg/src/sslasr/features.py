"""Log-mel filterbank frontend, frame-rate conversion, stream fusion, and
the binary feature-file format.

Feature file layout (little-endian), magic ``SFF1``:

    magic          4 bytes  b"SFF1"
    version        u32 (currently 1)
    rows, cols     u32, u32
    frame_shift_us u32
    label_len      u8, label utf-8 bytes
    payload        f32 * rows * cols, row-major
"""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass, field

import numpy as np

FILE_MAGIC = b"SFF1"
FILE_VERSION = 1


class FeatureFileError(ValueError):
    """Malformed feature file."""


class BadMagicError(FeatureFileError):
    pass


class VersionMismatchError(FeatureFileError):
    pass


class TruncatedFileError(FeatureFileError):
    pass


@dataclass
class AudioBuffer:
    """Mono waveform with amplitudes in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).ravel()
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.samples.size == 0:
            raise ValueError("audio buffer must contain at least one sample")

    def __len__(self):
        return self.samples.size


@dataclass
class FeatureMatrix:
    """T x D frame features at a fixed frame shift.

    Values are kept as float32, the on-disk payload type, so file round
    trips are bit exact.
    """

    data: np.ndarray
    frame_shift_us: int
    label: str = ""

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 2 or self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise ValueError(f"feature matrix must be T x D with T,D >= 1, got {self.data.shape}")
        if self.frame_shift_us <= 0:
            raise ValueError(f"frame_shift_us must be positive, got {self.frame_shift_us}")
        if not np.isfinite(self.data).all():
            raise ValueError("feature matrix contains non-finite values")

    @property
    def n_frames(self):
        return self.data.shape[0]

    @property
    def dim(self):
        return self.data.shape[1]


@dataclass
class FbankConfig:
    n_mels: int = 40
    win_ms: float = 25.0
    hop_ms: float = 10.0
    floor: float = 1e-10
    preemphasis: float = 0.97
    fmin_hz: float = 0.0
    fmax_hz: float | None = None  # defaults to Nyquist

    def __post_init__(self):
        if self.n_mels < 1:
            raise ValueError("n_mels must be >= 1")
        if self.win_ms < self.hop_ms:
            raise ValueError("window must be at least one hop long")
        if self.floor <= 0:
            raise ValueError("floor must be positive")


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (np.power(10.0, np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels, n_fft, sample_rate, fmin_hz=0.0, fmax_hz=None):
    """Triangular unit-height mel filters sampled at FFT bin frequencies.

    Returns (n_mels, n_fft // 2 + 1) weights and the filter center
    frequencies in Hz.
    """
    fmax_hz = sample_rate / 2.0 if fmax_hz is None else fmax_hz
    edges_mel = np.linspace(hz_to_mel(fmin_hz), hz_to_mel(fmax_hz), n_mels + 2)
    edges_hz = mel_to_hz(edges_mel)
    bin_hz = np.arange(n_fft // 2 + 1) * (sample_rate / n_fft)
    weights = np.zeros((n_mels, bin_hz.size))
    for i in range(n_mels):
        left, center, right = edges_hz[i], edges_hz[i + 1], edges_hz[i + 2]
        up = (bin_hz - left) / max(center - left, 1e-12)
        down = (right - bin_hz) / max(right - center, 1e-12)
        weights[i] = np.maximum(0.0, np.minimum(up, down))
    return weights, edges_hz[1:-1]


def compute_fbank(audio: AudioBuffer, cfg: FbankConfig | None = None) -> FeatureMatrix:
    """Log-mel filterbank features with pre-emphasis and a Hamming window.

    Frames are taken without padding: T = (N - win) // hop + 1, so the
    audio must cover at least one analysis window.
    """
    cfg = cfg or FbankConfig()
    sr = audio.sample_rate
    win = int(round(cfg.win_ms * sr / 1000.0))
    hop = int(round(cfg.hop_ms * sr / 1000.0))
    n = len(audio)
    if n < win:
        raise ValueError(
            f"audio of {n} samples is shorter than one {win}-sample analysis window"
        )
    x = audio.samples.copy()
    if cfg.preemphasis > 0.0:
        x[1:] -= cfg.preemphasis * x[:-1]
    t_out = (n - win) // hop + 1
    idx = np.arange(t_out)[:, None] * hop + np.arange(win)[None, :]
    frames = x[idx] * np.hamming(win)
    n_fft = 1
    while n_fft < win:
        n_fft *= 2
    power = np.abs(np.fft.rfft(frames, n=n_fft, axis=1)) ** 2 / n_fft
    fbank, _ = mel_filterbank(cfg.n_mels, n_fft, sr, cfg.fmin_hz, cfg.fmax_hz)
    energies = power @ fbank.T
    logmel = np.log(np.maximum(energies, cfg.floor))
    return FeatureMatrix(logmel, frame_shift_us=int(round(cfg.hop_ms * 1000.0)), label="fbk")


def resample_frames(f: FeatureMatrix, target_shift_us: int) -> FeatureMatrix:
    """Change the frame rate by an integer factor.

    Upsampling duplicates rows, downsampling keeps every k-th row; any
    non-integer rate ratio is rejected.
    """
    if target_shift_us <= 0:
        raise ValueError("target_shift_us must be positive")
    cur = f.frame_shift_us
    if target_shift_us == cur:
        return FeatureMatrix(f.data.copy(), cur, f.label)
    if cur % target_shift_us == 0:
        k = cur // target_shift_us
        return FeatureMatrix(np.repeat(f.data, k, axis=0), target_shift_us, f.label)
    if target_shift_us % cur == 0:
        k = target_shift_us // cur
        return FeatureMatrix(f.data[::k].copy(), target_shift_us, f.label)
    raise ValueError(
        f"frame shift ratio {cur}/{target_shift_us} us is not an integer in either direction"
    )


def fuse_features(streams, target_shift_us: int) -> FeatureMatrix:
    """Resample every stream to the target shift, truncate to the shortest,
    and concatenate along the feature axis."""
    streams = list(streams)
    if not streams:
        raise ValueError("need at least one feature stream to fuse")
    resampled = [resample_frames(s, target_shift_us) for s in streams]
    t_min = min(s.n_frames for s in resampled)
    fused = np.concatenate([s.data[:t_min] for s in resampled], axis=1)
    label = "+".join(s.label for s in resampled if s.label) or "fused"
    return FeatureMatrix(fused, target_shift_us, label)


def write_features(f: FeatureMatrix, path):
    label = f.label.encode("utf-8")
    if len(label) > 255:
        raise ValueError("label longer than 255 bytes")
    rows, cols = f.data.shape
    with open(path, "wb") as fh:
        fh.write(FILE_MAGIC)
        fh.write(struct.pack("<IIIIB", FILE_VERSION, rows, cols, f.frame_shift_us, len(label)))
        fh.write(label)
        fh.write(np.ascontiguousarray(f.data, dtype="<f4").tobytes())


def read_features(path) -> FeatureMatrix:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 or blob[:4] != FILE_MAGIC:
        raise BadMagicError(f"bad magic {blob[:4]!r}, expected {FILE_MAGIC!r}")
    header_len = 4 + struct.calcsize("<IIIIB")
    if len(blob) < header_len:
        raise TruncatedFileError("truncated header")
    version, rows, cols, shift, label_len = struct.unpack("<IIIIB", blob[4:header_len])
    if version != FILE_VERSION:
        raise VersionMismatchError(f"unsupported version {version}, expected {FILE_VERSION}")
    off = header_len
    if len(blob) < off + label_len:
        raise TruncatedFileError("truncated label")
    label = blob[off : off + label_len].decode("utf-8")
    off += label_len
    payload = 4 * rows * cols
    if len(blob) < off + payload:
        raise TruncatedFileError(
            f"payload holds {len(blob) - off} bytes, header promises {payload}"
        )
    if len(blob) > off + payload:
        raise FeatureFileError("trailing bytes after payload")
    data = np.frombuffer(blob[off : off + payload], dtype="<f4").reshape(rows, cols)
    return FeatureMatrix(data.copy(), shift, label)


def read_wav(path) -> AudioBuffer:
    """Read a mono 16-bit PCM WAV file."""
    with wave.open(str(path), "rb") as wf:
        if wf.getnchannels() != 1:
            raise ValueError(f"expected mono WAV, got {wf.getnchannels()} channels")
        if wf.getsampwidth() != 2:
            raise ValueError(f"expected 16-bit PCM, got {8 * wf.getsampwidth()}-bit")
        raw = wf.readframes(wf.getnframes())
        sr = wf.getframerate()
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return AudioBuffer(samples, sr)


def write_wav(path, audio: AudioBuffer):
    pcm = np.clip(np.round(audio.samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(audio.sample_rate)
        wf.writeframes(pcm.tobytes())
