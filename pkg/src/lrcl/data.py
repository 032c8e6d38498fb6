"""Canonical windowed-pair datasets, windowing, and the synthetic generator.

A dataset is an ordered list of (left, right) window pairs, each a
(3, T) float32 array of acceleration in sensor-native units, labeled with
a class id (or -1 for unlabeled) and a subject id. On disk the canonical
container is binary: magic "LRW1", a little-endian uint32 header length, a
UTF-8 JSON header (count, window_len, sample_rate_hz, class_names,
provenance), then per-pair records of three int32 fields (label, subject,
t0) followed by the left and right payloads as little-endian float32.
Round trips are bitwise exact.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, CorruptionError, DataError, ParameterError
from .tensor_core import Rng

CANONICAL_MAGIC = b"LRW1"

_RECORD_FIXED = struct.Struct("<iii")  # label, subject, t0


@dataclass
class WindowPair:
    """One training example: time-synchronized left and right windows."""

    left: np.ndarray  # (3, T) float32
    right: np.ndarray  # (3, T) float32
    label: int = -1  # -1 marks an unlabeled pair
    subject: int = 0
    t0: int = 0


@dataclass
class WindowedDataset:
    pairs: list[WindowPair]
    sample_rate_hz: float
    window_len: int
    class_names: list[str]
    provenance: str = ""

    def __post_init__(self) -> None:
        for i, pair in enumerate(self.pairs):
            if pair.left.shape != pair.right.shape:
                raise DataError(
                    f"pair {i}: left shape {pair.left.shape} != right "
                    f"shape {pair.right.shape}"
                )
            if pair.left.shape != (3, self.window_len):
                raise DataError(
                    f"pair {i}: expected (3, {self.window_len}) windows, "
                    f"got {pair.left.shape}"
                )
            if not (-1 <= pair.label < len(self.class_names)):
                raise DataError(
                    f"pair {i}: label {pair.label} has no class name"
                )

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def labels(self) -> np.ndarray:
        return np.array([p.label for p in self.pairs], dtype=np.int64)

    def labeled(self) -> "WindowedDataset":
        """Subset of pairs carrying a label (shallow copies of pairs)."""
        return dataclasses.replace(
            self, pairs=[p for p in self.pairs if p.label >= 0]
        )

    def subjects(self) -> np.ndarray:
        return np.unique([p.subject for p in self.pairs])


@dataclass
class SplitSpec:
    """Role -> subject ids; a subject may appear in at most one role."""

    roles: dict[str, list[int]]

    def __post_init__(self) -> None:
        seen: dict[int, str] = {}
        for role, subjects in self.roles.items():
            for s in subjects:
                if s in seen:
                    raise ConfigError(
                        f"subject {s} assigned to both '{seen[s]}' and '{role}'"
                    )
                seen[s] = role


def split_by_subject(dataset: WindowedDataset, spec: SplitSpec, role: str) -> WindowedDataset:
    if role not in spec.roles:
        raise ConfigError(f"split has no role '{role}'")
    wanted = set(spec.roles[role])
    return dataclasses.replace(
        dataset,
        pairs=[p for p in dataset.pairs if p.subject in wanted],
        provenance=f"{dataset.provenance}[{role}]",
    )


def window_stream(
    stream: np.ndarray,
    window_seconds: float,
    step_seconds: float,
    rate_hz: float,
) -> list[tuple[int, np.ndarray]]:
    """Slice a (C, L) stream into (start, window) tuples.

    Windows begin at 0, step, 2*step, ...; a trailing partial window is
    discarded, so the count is floor((L - window_len)/step_len) + 1.
    """
    stream = np.asarray(stream)
    if stream.ndim != 2:
        raise DataError(f"stream must be (C, L), got shape {stream.shape}")
    window_len = int(round(window_seconds * rate_hz))
    step_len = int(round(step_seconds * rate_hz))
    if window_len < 1 or step_len < 1:
        raise ConfigError(
            f"window/step of {window_seconds}/{step_seconds} s at {rate_hz} Hz "
            "collapse to zero samples"
        )
    length = stream.shape[1]
    if length < window_len:
        raise DataError(
            f"stream of {length} samples is shorter than one "
            f"{window_len}-sample window"
        )
    out = []
    for start in range(0, length - window_len + 1, step_len):
        out.append((start, stream[:, start : start + window_len].copy()))
    return out


def label_window(sample_labels: np.ndarray) -> int:
    """Majority label of a window; ties break toward the lowest id."""
    values, counts = np.unique(np.asarray(sample_labels), return_counts=True)
    if values.size == 0:
        raise DataError("cannot label an empty window")
    return int(values[np.argmax(counts)])


# ---------------------------------------------------------------------------
# Canonical container
# ---------------------------------------------------------------------------


def write_canonical(dataset: WindowedDataset, path) -> None:
    header = {
        "class_names": dataset.class_names,
        "count": len(dataset.pairs),
        "provenance": dataset.provenance,
        "sample_rate_hz": dataset.sample_rate_hz,
        "window_len": dataset.window_len,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(CANONICAL_MAGIC)
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        for pair in dataset.pairs:
            f.write(_RECORD_FIXED.pack(pair.label, pair.subject, pair.t0))
            f.write(np.ascontiguousarray(pair.left, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(pair.right, dtype="<f4").tobytes())


def read_canonical(path) -> WindowedDataset:
    from .model import _read_framed  # same framing as checkpoints

    header, payload = _read_framed(path, CANONICAL_MAGIC)
    try:
        count = int(header["count"])
        window_len = int(header["window_len"])
        rate = float(header["sample_rate_hz"])
        class_names = list(header["class_names"])
        provenance = str(header["provenance"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptionError(f"{path}: malformed header ({exc})") from exc

    window_bytes = 3 * window_len * 4
    record = _RECORD_FIXED.size + 2 * window_bytes
    if len(payload) != count * record:
        raise CorruptionError(
            f"{path}: payload holds {len(payload)} bytes, expected "
            f"{count * record} for {count} records"
        )
    pairs = []
    pos = 0
    for _ in range(count):
        label, subject, t0 = _RECORD_FIXED.unpack_from(payload, pos)
        pos += _RECORD_FIXED.size
        left = np.frombuffer(payload, dtype="<f4", count=3 * window_len, offset=pos)
        pos += window_bytes
        right = np.frombuffer(payload, dtype="<f4", count=3 * window_len, offset=pos)
        pos += window_bytes
        pairs.append(
            WindowPair(
                left=left.reshape(3, window_len).copy(),
                right=right.reshape(3, window_len).copy(),
                label=label,
                subject=subject,
                t0=t0,
            )
        )
    return WindowedDataset(
        pairs=pairs,
        sample_rate_hz=rate,
        window_len=window_len,
        class_names=class_names,
        provenance=provenance,
    )


# ---------------------------------------------------------------------------
# Synthetic symmetric-activity generator
# ---------------------------------------------------------------------------


@dataclass
class SynthConfig:
    """Desk-scale stand-in data with mirrored left/right dynamics.

    Class 0 is low-amplitude shared noise ("no activity"); every other
    class is a per-axis sinusoid with a class-specific frequency and
    amplitude profile. The right side sees the same generative signal
    mirrored through diag(mirror) with a bounded per-window phase offset.
    """

    n_classes: int = 6
    windows_per_class: int = 100
    window_len: int = 60
    sample_rate_hz: float = 30.0
    noise_sigma: float = 0.1
    phase_jitter: float = 0.3  # radians, right-side offset bound
    amplitude_jitter: float = 0.25  # per-window scale in [1-a, 1+a]
    null_amplitude: float = 0.25  # class-0 shared-noise amplitude
    subjects: int = 4
    mirror: tuple[float, float, float] = (-1.0, 1.0, 1.0)

    def __post_init__(self) -> None:
        if self.n_classes < 2:
            raise ConfigError(
                f"need at least two classes, got {self.n_classes}"
            )
        if self.windows_per_class < 1 or self.window_len < 1:
            raise ConfigError("windows_per_class and window_len must be positive")
        if self.subjects < 1:
            raise ConfigError("need at least one subject")


def _frac(x: float) -> float:
    return x - np.floor(x)


def class_prototype(c: int) -> tuple[float, np.ndarray, np.ndarray]:
    """Closed-form (frequency, per-axis amplitude, per-axis phase) for class c.

    Deterministic in c alone, so independently generated train/val/test
    sets agree on what each class looks like.
    """
    freq = 0.8 + 0.6 * (c - 1)
    axes = np.arange(3)
    amp = 0.7 + 0.6 * np.array([_frac(0.53 * c + 0.41 * a) for a in axes])
    phase = 2.0 * np.pi * np.array([_frac(0.37 * c + 0.29 * a) for a in axes])
    return freq, amp, phase


def synth_generate(config: SynthConfig, rng: Rng) -> WindowedDataset:
    """Deterministic synthetic dataset: same seed, same bytes."""
    t = np.arange(config.window_len) / config.sample_rate_hz
    mirror = np.array(config.mirror, dtype=np.float64)[:, None]
    sigma = config.noise_sigma
    pairs = []
    for c in range(config.n_classes):
        if c > 0:
            freq, amp, phase = class_prototype(c)
        for w in range(config.windows_per_class):
            if c == 0:
                signal = config.null_amplitude * rng.normal(size=(3, config.window_len))
                shifted = signal
            else:
                psi = rng.uniform(0.0, 2.0 * np.pi)
                scale = rng.uniform(1.0 - config.amplitude_jitter,
                                    1.0 + config.amplitude_jitter)
                delta = rng.uniform(-config.phase_jitter, config.phase_jitter)
                arg = 2.0 * np.pi * freq * t[None, :] + phase[:, None] + psi
                signal = scale * amp[:, None] * np.sin(arg)
                shifted = scale * amp[:, None] * np.sin(arg + delta)
            left = signal + sigma * rng.normal(size=signal.shape)
            right = mirror * shifted + sigma * rng.normal(size=signal.shape)
            pairs.append(
                WindowPair(
                    left=left.astype(np.float32),
                    right=right.astype(np.float32),
                    label=c,
                    subject=w % config.subjects,
                    t0=w * config.window_len,
                )
            )
    class_names = ["no_activity"] + [f"activity_{c}" for c in range(1, config.n_classes)]
    return WindowedDataset(
        pairs=pairs,
        sample_rate_hz=config.sample_rate_hz,
        window_len=config.window_len,
        class_names=class_names,
        provenance=f"synth(classes={config.n_classes},seed={rng.seed})",
    )


def subsample_labels(
    dataset: WindowedDataset, n_per_class: int, rng: Rng
) -> WindowedDataset:
    """Keep exactly n labels per class, mark the rest -1 (pairs stay).

    The pretraining pool is unchanged: every window survives, only labels
    are blanked. Sampling is uniform without replacement, per class in
    ascending id order, so a fixed seed picks identical window ids.
    """
    if n_per_class < 1:
        raise ParameterError(f"n_per_class must be >= 1, got {n_per_class}")
    labels = dataset.labels()
    keep: set[int] = set()
    for c in range(dataset.n_classes):
        members = np.flatnonzero(labels == c)
        if members.size < n_per_class:
            raise DataError(
                f"class {c} ('{dataset.class_names[c]}') has only "
                f"{members.size} windows, cannot keep {n_per_class} labels"
            )
        chosen = rng.choice_without_replacement(members.size, n_per_class)
        keep.update(int(members[i]) for i in np.sort(chosen))
    pairs = [
        p if i in keep else dataclasses.replace(p, label=-1)
        for i, p in enumerate(dataset.pairs)
    ]
    return dataclasses.replace(dataset, pairs=pairs)
