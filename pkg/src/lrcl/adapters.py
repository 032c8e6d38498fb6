"""Ingestion of MM-Fit-style and Opportunity-style source trees.

The source layouts are user-supplied configuration: file templates,
column indices and label maps vary between dataset copies, so the adapter
configs make them explicit instead of guessing. Both adapters emit the
canonical windowed-pair format, already split into roles.

MM-Fit: one directory per workout with left/right smartwatch
accelerometer files (.npy or .csv rows of [time, ..., x, y, z]) and a
label file of (start, end, ..., class_name) segments on the same clock.
Both wrists are resampled onto a common clock by nearest-timestamp
selection; samples outside any labeled segment count as class 0
("no activity"). Splits follow the published per-workout assignment.

Opportunity: whitespace-separated .dat session files with NaNs for
dropped samples. The locomotion label column and the two lower-arm
accelerometer column triplets must be named in the config. NaNs are
linearly interpolated within a session (edges held); windows whose
majority label is the null class are excluded.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import (
    SplitSpec,
    WindowPair,
    WindowedDataset,
    label_window,
    split_by_subject,
    window_stream,
)
from .errors import AdapterError, ConfigError

log = logging.getLogger(__name__)

MMFIT_CLASSES = [
    "no_activity",
    "squats",
    "lunges",
    "bicep_curls",
    "situps",
    "pushups",
    "tricep_extensions",
    "dumbbell_rows",
    "jumping_jacks",
    "dumbbell_shoulder_press",
    "lateral_shoulder_raises",
]

# Published per-workout split (workout id doubles as subject id).
MMFIT_SPLITS = SplitSpec(
    roles={
        "train": [1, 2, 3, 4, 6, 7, 8, 16, 17, 18],
        "validation": [14, 15, 19],
        "test": [9, 10, 11],
        "unseen_test": [0, 5, 12, 13, 20],
    }
)

OPPORTUNITY_CLASSES = ["stand", "walk", "sit", "lie"]

# Raw locomotion codes in the session files -> class ids; 0 stays null.
OPPORTUNITY_LABEL_MAP = {1: 0, 2: 1, 4: 2, 5: 3}

OPPORTUNITY_TRAIN_SESSIONS = [
    "S1-ADL1", "S1-ADL2", "S1-ADL3", "S1-ADL4", "S1-ADL5", "S1-Drill",
    "S2-ADL1", "S2-ADL2", "S2-ADL3", "S2-Drill",
    "S3-ADL1", "S3-ADL2", "S3-ADL3", "S3-Drill",
]
OPPORTUNITY_TEST_SESSIONS = ["S2-ADL4", "S2-ADL5", "S3-ADL4", "S3-ADL5"]


@dataclass
class MMFitAdapterConfig:
    root: str
    workouts: list[dict] = field(default_factory=list)  # {"id": "w00", "subject": 0}
    left_acc: str = "{id}/{id}_sw_l_acc.npy"
    right_acc: str = "{id}/{id}_sw_r_acc.npy"
    labels: str = "{id}/{id}_labels.csv"
    time_column: int = 0
    x_column: int = 2  # x, y, z occupy three consecutive columns
    label_start_column: int = 0
    label_end_column: int = 1
    label_class_column: int = 3
    time_units_per_second: float = 1.0
    sample_rate_hz: float = 100.0
    window_seconds: float = 2.0
    step_seconds: float = 1.0
    class_names: list[str] = field(default_factory=lambda: list(MMFIT_CLASSES))


@dataclass
class OpportunityAdapterConfig:
    root: str
    rla_columns: tuple[int, int, int]
    lla_columns: tuple[int, int, int]
    label_column: int
    session_file: str = "{session}.dat"
    train_sessions: list[str] = field(
        default_factory=lambda: list(OPPORTUNITY_TRAIN_SESSIONS)
    )
    test_sessions: list[str] = field(
        default_factory=lambda: list(OPPORTUNITY_TEST_SESSIONS)
    )
    label_map: dict[int, int] = field(
        default_factory=lambda: dict(OPPORTUNITY_LABEL_MAP)
    )
    sample_rate_hz: float = 30.0
    window_seconds: float = 2.0
    step_seconds: float = 1.0
    class_names: list[str] = field(default_factory=lambda: list(OPPORTUNITY_CLASSES))


def _load_table(path: Path) -> np.ndarray:
    if path.suffix == ".npy":
        table = np.load(path)
    else:
        table = np.loadtxt(path, delimiter="," if path.suffix == ".csv" else None,
                           ndmin=2)
    if table.ndim != 2:
        raise AdapterError(f"{path}: expected a 2-d table, got shape {table.shape}")
    return np.asarray(table, dtype=np.float64)


def _nearest_indices(times: np.ndarray, ticks: np.ndarray) -> np.ndarray:
    """Index of the sample whose timestamp is nearest each tick."""
    pos = np.searchsorted(times, ticks)
    pos = np.clip(pos, 1, len(times) - 1)
    left_closer = (ticks - times[pos - 1]) <= (times[pos] - ticks)
    return np.where(left_closer, pos - 1, pos)


def _read_mmfit_labels(path: Path, cfg: MMFitAdapterConfig) -> list[tuple[float, float, int]]:
    name_to_id = {name: i for i, name in enumerate(cfg.class_names)}
    segments = []
    for line_no, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        parts = [p.strip() for p in line.split(",")]
        try:
            start = float(parts[cfg.label_start_column])
            end = float(parts[cfg.label_end_column])
            name = parts[cfg.label_class_column]
        except (IndexError, ValueError) as exc:
            raise AdapterError(f"{path}:{line_no}: unreadable label row") from exc
        if name not in name_to_id:
            raise AdapterError(f"{path}:{line_no}: unknown class '{name}'")
        segments.append((start, end, name_to_id[name]))
    return segments


def adapt_mmfit(config: MMFitAdapterConfig) -> dict[str, WindowedDataset]:
    """Ingest an MM-Fit tree into canonical datasets, one per split role."""
    if not config.workouts:
        raise ConfigError("mmfit adapter config lists no workouts")
    root = Path(config.root)
    window_len = int(round(config.window_seconds * config.sample_rate_hz))
    all_pairs: list[WindowPair] = []
    for workout in config.workouts:
        wid = workout["id"]
        subject = int(workout["subject"])
        paths = {
            "left": root / config.left_acc.format(id=wid),
            "right": root / config.right_acc.format(id=wid),
            "labels": root / config.labels.format(id=wid),
        }
        missing = [str(p) for p in paths.values() if not p.exists()]
        if missing:
            raise AdapterError(
                f"workout {wid}: missing file(s) {', '.join(missing)}"
            )
        sides = {}
        for side in ("left", "right"):
            table = _load_table(paths[side])
            times = table[:, config.time_column] / config.time_units_per_second
            if np.any(np.diff(times) < 0):
                order = np.argsort(times, kind="stable")
                table, times = table[order], times[order]
            xyz = table[:, config.x_column : config.x_column + 3].T
            sides[side] = (times, xyz)

        t_begin = max(sides["left"][0][0], sides["right"][0][0])
        t_end = min(sides["left"][0][-1], sides["right"][0][-1])
        n_ticks = int(np.floor((t_end - t_begin) * config.sample_rate_hz)) + 1
        if n_ticks < window_len:
            raise AdapterError(
                f"workout {wid}: streams overlap for only {n_ticks} samples"
            )
        ticks = t_begin + np.arange(n_ticks) / config.sample_rate_hz

        resampled = {}
        for side, (times, xyz) in sides.items():
            resampled[side] = xyz[:, _nearest_indices(times, ticks)]

        tick_labels = np.zeros(n_ticks, dtype=np.int64)  # class 0 = no activity
        for start, end, class_id in _read_mmfit_labels(paths["labels"], config):
            s = (start / config.time_units_per_second, end / config.time_units_per_second)
            tick_labels[(ticks >= s[0]) & (ticks <= s[1])] = class_id

        left_windows = window_stream(
            resampled["left"], config.window_seconds, config.step_seconds,
            config.sample_rate_hz,
        )
        right_windows = window_stream(
            resampled["right"], config.window_seconds, config.step_seconds,
            config.sample_rate_hz,
        )
        for (t0, lw), (_, rw) in zip(left_windows, right_windows):
            label = label_window(tick_labels[t0 : t0 + window_len])
            all_pairs.append(
                WindowPair(
                    left=lw.astype(np.float32),
                    right=rw.astype(np.float32),
                    label=label,
                    subject=subject,
                    t0=t0,
                )
            )

    full = WindowedDataset(
        pairs=all_pairs,
        sample_rate_hz=config.sample_rate_hz,
        window_len=window_len,
        class_names=list(config.class_names),
        provenance=f"mmfit:{config.root}",
    )
    present = set(full.subjects().tolist())
    out = {}
    for role in MMFIT_SPLITS.roles:
        subset = split_by_subject(full, MMFIT_SPLITS, role)
        if len(subset):
            out[role] = subset
    absent = present - {s for ids in MMFIT_SPLITS.roles.values() for s in ids}
    if absent:
        log.warning("subjects %s are outside the published split", sorted(absent))
    return out


def _interpolate_nans(column: np.ndarray) -> np.ndarray:
    """Linear interpolation over NaN runs; leading/trailing NaNs held."""
    out = column.copy()
    bad = np.isnan(out)
    if not bad.any():
        return out
    good = np.flatnonzero(~bad)
    if good.size == 0:
        raise AdapterError("a sensor column contains no valid samples")
    out[bad] = np.interp(np.flatnonzero(bad), good, out[good])
    return out


def adapt_opportunity(config: OpportunityAdapterConfig) -> dict[str, WindowedDataset]:
    """Ingest Opportunity sessions into canonical train/test datasets.

    Returns the datasets plus a "dropped_null" count in the train/test
    provenance; LLA maps to the left side, RLA to the right.
    """
    for name in ("rla_columns", "lla_columns", "label_column"):
        if getattr(config, name) is None:
            raise ConfigError(f"opportunity adapter config must set {name}")
    root = Path(config.root)
    window_len = int(round(config.window_seconds * config.sample_rate_hz))
    out: dict[str, WindowedDataset] = {}
    for role, sessions in (("train", config.train_sessions),
                           ("test", config.test_sessions)):
        pairs: list[WindowPair] = []
        dropped = 0
        for session in sessions:
            path = root / config.session_file.format(session=session)
            if not path.exists():
                raise AdapterError(f"session {session}: missing file {path}")
            table = _load_table(path)
            n_cols = table.shape[1]
            for col in (*config.rla_columns, *config.lla_columns, config.label_column):
                if not 0 <= col < n_cols:
                    raise ConfigError(
                        f"column {col} outside the {n_cols}-column session file"
                    )
            lla = np.stack(
                [_interpolate_nans(table[:, c]) for c in config.lla_columns]
            )
            rla = np.stack(
                [_interpolate_nans(table[:, c]) for c in config.rla_columns]
            )
            raw_labels = table[:, config.label_column]
            mapped = np.full(raw_labels.shape, -1, dtype=np.int64)
            for raw, class_id in config.label_map.items():
                mapped[raw_labels == raw] = class_id

            subject = int(session.split("-")[0].lstrip("S"))
            left_windows = window_stream(
                lla, config.window_seconds, config.step_seconds,
                config.sample_rate_hz,
            )
            right_windows = window_stream(
                rla, config.window_seconds, config.step_seconds,
                config.sample_rate_hz,
            )
            for (t0, lw), (_, rw) in zip(left_windows, right_windows):
                label = label_window(mapped[t0 : t0 + window_len])
                if label < 0:  # null-majority windows are excluded
                    dropped += 1
                    continue
                pairs.append(
                    WindowPair(
                        left=lw.astype(np.float32),
                        right=rw.astype(np.float32),
                        label=label,
                        subject=subject,
                        t0=t0,
                    )
                )
        log.info("opportunity %s: kept %d windows, dropped %d null-majority",
                 role, len(pairs), dropped)
        out[role] = WindowedDataset(
            pairs=pairs,
            sample_rate_hz=config.sample_rate_hz,
            window_len=window_len,
            class_names=list(config.class_names),
            provenance=f"opportunity:{config.root}[{role}] dropped_null={dropped}",
        )
    return out


def mmfit_config_from_json(doc: dict) -> MMFitAdapterConfig:
    try:
        return MMFitAdapterConfig(**doc)
    except TypeError as exc:
        raise ConfigError(f"bad mmfit adapter config: {exc}") from exc


def opportunity_config_from_json(doc: dict) -> OpportunityAdapterConfig:
    doc = dict(doc)
    for key in ("rla_columns", "lla_columns"):
        if key in doc:
            doc[key] = tuple(doc[key])
    if "label_map" in doc:
        doc["label_map"] = {int(k): int(v) for k, v in doc["label_map"].items()}
    try:
        return OpportunityAdapterConfig(**doc)
    except TypeError as exc:
        raise ConfigError(f"bad opportunity adapter config: {exc}") from exc
