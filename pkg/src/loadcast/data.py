"""Synthetic load data, CSV ingestion, windowing, and normalization.

The generator manufactures heterogeneous hourly load groups (distinct
levels, daily/weekly cycles, phases, and covariate couplings) alongside
four external covariate series: a temperature proxy, an hour-of-day
encoding, a day-of-week encoding, and a price proxy.  Windowing slices
each group into (context, externals, target) training triples; splits are
chronological and normalization statistics come from the training split
only.

CSV schema (UTF-8, header required): ``timestamp`` (ISO-8601),
``group_id``, ``load_kw``, then one hourly column per external source
named ``ext_<source>_<feature>``.
"""

import csv
import math
import warnings
from dataclasses import dataclass, replace
from datetime import datetime, timedelta

import numpy as np

from .errors import ContractError, DataError, InputError
from .seeding import substream

SOURCE_NAMES = ("temp", "hour", "dow", "price")
SOURCE_DIM = 4
SAMPLE_HOURS = (2, 8, 14, 20)  # within-day offsets used as step features
RAW_EXT_COLUMNS = ("ext_temp_c", "ext_hour_enc", "ext_dow_enc", "ext_price_usd")
EPOCH = datetime(2024, 1, 1)  # a Monday
MIN_DAYS = 14

DEFAULT_CONTEXT_HOURS = 168
DEFAULT_HORIZON_HOURS = 24
DEFAULT_STRIDE_HOURS = 24
STEP_HOURS = 24


@dataclass(frozen=True)
class GroupSpec:
    """Generator parameters for one synthetic customer group."""

    group_id: str
    base_level: float = 5.0
    daily_amplitude: float = 1.5
    weekly_amplitude: float = 0.5
    noise_std: float = 0.35
    level_shift: float = 0.0
    scale_shift: float = 1.0
    shape_phase: float = 0.0
    temp_coupling: float = 0.0
    price_coupling: float = 0.0

    def __post_init__(self):
        if self.noise_std < 0:
            raise ContractError("noise_std must be >= 0")
        if self.daily_amplitude < 0 or self.weekly_amplitude < 0:
            raise ContractError("amplitudes must be >= 0")


@dataclass
class GroupSeries:
    """Hourly loads plus raw hourly covariates for one group."""

    group_id: str
    start: datetime
    loads: np.ndarray        # (T,)
    externals: np.ndarray    # (T, len(SOURCE_NAMES)), one column per source
    gap_count: int = 0


@dataclass
class Window:
    """One (context, externals, target) training triple."""

    context_loads: np.ndarray      # (steps, 24)
    context_externals: np.ndarray  # (steps, sources, SOURCE_DIM)
    target_loads: np.ndarray       # (horizon_hours,)
    anchor_hour: int               # index of the first target hour
    anchor_time: datetime


@dataclass
class GroupStats:
    """Z-score statistics fit on a training split."""

    load_mean: float
    load_std: float
    ext_mean: tuple
    ext_std: tuple

    def normalize_loads(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.load_mean) / self.load_std

    def denormalize_loads(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) * self.load_std + self.load_mean

    def denormalize_variance(self, v: np.ndarray) -> np.ndarray:
        return np.asarray(v, dtype=np.float64) * self.load_std**2

    def normalize_externals(self, ext: np.ndarray) -> np.ndarray:
        ext = np.asarray(ext, dtype=np.float64)
        mean = np.asarray(self.ext_mean)[:, None]
        std = np.asarray(self.ext_std)[:, None]
        return (ext - mean) / std

    def to_dict(self) -> dict:
        return {"load_mean": self.load_mean, "load_std": self.load_std,
                "ext_mean": list(self.ext_mean), "ext_std": list(self.ext_std)}

    @classmethod
    def from_dict(cls, d: dict) -> "GroupStats":
        return cls(d["load_mean"], d["load_std"],
                   tuple(d["ext_mean"]), tuple(d["ext_std"]))


@dataclass
class WindowedDataset:
    """Chronologically ordered windows of one group, plus split statistics."""

    group_id: str
    windows: list
    horizon_hours: int
    stats: GroupStats = None

    def __len__(self):
        return len(self.windows)

    def __iter__(self):
        return iter(self.windows)


@dataclass
class StatsTable:
    """Normalization statistics carried with a trained backbone.

    ``per_group`` mode z-scores each group with its own training-split
    statistics; ``global`` mode uses the pooled statistics for everyone.
    Groups unseen at pre-training time resolve to the pooled statistics.
    """

    mode: str
    global_stats: GroupStats
    per_group: dict

    def __post_init__(self):
        if self.mode not in ("per_group", "global"):
            raise ContractError(f"unknown normalization mode {self.mode!r}")

    def resolve(self, group_id: str):
        """Stats for a group plus whether it was known at fit time."""
        known = group_id in self.per_group
        if self.mode == "global" or not known:
            return self.global_stats, known
        return self.per_group[group_id], known

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "global": self.global_stats.to_dict(),
            "per_group": {gid: st.to_dict()
                          for gid, st in sorted(self.per_group.items())},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StatsTable":
        return cls(d["mode"], GroupStats.from_dict(d["global"]),
                   {gid: GroupStats.from_dict(st)
                    for gid, st in d["per_group"].items()})


def normalize_window(window: Window, stats: GroupStats) -> Window:
    """Z-scored copy of a window (loads and externals)."""
    return Window(
        context_loads=stats.normalize_loads(window.context_loads),
        context_externals=stats.normalize_externals(window.context_externals),
        target_loads=stats.normalize_loads(window.target_loads),
        anchor_hour=window.anchor_hour,
        anchor_time=window.anchor_time,
    )


# -- synthetic generation --------------------------------------------------


def _covariates(hours: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Raw hourly covariates: temperature, hour/dow encodings, price."""
    t = hours.astype(np.float64)
    hod = t % 24.0
    week_phase = (t / 24.0) % 7.0
    temp = 10.0 + 8.0 * np.sin(2.0 * math.pi * (hod - 9.0) / 24.0) \
        + rng.normal(0.0, 0.6, t.size)
    hour_enc = np.sin(2.0 * math.pi * hod / 24.0)
    dow_enc = np.sin(2.0 * math.pi * week_phase / 7.0)
    price = 30.0 + 10.0 * np.sin(2.0 * math.pi * (hod - 11.0) / 24.0) \
        + 3.0 * (week_phase < 5.0) + rng.normal(0.0, 1.0, t.size)
    return np.column_stack([temp, hour_enc, dow_enc, price])


def generate_group(spec: GroupSpec, days: int, seed: int) -> GroupSeries:
    """Generate one group's hourly series; fully determined by (spec, seed)."""
    if days < MIN_DAYS:
        raise InputError(
            f"days must be >= {MIN_DAYS} to cover one context week plus targets, "
            f"got {days}"
        )
    rng = substream(seed, f"data:{spec.group_id}")
    hours = np.arange(days * 24)
    ext = _covariates(hours, rng)
    hod = hours % 24.0
    week_phase = (hours / 24.0) % 7.0
    loads = (
        spec.base_level * spec.scale_shift
        + spec.level_shift
        + spec.daily_amplitude * np.sin(2.0 * math.pi * (hod - 7.0) / 24.0 + spec.shape_phase)
        + spec.weekly_amplitude * np.sin(2.0 * math.pi * week_phase / 7.0)
        + spec.temp_coupling * (ext[:, 0] - 10.0)
        + spec.price_coupling * (ext[:, 3] - 30.0)
        + rng.normal(0.0, spec.noise_std, hours.size)
    )
    return GroupSeries(spec.group_id, EPOCH, loads, ext)


def generate_synthetic(specs, days: int, seed: int) -> dict:
    """Generate all groups; per-group sub-streams keep groups independent."""
    series = {}
    for spec in specs:
        if spec.group_id in series:
            raise InputError(f"duplicate group_id {spec.group_id!r}")
        series[spec.group_id] = generate_group(spec, days, seed)
    return series


def preset_specs(name: str) -> list:
    """Named benchmark presets; ``feeder3`` mimics a mixed feeder."""
    if name == "feeder3":
        return [
            GroupSpec("residential", base_level=2.0, daily_amplitude=0.9,
                      weekly_amplitude=0.25, noise_std=0.35, shape_phase=2.5,
                      temp_coupling=0.05),
            GroupSpec("small_commercial", base_level=6.0, daily_amplitude=2.2,
                      weekly_amplitude=0.9, noise_std=0.35, shape_phase=0.0,
                      temp_coupling=0.03, price_coupling=0.02),
            GroupSpec("large_commercial", base_level=15.0, daily_amplitude=3.0,
                      weekly_amplitude=1.1, noise_std=0.35, shape_phase=-0.8,
                      temp_coupling=0.08),
        ]
    raise InputError(f"unknown preset {name!r}")


def shifted_spec(base: GroupSpec, sigmas: float, group_id: str) -> GroupSpec:
    """Clone of a group with a level shift of ``sigmas`` noise deviations."""
    return replace(base, group_id=group_id,
                   level_shift=base.level_shift + sigmas * base.noise_std)


# -- CSV round trip ---------------------------------------------------------


def write_csv(series_map: dict, path):
    """Write groups to the documented CSV schema, sorted for reproducibility."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestamp", "group_id", "load_kw", *RAW_EXT_COLUMNS])
        for gid in sorted(series_map):
            series = series_map[gid]
            for i in range(series.loads.size):
                ts = series.start + timedelta(hours=i)
                row = [ts.isoformat(), gid, repr(float(series.loads[i]))]
                row.extend(repr(float(v)) for v in series.externals[i])
                writer.writerow(row)


def load_csv(path) -> dict:
    """Parse the CSV schema back into per-group series.

    Rows are sorted by timestamp within each group; duplicate timestamps
    raise, and non-hourly spacing is recorded as gaps (windowing refuses
    gapped series rather than imputing).
    """
    by_group: dict[str, list] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file, expected a CSV header") from None
        required = ["timestamp", "group_id", "load_kw"]
        if header[:3] != required:
            raise DataError(
                f"{path}: header must start with {required}, got {header[:3]}"
            )
        ext_cols = header[3:]
        sources = []
        for col in ext_cols:
            parts = col.split("_")
            if len(parts) < 3 or parts[0] != "ext":
                raise DataError(f"{path}: covariate column {col!r} must be named "
                                "ext_<source>_<feature>")
            if parts[1] in sources:
                raise DataError(
                    f"{path}: multiple columns for source {parts[1]!r}; "
                    "this reader expects one hourly column per source"
                )
            sources.append(parts[1])
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: line {lineno}: expected {len(header)} "
                                f"fields, got {len(row)}")
            try:
                ts = datetime.fromisoformat(row[0])
            except ValueError:
                raise DataError(f"{path}: line {lineno}: bad timestamp {row[0]!r}") from None
            gid = row[1]
            if not gid:
                raise DataError(f"{path}: line {lineno}: empty group_id")
            try:
                load = float(row[2])
                ext = [float(v) for v in row[3:]]
            except ValueError:
                raise DataError(f"{path}: line {lineno}: non-numeric field") from None
            by_group.setdefault(gid, []).append((ts, load, ext))

    series_map = {}
    for gid, rows in by_group.items():
        rows.sort(key=lambda r: r[0])
        times = [r[0] for r in rows]
        gaps = 0
        for prev, cur in zip(times, times[1:]):
            delta = cur - prev
            if delta == timedelta(0):
                raise DataError(f"{path}: duplicate timestamp {cur.isoformat()} "
                                f"in group {gid!r}")
            if delta != timedelta(hours=1):
                gaps += 1
        if gaps:
            warnings.warn(f"group {gid!r}: {gaps} gap(s) in hourly coverage")
        series_map[gid] = GroupSeries(
            gid, times[0],
            np.array([r[1] for r in rows], dtype=np.float64),
            np.array([r[2] for r in rows], dtype=np.float64),
            gap_count=gaps,
        )
    return series_map


# -- windowing and splits ----------------------------------------------------


def make_windows(series: GroupSeries, context_hours: int = DEFAULT_CONTEXT_HOURS,
                 horizon_hours: int = DEFAULT_HORIZON_HOURS,
                 stride_hours: int = DEFAULT_STRIDE_HOURS) -> WindowedDataset:
    """Slice a series into sliding (context, target) windows."""
    if series.gap_count:
        raise DataError(
            f"group {series.group_id!r} has {series.gap_count} gap(s); "
            "fill or drop the gapped range before windowing"
        )
    if context_hours % STEP_HOURS != 0:
        raise ContractError(f"context_hours must be a multiple of {STEP_HOURS}")
    if min(context_hours, horizon_hours, stride_hours) < 1:
        raise ContractError("window lengths must be positive")
    total = series.loads.size
    needed = context_hours + horizon_hours
    if total < needed:
        raise InputError(
            f"group {series.group_id!r} has {total} hours; windowing needs at "
            f"least {needed} (context {context_hours} + horizon {horizon_hours})"
        )
    steps = context_hours // STEP_HOURS
    count = (total - needed) // stride_hours + 1
    sample = np.asarray(SAMPLE_HOURS)
    windows = []
    for w in range(count):
        start = w * stride_hours
        anchor = start + context_hours
        ctx = series.loads[start:anchor].reshape(steps, STEP_HOURS)
        ext = np.empty((steps, series.externals.shape[1], SOURCE_DIM))
        for s in range(steps):
            ext[s] = series.externals[start + s * STEP_HOURS + sample].T
        windows.append(Window(
            context_loads=ctx,
            context_externals=ext,
            target_loads=series.loads[anchor:anchor + horizon_hours].copy(),
            anchor_hour=anchor,
            anchor_time=series.start + timedelta(hours=anchor),
        ))
    return WindowedDataset(series.group_id, windows, horizon_hours)


def context_arrays(series: GroupSeries, context_hours: int = DEFAULT_CONTEXT_HOURS):
    """Context tensors for prediction: the last ``context_hours`` of a series.

    Returns ``(context_loads, context_externals, last_time)`` shaped like a
    window's context fields.
    """
    if series.gap_count:
        raise DataError(f"group {series.group_id!r} has gaps; cannot form a context")
    if context_hours % STEP_HOURS != 0:
        raise ContractError(f"context_hours must be a multiple of {STEP_HOURS}")
    total = series.loads.size
    if total < context_hours:
        raise InputError(
            f"group {series.group_id!r} supplies {total} hours of context; "
            f"{context_hours} hours are required"
        )
    start = total - context_hours
    steps = context_hours // STEP_HOURS
    ctx = series.loads[start:].reshape(steps, STEP_HOURS)
    sample = np.asarray(SAMPLE_HOURS)
    ext = np.empty((steps, series.externals.shape[1], SOURCE_DIM))
    for s in range(steps):
        ext[s] = series.externals[start + s * STEP_HOURS + sample].T
    last_time = series.start + timedelta(hours=total - 1)
    return ctx, ext, last_time


def compute_stats(windows) -> GroupStats:
    """Z-score statistics over the given (training) windows."""
    windows = list(windows)
    if not windows:
        raise ContractError("cannot compute statistics from zero windows")
    loads = np.concatenate(
        [w.context_loads.ravel() for w in windows]
        + [w.target_loads.ravel() for w in windows]
    )
    ext = np.concatenate([w.context_externals for w in windows], axis=0)
    n_sources = ext.shape[1]
    ext_mean, ext_std = [], []
    for j in range(n_sources):
        vals = ext[:, j, :].ravel()
        ext_mean.append(float(vals.mean()))
        ext_std.append(float(max(vals.std(), 1e-12)))
    load_std = float(loads.std())
    if load_std < 1e-12:
        load_std = 1.0  # constant series: leave values centered, unscaled
    return GroupStats(float(loads.mean()), load_std, tuple(ext_mean), tuple(ext_std))


def split_chronological(dataset: WindowedDataset, fractions=(0.8, 0.1, 0.1)):
    """Chronological train/val/test split; stats come from train only."""
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise ContractError(f"fractions must be three non-negative values, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ContractError(f"fractions must sum to 1, got {fractions}")
    n = len(dataset.windows)
    if n == 0:
        raise InputError(f"group {dataset.group_id!r} has no windows to split")
    n_train = max(1, int(n * fractions[0]))
    n_val = min(int(n * fractions[1]), n - n_train)
    n_test = n - n_train - n_val
    if n_val == 0 or n_test == 0:
        warnings.warn(
            f"group {dataset.group_id!r}: only {n} window(s); "
            f"split is {n_train}/{n_val}/{n_test}"
        )
    ordered = sorted(dataset.windows, key=lambda w: w.anchor_hour)
    stats = compute_stats(ordered[:n_train])
    parts = (ordered[:n_train], ordered[n_train:n_train + n_val],
             ordered[n_train + n_val:])
    return tuple(
        WindowedDataset(dataset.group_id, list(part), dataset.horizon_hours, stats)
        for part in parts
    )
