"""Basin datasets: CSV ingestion/export, driver standardization, synthetic basins.

The synthetic generator is a small process model: seasonal weather drives an
equilibrium stream temperature, water is advected downstream with a one-day
lag, and each reservoir releases cold bottom water whenever the next-day
temperature of its first downstream segment is expected to exceed a threshold.
A toy two-layer lake stands in for a physics-based lake simulator.
"""
from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .network import (Edge, EdgeClass, NetworkTopology, NodeKind, build_topology, read_edges_csv,
                      res, seg, write_edges_csv)

_log = logging.getLogger(__name__)

N_FEATURES = 10
FEATURE_NAMES = ["precip_mm", "air_temp_c", "day_of_year", "solar_wm2", "shade_frac",
                 "pet_mm", "elevation_m", "length_m", "slope", "width_m"]
META_COLUMNS = ["dam_height_m", "dam_length_m", "depth_m", "elevation_m", "catchment_area_km2"]
TEMP_BOUNDS = (-5.0, 45.0)


class DataError(ValueError):
    pass


class SchemaError(DataError):
    pass


class CalendarGap(DataError):
    pass


class OrphanObservation(DataError):
    pass


class PartialReleaseData(DataError):
    pass


class ConfigInvalid(DataError):
    pass


class ZeroVarianceFeature(UserWarning):
    pass


class BasinDataset:
    """Aligned daily tables for one network.

    ``drivers`` is ``(N, T, D_x)``, ``obs`` is ``(N, T)`` with NaN where nothing
    was observed, ``meta`` is ``(M, D_m)``.  Release flows and simulated
    profiles are ``(M, T, L)`` (NaN rows for reservoirs without data) and are
    read lazily so a run can prove which tables it touched via ``accessed``.
    """

    def __init__(self, dates, drivers, obs, meta, release=None, profiles=None,
                 release_available=None, feature_names=None):
        self.dates = np.asarray(dates, dtype="datetime64[D]")
        self.drivers = np.asarray(drivers, dtype=np.float64)
        self.obs = np.asarray(obs, dtype=np.float64)
        self.meta = np.asarray(meta, dtype=np.float64).reshape(-1, len(META_COLUMNS))
        self.feature_names = list(feature_names or FEATURE_NAMES[: self.drivers.shape[2]])
        m = self.meta.shape[0]
        if release_available is None:
            release_available = np.zeros(m, dtype=bool)
        self._available = (release_available if callable(release_available)
                           else np.asarray(release_available, dtype=bool))
        self._release = release
        self._profiles = profiles
        self.accessed: set[str] = set()

    # shapes
    @property
    def n_segments(self) -> int:
        return self.drivers.shape[0]

    @property
    def n_days(self) -> int:
        return self.drivers.shape[1]

    @property
    def n_features(self) -> int:
        return self.drivers.shape[2]

    @property
    def n_reservoirs(self) -> int:
        return self.meta.shape[0]

    @property
    def mask(self) -> np.ndarray:
        return ~np.isnan(self.obs)

    def _table(self, name: str) -> np.ndarray | None:
        self.accessed.add(name)
        attr = f"_{name}"
        value = getattr(self, attr)
        if callable(value):
            value = value()
            setattr(self, attr, value)
        return value

    @property
    def release_available(self) -> np.ndarray:
        """Reservoirs that have both release flows and simulated profiles."""
        if callable(self._available):
            self._available = np.asarray(self._available(), dtype=bool)
        return self._available

    @property
    def release(self) -> np.ndarray | None:
        return self._table("release")

    @property
    def profiles(self) -> np.ndarray | None:
        return self._table("profiles")

    @property
    def n_layers(self) -> int:
        tab = self.release
        return 0 if tab is None else tab.shape[2]

    def validate(self) -> None:
        if self.dates.size != self.n_days:
            raise SchemaError("calendar length does not match driver length")
        if self.n_days > 1 and not (np.diff(self.dates).astype(int) == 1).all():
            raise CalendarGap("calendar is not a contiguous daily sequence")
        if not np.isfinite(self.drivers).all():
            raise SchemaError("drivers contain non-finite values")
        if not np.isfinite(self.meta).all():
            raise SchemaError("reservoir meta-features contain non-finite values")
        o = self.obs[self.mask]
        if o.size and (o.min() < TEMP_BOUNDS[0] or o.max() > TEMP_BOUNDS[1]):
            raise SchemaError(f"observed temperatures outside {TEMP_BOUNDS} degC")
        if self.obs.shape != self.drivers.shape[:2]:
            raise SchemaError("observation grid does not match drivers")


# --------------------------------------------------------------- standardize

@dataclass
class FeatureStats:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, values: np.ndarray) -> np.ndarray:
        safe = np.where(self.std > 0, self.std, 1.0)
        out = (values - self.mean) / safe
        return np.where(self.std > 0, out, 0.0)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureStats":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


def fit_stats(values: np.ndarray, axis) -> FeatureStats:
    mean = values.mean(axis=axis)
    std = values.std(axis=axis)
    return FeatureStats(np.asarray(mean, dtype=np.float64), np.asarray(std, dtype=np.float64))


def standardize_drivers(dataset: BasinDataset, train_range: range):
    """z-score every driver feature with statistics from ``train_range`` days only."""
    if len(train_range) == 0:
        raise ValueError("training range is empty")
    train = dataset.drivers[:, train_range.start:train_range.stop, :]
    stats = fit_stats(train.reshape(-1, dataset.n_features), axis=0)
    flat = np.flatnonzero(stats.std == 0)
    if flat.size:
        names = [dataset.feature_names[i] for i in flat]
        warnings.warn(f"zero-variance driver features mapped to 0: {names}", ZeroVarianceFeature,
                      stacklevel=2)
    return stats.apply(dataset.drivers), stats


# ---------------------------------------------------------------------- csv io

def _fmt(x: float) -> str:
    return repr(float(x))


def _write_rows(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_dataset(dataset: BasinDataset, topology: NetworkTopology, directory: Path,
                  truth: dict | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    dates = [str(d) for d in dataset.dates]
    write_edges_csv(topology, directory / "edges.csv")
    _write_rows(directory / "drivers.csv",
                ["segment_id", "date"] + [f"feat_{j}" for j in range(dataset.n_features)],
                ([i, dates[t]] + [_fmt(v) for v in dataset.drivers[i, t]]
                 for i in range(dataset.n_segments) for t in range(dataset.n_days)))
    obs_i, obs_t = np.nonzero(dataset.mask)
    _write_rows(directory / "observations.csv", ["segment_id", "date", "temp_c"],
                ([i, dates[t], _fmt(dataset.obs[i, t])] for i, t in zip(obs_i, obs_t)))
    _write_rows(directory / "reservoir_meta.csv", ["reservoir_id"] + META_COLUMNS,
                ([k] + [_fmt(v) for v in dataset.meta[k]] for k in range(dataset.n_reservoirs)))
    avail = np.flatnonzero(dataset.release_available)
    if avail.size:
        rel, prof = dataset.release, dataset.profiles
        L = rel.shape[2]
        _write_rows(directory / "release.csv",
                    ["reservoir_id", "date"] + [f"flow_layer_{d + 1}" for d in range(L)],
                    ([k, dates[t]] + [_fmt(v) for v in rel[k, t]]
                     for k in avail for t in range(dataset.n_days)))
        _write_rows(directory / "profiles.csv",
                    ["reservoir_id", "date"] + [f"temp_layer_{d + 1}" for d in range(L)],
                    ([k, dates[t]] + [_fmt(v) for v in prof[k, t]]
                     for k in avail for t in range(dataset.n_days)))
    if truth is not None:
        temp, cf = truth["temp"], truth["no_release_temp"]
        _write_rows(directory / "truth.csv", ["segment_id", "date", "temp_c", "no_release_temp_c"],
                    ([i, dates[t], _fmt(temp[i, t]), _fmt(cf[i, t])]
                     for i in range(temp.shape[0]) for t in range(temp.shape[1])))


def _read_table(path: Path, required: list[str], prefix: str | None = None):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path.name}: empty file (header required)") from None
        missing = [c for c in required if c not in header]
        if missing:
            raise SchemaError(f"{path.name}: missing columns {missing}")
        value_cols = []
        if prefix is not None:
            value_cols = [c for c in header if c.startswith(prefix)]
            expected = [f"{prefix}{j + (0 if prefix == 'feat_' else 1)}" for j in range(len(value_cols))]
            if not value_cols or value_cols != expected:
                raise SchemaError(f"{path.name}: value columns must be {prefix}N in order")
        rows = list(reader)
    idx = {c: header.index(c) for c in required + value_cols}
    return header, rows, idx, value_cols


def _parse_date(s: str, path: Path) -> np.datetime64:
    try:
        return np.datetime64(s, "D")
    except ValueError:
        raise SchemaError(f"{path.name}: bad ISO date {s!r}") from None


def _read_layer_table(path: Path, id_col: str, prefix: str, n_res: int, date_pos: dict):
    _, rows, idx, cols = _read_table(path, [id_col, "date"], prefix)
    T = len(date_pos)
    out = np.full((n_res, T, len(cols)), np.nan)
    seen = np.zeros((n_res, T), dtype=bool)
    for row in rows:
        k = int(row[idx[id_col]])
        if not 0 <= k < n_res:
            raise OrphanObservation(f"{path.name}: unknown reservoir id {k}")
        d = _parse_date(row[idx["date"]], path)
        if d not in date_pos:
            raise CalendarGap(f"{path.name}: date {d} outside the driver calendar")
        t = date_pos[d]
        out[k, t] = [float(row[idx[c]]) for c in cols]
        seen[k, t] = True
    present = seen.any(axis=1)
    if (present & ~seen.all(axis=1)).any():
        raise CalendarGap(f"{path.name}: a reservoir is missing days")
    return out, present


def load_dataset(directory: Path) -> tuple[BasinDataset, NetworkTopology]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"dataset directory {directory} does not exist")
    for name in ("edges.csv", "drivers.csv", "observations.csv", "reservoir_meta.csv"):
        if not (directory / name).is_file():
            raise SchemaError(f"missing required table {name}")
    has_rel = (directory / "release.csv").is_file()
    has_prof = (directory / "profiles.csv").is_file()
    if has_rel != has_prof:
        raise PartialReleaseData("release.csv and profiles.csv must be supplied together")

    # drivers define the segment set and calendar
    path = directory / "drivers.csv"
    _, rows, idx, fcols = _read_table(path, ["segment_id", "date"], "feat_")
    seg_ids = sorted({int(r[idx["segment_id"]]) for r in rows})
    if seg_ids != list(range(len(seg_ids))):
        raise SchemaError("drivers.csv segment ids must be 0..N-1")
    all_dates = sorted({_parse_date(r[idx["date"]], path) for r in rows})
    dates = np.array(all_dates, dtype="datetime64[D]")
    if dates.size > 1 and not (np.diff(dates).astype(int) == 1).all():
        raise CalendarGap("drivers.csv calendar has gaps")
    date_pos = {d: t for t, d in enumerate(dates)}
    N, T = len(seg_ids), len(dates)
    drivers = np.full((N, T, len(fcols)), np.nan)
    for r in rows:
        drivers[int(r[idx["segment_id"]]), date_pos[_parse_date(r[idx["date"]], path)]] = [
            float(r[idx[c]]) for c in fcols]
    if np.isnan(drivers).any():
        raise CalendarGap("drivers.csv does not cover every segment on every date")

    path = directory / "reservoir_meta.csv"
    _, rows, idx, _ = _read_table(path, ["reservoir_id"] + META_COLUMNS)
    meta_rows = sorted((int(r[idx["reservoir_id"]]), [float(r[idx[c]]) for c in META_COLUMNS])
                       for r in rows)
    if [k for k, _ in meta_rows] != list(range(len(meta_rows))):
        raise SchemaError("reservoir_meta.csv ids must be 0..M-1")
    meta = np.array([v for _, v in meta_rows], dtype=np.float64).reshape(-1, len(META_COLUMNS))
    M = meta.shape[0]

    topology = read_edges_csv(directory / "edges.csv", n_segments=N, n_reservoirs=M)

    path = directory / "observations.csv"
    _, rows, idx, _ = _read_table(path, ["segment_id", "date", "temp_c"])
    obs = np.full((N, T), np.nan)
    for r in rows:
        i = int(r[idx["segment_id"]])
        if not 0 <= i < N:
            raise OrphanObservation(f"observation for unknown segment {i}")
        d = _parse_date(r[idx["date"]], path)
        if d not in date_pos:
            raise OrphanObservation(f"observation on {d} is outside the driver calendar")
        obs[i, date_pos[d]] = float(r[idx["temp_c"]])

    release = profiles = None
    available = np.zeros(M, dtype=bool)
    if has_rel:
        # presence is known from the file listing; contents parse on first access
        def read(name, prefix):
            def loader():
                values, _ = _read_layer_table(directory / name, "reservoir_id", prefix, M, date_pos)
                if prefix == "flow_layer_" and (values[~np.isnan(values)] < 0).any():
                    raise SchemaError("release flows must be non-negative")
                return values
            return loader

        def eligible():
            rel_ids = _release_ids(directory / "release.csv", M)
            if (rel_ids != _release_ids(directory / "profiles.csv", M)).any():
                raise PartialReleaseData("a reservoir has release data without profiles "
                                         "or profiles without release data")
            return rel_ids

        release = read("release.csv", "flow_layer_")
        profiles = read("profiles.csv", "temp_layer_")
        available = eligible

    ds = BasinDataset(dates, drivers, obs, meta, release=release, profiles=profiles,
                      release_available=available)
    ds.validate()
    return ds, topology


def _release_ids(path: Path, n_res: int) -> np.ndarray:
    """Which reservoirs appear in a layer table (reads only the id column)."""
    out = np.zeros(n_res, dtype=bool)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or "reservoir_id" not in header:
            raise SchemaError(f"{path.name}: missing columns ['reservoir_id']")
        col = header.index("reservoir_id")
        for row in reader:
            k = int(row[col])
            if not 0 <= k < n_res:
                raise OrphanObservation(f"{path.name}: unknown reservoir id {k}")
            out[k] = True
    return out


# ------------------------------------------------------------------- synthetic

@dataclass
class SynthConfig:
    n_segments: int = 20
    n_reservoirs: int = 2
    n_days: int = 1500
    seed: int = 0
    start_date: str = "2000-01-01"
    max_branching: int = 2
    dist_min_m: float = 2000.0
    dist_max_m: float = 15000.0
    # release policy
    threshold_c: float = 20.0
    cold_release_cfs: float = 600.0
    base_release_cfs: float = 150.0
    anticipation_margin_c: float = 1.5
    anticipation_prob: float = 0.3
    forecast_error_c: float = 1.5  # error in the operator's next-day outlook
    # weather
    air_mean_c: float = 11.0
    air_amp_c: float = 12.0
    air_noise_c: float = 2.5
    # toy lake
    surface_mean_c: float = 13.0
    surface_amp_c: float = 11.0
    bottom_mean_c: float = 9.0
    bottom_amp_c: float = 3.0
    bottom_lag_days: float = 40.0
    bottom_anomaly_c: float = 1.0
    strat_start_doy: int = 110
    strat_end_doy: int = 300
    mixing_ramp_days: int = 20
    # observation sampling
    obs_prob_min: float = 0.25
    obs_prob_max: float = 0.6
    obs_noise_c: float = 0.2
    release_data: bool = True  # write release/profiles for every reservoir

    def validate(self) -> None:
        problems = []
        if self.n_segments < 1:
            problems.append("n_segments must be >= 1")
        if self.n_reservoirs < 0:
            problems.append("n_reservoirs must be >= 0")
        if self.n_days < 10:
            problems.append("n_days must be >= 10")
        if self.n_reservoirs and self.n_segments < 2:
            problems.append("reservoirs need at least two segments")
        if self.n_reservoirs > max(0, self.n_segments - 1):
            problems.append("at most n_segments - 1 reservoirs fit in the network")
        if self.max_branching < 1:
            problems.append("max_branching must be >= 1")
        if not 0 < self.dist_min_m <= self.dist_max_m:
            problems.append("need 0 < dist_min_m <= dist_max_m")
        if not (math.isinf(self.threshold_c) and self.threshold_c > 0) and \
                not -5.0 <= self.threshold_c <= 45.0:
            problems.append("threshold_c must be a water temperature in [-5, 45] or +inf")
        if not 0 <= self.obs_prob_min <= self.obs_prob_max <= 1:
            problems.append("need 0 <= obs_prob_min <= obs_prob_max <= 1")
        if self.cold_release_cfs < 0 or self.base_release_cfs <= 0:
            problems.append("release volumes must be positive")
        if not self.forecast_error_c >= 0:
            problems.append("forecast_error_c must be >= 0")
        if not (1 <= self.strat_start_doy < self.strat_end_doy <= 366):
            problems.append("stratification window must satisfy 1 <= start < end <= 366")
        if problems:
            raise ConfigInvalid("; ".join(problems))


def _mixing_weight(doy: np.ndarray, cfg: SynthConfig) -> np.ndarray:
    """1 when the lake is fully mixed, 0 when stratified, linear ramps at turnover."""
    ramp = max(cfg.mixing_ramp_days, 1)
    into = np.clip((doy - cfg.strat_start_doy) / ramp, 0.0, 1.0)
    out_of = np.clip((cfg.strat_end_doy - doy) / ramp, 0.0, 1.0)
    return 1.0 - np.minimum(into, out_of)


def _smooth_noise(n_days: int, period: float, scale: float, rng: np.random.Generator) -> np.ndarray:
    """Cosine-interpolated random levels, one knot per ``period`` days."""
    knots = rng.normal(0.0, 1.0, size=int(n_days / period) + 2) * scale
    pos = np.arange(n_days) / period
    lo = np.floor(pos).astype(int)
    w = 0.5 - 0.5 * np.cos(np.pi * (pos - lo))
    return knots[lo] * (1 - w) + knots[lo + 1] * w


def toy_lake_profiles(cfg: SynthConfig, air_temp: np.ndarray, day_of_year: np.ndarray,
                      anomaly: np.ndarray | None = None) -> np.ndarray:
    """Surface/bottom temperatures ``(T, 2)`` for a stratified reservoir.

    The surface tracks a smoothed air-temperature signal; the bottom follows a
    damped, lagged seasonal sinusoid and never exceeds the surface.  Both
    series change by at most 2 degC per day.
    """
    air_temp = np.asarray(air_temp, dtype=np.float64)
    doy = np.asarray(day_of_year, dtype=np.float64)
    T = air_temp.size
    anomaly = np.zeros(T) if anomaly is None else np.asarray(anomaly, dtype=np.float64)
    norm = (air_temp - cfg.air_mean_c) / (cfg.air_amp_c if cfg.air_amp_c else 1.0)
    surface = np.empty(T)
    level = norm[0] if T else 0.0
    for t in range(T):
        level += 0.08 * (norm[t] - level)
        target = cfg.surface_mean_c + cfg.surface_amp_c * level
        surface[t] = target if t == 0 else np.clip(target, surface[t - 1] - 2.0, surface[t - 1] + 2.0)

    phase = 2 * np.pi * (doy - 110.0 - cfg.bottom_lag_days) / 365.25
    raw = cfg.bottom_mean_c + cfg.bottom_amp_c * np.sin(phase) + anomaly
    w = _mixing_weight(doy, cfg)
    target = w * surface + (1 - w) * np.minimum(raw, surface)
    bottom = np.empty(T)
    for t in range(T):
        if t == 0:
            bottom[t] = min(target[0], surface[0])
        else:
            bottom[t] = min(surface[t], np.clip(target[t], bottom[t - 1] - 2.0, bottom[t - 1] + 2.0))
    return np.stack([surface, bottom], axis=1)


@dataclass
class SynthTruth:
    temp: np.ndarray             # (N, T) latent stream temperature
    no_release_temp: np.ndarray  # (N, T) same weather, policy disabled
    bottom_release: np.ndarray   # (M, T) cfs drawn from the bottom layer
    fired: np.ndarray            # (M, T) threshold-triggered releases
    first_downstream: list       # immediate downstream segment per reservoir

    def as_dict(self) -> dict:
        return {"temp": self.temp, "no_release_temp": self.no_release_temp}


def _random_tree(cfg: SynthConfig, rng: np.random.Generator):
    n = cfg.n_segments
    parent = [-1] * n
    n_children = [0] * n
    for i in range(1, n):
        open_ = [j for j in range(i) if n_children[j] < cfg.max_branching]
        # favor recently added segments so the main stem grows long
        weights = np.array([1.0 + j for j in open_])
        j = open_[int(rng.choice(len(open_), p=weights / weights.sum()))]
        parent[i] = j
        n_children[j] += 1
    dist = rng.uniform(cfg.dist_min_m, cfg.dist_max_m, size=n)
    return parent, dist


def synth_basin(cfg: SynthConfig):
    """Generate ``(topology, dataset, truth)`` for a random synthetic basin."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    N, M, T = cfg.n_segments, cfg.n_reservoirs, cfg.n_days
    parent, seg_len = _random_tree(cfg, rng)

    depth = [0] * N
    for i in range(1, N):
        depth[i] = depth[parent[i]] + 1
    # reservoirs sit on a segment's outflow; choose segments whose outflow is not the outlet
    candidates = [i for i in range(1, N) if parent[i] >= 0]
    candidates.sort(key=lambda i: (-depth[i], i))
    chosen: list[int] = []
    for i in rng.permutation(candidates):
        i = int(i)
        if len(chosen) == M:
            break
        if any(_is_upstream(i, j, parent) or _is_upstream(j, i, parent) for j in chosen):
            continue
        chosen.append(i)
    for i in rng.permutation(candidates):
        if len(chosen) == M:
            break
        if int(i) not in chosen:
            chosen.append(int(i))
    res_on = {i: k for k, i in enumerate(chosen)}  # segment i drains into reservoir k

    edges = []
    for i in range(1, N):
        j = parent[i]
        if i in res_on:
            k = res_on[i]
            split = rng.uniform(0.3, 0.7)
            edges.append(Edge(seg(i), res(k), EdgeClass.SEG_TO_RES, seg_len[i] * split))
            edges.append(Edge(res(k), seg(j), EdgeClass.RES_TO_SEG, seg_len[i] * (1 - split)))
        else:
            edges.append(Edge(seg(i), seg(j), EdgeClass.SEG_TO_SEG, seg_len[i]))
    nodes = [seg(i) for i in range(N)] + [res(k) for k in range(M)]
    topology = build_topology(nodes, edges)
    first_dn = [parent[i] for i in chosen]

    # -------------------------------------------------------------- weather
    dates = np.datetime64(cfg.start_date, "D") + np.arange(T)
    doy = (dates - dates.astype("datetime64[Y]")).astype(int) + 1
    season = np.sin(2 * np.pi * (doy - 110.0) / 365.25)
    anom = np.zeros(T)
    for t in range(1, T):
        anom[t] = 0.8 * anom[t - 1] + rng.normal(0.0, cfg.air_noise_c * 0.6)
    air_basin = cfg.air_mean_c + cfg.air_amp_c * season + anom
    wet = rng.random(T) < 0.3
    precip = np.where(wet, rng.gamma(1.2, 6.0, size=T), 0.0)
    solar = 180.0 + 110.0 * season - 40.0 * wet + rng.normal(0.0, 10.0, size=T)

    elevation = rng.uniform(150.0, 700.0, size=N)
    slope = rng.uniform(0.001, 0.02, size=N)
    width = 3.0 + 2.0 * np.log1p(np.array([_n_upstream(i, parent) for i in range(N)]))
    shade0 = rng.uniform(0.1, 0.7, size=N)
    leaf = 0.5 + 0.5 * np.clip(season, 0.0, 1.0)

    air = air_basin[None, :] - 0.0065 * (elevation - elevation.mean())[:, None] \
        + rng.normal(0.0, 0.5, size=(N, T))
    shade = np.clip(shade0[:, None] * leaf[None, :], 0.0, 1.0)
    pet = np.clip(0.0023 * (air + 17.8) * solar[None, :] / 12.0, 0.0, None)
    drivers = np.stack([
        np.broadcast_to(precip, (N, T)) * rng.uniform(0.8, 1.2, size=(N, 1)),
        air,
        np.broadcast_to(doy, (N, T)).astype(float),
        np.broadcast_to(solar, (N, T)) * (1.0 - 0.2 * shade),
        shade,
        pet,
        np.broadcast_to(elevation[:, None], (N, T)),
        np.broadcast_to(seg_len[:, None], (N, T)),
        np.broadcast_to(slope[:, None], (N, T)),
        np.broadcast_to(width[:, None], (N, T)),
    ], axis=2).astype(np.float64)

    equilibrium = np.maximum(0.8 * air + 0.018 * solar[None, :] * (1.0 - shade) + 1.5, 0.0)

    # -------------------------------------------------------------- reservoirs
    profiles = np.zeros((M, T, 2))
    surface_flow = np.zeros((M, T))
    wetness = np.convolve(precip, np.ones(7) / 7.0, mode="same")
    wetness = wetness / (wetness.mean() or 1.0)
    for k in range(M):
        lake_anom = _smooth_noise(T, 120.0, cfg.bottom_anomaly_c, rng)
        profiles[k] = toy_lake_profiles(cfg, air_basin, doy, anomaly=lake_anom)
        surface_flow[k] = cfg.base_release_cfs * (0.6 + 0.4 * np.clip(wetness, 0.0, 2.5)) \
            * rng.uniform(0.8, 1.2)
    anticipation = rng.random((M, T))
    outlook_error = np.stack([_smooth_noise(T, 4.0, cfg.forecast_error_c, rng) for _ in range(M)]) \
        if M else np.zeros((0, T))

    sim = _simulate_streams(cfg, parent, res_on, first_dn, equilibrium, profiles, surface_flow,
                            anticipation, outlook_error, policy=True)
    cf = _simulate_streams(cfg, parent, res_on, first_dn, equilibrium, profiles, surface_flow,
                           anticipation, outlook_error, policy=False)

    # -------------------------------------------------------------- observations
    obs_prob = rng.uniform(cfg.obs_prob_min, cfg.obs_prob_max, size=N)
    observed = rng.random((N, T)) < obs_prob[:, None]
    noisy = sim["temp"] + rng.normal(0.0, cfg.obs_noise_c, size=(N, T))
    obs = np.where(observed, np.clip(noisy, *TEMP_BOUNDS), np.nan)

    meta = np.stack([rng.uniform(20, 60, M), rng.uniform(200, 1500, M), rng.uniform(10, 40, M),
                     rng.uniform(200, 600, M), rng.uniform(100, 1500, M)], axis=1) if M else \
        np.zeros((0, len(META_COLUMNS)))
    release = np.stack([surface_flow, sim["bottom"]], axis=2) if M else np.zeros((0, T, 2))
    available = np.full(M, bool(cfg.release_data))
    ds = BasinDataset(dates, drivers, obs, meta,
                      release=np.where(available[:, None, None], release, np.nan),
                      profiles=np.where(available[:, None, None], profiles, np.nan),
                      release_available=available)
    ds.validate()
    truth = SynthTruth(temp=sim["temp"], no_release_temp=cf["temp"], bottom_release=sim["bottom"],
                       fired=sim["fired"], first_downstream=first_dn)
    return topology, ds, truth


def _is_upstream(a: int, b: int, parent: list[int]) -> bool:
    """True when segment ``a`` drains (eventually) through segment ``b``."""
    j = parent[a]
    while j >= 0:
        if j == b:
            return True
        j = parent[j]
    return False


def _n_upstream(i: int, parent: list[int]) -> int:
    return sum(1 for j in range(len(parent)) if _is_upstream(j, i, parent))


def _simulate_streams(cfg, parent, res_on, first_dn, equilibrium, profiles, surface_flow,
                      anticipation, outlook_error, policy: bool):
    N, T = equilibrium.shape
    M = len(first_dn)
    children: list[list[int]] = [[] for _ in range(N)]
    for i in range(1, N):
        if i not in res_on:
            children[parent[i]].append(i)
    feeds: list[list[int]] = [[] for _ in range(N)]
    for i, k in res_on.items():
        feeds[parent[i]].append(k)
    acc = np.array([1.0 + _n_upstream(i, parent) for i in range(N)])

    temp = np.zeros((N, T))
    bottom = np.zeros((M, T))
    fired = np.zeros((M, T), dtype=bool)
    out_temp = np.zeros(M)
    out_flow = np.zeros(M)
    prev = equilibrium[:, 0].copy()
    rho, local_flow = 0.4, 1.5

    def advance(i, t, prev_temps, res_temp, res_flow):
        w_sum = 0.0
        mix = 0.0
        for j in children[i]:
            w_sum += acc[j]
            mix += acc[j] * prev_temps[j]
        for k in feeds[i]:
            w = res_flow[k] / 100.0
            w_sum += w
            mix += w * res_temp[k]
        local = rho * prev_temps[i] + (1 - rho) * equilibrium[i, t]
        if w_sum == 0:
            return local
        lam = min(w_sum / (w_sum + local_flow), 0.85)
        return (1 - lam) * local + lam * mix / w_sum

    for t in range(T):
        cur = np.array([advance(i, t, prev, out_temp, out_flow) for i in range(N)])
        temp[:, t] = cur
        # release decisions for day t take effect downstream on day t + 1
        if t + 1 < T:
            for k in range(M):
                fs = surface_flow[k, t]
                ms, mb = profiles[k, t]
                fb = 0.0
                if policy and cfg.cold_release_cfs > 0:
                    v = first_dn[k]
                    nat_temp = out_temp.copy()
                    nat_flow = out_flow.copy()
                    nat_temp[k], nat_flow[k] = ms, fs
                    anticipated = advance(v, t + 1, cur, nat_temp, nat_flow) + outlook_error[k, t]
                    if anticipated > cfg.threshold_c:
                        excess = anticipated - cfg.threshold_c
                        fb = cfg.cold_release_cfs * float(np.clip(0.5 + excess / 3.0, 0.5, 1.5))
                        fired[k, t] = True
                    elif anticipated > cfg.threshold_c - cfg.anticipation_margin_c and \
                            anticipation[k, t] < cfg.anticipation_prob:
                        fb = 0.4 * cfg.cold_release_cfs
                bottom[k, t] = fb
                out_flow[k] = fs + fb
                out_temp[k] = (fs * ms + fb * mb) / (fs + fb)
        prev = cur
    return {"temp": temp, "bottom": bottom, "fired": fired}


def merge_basins(a: tuple, b: tuple):
    """Disjoint union of two synthetic basins sharing one calendar.

    Segment and reservoir ids of ``b`` are shifted past those of ``a``.
    Returns ``(topology, dataset, truth, groups)`` where ``groups`` maps
    ``"A"``/``"B"`` to segment and reservoir index arrays.
    """
    (ta, da, ra), (tb, db, rb) = a, b
    if da.n_days != db.n_days or (da.dates != db.dates).any():
        raise ConfigInvalid("basins must share a calendar")
    na, ma = da.n_segments, da.n_reservoirs

    def shift(n):
        return seg(n.index + na) if n.kind is NodeKind.SEGMENT else res(n.index + ma)

    nodes = [seg(i) for i in range(na + db.n_segments)] + \
        [res(k) for k in range(ma + db.n_reservoirs)]
    edges = list(ta.edges) + [Edge(shift(e.source), shift(e.target), e.edge_class, e.stream_distance)
                              for e in tb.edges]
    topology = build_topology(nodes, edges)

    def cat_layers(x, y):
        return np.concatenate([x, y], axis=0)

    ds = BasinDataset(da.dates, np.concatenate([da.drivers, db.drivers]),
                      np.concatenate([da.obs, db.obs]), np.concatenate([da.meta, db.meta]),
                      release=cat_layers(da.release, db.release),
                      profiles=cat_layers(da.profiles, db.profiles),
                      release_available=np.concatenate([da.release_available, db.release_available]))
    truth = SynthTruth(temp=np.concatenate([ra.temp, rb.temp]),
                       no_release_temp=np.concatenate([ra.no_release_temp, rb.no_release_temp]),
                       bottom_release=np.concatenate([ra.bottom_release, rb.bottom_release]),
                       fired=np.concatenate([ra.fired, rb.fired]),
                       first_downstream=list(ra.first_downstream) + [v + na for v in rb.first_downstream])
    groups = {"A": {"segments": np.arange(na), "reservoirs": np.arange(ma)},
              "B": {"segments": np.arange(na, na + db.n_segments),
                    "reservoirs": np.arange(ma, ma + db.n_reservoirs)}}
    return topology, ds, truth, groups


def synth_config_keys() -> list[str]:
    return [f.name for f in fields(SynthConfig)]
