"""Per-house PV/load time series: ingestion, sampling, and desk-scale synthesis.

Data lives in kW at house granularity; conversion to per-unit connection
injections happens in injections_for. A sample is always one minute's joint
cross-house vector, so spatial correlation between houses survives sampling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.signal import lfilter

from .feeder import AdmittanceMatrix, FeederModel

CSV_COLUMNS = ["day", "minute", "house_id", "p_gen_kw", "p_load_kw"]
MINUTES_PER_DAY = 1440


class ScenarioError(ValueError):
    """Raised for malformed scenario data or invalid sampling requests."""


def gamma_from_pf(pf: float) -> float:
    """Reactive/active load ratio sqrt((1 - pf^2) / pf^2) for a power factor."""
    if not 0.0 < pf <= 1.0:
        raise ScenarioError(f"power factor {pf} outside (0, 1]")
    return math.sqrt((1.0 - pf * pf) / (pf * pf))


@dataclass(frozen=True)
class SamplePoint:
    """One minute's joint house vector (kW); day/minute kept when known."""

    house_ids: tuple[str, ...]
    p_gen: np.ndarray
    p_load: np.ndarray
    day: int | None = None
    minute: int | None = None


@dataclass(frozen=True)
class DaySeries:
    """Complete day-indexed series: arrays of shape (days, 1440, houses)."""

    house_ids: tuple[str, ...]
    days: tuple[int, ...]
    p_gen: np.ndarray
    p_load: np.ndarray

    @property
    def n_days(self) -> int:
        return len(self.days)

    def restrict(self, days: list[int]) -> "DaySeries":
        missing = [d for d in days if d not in self.days]
        if missing:
            raise ScenarioError(f"days {missing} not present in series")
        sel = [self.days.index(d) for d in days]
        return DaySeries(self.house_ids, tuple(days),
                         self.p_gen[sel], self.p_load[sel])


@dataclass(frozen=True)
class ScenarioSet:
    """Sample set Omega with per-house averages and deviations."""

    house_ids: tuple[str, ...]
    p_gen: np.ndarray
    p_load: np.ndarray
    day: np.ndarray | None = None
    minute: np.ndarray | None = None

    @property
    def m(self) -> int:
        return self.p_gen.shape[0]

    @property
    def p_gen_avg(self) -> np.ndarray:
        return self.p_gen.mean(axis=0)

    @property
    def p_load_avg(self) -> np.ndarray:
        return self.p_load.mean(axis=0)

    @property
    def has_time_structure(self) -> bool:
        return self.day is not None and self.minute is not None

    def sample(self, i: int) -> SamplePoint:
        return SamplePoint(
            self.house_ids, self.p_gen[i], self.p_load[i],
            day=int(self.day[i]) if self.day is not None else None,
            minute=int(self.minute[i]) if self.minute is not None else None,
        )

    def mean_sample(self) -> SamplePoint:
        return SamplePoint(self.house_ids, self.p_gen_avg, self.p_load_avg)


def validate_series(series: DaySeries, feeder: FeederModel) -> None:
    """Every feeder house must have data; data must not name unknown houses."""
    have = set(series.house_ids)
    want = set(feeder.house_ids)
    missing = sorted(want - have)
    if missing:
        raise ScenarioError(f"series lacks data for feeder houses {missing}")
    unknown = sorted(have - want)
    if unknown:
        raise ScenarioError(f"unknown house id(s) in series: {unknown}")


def load_timeseries(path: str | Path, feeder: FeederModel, *,
                    scale: float = 1.0, fill_gaps: bool = False) -> DaySeries:
    """Read a scenario CSV into a complete day-indexed series.

    Enforces the schema (day,minute,house_id,p_gen_kw,p_load_kw), full
    1440-minute days per house, no duplicates, nonnegative powers. Gaps are
    rejected unless fill_gaps forward-fills within each (house, day).
    Both power columns are multiplied by `scale`.
    """
    path = Path(path)
    if not path.exists():
        raise ScenarioError(f"scenario file not found: {path}")
    df = pd.read_csv(path)
    missing_cols = [c for c in CSV_COLUMNS if c not in df.columns]
    if missing_cols:
        raise ScenarioError(f"scenario CSV missing column(s) {missing_cols}")
    df["house_id"] = df["house_id"].astype(str)

    unknown = sorted(set(df["house_id"]) - set(feeder.house_ids))
    if unknown:
        raise ScenarioError(f"unknown house id(s) in scenario CSV: {unknown}")
    covered = set(df["house_id"])
    lacking = sorted(h for h in feeder.house_ids if h not in covered)
    if lacking:
        raise ScenarioError(f"scenario CSV lacks data for feeder houses {lacking}")

    if df.duplicated(subset=["day", "minute", "house_id"]).any():
        bad = df[df.duplicated(subset=["day", "minute", "house_id"])].iloc[0]
        raise ScenarioError(
            f"duplicate row for day={bad['day']} minute={bad['minute']} house={bad['house_id']!r}"
        )
    minutes = df["minute"].to_numpy()
    if minutes.min() < 0 or minutes.max() >= MINUTES_PER_DAY:
        raise ScenarioError("minute values must lie in 0..1439")
    if (df["p_gen_kw"] < 0).any() or (df["p_load_kw"] < 0).any():
        raise ScenarioError("negative power values in scenario CSV")

    house_ids = tuple(feeder.house_ids)
    days = tuple(int(d) for d in np.sort(df["day"].unique()))
    day_index = {d: i for i, d in enumerate(days)}
    house_index = {h: i for i, h in enumerate(house_ids)}

    shape = (len(days), MINUTES_PER_DAY, len(house_ids))
    p_gen = np.full(shape, np.nan)
    p_load = np.full(shape, np.nan)
    di = df["day"].map(day_index).to_numpy()
    hi = df["house_id"].map(house_index).to_numpy()
    p_gen[di, minutes, hi] = df["p_gen_kw"].to_numpy()
    p_load[di, minutes, hi] = df["p_load_kw"].to_numpy()

    if np.isnan(p_gen).any():
        if fill_gaps:
            for arr in (p_gen, p_load):
                frame = pd.DataFrame(arr.reshape(shape[0] * shape[1], shape[2]))
                frame = frame.mask(np.isnan(frame)).ffill().bfill()
                arr[:] = frame.to_numpy().reshape(shape)
            if np.isnan(p_gen).any():
                raise ScenarioError("gap fill failed: a (house, day) has no data at all")
        else:
            d, t, h = np.argwhere(np.isnan(p_gen))[0]
            raise ScenarioError(
                f"incomplete day: day={days[d]} house={house_ids[h]!r} missing minute {t}"
            )

    return DaySeries(house_ids, days, p_gen * scale, p_load * scale)


def save_timeseries(series: DaySeries, path: str | Path) -> None:
    """Write a DaySeries to the scenario CSV schema (sorted day, minute, house)."""
    d, t, h = np.meshgrid(np.arange(series.n_days), np.arange(MINUTES_PER_DAY),
                          np.arange(len(series.house_ids)), indexing="ij")
    df = pd.DataFrame({
        "day": np.asarray(series.days)[d.ravel()],
        "minute": t.ravel(),
        "house_id": np.asarray(series.house_ids)[h.ravel()],
        "p_gen_kw": series.p_gen.ravel(),
        "p_load_kw": series.p_load.ravel(),
    })
    df.to_csv(path, index=False, float_format="%.10g")


def _scenario_from_slices(series: DaySeries, day_ids: np.ndarray,
                          minute_ids: np.ndarray) -> ScenarioSet:
    di = np.asarray([series.days.index(int(d)) for d in day_ids])
    return ScenarioSet(
        house_ids=series.house_ids,
        p_gen=series.p_gen[di, minute_ids],
        p_load=series.p_load[di, minute_ids],
        day=np.asarray(day_ids, dtype=int),
        minute=np.asarray(minute_ids, dtype=int),
    )


def take_days(series: DaySeries, days: list[int]) -> ScenarioSet:
    """All minutes of the given days, in chronological order."""
    sub = series.restrict(sorted(days))
    day_ids = np.repeat(np.asarray(sub.days), MINUTES_PER_DAY)
    minute_ids = np.tile(np.arange(MINUTES_PER_DAY), sub.n_days)
    return _scenario_from_slices(series, day_ids, minute_ids)


def draw_full_days(series: DaySeries, n_days: int, rng_seed: int) -> ScenarioSet:
    """Randomly choose n_days distinct days; keep them whole and time-ordered."""
    if n_days > series.n_days:
        raise ScenarioError(f"cannot draw {n_days} days from a {series.n_days}-day pool")
    rng = np.random.default_rng(rng_seed)
    chosen = sorted(rng.choice(series.days, size=n_days, replace=False).tolist())
    return take_days(series, chosen)


def draw_random(series: DaySeries, m: int, rng_seed: int) -> ScenarioSet:
    """Uniform minutes without replacement from the pooled in-sample days."""
    pool = series.n_days * MINUTES_PER_DAY
    if m > pool:
        raise ScenarioError(f"cannot draw {m} samples from a pool of {pool} minutes")
    rng = np.random.default_rng(rng_seed)
    flat = rng.choice(pool, size=m, replace=False)
    day_ids = np.asarray(series.days)[flat // MINUTES_PER_DAY]
    minute_ids = flat % MINUTES_PER_DAY
    return _scenario_from_slices(series, day_ids, minute_ids)


@dataclass(frozen=True)
class SynthProfile:
    """Shape parameters of the synthetic PV/load generator (kW, minutes)."""

    pv_peak_kw: float = 4.5
    pv_peak_spread: float = 0.15
    sunrise_min: int = 360
    sunset_min: int = 1200
    bell_sharpness: float = 1.3
    cloud_corr: float = 0.97
    cloud_sigma: float = 0.6
    cloud_bias: float = -0.8
    load_base_kw: float = 0.25
    load_spread: float = 0.2
    morning_peak_kw: float = 0.5
    morning_center_min: float = 450.0
    morning_width_min: float = 90.0
    evening_peak_kw: float = 0.9
    evening_center_min: float = 1140.0
    evening_width_min: float = 130.0
    spike_rate_per_day: float = 5.0
    spike_kw: float = 1.2
    spike_alpha: float = 2.2
    spike_cap_kw: float = 5.0
    spike_duration_min: float = 12.0


def synthesize(houses: int, days: int, rng_seed: int,
               profile: SynthProfile | None = None) -> DaySeries:
    """Generate a deterministic synthetic series for `houses` x `days`.

    PV is a truncated sunrise-sunset bell modulated by an AR(1) cloud
    attenuation; load is a two-peak daily profile plus Poisson-arriving
    heavy-tailed appliance spikes. House ids are h01..hNN.
    """
    if houses < 1 or days < 1:
        raise ScenarioError("houses and days must both be >= 1")
    prof = profile or SynthProfile()
    t = np.arange(MINUTES_PER_DAY, dtype=float)

    span = prof.sunset_min - prof.sunrise_min
    inside = (t > prof.sunrise_min) & (t < prof.sunset_min)
    bell = np.zeros(MINUTES_PER_DAY)
    bell[inside] = np.sin(np.pi * (t[inside] - prof.sunrise_min) / span) ** prof.bell_sharpness

    gauss_m = np.exp(-0.5 * ((t - prof.morning_center_min) / prof.morning_width_min) ** 2)
    gauss_e = np.exp(-0.5 * ((t - prof.evening_center_min) / prof.evening_width_min) ** 2)

    p_gen = np.zeros((days, MINUTES_PER_DAY, houses))
    p_load = np.zeros((days, MINUTES_PER_DAY, houses))
    for h in range(houses):
        rng_h = np.random.default_rng([rng_seed, 0, h])
        pv_size = rng_h.lognormal(-prof.pv_peak_spread ** 2 / 2.0, prof.pv_peak_spread)
        load_size = rng_h.lognormal(-prof.load_spread ** 2 / 2.0, prof.load_spread)
        for d in range(days):
            rng = np.random.default_rng([rng_seed, 1, h, d])

            # PV: per-day amplitude jitter, then AR(1) cloudiness z whose
            # positive excursions attenuate output by up to 90%.
            amp = prof.pv_peak_kw * pv_size * max(0.0, 1.0 + 0.02 * rng.standard_normal())
            z0 = prof.cloud_sigma * rng.standard_normal()
            eps = prof.cloud_sigma * math.sqrt(1.0 - prof.cloud_corr ** 2) \
                * rng.standard_normal(MINUTES_PER_DAY)
            z_dev, _ = lfilter([1.0], [1.0, -prof.cloud_corr], eps,
                               zi=[prof.cloud_corr * z0])
            z = prof.cloud_bias + z_dev
            attenuation = 1.0 - np.clip(z, 0.0, 0.9)
            p_gen[d, :, h] = amp * bell * attenuation

            m_fac = max(0.0, 1.0 + 0.15 * rng.standard_normal())
            e_fac = max(0.0, 1.0 + 0.15 * rng.standard_normal())
            load = (prof.load_base_kw * load_size
                    + prof.morning_peak_kw * load_size * m_fac * gauss_m
                    + prof.evening_peak_kw * load_size * e_fac * gauss_e)
            for _ in range(rng.poisson(prof.spike_rate_per_day)):
                start = int(rng.integers(0, MINUTES_PER_DAY))
                dur = int(rng.geometric(1.0 / prof.spike_duration_min))
                mag = min(prof.spike_cap_kw, prof.spike_kw * (1.0 + rng.pareto(prof.spike_alpha)))
                load = load.copy()
                load[start:start + dur] += mag
            p_load[d, :, h] = load

    house_ids = tuple(f"h{i + 1:02d}" for i in range(houses))
    return DaySeries(house_ids, tuple(range(days)), p_gen, p_load)


@dataclass(frozen=True)
class InjectionMap:
    """Precomputed house-to-connection index arrays for fast injection builds."""

    n_conn: int
    load_pos: np.ndarray
    load_house: np.ndarray
    load_scale: np.ndarray
    load_gamma: np.ndarray
    inv_pos: np.ndarray
    inv_house: np.ndarray
    s_base_kva: float


def build_injection_map(feeder: FeederModel, ybus: AdmittanceMatrix,
                        house_ids: tuple[str, ...]) -> InjectionMap:
    idx = {h: i for i, h in enumerate(house_ids)}
    missing = [r.house_id for r in (*feeder.loads, *feeder.inverters) if r.house_id not in idx]
    if missing:
        raise ScenarioError(f"sample lacks data for feeder houses {sorted(set(missing))}")
    return InjectionMap(
        n_conn=ybus.n_conn,
        load_pos=np.asarray([ybus.pos(ld.node, ld.phase) for ld in feeder.loads], dtype=int),
        load_house=np.asarray([idx[ld.house_id] for ld in feeder.loads], dtype=int),
        load_scale=np.asarray([ld.scale for ld in feeder.loads]),
        load_gamma=np.asarray([gamma_from_pf(ld.pf) for ld in feeder.loads]),
        inv_pos=np.asarray([ybus.pos(iv.node, iv.phase) for iv in feeder.inverters], dtype=int),
        inv_house=np.asarray([idx[iv.house_id] for iv in feeder.inverters], dtype=int),
        s_base_kva=feeder.s_base_kva,
    )


def injections_for(sample: SamplePoint, q_setpoints: np.ndarray,
                   feeder: FeederModel, ybus: AdmittanceMatrix,
                   imap: InjectionMap | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Per-connection (p, q) injections in per-unit for one sample.

    p = p_gen - p_load per connection; q = q_setpoint - gamma * p_load.
    q_setpoints is per inverter (feeder order), already in per-unit.
    """
    imap = imap or build_injection_map(feeder, ybus, sample.house_ids)
    p = np.zeros(imap.n_conn)
    q = np.zeros(imap.n_conn)
    pl = sample.p_load[imap.load_house] * imap.load_scale / imap.s_base_kva
    np.add.at(p, imap.load_pos, -pl)
    np.add.at(q, imap.load_pos, -imap.load_gamma * pl)
    pg = sample.p_gen[imap.inv_house] / imap.s_base_kva
    np.add.at(p, imap.inv_pos, pg)
    np.add.at(q, imap.inv_pos, np.asarray(q_setpoints, dtype=float))
    return p, q
