"""Tabulated death counts and person-years on a dense region/age/year/cause grid."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, NamedTuple

import numpy as np

DIMENSIONS = ("region", "age", "year", "cause")
CSV_COLUMNS = ("region", "age", "year", "cause", "deaths", "exposure")

_EXPOSURE_RTOL = 1e-9


class DataError(ValueError):
    """Raised for malformed or inconsistent tabulated input."""


class StrataKey(NamedTuple):
    region: int
    age: int
    year: int
    cause: int


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class TabulatedDataset:
    """Dense grid of deaths ``y[r, a, t, c]`` and exposures ``N[r, a, t]``.

    ``deaths`` holds integer counts (ceiling of ``raw_deaths``). ``mask`` marks
    cells that enter the likelihood; ``None`` means every cell is observed.
    Cells with zero exposure never enter the likelihood.
    """

    deaths: np.ndarray
    exposure: np.ndarray
    labels: Mapping[str, tuple[str, ...]] = field(default_factory=dict)
    raw_deaths: np.ndarray | None = None
    mask: np.ndarray | None = None

    def __post_init__(self):
        deaths = np.asarray(self.deaths)
        if deaths.ndim != 4:
            raise DataError(f"deaths must be 4-dimensional (R, A, T, C), got shape {deaths.shape}")
        if deaths.size and not np.issubdtype(deaths.dtype, np.integer):
            if np.any(deaths != np.floor(deaths)):
                raise DataError("deaths must be integers; use round_deaths_up on fractional counts")
        deaths = deaths.astype(np.int64)
        if np.any(deaths < 0):
            raise DataError("negative death count")
        R, A, T, C = deaths.shape
        if min(R, A, T, C) < 1:
            raise DataError(f"all dimensions must be positive, got {deaths.shape}")
        exposure = np.asarray(self.exposure, dtype=float)
        if exposure.shape != (R, A, T):
            raise DataError(f"exposure shape {exposure.shape} does not match (R, A, T) = {(R, A, T)}")
        if np.any(~np.isfinite(exposure)) or np.any(exposure < 0):
            raise DataError("exposure must be finite and non-negative")
        bad = (deaths.sum(axis=3) > 0) & (exposure <= 0)
        if np.any(bad):
            r, a, t = np.argwhere(bad)[0]
            raise DataError(f"deaths recorded with zero exposure at region={r}, age={a}, year={t}")
        raw = deaths.astype(float) if self.raw_deaths is None else np.asarray(self.raw_deaths, dtype=float)
        if raw.shape != deaths.shape:
            raise DataError("raw_deaths shape mismatch")
        mask = self.mask
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != deaths.shape:
                raise DataError(f"mask shape {mask.shape} does not cover the grid {deaths.shape}")
            mask = _frozen(mask)
        labels = {}
        for dim, n in zip(DIMENSIONS, (R, A, T, C)):
            lab = tuple(str(v) for v in self.labels.get(dim, range(n)))
            if len(lab) != n:
                raise DataError(f"{dim} has {n} levels but {len(lab)} labels")
            labels[dim] = lab
        object.__setattr__(self, "deaths", _frozen(deaths))
        object.__setattr__(self, "exposure", _frozen(exposure))
        object.__setattr__(self, "raw_deaths", _frozen(raw))
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "labels", labels)

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return self.deaths.shape

    @property
    def n_cells(self) -> int:
        return self.deaths.size

    def cell_exposure(self) -> np.ndarray:
        """Exposure broadcast to the full (R, A, T, C) grid."""
        return np.broadcast_to(self.exposure[..., None], self.dims)

    def observed(self) -> np.ndarray:
        """Boolean (R, A, T, C) array of cells that enter the likelihood."""
        obs = self.cell_exposure() > 0
        if self.mask is not None:
            obs = obs & self.mask
        return obs

    def key(self, flat_index: int) -> StrataKey:
        return StrataKey(*(int(i) for i in np.unravel_index(flat_index, self.dims)))

    def with_mask(self, mask: np.ndarray | None) -> "TabulatedDataset":
        return replace(self, mask=mask)

    def select_years(self, years) -> "TabulatedDataset":
        """Dataset restricted to the given year indices (in the given order)."""
        years = list(years)
        labels = dict(self.labels)
        labels["year"] = tuple(self.labels["year"][t] for t in years)
        return TabulatedDataset(
            deaths=self.deaths[:, :, years, :],
            exposure=self.exposure[:, :, years],
            labels=labels,
            raw_deaths=self.raw_deaths[:, :, years, :],
            mask=None if self.mask is None else self.mask[:, :, years, :],
        )

    def select_causes(self, causes) -> "TabulatedDataset":
        causes = list(causes)
        labels = dict(self.labels)
        labels["cause"] = tuple(self.labels["cause"][c] for c in causes)
        return TabulatedDataset(
            deaths=self.deaths[..., causes],
            exposure=self.exposure,
            labels=labels,
            raw_deaths=self.raw_deaths[..., causes],
            mask=None if self.mask is None else self.mask[..., causes],
        )

    def collapse_causes(self, label: str = "all") -> "TabulatedDataset":
        """All-cause dataset with a single cause level.

        A stratum is observed when any of its causes is observed.
        """
        mask = None if self.mask is None else self.mask.any(axis=3, keepdims=True)
        labels = dict(self.labels)
        labels["cause"] = (label,)
        return TabulatedDataset(
            deaths=self.deaths.sum(axis=3, keepdims=True),
            exposure=self.exposure,
            labels=labels,
            raw_deaths=self.raw_deaths.sum(axis=3, keepdims=True),
            mask=mask,
        )


def round_deaths_up(raw) -> np.ndarray:
    """Ceiling of non-negative fractional death counts, as int64."""
    raw = np.asarray(raw, dtype=float)
    if np.any(np.isnan(raw)) or np.any(raw < 0):
        raise DataError("raw death counts must be non-negative")
    return np.ceil(raw).astype(np.int64)


def _order_levels(values: list[str]) -> list[str]:
    uniq = list(dict.fromkeys(values))
    try:
        return sorted(uniq, key=lambda v: float(v))
    except ValueError:
        return uniq


def load_dataset(path, schema: Mapping[str, str] | None = None) -> TabulatedDataset:
    """Read a complete-grid CSV with one row per (region, age, year, cause).

    ``schema`` maps canonical column names to the names used in the file.
    Numeric labels are ordered numerically, others by first appearance. An
    optional ``observed`` column (0/1) restores a mask.
    """
    schema = dict(schema or {})
    colname = {c: schema.get(c, c) for c in CSV_COLUMNS + ("observed",)}
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError(f"{path}: empty file, header required")
        missing = [colname[c] for c in CSV_COLUMNS if colname[c] not in reader.fieldnames]
        if missing:
            raise DataError(f"{path}: missing columns {missing}")
        has_mask = colname["observed"] in reader.fieldnames
        rows = []
        for lineno, row in enumerate(reader, start=2):
            try:
                key = tuple(row[colname[d]].strip() for d in DIMENSIONS)
                deaths = float(row[colname["deaths"]])
                exposure = float(row[colname["exposure"]])
                obs = int(row[colname["observed"]]) if has_mask else 1
            except (TypeError, ValueError, AttributeError) as exc:
                raise DataError(f"{path}:{lineno}: malformed row ({exc})") from None
            if any(k == "" for k in key):
                raise DataError(f"{path}:{lineno}: empty index label")
            if not math.isfinite(deaths) or deaths < 0:
                raise DataError(f"{path}:{lineno}: negative or non-finite deaths {deaths!r}")
            if not math.isfinite(exposure) or exposure < 0:
                raise DataError(f"{path}:{lineno}: negative or non-finite exposure {exposure!r}")
            rows.append((lineno, key, deaths, exposure, obs))
    if not rows:
        raise DataError(f"{path}: no data rows")

    levels = {d: _order_levels([r[1][i] for r in rows]) for i, d in enumerate(DIMENSIONS)}
    index = {d: {v: i for i, v in enumerate(levels[d])} for d in DIMENSIONS}
    shape = tuple(len(levels[d]) for d in DIMENSIONS)
    raw = np.zeros(shape)
    expo = np.full(shape[:3], np.nan)
    expo_line = np.zeros(shape[:3], dtype=int)
    seen = np.zeros(shape, dtype=int)
    mask = np.ones(shape, dtype=bool)
    for lineno, key, deaths, exposure, obs in rows:
        idx = tuple(index[d][k] for d, k in zip(DIMENSIONS, key))
        if seen[idx]:
            raise DataError(f"{path}:{lineno}: duplicate cell {dict(zip(DIMENSIONS, key))} (first on line {seen[idx]})")
        seen[idx] = lineno
        raw[idx] = deaths
        mask[idx] = bool(obs)
        prev = expo[idx[:3]]
        if np.isnan(prev):
            expo[idx[:3]] = exposure
            expo_line[idx[:3]] = lineno
        elif abs(prev - exposure) > _EXPOSURE_RTOL * max(abs(prev), abs(exposure)):
            raise DataError(
                f"{path}:{lineno}: exposure {exposure!r} differs from {prev!r} on line "
                f"{expo_line[idx[:3]]} for the same (region, age, year)"
            )
    if not seen.all():
        missing_idx = tuple(int(i) for i in np.argwhere(seen == 0)[0])
        cell = {d: levels[d][i] for d, i in zip(DIMENSIONS, missing_idx)}
        raise DataError(f"{path}: incomplete grid, {int((seen == 0).sum())} cells missing (e.g. {cell})")
    try:
        return TabulatedDataset(
            deaths=round_deaths_up(raw),
            exposure=expo,
            labels={d: tuple(levels[d]) for d in DIMENSIONS},
            raw_deaths=raw,
            mask=mask if has_mask else None,
        )
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from None


def write_dataset(dataset: TabulatedDataset, path) -> None:
    """Write ``dataset`` in the CSV schema read by :func:`load_dataset`.

    Fractional raw deaths are written so a reload reproduces them exactly.
    """
    header = list(CSV_COLUMNS)
    if dataset.mask is not None:
        header.append("observed")
    lab = dataset.labels
    R, A, T, C = dataset.dims
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in range(R):
            for a in range(A):
                for t in range(T):
                    expo = repr(float(dataset.exposure[r, a, t]))
                    for c in range(C):
                        raw = float(dataset.raw_deaths[r, a, t, c])
                        row = [lab["region"][r], lab["age"][a], lab["year"][t], lab["cause"][c],
                               str(int(raw)) if raw.is_integer() else repr(raw), expo]
                        if dataset.mask is not None:
                            row.append(int(dataset.mask[r, a, t, c]))
                        w.writerow(row)


def empirical_csmf(dataset: TabulatedDataset) -> tuple[np.ndarray, np.ndarray]:
    """Observed cause fractions ``y[r,a,t,c] / sum_c y[r,a,t,c]``.

    Returns ``(fractions, defined)``; strata with no deaths have ``defined``
    False and NaN fractions.
    """
    y = dataset.deaths.astype(float)
    total = y.sum(axis=3, keepdims=True)
    defined = np.broadcast_to(total > 0, y.shape).copy()
    with np.errstate(invalid="ignore", divide="ignore"):
        frac = np.where(defined, y / np.where(total > 0, total, 1.0), np.nan)
    return frac, defined


@dataclass(frozen=True)
class HeldCells:
    """Cells removed from training by :func:`holdout_split`."""

    year: int
    flat_index: np.ndarray
    deaths: np.ndarray
    exposure: np.ndarray

    def __len__(self):
        return len(self.flat_index)


def holdout_split(dataset: TabulatedDataset, year: int) -> tuple[TabulatedDataset, HeldCells]:
    """Mask every cell of ``year``; return the training dataset and the held cells."""
    R, A, T, C = dataset.dims
    if not 0 <= year < T:
        raise DataError(f"hold-out year {year} out of range 0..{T - 1}")
    base = np.ones(dataset.dims, bool) if dataset.mask is None else dataset.mask.copy()
    held_mask = np.zeros(dataset.dims, bool)
    held_mask[:, :, year, :] = base[:, :, year, :]
    train_mask = base.copy()
    train_mask[:, :, year, :] = False
    train = dataset.with_mask(train_mask)
    if not train.observed().any():
        raise DataError("hold-out leaves no observed cells to fit")
    flat = np.flatnonzero(held_mask)
    held = HeldCells(
        year=year,
        flat_index=flat,
        deaths=dataset.deaths.ravel()[flat],
        exposure=dataset.cell_exposure().ravel()[flat],
    )
    return train, held
