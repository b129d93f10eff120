"""Datacube container, preprocessing, coarsening, and sample construction.

A cube holds named driver grids plus the binary burned-area target on a
shared (time, lat, lon) layout, monthly index series, and grid/calendar
metadata. Time runs in 8-day steps, 46 per calendar year, anchored to
January 1 of the start year; index series are monthly and begin 10 months
before the cube so every timestep has a full index history.

Grids are stored row-major with latitude ascending (south to north) and
longitude ascending. External files use a directory manifest: one
``manifest.json`` plus one raw little-endian binary per variable and index,
round-tripping bit-exactly.
"""

from __future__ import annotations

import datetime
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

Array = np.ndarray

MANIFEST_FORMAT = "televit-cube-v1"
TARGET_NAME = "burned_area"
POSITIONAL_NAMES = ("cos_lon", "sin_lon", "cos_lat", "sin_lat")


def month_number(year: int, month: int) -> int:
    """Months since year 0, for calendar arithmetic."""
    return year * 12 + (month - 1)


@dataclass(frozen=True)
class CubeCalendar:
    """8-day step calendar with a monthly index timeline in front of it."""

    start_year: int
    n_years: int
    steps_per_year: int = 46
    step_days: int = 8
    index_lead_months: int = 10

    @property
    def n_steps(self) -> int:
        return self.n_years * self.steps_per_year

    @property
    def n_months(self) -> int:
        return self.index_lead_months + 12 * self.n_years

    @property
    def index_start_month(self) -> int:
        return month_number(self.start_year, 1) - self.index_lead_months

    def step_year(self, t: int) -> int:
        return self.start_year + t // self.steps_per_year

    def step_of_year(self, t: int) -> int:
        return t % self.steps_per_year

    def step_date(self, t: int) -> datetime.date:
        return datetime.date(self.step_year(t), 1, 1) + datetime.timedelta(
            days=self.step_days * self.step_of_year(t)
        )

    def step_month_number(self, t: int) -> int:
        d = self.step_date(t)
        return month_number(d.year, d.month)

    def month_position(self, month_num: int) -> int:
        """Position of an absolute month in the index series."""
        return month_num - self.index_start_month

    def to_dict(self) -> dict:
        return {
            "start_year": self.start_year,
            "n_years": self.n_years,
            "steps_per_year": self.steps_per_year,
            "step_days": self.step_days,
            "index_lead_months": self.index_lead_months,
        }


@dataclass(frozen=True)
class SplitSpec:
    """Inclusive year ranges for train / val / test, disjoint and ordered."""

    train_years: tuple[int, int]
    val_years: tuple[int, int]
    test_years: tuple[int, int]

    def __post_init__(self):
        ranges = [self.train_years, self.val_years, self.test_years]
        for lo, hi in ranges:
            if lo > hi:
                raise ConfigError(f"year range {lo}-{hi} is reversed")
        if not (self.train_years[1] < self.val_years[0] <= self.val_years[1] < self.test_years[0]):
            raise ConfigError(
                f"splits must be disjoint and time-ordered (train < val < test), got {ranges}"
            )

    def split_of_year(self, year: int) -> Optional[str]:
        if self.train_years[0] <= year <= self.train_years[1]:
            return "train"
        if self.val_years[0] <= year <= self.val_years[1]:
            return "val"
        if self.test_years[0] <= year <= self.test_years[1]:
            return "test"
        return None

    def to_dict(self) -> dict:
        return {
            "train_years": list(self.train_years),
            "val_years": list(self.val_years),
            "test_years": list(self.test_years),
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "SplitSpec":
        return cls(
            train_years=tuple(payload["train_years"]),
            val_years=tuple(payload["val_years"]),
            test_years=tuple(payload["test_years"]),
        )


@dataclass
class DataCube:
    """Named variable grids, monthly index series, and grid metadata.

    ``variables`` maps names to (n_steps, n_lat, n_lon) arrays and contains
    the target; insertion order fixes the model's channel order. ``indices``
    maps index names to (n_months,) series.
    """

    variables: dict[str, Array]
    indices: dict[str, Array]
    calendar: CubeCalendar
    lat_edges: Array
    lon_edges: Array
    land_mask: Array
    target_name: str = TARGET_NAME
    log_vars: tuple[str, ...] = ()
    preprocessed: bool = False
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        shapes = {v.shape for v in self.variables.values()}
        if len(shapes) > 1:
            raise DataError(f"all variable grids must share one shape, got {shapes}")
        if self.target_name not in self.variables:
            raise DataError(f"cube lacks its target variable {self.target_name!r}")
        t, n_lat, n_lon = self.shape
        if t != self.calendar.n_steps:
            raise DataError(
                f"grids have {t} timesteps, calendar expects {self.calendar.n_steps}"
            )
        if self.lat_edges.shape != (n_lat + 1,) or self.lon_edges.shape != (n_lon + 1,):
            raise DataError("lat/lon edges do not frame the grid")
        lengths = {len(s) for s in self.indices.values()}
        if lengths and lengths != {self.calendar.n_months}:
            raise DataError(
                f"index series lengths {lengths} do not cover the cube period "
                f"plus lead ({self.calendar.n_months} months)"
            )
        target = self.variables[self.target_name]
        values = np.unique(target)
        if not np.isin(values, (0.0, 1.0)).all():
            raise DataError("burned-area target must be binary after generation")

    @property
    def shape(self) -> tuple[int, int, int]:
        return next(iter(self.variables.values())).shape

    @property
    def n_lat(self) -> int:
        return self.shape[1]

    @property
    def n_lon(self) -> int:
        return self.shape[2]

    @property
    def driver_names(self) -> list[str]:
        return [name for name in self.variables if name != self.target_name]

    @property
    def index_names(self) -> list[str]:
        return list(self.indices)

    @property
    def lat_centers(self) -> Array:
        return 0.5 * (self.lat_edges[:-1] + self.lat_edges[1:])

    @property
    def lon_centers(self) -> Array:
        return 0.5 * (self.lon_edges[:-1] + self.lon_edges[1:])

    def years(self) -> list[int]:
        cal = self.calendar
        return list(range(cal.start_year, cal.start_year + cal.n_years))

    def default_split(self) -> SplitSpec:
        """Last year tests, the one before validates, the rest trains."""
        years = self.years()
        if len(years) < 3:
            raise ConfigError("need at least 3 years for a train/val/test split")
        return SplitSpec(
            train_years=(years[0], years[-3]),
            val_years=(years[-2], years[-2]),
            test_years=(years[-1], years[-1]),
        )


@dataclass
class Sample:
    """One training instance: inputs at timestep t, target at t + horizon."""

    x_l: Array
    x_g: Optional[Array]
    x_i: Optional[Array]
    target: Array
    t: int
    patch_origin: tuple[int, int]
    horizon: int
    split: str = ""


# ----------------------------------------------------------------------
# Coarsening
# ----------------------------------------------------------------------

def coarsen(cube: DataCube, factor: int) -> DataCube:
    """Blockwise mean over lat/lon for every input variable.

    The target is excluded: only inputs feed the coarse global view. Means
    are accumulated in float64 so repeated coarsening composes exactly.
    """
    if factor < 1:
        raise ConfigError(f"coarsening factor must be >= 1, got {factor}")
    if cube.preprocessed:
        raise DataError("coarsen operates on raw cubes; preprocess afterwards")
    t, n_lat, n_lon = cube.shape
    if n_lat % factor != 0 or n_lon % factor != 0:
        raise ConfigError(
            f"grid {n_lat}x{n_lon} not divisible by coarsening factor {factor}"
        )
    out_lat, out_lon = n_lat // factor, n_lon // factor
    variables: dict[str, Array] = {}
    for name in cube.driver_names:
        grid = cube.variables[name].astype(np.float64)
        variables[name] = grid.reshape(t, out_lat, factor, out_lon, factor).mean(axis=(2, 4))
    # Coarse cubes keep a degenerate all-zero target so the container
    # contract (target present, binary) still holds.
    variables[cube.target_name] = np.zeros((t, out_lat, out_lon), dtype=np.float32)
    land = cube.land_mask.astype(np.float64)
    land = land.reshape(out_lat, factor, out_lon, factor).mean(axis=(1, 3)) > 0.5
    return DataCube(
        variables=variables,
        indices={k: v.copy() for k, v in cube.indices.items()},
        calendar=cube.calendar,
        lat_edges=cube.lat_edges[::factor].copy(),
        lon_edges=cube.lon_edges[::factor].copy(),
        land_mask=land,
        target_name=cube.target_name,
        log_vars=cube.log_vars,
        preprocessed=False,
        provenance={**cube.provenance, "coarsened_by": factor},
    )


# ----------------------------------------------------------------------
# Preprocessing
# ----------------------------------------------------------------------

@dataclass
class SplitStats:
    """Training-split normalization statistics (computed after any log map)."""

    split: SplitSpec
    means: dict[str, float]
    stds: dict[str, float]
    index_stds: dict[str, float]

    def to_dict(self) -> dict:
        return {
            "split": self.split.to_dict(),
            "means": self.means,
            "stds": self.stds,
            "index_stds": self.index_stds,
        }


def _train_step_mask(cube: DataCube, split: SplitSpec) -> Array:
    years = np.array([cube.calendar.step_year(t) for t in range(cube.shape[0])])
    return (years >= split.train_years[0]) & (years <= split.train_years[1])


def _train_month_mask(cube: DataCube, split: SplitSpec) -> Array:
    cal = cube.calendar
    months = np.arange(cal.n_months) + cal.index_start_month
    years = months // 12
    return (years >= split.train_years[0]) & (years <= split.train_years[1])


def compute_split_stats(cube: DataCube, split: SplitSpec) -> SplitStats:
    """Per-variable mean/std and per-index std over the training period only."""
    if cube.preprocessed:
        raise DataError("statistics must come from a raw cube")
    step_mask = _train_step_mask(cube, split)
    if not step_mask.any():
        raise ConfigError(f"training years {split.train_years} not covered by the cube")
    means: dict[str, float] = {}
    stds: dict[str, float] = {}
    for name in cube.driver_names:
        grid = cube.variables[name][step_mask].astype(np.float64)
        if name in cube.log_vars:
            grid = np.log1p(grid)
        mean = float(grid.mean())
        std = float(grid.std())
        if std == 0.0:
            raise DataError(f"variable {name!r} is constant over the training split")
        means[name], stds[name] = mean, std
    month_mask = _train_month_mask(cube, split)
    index_stds: dict[str, float] = {}
    for name, series in cube.indices.items():
        std = float(np.asarray(series, dtype=np.float64)[month_mask].std())
        if std == 0.0:
            raise DataError(f"index {name!r} is constant over the training period")
        index_stds[name] = std
    return SplitStats(split=split, means=means, stds=stds, index_stds=index_stds)


def preprocess(cube: DataCube, stats: SplitStats) -> DataCube:
    """Log-map designated variables, z-score drivers, scale indices, and
    append the four positional channels (cos/sin of lon/lat at cell centers).

    Raises if the cube was already preprocessed; silent double normalization
    is never allowed.
    """
    if cube.preprocessed:
        raise DataError("cube is already preprocessed")
    t = cube.shape[0]
    dtype = cube.variables[cube.driver_names[0]].dtype if cube.driver_names else np.float32
    variables: dict[str, Array] = {}
    for name in cube.driver_names:
        grid = cube.variables[name].astype(np.float64)
        if name in cube.log_vars:
            grid = np.log1p(grid)
        grid = (grid - stats.means[name]) / stats.stds[name]
        variables[name] = grid.astype(dtype)

    lon_rad = np.deg2rad(cube.lon_centers)
    lat_rad = np.deg2rad(cube.lat_centers)
    planes = {
        "cos_lon": np.cos(lon_rad)[None, :] * np.ones((cube.n_lat, 1)),
        "sin_lon": np.sin(lon_rad)[None, :] * np.ones((cube.n_lat, 1)),
        "cos_lat": np.cos(lat_rad)[:, None] * np.ones((1, cube.n_lon)),
        "sin_lat": np.sin(lat_rad)[:, None] * np.ones((1, cube.n_lon)),
    }
    for name in POSITIONAL_NAMES:
        variables[name] = np.broadcast_to(
            planes[name].astype(dtype), (t, cube.n_lat, cube.n_lon)
        ).copy()

    variables[cube.target_name] = cube.variables[cube.target_name].copy()
    indices = {
        name: (np.asarray(series, dtype=np.float64) / stats.index_stds[name]).astype(np.float32)
        for name, series in cube.indices.items()
    }
    return DataCube(
        variables=variables,
        indices=indices,
        calendar=cube.calendar,
        lat_edges=cube.lat_edges.copy(),
        lon_edges=cube.lon_edges.copy(),
        land_mask=cube.land_mask.copy(),
        target_name=cube.target_name,
        log_vars=cube.log_vars,
        preprocessed=True,
        provenance={**cube.provenance, "normalization": stats.to_dict()},
    )


# ----------------------------------------------------------------------
# Sample construction
# ----------------------------------------------------------------------

def input_stack(cube: DataCube, t: int) -> Array:
    """All input channels at one timestep, in channel order."""
    return np.stack([cube.variables[name][t] for name in cube.driver_names])


def index_history(cube: DataCube, t: int, n_months: int = 10) -> Optional[Array]:
    """The n_months monthly values per index strictly before t's month,
    oldest first; None when the history is incomplete."""
    cal = cube.calendar
    end = cal.month_position(cal.step_month_number(t))
    start = end - n_months
    if start < 0 or end > cal.n_months:
        return None
    return np.stack([np.asarray(cube.indices[name][start:end]) for name in cube.index_names])


def build_samples(
    fine_cube: DataCube,
    coarse_cube: Optional[DataCube],
    horizon: int,
    split: SplitSpec,
    patch_h: int = 80,
    patch_w: int = 80,
    history_months: int = 10,
) -> list[Sample]:
    """Tile the fine grid into patches and assemble one sample per patch
    and timestep whose future target contains at least one burned pixel.

    Split membership keys on the input timestep t; the target at t + horizon
    may fall in a later year. Samples are ordered by t, then patch row-major.
    """
    if not fine_cube.preprocessed:
        raise DataError("build_samples expects a preprocessed fine cube")
    if coarse_cube is not None and not coarse_cube.preprocessed:
        raise DataError("build_samples expects a preprocessed coarse cube")
    if horizon < 1:
        raise ConfigError(f"horizon must be >= 1, got {horizon}")
    n_steps, n_lat, n_lon = fine_cube.shape
    if n_lat % patch_h != 0 or n_lon % patch_w != 0:
        raise ConfigError(
            f"grid {n_lat}x{n_lon} not tileable by {patch_h}x{patch_w} patches"
        )
    rows, cols = n_lat // patch_h, n_lon // patch_w
    target = fine_cube.variables[fine_cube.target_name]

    samples: list[Sample] = []
    skipped_history = 0
    for t in range(n_steps - horizon):
        split_name = split.split_of_year(fine_cube.calendar.step_year(t))
        if split_name is None:
            continue
        x_i = index_history(fine_cube, t, history_months)
        if x_i is None:
            skipped_history += 1
            continue
        x_i = x_i.astype(np.float32)
        x_g = input_stack(coarse_cube, t) if coarse_cube is not None else None
        fine_inputs = input_stack(fine_cube, t)
        future = target[t + horizon]
        for pr in range(rows):
            for pc in range(cols):
                sl = (slice(pr * patch_h, (pr + 1) * patch_h), slice(pc * patch_w, (pc + 1) * patch_w))
                patch_target = future[sl]
                if not (patch_target > 0).any():
                    continue
                samples.append(
                    Sample(
                        x_l=fine_inputs[:, sl[0], sl[1]].copy(),
                        x_g=x_g,
                        x_i=x_i,
                        target=patch_target[None].copy(),
                        t=t,
                        patch_origin=(pr, pc),
                        horizon=horizon,
                        split=split_name,
                    )
                )
    if skipped_history:
        log.warning(
            "skipped %d timesteps with insufficient index history", skipped_history
        )
    return samples


def split_samples(samples: list[Sample]) -> dict[str, list[Sample]]:
    out: dict[str, list[Sample]] = {"train": [], "val": [], "test": []}
    for s in samples:
        out[s.split].append(s)
    return out


# ----------------------------------------------------------------------
# Seasonal climatology baseline
# ----------------------------------------------------------------------

@dataclass
class SeasonalClimatology:
    """Training-split mean of the binary target per cell and step-of-year."""

    table: Array  # (steps_per_year, n_lat, n_lon)
    patch_h: int = 80
    patch_w: int = 80

    def score_plane(self, t: int, horizon: int, patch_origin: tuple[int, int],
                    steps_per_year: int) -> Array:
        slot = (t + horizon) % steps_per_year
        pr, pc = patch_origin
        return self.table[
            slot,
            pr * self.patch_h : (pr + 1) * self.patch_h,
            pc * self.patch_w : (pc + 1) * self.patch_w,
        ]

    def __call__(self, sample: Sample) -> Array:
        return self.score_plane(
            sample.t, sample.horizon, sample.patch_origin, self.table.shape[0]
        )


def seasonal_cycle_baseline(
    cube: DataCube, split: SplitSpec, patch_h: int = 80, patch_w: int = 80
) -> SeasonalClimatology:
    """Climatology of the target over training years, one map per 8-day slot."""
    cal = cube.calendar
    train_years = [
        y for y in cube.years() if split.train_years[0] <= y <= split.train_years[1]
    ]
    if not train_years:
        raise ConfigError(f"training years {split.train_years} not covered by the cube")
    target = cube.variables[cube.target_name]
    table = np.zeros((cal.steps_per_year, cube.n_lat, cube.n_lon), dtype=np.float64)
    for slot in range(cal.steps_per_year):
        steps = [
            (y - cal.start_year) * cal.steps_per_year + slot for y in train_years
        ]
        table[slot] = target[steps].astype(np.float64).mean(axis=0)
    return SeasonalClimatology(table=table, patch_h=patch_h, patch_w=patch_w)


# ----------------------------------------------------------------------
# Manifest directory format
# ----------------------------------------------------------------------

_DTYPE_CODES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8")}


def _write_raw(path: Path, array: Array) -> str:
    dtype = "<f8" if array.dtype == np.float64 else "<f4"
    path.write_bytes(np.ascontiguousarray(array).astype(dtype).tobytes())
    return dtype


def save_cube(cube: DataCube, out_dir) -> None:
    """Write manifest.json plus one raw little-endian binary per variable
    and index. Round-trips bit-exactly through :func:`load_cube`."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest: dict = {
        "format": MANIFEST_FORMAT,
        "calendar": cube.calendar.to_dict(),
        "grid": {
            "lat_edges": cube.lat_edges.tolist(),
            "lon_edges": cube.lon_edges.tolist(),
            "land_mask_file": "land_mask.f32",
        },
        "target_name": cube.target_name,
        "log_vars": list(cube.log_vars),
        "preprocessed": cube.preprocessed,
        "provenance": cube.provenance,
        "variables": [],
        "indices": [],
    }
    for name, grid in cube.variables.items():
        fname = f"var_{name}.bin"
        dtype = _write_raw(out / fname, grid)
        manifest["variables"].append(
            {"name": name, "file": fname, "shape": list(grid.shape), "dtype": dtype}
        )
    for name, series in cube.indices.items():
        fname = f"idx_{name}.bin"
        dtype = _write_raw(out / fname, np.asarray(series))
        manifest["indices"].append(
            {"name": name, "file": fname, "shape": [len(series)], "dtype": dtype}
        )
    (out / "land_mask.f32").write_bytes(
        cube.land_mask.astype("<f4").tobytes()
    )
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_cube(cube_dir) -> DataCube:
    src = Path(cube_dir)
    manifest_path = src / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"no manifest.json under {src}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != MANIFEST_FORMAT:
        raise DataError(f"unrecognized cube format in {manifest_path}")

    def read_raw(entry) -> Array:
        dtype = _DTYPE_CODES.get(entry["dtype"])
        if dtype is None:
            raise DataError(f"unsupported dtype {entry['dtype']!r} for {entry['name']}")
        raw = (src / entry["file"]).read_bytes()
        arr = np.frombuffer(raw, dtype=dtype).reshape(entry["shape"])
        return arr.astype(arr.dtype.newbyteorder("="))

    variables = {e["name"]: read_raw(e) for e in manifest["variables"]}
    indices = {e["name"]: read_raw(e) for e in manifest["indices"]}
    grid = manifest["grid"]
    n_lat = len(grid["lat_edges"]) - 1
    n_lon = len(grid["lon_edges"]) - 1
    mask_raw = (src / grid["land_mask_file"]).read_bytes()
    land_mask = np.frombuffer(mask_raw, dtype="<f4").reshape(n_lat, n_lon) > 0.5
    return DataCube(
        variables=variables,
        indices=indices,
        calendar=CubeCalendar(**manifest["calendar"]),
        lat_edges=np.asarray(grid["lat_edges"], dtype=np.float64),
        lon_edges=np.asarray(grid["lon_edges"], dtype=np.float64),
        land_mask=land_mask,
        target_name=manifest["target_name"],
        log_vars=tuple(manifest["log_vars"]),
        preprocessed=manifest["preprocessed"],
        provenance=manifest["provenance"],
    )
