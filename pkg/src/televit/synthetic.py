"""Seeded synthetic datacube with seasonal drivers and teleconnected burns.

Drivers are smooth random fields composed of a static spatial pattern, a
seasonal cycle with spatially varying amplitude and phase, and an AR(1)
temporal anomaly, so a snapshot at time t still carries information about
t + h. Monthly index series are stationary AR(1) processes.

One designated index modulates the burn odds through a smooth signed
footprint (a dipole: positive regions burn more when the index is high,
negative regions burn more when it is low) with a configurable lag in
months. The dipole shifts where burns concentrate rather than how many
cells burn, so yearly prevalence stays comparable across seeds. Setting the
strength to zero severs the link entirely.

Each component draws from its own child stream of the seed, so cubes that
differ only in teleconnection strength share identical drivers, indices,
and footprint.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .datacube import TARGET_NAME, CubeCalendar, DataCube
from .errors import ConfigError

Array = np.ndarray

_STREAM_LAND = 1
_STREAM_INDICES = 2
_STREAM_DRIVERS = 3
_STREAM_FOOTPRINT = 4
_STREAM_BURN = 5


@dataclass(frozen=True)
class GeneratorConfig:
    start_year: int = 2015
    n_years: int = 5
    n_lat: int = 80
    n_lon: int = 160
    lat_range: tuple[float, float] = (-40.0, 40.0)
    lon_range: tuple[float, float] = (-80.0, 80.0)
    n_drivers: int = 10
    n_indices: int = 10
    patch_h: int = 80
    patch_w: int = 80
    coarsen_factor: int = 4
    # index dynamics
    index_ar: float = 0.85
    # teleconnection: the driving index shifts burn odds over a signed footprint
    teleconnection_strength: float = 1.5
    teleconnection_lag_months: int = 4
    driving_index: int = 0
    footprint_scale: float = 1.5
    # driver dynamics
    driver_persistence: float = 0.9
    anomaly_scale: float = 0.8
    seasonal_amplitude: float = 1.0
    spatial_smoothness: float = 6.0
    # burn process
    base_burn_logit: float = -4.0
    driver_effect: float = 1.0
    seasonal_burn_effect: float = 0.8
    land_fraction: float = 1.0
    skewed_drivers: tuple[int, ...] = (1, 9)

    def __post_init__(self):
        if self.n_years < 1:
            raise ConfigError("n_years must be >= 1")
        if self.n_lat % self.patch_h != 0 or self.n_lon % self.patch_w != 0:
            raise ConfigError(
                f"grid {self.n_lat}x{self.n_lon} not divisible by patch "
                f"{self.patch_h}x{self.patch_w}"
            )
        if self.n_lat % self.coarsen_factor != 0 or self.n_lon % self.coarsen_factor != 0:
            raise ConfigError(
                f"grid {self.n_lat}x{self.n_lon} not divisible by coarsening "
                f"factor {self.coarsen_factor}"
            )
        if not 0.0 < self.index_ar < 1.0:
            raise ConfigError("index_ar must be in (0, 1)")
        if self.teleconnection_lag_months < 0:
            raise ConfigError("teleconnection_lag_months must be >= 0")
        if not 0.0 < self.land_fraction <= 1.0:
            raise ConfigError("land_fraction must be in (0, 1]")
        if not 0 <= self.driving_index < self.n_indices:
            raise ConfigError("driving_index out of range")


def _stream(seed: int, component: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), component])


def _smooth_field(rng: np.random.Generator, shape, sigma: float) -> Array:
    """Unit-variance smooth random field (Gaussian-filtered white noise)."""
    noise = rng.standard_normal(shape)
    field = ndimage.gaussian_filter(noise, sigma=sigma, mode="wrap")
    std = field.std()
    return field / std if std > 0 else field


def _ar1_series(rng: np.random.Generator, n: int, phi: float) -> Array:
    """Stationary AR(1) with unit marginal variance."""
    out = np.empty(n)
    out[0] = rng.standard_normal()
    innovation = np.sqrt(1.0 - phi * phi)
    for i in range(1, n):
        out[i] = phi * out[i - 1] + innovation * rng.standard_normal()
    return out


def _ar1_fields(rng: np.random.Generator, n_steps: int, shape, phi: float, sigma: float) -> Array:
    """AR(1) in time over spatially smooth innovations, unit marginal variance."""
    noise = rng.standard_normal((n_steps,) + shape)
    noise = ndimage.gaussian_filter(noise, sigma=(0.0, sigma, sigma), mode="wrap")
    noise /= noise.std(axis=(1, 2), keepdims=True)
    out = np.empty_like(noise)
    out[0] = noise[0]
    innovation = np.sqrt(1.0 - phi * phi)
    for t in range(1, n_steps):
        out[t] = phi * out[t - 1] + innovation * noise[t]
    return out


def teleconnection_footprint(config: GeneratorConfig, seed: int) -> Array:
    """The signed spatial footprint the driving index acts through.

    Values lie in (-1, 1); recomputable independently of full generation
    because the footprint has its own child stream of the seed.
    """
    rng = _stream(seed, _STREAM_FOOTPRINT)
    field = _smooth_field(rng, (config.n_lat, config.n_lon), config.spatial_smoothness * 2.0)
    return np.tanh(config.footprint_scale * field)


def lagged_index_at_steps(config: GeneratorConfig, cube: DataCube) -> Array:
    """Per-timestep value of the driving index, lagged as the burns see it."""
    cal = cube.calendar
    series = np.asarray(cube.indices[f"oci_{config.driving_index:02d}"], dtype=np.float64)
    out = np.empty(cal.n_steps)
    for t in range(cal.n_steps):
        pos = cal.month_position(cal.step_month_number(t)) - config.teleconnection_lag_months
        out[t] = series[pos] if pos >= 0 else 0.0
    return out


def generate_synthetic_cube(config: GeneratorConfig, seed: int) -> DataCube:
    """Deterministic synthetic cube for one (config, seed) pair."""
    cal = CubeCalendar(start_year=config.start_year, n_years=config.n_years)
    n_steps = cal.n_steps
    shape = (config.n_lat, config.n_lon)
    sigma = config.spatial_smoothness

    lat_edges = np.linspace(config.lat_range[0], config.lat_range[1], config.n_lat + 1)
    lon_edges = np.linspace(config.lon_range[0], config.lon_range[1], config.n_lon + 1)

    if config.land_fraction >= 1.0:
        land_mask = np.ones(shape, dtype=bool)
    else:
        relief = _smooth_field(_stream(seed, _STREAM_LAND), shape, sigma * 1.5)
        land_mask = relief >= np.quantile(relief, 1.0 - config.land_fraction)

    rng_idx = _stream(seed, _STREAM_INDICES)
    indices = {
        f"oci_{i:02d}": _ar1_series(rng_idx, cal.n_months, config.index_ar).astype(np.float32)
        for i in range(config.n_indices)
    }
    driving = np.asarray(indices[f"oci_{config.driving_index:02d}"], dtype=np.float64)

    # Driver fields: static pattern + seasonal cycle + persistent anomaly.
    rng_drv = _stream(seed, _STREAM_DRIVERS)
    step_phase = 2.0 * np.pi * np.arange(n_steps) / cal.steps_per_year
    variables: dict[str, Array] = {}
    anomalies: list[Array] = []
    seasonal_mean = np.zeros((n_steps,) + shape)
    for d in range(config.n_drivers):
        base = _smooth_field(rng_drv, shape, sigma)
        amp = config.seasonal_amplitude * (1.0 + 0.5 * _smooth_field(rng_drv, shape, sigma))
        phase = np.pi * _smooth_field(rng_drv, shape, sigma)
        seasonal = amp[None] * np.sin(step_phase[:, None, None] + phase[None])
        anomaly = _ar1_fields(rng_drv, n_steps, shape, config.driver_persistence, sigma)
        raw = base[None] + seasonal + config.anomaly_scale * anomaly
        if d in config.skewed_drivers:
            raw = np.exp(0.5 * raw)  # positive, right-skewed; log1p flattens it
        variables[f"driver_{d:02d}"] = raw.astype(np.float32)
        if d < 3:
            anomalies.append(anomaly)
            seasonal_mean += seasonal / 3.0

    # Burn odds: local anomaly signal + seasonal cycle + lagged teleconnection
    # acting through the signed footprint.
    local_signal = np.mean(anomalies, axis=0)
    footprint = teleconnection_footprint(config, seed)
    lag_values = np.empty(n_steps)
    for t in range(n_steps):
        pos = cal.month_position(cal.step_month_number(t)) - config.teleconnection_lag_months
        lag_values[t] = driving[pos] if pos >= 0 else 0.0

    logit = (
        config.base_burn_logit
        + config.driver_effect * local_signal
        + config.seasonal_burn_effect * seasonal_mean
        + config.teleconnection_strength * footprint[None] * lag_values[:, None, None]
    )
    prob = 1.0 / (1.0 + np.exp(-logit))
    burned = (_stream(seed, _STREAM_BURN).random((n_steps,) + shape) < prob) & land_mask[None]
    variables[TARGET_NAME] = burned.astype(np.float32)

    return DataCube(
        variables=variables,
        indices=indices,
        calendar=cal,
        lat_edges=lat_edges,
        lon_edges=lon_edges,
        land_mask=land_mask,
        target_name=TARGET_NAME,
        log_vars=tuple(
            f"driver_{d:02d}" for d in config.skewed_drivers if d < config.n_drivers
        ),
        preprocessed=False,
        provenance={"generator": asdict(config), "seed": int(seed)},
    )
