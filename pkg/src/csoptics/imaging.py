"""Measurement assembly, object sampling, and the additive noise model.

The measurement convolves each depth channel of the object with that
channel's PSF, sums onto the sensor, and stacks one shot per material state.
Noise is zero-mean Gaussian with a standard deviation proportional to the
mean absolute clean intensity of the shot, applied per object.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ValidationError
from .linop import ConvMeasurementSpec, LinearOperator, make_conv_measurement
from .optics import PsfStack
from .util import rng_from

_OBJECT_STREAM = 11
_NOISE_STREAM = 23


@dataclass
class ImagingSystem:
    G: LinearOperator
    object_shape: tuple         # (nx, ny, channels)
    sensor_shape: tuple         # (sx, sy)
    shots: int

    @property
    def object_size(self) -> int:
        return int(np.prod(self.object_shape))

    @property
    def sensor_size(self) -> int:
        # all shots stacked
        return self.shots * int(np.prod(self.sensor_shape))


@dataclass
class ObjectSample:
    u: np.ndarray
    sparsity: float
    kind: str
    seed: int


@dataclass
class NoisySensorImage:
    y: np.ndarray
    sigma: float
    noise_fraction: float
    seed: int


def assemble_system(psfs: PsfStack, object_dims, sensor_dims) -> ImagingSystem:
    """Wrap a PSF stack as the multi-shot convolutional measurement.

    Depth channels become object channels; material states become shots,
    stacked along the output. Underdetermined layouts (fewer sensor values
    than object values) are the intended regime; anything else is allowed
    for small tests but flagged.
    """
    object_dims = tuple(int(d) for d in object_dims)
    if len(object_dims) == 2:
        object_dims = object_dims + (1,)
    if len(object_dims) != 3:
        raise ConfigurationError("object dims must be (nx, ny) or (nx, ny, channels)")
    sensor_dims = tuple(int(d) for d in sensor_dims)
    if len(sensor_dims) != 2:
        raise ConfigurationError("sensor dims must be (sx, sy)")
    if psfs.n_depths != object_dims[2]:
        raise ConfigurationError(
            f"stack has {psfs.n_depths} depth channels, object has {object_dims[2]}")
    # (depth, state, x, y) -> (shot=state, channel=depth, x, y)
    kernel = np.transpose(psfs.data, (1, 0, 2, 3))
    spec = ConvMeasurementSpec(psf_stack=kernel, object_shape=object_dims,
                               sensor_shape=sensor_dims)
    G = make_conv_measurement(spec)
    if G.out_size >= G.in_size:
        warnings.warn(
            f"measurement is not underdetermined ({G.out_size} rows, "
            f"{G.in_size} columns)", stacklevel=2)
    return ImagingSystem(G=G, object_shape=object_dims, sensor_shape=sensor_dims,
                         shots=psfs.n_states)


def sample_object(dims, sparsity: float, kind: str, seed: int,
                  value_range: tuple = (0.8, 1.2)) -> ObjectSample:
    """k = round(sparsity * n) support positions uniform without replacement.

    physical: values uniform in value_range (non-negative).
    unphysical: the same magnitude distribution with independent random signs,
    so the two kinds differ only in sign structure.
    """
    if not 0.0 < sparsity <= 1.0:
        raise ValidationError("sparsity must lie in (0, 1]")
    if kind not in ("physical", "unphysical"):
        raise ValidationError(f"unknown object kind {kind!r}")
    lo, hi = float(value_range[0]), float(value_range[1])
    if not 0.0 <= lo <= hi:
        raise ValidationError("value_range must satisfy 0 <= lo <= hi")
    n = int(np.prod(tuple(int(d) for d in dims)))
    k = int(round(sparsity * n))
    if k == 0:
        raise ValidationError(f"sparsity {sparsity} rounds to zero nonzeros for n={n}")
    rng = rng_from(seed, _OBJECT_STREAM)
    positions = rng.choice(n, size=k, replace=False)
    magnitudes = rng.uniform(lo, hi, size=k)
    if kind == "unphysical":
        magnitudes = magnitudes * rng.choice(np.array([-1.0, 1.0]), size=k)
    u = np.zeros(n)
    u[positions] = magnitudes
    return ObjectSample(u=u, sparsity=float(sparsity), kind=kind, seed=int(seed))


def render(system: ImagingSystem, u: np.ndarray, noise_fraction: float,
           seed: int) -> NoisySensorImage:
    """y = G u + eta with eta ~ N(0, sigma^2) i.i.d. per sensor value and
    sigma = noise_fraction * mean(|G u|), computed per object."""
    if noise_fraction < 0:
        raise ValidationError("noise_fraction must be >= 0")
    y_clean = system.G.forward(u)
    sigma = float(noise_fraction * np.abs(y_clean).mean())
    if sigma == 0.0:
        return NoisySensorImage(y=y_clean, sigma=0.0,
                                noise_fraction=float(noise_fraction), seed=int(seed))
    rng = rng_from(seed, _NOISE_STREAM)
    y = y_clean + sigma * rng.standard_normal(y_clean.size)
    return NoisySensorImage(y=y, sigma=sigma, noise_fraction=float(noise_fraction),
                            seed=int(seed))


def relative_error(u: np.ndarray, u_est: np.ndarray) -> float:
    """||u - u_est|| / ||u|| (relative RMSE form)."""
    u = np.asarray(u, dtype=np.float64).ravel()
    u_est = np.asarray(u_est, dtype=np.float64).ravel()
    denom = np.linalg.norm(u)
    if denom == 0.0:
        raise ValidationError("relative error undefined for a zero object")
    return float(np.linalg.norm(u - u_est) / denom)


def relative_sq_error(u: np.ndarray, u_est: np.ndarray) -> float:
    """Squared form, the trainer's per-sample loss term."""
    return relative_error(u, u_est) ** 2
