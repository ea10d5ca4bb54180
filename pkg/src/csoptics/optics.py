"""Differentiable scalar-wave PSF model for a pillar metasurface.

Pipeline per (source depth, material state): paraxial spherical wave at the
surface, elementwise complex transmission from a Chebyshev surrogate of the
unit-cell response, band-limited angular-spectrum propagation to the sensor
plane, intensity. The whole chain has a hand-derived vector-Jacobian product
back to the latent width parameters, so no autodiff framework is needed.

Units are SI throughout (meters).
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import chebyshev as cheb
from scipy.special import expit

from .errors import ConfigurationError, ModelError, ValidationError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OpticalGrid:
    """Square cell grid of the surface, shared by the sensor-plane sampling."""

    n: int                      # cells per axis, even
    pitch: float                # cell width in meters
    wavelength: float
    sensor_distance: float
    depths: tuple               # source depths in meters

    def __post_init__(self):
        if self.n <= 0 or self.n % 2:
            raise ConfigurationError("cell count must be a positive even number")
        if self.pitch <= 0 or self.wavelength <= 0 or self.sensor_distance <= 0:
            raise ConfigurationError("pitch, wavelength and sensor distance must be > 0")
        object.__setattr__(self, "depths", tuple(float(d) for d in self.depths))
        if not self.depths or any(d <= 0 for d in self.depths):
            raise ConfigurationError("depths must be a non-empty list of positive values")

    def coordinates(self) -> np.ndarray:
        # cell centers, symmetric about the optical axis
        return (np.arange(self.n) - self.n / 2 + 0.5) * self.pitch


class MetasurfaceGeometry:
    """Pillar widths through a latent logistic map.

    p = w_min + (w_max - w_min) * logistic(theta), so any real theta maps to a
    width strictly inside the bounds and the trainer never needs projections.
    """

    def __init__(self, theta: np.ndarray, w_min: float, w_max: float):
        theta = np.asarray(theta, dtype=np.float64)
        if theta.ndim != 2:
            raise ConfigurationError("theta must be a 2D array")
        if not 0 < w_min < w_max:
            raise ConfigurationError("need 0 < w_min < w_max")
        if not np.all(np.isfinite(theta)):
            raise ValidationError("theta contains non-finite values")
        self.theta = theta
        self.w_min = float(w_min)
        self.w_max = float(w_max)

    @property
    def widths(self) -> np.ndarray:
        return self.w_min + (self.w_max - self.w_min) * expit(self.theta)

    def widths_jacobian(self) -> np.ndarray:
        """dp/dtheta, elementwise."""
        s = expit(self.theta)
        return (self.w_max - self.w_min) * s * (1.0 - s)

    @classmethod
    def from_widths(cls, p: np.ndarray, w_min: float, w_max: float) -> "MetasurfaceGeometry":
        p = np.asarray(p, dtype=np.float64)
        if np.any(p <= w_min) or np.any(p >= w_max):
            raise ValidationError("widths must lie strictly inside (w_min, w_max)")
        frac = (p - w_min) / (w_max - w_min)
        return cls(np.log(frac / (1.0 - frac)), w_min, w_max)

    @classmethod
    def uniform(cls, n: int, width: float, w_min: float, w_max: float) -> "MetasurfaceGeometry":
        return cls.from_widths(np.full((n, n), float(width)), w_min, w_max)


@dataclass
class SurrogateModel:
    """Chebyshev interpolants of the complex unit-cell transmission t(w),
    one coefficient vector per material state, on the domain [w_min, w_max]."""

    coefficients: np.ndarray    # complex, shape (n_states, degree + 1)
    w_min: float
    w_max: float
    clamp_count: int = field(default=0, compare=False)

    @property
    def n_states(self) -> int:
        return self.coefficients.shape[0]

    @property
    def degree(self) -> int:
        return self.coefficients.shape[1] - 1

    def _to_unit(self, w):
        return (2.0 * w - self.w_min - self.w_max) / (self.w_max - self.w_min)


def chebyshev_nodes(w_min: float, w_max: float, count: int) -> np.ndarray:
    """Chebyshev points of the first kind mapped onto [w_min, w_max]."""
    s = cheb.chebpts1(count)
    return w_min + (s + 1.0) * 0.5 * (w_max - w_min)


def fit_surrogate(samples_per_state, degree: int, w_min: float, w_max: float) -> SurrogateModel:
    """Interpolate per-state tables of (width, complex transmission).

    This is an interpolation contract, not a regression: each state must
    provide exactly degree+1 samples located at the Chebyshev nodes of the
    declared domain, otherwise the polynomial would not reproduce the table.
    """
    if degree < 0:
        raise ConfigurationError("degree must be >= 0")
    if not 0 < w_min < w_max:
        raise ConfigurationError("need 0 < w_min < w_max")
    first = samples_per_state[0]
    if np.isscalar(first[0]):
        samples_per_state = [samples_per_state]
    nodes = chebyshev_nodes(w_min, w_max, degree + 1)
    span = w_max - w_min
    coeffs = []
    for state, table in enumerate(samples_per_state):
        widths = np.array([float(w) for w, _ in table])
        values = np.array([complex(t) for _, t in table])
        if widths.size != degree + 1:
            raise ConfigurationError(
                f"state {state}: got {widths.size} samples, interpolation at "
                f"degree {degree} needs exactly {degree + 1}")
        order = np.argsort(widths)
        widths, values = widths[order], values[order]
        if np.abs(widths - nodes).max() > 1e-9 * span:
            raise ConfigurationError(
                f"state {state}: sample widths are not the degree-{degree} "
                "Chebyshev nodes of the declared domain")
        s = cheb.chebpts1(degree + 1)
        c = cheb.chebfit(s, values, degree)
        coeffs.append(c)
    model = SurrogateModel(np.array(coeffs), float(w_min), float(w_max))
    scan = np.linspace(w_min, w_max, 257)
    for state in range(model.n_states):
        t, _ = eval_surrogate(model, scan, state)
        if np.abs(t).max() > 1.0 + 1e-6:
            raise ConfigurationError(
                f"state {state}: |t| exceeds 1 on the domain (max {np.abs(t).max():.6f}); "
                "transmission tables must be passive")
    return model


def eval_surrogate(model: SurrogateModel, w, state: int):
    """Transmission t(w) and dt/dw for one material state.

    Out-of-domain widths are clamped and counted on model.clamp_count; the
    latent parameterization keeps training inside the domain, so clamping
    only ever fires on hand-built inputs.
    """
    if not 0 <= state < model.n_states:
        raise ConfigurationError(f"state {state} out of range")
    w = np.asarray(w, dtype=np.float64)
    low, high = w < model.w_min, w > model.w_max
    n_out = int(low.sum() + high.sum())
    if n_out:
        model.clamp_count += n_out
        log.warning("eval_surrogate: clamped %d width(s) to the domain", n_out)
        w = np.clip(w, model.w_min, model.w_max)
    s = model._to_unit(w)
    c = model.coefficients[state]
    t = cheb.chebval(s, c)
    dt_ds = cheb.chebval(s, cheb.chebder(c))
    return t, dt_ds * (2.0 / (model.w_max - model.w_min))


def synthetic_ramp(w, w_min: float, w_max: float, state: int = 0,
                   turns: float = 1.0, amplitude: float = 0.98):
    """Analytic phase-ramp transmission used by tests and toy configs.

    State s winds turns*(1 + s/4) full phase turns across the width domain,
    with a slightly lower amplitude per state, so states are distinct but
    equally smooth.
    """
    amp = max(0.95, amplitude - 0.01 * state)
    rate = turns * (1.0 + 0.25 * state)
    frac = (np.asarray(w, dtype=np.float64) - w_min) / (w_max - w_min)
    return amp * np.exp(2j * np.pi * rate * frac)


def make_synthetic_surrogate(w_min: float, w_max: float, n_states: int = 1,
                             degree: int = 24, turns: float = 1.0,
                             amplitude: float = 0.98) -> SurrogateModel:
    nodes = chebyshev_nodes(w_min, w_max, degree + 1)
    tables = []
    for state in range(n_states):
        t = synthetic_ramp(nodes, w_min, w_max, state, turns, amplitude)
        tables.append(list(zip(nodes, t)))
    return fit_surrogate(tables, degree, w_min, w_max)


def load_surrogate_csv(path, degree: int, w_min: float, w_max: float) -> SurrogateModel:
    """Load per-state transmission tables from CSV columns
    width_m, re_t, im_t, state_id. Widths must sit at the Chebyshev nodes
    of the declared domain (see fit_surrogate)."""
    groups: dict[int, list] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"width_m", "re_t", "im_t", "state_id"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise ConfigurationError(
                f"surrogate CSV needs columns {sorted(required)}, got {reader.fieldnames}")
        for row in reader:
            t = float(row["re_t"]) + 1j * float(row["im_t"])
            groups.setdefault(int(row["state_id"]), []).append((float(row["width_m"]), t))
    if not groups:
        raise ConfigurationError("surrogate CSV is empty")
    states = sorted(groups)
    if states != list(range(len(states))):
        raise ConfigurationError(f"state_id values must be 0..{len(states) - 1}, got {states}")
    return fit_surrogate([groups[s] for s in states], degree, w_min, w_max)


def incident_field(grid: OpticalGrid, depth: float) -> np.ndarray:
    """Paraxial spherical wave from an on-axis point source at the given
    depth: unit amplitude, phase k (x^2 + y^2) / (2 depth) at cell centers."""
    if depth <= 0:
        raise ValidationError("depth must be > 0")
    c = grid.coordinates()
    r2 = c[:, None] ** 2 + c[None, :] ** 2
    k = 2.0 * np.pi / grid.wavelength
    return np.exp(1j * k * r2 / (2.0 * depth))


def _transfer_function(grid: OpticalGrid, distance: float) -> np.ndarray:
    f = np.fft.fftfreq(grid.n, d=grid.pitch)
    f2 = f[:, None] ** 2 + f[None, :] ** 2
    band = 1.0 / grid.wavelength ** 2 - f2
    H = np.zeros((grid.n, grid.n), dtype=np.complex128)
    prop = band > 0.0
    H[prop] = np.exp(2j * np.pi * distance * np.sqrt(band[prop]))
    return H


def propagate(fld: np.ndarray, distance: float, grid: OpticalGrid) -> np.ndarray:
    """Band-limited angular-spectrum propagation over the given distance.

    The transfer function has unit modulus on the propagating band and zeroes
    the evanescent components, so it is unitary on band-limited fields and
    composes over distances.
    """
    if distance <= 0:
        raise ValidationError("distance must be > 0")
    fld = np.asarray(fld)
    if fld.shape != (grid.n, grid.n):
        raise ValidationError(f"field shape {fld.shape} does not match grid {grid.n}")
    if grid.pitch > grid.wavelength / 2.0:
        warnings.warn(
            f"cell pitch {grid.pitch:.3e} m is coarser than wavelength/2 "
            f"({grid.wavelength / 2:.3e} m); angular-spectrum sampling may alias",
            stacklevel=2)
    return np.fft.ifft2(np.fft.fft2(fld) * _transfer_function(grid, distance))


@dataclass
class PsfStack:
    """Intensity PSFs indexed by (depth channel, material state), plus the
    single global normalization scale that was applied to the whole stack."""

    data: np.ndarray            # (n_depths, n_states, n, n), non-negative
    depths: tuple
    scale: float

    @property
    def n_depths(self) -> int:
        return self.data.shape[0]

    @property
    def n_states(self) -> int:
        return self.data.shape[1]


def _raw_psf_fields(geometry: MetasurfaceGeometry, surrogates: SurrogateModel,
                    grid: OpticalGrid):
    """Shared forward pass: transmissions, propagated fields and raw
    intensities for every (depth, state)."""
    if geometry.theta.shape != (grid.n, grid.n):
        raise ConfigurationError(
            f"geometry {geometry.theta.shape} does not match grid {grid.n}x{grid.n}")
    widths = geometry.widths
    trans = []
    dtrans = []
    for state in range(surrogates.n_states):
        t, dt = eval_surrogate(surrogates, widths, state)
        trans.append(t)
        dtrans.append(dt)
    incidents = [incident_field(grid, d) for d in grid.depths]
    fields = np.empty((len(grid.depths), surrogates.n_states, grid.n, grid.n),
                      dtype=np.complex128)
    for di, inc in enumerate(incidents):
        for si in range(surrogates.n_states):
            fields[di, si] = propagate(inc * trans[si], grid.sensor_distance, grid)
    raw = np.abs(fields) ** 2
    return widths, trans, dtrans, incidents, fields, raw


def compute_psf_stack(geometry: MetasurfaceGeometry, surrogates: SurrogateModel,
                      grid: OpticalGrid) -> PsfStack:
    """Intensity PSFs for every (depth, state), normalized by one global
    scale chosen so the (first depth, first state) PSF sums to 1. A single
    shared scale preserves the energy ratios between channels, which carry
    the depth/state information."""
    *_, raw = _raw_psf_fields(geometry, surrogates, grid)
    if not np.all(np.isfinite(raw)):
        raise ModelError("propagated field contains non-finite values")
    if np.any(raw.sum(axis=(2, 3)) <= 0.0):
        raise ModelError("a PSF channel has zero energy")
    ref_sum = raw[0, 0].sum()
    scale = 1.0 / ref_sum
    return PsfStack(data=scale * raw, depths=grid.depths, scale=scale)


def psf_vjp(geometry: MetasurfaceGeometry, surrogates: SurrogateModel,
            grid: OpticalGrid, psf_cotangent: np.ndarray) -> np.ndarray:
    """Exact reverse-mode gradient of <psf_cotangent, compute_psf_stack>
    with respect to the latent theta.

    Chain, using the convention dL = Re <conj(W), dE> for complex cotangents:
    normalization -> intensity (W = 2 rbar E) -> propagation adjoint
    (conjugate transfer function) -> transmission (dt/dw) -> logistic map.
    """
    cot = np.asarray(psf_cotangent, dtype=np.float64)
    _, trans, dtrans, incidents, fields, raw = _raw_psf_fields(geometry, surrogates, grid)
    if cot.shape != raw.shape:
        raise ValidationError(f"cotangent shape {cot.shape} != stack shape {raw.shape}")

    ref_sum = raw[0, 0].sum()
    if ref_sum <= 0.0:
        raise ModelError("reference PSF has zero energy")
    scale = 1.0 / ref_sum
    # d(scale)/d(raw_ref) couples every channel to the reference channel
    inner = float((cot * raw).sum())
    rbar = scale * cot
    rbar[0, 0] = rbar[0, 0] - scale * scale * inner

    Hc = np.conj(_transfer_function(grid, grid.sensor_distance))
    p_bar = np.zeros((grid.n, grid.n))
    for di in range(len(grid.depths)):
        for si in range(surrogates.n_states):
            W = 2.0 * rbar[di, si] * fields[di, si]
            W0 = np.fft.ifft2(np.fft.fft2(W) * Hc)
            Wt = W0 * np.conj(incidents[di])
            p_bar += np.real(np.conj(Wt) * dtrans[si])
    return p_bar * geometry.widths_jacobian()


def inverse_spaced_depths(z_near: float, z_far: float, count: int) -> tuple:
    """Depths uniformly spaced in 1/z from z_near to z_far, inclusive."""
    if not 0 < z_near < z_far:
        raise ConfigurationError("need 0 < z_near < z_far")
    if count < 1:
        raise ConfigurationError("count must be >= 1")
    if count == 1:
        return (float(z_near),)
    inv = np.linspace(1.0 / z_near, 1.0 / z_far, count)
    return tuple(1.0 / inv)
