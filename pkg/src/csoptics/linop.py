"""Matrix-free linear operators for convolutional imaging.

All operators map flattened float64 vectors to flattened float64 vectors.
Multi-channel objects use shape (nx, ny, n_channels) flattened in C order
(row-major, channel-last); this ordering is part of the public contract.

Operators are immutable after construction: kernel spectra are computed
once in the constructor and only read afterwards, so a single operator is
safe to apply concurrently from multiple threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.fft

from .errors import ConfigurationError, ValidationError


class LinearOperator:
    """Base class: a linear map with an explicit adjoint.

    Subclasses implement ``_forward`` / ``_adjoint`` on flattened vectors.
    ``in_size`` / ``out_size`` give the vector lengths; ``in_dims`` /
    ``out_dims`` record the structured shapes they correspond to.
    """

    def __init__(self, in_dims: tuple, out_dims: tuple):
        self.in_dims = tuple(in_dims)
        self.out_dims = tuple(out_dims)
        self.in_size = int(np.prod(self.in_dims))
        self.out_size = int(np.prod(self.out_dims))

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64).ravel()
        if x.size != self.in_size:
            raise ValidationError(f"forward input has length {x.size}, expected {self.in_size}")
        return self._forward(x)

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64).ravel()
        if y.size != self.out_size:
            raise ValidationError(f"adjoint input has length {y.size}, expected {self.out_size}")
        return self._adjoint(y)

    def _forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _adjoint(self, y: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class IdentityOperator(LinearOperator):
    def __init__(self, n: int):
        super().__init__((n,), (n,))

    def _forward(self, x):
        return x.copy()

    def _adjoint(self, y):
        return y.copy()


class DenseOperator(LinearOperator):
    """Explicit-matrix operator. Test oracle and tiny problems only."""

    def __init__(self, matrix: np.ndarray):
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.ndim != 2:
            raise ConfigurationError("DenseOperator needs a 2D matrix")
        super().__init__((matrix.shape[1],), (matrix.shape[0],))
        self.matrix = matrix

    def _forward(self, x):
        return self.matrix @ x

    def _adjoint(self, y):
        return self.matrix.T @ y


def materialize(op: LinearOperator) -> np.ndarray:
    """Dense matrix of a small operator, one forward apply per basis vector."""
    cols = []
    e = np.zeros(op.in_size)
    for j in range(op.in_size):
        e[j] = 1.0
        cols.append(op.forward(e))
        e[j] = 0.0
    return np.stack(cols, axis=1)


# ---------------------------------------------------------------------------
# Convolve / sum / crop measurement
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConvMeasurementSpec:
    """Convolutional measurement: per shot, convolve each object channel with
    its PSF, sum channels, and center-crop onto the sensor.

    psf_stack has shape (shots, channels, px, py); the object has shape
    (nx, ny, channels); each shot produces an (sx, sy) sensor image and the
    shots are stacked into one output vector.
    """

    psf_stack: np.ndarray
    object_shape: tuple  # (nx, ny, channels)
    sensor_shape: tuple  # (sx, sy)

    @property
    def shots(self) -> int:
        return self.psf_stack.shape[0]

    @property
    def channels(self) -> int:
        return self.psf_stack.shape[1]


def _crop_start(full: int, want: int) -> int:
    # centered crop; for an odd margin the extra pixel of margin sits on the
    # low-index side, pairing with "delta at index p//2" as the identity kernel
    return (full - want + 1) // 2


class ConvMeasurement(LinearOperator):
    """Zero-padded linear convolution, channel sum, centered crop, per shot.

    The convolution is realized by frequency-domain multiplication at the
    padded size (nx+px-1, ny+py-1), so there is no wraparound. PSF spectra
    are precomputed here and reused by every apply.
    """

    def __init__(self, spec: ConvMeasurementSpec):
        psfs = np.asarray(spec.psf_stack, dtype=np.float64)
        if psfs.ndim != 4:
            raise ConfigurationError("psf_stack must have shape (shots, channels, px, py)")
        if not np.all(np.isfinite(psfs)):
            raise ValidationError("PSF stack contains non-finite values")
        if np.any(psfs < 0):
            raise ValidationError("PSF stack contains negative values")
        nx, ny, channels = spec.object_shape
        sx, sy = spec.sensor_shape
        shots = psfs.shape[0]
        if psfs.shape[1] != channels:
            raise ConfigurationError(
                f"psf_stack has {psfs.shape[1]} channels, object has {channels}")
        px, py = psfs.shape[2], psfs.shape[3]
        fx, fy = nx + px - 1, ny + py - 1
        if sx > fx or sy > fy:
            raise ConfigurationError(
                f"sensor {sx}x{sy} exceeds padded convolution output {fx}x{fy}")
        super().__init__((nx, ny, channels), (shots, sx, sy))

        self.spec = spec
        self._obj = (nx, ny)
        self._psf = (px, py)
        self._sensor = (sx, sy)
        self._full = (fx, fy)
        # FFT at the next fast size >= linear-convolution size; extra zero
        # padding leaves indices [0, fx) x [0, fy) untouched
        self._fft = (scipy.fft.next_fast_len(fx), scipy.fft.next_fast_len(fy))
        self._start = (_crop_start(fx, sx), _crop_start(fy, sy))
        self._psf_hat = scipy.fft.rfft2(psfs, s=self._fft)

    def _embed_sensor(self, y_shot: np.ndarray) -> np.ndarray:
        """Adjoint of the centered crop: place the sensor image on the full grid."""
        fx, fy = self._full
        sx, sy = self._sensor
        ox, oy = self._start
        out = np.zeros((fx, fy))
        out[ox:ox + sx, oy:oy + sy] = y_shot
        return out

    def _forward(self, x):
        nx, ny = self._obj
        sx, sy = self._sensor
        ox, oy = self._start
        obj = x.reshape(nx, ny, -1)
        obj_hat = scipy.fft.rfft2(np.moveaxis(obj, -1, 0), s=self._fft)  # (channels, ...)
        out = np.empty((self.spec.shots, sx, sy))
        for s in range(self.spec.shots):
            full = scipy.fft.irfft2((self._psf_hat[s] * obj_hat).sum(axis=0), s=self._fft)
            out[s] = full[ox:ox + sx, oy:oy + sy]
        return out.ravel()

    def _adjoint(self, y):
        nx, ny = self._obj
        sx, sy = self._sensor
        shots = self.spec.shots
        acc = np.zeros((self.spec.channels, nx, ny))
        for s in range(shots):
            pad = self._embed_sensor(y.reshape(shots, sx, sy)[s])
            pad_hat = scipy.fft.rfft2(pad, s=self._fft)
            corr = scipy.fft.irfft2(pad_hat[None] * np.conj(self._psf_hat[s]), s=self._fft)
            acc += corr[:, :nx, :ny]
        return np.moveaxis(acc, 0, -1).ravel()

    def psf_vjp(self, x: np.ndarray, y_cotangent: np.ndarray) -> np.ndarray:
        """Cotangent on the PSF stack for one (input, output-cotangent) pair.

        d<v, G(psf) x>/d psf[s,c] = correlate(embed(v_s), x_c) restricted to
        the PSF window; same FFT identity as the adjoint with roles swapped.
        """
        nx, ny = self._obj
        px, py = self._psf
        sx, sy = self._sensor
        shots = self.spec.shots
        obj = np.asarray(x, dtype=np.float64).reshape(nx, ny, -1)
        obj_hat = scipy.fft.rfft2(np.moveaxis(obj, -1, 0), s=self._fft)
        grad = np.empty_like(self.spec.psf_stack, dtype=np.float64)
        cot = np.asarray(y_cotangent, dtype=np.float64).reshape(shots, sx, sy)
        for s in range(shots):
            pad_hat = scipy.fft.rfft2(self._embed_sensor(cot[s]), s=self._fft)
            corr = scipy.fft.irfft2(pad_hat[None] * np.conj(obj_hat), s=self._fft)
            grad[s] = corr[:, :px, :py]
        return grad


def make_conv_measurement(spec: ConvMeasurementSpec) -> ConvMeasurement:
    return ConvMeasurement(spec)


# ---------------------------------------------------------------------------
# Anisotropic gradient (TV) operator
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TvGradientSpec:
    """First differences along every axis with periodic wraparound.

    Output stacks one difference block per axis, last axis first (so for a
    2D array the within-row differences come before the within-column ones).
    """

    shape: tuple
    periodic: bool = True


class TvGradient(LinearOperator):
    def __init__(self, spec: TvGradientSpec):
        shape = tuple(int(s) for s in spec.shape)
        if any(s <= 0 for s in shape):
            raise ConfigurationError(f"shape must be positive, got {shape}")
        if not spec.periodic:
            raise ConfigurationError("only periodic boundaries are supported")
        n = int(np.prod(shape))
        super().__init__(shape, (len(shape) * n,))
        self.spec = spec
        self.shape = shape
        self.axes = tuple(reversed(range(len(shape))))

    def _forward(self, x):
        a = x.reshape(self.shape)
        return np.concatenate([(np.roll(a, -1, axis=ax) - a).ravel() for ax in self.axes])

    def _adjoint(self, y):
        n = int(np.prod(self.shape))
        acc = np.zeros(self.shape)
        for block, ax in enumerate(self.axes):
            d = y[block * n:(block + 1) * n].reshape(self.shape)
            acc += np.roll(d, 1, axis=ax) - d
        return acc.ravel()


def make_tv_gradient(spec: TvGradientSpec) -> TvGradient:
    return TvGradient(spec)


# ---------------------------------------------------------------------------
# Partial Gaussian circulant baseline
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GaussianCirculantSpec:
    """First m rows of the circulant matrix generated by one length-n i.i.d.
    standard normal vector, scaled by the normalization factor (1/sqrt(n)
    unless overridden)."""

    seed: int
    n: int
    m: int
    normalization: float | None = None


class GaussianCirculant(LinearOperator):
    """y = first m entries of the circular convolution of x with the generator.

    Row k of the dense equivalent is g[(k - j) mod n]; row k+1 is row k
    rotated right by one.
    """

    def __init__(self, spec: GaussianCirculantSpec, generator: np.ndarray | None = None):
        if not 1 <= spec.m <= spec.n:
            raise ConfigurationError(f"need 1 <= m <= n, got m={spec.m}, n={spec.n}")
        super().__init__((spec.n,), (spec.m,))
        self.spec = spec
        if generator is None:
            from .util import rng_from
            generator = rng_from(spec.seed).standard_normal(spec.n)
        else:
            generator = np.asarray(generator, dtype=np.float64)
            if generator.size != spec.n:
                raise ConfigurationError("generator length must equal n")
        scale = spec.normalization if spec.normalization is not None else 1.0 / np.sqrt(spec.n)
        self.generator = generator * scale
        self._gen_hat = np.fft.rfft(self.generator)

    def _forward(self, x):
        conv = np.fft.irfft(self._gen_hat * np.fft.rfft(x), n=self.spec.n)
        return conv[: self.spec.m]

    def _adjoint(self, y):
        pad = np.zeros(self.spec.n)
        pad[: self.spec.m] = y
        return np.fft.irfft(np.conj(self._gen_hat) * np.fft.rfft(pad), n=self.spec.n)


def make_gaussian_circulant(spec: GaussianCirculantSpec,
                            generator: np.ndarray | None = None) -> GaussianCirculant:
    """`generator` overrides the seeded draw (test hook)."""
    return GaussianCirculant(spec, generator=generator)


# ---------------------------------------------------------------------------
# Operator-level utilities
# ---------------------------------------------------------------------------

def dot_test(op: LinearOperator, seed: int = 0) -> float:
    """Relative adjoint discrepancy |<Ax,v> - <x,A'v>| / (|Ax||v| + |x||A'v|)."""
    from .util import rng_from
    rng = rng_from(seed)
    x = rng.standard_normal(op.in_size)
    v = rng.standard_normal(op.out_size)
    ax = op.forward(x)
    atv = op.adjoint(v)
    lhs = float(ax @ v)
    rhs = float(x @ atv)
    denom = np.linalg.norm(ax) * np.linalg.norm(v) + np.linalg.norm(x) * np.linalg.norm(atv)
    if denom == 0.0:
        return 0.0
    return abs(lhs - rhs) / denom


def operator_norm(op: LinearOperator, iters: int = 50, seed: int = 0) -> float:
    """Power iteration on A'A; returns an estimate of ||A||_2^2 times a 1.05
    safety factor so a step size derived from it stays valid even when the
    iteration has not fully converged."""
    if iters < 1:
        raise ConfigurationError("iters must be >= 1")
    from .util import rng_from
    rng = rng_from(seed)
    b = rng.standard_normal(op.in_size)
    nb = np.linalg.norm(b)
    if nb == 0.0:
        return 0.0
    b /= nb
    lam = 0.0
    for _ in range(iters):
        ab = op.forward(b)
        lam = float(ab @ ab)  # Rayleigh quotient of A'A at unit b
        b = op.adjoint(ab)
        nb = np.linalg.norm(b)
        if nb == 0.0:
            return 0.0
        b /= nb
    return 1.05 * lam
