"""Rigid-sphere acoustic model.

Surface pressure of a rigid sphere excited by a point source, expanded in
spherical Hankel functions and Legendre polynomials, plus the two derived
quantities the beamformer needs:

* the distance variation function (DVF), the ratio of the surface pressure
  for a near source to the pressure for a far reference source, and
* the per-ear squared-magnitude DVF ratio (``dvf_ild``), the linear power
  factor by which moving a source closer scales its interaural level
  difference below the cut-off frequency.

All angles are azimuths in degrees on the horizontal plane, 0 deg straight
ahead, positive clockwise (toward the right ear). The ears sit at +/- the
configured ear azimuth on the sphere surface.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

SPEED_OF_SOUND_M_S = 343.0
DEFAULT_HEAD_RADIUS_M = 0.0875
DEFAULT_EAR_AZIMUTH_DEG = 100.0
FARFIELD_DISTANCE_M = 1.0

# Scaling factors below the cut-off are table-driven; the model is only
# trusted where the ILD-azimuth relation stays injective.
MAX_TABLE_FREQ_HZ = 800.0


class SeriesConvergenceError(ArithmeticError):
    """Sphere-pressure series did not converge within ``max_terms``."""


class TableRangeError(ValueError):
    """A DVF table was queried outside its grid."""


@dataclass(frozen=True)
class SphereParams:
    """Geometry and series controls for the rigid-sphere model."""

    radius_m: float = DEFAULT_HEAD_RADIUS_M
    speed_of_sound_m_s: float = SPEED_OF_SOUND_M_S
    ear_azimuth_deg: float = DEFAULT_EAR_AZIMUTH_DEG
    series_tolerance: float = 1e-12
    max_terms: int = 200

    def __post_init__(self):
        if self.radius_m <= 0:
            raise ValueError("sphere radius must be positive")
        if self.speed_of_sound_m_s <= 0:
            raise ValueError("speed of sound must be positive")
        if not 0.0 < self.series_tolerance < 1e-6:
            raise ValueError("series_tolerance must lie in (0, 1e-6)")
        if self.max_terms < 50:
            raise ValueError("max_terms must be at least 50")


def wrap_angle_deg(angle):
    """Wrap an angle (degrees) to (-180, 180]."""
    a = np.mod(np.asarray(angle, dtype=float), 360.0)
    return np.where(a > 180.0, a - 360.0, a)


def angular_separation_deg(azimuth_a, azimuth_b):
    """Great-circle separation of two horizontal-plane azimuths, in [0, 180]."""
    return np.abs(wrap_angle_deg(np.asarray(azimuth_a) - np.asarray(azimuth_b)))


def legendre(m: int, x):
    """Legendre polynomial P_m(x) by the three-term recurrence.

    ``x`` may be a scalar or an array with entries in [-1, 1].
    """
    if m < 0:
        raise ValueError("degree must be nonnegative")
    x = np.asarray(x, dtype=float)
    if np.any(np.abs(x) > 1.0 + 1e-15):
        raise ValueError("Legendre argument outside [-1, 1]")
    p_prev = np.ones_like(x)
    if m == 0:
        return p_prev if p_prev.ndim else float(p_prev)
    p = x.copy()
    for deg in range(1, m):
        p, p_prev = ((2 * deg + 1) * x * p - deg * p_prev) / (deg + 1), p
    return p if p.ndim else float(p)


def spherical_hankel1(m: int, x: float):
    """Spherical Hankel function of the first kind and its derivative.

    Returns ``(h_m(x), h'_m(x))``. Values are built by upward recurrence
    from h_{-1}(x) = e^{ix}/x and h_0(x) = -i e^{ix}/x; the derivative uses
    h'_m(x) = h_{m-1}(x) - ((m+1)/x) h_m(x).
    """
    if m < 0:
        raise ValueError("order must be nonnegative")
    if x <= 0:
        raise ValueError("argument must be positive")
    h_prev = np.exp(1j * x) / x          # h_{-1}
    h = -1j * np.exp(1j * x) / x         # h_0
    with np.errstate(over="ignore", invalid="ignore"):
        for order in range(m):
            h, h_prev = (2 * order + 1) / x * h - h_prev, h
            if not (np.isfinite(h.real) and np.isfinite(h.imag)):
                raise OverflowError(
                    f"spherical Hankel overflow at order {order + 1}, argument {x!r}")
        deriv = h_prev - (m + 1) / x * h
    return h, deriv


def sphere_pressure(params: SphereParams, f_hz: float, theta_deg, r_m: float):
    """Pressure on the rigid-sphere surface for a point source.

    Evaluates ``-kr * sum_m (2m+1) (h_m(kr)/h'_m(ka)) P_m(cos theta) e^{-ikr}``
    with k the wavenumber, a the sphere radius, r the source distance to the
    sphere centre and theta the angle between the source direction and the
    surface point. ``theta_deg`` may be an array; a matching array of complex
    pressures is returned.

    The sum stops once two consecutive terms fall below ``series_tolerance``
    relative to the running partial sum (two, because Legendre factors have
    isolated zeros, e.g. every odd degree at theta = 90 deg).
    """
    if f_hz <= 0:
        raise ValueError("frequency must be positive")
    if r_m <= params.radius_m:
        raise ValueError("source distance must exceed the sphere radius")
    theta = np.atleast_1d(np.asarray(theta_deg, dtype=float))
    scalar = np.isscalar(theta_deg) or np.ndim(theta_deg) == 0
    cos_t = np.cos(np.deg2rad(theta))

    k = 2.0 * np.pi * f_hz / params.speed_of_sound_m_s
    x_r = k * r_m
    x_a = k * params.radius_m

    # Running recurrences: h at x_r, (h, h_prev) at x_a for the derivative,
    # Legendre values at cos_t.
    hr_prev = np.exp(1j * x_r) / x_r
    hr = -1j * np.exp(1j * x_r) / x_r
    ha_prev = np.exp(1j * x_a) / x_a
    ha = -1j * np.exp(1j * x_a) / x_a
    p_prev = np.zeros_like(cos_t)
    p_cur = np.ones_like(cos_t)

    total = np.zeros(theta.shape, dtype=complex)
    below = 0
    achieved = np.inf
    with np.errstate(over="ignore", invalid="ignore"):
        for m in range(params.max_terms + 1):
            dha = ha_prev - (m + 1) / x_a * ha
            if not np.isfinite(dha.real) or not np.isfinite(dha.imag):
                # Denominator blew up first: remaining terms are numerically zero.
                break
            ratio = hr / dha
            if not (np.isfinite(ratio.real) and np.isfinite(ratio.imag)):
                raise SeriesConvergenceError(
                    f"term {m} not finite at f={f_hz} Hz, r={r_m} m"
                )
            term = (2 * m + 1) * ratio * p_cur
            total += term
            scale = max(float(np.max(np.abs(total))), 1e-300)
            achieved = float(np.max(np.abs(term))) / scale
            if m > 0 and achieved < params.series_tolerance:
                below += 1
                if below >= 2:
                    break
            else:
                below = 0
            hr, hr_prev = (2 * m + 1) / x_r * hr - hr_prev, hr
            ha, ha_prev = (2 * m + 1) / x_a * ha - ha_prev, ha
            p_cur, p_prev = ((2 * m + 1) * cos_t * p_cur - m * p_prev) / (m + 1), p_cur
        else:
            raise SeriesConvergenceError(
                f"series not converged after {params.max_terms} terms "
                f"(achieved relative term {achieved:.3e}, "
                f"tolerance {params.series_tolerance:.3e})"
            )

    p = -x_r * np.exp(-1j * x_r) * total
    return complex(p[0]) if scalar else p


def sphere_dc_gain(params: SphereParams, theta_deg, r_m: float):
    """Zero-frequency limit of the surface pressure normalized by (k a)^2.

    The pressure vanishes like (k a)^2 as f -> 0; the limit of p/(k a)^2 is
    the real series sum_m ((2m+1)/(m+1)) (a/r)^m P_m(cos theta), which keeps
    the inter-microphone structure of the transfer functions at DC.
    """
    if r_m <= params.radius_m:
        raise ValueError("source distance must exceed the sphere radius")
    theta = np.atleast_1d(np.asarray(theta_deg, dtype=float))
    scalar = np.isscalar(theta_deg) or np.ndim(theta_deg) == 0
    cos_t = np.cos(np.deg2rad(theta))
    rho = params.radius_m / r_m

    p_prev = np.zeros_like(cos_t)
    p_cur = np.ones_like(cos_t)
    total = np.zeros(theta.shape)
    pow_rho = 1.0
    below = 0
    for m in range(params.max_terms + 1):
        term = (2 * m + 1) / (m + 1) * pow_rho * p_cur
        total += term
        scale = max(float(np.max(np.abs(total))), 1e-300)
        if m > 0 and float(np.max(np.abs(term))) / scale < params.series_tolerance:
            below += 1
            if below >= 2:
                break
        else:
            below = 0
        pow_rho *= rho
        p_cur, p_prev = ((2 * m + 1) * cos_t * p_cur - m * p_prev) / (m + 1), p_cur
    else:
        raise SeriesConvergenceError(
            f"DC series not converged after {params.max_terms} terms (a/r={rho:.4f})"
        )
    return float(total[0]) if scalar else total


def dvf(params: SphereParams, f_hz: float, theta_deg: float, d_near_m: float,
        d_far_m: float = FARFIELD_DISTANCE_M) -> complex:
    """Distance variation function: near over far surface pressure."""
    p_near = sphere_pressure(params, f_hz, theta_deg, d_near_m)
    p_far = sphere_pressure(params, f_hz, theta_deg, d_far_m)
    if abs(p_far) < 1e-300:
        raise ArithmeticError(
            f"far-field pressure underflow at f={f_hz} Hz, theta={theta_deg} deg"
        )
    return p_near / p_far


def dvf_ild(params: SphereParams, f_hz: float, source_azimuth_deg: float,
            d_near_m: float, d_far_m: float = FARFIELD_DISTANCE_M) -> float:
    """Linear power factor mapping a far-field ILD to its near-field value.

    Computed as |DVF_L|^2 / |DVF_R|^2 with each ear's DVF evaluated at the
    great-circle separation between the source azimuth and that ear (left ear
    at -ear_azimuth_deg, right ear at +ear_azimuth_deg).
    """
    theta_left = float(angular_separation_deg(source_azimuth_deg, -params.ear_azimuth_deg))
    theta_right = float(angular_separation_deg(source_azimuth_deg, params.ear_azimuth_deg))
    dvf_left = dvf(params, f_hz, theta_left, d_near_m, d_far_m)
    dvf_right = dvf(params, f_hz, theta_right, d_near_m, d_far_m)
    return abs(dvf_left) ** 2 / abs(dvf_right) ** 2


@dataclass(frozen=True)
class DvfTable:
    """Dense grid of ILD scaling factors over (frequency, azimuth, distance).

    ``values[i, j, k]`` is the linear power factor at ``freqs_hz[i]``,
    ``azimuths_deg[j]``, ``distances_m[k]``. Queries interpolate bilinearly
    in (frequency, azimuth) and require an exact distance match.
    """

    freqs_hz: np.ndarray
    azimuths_deg: np.ndarray
    distances_m: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        if self.values.shape != (len(self.freqs_hz), len(self.azimuths_deg),
                                 len(self.distances_m)):
            raise ValueError("table shape does not match its grids")
        if np.any(self.values <= 0):
            raise ValueError("ILD scaling factors must be positive")

    def _distance_index(self, distance_m: float) -> int:
        idx = np.nonzero(np.isclose(self.distances_m, distance_m, rtol=0, atol=1e-9))[0]
        if len(idx) == 0:
            raise TableRangeError(
                f"distance {distance_m} m not in table distances {list(self.distances_m)}"
            )
        return int(idx[0])

    def lookup(self, f_hz: float, azimuth_deg: float, distance_m: float) -> float:
        """Bilinear interpolation in (frequency, azimuth) at a table distance."""
        fs, azs = self.freqs_hz, self.azimuths_deg
        if not (fs[0] - 1e-9 <= f_hz <= fs[-1] + 1e-9):
            raise TableRangeError(f"frequency {f_hz} Hz outside table [{fs[0]}, {fs[-1]}]")
        if not (azs[0] - 1e-9 <= azimuth_deg <= azs[-1] + 1e-9):
            raise TableRangeError(
                f"azimuth {azimuth_deg} deg outside table [{azs[0]}, {azs[-1]}]"
            )
        kd = self._distance_index(distance_m)
        plane = self.values[:, :, kd]

        fi = int(np.clip(np.searchsorted(fs, f_hz) - 1, 0, max(len(fs) - 2, 0)))
        ai = int(np.clip(np.searchsorted(azs, azimuth_deg) - 1, 0, max(len(azs) - 2, 0)))
        if len(fs) == 1:
            wf = 0.0
            fi2 = fi
        else:
            wf = (f_hz - fs[fi]) / (fs[fi + 1] - fs[fi])
            fi2 = fi + 1
        if len(azs) == 1:
            wa = 0.0
            ai2 = ai
        else:
            wa = (azimuth_deg - azs[ai]) / (azs[ai + 1] - azs[ai])
            ai2 = ai + 1
        wf = float(np.clip(wf, 0.0, 1.0))
        wa = float(np.clip(wa, 0.0, 1.0))
        v00, v01 = plane[fi, ai], plane[fi, ai2]
        v10, v11 = plane[fi2, ai], plane[fi2, ai2]
        return float((1 - wf) * ((1 - wa) * v00 + wa * v01)
                     + wf * ((1 - wa) * v10 + wa * v11))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["f_hz", "azimuth_deg", "distance_m", "c_linear", "c_db"])
            for i, f in enumerate(self.freqs_hz):
                for j, az in enumerate(self.azimuths_deg):
                    for k, d in enumerate(self.distances_m):
                        c = self.values[i, j, k]
                        writer.writerow([f"{f:.17g}", f"{az:.17g}", f"{d:.17g}",
                                         f"{c:.17g}", f"{10.0 * np.log10(c):.17g}"])

    @classmethod
    def from_csv(cls, path) -> "DvfTable":
        rows = []
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            for row in reader:
                rows.append((float(row["f_hz"]), float(row["azimuth_deg"]),
                             float(row["distance_m"]), float(row["c_linear"])))
        if not rows:
            raise ValueError(f"empty DVF table file: {path}")
        freqs = np.array(sorted({r[0] for r in rows}))
        azs = np.array(sorted({r[1] for r in rows}))
        dists = np.array(sorted({r[2] for r in rows}))
        values = np.full((len(freqs), len(azs), len(dists)), np.nan)
        for f, az, d, c in rows:
            values[np.searchsorted(freqs, f), np.searchsorted(azs, az),
                   np.searchsorted(dists, d)] = c
        if np.any(np.isnan(values)):
            raise ValueError(f"DVF table file is not a dense grid: {path}")
        return cls(freqs, azs, dists, values)


def dvf_ild_table(params: SphereParams, freqs_hz, azimuths_deg, distances_m,
                  d_far_m: float = FARFIELD_DISTANCE_M) -> DvfTable:
    """Tabulate ``dvf_ild`` on a dense (frequency, azimuth, distance) grid."""
    freqs = np.sort(np.asarray(freqs_hz, dtype=float))
    azs = np.sort(np.asarray(azimuths_deg, dtype=float))
    dists = np.sort(np.asarray(distances_m, dtype=float))
    if len(freqs) == 0 or len(azs) == 0 or len(dists) == 0:
        raise ValueError("table grids must be non-empty")
    if freqs[0] <= 0:
        raise ValueError("table frequencies must be positive")
    if freqs[-1] > MAX_TABLE_FREQ_HZ:
        raise TableRangeError(
            f"table frequencies capped at {MAX_TABLE_FREQ_HZ} Hz, got {freqs[-1]}"
        )
    values = np.empty((len(freqs), len(azs), len(dists)))
    for i, f in enumerate(freqs):
        for j, az in enumerate(azs):
            for k, d in enumerate(dists):
                values[i, j, k] = dvf_ild(params, f, az, d, d_far_m)
    return DvfTable(freqs, azs, dists, values)
