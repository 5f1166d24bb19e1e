"""Interaural cue metrics and noise-power reporting.

Per bin and per source, the interaural transfer function (ITF) is the
complex ratio of the left-ear quantity to the right-ear quantity; its
squared magnitude is the interaural level difference (ILD), its angle the
interaural phase difference (IPD) and its angle over angular frequency the
interaural time difference (ITD). Errors compare the filtered output cue
against the (possibly scaled) input cue; lower-band summaries average the
raw errors over included bins and convert the mean to dB.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .beamform import StackedFilter
from .scene import AtfSet

DB_FLOOR = -300.0
DENOM_GUARD = 1e-300


def wrap_phase(x):
    """Wrap angles (radians) to (-pi, pi]."""
    m = np.mod(np.asarray(x, dtype=float), 2.0 * np.pi)
    return np.where(m > np.pi, m - 2.0 * np.pi, m)


def itf(left, right):
    """Interaural transfer function with an undefined-cue mask.

    Returns ``(ratio, valid)``; bins whose denominator magnitude falls
    below the guard are flagged invalid and carry NaN. Scalars in,
    scalars out.
    """
    scalar = np.ndim(left) == 0 and np.ndim(right) == 0
    left_b, right_b = np.broadcast_arrays(np.asarray(left, dtype=complex),
                                          np.asarray(right, dtype=complex))
    left_b, right_b = np.atleast_1d(left_b), np.atleast_1d(right_b)
    valid = np.abs(right_b) > DENOM_GUARD
    ratio = np.full(left_b.shape, np.nan + 0j)
    ratio[valid] = left_b[valid] / right_b[valid]
    if scalar:
        return complex(ratio[0]), bool(valid[0])
    return ratio, valid


def ild_err(itf_out, itf_in, c=1.0):
    """| |ITF_out|^2 - c |ITF_in|^2 | (c = 1 for the target)."""
    return np.abs(np.abs(itf_out) ** 2 - np.asarray(c) * np.abs(itf_in) ** 2)


def ipd_err(itf_out, itf_in):
    """Normalized interaural phase error in [0, 1].

    The raw phase difference is wrapped to (-pi, pi] before taking the
    absolute value; division by pi maps a diametrically opposite phase
    to exactly 1.
    """
    delta = np.angle(np.asarray(itf_out)) - np.angle(np.asarray(itf_in))
    return np.abs(wrap_phase(delta)) / np.pi


def itd_from_itf(itf_values, freqs_hz):
    """ITD per bin (seconds); NaN at non-positive frequencies."""
    freqs = np.asarray(freqs_hz, dtype=float)
    out = np.full(np.shape(itf_values), np.nan)
    pos = freqs > 0
    out[..., pos] = np.angle(np.asarray(itf_values)[..., pos]) \
        / (2.0 * np.pi * freqs[pos])
    return out


@dataclass(frozen=True)
class SourceCues:
    """Input and output ITFs for one source across bins."""

    name: str
    itf_in: np.ndarray
    itf_out: np.ndarray
    valid: np.ndarray            # both input and output cues defined

    @property
    def ild_in(self):
        return np.abs(self.itf_in) ** 2

    @property
    def ild_out(self):
        return np.abs(self.itf_out) ** 2

    @property
    def ipd_in(self):
        return wrap_phase(np.angle(self.itf_in))

    @property
    def ipd_out(self):
        return wrap_phase(np.angle(self.itf_out))


def compute_cues(filt: StackedFilter, atfs: AtfSet) -> dict:
    """Per-source input/output cues under a stacked filter."""
    m = atfs.n_mics
    names = ["target"] + [f"interferer_{i + 1}"
                          for i in range(atfs.n_interferers)]
    vectors = np.concatenate([atfs.target[None], atfs.interferers], axis=0)
    out = {}
    for name, vecs in zip(names, vectors):
        num_in = vecs[:, atfs.left_ref]
        den_in = vecs[:, atfs.right_ref]
        itf_in, ok_in = itf(num_in, den_in)
        num_out = np.einsum("km,km->k", filt.w[:, :m].conj(), vecs)
        den_out = np.einsum("km,km->k", filt.w[:, m:].conj(), vecs)
        itf_out, ok_out = itf(num_out, den_out)
        out[name] = SourceCues(name, itf_in, itf_out, ok_in & ok_out)
    return out


@dataclass(frozen=True)
class ReportRow:
    method: str
    source: str
    band: str
    metric: str
    value_db: float
    bins_included: int
    bins_excluded: int


@dataclass
class ErrorReport:
    rows: list = field(default_factory=list)

    def add(self, *args):
        self.rows.append(ReportRow(*args))

    def value(self, source: str, metric: str, band: str = "lower") -> float:
        for row in self.rows:
            if (row.source, row.metric, row.band) == (source, metric, band):
                return row.value_db
        raise KeyError(f"no report row for {source}/{metric}/{band}")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["method", "source", "band", "metric", "value_db",
                             "bins_included", "bins_excluded"])
            for row in self.rows:
                writer.writerow([row.method, row.source, row.band, row.metric,
                                 f"{row.value_db:.12e}", row.bins_included,
                                 row.bins_excluded])


def mean_db(errors: np.ndarray) -> float:
    """10 log10 of the mean error, floored at -300 dB for exact zeros."""
    mean = float(np.mean(errors)) if len(errors) else np.nan
    if not np.isfinite(mean):
        return np.nan
    if mean <= 10.0 ** (DB_FLOOR / 10.0):
        return DB_FLOOR
    return 10.0 * np.log10(mean)


def lower_band_summary(method: str, cues: dict, freqs_hz, statuses,
                       cutoff_hz: float, targets=None) -> ErrorReport:
    """Mean lower-band cue errors in dB, per source.

    Included bins have 0 < f < cutoff, a non-fallback filter status and
    defined cues; the excluded count is reported per source. ``targets``
    optionally maps interferer index to a per-bin ILD scaling array (the
    enhancement the method aimed for); the target source always compares
    at unit scaling.
    """
    freqs = np.asarray(freqs_hz, dtype=float)
    in_band = (freqs > 0) & (freqs < cutoff_hz)
    in_band[-1] = False
    solved = np.array([s in ("solved", "bmvdr", "jblcmv", "sdp")
                       for s in statuses])
    report = ErrorReport()
    for idx, (name, cue) in enumerate(cues.items()):
        include = in_band & solved & cue.valid
        excluded = int(np.sum(in_band & ~include))
        if not np.any(include):
            report.add(method, name, "lower", "empty", np.nan, 0, excluded)
            continue
        if name == "target" or targets is None:
            c = 1.0
        else:
            c = np.asarray(targets[idx - 1])[include]
        ild = ild_err(cue.itf_out[include], cue.itf_in[include], c)
        ipd = ipd_err(cue.itf_out[include], cue.itf_in[include])
        n_inc = int(np.sum(include))
        report.add(method, name, "lower", "ild_err", mean_db(ild), n_inc,
                   excluded)
        report.add(method, name, "lower", "ipd_err", mean_db(ipd), n_inc,
                   excluded)
    return report


@dataclass(frozen=True)
class NoisePower:
    """Output noise power relative to the reference-microphone input."""

    per_bin_out: np.ndarray      # (K,) summed over both ears
    per_bin_in: np.ndarray       # (K,) summed over both reference mics
    total_db: float
    lower_db: float


def output_noise_power(filt: StackedFilter, noise_frames: np.ndarray,
                       left_ref: int, right_ref: int,
                       cutoff_hz: float | None = None) -> NoisePower:
    """Measured noise power through the filter, relative to the unprocessed
    reference microphones.

    ``noise_frames`` are (n_bins, n_frames, M) noise-only STFT frames
    (ideal-VAD ground truth). A pass-through filter scores exactly 0 dB.
    Being a sample estimate, values carry the usual statistical spread;
    for design-covariance comparisons use :func:`expected_noise_power`.
    """
    from .beamform import apply_filter

    out_l, out_r = apply_filter(filt, noise_frames)
    per_bin_out = np.mean(np.abs(out_l) ** 2 + np.abs(out_r) ** 2, axis=1)
    ref = noise_frames[:, :, (left_ref, right_ref)]
    per_bin_in = np.mean(np.sum(np.abs(ref) ** 2, axis=2), axis=1)
    total_db = 10.0 * np.log10(per_bin_out.sum() / per_bin_in.sum())
    if cutoff_hz is None:
        lower_db = total_db
    else:
        sel = (filt.freqs_hz > 0) & (filt.freqs_hz < cutoff_hz)
        lower_db = 10.0 * np.log10(per_bin_out[sel].sum()
                                   / per_bin_in[sel].sum())
    return NoisePower(per_bin_out, per_bin_in, float(total_db), float(lower_db))


def expected_noise_power(filt: StackedFilter, noise_cpsds: np.ndarray,
                         left_ref: int, right_ref: int,
                         cutoff_hz: float | None = None) -> NoisePower:
    """Noise power under the design covariance: per bin, w^H P-tilde w
    against the reference-microphone diagonal of P.

    This is the quantity the beamformer optimality orderings govern
    exactly; sample estimates fluctuate around it.
    """
    m = filt.n_mics
    w_l, w_r = filt.w[:, :m], filt.w[:, m:]
    per_bin_out = np.real(
        np.einsum("km,kmn,kn->k", w_l.conj(), noise_cpsds, w_l)
        + np.einsum("km,kmn,kn->k", w_r.conj(), noise_cpsds, w_r))
    per_bin_in = np.real(noise_cpsds[:, left_ref, left_ref]
                         + noise_cpsds[:, right_ref, right_ref])
    total_db = 10.0 * np.log10(per_bin_out.sum() / per_bin_in.sum())
    if cutoff_hz is None:
        lower_db = total_db
    else:
        sel = (filt.freqs_hz > 0) & (filt.freqs_hz < cutoff_hz)
        lower_db = 10.0 * np.log10(per_bin_out[sel].sum()
                                   / per_bin_in[sel].sum())
    return NoisePower(per_bin_out, per_bin_in, float(total_db), float(lower_db))
