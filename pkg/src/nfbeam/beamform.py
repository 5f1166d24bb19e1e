"""Binaural beamformers.

Three per-bin filter families over the stacked left/right weight vector
w = [w_L; w_R] of length 2M:

* the noise-optimal distortionless filter (closed form; collapses every
  interferer onto the target's interaural cues),
* the cue-preserving linearly constrained filter, which adds one equality
  per interferer pinning its interaural transfer function, and
* the low-frequency ILD enhancer, the semidefinite relaxation from
  :mod:`nfbeam.sdp` that replaces the cue equalities below the cut-off with
  quadratic ILD-scaling constraints.

``band_split`` assembles the composite filter the pipeline ships: the
enhancer below the cut-off frequency, the cue-preserving filter above it
and at the DC/Nyquist bins (whose spectra are real, making the complex
ILD machinery ill-posed there), with a per-bin fallback to the
cue-preserving filter whenever the relaxation fails to certify rank 1.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.linalg import qr

from . import sdp, sphere
from .scene import AtfSet, CpsdSet, Scene

CPSD_REG_EPS = 1e-8


class ConstraintDegeneracyError(ValueError):
    """Constraint matrix lost column rank (colinear steering vectors)."""


@dataclass(frozen=True)
class StackedFilter:
    """Per-bin stacked filters with a per-bin provenance tag.

    ``status[k]`` is one of ``bmvdr``, ``jblcmv``, ``sdp`` (certified
    rank-1 enhancement) or ``fallback`` (enhancement failed, cue-preserving
    filter substituted).
    """

    freqs_hz: np.ndarray
    w: np.ndarray                # (K, 2M) complex
    method: str
    status: tuple

    @property
    def n_bins(self) -> int:
        return len(self.freqs_hz)

    @property
    def n_mics(self) -> int:
        return self.w.shape[1] // 2

    def left(self, k: int) -> np.ndarray:
        return self.w[k, : self.n_mics]

    def right(self, k: int) -> np.ndarray:
        return self.w[k, self.n_mics:]


@dataclass(frozen=True)
class ConstraintSet:
    """Equality constraints w^H lam = f_row for one bin."""

    lam: np.ndarray              # (2M, 2 + r)
    f_row: np.ndarray            # (2 + r,)


def regularize_cpsd(p: np.ndarray, eps: float = CPSD_REG_EPS) -> np.ndarray:
    """Hermitian part plus a small trace-scaled diagonal load."""
    p = np.asarray(p, dtype=complex)
    herm = 0.5 * (p + p.conj().T)
    m = p.shape[0]
    return herm + eps * np.real(np.trace(herm)) / m * np.eye(m)


def bmvdr(p_noise: np.ndarray, a: np.ndarray, a_l: complex,
          a_r: complex) -> np.ndarray:
    """Noise-optimal distortionless binaural filter (closed form)."""
    a = np.asarray(a, dtype=complex)
    if not np.any(np.abs(a) > 0):
        raise ValueError("target steering vector is zero")
    p_reg = regularize_cpsd(p_noise)
    x = np.linalg.solve(p_reg, a)
    denom = np.real(a.conj() @ x)
    if denom <= 0:
        raise np.linalg.LinAlgError("noise CPSD is not positive definite")
    return np.concatenate([x * np.conj(a_l), x * np.conj(a_r)]) / denom


def build_constraints(a: np.ndarray, a_l: complex, a_r: complex,
                      interferers, left_ref: int, right_ref: int) -> ConstraintSet:
    """Target distortionless plus one cue-preservation column per interferer."""
    a = np.asarray(a, dtype=complex)
    m = len(a)
    cols = [np.concatenate([a, np.zeros(m)]),
            np.concatenate([np.zeros(m), a])]
    values = [a_l, a_r]
    for b in interferers:
        b = np.asarray(b, dtype=complex)
        cols.append(np.concatenate([b * b[right_ref], -b * b[left_ref]]))
        values.append(0.0)
    return ConstraintSet(np.array(cols).T, np.array(values, dtype=complex))


def jblcmv(p_noise: np.ndarray, constraints: ConstraintSet) -> np.ndarray:
    """Cue-preserving linearly constrained filter.

    Solves min w^H P-tilde w subject to w^H lam = f_row; requires
    2 + r <= 2M and a full-column-rank constraint matrix.
    """
    lam, f_row = constraints.lam, constraints.f_row
    two_m, n_cons = lam.shape
    if n_cons > two_m:
        raise ConstraintDegeneracyError(
            f"{n_cons} constraints exceed the {two_m} degrees of freedom")
    _, r_fac, piv = qr(lam, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r_fac))
    rank = int(np.sum(diag > max(diag) * 1e-10)) if diag.size else 0
    if rank < n_cons:
        offenders = sorted(int(j) for j in piv[rank:])
        raise ConstraintDegeneracyError(
            f"constraint matrix is rank deficient; offending columns {offenders}")
    p_tilde = sdp.stack_blockdiag(regularize_cpsd(p_noise))
    x = np.linalg.solve(p_tilde, lam)
    gram = lam.conj().T @ x
    return x @ np.linalg.solve(gram, f_row.conj())


def ild_enhancing(p_noise: np.ndarray, a: np.ndarray, a_l: complex, a_r: complex,
                  interferers, cs, left_ref: int, right_ref: int,
                  variant: str = "problem3",
                  rank1_threshold: float = sdp.RANK1_RATIO_TOL):
    """Low-frequency ILD-enhancing filter for one bin.

    Returns ``(w, solution)`` where ``w`` is the extracted filter when the
    relaxation certifies a rank-1 lifted matrix and ``None`` otherwise;
    ``solution`` carries the solver diagnostics either way.
    """
    problem = sdp.build_problem(regularize_cpsd(p_noise), a, a_l, a_r,
                                interferers, cs, left_ref, right_ref, variant)
    solution = sdp.solve(problem)
    if not sdp.is_certified(solution, ratio_tol=rank1_threshold):
        return None, solution
    return solution.w, solution


def enhancement_targets(scene: Scene, atfs: AtfSet,
                        enhancement_distance: float | None,
                        dvf_table: sphere.DvfTable | None = None,
                        sphere_params: sphere.SphereParams | None = None) -> np.ndarray:
    """Per-(interferer, bin) ILD scaling factors the composite filter aims at.

    Natural operation (``enhancement_distance`` None or 1 m reference) keeps
    every factor at 1; otherwise factors come from the near-field table at
    the enhancement distance for bins inside the enhancement band. Bins
    outside the band preserve cues, so their factor is 1 by definition.
    """
    freqs = atfs.freqs_hz
    cs = np.ones((scene.n_interferers, len(freqs)))
    if enhancement_distance is None:
        return cs
    params = sphere_params or scene.sphere_params()
    lower = [k for k in range(1, len(freqs) - 1) if freqs[k] < scene.cutoff_hz]
    if not lower or not scene.n_interferers:
        return cs
    if dvf_table is None:
        azimuths = sorted({src.azimuth_deg for src in scene.interferers})
        dvf_table = sphere.dvf_ild_table(
            params, freqs_hz=[freqs[k] for k in lower], azimuths_deg=azimuths,
            distances_m=[enhancement_distance])
    for i, src in enumerate(scene.interferers):
        for k in lower:
            cs[i, k] = dvf_table.lookup(freqs[k], src.azimuth_deg,
                                        enhancement_distance)
    return cs


def band_split(scene: Scene, atfs: AtfSet, cpsds: CpsdSet,
               enhancement_distance: float | None = None,
               variant: str = "problem3",
               dvf_table: sphere.DvfTable | None = None,
               sphere_params: sphere.SphereParams | None = None,
               rank1_threshold: float = sdp.RANK1_RATIO_TOL,
               collect_diagnostics: bool = False):
    """Composite filter: ILD enhancement below the cut-off, cue preservation
    above it.

    ``enhancement_distance`` of None means natural operation (unit scaling,
    the 1 m reference). A bin-level status tuple is always returned inside
    the filter; with ``collect_diagnostics`` a list of per-bin solver
    records for the enhancement band is returned alongside.
    """
    freqs = atfs.freqs_hz
    n_bins = len(freqs)
    m = atfs.n_mics
    lref, rref = atfs.left_ref, atfs.right_ref
    cs = enhancement_targets(scene, atfs, enhancement_distance, dvf_table,
                             sphere_params)

    w_all = np.zeros((n_bins, 2 * m), dtype=complex)
    status = []
    diagnostics = []
    for k in range(n_bins):
        a = atfs.target[k]
        a_l, a_r = a[lref], a[rref]
        interferers = [atfs.interferers[i, k] for i in range(atfs.n_interferers)]
        constraints = build_constraints(a, a_l, a_r, interferers, lref, rref)
        in_band = 0 < k < n_bins - 1 and freqs[k] < scene.cutoff_hz
        if not in_band:
            w_all[k] = jblcmv(cpsds.noise[k], constraints)
            status.append("jblcmv")
            continue
        w, solution = ild_enhancing(cpsds.noise[k], a, a_l, a_r, interferers,
                                    cs[:, k], lref, rref, variant,
                                    rank1_threshold)
        if collect_diagnostics:
            diagnostics.append(dict(bin=k, f_hz=float(freqs[k]),
                                    objective=solution.objective,
                                    rank1_gap=solution.rank1_gap,
                                    status=solution.status,
                                    iterations=solution.iterations))
        if w is None:
            w_all[k] = jblcmv(cpsds.noise[k], constraints)
            status.append("fallback")
        else:
            w_all[k] = w
            status.append("sdp")
    method = ("ild_natural" if enhancement_distance is None
              else f"ild_{enhancement_distance:g}")
    filt = StackedFilter(freqs, w_all, method, tuple(status))
    return (filt, diagnostics) if collect_diagnostics else filt


def bmvdr_filter(atfs: AtfSet, cpsds: CpsdSet) -> StackedFilter:
    """Noise-optimal filter at every bin."""
    w_all = np.zeros((atfs.n_bins, 2 * atfs.n_mics), dtype=complex)
    for k in range(atfs.n_bins):
        a = atfs.target[k]
        w_all[k] = bmvdr(cpsds.noise[k], a, a[atfs.left_ref], a[atfs.right_ref])
    return StackedFilter(atfs.freqs_hz, w_all, "bmvdr",
                         tuple(["bmvdr"] * atfs.n_bins))


def jblcmv_filter(atfs: AtfSet, cpsds: CpsdSet) -> StackedFilter:
    """Cue-preserving filter at every bin."""
    w_all = np.zeros((atfs.n_bins, 2 * atfs.n_mics), dtype=complex)
    for k in range(atfs.n_bins):
        a = atfs.target[k]
        interferers = [atfs.interferers[i, k]
                       for i in range(atfs.n_interferers)]
        constraints = build_constraints(a, a[atfs.left_ref], a[atfs.right_ref],
                                        interferers, atfs.left_ref, atfs.right_ref)
        w_all[k] = jblcmv(cpsds.noise[k], constraints)
    return StackedFilter(atfs.freqs_hz, w_all, "jblcmv",
                         tuple(["jblcmv"] * atfs.n_bins))


def apply_filter(filt: StackedFilter, frames: np.ndarray):
    """Per-bin inner products producing the binaural output frames.

    ``frames`` is (n_bins, n_frames, M); returns the pair of (n_bins,
    n_frames) left and right outputs, out(k, l) = w(k)^H y(k, l).
    """
    frames = np.asarray(frames)
    if frames.ndim != 3 or frames.shape[0] != filt.n_bins \
            or frames.shape[2] != filt.n_mics:
        raise ValueError(
            f"frames shape {frames.shape} does not match filter "
            f"({filt.n_bins} bins, {filt.n_mics} mics)")
    m = filt.n_mics
    out_l = np.einsum("km,klm->kl", filt.w[:, :m].conj(), frames)
    out_r = np.einsum("km,klm->kl", filt.w[:, m:].conj(), frames)
    return out_l, out_r


def filter_to_csv(filt: StackedFilter, path) -> None:
    """Rows (bin, side, mic_index, re, im, method, status)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin", "side", "mic_index", "re_linear", "im_linear",
                         "method", "status"])
        m = filt.n_mics
        for k in range(filt.n_bins):
            for side, offset in (("L", 0), ("R", m)):
                for j in range(m):
                    v = filt.w[k, offset + j]
                    writer.writerow([k, side, j, f"{v.real:.17g}",
                                     f"{v.imag:.17g}", filt.method,
                                     filt.status[k]])


def filter_from_csv(path, freqs_hz) -> StackedFilter:
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append((int(row["bin"]), row["side"], int(row["mic_index"]),
                         float(row["re_linear"]), float(row["im_linear"]),
                         row["method"], row["status"]))
    if not rows:
        raise ValueError(f"empty filter file: {path}")
    n_bins = max(r[0] for r in rows) + 1
    m = max(r[2] for r in rows) + 1
    if n_bins != len(freqs_hz):
        raise ValueError(f"filter spans {n_bins} bins, expected {len(freqs_hz)}")
    w = np.zeros((n_bins, 2 * m), dtype=complex)
    status = [""] * n_bins
    method = rows[0][5]
    for k, side, j, re, im, _, st in rows:
        offset = 0 if side == "L" else m
        w[k, offset + j] = re + 1j * im
        status[k] = st
    return StackedFilter(np.asarray(freqs_hz, dtype=float), w, method,
                         tuple(status))
