"""Acceptance suite.

One test per acceptance criterion, each printing a PASS/FAIL line with the
measured figure (run with ``pytest tests/test_acceptance.py -v -s`` to see
them). Criteria 3, 4 and 7 share one scene run; criterion 9 replays the
CLI pipeline twice and compares bytes.
"""

import csv
import hashlib
import time
from pathlib import Path

import numpy as np
import pytest

from nfbeam import beamform, cli, metrics, scene, sdp, sphere, stft

CONFIG = Path(__file__).resolve().parent.parent / "configs" / "paper_scene.yaml"


def report(criterion, ok, detail):
    state = "PASS" if ok else "FAIL"
    print(f"[criterion {criterion}] {state}: {detail}")
    assert ok, f"criterion {criterion}: {detail}"


@pytest.fixture(scope="module")
def paper_run():
    """Shared scene run for criteria 3, 4, 6 and 7: frontal target, four
    interferers at +/-20 and +/-40 degrees, M = 4, oracle noise CPSDs."""
    sources = [scene.SourceSpec("target", 0.0, 1.0, "harmonic:210")]
    for az in (-20.0, 20.0, -40.0, 40.0):
        sources.append(scene.SourceSpec("interferer", az, 1.0, "noise"))
    sc = scene.Scene(scene.MicArrayConfig.bte_pair(4), tuple(sources))
    atfs = scene.build_atfs(sc)
    cpsds = scene.scene_oracle_cpsd(sc, atfs)
    t0 = time.time()
    filters = {
        "bmvdr": beamform.bmvdr_filter(atfs, cpsds),
        "jblcmv": beamform.jblcmv_filter(atfs, cpsds),
        "ild_1.0": beamform.band_split(sc, atfs, cpsds, 1.0),
        "ild_0.2": beamform.band_split(sc, atfs, cpsds, 0.2),
    }
    elapsed = time.time() - t0
    return sc, atfs, cpsds, filters, elapsed


def test_criterion_1_dvf_ild_reproduction():
    t0 = time.time()
    params = sphere.SphereParams()
    freqs = np.arange(62.5, 800.0 + 1e-9, 62.5)
    azimuths = np.arange(-90.0, 90.0 + 1e-9, 5.0)
    distances = [0.2, 0.4, 0.6, 0.8, 1.0]
    table = sphere.dvf_ild_table(params, freqs, azimuths, distances)
    elapsed = time.time() - t0

    farfield_exact = bool(np.all(table.values[:, :, -1] == 1.0))
    db = 10.0 * np.log10(table.values[:, :, 0])     # 0.2 m slice
    peak_idx = np.unravel_index(np.argmax(np.abs(db)), db.shape)
    peak_db = abs(db[peak_idx])
    peak_az = abs(table.azimuths_deg[peak_idx[1]])
    ok = (farfield_exact and 6.0 <= peak_db <= 10.0 and peak_az == 90.0
          and elapsed < 10.0)
    report(1, ok, f"1.0 m exactly 0 dB: {farfield_exact}; peak at 0.2 m = "
                  f"{peak_db:.2f} dB at +/-{peak_az:.0f} deg "
                  f"(target 8 +/- 2); {elapsed:.1f} s")


def test_criterion_2_cutoff_monotonicity():
    t0 = time.time()
    params = sphere.SphereParams()
    azimuths = np.arange(-90.0, 90.0 + 1e-9, 5.0)
    all_monotone = True
    for d in (0.3, 0.4, 0.5, 0.6):
        ilds = []
        for az in azimuths:
            th_l = float(sphere.angular_separation_deg(az, -100.0))
            th_r = float(sphere.angular_separation_deg(az, 100.0))
            p_l = sphere.sphere_pressure(params, 800.0, th_l, d)
            p_r = sphere.sphere_pressure(params, 800.0, th_r, d)
            ilds.append(10 * np.log10(abs(p_l) ** 2 / abs(p_r) ** 2))
        diffs = np.diff(ilds)
        all_monotone &= bool(np.all(diffs < 0) or np.all(diffs > 0))
    elapsed = time.time() - t0
    ok = all_monotone and elapsed < 10.0
    report(2, ok, f"ILD vs azimuth strictly monotone at 800 Hz for "
                  f"0.3-0.6 m: {all_monotone}; {elapsed:.1f} s")


def test_criterion_3_cue_preservation(paper_run):
    sc, atfs, cpsds, filters, build_s = paper_run
    t0 = time.time()
    filt = filters["jblcmv"]
    cues = metrics.compute_cues(filt, atfs)
    summary = metrics.lower_band_summary("jblcmv", cues, atfs.freqs_hz,
                                         filt.status, sc.cutoff_hz)
    worst_ild = max(summary.value(f"interferer_{i}", "ild_err")
                    for i in range(1, 5))
    worst_ipd = max(summary.value(f"interferer_{i}", "ipd_err")
                    for i in range(1, 5))
    elapsed = build_s + time.time() - t0
    ok = worst_ild < -100.0 and worst_ipd < -100.0 and elapsed < 60.0
    report(3, ok, f"worst interferer mean errors: ILD {worst_ild:.1f} dB, "
                  f"IPD {worst_ipd:.1f} dB (need < -100); {elapsed:.1f} s")


def test_criterion_4_target_distortionless(paper_run):
    sc, atfs, cpsds, filters, _ = paper_run
    worst = 0.0
    m = atfs.n_mics
    for filt in filters.values():
        for k in range(atfs.n_bins):
            a = atfs.target[k]
            a_l, a_r = a[atfs.left_ref], a[atfs.right_ref]
            worst = max(worst,
                        abs(filt.w[k, :m].conj() @ a - a_l) / abs(a_l),
                        abs(filt.w[k, m:].conj() @ a - a_r) / abs(a_r))
    ok = worst <= 1e-6
    report(4, ok, f"worst distortionless residual over every method and "
                  f"bin: {worst:.2e} (need <= 1e-6)")


def test_criterion_5_relaxation_sandwich():
    t0 = time.time()
    rng = np.random.default_rng(2024)
    m, lref, rref = 2, 1, 0
    n_instances = 201
    slack = 1e-6
    failures = []
    for i in range(n_instances):
        g = rng.standard_normal((m, m)) + 1j * rng.standard_normal((m, m))
        p_noise = g @ g.conj().T + 0.1 * np.eye(m)
        a = rng.standard_normal(m) + 1j * rng.standard_normal(m)
        b = rng.standard_normal(m) + 1j * rng.standard_normal(m)
        c = (0.5, 1.0, 2.0)[i % 3]
        p2 = sdp.solve(sdp.build_problem(p_noise, a, a[lref], a[rref], [b],
                                         [c], lref, rref, "problem2"))
        p3 = sdp.solve(sdp.build_problem(p_noise, a, a[lref], a[rref], [b],
                                         [c], lref, rref, "problem3"))
        oracle = sdp.qcqp_oracle(p_noise, a, a[lref], a[rref], [b], [c],
                                 lref, rref)
        ok = (p2.status == "solved" and p3.status == "solved"
              and oracle.status == "ok"
              and p2.objective <= p3.objective + slack
              and p3.objective <= oracle.objective + slack)
        if c == 1.0 and ok:
            w_b = beamform.bmvdr(p_noise, a, a[lref], a[rref])
            cons = beamform.build_constraints(a, a[lref], a[rref], [b],
                                              lref, rref)
            w_j = beamform.jblcmv(p_noise, cons)
            p_tilde = sdp.stack_blockdiag(p_noise)
            obj_b = float(np.real(w_b.conj() @ p_tilde @ w_b))
            obj_j = float(np.real(w_j.conj() @ p_tilde @ w_j))
            ok = (obj_b - slack <= p2.objective
                  and p3.objective <= obj_j + slack
                  and oracle.objective <= obj_j + slack)
        if not ok:
            failures.append(i)
    elapsed = time.time() - t0
    ok = not failures and elapsed < 300.0
    report(5, ok, f"{n_instances - len(failures)}/{n_instances} random "
                  f"instances satisfy the bound ordering at {slack} slack; "
                  f"{elapsed:.0f} s")


def test_criterion_6_rank1_recovery(paper_run):
    sc, atfs, cpsds, filters, _ = paper_run
    t0 = time.time()
    filt = filters["ild_0.2"]
    lower = [k for k in range(1, atfs.n_bins - 1)
             if atfs.freqs_hz[k] < sc.cutoff_hz]
    certified = [k for k in lower if filt.status[k] == "sdp"]
    fraction = len(certified) / len(lower)

    targets = beamform.enhancement_targets(sc, atfs, 0.2)
    m = atfs.n_mics
    worst_dev = 0.0
    for k in certified:
        for i in range(atfs.n_interferers):
            b = atfs.interferers[i, k]
            itf_out = (filt.w[k, :m].conj() @ b) / (filt.w[k, m:].conj() @ b)
            itf_in = b[atfs.left_ref] / b[atfs.right_ref]
            dev = abs(10 * np.log10(abs(itf_out) ** 2)
                      - 10 * np.log10(targets[i, k] * abs(itf_in) ** 2))
            worst_dev = max(worst_dev, dev)
    elapsed = time.time() - t0
    ok = fraction >= 0.7 and worst_dev <= 0.1 and elapsed < 300.0
    report(6, ok, f"rank-1 certified on {len(certified)}/{len(lower)} "
                  f"enhancement-band bins ({100 * fraction:.0f}%, need >= 70%); "
                  f"worst enhanced-ILD deviation {worst_dev:.2e} dB "
                  f"(need <= 0.1)")


def test_criterion_7_noise_power_ordering(paper_run):
    sc, atfs, cpsds, filters, _ = paper_run
    powers = {}
    for name in ("bmvdr", "ild_1.0", "jblcmv"):
        powers[name] = metrics.expected_noise_power(
            filters[name], cpsds.noise, atfs.left_ref, atfs.right_ref,
            sc.cutoff_hz).per_bin_out
    lower = (atfs.freqs_hz > 0) & (atfs.freqs_hz < sc.cutoff_hz)
    b = powers["bmvdr"][lower]
    n = powers["ild_1.0"][lower]
    j = powers["jblcmv"][lower]
    ok_bn = bool(np.all(b <= n + 1e-6))
    ok_nj = bool(np.all(n <= j + 1e-6))
    worst = max(float(np.max(b - n)), float(np.max(n - j)))
    ok = ok_bn and ok_nj
    report(7, ok, "per lower-band bin output noise power "
                  f"bmvdr <= ild_1.0 <= jblcmv within 1e-6: {ok_bn and ok_nj} "
                  f"(worst violation {worst:.2e})")


def test_criterion_8_stft_round_trip():
    t0 = time.time()
    cfg = stft.StftConfig()
    rng = np.random.default_rng(8)
    noise_sig = rng.standard_normal(16000)
    t = np.arange(16000) / cfg.sample_rate
    tone_sig = np.sin(2 * np.pi * 1000.0 * t)
    worst = -np.inf
    for x in (noise_sig, tone_sig):
        out = stft.synthesize(cfg, stft.analyze(cfg, x))
        sl = stft.interior_slice(cfg, len(out))
        err_db = 10 * np.log10(np.sum((out[sl] - x[sl]) ** 2)
                               / np.sum(x[sl] ** 2))
        worst = max(worst, err_db)
    elapsed = time.time() - t0
    ok = worst < -80.0 and elapsed < 10.0
    report(8, ok, f"worst interior reconstruction error {worst:.0f} dB "
                  f"(need < -80); {elapsed:.1f} s")


def test_criterion_9_determinism(tmp_path):
    hashes = []
    for sub in ("run_a", "run_b"):
        out = tmp_path / sub
        assert cli.main(["simulate", "--config", str(CONFIG), "--out",
                         str(out), "--seed", "42", "--duration", "2.0"]) == 0
        assert cli.main(["beamform", "--out", str(out),
                         "--methods", "bmvdr,jblcmv,ild_1.0"]) == 0
        assert cli.main(["evaluate", "--out", str(out)]) == 0
        digest = {}
        for name in ("metrics.csv", "filters_jblcmv.csv", "filters_bmvdr.csv",
                     "filters_ild_1.0.csv", "diagnostics_ild_1.0.csv"):
            digest[name] = hashlib.sha256(
                (out / name).read_bytes()).hexdigest()
        hashes.append(digest)
    ok = hashes[0] == hashes[1]
    report(9, ok, f"replayed pipeline CSVs byte-identical: {ok}")
