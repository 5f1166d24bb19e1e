import numpy as np
import pytest

from nfbeam import beamform, metrics, scene, stft


@pytest.fixture(scope="module")
def paper_setup():
    sources = [scene.SourceSpec("target", 0.0, 1.0, "harmonic:210")]
    for az in (-20.0, 20.0, -40.0, 40.0):
        sources.append(scene.SourceSpec("interferer", az, 1.0, "noise"))
    sc = scene.Scene(scene.MicArrayConfig.bte_pair(4), tuple(sources))
    atfs = scene.build_atfs(sc)
    cpsds = scene.scene_oracle_cpsd(sc, atfs)
    return sc, atfs, cpsds


class TestItf:
    def test_equal_entries_give_unity(self):
        ratio, valid = metrics.itf(1.5 + 0.5j, 1.5 + 0.5j)
        assert valid and ratio == 1.0 + 0.0j

    def test_quarter_turn(self):
        ratio, valid = metrics.itf(1j * (2.0 + 1.0j), 2.0 + 1.0j)
        assert valid
        assert ratio == pytest.approx(1j)
        assert abs(ratio) ** 2 == pytest.approx(1.0)
        assert np.angle(ratio) == pytest.approx(np.pi / 2)

    def test_passthrough_filter_reproduces_input_itf(self, paper_setup):
        sc, atfs, _ = paper_setup
        m = atfs.n_mics
        w = np.zeros((atfs.n_bins, 2 * m), dtype=complex)
        w[:, m - 1] = 1.0
        w[:, m] = 1.0
        filt = beamform.StackedFilter(atfs.freqs_hz, w, "passthrough",
                                      tuple(["solved"] * atfs.n_bins))
        cues = metrics.compute_cues(filt, atfs)
        for cue in cues.values():
            np.testing.assert_allclose(cue.itf_out[cue.valid],
                                       cue.itf_in[cue.valid], rtol=1e-12)

    def test_vanishing_denominator_flagged(self):
        ratio, valid = metrics.itf(np.array([1.0 + 0j, 1.0]),
                                   np.array([0.0 + 0j, 2.0]))
        assert not valid[0] and valid[1]
        assert np.isnan(ratio[0].real)


class TestIldErr:
    def test_matched_cues_zero(self):
        assert metrics.ild_err(0.3 + 0.4j, 0.3 + 0.4j, 1.0) == 0.0

    def test_enhancement_exactly_met(self):
        # output power ratio 2, input 1, scaling 2
        assert metrics.ild_err(np.sqrt(2.0), 1.0, 2.0) == pytest.approx(0.0)

    def test_phase_invariance(self):
        rng = np.random.default_rng(0)
        a, b = 0.8 + 0.2j, 1.1 - 0.4j
        for _ in range(5):
            phi, psi = rng.uniform(0, 2 * np.pi, 2)
            rotated = metrics.ild_err(a * np.exp(1j * phi), b * np.exp(1j * psi),
                                      1.3)
            assert rotated == pytest.approx(metrics.ild_err(a, b, 1.3), rel=1e-12)


class TestIpdErr:
    def test_equal_phases(self):
        assert metrics.ipd_err(2.0 + 0j, 5.0 + 0j) == 0.0

    def test_opposite_phases(self):
        assert metrics.ipd_err(1.0 + 0j, -3.0 + 0j) == pytest.approx(1.0)

    def test_wrapping(self):
        # 3*pi/2 unwrapped wraps to -pi/2, normalized error 0.5
        out = np.exp(1j * 3 * np.pi / 2)
        assert metrics.ipd_err(out, 1.0 + 0j) == pytest.approx(0.5)

    def test_symmetry(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            a = np.exp(1j * rng.uniform(-np.pi, np.pi))
            b = np.exp(1j * rng.uniform(-np.pi, np.pi))
            assert metrics.ipd_err(a, b) == pytest.approx(metrics.ipd_err(b, a))

    def test_range(self):
        rng = np.random.default_rng(2)
        vals = metrics.ipd_err(np.exp(1j * rng.uniform(-10, 10, 100)),
                               np.exp(1j * rng.uniform(-10, 10, 100)))
        assert np.all((vals >= 0) & (vals <= 1))


class TestItdConsistency:
    def test_itd_matches_ipd_over_angular_frequency(self):
        rng = np.random.default_rng(3)
        freqs = np.array([0.0, 62.5, 125.0, 500.0])
        vals = np.exp(1j * rng.uniform(-np.pi, np.pi, 4))
        itd = metrics.itd_from_itf(vals, freqs)
        assert np.isnan(itd[0])
        for k in range(1, 4):
            assert itd[k] * 2 * np.pi * freqs[k] == pytest.approx(
                np.angle(vals[k]))


class TestMeanDb:
    def test_zero_error_floors(self):
        assert metrics.mean_db(np.zeros(5)) == -300.0

    def test_single_value(self):
        assert metrics.mean_db(np.array([0.01])) == pytest.approx(-20.0)


class TestLowerBandSummary:
    def test_perfect_preservation_floors(self, paper_setup):
        sc, atfs, cpsds = paper_setup
        filt = beamform.jblcmv_filter(atfs, cpsds)
        cues = metrics.compute_cues(filt, atfs)
        report = metrics.lower_band_summary("jblcmv", cues, atfs.freqs_hz,
                                            filt.status, sc.cutoff_hz)
        for i in range(1, 5):
            assert report.value(f"interferer_{i}", "ild_err") < -100.0
            assert report.value(f"interferer_{i}", "ipd_err") < -100.0
        assert report.value("target", "ild_err") < -100.0

    def test_fallback_bins_are_excluded(self, paper_setup):
        sc, atfs, cpsds = paper_setup
        filt = beamform.jblcmv_filter(atfs, cpsds)
        statuses = list(filt.status)
        statuses[3] = "fallback"
        cues = metrics.compute_cues(filt, atfs)
        report = metrics.lower_band_summary("jblcmv", cues, atfs.freqs_hz,
                                            tuple(statuses), sc.cutoff_hz)
        row = next(r for r in report.rows
                   if r.source == "target" and r.metric == "ild_err")
        assert row.bins_excluded >= 1

    def test_proposed_ipd_error_tracks_bmvdr_not_jblcmv(self, paper_setup):
        # neither the noise-optimal filter nor the enhancer constrains IPD,
        # so both sit far above the cue-preserving filter
        sc, atfs, cpsds = paper_setup
        reports = {}
        for name, filt in (
                ("bmvdr", beamform.bmvdr_filter(atfs, cpsds)),
                ("jblcmv", beamform.jblcmv_filter(atfs, cpsds)),
                ("ild", beamform.band_split(sc, atfs, cpsds, 0.2))):
            cues = metrics.compute_cues(filt, atfs)
            reports[name] = metrics.lower_band_summary(
                name, cues, atfs.freqs_hz, filt.status, sc.cutoff_hz)
        for i in range(1, 5):
            src = f"interferer_{i}"
            jb = reports["jblcmv"].value(src, "ipd_err")
            assert reports["bmvdr"].value(src, "ipd_err") > jb + 40.0
            assert reports["ild"].value(src, "ipd_err") > jb + 40.0

    def test_enhanced_ild_error_small_against_its_target(self, paper_setup):
        sc, atfs, cpsds = paper_setup
        filt = beamform.band_split(sc, atfs, cpsds, 0.2)
        cues = metrics.compute_cues(filt, atfs)
        targets = beamform.enhancement_targets(sc, atfs, 0.2)
        report = metrics.lower_band_summary("ild_0.2", cues, atfs.freqs_hz,
                                            filt.status, sc.cutoff_hz, targets)
        for i in range(1, 5):
            assert report.value(f"interferer_{i}", "ild_err") < -50.0

    def test_csv_export(self, paper_setup, tmp_path):
        sc, atfs, cpsds = paper_setup
        filt = beamform.jblcmv_filter(atfs, cpsds)
        cues = metrics.compute_cues(filt, atfs)
        report = metrics.lower_band_summary("jblcmv", cues, atfs.freqs_hz,
                                            filt.status, sc.cutoff_hz)
        path = tmp_path / "report.csv"
        report.to_csv(path)
        lines = path.read_text().splitlines()
        assert lines[0] == ("method,source,band,metric,value_db,"
                            "bins_included,bins_excluded")
        assert len(lines) == len(report.rows) + 1


class TestOutputNoisePower:
    def test_passthrough_is_zero_db(self, paper_setup):
        sc, atfs, _ = paper_setup
        m = atfs.n_mics
        rng = np.random.default_rng(4)
        frames = (rng.standard_normal((atfs.n_bins, 50, m))
                  + 1j * rng.standard_normal((atfs.n_bins, 50, m)))
        w = np.zeros((atfs.n_bins, 2 * m), dtype=complex)
        w[:, m - 1] = 1.0
        w[:, m] = 1.0
        filt = beamform.StackedFilter(atfs.freqs_hz, w, "pass",
                                      tuple(["solved"] * atfs.n_bins))
        res = metrics.output_noise_power(filt, frames, atfs.left_ref,
                                         atfs.right_ref, sc.cutoff_hz)
        assert res.total_db == pytest.approx(0.0, abs=1e-12)
        assert res.lower_db == pytest.approx(0.0, abs=1e-12)

    def test_method_ordering_under_design_covariance(self, paper_setup):
        # nested feasible sets plus the relaxation sandwich: per lower-band
        # bin, noise-optimal <= enhancer (c = 1) <= cue-preserving
        sc, atfs, cpsds = paper_setup
        powers = {}
        for name, filt in (
                ("bmvdr", beamform.bmvdr_filter(atfs, cpsds)),
                ("jblcmv", beamform.jblcmv_filter(atfs, cpsds)),
                ("ild_nat", beamform.band_split(sc, atfs, cpsds, None))):
            powers[name] = metrics.expected_noise_power(
                filt, cpsds.noise, atfs.left_ref, atfs.right_ref, sc.cutoff_hz)
        lower = (atfs.freqs_hz > 0) & (atfs.freqs_hz < sc.cutoff_hz)
        b = powers["bmvdr"].per_bin_out[lower]
        n = powers["ild_nat"].per_bin_out[lower]
        j = powers["jblcmv"].per_bin_out[lower]
        assert np.all(b <= n + 1e-6)
        assert np.all(n <= j + 1e-6)
        assert powers["bmvdr"].total_db <= powers["jblcmv"].total_db

    def test_measured_matches_expected_under_matched_covariance(self, paper_setup):
        # frames drawn from the design covariance itself: the sample power
        # must converge on the quadratic-form value (scene-mixed noise
        # instead amplifies estimation error through high-norm filters)
        sc, atfs, cpsds = paper_setup
        rng = np.random.default_rng(6)
        n_frames = 4000
        m = atfs.n_mics
        frames = np.zeros((atfs.n_bins, n_frames, m), dtype=complex)
        for k in range(atfs.n_bins):
            chol = np.linalg.cholesky(cpsds.noise[k]
                                      + 1e-12 * np.eye(m))
            white = (rng.standard_normal((n_frames, m))
                     + 1j * rng.standard_normal((n_frames, m))) / np.sqrt(2)
            frames[k] = white @ chol.T
        filt = beamform.jblcmv_filter(atfs, cpsds)
        measured = metrics.output_noise_power(filt, frames, atfs.left_ref,
                                              atfs.right_ref, sc.cutoff_hz)
        expected = metrics.expected_noise_power(filt, cpsds.noise,
                                                atfs.left_ref, atfs.right_ref,
                                                sc.cutoff_hz)
        assert measured.total_db == pytest.approx(expected.total_db, abs=0.5)
        assert measured.lower_db == pytest.approx(expected.lower_db, abs=0.5)
