"""Command-line pipeline.

Four subcommands cover the full workflow:

* ``dvf-table``  -- tabulate the near-field ILD scaling factor as CSV,
* ``simulate``   -- mix a configured scene to WAV files plus a manifest,
* ``beamform``   -- design per-bin filters for the requested methods and
  render binaural outputs,
* ``evaluate``   -- interaural cue errors and noise-power figures as CSV.

Runs are reproducible: a manifest records the resolved configuration and
seed, and identical manifests yield byte-identical CSV and WAV artifacts.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import __version__, beamform, metrics, scene, sdp, sphere, stft

DEFAULT_METHODS = "bmvdr,jblcmv,ild_1.0"
WAV_HEADROOM = 0.99


class PipelineError(RuntimeError):
    """Missing or inconsistent pipeline artifacts."""


# ---------------------------------------------------------------------------
# Manifest and WAV plumbing
# ---------------------------------------------------------------------------

@dataclass
class RunManifest:
    tool_version: str
    seed: int
    duration_s: float
    config_path: str
    config: dict
    wav_scale: float
    interferer_gains: list
    noise_sigma: float
    artifacts: dict

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "RunManifest":
        with open(path) as fh:
            return cls(**json.load(fh))


def write_wav(path, data: np.ndarray, sample_rate: int, scale: float) -> None:
    """16-bit PCM; ``data`` is (n,) or (n, channels) float, scaled by ``scale``."""
    from scipy.io import wavfile

    ints = np.clip(np.round(data * scale), -32768, 32767).astype(np.int16)
    wavfile.write(path, sample_rate, ints)


def read_wav(path, scale: float) -> np.ndarray:
    from scipy.io import wavfile

    _, data = wavfile.read(path)
    return np.asarray(data, dtype=float) / scale


def _quantize(data: np.ndarray, scale: float) -> np.ndarray:
    return np.clip(np.round(data * scale), -32768, 32767).astype(np.int64)


# ---------------------------------------------------------------------------
# dvf-table
# ---------------------------------------------------------------------------

def cmd_dvf_table(args) -> int:
    if args.fmax > sphere.MAX_TABLE_FREQ_HZ:
        print(f"error: --fmax {args.fmax} exceeds the table cap "
              f"{sphere.MAX_TABLE_FREQ_HZ} Hz", file=sys.stderr)
        return 2
    if args.fmin <= 0 or args.fmin > args.fmax or args.fstep <= 0:
        print("error: invalid frequency range", file=sys.stderr)
        return 2
    distances = [float(d) for d in args.distances.split(",")]
    params = sphere.SphereParams(radius_m=args.head_radius)
    freqs = np.arange(args.fmin, args.fmax + 1e-9, args.fstep)
    azimuths = np.arange(args.az_min, args.az_max + 1e-9, args.az_step)
    table = sphere.dvf_ild_table(params, freqs, azimuths, distances)
    table.to_csv(args.out)
    print(f"wrote {args.out}: {len(freqs)} frequencies x {len(azimuths)} "
          f"azimuths x {len(distances)} distances")
    return 0


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    sc, raw = scene.load_scene(args.config)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    duration = args.duration if args.duration else float(raw.get("duration_s", 20.0))

    atfs = scene.build_atfs(sc)
    try:
        res = scene.mix(sc, duration, seed=args.seed, atfs=atfs)
    except FileNotFoundError as exc:
        print(f"error: missing signal file: {exc.filename}", file=sys.stderr)
        return 1

    components = ([res.target] + [res.interferers[i] for i in
                                  range(sc.n_interferers)] + [res.self_noise])
    names = (["target"] + [f"interferer_{i + 1}" for i in
                           range(sc.n_interferers)] + ["self_noise"])
    peak = max(float(np.max(np.abs(c))) for c in components)
    scale = WAV_HEADROOM * 32767.0 / peak if peak > 0 else 1.0

    artifacts = {}
    quantized = []
    for name, comp in zip(names, components):
        fname = f"{name}.wav"
        write_wav(out_dir / fname, comp.T, sc.sample_rate, scale)
        artifacts[name] = fname
        quantized.append(_quantize(comp, scale))
    # the mixture is the integer sum of the quantized components, keeping
    # the accounting identity exact in the artifacts
    from scipy.io import wavfile

    mix_int = np.clip(np.sum(quantized, axis=0), -32768, 32767).astype(np.int16)
    for j in range(sc.mic_array.n_mics):
        fname = f"mixture_mic{j + 1}.wav"
        wavfile.write(out_dir / fname, sc.sample_rate, mix_int[j])
        artifacts[f"mixture_mic{j + 1}"] = fname

    scene.atfs_to_csv(atfs, out_dir / "atfs.csv")
    artifacts["atfs"] = "atfs.csv"

    manifest = RunManifest(tool_version=__version__, seed=args.seed,
                           duration_s=duration, config_path=str(args.config),
                           config=raw, wav_scale=scale,
                           interferer_gains=[float(g) for g in
                                             res.interferer_gains],
                           noise_sigma=float(res.noise_sigma),
                           artifacts=artifacts)
    manifest.save(out_dir / "manifest.json")
    print(f"wrote {len(artifacts)} artifacts + manifest.json to {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# beamform
# ---------------------------------------------------------------------------

def _load_run(out_dir: Path):
    manifest_path = out_dir / "manifest.json"
    if not manifest_path.exists():
        raise PipelineError(f"no manifest.json in {out_dir}; run simulate first")
    manifest = RunManifest.load(manifest_path)
    sc = scene.scene_from_dict(manifest.config)
    cfg = sc.stft_config()
    atfs = scene.atfs_from_csv(out_dir / manifest.artifacts["atfs"],
                               cfg.bin_freqs_hz,
                               sc.mic_array.left_ref_index,
                               sc.mic_array.right_ref_index)
    return manifest, sc, atfs


def parse_method(name: str):
    """Map a method name to (kind, enhancement distance)."""
    if name in ("bmvdr", "jblcmv"):
        return name, None
    if name == "ild_natural":
        return "ild", None
    if name.startswith("ild_"):
        try:
            return "ild", float(name[4:])
        except ValueError:
            pass
    raise ValueError(f"unknown method {name!r}")


def cmd_beamform(args) -> int:
    out_dir = Path(args.out)
    manifest, sc, atfs = _load_run(out_dir)
    if args.cutoff_hz:
        sc = scene.Scene(sc.mic_array, sc.sources, sc.sample_rate, sc.fft_size,
                         sc.self_noise_snr_db, args.cutoff_hz)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    for name in methods:
        parse_method(name)

    cpsds = scene.scene_oracle_cpsd(sc, atfs,
                                    gains=np.asarray(manifest.interferer_gains))
    cfg = sc.stft_config()
    mixture = np.stack([
        read_wav(out_dir / manifest.artifacts[f"mixture_mic{j + 1}"],
                 manifest.wav_scale)
        for j in range(sc.mic_array.n_mics)])
    mix_frames = stft.analyze(cfg, mixture)

    written = []
    failed = []
    for name in methods:
        kind, distance = parse_method(name)
        diag_rows = None
        if kind == "bmvdr":
            filt = beamform.bmvdr_filter(atfs, cpsds)
        elif kind == "jblcmv":
            filt = beamform.jblcmv_filter(atfs, cpsds)
        else:
            filt = beamform.band_split(sc, atfs, cpsds, distance,
                                       variant=args.variant)
            diag_rows = _ild_diagnostics(sc, atfs, cpsds, distance)
        filt = beamform.StackedFilter(filt.freqs_hz, filt.w, name, filt.status)
        beamform.filter_to_csv(filt, out_dir / f"filters_{name}.csv")
        written.append(f"filters_{name}.csv")
        if diag_rows is not None:
            sdp.diagnostics_to_csv(out_dir / f"diagnostics_{name}.csv", diag_rows)
            written.append(f"diagnostics_{name}.csv")
        out_l, out_r = beamform.apply_filter(filt, mix_frames)
        audio = np.stack([stft.synthesize(cfg, out_l),
                          stft.synthesize(cfg, out_r)], axis=1)
        write_wav(out_dir / f"output_{name}.wav", audio, sc.sample_rate,
                  manifest.wav_scale)
        written.append(f"output_{name}.wav")
        n_fallback = sum(s == "fallback" for s in filt.status)
        if n_fallback:
            print(f"note: {name}: {n_fallback} bins fell back to the "
                  "cue-preserving filter", file=sys.stderr)

    run_info = dict(methods=methods, variant=args.variant,
                    cutoff_hz=sc.cutoff_hz)
    with open(out_dir / "beamform.json", "w") as fh:
        json.dump(run_info, fh, indent=2, sort_keys=True)
        fh.write("\n")
    written.append("beamform.json")
    missing = [f for f in written if not (out_dir / f).exists()]
    if missing:
        print("error: missing artifacts: " + ", ".join(missing), file=sys.stderr)
        return 1
    print(f"wrote {len(written)} artifacts to {out_dir}")
    return 0


def _ild_diagnostics(sc, atfs, cpsds, distance):
    """Both relaxation objectives plus rank-1 gaps per enhancement-band bin."""
    lref, rref = atfs.left_ref, atfs.right_ref
    cs = beamform.enhancement_targets(sc, atfs, distance)
    rows = []
    for k in range(1, atfs.n_bins - 1):
        if atfs.freqs_hz[k] >= sc.cutoff_hz:
            continue
        a = atfs.target[k]
        interferers = [atfs.interferers[i, k]
                       for i in range(atfs.n_interferers)]
        p_reg = beamform.regularize_cpsd(cpsds.noise[k])
        sols = {}
        for variant in ("problem2", "problem3"):
            prob = sdp.build_problem(p_reg, a, a[lref], a[rref], interferers,
                                     cs[:, k], lref, rref, variant)
            sols[variant] = sdp.solve(prob)
        rows.append(dict(bin=k, f_hz=float(atfs.freqs_hz[k]),
                         objective_p2=sols["problem2"].objective,
                         objective_p3=sols["problem3"].objective,
                         oracle_upper=None,
                         rank1_gap=sols["problem3"].rank1_gap,
                         status=sols["problem3"].status,
                         iterations=sols["problem3"].iterations))
    return rows


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def cmd_evaluate(args) -> int:
    out_dir = Path(args.out)
    manifest, sc, atfs = _load_run(out_dir)
    run_path = out_dir / "beamform.json"
    if not run_path.exists():
        print(f"error: no beamform.json in {out_dir}; run beamform first",
              file=sys.stderr)
        return 1
    with open(run_path) as fh:
        run_info = json.load(fh)
    if run_info["cutoff_hz"] != sc.cutoff_hz:
        sc = scene.Scene(sc.mic_array, sc.sources, sc.sample_rate, sc.fft_size,
                         sc.self_noise_snr_db, run_info["cutoff_hz"])
    cfg = sc.stft_config()

    noise = read_wav(out_dir / manifest.artifacts["self_noise"],
                     manifest.wav_scale).T
    for i in range(sc.n_interferers):
        noise = noise + read_wav(
            out_dir / manifest.artifacts[f"interferer_{i + 1}"],
            manifest.wav_scale).T
    noise_frames = stft.analyze(cfg, noise)
    cpsds = scene.scene_oracle_cpsd(sc, atfs,
                                    gains=np.asarray(manifest.interferer_gains))

    report = metrics.ErrorReport()
    for name in run_info["methods"]:
        filt_path = out_dir / f"filters_{name}.csv"
        if not filt_path.exists():
            print(f"error: missing {filt_path}", file=sys.stderr)
            return 1
        filt = beamform.filter_from_csv(filt_path, cfg.bin_freqs_hz)
        kind, distance = parse_method(name)
        targets = (beamform.enhancement_targets(sc, atfs, distance)
                   if kind == "ild" else None)
        cues = metrics.compute_cues(filt, atfs)
        summary = metrics.lower_band_summary(name, cues, atfs.freqs_hz,
                                             filt.status, sc.cutoff_hz, targets)
        report.rows.extend(summary.rows)
        measured = metrics.output_noise_power(filt, noise_frames,
                                              atfs.left_ref, atfs.right_ref,
                                              sc.cutoff_hz)
        expected = metrics.expected_noise_power(filt, cpsds.noise,
                                                atfs.left_ref, atfs.right_ref,
                                                sc.cutoff_hz)
        report.add(name, "noise", "full", "noise_power_measured",
                   measured.total_db, atfs.n_bins, 0)
        report.add(name, "noise", "lower", "noise_power_measured",
                   measured.lower_db, atfs.n_bins, 0)
        report.add(name, "noise", "full", "noise_power_expected",
                   expected.total_db, atfs.n_bins, 0)
        report.add(name, "noise", "lower", "noise_power_expected",
                   expected.lower_db, atfs.n_bins, 0)

    report.to_csv(out_dir / "metrics.csv")
    print(f"wrote metrics.csv with {len(report.rows)} rows to {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nfbeam",
        description="binaural beamforming with near-field low-frequency "
                    "ILD enhancement")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_tbl = sub.add_parser("dvf-table", help="tabulate the ILD scaling factor")
    p_tbl.add_argument("--out", required=True)
    p_tbl.add_argument("--distances", default="0.2,0.4,0.6,0.8,1.0")
    p_tbl.add_argument("--fmin", type=float, default=62.5)
    p_tbl.add_argument("--fmax", type=float, default=800.0)
    p_tbl.add_argument("--fstep", type=float, default=62.5)
    p_tbl.add_argument("--az-min", type=float, default=-90.0)
    p_tbl.add_argument("--az-max", type=float, default=90.0)
    p_tbl.add_argument("--az-step", type=float, default=5.0)
    p_tbl.add_argument("--head-radius", type=float,
                       default=sphere.DEFAULT_HEAD_RADIUS_M)
    p_tbl.set_defaults(func=cmd_dvf_table)

    p_sim = sub.add_parser("simulate", help="mix a scene to WAV artifacts")
    p_sim.add_argument("--config", required=True)
    p_sim.add_argument("--out", required=True)
    p_sim.add_argument("--seed", type=int, default=0)
    p_sim.add_argument("--duration", type=float, default=None,
                       help="override the configured duration (seconds)")
    p_sim.set_defaults(func=cmd_simulate)

    p_bf = sub.add_parser("beamform", help="design filters and render output")
    p_bf.add_argument("--out", required=True,
                      help="directory holding the simulate artifacts")
    p_bf.add_argument("--methods", default=DEFAULT_METHODS)
    p_bf.add_argument("--cutoff-hz", type=float, default=None)
    p_bf.add_argument("--variant", choices=("problem2", "problem3"),
                      default="problem3")
    p_bf.set_defaults(func=cmd_beamform)

    p_ev = sub.add_parser("evaluate", help="cue-error and noise metrics")
    p_ev.add_argument("--out", required=True)
    p_ev.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, scene.GeometryError, sphere.TableRangeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, PipelineError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
