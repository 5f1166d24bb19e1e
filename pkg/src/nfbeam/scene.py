"""Acoustic scenes: arrays, sources, steering vectors, mixing and CPSDs.

A scene is a rigid-sphere head carrying an even number of microphones, one
target source and up to ``2M - 3`` interferers on the horizontal plane.
Steering vectors (acoustic transfer functions, ATFs) come from the sphere
model; multichannel observations are mixed in the STFT domain so that the
returned per-source components add up to the observation exactly.

Azimuth convention: 0 deg at the mid-sagittal plane, positive clockwise
(right side), in (-180, 180]. Microphone 1 (index 0) is the right reference,
microphone M (index M-1) the left reference.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np

from . import sphere, stft


class GeometryError(ValueError):
    """Scene geometry violates the sphere model (e.g. source inside head)."""


@dataclass(frozen=True)
class MicArrayConfig:
    """Microphone positions on the sphere surface.

    ``mic_azimuths_deg`` lists one azimuth per microphone; the count must be
    even with the first half on the right side by convention.
    """

    mic_azimuths_deg: tuple
    head_radius_m: float = sphere.DEFAULT_HEAD_RADIUS_M

    def __post_init__(self):
        azimuths = tuple(float(a) for a in self.mic_azimuths_deg)
        object.__setattr__(self, "mic_azimuths_deg", azimuths)
        if len(azimuths) < 2 or len(azimuths) % 2:
            raise ValueError("microphone count must be even and at least 2")
        if any(not (-180.0 < a <= 180.0) for a in azimuths):
            raise ValueError("microphone azimuths must lie in (-180, 180]")
        if self.head_radius_m <= 0:
            raise ValueError("head radius must be positive")

    @property
    def n_mics(self) -> int:
        return len(self.mic_azimuths_deg)

    @property
    def right_ref_index(self) -> int:
        """Right reference microphone (first microphone)."""
        return 0

    @property
    def left_ref_index(self) -> int:
        """Left reference microphone (last microphone)."""
        return self.n_mics - 1

    @classmethod
    def bte_pair(cls, n_mics: int = 4, head_radius_m: float = sphere.DEFAULT_HEAD_RADIUS_M,
                 ear_azimuth_deg: float = sphere.DEFAULT_EAR_AZIMUTH_DEG,
                 device_spacing_deg: float = 5.0) -> "MicArrayConfig":
        """Behind-the-ear style array: n_mics/2 mics around each ear.

        Mics on a side are spread ``device_spacing_deg`` apart, centred on the
        ear azimuth. Right-side mics come first, ordered so the reference
        mics (first and last) sit closest to the front.
        """
        per_side = n_mics // 2
        if per_side < 1 or n_mics % 2:
            raise ValueError("n_mics must be even and at least 2")
        offsets = (np.arange(per_side) - (per_side - 1) / 2.0) * device_spacing_deg
        right = ear_azimuth_deg + offsets          # ascending: front mic first
        left = -ear_azimuth_deg - offsets          # descending wrt azimuth
        return cls(tuple(right) + tuple(left[::-1]), head_radius_m)


@dataclass(frozen=True)
class SourceSpec:
    role: str
    azimuth_deg: float
    distance_m: float
    signal: str = "noise"
    gain_db: float = 0.0

    def __post_init__(self):
        if self.role not in ("target", "interferer"):
            raise ValueError(f"unknown source role {self.role!r}")
        if not (-180.0 < self.azimuth_deg <= 180.0):
            raise ValueError("source azimuth must lie in (-180, 180]")


@dataclass(frozen=True)
class Scene:
    mic_array: MicArrayConfig
    sources: tuple
    sample_rate: int = 16000
    fft_size: int = 256
    self_noise_snr_db: float = 50.0
    cutoff_hz: float = 800.0

    def __post_init__(self):
        object.__setattr__(self, "sources", tuple(self.sources))
        targets = [s for s in self.sources if s.role == "target"]
        if len(targets) != 1:
            raise ValueError(f"scene must have exactly one target, got {len(targets)}")
        m = self.mic_array.n_mics
        r = len(self.sources) - 1
        if r > 2 * m - 3:
            raise ValueError(
                f"{r} interferers exceed the limit 2M-3 = {2 * m - 3} for M = {m}")
        for s in self.sources:
            if s.distance_m <= self.mic_array.head_radius_m:
                raise GeometryError(
                    f"source at {s.azimuth_deg} deg sits inside the head "
                    f"({s.distance_m} m <= {self.mic_array.head_radius_m} m)")
        if not 0.0 < self.cutoff_hz <= sphere.MAX_TABLE_FREQ_HZ:
            raise ValueError(
                f"cutoff must lie in (0, {sphere.MAX_TABLE_FREQ_HZ}] Hz")

    @property
    def target(self) -> SourceSpec:
        return next(s for s in self.sources if s.role == "target")

    @property
    def interferers(self) -> tuple:
        return tuple(s for s in self.sources if s.role == "interferer")

    @property
    def n_interferers(self) -> int:
        return len(self.sources) - 1

    def stft_config(self) -> stft.StftConfig:
        return stft.StftConfig.for_rate(self.sample_rate, self.fft_size)

    def sphere_params(self) -> sphere.SphereParams:
        return sphere.SphereParams(radius_m=self.mic_array.head_radius_m)


@dataclass(frozen=True)
class AtfSet:
    """Per-bin steering vectors for the target and every interferer."""

    freqs_hz: np.ndarray          # (K,)
    target: np.ndarray            # (K, M) complex
    interferers: np.ndarray       # (r, K, M) complex
    left_ref: int
    right_ref: int

    @property
    def n_bins(self) -> int:
        return len(self.freqs_hz)

    @property
    def n_mics(self) -> int:
        return self.target.shape[1]

    @property
    def n_interferers(self) -> int:
        return self.interferers.shape[0]


@dataclass(frozen=True)
class CpsdSet:
    """Per-bin Hermitian cross power spectral density matrices."""

    freqs_hz: np.ndarray
    noise: np.ndarray                      # (K, M, M) total noise
    target: np.ndarray | None = None       # (K, M, M)
    per_interferer: np.ndarray | None = None   # (r, K, M, M)


def build_atfs(scene: Scene, params: sphere.SphereParams | None = None) -> AtfSet:
    """Sphere-model steering vectors on the scene's STFT bin grid.

    Entry j of a source's vector at bin k is the surface pressure at
    microphone j normalized by (k a)^2; the DC bin carries the real
    zero-frequency limit of the same quantity, the Nyquist bin the real
    magnitude (both bins must stay real for a real time-domain model).
    """
    params = params or scene.sphere_params()
    cfg = scene.stft_config()
    freqs = cfg.bin_freqs_hz
    mic_az = np.array(scene.mic_array.mic_azimuths_deg)
    m = scene.mic_array.n_mics
    ordered = (scene.target,) + scene.interferers

    vectors = np.zeros((len(ordered), len(freqs), m), dtype=complex)
    for si, src in enumerate(ordered):
        if src.distance_m <= params.radius_m:
            raise GeometryError(
                f"source at {src.azimuth_deg} deg inside sphere radius")
        thetas = sphere.angular_separation_deg(src.azimuth_deg, mic_az)
        try:
            vectors[si, 0] = sphere.sphere_dc_gain(params, thetas, src.distance_m)
        except sphere.SeriesConvergenceError as exc:
            raise sphere.SeriesConvergenceError(
                f"bin 0 (DC), source at {src.azimuth_deg} deg: {exc}") from exc
        for k in range(1, len(freqs)):
            f = freqs[k]
            ka = 2 * np.pi * f / params.speed_of_sound_m_s * params.radius_m
            try:
                p = sphere.sphere_pressure(params, f, thetas, src.distance_m)
            except sphere.SeriesConvergenceError as exc:
                raise sphere.SeriesConvergenceError(
                    f"bin {k} ({f:.1f} Hz), source at {src.azimuth_deg} deg: {exc}"
                ) from exc
            vectors[si, k] = p / ka**2
        vectors[si, -1] = np.abs(vectors[si, -1])  # Nyquist bin stays real
    return AtfSet(freqs, vectors[0], vectors[1:],
                  scene.mic_array.left_ref_index, scene.mic_array.right_ref_index)


# ---------------------------------------------------------------------------
# Source signals
# ---------------------------------------------------------------------------

def render_signal(spec: str, n_samples: int, sample_rate: int,
                  rng: np.random.Generator) -> np.ndarray:
    """Render a mono source signal described by a compact spec string.

    Supported: ``noise``, ``tone:<hz>``, ``harmonic:<f0>``,
    ``bursts[:<period_ms>]`` and ``wav:<path>`` (16-bit PCM mono).
    Synthetic signals are normalized to unit RMS.
    """
    kind, _, arg = spec.partition(":")
    t = np.arange(n_samples) / sample_rate
    if kind == "noise":
        x = rng.standard_normal(n_samples)
    elif kind == "tone":
        f = float(arg)
        x = np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    elif kind == "harmonic":
        f0 = float(arg)
        x = np.zeros(n_samples)
        n = 1
        while n * f0 < 0.45 * sample_rate and n <= 12:
            x += np.sin(2 * np.pi * n * f0 * t + rng.uniform(0, 2 * np.pi)) / n
            n += 1
    elif kind == "bursts":
        period_ms = float(arg) if arg else 500.0
        period = max(int(period_ms * 1e-3 * sample_rate), 2)
        gate = (np.arange(n_samples) % period) < period // 2
        x = rng.standard_normal(n_samples) * gate
    elif kind == "wav":
        from scipy.io import wavfile

        rate, data = wavfile.read(arg)
        if rate != sample_rate:
            raise ValueError(f"{arg}: sample rate {rate} != scene rate {sample_rate}")
        data = np.asarray(data, dtype=float)
        if data.ndim > 1:
            data = data[:, 0]
        if len(data) < n_samples:
            raise ValueError(f"{arg}: signal too short "
                             f"({len(data)} < {n_samples} samples)")
        return data[:n_samples] / 32768.0
    else:
        raise ValueError(f"unknown signal spec {spec!r}")
    rms = np.sqrt(np.mean(x**2))
    return x / rms if rms > 0 else x


# ---------------------------------------------------------------------------
# Mixing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MixResult:
    """Observation plus the exact per-component decomposition."""

    mixture: np.ndarray            # (M, N)
    target: np.ndarray             # (M, N)
    interferers: np.ndarray        # (r, M, N)
    self_noise: np.ndarray         # (M, N)
    interferer_gains: np.ndarray   # (r,) linear amplitude factors applied
    noise_sigma: float
    sample_rate: int

    def noise_only(self) -> np.ndarray:
        """Everything except the target (ideal-VAD ground truth)."""
        return self.interferers.sum(axis=0) + self.self_noise


def _image(cfg: stft.StftConfig, signal: np.ndarray, atf: np.ndarray) -> np.ndarray:
    """Multichannel source image: per-bin ATF applied in the STFT domain."""
    frames = stft.analyze(cfg, signal)                 # (K, L)
    imaged = frames[:, :, None] * atf[:, None, :]      # (K, L, M)
    n_mics = atf.shape[1]
    return np.stack([stft.synthesize(cfg, imaged[:, :, j]) for j in range(n_mics)])


def mix(scene: Scene, duration_s: float, seed: int | np.random.Generator = 0,
        atfs: AtfSet | None = None) -> MixResult:
    """Synthesize the multichannel observation and its exact components.

    Interferer images are power-normalized to 0 dB against the target image,
    measured as broadband power averaged over the two reference microphones
    (then shifted by each source's ``gain_db``). Microphone self-noise is
    white Gaussian at ``self_noise_snr_db`` below the target, infinite SNR
    meaning none. The returned components sum to the mixture exactly.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    cfg = scene.stft_config()
    n_samples = int(round(duration_s * scene.sample_rate))
    if n_samples < cfg.frame_len:
        raise ValueError("duration shorter than one STFT frame")
    atfs = atfs or build_atfs(scene)
    refs = (scene.mic_array.left_ref_index, scene.mic_array.right_ref_index)

    streams = rng.spawn(len(scene.sources) + 1)
    target_sig = render_signal(scene.target.signal, n_samples, scene.sample_rate,
                               streams[0])
    target_img = _image(cfg, target_sig, atfs.target)
    target_img *= 10.0 ** (scene.target.gain_db / 20.0)
    n_out = target_img.shape[1]
    p_target = float(np.mean(target_img[refs, :] ** 2))
    if p_target <= 0:
        raise ValueError("target renders silent at the reference microphones")

    interferer_imgs = np.zeros((scene.n_interferers, scene.mic_array.n_mics, n_out))
    gains = np.zeros(scene.n_interferers)
    for i, src in enumerate(scene.interferers):
        sig = render_signal(src.signal, n_samples, scene.sample_rate, streams[i + 1])
        img = _image(cfg, sig, atfs.interferers[i])
        p_raw = float(np.mean(img[refs, :] ** 2))
        if p_raw <= 0:
            raise ValueError(f"interferer {i + 1} renders silent at the references")
        gains[i] = np.sqrt(p_target / p_raw) * 10.0 ** (src.gain_db / 20.0)
        interferer_imgs[i] = gains[i] * img

    if np.isfinite(scene.self_noise_snr_db):
        sigma = np.sqrt(p_target * 10.0 ** (-scene.self_noise_snr_db / 10.0))
    else:
        sigma = 0.0
    self_noise = sigma * streams[-1].standard_normal(target_img.shape)

    mixture = target_img + interferer_imgs.sum(axis=0) + self_noise
    return MixResult(mixture, target_img, interferer_imgs, self_noise,
                     gains, sigma, scene.sample_rate)


# ---------------------------------------------------------------------------
# CPSDs
# ---------------------------------------------------------------------------

def oracle_cpsd(atfs: AtfSet, interferer_psds, self_noise_power,
                target_psd=None) -> CpsdSet:
    """Closed-form CPSDs from steering vectors and per-bin source powers.

    ``interferer_psds`` broadcasts to (r, K) and ``self_noise_power`` to
    (K,); the total-noise matrix at bin k is
    ``sum_i psd_i(k) b_i b_i^H + sigma_v^2(k) I`` (Hermitian by construction).
    """
    r, k, m = atfs.interferers.shape
    psds = np.broadcast_to(np.asarray(interferer_psds, dtype=float), (r, k))
    sigma2 = np.broadcast_to(np.asarray(self_noise_power, dtype=float), (k,))
    per_int = (psds[:, :, None, None]
               * np.einsum("ikm,ikn->ikmn", atfs.interferers,
                           atfs.interferers.conj()))
    noise = per_int.sum(axis=0) + sigma2[:, None, None] * np.eye(m)
    target = None
    if target_psd is not None:
        tp = np.broadcast_to(np.asarray(target_psd, dtype=float), (k,))
        target = tp[:, None, None] * np.einsum(
            "km,kn->kmn", atfs.target, atfs.target.conj())
    return CpsdSet(atfs.freqs_hz, noise, target=target, per_interferer=per_int)


def estimate_cpsd(frames: np.ndarray, freqs_hz=None) -> CpsdSet:
    """Sample-average CPSD estimate from (K, L, M) noise-only STFT frames."""
    frames = np.asarray(frames)
    if frames.ndim != 3:
        raise ValueError("frames must be (n_bins, n_frames, n_mics)")
    k, n_frames, m = frames.shape
    if n_frames == 0:
        raise ValueError("no frames to average")
    if n_frames < 2 * m:
        warnings.warn(
            f"only {n_frames} frames for {m} microphones; CPSD estimate "
            "will be poorly conditioned", stacklevel=2)
    est = np.einsum("klm,kln->kmn", frames, frames.conj()) / n_frames
    est = 0.5 * (est + est.conj().transpose(0, 2, 1))
    if freqs_hz is None:
        freqs_hz = np.arange(k, dtype=float)
    return CpsdSet(np.asarray(freqs_hz, dtype=float), est)


def scene_oracle_cpsd(scene: Scene, atfs: AtfSet | None = None,
                      gains=None) -> CpsdSet:
    """Oracle noise CPSD matching the default mixing conventions.

    Uses flat unit source PSDs scaled by the 0 dB interferer gains and the
    white self-noise variance implied by the scene SNR (the common STFT
    window power factor is omitted; it rescales every bin identically).
    """
    atfs = atfs or build_atfs(scene)
    if gains is None:
        gains = np.ones(scene.n_interferers)
        # 0 dB at the reference mics, in expectation over a unit-power source
        refs = (atfs.left_ref, atfs.right_ref)
        p_target = np.mean(np.abs(atfs.target[:, refs]) ** 2)
        for i in range(scene.n_interferers):
            p_i = np.mean(np.abs(atfs.interferers[i][:, refs]) ** 2)
            gains[i] = np.sqrt(p_target / p_i) * 10.0 ** (
                scene.interferers[i].gain_db / 20.0)
        p_ref = p_target
    else:
        gains = np.asarray(gains, dtype=float)
        refs = (atfs.left_ref, atfs.right_ref)
        p_ref = np.mean(np.abs(atfs.target[:, refs]) ** 2)
    if np.isfinite(scene.self_noise_snr_db):
        sigma2 = p_ref * 10.0 ** (-scene.self_noise_snr_db / 10.0)
    else:
        sigma2 = 1e-10 * p_ref  # keep the matrices invertible
    return oracle_cpsd(atfs, (gains ** 2)[:, None], sigma2, target_psd=1.0)


# ---------------------------------------------------------------------------
# Scene configuration files and ATF tables
# ---------------------------------------------------------------------------

def scene_from_dict(data: dict) -> Scene:
    mic = data.get("mic_array", {})
    if "azimuths_deg" in mic:
        array = MicArrayConfig(tuple(mic["azimuths_deg"]),
                               float(mic.get("head_radius_m",
                                             sphere.DEFAULT_HEAD_RADIUS_M)))
    else:
        array = MicArrayConfig.bte_pair(
            n_mics=int(mic.get("n_mics", 4)),
            head_radius_m=float(mic.get("head_radius_m",
                                        sphere.DEFAULT_HEAD_RADIUS_M)),
            ear_azimuth_deg=float(mic.get("ear_azimuth_deg",
                                          sphere.DEFAULT_EAR_AZIMUTH_DEG)),
            device_spacing_deg=float(mic.get("device_spacing_deg", 5.0)))
    sources = tuple(
        SourceSpec(role=s["role"], azimuth_deg=float(s["azimuth_deg"]),
                   distance_m=float(s["distance_m"]),
                   signal=str(s.get("signal", "noise")),
                   gain_db=float(s.get("gain_db", 0.0)))
        for s in data["sources"])
    snr = data.get("self_noise_snr_db", 50.0)
    return Scene(mic_array=array, sources=sources,
                 sample_rate=int(data.get("sample_rate_hz", 16000)),
                 fft_size=int(data.get("fft_size", 256)),
                 self_noise_snr_db=float("inf") if snr is None else float(snr),
                 cutoff_hz=float(data.get("cutoff_hz", 800.0)))


def load_scene(path) -> tuple[Scene, dict]:
    """Parse a YAML scene description; returns the scene and the raw dict."""
    import yaml

    with open(path) as fh:
        data = yaml.safe_load(fh)
    if not isinstance(data, dict):
        raise ValueError(f"scene file {path} does not hold a mapping")
    return scene_from_dict(data), data


def atfs_to_csv(atfs: AtfSet, path) -> None:
    """Write steering vectors as (bin, source_id, mic_index, re, im) rows."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin", "source_id", "mic_index", "re_linear", "im_linear"])
        names = ["target"] + [f"interferer_{i + 1}"
                              for i in range(atfs.n_interferers)]
        stacked = np.concatenate([atfs.target[None], atfs.interferers], axis=0)
        for si, name in enumerate(names):
            for k in range(atfs.n_bins):
                for j in range(atfs.n_mics):
                    v = stacked[si, k, j]
                    writer.writerow([k, name, j, f"{v.real:.17g}", f"{v.imag:.17g}"])


def atfs_from_csv(path, freqs_hz, left_ref: int, right_ref: int) -> AtfSet:
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append((int(row["bin"]), row["source_id"], int(row["mic_index"]),
                         float(row["re_linear"]), float(row["im_linear"])))
    if not rows:
        raise ValueError(f"empty ATF file: {path}")
    names = sorted({r[1] for r in rows})
    if "target" not in names:
        raise ValueError("ATF file has no target source")
    interferer_names = sorted((n for n in names if n != "target"),
                              key=lambda n: int(n.rsplit("_", 1)[1]))
    n_bins = max(r[0] for r in rows) + 1
    n_mics = max(r[2] for r in rows) + 1
    if n_bins != len(freqs_hz):
        raise ValueError(f"ATF file spans {n_bins} bins, expected {len(freqs_hz)}")
    data = {name: np.zeros((n_bins, n_mics), dtype=complex) for name in names}
    for k, name, j, re, im in rows:
        data[name][k, j] = re + 1j * im
    interferers = (np.stack([data[n] for n in interferer_names])
                   if interferer_names else np.zeros((0, n_bins, n_mics), complex))
    return AtfSet(np.asarray(freqs_hz, dtype=float), data["target"],
                  interferers, left_ref, right_ref)
