"""Channel-sounding measurement chain.

Codeword generation (Galois LFSR, degree 14), BPSK mapping, rational
resampling, correlation against the received IQ stream, significant-peak
extraction, received-power integration, conducted calibration and
GPS-located path-gain traces.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy import signal

from .errors import DomainError, FormatError, NoSignalError

__all__ = [
    "GLFSR14_POLY",
    "Codeword",
    "CIRFrame",
    "CalibrationParams",
    "SounderConfig",
    "TracePoint",
    "PathGainTrace",
    "glfsr14",
    "galois_lfsr",
    "bpsk",
    "resample",
    "correlate_cir",
    "detect_peaks",
    "received_power_db",
    "conducted_reference",
    "over_the_air_power",
    "path_gain_ota",
    "process_capture",
    "reference_waveform",
    "sound_segment",
    "moving_average",
    "synthesize_capture",
    "read_iq",
    "write_iq",
    "read_gps",
    "write_trace",
    "read_trace",
]

# x^14 + x^13 + x^12 + x^2 + 1
GLFSR14_POLY = (14, 13, 12, 2)


@dataclass(frozen=True)
class Codeword:
    bits: np.ndarray
    order: int
    taps: tuple[int, ...]

    @property
    def period(self) -> int:
        return self.bits.size


@dataclass(frozen=True)
class CIRFrame:
    """Sparse channel impulse response for one second of capture."""

    delays: np.ndarray
    amplitudes: np.ndarray
    t_second: float = 0.0
    sample_rate_hz: float = 1.0
    position: tuple[float, float] | None = None

    @property
    def taps(self) -> list[tuple[int, complex]]:
        return list(zip(self.delays.tolist(), self.amplitudes.tolist()))


@dataclass(frozen=True)
class CalibrationParams:
    """Link-budget terms in dB/dBm.  ``g_ant_db`` is the sum of both antenna gains."""

    p_tx_dbm: float = 0.0
    g_amp_db: float = 0.0
    g_ant_db: float = 0.0
    l_cable_db: float = 0.0
    l_att_db: float = 0.0
    p_rx_otc_dbm: float = 0.0

    def __post_init__(self):
        vals = [self.p_tx_dbm, self.g_amp_db, self.g_ant_db, self.l_cable_db, self.l_att_db, self.p_rx_otc_dbm]
        if not all(math.isfinite(v) for v in vals):
            raise DomainError("calibration parameters must be finite")
        if self.l_att_db < 0 or self.l_cable_db < 0:
            raise DomainError("losses must be non-negative")

    @classmethod
    def from_json(cls, path) -> "CalibrationParams":
        data = json.loads(Path(path).read_text())
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise FormatError(f"unknown calibration fields {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in data.items()})


@dataclass(frozen=True)
class SounderConfig:
    chip_rate_hz: float
    calibration: CalibrationParams = field(default_factory=CalibrationParams)
    seed: int = 0x0001
    threshold_db: float = 3.0
    guard: int = 5
    # peaks must also clear the median CIR power by this much
    min_snr_db: float = 18.0
    # and sit within this range of the strongest peak (rejects pulse sidelobes)
    dynamic_range_db: float = 20.0
    max_gps_offset_s: float = 0.5


@dataclass(frozen=True)
class TracePoint:
    t_unix_s: float
    lat_deg: float
    lon_deg: float
    pg_db: float


@dataclass(frozen=True)
class PathGainTrace:
    points: tuple[TracePoint, ...]

    def __post_init__(self):
        ts = [p.t_unix_s for p in self.points]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise DomainError("trace timestamps must be strictly increasing")

    def __len__(self):
        return len(self.points)

    @property
    def pg_db(self) -> np.ndarray:
        return np.array([p.pg_db for p in self.points])


# ---------------------------------------------------------------------------
# Codeword
# ---------------------------------------------------------------------------


def galois_lfsr(poly: tuple[int, ...], seed: int, length: int | None = None) -> np.ndarray:
    """Output bits of a right-shifting Galois LFSR for ``poly`` (exponents, highest first)."""
    order = poly[0]
    if seed <= 0 or seed >= (1 << order):
        raise DomainError(f"seed must be a nonzero {order}-bit integer, got {seed}")
    mask = 0
    for e in poly:
        mask |= 1 << (e - 1)
    if length is None:
        length = (1 << order) - 1
    out = np.empty(length, dtype=np.uint8)
    state = seed
    for n in range(length):
        bit = state & 1
        out[n] = bit
        state >>= 1
        if bit:
            state ^= mask
    return out


def glfsr14(seed: int = 0x0001) -> Codeword:
    """One full period (16,383 chips) of the degree-14 Galois m-sequence."""
    bits = galois_lfsr(GLFSR14_POLY, seed)
    return Codeword(bits=bits, order=14, taps=GLFSR14_POLY)


def bpsk(bits) -> np.ndarray:
    """0 -> +1, 1 -> -1."""
    b = np.asarray(bits, dtype=np.float64)
    return 1.0 - 2.0 * b


# ---------------------------------------------------------------------------
# Signal processing
# ---------------------------------------------------------------------------


def resampling_filter(up: int, down: int) -> np.ndarray:
    """Kaiser (beta 8.6) windowed-sinc anti-alias filter, ~64 taps per phase, unit DC gain."""
    rate = max(up, down)
    return signal.firwin(64 * rate + 1, 1.0 / rate, window=("kaiser", 8.6))


def resample(x, up: int, down: int) -> np.ndarray:
    """Rational resampling by ``up/down``; output length ``ceil(len * up / down)``."""
    if up < 1 or down < 1:
        raise DomainError("up and down must be >= 1")
    x = np.asarray(x)
    g = math.gcd(up, down)
    up, down = up // g, down // g
    if x.size == 0:
        return x.astype(np.complex128)
    if up == down == 1:
        return x.astype(np.complex128)
    return signal.resample_poly(x.astype(np.complex128), up, down, window=resampling_filter(up, down))


def _periodic_resample(ref: np.ndarray, up: int, down: int) -> np.ndarray:
    """Resample one period of a periodic sequence without edge transients."""
    n = ref.size
    if (n * up) % down:
        raise DomainError(f"period of {n} chips does not map to an integer sample count at {up}/{down}")
    out_len = n * up // down
    y = resample(np.tile(ref, 3), up, down)
    return y[out_len : 2 * out_len].real


def correlate_cir(rx, ref) -> np.ndarray:
    """Matched-filter CIR estimate over one reference period.

    Whole periods of ``rx`` are averaged coherently, then circularly
    cross-correlated with ``ref`` and normalised by the reference energy, so
    a copy of ``ref`` delayed by ``d`` with gain ``a`` yields ``a`` at lag ``d``.
    """
    rx = np.asarray(rx, dtype=np.complex128)
    ref = np.asarray(ref, dtype=np.float64)
    n = ref.size
    if n == 0 or rx.size == 0:
        raise DomainError("correlate_cir needs non-empty inputs")
    if rx.size < n:
        raise DomainError(f"rx has {rx.size} samples, fewer than one reference period ({n})")
    periods = rx.size // n
    folded = rx[: periods * n].reshape(periods, n).mean(axis=0)
    energy = float(np.dot(ref, ref))
    spec = np.fft.fft(folded) * np.conj(np.fft.fft(ref))
    return np.fft.ifft(spec) / energy


def detect_peaks(cir, threshold_db: float = 3.0, guard: int = 5, floor_db: float | None = None) -> CIRFrame:
    """Significant taps of a CIR.

    Index ``k`` qualifies when ``|cir[k]|^2`` is a strict local maximum and
    exceeds the mean power of its ``2 * guard`` circular neighbours by at
    least ``threshold_db``.  With ``floor_db`` set, it must also exceed the
    median CIR power by that margin.
    """
    cir = np.asarray(cir, dtype=np.complex128)
    n = cir.size
    if n < 2 * guard + 1:
        raise DomainError(f"CIR of length {n} is shorter than 2*guard+1 = {2 * guard + 1}")
    p = np.abs(cir) ** 2
    neigh = np.zeros(n)
    for s in range(1, guard + 1):
        neigh += np.roll(p, s) + np.roll(p, -s)
    neigh /= 2 * guard
    local_max = (p > np.roll(p, 1)) & (p > np.roll(p, -1))
    ratio = 10.0 ** (threshold_db / 10.0)
    keep = local_max & (p >= ratio * neigh) & (p > 0)
    if floor_db is not None:
        keep &= p >= np.median(p) * 10.0 ** (floor_db / 10.0)
    idx = np.flatnonzero(keep)
    return CIRFrame(delays=idx, amplitudes=cir[idx])


def received_power_db(taps) -> float:
    """``10 log10(sum |alpha|^2)``; raises :class:`NoSignalError` for an empty tap set."""
    amps = taps.amplitudes if isinstance(taps, CIRFrame) else np.asarray(taps, dtype=np.complex128)
    if amps.size == 0:
        raise NoSignalError("no signal detected")
    power = float(np.sum(np.abs(amps) ** 2))
    if power <= 0:
        raise NoSignalError("no signal detected")
    return 10.0 * math.log10(power)


def conducted_reference(p: CalibrationParams) -> float:
    """Expected conducted (cabled, attenuated) received power in dBm."""
    return p.p_tx_dbm + p.g_amp_db - p.l_cable_db - p.l_att_db


def over_the_air_power(pg_db: float, p: CalibrationParams) -> float:
    """Received power predicted for a link with path gain ``pg_db``."""
    return p.p_tx_dbm + p.g_amp_db + p.g_ant_db + pg_db


def path_gain_ota(p_rx_ota_dbm: float, p: CalibrationParams) -> float:
    """Calibrated over-the-air path gain."""
    return p_rx_ota_dbm - p.p_rx_otc_dbm - p.l_cable_db - p.l_att_db - p.g_ant_db


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------


def write_iq(path, samples, sample_rate_hz: float, center_freq_hz: float, start_unix_s: float) -> None:
    path = Path(path)
    s = np.asarray(samples, dtype=np.complex64)
    inter = np.empty(2 * s.size, dtype="<f4")
    inter[0::2] = s.real
    inter[1::2] = s.imag
    path.write_bytes(inter.tobytes())
    meta = {"sample_rate_hz": sample_rate_hz, "center_freq_hz": center_freq_hz, "start_unix_s": start_unix_s}
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=2))


def read_iq(path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    side = Path(str(path) + ".json")
    if not path.is_file():
        raise FileNotFoundError(f"IQ capture not found: {path}")
    if not side.is_file():
        raise FormatError(f"missing sidecar metadata {side}")
    meta = json.loads(side.read_text())
    for key in ("sample_rate_hz", "center_freq_hz", "start_unix_s"):
        if not isinstance(meta.get(key), (int, float)):
            raise FormatError(f"sidecar {side} lacks numeric field {key!r}")
    raw = path.read_bytes()
    if len(raw) % 8:
        raise FormatError(f"{path}: size {len(raw)} is not a whole number of I/Q float32 pairs")
    inter = np.frombuffer(raw, dtype="<f4")
    return (inter[0::2] + 1j * inter[1::2]).astype(np.complex128), meta


def read_gps(path) -> np.ndarray:
    """GPS fixes as an ``(n, 3)`` array of ``t_unix_s, lat_deg, lon_deg`` sorted by time."""
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"t_unix_s", "lat_deg", "lon_deg"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise FormatError(f"{path}: GPS log header must contain {sorted(need)}")
        rows = [(float(r["t_unix_s"]), float(r["lat_deg"]), float(r["lon_deg"])) for r in reader]
    arr = np.array(rows, dtype=np.float64).reshape(-1, 3)
    return arr[np.argsort(arr[:, 0], kind="stable")]


def write_trace(trace: PathGainTrace, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t_unix_s", "lat_deg", "lon_deg", "pg_db"])
        for p in trace.points:
            w.writerow([repr(p.t_unix_s), repr(p.lat_deg), repr(p.lon_deg), repr(p.pg_db)])


def read_trace(path) -> PathGainTrace:
    with Path(path).open(newline="") as fh:
        pts = [
            TracePoint(float(r["t_unix_s"]), float(r["lat_deg"]), float(r["lon_deg"]), float(r["pg_db"]))
            for r in csv.DictReader(fh)
        ]
    return PathGainTrace(tuple(pts))


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------


def reference_waveform(cfg: SounderConfig, sample_rate_hz: float) -> np.ndarray:
    """BPSK codeword resampled from the chip rate to the RX sample rate."""
    chips = bpsk(glfsr14(cfg.seed).bits)
    ratio = Fraction(sample_rate_hz / cfg.chip_rate_hz).limit_denominator(1000)
    return _periodic_resample(chips, ratio.numerator, ratio.denominator)


def sound_segment(segment: np.ndarray, ref: np.ndarray, cfg: SounderConfig) -> CIRFrame:
    """Significant taps of one capture segment.

    Peaks from :func:`detect_peaks` are further limited to
    ``cfg.dynamic_range_db`` below the strongest one: the band-limited
    sounding pulse has slowly decaying sidelobes that can otherwise pass the
    neighbourhood test at high SNR.
    """
    cir = correlate_cir(segment, ref)
    frame = detect_peaks(cir, cfg.threshold_db, cfg.guard, floor_db=cfg.min_snr_db)
    if frame.delays.size == 0:
        return frame
    p = np.abs(frame.amplitudes) ** 2
    keep = p >= p.max() * 10.0 ** (-cfg.dynamic_range_db / 10.0)
    return replace(frame, delays=frame.delays[keep], amplitudes=frame.amplitudes[keep])


def process_capture(iq_path, gps_path, cfg: SounderConfig) -> PathGainTrace:
    """Turn a recorded capture plus GPS log into a calibrated path-gain trace."""
    samples, meta = read_iq(iq_path)
    gps = read_gps(gps_path)
    fs = float(meta["sample_rate_hz"])
    per_second = int(math.floor(fs))
    n_seconds = samples.size // per_second
    ref = reference_waveform(cfg, fs)
    if per_second < ref.size:
        raise DomainError(f"one second ({per_second} samples) is shorter than a codeword period ({ref.size})")

    points = []
    for n in range(n_seconds):
        t = float(meta["start_unix_s"]) + n
        frame = sound_segment(samples[n * per_second : (n + 1) * per_second], ref, cfg)
        try:
            p_rx = received_power_db(frame)
        except NoSignalError:
            continue
        if gps.shape[0] == 0:
            continue
        j = int(np.argmin(np.abs(gps[:, 0] - t)))
        if abs(gps[j, 0] - t) > cfg.max_gps_offset_s:
            continue
        pg = path_gain_ota(p_rx, cfg.calibration)
        # a positive gain can only come from a miscalibrated chain
        points.append(TracePoint(t, float(gps[j, 1]), float(gps[j, 2]), min(pg, 0.0)))
    if not points:
        raise NoSignalError(f"no usable seconds in {iq_path}")
    return PathGainTrace(tuple(points))


def moving_average(trace: PathGainTrace, window: int = 5) -> PathGainTrace:
    """Centred running mean of the dB values; edge windows are truncated."""
    if window < 1 or window % 2 == 0:
        raise DomainError(f"window must be odd and >= 1, got {window}")
    vals = trace.pg_db
    half = window // 2
    n = vals.size
    out = np.empty(n)
    for i in range(n):
        out[i] = vals[max(0, i - half) : min(n, i + half + 1)].mean()
    pts = tuple(TracePoint(p.t_unix_s, p.lat_deg, p.lon_deg, float(v)) for p, v in zip(trace.points, out))
    return PathGainTrace(pts)


def synthesize_capture(
    ref: np.ndarray,
    taps_by_second,
    samples_per_second: int,
    snr_db: float | None = None,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Periodic multipath copies of ``ref``, one segment per entry of ``taps_by_second``.

    Each entry is a list of ``(delay_samples, amplitude)`` pairs; an empty
    list gives a noise-only second.  Every second starts at code phase 0, as
    with GPS-disciplined TX and RX clocks.  ``snr_db`` adds complex white
    noise whose power sits that far below the weakest tap (or below unit
    power in a tapless second).
    """
    ref = np.asarray(ref, dtype=np.float64)
    rng = rng or np.random.default_rng(0)
    reps = -(-samples_per_second // ref.size)
    segments = []
    for tap_set in taps_by_second:
        seg = np.zeros(ref.size, dtype=np.complex128)
        for delay, amp in tap_set:
            seg += amp * np.roll(ref, int(delay))
        seg = np.tile(seg, reps)[:samples_per_second]
        if snr_db is not None:
            weakest = min((abs(a) ** 2 for _, a in tap_set), default=1.0)
            sigma2 = weakest * float(np.mean(ref**2)) / 10.0 ** (snr_db / 10.0)
            noise = rng.standard_normal(samples_per_second) + 1j * rng.standard_normal(samples_per_second)
            seg = seg + noise * math.sqrt(sigma2 / 2.0)
        segments.append(seg)
    if not segments:
        return np.zeros(0, dtype=np.complex128)
    return np.concatenate(segments)
