"""Channel sounding walk-through: codeword, synthetic capture, calibrated trace.

Run:  python demos/01_sounding.py [output_dir]

1. Build the 14-bit Galois LFSR codeword and check its periodic
   autocorrelation (16383 at lag 0, -1 elsewhere).
2. Simulate a short drive: every second the path gain drops and the
   multipath changes.  The capture is written as interleaved float32 I/Q
   with a JSON sidecar, plus a GPS log.
3. Run the measurement chain (correlate, pick peaks, integrate power,
   apply the conducted calibration) and write the raw and smoothed
   path-gain traces as CSV.
"""

import math
import sys
from pathlib import Path

import numpy as np

from pgrefine.sounder import (
    CalibrationParams,
    SounderConfig,
    bpsk,
    conducted_reference,
    glfsr14,
    moving_average,
    over_the_air_power,
    process_capture,
    reference_waveform,
    synthesize_capture,
    write_iq,
    write_trace,
)

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out") / "sounding"
out.mkdir(parents=True, exist_ok=True)

# -- 1. codeword --------------------------------------------------------------
cw = glfsr14()
chips = bpsk(cw.bits)
spec = np.fft.fft(chips)
acf = np.round(np.fft.ifft(spec * np.conj(spec)).real)
print(f"codeword period {cw.period}, ones {int(cw.bits.sum())}, acf[0] {acf[0]:.0f}, off-peak {set(acf[1:].tolist())}")

# -- 2. a synthetic drive -----------------------------------------------------
# a scaled-down chip rate keeps the demo fast; one period is 21,844 samples
chip_rate = 3 * cw.period
fs = 4 * cw.period
cal = CalibrationParams(p_tx_dbm=0.0, g_amp_db=38.0, g_ant_db=16.0, l_cable_db=2.0, l_att_db=60.0)
# the conducted (cable + attenuator) reference is what the RX saw in the lab
cal = CalibrationParams(**{**cal.__dict__, "p_rx_otc_dbm": conducted_reference(cal)})
print(f"conducted reference {cal.p_rx_otc_dbm:.1f} dBm")

cfg = SounderConfig(chip_rate_hz=chip_rate, calibration=cal)
ref = reference_waveform(cfg, fs)
rng = np.random.default_rng(0)
true_pg = np.linspace(-95.0, -120.0, 12) + rng.normal(0, 2.0, 12)
seconds = []
for pg in true_pg:
    delays = np.sort(rng.choice(np.arange(10, 400), 3, replace=False))
    rel = 10 ** (np.array([0.0, -4.0, -8.0]) / 10)
    rel *= 10 ** (over_the_air_power(pg, cal) / 10) / rel.sum()
    seconds.append([(int(d), math.sqrt(w) * np.exp(2j * np.pi * rng.uniform())) for d, w in zip(delays, rel)])
iq = synthesize_capture(ref, seconds, fs, snr_db=20.0, rng=rng)
t0 = 1_700_000_000.0
write_iq(out / "capture.iq", iq, fs, 910e6, t0)
with (out / "gps.csv").open("w") as fh:
    fh.write("t_unix_s,lat_deg,lon_deg\n")
    for k in range(len(seconds)):
        fh.write(f"{t0 + k:.1f},{42.3398 + 1e-4 * k:.6f},{-71.0892 + 5e-5 * k:.6f}\n")

# -- 3. measurement chain ------------------------------------------------------
trace = process_capture(out / "capture.iq", out / "gps.csv", cfg)
smooth = moving_average(trace, 3)
write_trace(trace, out / "trace_raw.csv")
write_trace(smooth, out / "trace_smoothed.csv")
err = np.abs(trace.pg_db - true_pg)
print(f"{len(trace)} trace points, worst calibrated PG error {err.max():.3f} dB")
print(f"traces written to {out}")
