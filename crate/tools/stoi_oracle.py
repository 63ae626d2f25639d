#!/usr/bin/env python3
"""Reference scorer for the frozen STOI/ESTOI fixture.

Independent NumPy/SciPy implementation of the published STOI (Taal et al.,
2011) and ESTOI (Jensen & Taal, 2016) algorithms. Run once against the
fixture WAV pair produced by the ignored test `write_oracle_fixture_wavs`;
the printed values are frozen into the Rust test suite with a 1e-3 tolerance.

Usage: python3 tools/stoi_oracle.py /tmp/stoi_ref.wav /tmp/stoi_deg.wav
"""

import sys
import wave

import numpy as np
from scipy.signal import resample_poly

FS = 10000
FRAME = 256
NFFT = 512
HOP = 128
NUM_BANDS = 15
MIN_FREQ = 150.0
SEG = 30
DYN_RANGE_DB = 40.0
CLIP_DB = -15.0
EPS = 1e-15


def read_wav(path):
    with wave.open(path, "rb") as w:
        assert w.getnchannels() == 1 and w.getsampwidth() == 2
        sr = w.getframerate()
        data = np.frombuffer(w.readframes(w.getnframes()), dtype="<i2")
    return data.astype(np.float64) / 32767.0, sr


def hann_no_zeros(n):
    return np.hanning(n + 2)[1:-1]


def remove_silent_frames(x, y):
    w = hann_no_zeros(FRAME)
    num_frames = (len(x) - FRAME) // HOP + 1
    frames_x = np.stack([x[i * HOP : i * HOP + FRAME] * w for i in range(num_frames)])
    frames_y = np.stack([y[i * HOP : i * HOP + FRAME] * w for i in range(num_frames)])
    energies = 20 * np.log10(np.linalg.norm(frames_x, axis=1) + EPS)
    mask = energies + DYN_RANGE_DB > energies.max()
    frames_x, frames_y = frames_x[mask], frames_y[mask]
    n = frames_x.shape[0]
    out_len = (n - 1) * HOP + FRAME
    xs = np.zeros(out_len)
    ys = np.zeros(out_len)
    for k in range(n):
        xs[k * HOP : k * HOP + FRAME] += frames_x[k]
        ys[k * HOP : k * HOP + FRAME] += frames_y[k]
    return xs, ys


def third_octave_matrix():
    bins = NFFT // 2 + 1
    f = np.arange(bins) * FS / NFFT
    a = np.zeros((NUM_BANDS, bins))
    third = 2.0 ** (1.0 / 3.0)
    for k in range(NUM_BANDS):
        cf = MIN_FREQ * third**k
        f_lo = np.sqrt(cf * MIN_FREQ * third ** (k - 1))
        f_hi = np.sqrt(cf * MIN_FREQ * third ** (k + 1))
        lo = int(np.argmin((f - f_lo) ** 2))
        hi = int(np.argmin((f - f_hi) ** 2))
        a[k, lo:hi] = 1.0
    return a


def band_envelopes(x, a):
    w = hann_no_zeros(FRAME)
    num_frames = (len(x) - FRAME) // HOP + 1
    spec = np.stack(
        [
            np.abs(np.fft.rfft(x[i * HOP : i * HOP + FRAME] * w, NFFT)) ** 2
            for i in range(num_frames)
        ]
    ).T  # bins x frames
    return np.sqrt(a @ spec)


def front_end(ref, deg, sr):
    n = min(len(ref), len(deg))
    ref, deg = ref[:n], deg[:n]
    if sr != FS:
        ref = resample_poly(ref, FS, sr)
        deg = resample_poly(deg, FS, sr)
    xs, ys = remove_silent_frames(ref, deg)
    a = third_octave_matrix()
    return band_envelopes(xs, a), band_envelopes(ys, a)


def stoi(ref, deg, sr):
    xe, ye = front_end(ref, deg, sr)
    clip = 10 ** (-CLIP_DB / 20.0)
    scores = []
    for m in range(SEG, xe.shape[1] + 1):
        x = xe[:, m - SEG : m]
        y = ye[:, m - SEG : m]
        scale = np.linalg.norm(x, axis=1, keepdims=True) / (
            np.linalg.norm(y, axis=1, keepdims=True) + EPS
        )
        y_cl = np.minimum(y * scale, x * (1 + clip))
        for k in range(NUM_BANDS):
            xk = x[k] - x[k].mean()
            yk = y_cl[k] - y_cl[k].mean()
            d = np.linalg.norm(xk) * np.linalg.norm(yk)
            scores.append(0.0 if d < EPS else float(xk @ yk / d))
    return float(np.mean(scores))


def row_col_normalize(m):
    m = m - m.mean(axis=1, keepdims=True)
    m = m / (np.linalg.norm(m, axis=1, keepdims=True) + EPS)
    m = m - m.mean(axis=0, keepdims=True)
    m = m / (np.linalg.norm(m, axis=0, keepdims=True) + EPS)
    return m


def estoi(ref, deg, sr):
    xe, ye = front_end(ref, deg, sr)
    scores = []
    for m in range(SEG, xe.shape[1] + 1):
        xn = row_col_normalize(xe[:, m - SEG : m])
        yn = row_col_normalize(ye[:, m - SEG : m])
        scores.append(float(np.sum(xn * yn)) / SEG)
    return float(np.mean(scores))


def main():
    ref, sr1 = read_wav(sys.argv[1])
    deg, sr2 = read_wav(sys.argv[2])
    assert sr1 == sr2
    print(f"stoi  = {stoi(ref, deg, sr1):.10f}")
    print(f"estoi = {estoi(ref, deg, sr1):.10f}")


if __name__ == "__main__":
    main()
