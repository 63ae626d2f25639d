//! Polyphase rational-ratio resampling with a Kaiser-windowed sinc filter.
//!
//! Fixed design (Kaiser β = 5.0, 64 taps per phase, symmetric odd length)
//! keeps the intelligibility metrics bit-stable across platforms. The filter
//! delay is compensated, so output sample m sits at input time m·down/up.

pub const KAISER_BETA: f64 = 5.0;
pub const TAPS_PER_PHASE: usize = 64;

/// Modified Bessel function of the first kind, order zero (power series).
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let half_sq = (x / 2.0) * (x / 2.0);
    for k in 1..64 {
        term *= half_sq / ((k * k) as f64);
        sum += term;
        if term < sum * 1e-18 {
            break;
        }
    }
    sum
}

fn kaiser(n: usize, len: usize, beta: f64) -> f64 {
    let m = (len - 1) as f64;
    let r = 2.0 * n as f64 / m - 1.0;
    bessel_i0(beta * (1.0 - r * r).max(0.0).sqrt()) / bessel_i0(beta)
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (std::f64::consts::PI * x).sin() / (std::f64::consts::PI * x)
    }
}

fn design_lowpass(up: usize, down: usize) -> Vec<f64> {
    let len = up * TAPS_PER_PHASE + 1; // odd, integer group delay
    let center = (len - 1) / 2;
    let fc = 0.5 / up.max(down) as f64; // cycles/sample on the upsampled grid
    let mut h: Vec<f64> = (0..len)
        .map(|n| 2.0 * fc * sinc(2.0 * fc * (n as f64 - center as f64)) * kaiser(n, len, KAISER_BETA))
        .collect();
    let dc: f64 = h.iter().sum();
    for v in h.iter_mut() {
        *v *= up as f64 / dc;
    }
    h
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Resamples by the rational factor up/down (reduced internally).
pub fn resample(x: &[f64], up: usize, down: usize) -> Vec<f64> {
    assert!(up > 0 && down > 0);
    let g = gcd(up, down);
    let (up, down) = (up / g, down / g);
    if up == down {
        return x.to_vec();
    }
    let h = design_lowpass(up, down);
    let center = (h.len() - 1) / 2;
    let out_len = (x.len() * up + down - 1) / down;
    let mut y = vec![0.0f64; out_len];
    for (m, out) in y.iter_mut().enumerate() {
        // position on the upsampled grid, delay-compensated
        let t = m * down + center;
        // x[n] contributes through h[t - n*up]
        let n_max = (t / up).min(x.len() - 1);
        let n_min = (t.saturating_sub(h.len() - 1) + up - 1) / up;
        let mut acc = 0.0;
        for n in n_min..=n_max {
            acc += x[n] * h[t - n * up];
        }
        *out = acc;
    }
    y
}
