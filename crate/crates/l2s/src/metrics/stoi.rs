//! Short-time objective intelligibility, standard and extended forms.
//!
//! Front end shared by both: resample to 10 kHz, drop frames more than 40 dB
//! below the loudest reference frame (jointly in both signals), 256-sample
//! Hann frames zero-padded to a 512-point FFT with 50% overlap, and 15
//! one-third-octave bands starting at 150 Hz. Scores are correlations of
//! 30-frame band envelopes: per-band with clipped normalization (standard),
//! or per-segment spectrograms with row- and column-normalization and no
//! clipping (extended).

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::featureio::Waveform;
use crate::metrics::resample::resample;

const FS: u32 = 10000;
const FRAME: usize = 256;
const NFFT: usize = 512;
const HOP: usize = 128;
const NUM_BANDS: usize = 15;
const MIN_FREQ: f64 = 150.0;
const SEG: usize = 30;
const DYN_RANGE_DB: f64 = 40.0;
const CLIP_DB: f64 = -15.0;
const EPS: f64 = 1e-15;

/// Hann window without zero endpoints (length-N slice of a length-(N+2)
/// symmetric window), so every frame sample carries weight.
fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|i| {
            let n = (i + 1) as f64;
            0.5 - 0.5 * (std::f64::consts::TAU * n / (len + 1) as f64).cos()
        })
        .collect()
}

fn to_10k(wave: &Waveform, len: usize) -> Vec<f64> {
    let x: Vec<f64> = wave.samples[..len].iter().map(|&s| s as f64).collect();
    if wave.sample_rate_hz == FS {
        x
    } else {
        resample(&x, FS as usize, wave.sample_rate_hz as usize)
    }
}

/// Drops frames whose windowed reference energy sits more than
/// `DYN_RANGE_DB` below the loudest frame, then rebuilds both signals by
/// overlap-adding the kept windowed frames.
fn remove_silent_frames(x: &[f64], y: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let w = hann(FRAME);
    if x.len() < FRAME {
        return (Vec::new(), Vec::new());
    }
    let num_frames = (x.len() - FRAME) / HOP + 1;
    let mut energies_db = Vec::with_capacity(num_frames);
    for f in 0..num_frames {
        let start = f * HOP;
        let e: f64 = (0..FRAME)
            .map(|i| {
                let v = x[start + i] * w[i];
                v * v
            })
            .sum();
        energies_db.push(20.0 * (e.sqrt() + EPS).log10());
    }
    let max_db = energies_db.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let kept: Vec<usize> = (0..num_frames)
        .filter(|&f| energies_db[f] + DYN_RANGE_DB > max_db)
        .collect();
    if kept.is_empty() {
        return (Vec::new(), Vec::new());
    }
    let out_len = (kept.len() - 1) * HOP + FRAME;
    let mut xs = vec![0.0; out_len];
    let mut ys = vec![0.0; out_len];
    for (k, &f) in kept.iter().enumerate() {
        let src = f * HOP;
        let dst = k * HOP;
        for i in 0..FRAME {
            xs[dst + i] += x[src + i] * w[i];
            ys[dst + i] += y[src + i] * w[i];
        }
    }
    (xs, ys)
}

/// Band-assignment matrix: each one-third-octave band owns the FFT bins
/// between its edge frequencies, edges snapped to the nearest bin.
fn third_octave_bands() -> Array2<f64> {
    let bins = NFFT / 2 + 1;
    let bin_freq: Vec<f64> = (0..bins).map(|i| i as f64 * FS as f64 / NFFT as f64).collect();
    let mut a = Array2::zeros((NUM_BANDS, bins));
    let third = 2f64.powf(1.0 / 3.0);
    for k in 0..NUM_BANDS {
        let cf = MIN_FREQ * third.powi(k as i32);
        let cf_prev = MIN_FREQ * third.powi(k as i32 - 1);
        let cf_next = MIN_FREQ * third.powi(k as i32 + 1);
        let f_lo = (cf * cf_prev).sqrt();
        let f_hi = (cf * cf_next).sqrt();
        let nearest = |target: f64| {
            bin_freq
                .iter()
                .enumerate()
                .min_by(|(_, a), (_, b)| {
                    ((*a - target).abs())
                        .partial_cmp(&(*b - target).abs())
                        .unwrap()
                })
                .map(|(i, _)| i)
                .unwrap()
        };
        let lo = nearest(f_lo);
        let hi = nearest(f_hi);
        for i in lo..hi {
            a[[k, i]] = 1.0;
        }
    }
    a
}

/// One-third-octave band envelopes, bands x frames.
fn band_envelopes(x: &[f64], bands: &Array2<f64>) -> Array2<f64> {
    let w = hann(FRAME);
    let num_frames = (x.len() - FRAME) / HOP + 1;
    let bins = NFFT / 2 + 1;
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(NFFT);
    let mut spec_pow = Array2::zeros((bins, num_frames));
    let mut buf = vec![Complex::new(0.0, 0.0); NFFT];
    for f in 0..num_frames {
        let start = f * HOP;
        for i in 0..NFFT {
            let v = if i < FRAME { x[start + i] * w[i] } else { 0.0 };
            buf[i] = Complex::new(v, 0.0);
        }
        fft.process(&mut buf);
        for (i, c) in buf.iter().take(bins).enumerate() {
            spec_pow[[i, f]] = c.norm_sqr();
        }
    }
    let mut env = Array2::zeros((NUM_BANDS, num_frames));
    for k in 0..NUM_BANDS {
        for f in 0..num_frames {
            let mut acc = 0.0;
            for i in 0..bins {
                acc += bands[[k, i]] * spec_pow[[i, f]];
            }
            env[[k, f]] = acc.sqrt();
        }
    }
    env
}

fn front_end(reference: &Waveform, degraded: &Waveform) -> Result<(Array2<f64>, Array2<f64>)> {
    if reference.sample_rate_hz != degraded.sample_rate_hz {
        return Err(Error::Validation(format!(
            "sample rates differ: {} vs {}",
            reference.sample_rate_hz, degraded.sample_rate_hz
        )));
    }
    let len = reference.samples.len().min(degraded.samples.len());
    if len == 0 {
        return Err(Error::Validation("empty waveform".into()));
    }
    let x = to_10k(reference, len);
    let y = to_10k(degraded, len);
    if x.iter().all(|&v| v == 0.0) {
        return Err(Error::Validation("all-silent reference".into()));
    }
    let (xs, ys) = remove_silent_frames(&x, &y);
    let min_samples = FRAME + (SEG - 1) * HOP;
    if xs.len() < min_samples {
        return Err(Error::InsufficientSignal(format!(
            "{} samples remain after silence removal; need {min_samples}",
            xs.len()
        )));
    }
    let bands = third_octave_bands();
    Ok((band_envelopes(&xs, &bands), band_envelopes(&ys, &bands)))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|&a| a * a).sum::<f64>().sqrt()
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let an: Vec<f64> = a.iter().map(|&v| v - ma).collect();
    let bn: Vec<f64> = b.iter().map(|&v| v - mb).collect();
    let d = norm(&an) * norm(&bn);
    if d < EPS {
        return 0.0;
    }
    an.iter().zip(&bn).map(|(x, y)| x * y).sum::<f64>() / d
}

pub fn stoi(reference: &Waveform, degraded: &Waveform) -> Result<f64> {
    let (xe, ye) = front_end(reference, degraded)?;
    let num_frames = xe.ncols();
    let clip = 10f64.powf(-CLIP_DB / 20.0);
    let mut total = 0.0;
    let mut count = 0usize;
    for m in SEG..=num_frames {
        for k in 0..NUM_BANDS {
            let x: Vec<f64> = (m - SEG..m).map(|f| xe[[k, f]]).collect();
            let y: Vec<f64> = (m - SEG..m).map(|f| ye[[k, f]]).collect();
            let scale = norm(&x) / (norm(&y) + EPS);
            let y_clipped: Vec<f64> = y
                .iter()
                .zip(&x)
                .map(|(&yv, &xv)| (yv * scale).min(xv * (1.0 + clip)))
                .collect();
            total += correlation(&x, &y_clipped);
            count += 1;
        }
    }
    Ok(total / count as f64)
}

pub fn estoi(reference: &Waveform, degraded: &Waveform) -> Result<f64> {
    let (xe, ye) = front_end(reference, degraded)?;
    let num_frames = xe.ncols();
    let mut total = 0.0;
    let mut count = 0usize;
    for m in SEG..=num_frames {
        let xs = normalize_rows_then_cols(&xe, m - SEG);
        let ys = normalize_rows_then_cols(&ye, m - SEG);
        let d: f64 = xs.iter().zip(ys.iter()).map(|(a, b)| a * b).sum();
        total += d / SEG as f64;
        count += 1;
    }
    Ok(total / count as f64)
}

/// Extracts the bands x SEG segment starting at `start`, removes row means
/// and scales rows to unit norm, then does the same per column.
fn normalize_rows_then_cols(env: &Array2<f64>, start: usize) -> Array2<f64> {
    let mut seg = Array2::zeros((NUM_BANDS, SEG));
    for k in 0..NUM_BANDS {
        for f in 0..SEG {
            seg[[k, f]] = env[[k, start + f]];
        }
    }
    for k in 0..NUM_BANDS {
        let mean: f64 = seg.row(k).sum() / SEG as f64;
        seg.row_mut(k).mapv_inplace(|v| v - mean);
        let n = seg.row(k).iter().map(|&v| v * v).sum::<f64>().sqrt();
        seg.row_mut(k).mapv_inplace(|v| v / (n + EPS));
    }
    for f in 0..SEG {
        let mean: f64 = seg.column(f).sum() / NUM_BANDS as f64;
        seg.column_mut(f).mapv_inplace(|v| v - mean);
        let n = seg.column(f).iter().map(|&v| v * v).sum::<f64>().sqrt();
        seg.column_mut(f).mapv_inplace(|v| v / (n + EPS));
    }
    seg
}
