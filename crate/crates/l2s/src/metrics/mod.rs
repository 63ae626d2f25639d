//! Objective evaluation: STOI, ESTOI, and word error rate.

pub mod resample;
pub mod stoi;

pub use stoi::{estoi, stoi};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::featureio::Waveform;

/// Lowercases, turns punctuation into spaces, collapses whitespace.
pub fn normalize_transcript(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .map(|w| w.to_string())
        .collect()
}

/// Minimum word-level edit distance (substitutions, deletions, insertions).
pub fn word_edit_distance(reference: &[String], hypothesis: &[String]) -> usize {
    let (n, m) = (reference.len(), hypothesis.len());
    let mut prev: Vec<usize> = (0..=m).collect();
    let mut cur = vec![0usize; m + 1];
    for i in 1..=n {
        cur[0] = i;
        for j in 1..=m {
            let sub = prev[j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m]
}

/// Edit distance over normalized words, divided by reference word count.
pub fn wer(reference: &str, hypothesis: &str) -> Result<f64> {
    let r = normalize_transcript(reference);
    let h = normalize_transcript(hypothesis);
    if r.is_empty() {
        return Err(Error::Validation(
            "reference transcript has no words after normalization".into(),
        ));
    }
    Ok(word_edit_distance(&r, &h) as f64 / r.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceMetrics {
    pub utt_id: String,
    pub stoi: f64,
    pub estoi: f64,
    pub wer: f64,
    pub edit_count: usize,
    pub ref_word_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub per_utterance: Vec<UtteranceMetrics>,
    pub mean_stoi: f64,
    pub mean_estoi: f64,
    /// Total edits over total reference words, not a mean of per-utterance
    /// rates.
    pub corpus_wer: f64,
}

impl MetricReport {
    pub fn from_utterances(mut per_utterance: Vec<UtteranceMetrics>) -> Result<Self> {
        if per_utterance.is_empty() {
            return Err(Error::Validation("no utterances to aggregate".into()));
        }
        per_utterance.sort_by(|a, b| a.utt_id.cmp(&b.utt_id));
        let n = per_utterance.len() as f64;
        let mean_stoi = per_utterance.iter().map(|u| u.stoi).sum::<f64>() / n;
        let mean_estoi = per_utterance.iter().map(|u| u.estoi).sum::<f64>() / n;
        let total_edits: usize = per_utterance.iter().map(|u| u.edit_count).sum();
        let total_words: usize = per_utterance.iter().map(|u| u.ref_word_count).sum();
        if total_words == 0 {
            return Err(Error::Validation("zero reference words in corpus".into()));
        }
        Ok(Self {
            per_utterance,
            mean_stoi,
            mean_estoi,
            corpus_wer: total_edits as f64 / total_words as f64,
        })
    }
}

/// Seed and SNR of the frozen-oracle fixture pair scored once by an
/// out-of-process reference implementation (see tools/stoi_oracle.py).
pub const ORACLE_FIXTURE_SEED: u64 = 2026;
pub const ORACLE_FIXTURE_SNR_DB: f64 = 5.0;

/// Deterministic 2-second speech-like fixture: a harmonic complex with
/// drifting pitch and a slow amplitude envelope, plus a white-noise-degraded
/// copy at the requested SNR. Used by the metric tests and frozen oracles.
pub fn speech_like_pair(seed: u64, snr_db: f64) -> (Waveform, Waveform) {
    const SR: f64 = 16000.0;
    const DUR_SAMPLES: usize = 32000;
    // 30 harmonics of a ~120-160 Hz pitch reach past 4 kHz, so every
    // one-third-octave band of the 10 kHz analysis carries real signal.
    const NUM_HARMONICS: usize = 30;
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x73706565);
    let phases: Vec<f64> = (0..NUM_HARMONICS)
        .map(|_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v * 2.0
        })
        .collect();
    let mut phi = 0.0f64;
    let mut x = Vec::with_capacity(DUR_SAMPLES);
    for i in 0..DUR_SAMPLES {
        let t = i as f64 / SR;
        let f0 = 120.0 + 40.0 * (std::f64::consts::TAU * 2.3 * t).sin();
        phi += std::f64::consts::TAU * f0 / SR;
        let env = 0.05 + 0.95 * (std::f64::consts::TAU * 1.7 * t).sin().abs();
        let mut s = 0.0;
        for (h, &p) in phases.iter().enumerate() {
            let k = (h + 1) as f64;
            s += (phi * k + p).sin() / k;
        }
        x.push(0.12 * env * s);
    }
    let px = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let noise_power = px / 10f64.powf(snr_db / 10.0);
    let scale = noise_power.sqrt();
    let y: Vec<f64> = x
        .iter()
        .map(|&v| {
            let n: f64 = StandardNormal.sample(&mut rng);
            v + scale * n
        })
        .collect();
    let clamp = |v: f64| (v.max(-1.0).min(1.0)) as f32;
    (
        Waveform::new(x.iter().map(|&v| clamp(v)).collect(), 16000).unwrap(),
        Waveform::new(y.iter().map(|&v| clamp(v)).collect(), 16000).unwrap(),
    )
}
