//! Unit-to-waveform synthesis behind a pluggable interface.
//!
//! The toy sine generator assigns each unit id its own frequency and keeps
//! phase continuous across unit boundaries, so synthesis is exactly
//! invertible by per-frame dominant-frequency detection — enough for
//! round-trip testing of the whole pipeline without a neural vocoder.
//! External neural vocoders are fed through an out-of-process unit-file
//! hand-off instead.

use std::f64::consts::TAU;
use std::path::Path;

use crate::error::{Error, Result};
use crate::featureio::{self, UnitSequence, Waveform};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VocoderKind {
    ToySine,
    External,
}

impl VocoderKind {
    pub fn as_str(self) -> &'static str {
        match self {
            VocoderKind::ToySine => "toy_sine",
            VocoderKind::External => "external",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "toy_sine" => Ok(VocoderKind::ToySine),
            "external" => Ok(VocoderKind::External),
            other => Err(Error::Config(format!("unknown vocoder kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VocoderSpec {
    pub kind: VocoderKind,
    pub sample_rate_hz: u32,
    pub samples_per_unit: usize,
    pub unit_vocab: usize,
    pub base_freq_hz: f64,
    pub freq_step_hz: f64,
}

impl Default for VocoderSpec {
    fn default() -> Self {
        Self {
            kind: VocoderKind::ToySine,
            sample_rate_hz: 16000,
            samples_per_unit: 320,
            unit_vocab: 100,
            base_freq_hz: 200.0,
            freq_step_hz: 60.0,
        }
    }
}

impl VocoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate_hz == 0 || self.samples_per_unit == 0 || self.unit_vocab == 0 {
            return Err(Error::Config(
                "sample rate, samples_per_unit, and unit_vocab must be positive".into(),
            ));
        }
        if self.sample_rate_hz as usize % self.samples_per_unit != 0 {
            return Err(Error::Config(format!(
                "samples_per_unit {} must divide sample rate {} (integer unit rate)",
                self.samples_per_unit, self.sample_rate_hz
            )));
        }
        if self.kind == VocoderKind::ToySine {
            if self.base_freq_hz <= 0.0 || self.freq_step_hz <= 0.0 {
                return Err(Error::Config(
                    "toy sine base and step frequencies must be positive".into(),
                ));
            }
            let max_freq = self.max_freq_hz();
            let nyquist = self.sample_rate_hz as f64 / 2.0;
            if max_freq >= nyquist {
                return Err(Error::Config(format!(
                    "top unit frequency {max_freq} Hz must stay below Nyquist {nyquist} Hz"
                )));
            }
        }
        Ok(())
    }

    pub fn unit_rate_hz(&self) -> u32 {
        self.sample_rate_hz / self.samples_per_unit as u32
    }

    pub fn max_freq_hz(&self) -> f64 {
        self.base_freq_hz + (self.unit_vocab as f64 - 1.0) * self.freq_step_hz
    }

    fn freq_for(&self, unit: u32) -> f64 {
        self.base_freq_hz + unit as f64 * self.freq_step_hz
    }
}

/// Renders each unit as `samples_per_unit` samples of a 0.5-amplitude sine at
/// its assigned frequency, phase continuous across unit boundaries.
pub fn synthesize_toy(units: &UnitSequence, spec: &VocoderSpec) -> Result<Waveform> {
    spec.validate()?;
    if spec.kind != VocoderKind::ToySine {
        return Err(Error::Config("synthesize_toy needs kind = toy_sine".into()));
    }
    if let Some(&bad) = units.ids.iter().find(|&&u| u as usize >= spec.unit_vocab) {
        return Err(Error::Validation(format!(
            "unit id {bad} out of range for vocoder vocab {}",
            spec.unit_vocab
        )));
    }
    let mut samples = Vec::with_capacity(units.len() * spec.samples_per_unit);
    let mut phase = 0.0f64;
    for &u in &units.ids {
        let step = TAU * spec.freq_for(u) / spec.sample_rate_hz as f64;
        for _ in 0..spec.samples_per_unit {
            samples.push((0.5 * phase.sin()) as f32);
            phase += step;
            if phase >= TAU {
                phase -= TAU;
            }
        }
    }
    Waveform::new(samples, spec.sample_rate_hz)
}

/// Inverts [`synthesize_toy`]: per frame, correlates against every candidate
/// unit frequency and picks the strongest one.
pub fn analyze_toy(wave: &Waveform, spec: &VocoderSpec) -> Result<UnitSequence> {
    spec.validate()?;
    if spec.kind != VocoderKind::ToySine {
        return Err(Error::Config("analyze_toy needs kind = toy_sine".into()));
    }
    if wave.sample_rate_hz != spec.sample_rate_hz {
        return Err(Error::Validation(format!(
            "waveform rate {} does not match vocoder rate {}",
            wave.sample_rate_hz, spec.sample_rate_hz
        )));
    }
    if wave.samples.len() % spec.samples_per_unit != 0 {
        return Err(Error::Shape(format!(
            "waveform length {} is not a multiple of samples_per_unit {}",
            wave.samples.len(),
            spec.samples_per_unit
        )));
    }
    let n = spec.samples_per_unit;
    let mut ids = Vec::with_capacity(wave.samples.len() / n);
    for (frame_idx, frame) in wave.samples.chunks_exact(n).enumerate() {
        let mut best = 0usize;
        let mut best_mag = f64::NEG_INFINITY;
        for u in 0..spec.unit_vocab {
            let w = TAU * spec.freq_for(u as u32) / spec.sample_rate_hz as f64;
            let (mut re, mut im) = (0.0f64, 0.0f64);
            for (i, &s) in frame.iter().enumerate() {
                let ang = w * i as f64;
                re += s as f64 * ang.cos();
                im += s as f64 * ang.sin();
            }
            let mag = re * re + im * im;
            if mag > best_mag {
                best_mag = mag;
                best = u;
            }
        }
        // A genuine unit frame carries magnitude^2 near (0.25 N)^2; anything
        // orders of magnitude below that has no dominant frequency.
        if best_mag < 1e-6 * (0.25 * n as f64).powi(2) {
            return Err(Error::Validation(format!(
                "frame {frame_idx} has no dominant frequency"
            )));
        }
        ids.push(best as u32);
    }
    UnitSequence::new(ids, spec.unit_vocab as u32, spec.unit_rate_hz())
}

/// Writes the unit exchange file (plus frame-rate sidecar) consumed by an
/// externally trained unit vocoder.
pub fn export_units_for_external(
    units: &UnitSequence,
    spec: &VocoderSpec,
    path: &Path,
) -> Result<()> {
    if let Some(&bad) = units.ids.iter().find(|&&u| u as usize >= spec.unit_vocab) {
        return Err(Error::Validation(format!(
            "unit id {bad} out of range for vocoder vocab {}",
            spec.unit_vocab
        )));
    }
    featureio::write_units(units, path)
}
