//! End-to-end orchestration behind the `l2s` binary: dataset preparation,
//! codebook fitting, training, inference, synthesis, evaluation, and the
//! ablation harness. Every command is deterministic given its seed, so
//! re-running on unchanged inputs reproduces outputs byte for byte.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::featureio::{
    load_manifest, make_split, read_features, read_units, read_wav, write_features,
    write_manifest, write_units, write_wav, FeatureKind, FeatureSequence, Split,
    SyntheticGenerator, SyntheticTaskSpec, UnitSequence, UtteranceRecord,
    LIP_FRAME_RATE_HZ, SPEECH_FRAME_RATE_HZ,
};
use crate::metrics::{self, MetricReport, UtteranceMetrics};
use crate::objectives::{l1_features, CtcTokenizer, LossWeights};
use crate::quantizer::{
    assign, fit_kmeans, load_codebook, save_codebook, Codebook, DEFAULT_MAX_ITERS, DEFAULT_TOL,
};
use crate::s2smodel::{forward, load_model, LossSpec, ModelConfig, S2SModel, Variant};
use crate::trainer::{self, ctc_tokens_if_feasible, Example, ExampleInput, TrainConfig, TrainOutcome};
use crate::vocoder::{export_units_for_external, synthesize_toy, VocoderKind, VocoderSpec};

// ---------------------------------------------------------------------------
// Config overlays
// ---------------------------------------------------------------------------

/// Overlays config-file keys onto the model defaults; unknown keys are left
/// for the other config consumers.
pub fn model_config_from_kv(kv: &HashMap<String, String>) -> Result<ModelConfig> {
    let mut merged: HashMap<String, String> = ModelConfig::default().to_kv().into_iter().collect();
    for (k, v) in kv {
        if merged.contains_key(k) {
            merged.insert(k.clone(), v.clone());
        }
    }
    ModelConfig::from_kv(&merged)
}

/// Overlays config-file keys onto the toy vocoder defaults.
pub fn vocoder_spec_from_kv(kv: &HashMap<String, String>) -> Result<VocoderSpec> {
    let mut spec = VocoderSpec::default();
    fn get<T: std::str::FromStr>(kv: &HashMap<String, String>, key: &str, default: T) -> Result<T> {
        match kv.get(key) {
            None => Ok(default),
            Some(raw) => raw
                .parse::<T>()
                .map_err(|_| Error::Config(format!("bad value for config key '{key}'"))),
        }
    }
    if let Some(raw) = kv.get("vocoder_kind") {
        spec.kind = VocoderKind::parse(raw)?;
    }
    spec.sample_rate_hz = get(kv, "vocoder_sample_rate_hz", spec.sample_rate_hz)?;
    spec.samples_per_unit = get(kv, "vocoder_samples_per_unit", spec.samples_per_unit)?;
    spec.unit_vocab = get(kv, "vocoder_unit_vocab", spec.unit_vocab)?;
    spec.base_freq_hz = get(kv, "vocoder_base_freq_hz", spec.base_freq_hz)?;
    spec.freq_step_hz = get(kv, "vocoder_freq_step_hz", spec.freq_step_hz)?;
    spec.validate()?;
    Ok(spec)
}

// ---------------------------------------------------------------------------
// prepare
// ---------------------------------------------------------------------------

/// Data-preparation contract. Feature extraction itself happens upstream;
/// this only pins the rates and shapes the toolkit relies on.
#[derive(Debug, Clone, PartialEq)]
pub struct PrepConfig {
    pub video_fps: u32,
    pub audio_sample_rate_hz: u32,
    /// Mouth-centered region of interest (width, height) in pixels.
    pub roi_pixels: (u32, u32),
    pub lip_dim: usize,
    pub speech_dim: usize,
}

impl Default for PrepConfig {
    fn default() -> Self {
        Self {
            video_fps: 25,
            audio_sample_rate_hz: 16000,
            roi_pixels: (96, 96),
            lip_dim: 768,
            speech_dim: 768,
        }
    }
}

impl PrepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.video_fps != LIP_FRAME_RATE_HZ {
            return Err(Error::Config(format!(
                "video_fps {} does not match the {LIP_FRAME_RATE_HZ} Hz lip-frame contract",
                self.video_fps
            )));
        }
        if self.audio_sample_rate_hz % SPEECH_FRAME_RATE_HZ != 0 {
            return Err(Error::Config(format!(
                "audio sample rate {} is not a multiple of the {SPEECH_FRAME_RATE_HZ} Hz unit rate",
                self.audio_sample_rate_hz
            )));
        }
        if self.roi_pixels.0 == 0 || self.roi_pixels.1 == 0 {
            return Err(Error::Config("roi_pixels must be positive".into()));
        }
        if self.lip_dim == 0 || self.speech_dim == 0 {
            return Err(Error::Config("feature dims must be positive".into()));
        }
        Ok(())
    }

    pub fn from_kv(kv: &HashMap<String, String>) -> Result<Self> {
        let mut cfg = Self::default();
        fn get<T: std::str::FromStr>(
            kv: &HashMap<String, String>,
            key: &str,
            default: T,
        ) -> Result<T> {
            match kv.get(key) {
                None => Ok(default),
                Some(raw) => raw
                    .parse::<T>()
                    .map_err(|_| Error::Config(format!("bad value for config key '{key}'"))),
            }
        }
        cfg.video_fps = get(kv, "video_fps", cfg.video_fps)?;
        cfg.audio_sample_rate_hz = get(kv, "audio_sample_rate_hz", cfg.audio_sample_rate_hz)?;
        cfg.roi_pixels.0 = get(kv, "roi_width", cfg.roi_pixels.0)?;
        cfg.roi_pixels.1 = get(kv, "roi_height", cfg.roi_pixels.1)?;
        cfg.lip_dim = get(kv, "lip_dim", cfg.lip_dim)?;
        cfg.speech_dim = get(kv, "speech_dim", cfg.speech_dim)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrepViolation {
    pub utt_id: String,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrepReport {
    pub total_utterances: usize,
    pub violations: Vec<PrepViolation>,
    pub splits_assigned: bool,
    /// Validated manifest (with splits) written under the output directory.
    pub manifest_path: PathBuf,
    pub report_path: PathBuf,
}

fn check_record(rec: &UtteranceRecord, prep: &PrepConfig) -> Vec<String> {
    let mut problems = Vec::new();
    let lip = match read_features(&rec.lip_feature_path) {
        Ok(f) => Some(f),
        Err(e) => {
            problems.push(format!("lip features unreadable: {e}"));
            None
        }
    };
    let speech = match read_features(&rec.speech_feature_path) {
        Ok(f) => Some(f),
        Err(e) => {
            problems.push(format!("speech features unreadable: {e}"));
            None
        }
    };
    if let Some(lip) = &lip {
        if lip.frame_rate_hz != LIP_FRAME_RATE_HZ {
            problems.push(format!(
                "lip frame rate {} Hz, expected {LIP_FRAME_RATE_HZ}",
                lip.frame_rate_hz
            ));
        }
        if lip.dim() != prep.lip_dim {
            problems.push(format!("lip dim {}, expected {}", lip.dim(), prep.lip_dim));
        }
    }
    if let Some(speech) = &speech {
        if speech.frame_rate_hz != SPEECH_FRAME_RATE_HZ {
            problems.push(format!(
                "speech frame rate {} Hz, expected {SPEECH_FRAME_RATE_HZ}",
                speech.frame_rate_hz
            ));
        }
        if speech.dim() != prep.speech_dim {
            problems.push(format!(
                "speech dim {}, expected {}",
                speech.dim(),
                prep.speech_dim
            ));
        }
    }
    if let (Some(lip), Some(speech)) = (&lip, &speech) {
        let t = lip.num_frames();
        let s = speech.num_frames();
        if s + 1 < 2 * t || s > 2 * t + 1 {
            problems.push(format!(
                "speech length {s} outside [{}, {}] for {t} lip frames",
                2 * t - 1,
                2 * t + 1
            ));
        }
    }
    problems
}

/// Validates rates, dims, and the 2:1 length contract for every manifest row;
/// assigns 90/5/5 splits when the manifest carries none. Hard-fails (after
/// writing the report) if more than 1% of utterances violate the contract.
pub fn cmd_prepare(
    manifest_path: &Path,
    prep: &PrepConfig,
    seed: u64,
    out_dir: &Path,
) -> Result<PrepReport> {
    prep.validate()?;
    let mut records = load_manifest(manifest_path)?;
    if records.is_empty() {
        return Err(Error::Validation("manifest has no utterances".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut violations = Vec::new();
    for rec in &records {
        for detail in check_record(rec, prep) {
            violations.push(PrepViolation {
                utt_id: rec.utt_id.clone(),
                detail,
            });
        }
    }

    let missing = records.iter().filter(|r| r.split.is_none()).count();
    let splits_assigned = missing > 0;
    if splits_assigned {
        if missing != records.len() {
            return Err(Error::Validation(format!(
                "{missing} of {} utterances lack a split; either all or none may",
                records.len()
            )));
        }
        let ids: Vec<String> = records.iter().map(|r| r.utt_id.clone()).collect();
        let assignment: HashMap<String, Split> = make_split(&ids, (0.90, 0.05, 0.05), seed)?
            .into_iter()
            .collect();
        for rec in &mut records {
            rec.split = Some(assignment[&rec.utt_id]);
        }
    }

    let manifest_out = out_dir.join("manifest.tsv");
    let report_path = out_dir.join("prepare_report.tsv");
    write_manifest(&records, &manifest_out)?;

    let invalid_utts: std::collections::HashSet<&str> =
        violations.iter().map(|v| v.utt_id.as_str()).collect();
    let mut report = String::from("utt_id\tviolation\n");
    for v in &violations {
        report.push_str(&format!("{}\t{}\n", v.utt_id, v.detail));
    }
    report.push_str(&format!(
        "# utterances = {}\n# invalid_utterances = {}\n# splits_assigned = {}\n{}",
        records.len(),
        invalid_utts.len(),
        splits_assigned,
        provenance_lines(seed),
    ));
    fs::write(&report_path, report).map_err(|e| Error::io(&report_path, e))?;

    if invalid_utts.len() * 100 > records.len() {
        return Err(Error::Validation(format!(
            "{} of {} utterances violate the data contract (> 1%); see {}",
            invalid_utts.len(),
            records.len(),
            report_path.display()
        )));
    }
    Ok(PrepReport {
        total_utterances: records.len(),
        violations,
        splits_assigned,
        manifest_path: manifest_out,
        report_path,
    })
}

// ---------------------------------------------------------------------------
// Synthetic dataset materialization
// ---------------------------------------------------------------------------

/// Writes a synthetic dataset (feature files + manifest without splits) under
/// `dir`. Utterance lengths are drawn deterministically from the task seed.
pub fn write_synthetic_dataset(
    spec: &SyntheticTaskSpec,
    num_utterances: usize,
    min_symbols: usize,
    max_symbols: usize,
    dir: &Path,
) -> Result<PathBuf> {
    if num_utterances == 0 {
        return Err(Error::Validation("num_utterances must be >= 1".into()));
    }
    if min_symbols == 0 || max_symbols < min_symbols {
        return Err(Error::Config(format!(
            "bad symbol count range [{min_symbols}, {max_symbols}]"
        )));
    }
    let gen = SyntheticGenerator::new(spec.clone())?;
    let feat_dir = dir.join("feats");
    fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;

    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&spec.seed.to_le_bytes());
    key[16] = 0x6c; // utterance-length stream
    let mut len_rng = ChaCha20Rng::from_seed(key);
    let span = (max_symbols - min_symbols + 1) as u64;

    let mut records = Vec::with_capacity(num_utterances);
    for i in 0..num_utterances {
        let n = min_symbols + (len_rng.next_u64() % span) as usize;
        let (lip, speech, _units, transcript) = gen.utterance(i as u64, n)?;
        let utt_id = format!("utt{i:05}");
        let lip_path = feat_dir.join(format!("{utt_id}.lip.l2sf"));
        let speech_path = feat_dir.join(format!("{utt_id}.speech.l2sf"));
        write_features(&lip, &lip_path)?;
        write_features(&speech, &speech_path)?;
        records.push(UtteranceRecord {
            utt_id,
            lip_feature_path: lip_path,
            speech_feature_path: speech_path,
            transcript,
            split: None,
        });
    }
    let manifest_path = dir.join("manifest.tsv");
    write_manifest(&records, &manifest_path)?;
    Ok(manifest_path)
}

fn synthetic_spec_from_kv(kv: &HashMap<String, String>, seed: u64) -> Result<SyntheticTaskSpec> {
    fn get<T: std::str::FromStr>(kv: &HashMap<String, String>, key: &str, default: T) -> Result<T> {
        match kv.get(key) {
            None => Ok(default),
            Some(raw) => raw
                .parse::<T>()
                .map_err(|_| Error::Config(format!("bad value for config key '{key}'"))),
        }
    }
    let d = SyntheticTaskSpec::default();
    Ok(SyntheticTaskSpec {
        vocab_size: get(kv, "synthetic_vocab", d.vocab_size)?,
        lip_dim: get(kv, "lip_dim", d.lip_dim)?,
        speech_dim: get(kv, "speech_dim", d.speech_dim)?,
        frames_per_symbol_lip: d.frames_per_symbol_lip,
        frames_per_symbol_speech: d.frames_per_symbol_speech,
        noise_sigma: get(kv, "synthetic_noise_sigma", d.noise_sigma)?,
        seed,
    })
}

/// `prepare --synthetic`: materializes the synthetic task under `out_dir`
/// and then runs the normal preparation checks on it.
pub fn cmd_prepare_synthetic(
    kv: &HashMap<String, String>,
    seed: u64,
    out_dir: &Path,
) -> Result<PrepReport> {
    let spec = synthetic_spec_from_kv(kv, seed)?;
    fn get(kv: &HashMap<String, String>, key: &str, default: usize) -> Result<usize> {
        match kv.get(key) {
            None => Ok(default),
            Some(raw) => raw
                .parse()
                .map_err(|_| Error::Config(format!("bad value for config key '{key}'"))),
        }
    }
    let num = get(kv, "synthetic_num_utterances", 200)?;
    let min_s = get(kv, "synthetic_min_symbols", 4)?;
    let max_s = get(kv, "synthetic_max_symbols", 8)?;
    let manifest = write_synthetic_dataset(&spec, num, min_s, max_s, out_dir)?;
    let mut prep = PrepConfig::from_kv(kv)?;
    prep.lip_dim = spec.lip_dim;
    prep.speech_dim = spec.speech_dim;
    cmd_prepare(&manifest, &prep, seed, out_dir)
}

// ---------------------------------------------------------------------------
// Dataset loading
// ---------------------------------------------------------------------------

/// Fully-loaded manifest row; the unit of work for training and evaluation.
#[derive(Debug, Clone)]
pub struct LoadedUtterance {
    pub utt_id: String,
    pub lip: FeatureSequence,
    pub speech: FeatureSequence,
    pub transcript: String,
    pub split: Split,
}

pub fn load_utterances(records: &[UtteranceRecord]) -> Result<Vec<LoadedUtterance>> {
    records
        .iter()
        .map(|rec| {
            let split = rec.split.ok_or_else(|| {
                Error::Validation(format!(
                    "utterance '{}' has no split; run prepare first",
                    rec.utt_id
                ))
            })?;
            Ok(LoadedUtterance {
                utt_id: rec.utt_id.clone(),
                lip: read_features(&rec.lip_feature_path)?,
                speech: read_features(&rec.speech_feature_path)?,
                transcript: rec.transcript.clone(),
                split,
            })
        })
        .collect()
}

pub fn split_utterances<'a>(utts: &'a [LoadedUtterance], split: Split) -> Vec<&'a LoadedUtterance> {
    utts.iter().filter(|u| u.split == split).collect()
}

/// Pads (by repeating the last id) or trims speech-side units to the model's
/// exact 2T output grid.
fn fit_units_to(mut units: UnitSequence, len: usize) -> Result<UnitSequence> {
    if units.is_empty() {
        return Err(Error::Validation("empty unit target".into()));
    }
    let last = *units.ids.last().expect("non-empty");
    units.ids.resize(len, last);
    UnitSequence::new(units.ids, units.codebook_size, units.frame_rate_hz)
}

/// Builds trainer examples for one loss variant. The units variant needs both
/// codebooks; features_ctc needs the token inventory.
pub fn examples_for_variant(
    utts: &[&LoadedUtterance],
    variant: Variant,
    lip_codebook: Option<&Codebook>,
    speech_codebook: Option<&Codebook>,
    tokenizer: Option<&CtcTokenizer>,
    weights: &LossWeights,
) -> Result<Vec<Example>> {
    utts.iter()
        .map(|u| {
            let (input, loss) = match variant {
                Variant::Features => (
                    ExampleInput::Features(u.lip.clone()),
                    LossSpec::Features {
                        target: u.speech.clone(),
                    },
                ),
                Variant::FeaturesCtc => {
                    let tok = tokenizer.ok_or_else(|| {
                        Error::Config("features_ctc needs a token inventory".into())
                    })?;
                    let tokens = ctc_tokens_if_feasible(
                        tok.encode(&u.transcript)?,
                        2 * u.lip.num_frames(),
                    );
                    (
                        ExampleInput::Features(u.lip.clone()),
                        LossSpec::FeaturesCtc {
                            target: u.speech.clone(),
                            tokens,
                            weights: *weights,
                        },
                    )
                }
                Variant::Units => {
                    let lip_cb = lip_codebook.ok_or_else(|| {
                        Error::Config("units variant needs a lip codebook".into())
                    })?;
                    let speech_cb = speech_codebook.ok_or_else(|| {
                        Error::Config("units variant needs a speech codebook".into())
                    })?;
                    let lip_units = assign(lip_cb, &u.lip)?;
                    let targets =
                        fit_units_to(assign(speech_cb, &u.speech)?, 2 * lip_units.len())?;
                    (ExampleInput::Units(lip_units), LossSpec::Units { targets })
                }
            };
            Ok(Example {
                utt_id: u.utt_id.clone(),
                input,
                loss,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// fit-kmeans
// ---------------------------------------------------------------------------

/// Fits a codebook on every frame of one feature stream restricted to one
/// split, and saves it.
pub fn cmd_fit_kmeans(
    manifest_path: &Path,
    stream: FeatureKind,
    k: usize,
    split: Split,
    seed: u64,
    output: &Path,
) -> Result<Codebook> {
    let records = load_manifest(manifest_path)?;
    let utts = load_utterances(&records)?;
    let selected = split_utterances(&utts, split);
    if selected.is_empty() {
        return Err(Error::Validation(format!(
            "no utterances in split '{}'",
            split.as_str()
        )));
    }
    let cb = fit_codebook_on(&selected, stream, k, seed)?;
    save_codebook(&cb, output)?;
    Ok(cb)
}

fn fit_codebook_on(
    utts: &[&LoadedUtterance],
    stream: FeatureKind,
    k: usize,
    seed: u64,
) -> Result<Codebook> {
    fn pick<'a>(u: &'a LoadedUtterance, stream: FeatureKind) -> &'a FeatureSequence {
        match stream {
            FeatureKind::Lip => &u.lip,
            FeatureKind::Speech => &u.speech,
        }
    }
    let dim = pick(utts[0], stream).dim();
    let total: usize = utts.iter().map(|u| pick(u, stream).num_frames()).sum();
    let mut frames = Array2::<f32>::zeros((total, dim));
    let mut row = 0;
    for u in utts {
        let f = pick(u, stream);
        frames
            .slice_mut(ndarray::s![row..row + f.num_frames(), ..])
            .assign(&f.frames);
        row += f.num_frames();
    }
    fit_kmeans(&frames, k, stream, seed, DEFAULT_MAX_ITERS, DEFAULT_TOL)
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

/// Trains (or resumes) from a prepared manifest. All knobs come from the
/// shared key-value config; the model variant follows the training variant
/// unless the config pins it separately.
pub fn cmd_train(
    kv: &HashMap<String, String>,
    manifest_path: &Path,
    out_dir: &Path,
    resume: bool,
) -> Result<TrainOutcome> {
    let train_cfg = TrainConfig::from_kv(kv)?;
    let mut model_cfg = model_config_from_kv(kv)?;
    if !kv.contains_key("variant") {
        model_cfg.variant = train_cfg.variant;
    }

    let records = load_manifest(manifest_path)?;
    let utts = load_utterances(&records)?;
    let train_utts = split_utterances(&utts, Split::Train);
    let val_utts = split_utterances(&utts, Split::Val);

    let lip_cb = match kv.get("lip_codebook") {
        Some(p) => Some(load_codebook(Path::new(p))?),
        None => None,
    };
    let speech_cb = match kv.get("speech_codebook") {
        Some(p) => Some(load_codebook(Path::new(p))?),
        None => None,
    };
    let tokenizer = if model_cfg.variant == Variant::FeaturesCtc {
        let tok = CtcTokenizer::from_corpus(train_utts.iter().map(|u| u.transcript.as_str()));
        model_cfg.ctc_vocab = tok.vocab_size();
        Some(tok)
    } else {
        None
    };
    model_cfg.validate()?;

    let train_set = examples_for_variant(
        &train_utts,
        model_cfg.variant,
        lip_cb.as_ref(),
        speech_cb.as_ref(),
        tokenizer.as_ref(),
        &train_cfg.weights,
    )?;
    let val_set = examples_for_variant(
        &val_utts,
        model_cfg.variant,
        lip_cb.as_ref(),
        speech_cb.as_ref(),
        tokenizer.as_ref(),
        &train_cfg.weights,
    )?;

    if resume {
        trainer::resume(&train_cfg, &model_cfg, &train_set, &val_set, out_dir)
    } else {
        trainer::train(&train_cfg, &model_cfg, &train_set, &val_set, out_dir)
    }
}

// ---------------------------------------------------------------------------
// infer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InferMode {
    /// Forward to decoder features, then quantize with the speech codebook.
    FeaturesThenQuantize,
    /// Argmax over the unit head.
    UnitsDirect,
}

impl InferMode {
    pub fn as_str(self) -> &'static str {
        match self {
            InferMode::FeaturesThenQuantize => "features_then_quantize",
            InferMode::UnitsDirect => "units_direct",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "features_then_quantize" => Ok(InferMode::FeaturesThenQuantize),
            "units_direct" => Ok(InferMode::UnitsDirect),
            other => Err(Error::Config(format!("unknown inference mode '{other}'"))),
        }
    }
}

fn argmax_units(logits: &Array2<f64>, vocab: usize) -> Result<UnitSequence> {
    let ids = logits
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best as u32
        })
        .collect();
    UnitSequence::new(ids, vocab as u32, SPEECH_FRAME_RATE_HZ)
}

fn features_from_decoder(dec: &Array2<f64>) -> Result<FeatureSequence> {
    FeatureSequence::new(
        dec.mapv(|v| v as f32),
        SPEECH_FRAME_RATE_HZ,
        FeatureKind::Speech,
    )
}

/// Runs one utterance through a loaded model. Returns the predicted units and,
/// for the feature variants, the predicted feature sequence.
pub fn infer_utterance(
    model: &S2SModel,
    input: ExampleInput,
    mode: InferMode,
    speech_codebook: Option<&Codebook>,
) -> Result<(UnitSequence, Option<FeatureSequence>)> {
    match mode {
        InferMode::UnitsDirect => {
            if model.config.variant != Variant::Units {
                return Err(Error::Config(format!(
                    "units_direct mode needs a units checkpoint, got variant '{}'",
                    model.config.variant.as_str()
                )));
            }
            let units = match &input {
                ExampleInput::Units(u) => u.clone(),
                ExampleInput::Features(_) => {
                    return Err(Error::Config(
                        "units_direct mode consumes lip units, not features".into(),
                    ))
                }
            };
            let out = forward(model, &crate::s2smodel::ModelInput::Units(&units))?;
            let logits = out.unit_logits.expect("units variant emits unit logits");
            Ok((argmax_units(&logits, model.config.unit_vocab)?, None))
        }
        InferMode::FeaturesThenQuantize => {
            if model.config.variant == Variant::Units {
                return Err(Error::Config(
                    "features_then_quantize mode needs a feature checkpoint".into(),
                ));
            }
            let feats = match &input {
                ExampleInput::Features(f) => f.clone(),
                ExampleInput::Units(_) => {
                    return Err(Error::Config(
                        "features_then_quantize mode consumes lip features".into(),
                    ))
                }
            };
            let cb = speech_codebook.ok_or_else(|| {
                Error::Config("features_then_quantize mode needs a speech codebook".into())
            })?;
            let out = forward(model, &crate::s2smodel::ModelInput::Features(&feats))?;
            let dec = out
                .decoder_features
                .expect("feature variants emit decoder features");
            let pred = features_from_decoder(&dec)?;
            let units = assign(cb, &pred)?;
            Ok((units, Some(pred)))
        }
    }
}

/// CLI wrapper around [`infer_utterance`]: reads the input file, writes the
/// unit output and (optionally) the predicted features.
#[allow(clippy::too_many_arguments)]
pub fn cmd_infer(
    checkpoint: &Path,
    input_path: &Path,
    mode: InferMode,
    codebook_path: Option<&Path>,
    output: &Path,
    features_output: Option<&Path>,
) -> Result<UnitSequence> {
    let model = load_model(checkpoint)?;
    let input = match mode {
        InferMode::UnitsDirect => ExampleInput::Units(read_units(input_path)?),
        InferMode::FeaturesThenQuantize => ExampleInput::Features(read_features(input_path)?),
    };
    let cb = match codebook_path {
        Some(p) => Some(load_codebook(p)?),
        None => None,
    };
    let (units, pred) = infer_utterance(&model, input, mode, cb.as_ref())?;
    write_units(&units, output)?;
    if let Some(path) = features_output {
        let pred = pred.ok_or_else(|| {
            Error::Config("units_direct mode produces no feature output".into())
        })?;
        write_features(&pred, path)?;
    }
    Ok(units)
}

// ---------------------------------------------------------------------------
// synthesize
// ---------------------------------------------------------------------------

/// Toy mode writes a WAV; external mode writes the unit exchange file for an
/// out-of-process vocoder and no audio.
pub fn cmd_synthesize(units_path: &Path, spec: &VocoderSpec, output: &Path) -> Result<()> {
    let units = read_units(units_path)?;
    match spec.kind {
        VocoderKind::ToySine => {
            let wave = synthesize_toy(&units, spec)?;
            write_wav(&wave, output)
        }
        VocoderKind::External => export_units_for_external(&units, spec, output),
    }
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

/// Scores every manifest row: reference WAVs in `ref_dir`, synthesized WAVs
/// in `deg_dir`, hypothesis transcripts (`<utt_id>.txt`) in `hyp_dir`.
pub fn cmd_evaluate(
    manifest_path: &Path,
    ref_dir: &Path,
    deg_dir: &Path,
    hyp_dir: &Path,
    asr_label: &str,
    seed: u64,
    report_path: &Path,
) -> Result<MetricReport> {
    let records = load_manifest(manifest_path)?;
    if records.is_empty() {
        return Err(Error::Validation("manifest has no utterances".into()));
    }
    let mut per_utt = Vec::with_capacity(records.len());
    for rec in &records {
        let ref_wav = read_wav(&ref_dir.join(format!("{}.wav", rec.utt_id)))?;
        let deg_wav = read_wav(&deg_dir.join(format!("{}.wav", rec.utt_id)))?;
        let hyp_path = hyp_dir.join(format!("{}.txt", rec.utt_id));
        let hyp = fs::read_to_string(&hyp_path).map_err(|e| Error::io(&hyp_path, e))?;

        let ref_words = metrics::normalize_transcript(&rec.transcript);
        if ref_words.is_empty() {
            return Err(Error::Validation(format!(
                "utterance '{}' has an empty reference transcript",
                rec.utt_id
            )));
        }
        let hyp_words = metrics::normalize_transcript(&hyp);
        let edits = metrics::word_edit_distance(&ref_words, &hyp_words);
        per_utt.push(UtteranceMetrics {
            utt_id: rec.utt_id.clone(),
            stoi: metrics::stoi(&ref_wav, &deg_wav)?,
            estoi: metrics::estoi(&ref_wav, &deg_wav)?,
            wer: edits as f64 / ref_words.len() as f64,
            edit_count: edits,
            ref_word_count: ref_words.len(),
        });
    }
    let report = MetricReport::from_utterances(per_utt)?;

    let mut out = String::from("utt_id\tstoi\testoi\twer\n");
    for u in &report.per_utterance {
        out.push_str(&format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\n",
            u.utt_id, u.stoi, u.estoi, u.wer
        ));
    }
    out.push_str(&format!(
        "# mean_stoi = {:.6}\n# mean_estoi = {:.6}\n# corpus_wer = {:.6}\n# asr = {}\n{}",
        report.mean_stoi,
        report.mean_estoi,
        report.corpus_wer,
        asr_label,
        provenance_lines(seed),
    ));
    fs::write(report_path, out).map_err(|e| Error::io(report_path, e))?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationVariant {
    /// Lip units remapped to the speech vocabulary by marginal frequency
    /// matching; no sequence model.
    NoS2sPretrained,
    /// Lip units remapped by per-unit co-occurrence voting on aligned train
    /// pairs; no sequence model.
    NoS2sFinetuned,
    S2sUnits,
    S2sFeatures,
    S2sFeaturesCtc,
}

pub const ALL_ABLATION_VARIANTS: [AblationVariant; 5] = [
    AblationVariant::NoS2sPretrained,
    AblationVariant::NoS2sFinetuned,
    AblationVariant::S2sUnits,
    AblationVariant::S2sFeatures,
    AblationVariant::S2sFeaturesCtc,
];

impl AblationVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            AblationVariant::NoS2sPretrained => "no_s2s_pretrained",
            AblationVariant::NoS2sFinetuned => "no_s2s_finetuned",
            AblationVariant::S2sUnits => "s2s_units",
            AblationVariant::S2sFeatures => "s2s_features",
            AblationVariant::S2sFeaturesCtc => "s2s_features_ctc",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        ALL_ABLATION_VARIANTS
            .iter()
            .copied()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation variant '{s}'")))
    }

    /// The trained-model variant behind this row, if any.
    pub fn s2s_variant(self) -> Option<Variant> {
        match self {
            AblationVariant::NoS2sPretrained | AblationVariant::NoS2sFinetuned => None,
            AblationVariant::S2sUnits => Some(Variant::Units),
            AblationVariant::S2sFeatures => Some(Variant::Features),
            AblationVariant::S2sFeaturesCtc => Some(Variant::FeaturesCtc),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AblationPlan {
    pub variants: Vec<AblationVariant>,
    pub seed: u64,
}

impl AblationPlan {
    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() {
            return Err(Error::Config("ablation plan needs at least one variant".into()));
        }
        for (i, v) in self.variants.iter().enumerate() {
            if self.variants[..i].contains(v) {
                return Err(Error::Config(format!(
                    "duplicate ablation variant '{}'",
                    v.as_str()
                )));
            }
        }
        Ok(())
    }
}

/// One table row; higher stoi/estoi/accuracy and lower l1 are better.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub stoi: f64,
    pub estoi: f64,
    /// Held-out per-frame L1 (summed over feature dims) of the reconstruction.
    pub heldout_l1: f64,
    /// Fraction of held-out speech units predicted exactly.
    pub unit_accuracy: f64,
}

/// Shared evaluation fixture: codebooks, lip-to-speech unit remap tables, the
/// evaluation utterances, and the vocoder used for intelligibility scoring.
#[derive(Debug, Clone)]
pub struct AblationData {
    pub lip_codebook: Codebook,
    pub speech_codebook: Codebook,
    /// Rank-matched marginal frequency map, lip unit -> speech unit.
    pub remap_marginal: Vec<u32>,
    /// Aligned co-occurrence majority map, lip unit -> speech unit.
    pub remap_paired: Vec<u32>,
    pub eval: Vec<LoadedUtterance>,
    pub vocoder: VocoderSpec,
}

/// Fits codebooks and remap tables on the train split and keeps the given
/// split for evaluation.
pub fn build_ablation_data(
    utts: &[LoadedUtterance],
    k: usize,
    seed: u64,
    eval_split: Split,
    vocoder: VocoderSpec,
) -> Result<AblationData> {
    let train = split_utterances(utts, Split::Train);
    let eval: Vec<LoadedUtterance> = split_utterances(utts, eval_split)
        .into_iter()
        .cloned()
        .collect();
    if train.is_empty() {
        return Err(Error::Validation("no train utterances for ablation".into()));
    }
    if eval.is_empty() {
        return Err(Error::Validation(format!(
            "no utterances in evaluation split '{}'",
            eval_split.as_str()
        )));
    }
    let lip_codebook = fit_codebook_on(&train, FeatureKind::Lip, k, seed)?;
    let speech_codebook = fit_codebook_on(&train, FeatureKind::Speech, k, seed)?;

    // Aligned counts over the train split: the lip unit at 25 Hz covers two
    // speech-unit slots at 50 Hz.
    let mut lip_counts = vec![0usize; k];
    let mut speech_counts = vec![0usize; k];
    let mut joint = vec![vec![0usize; k]; k];
    for u in &train {
        let lu = assign(&lip_codebook, &u.lip)?;
        let su = assign(&speech_codebook, &u.speech)?;
        for &id in &su.ids {
            speech_counts[id as usize] += 1;
        }
        for &id in &lu.ids {
            lip_counts[id as usize] += 1;
        }
        let n = su.len().min(2 * lu.len());
        for t in 0..n {
            joint[lu.ids[t / 2] as usize][su.ids[t] as usize] += 1;
        }
    }

    // Marginal map: i-th most frequent lip unit -> i-th most frequent speech
    // unit (ties broken by id).
    let rank = |counts: &[usize]| -> Vec<usize> {
        let mut ids: Vec<usize> = (0..counts.len()).collect();
        ids.sort_by_key(|&i| (std::cmp::Reverse(counts[i]), i));
        ids
    };
    let lip_rank = rank(&lip_counts);
    let speech_rank = rank(&speech_counts);
    let mut remap_marginal = vec![0u32; k];
    for (l, s) in lip_rank.iter().zip(speech_rank.iter()) {
        remap_marginal[*l] = *s as u32;
    }

    // Paired map: majority vote per lip unit; unseen lip units fall back to
    // the marginal map.
    let mut remap_paired = remap_marginal.clone();
    for l in 0..k {
        if let Some((best, &count)) = joint[l]
            .iter()
            .enumerate()
            .max_by_key(|&(s, &c)| (c, std::cmp::Reverse(s)))
        {
            if count > 0 {
                remap_paired[l] = best as u32;
            }
        }
    }

    Ok(AblationData {
        lip_codebook,
        speech_codebook,
        remap_marginal,
        remap_paired,
        eval,
        vocoder,
    })
}

fn centroid_reconstruction(cb: &Codebook, units: &UnitSequence) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((units.len(), cb.dim()));
    for (t, &id) in units.ids.iter().enumerate() {
        for d in 0..cb.dim() {
            out[[t, d]] = cb.centroids[[id as usize, d]] as f64;
        }
    }
    out
}

fn remap_units(units: &UnitSequence, map: &[u32], vocab: usize) -> Result<UnitSequence> {
    let ids = units.ids.iter().map(|&id| map[id as usize]).collect();
    UnitSequence::new(ids, vocab as u32, SPEECH_FRAME_RATE_HZ)
}

fn repeat_twice(units: &UnitSequence) -> Result<UnitSequence> {
    let ids = units.ids.iter().flat_map(|&id| [id, id]).collect();
    UnitSequence::new(ids, units.codebook_size, SPEECH_FRAME_RATE_HZ)
}

/// Scores one variant on the shared evaluation split. The s2s variants take
/// their trained model; the no-s2s baselines run entirely from the
/// quantizer and remap tables.
pub fn ablation_row(
    data: &AblationData,
    variant: AblationVariant,
    model: Option<&S2SModel>,
) -> Result<AblationRow> {
    if let Some(expected) = variant.s2s_variant() {
        let model = model.ok_or_else(|| {
            Error::Config(format!("variant '{}' needs a trained model", variant.as_str()))
        })?;
        if model.config.variant != expected {
            return Err(Error::Config(format!(
                "variant '{}' needs a '{}' checkpoint, got '{}'",
                variant.as_str(),
                expected.as_str(),
                model.config.variant.as_str()
            )));
        }
    }

    let k = data.speech_codebook.k();
    let mut stoi_sum = 0.0;
    let mut estoi_sum = 0.0;
    let mut l1_sum = 0.0;
    let mut correct = 0usize;
    let mut total = 0usize;

    for u in &data.eval {
        let target_units = assign(&data.speech_codebook, &u.speech)?;

        let (pred_units, reconstruction) = match variant {
            AblationVariant::NoS2sPretrained | AblationVariant::NoS2sFinetuned => {
                let map = if variant == AblationVariant::NoS2sPretrained {
                    &data.remap_marginal
                } else {
                    &data.remap_paired
                };
                let lip_units = repeat_twice(&assign(&data.lip_codebook, &u.lip)?)?;
                let pred = remap_units(&lip_units, map, k)?;
                let recon = centroid_reconstruction(&data.speech_codebook, &pred);
                (pred, recon)
            }
            AblationVariant::S2sUnits => {
                let model = model.expect("checked above");
                let lip_units = assign(&data.lip_codebook, &u.lip)?;
                let (pred, _) =
                    infer_utterance(model, ExampleInput::Units(lip_units), InferMode::UnitsDirect, None)?;
                let recon = centroid_reconstruction(&data.speech_codebook, &pred);
                (pred, recon)
            }
            AblationVariant::S2sFeatures | AblationVariant::S2sFeaturesCtc => {
                let model = model.expect("checked above");
                let (pred, feats) = infer_utterance(
                    model,
                    ExampleInput::Features(u.lip.clone()),
                    InferMode::FeaturesThenQuantize,
                    Some(&data.speech_codebook),
                )?;
                let recon = feats.expect("feature mode returns features").frames.mapv(f64::from);
                (pred, recon)
            }
        };

        l1_sum += l1_features(&reconstruction, &u.speech)?;
        let n = pred_units.len().min(target_units.len());
        total += n;
        correct += (0..n)
            .filter(|&t| pred_units.ids[t] == target_units.ids[t])
            .count();

        let ref_wav = synthesize_toy(&target_units, &data.vocoder)?;
        let deg_wav = synthesize_toy(&pred_units, &data.vocoder)?;
        stoi_sum += metrics::stoi(&ref_wav, &deg_wav)?;
        estoi_sum += metrics::estoi(&ref_wav, &deg_wav)?;
    }

    let n = data.eval.len() as f64;
    Ok(AblationRow {
        variant,
        stoi: stoi_sum / n,
        estoi: estoi_sum / n,
        heldout_l1: l1_sum / n,
        unit_accuracy: correct as f64 / total as f64,
    })
}

pub const ABLATION_HEADER: &str = "variant\tstoi\testoi\theldout_l1\tunit_accuracy";

pub fn format_ablation_table(rows: &[AblationRow], seed: u64) -> String {
    let mut out = String::from(ABLATION_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
            r.variant.as_str(),
            r.stoi,
            r.estoi,
            r.heldout_l1,
            r.unit_accuracy
        ));
    }
    out.push_str("# higher stoi/estoi/unit_accuracy better; lower heldout_l1 better\n");
    out.push_str(&provenance_lines(seed));
    out
}

/// Trains every s2s variant in the plan with the shared seed and scores all
/// rows on the shared evaluation split. Writes `ablation.tsv` under
/// `out_dir` and the per-variant training artifacts beside it.
pub fn cmd_ablate(
    plan: &AblationPlan,
    kv: &HashMap<String, String>,
    manifest_path: &Path,
    out_dir: &Path,
) -> Result<Vec<AblationRow>> {
    plan.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let records = load_manifest(manifest_path)?;
    let utts = load_utterances(&records)?;
    let base_model_cfg = model_config_from_kv(kv)?;
    let vocoder = {
        let mut spec = vocoder_spec_from_kv(kv)?;
        spec.unit_vocab = base_model_cfg.unit_vocab;
        spec.validate()?;
        spec
    };
    let data = build_ablation_data(&utts, base_model_cfg.unit_vocab, plan.seed, Split::Test, vocoder)?;

    let train_utts = split_utterances(&utts, Split::Train);
    let val_utts = split_utterances(&utts, Split::Val);

    let mut rows = Vec::with_capacity(plan.variants.len());
    for &variant in &plan.variants {
        let model = match variant.s2s_variant() {
            None => None,
            Some(s2s) => {
                let mut model_cfg = base_model_cfg.clone();
                model_cfg.variant = s2s;
                model_cfg.input_unit_vocab = data.lip_codebook.k();
                let mut train_cfg = TrainConfig::from_kv(kv)?;
                train_cfg.variant = s2s;
                train_cfg.seed = plan.seed;
                let tokenizer = if s2s == Variant::FeaturesCtc {
                    let tok =
                        CtcTokenizer::from_corpus(train_utts.iter().map(|u| u.transcript.as_str()));
                    model_cfg.ctc_vocab = tok.vocab_size();
                    Some(tok)
                } else {
                    None
                };
                model_cfg.validate()?;
                let train_set = examples_for_variant(
                    &train_utts,
                    s2s,
                    Some(&data.lip_codebook),
                    Some(&data.speech_codebook),
                    tokenizer.as_ref(),
                    &train_cfg.weights,
                )?;
                let val_set = examples_for_variant(
                    &val_utts,
                    s2s,
                    Some(&data.lip_codebook),
                    Some(&data.speech_codebook),
                    tokenizer.as_ref(),
                    &train_cfg.weights,
                )?;
                let variant_dir = out_dir.join(variant.as_str());
                let outcome =
                    trainer::train(&train_cfg, &model_cfg, &train_set, &val_set, &variant_dir)?;
                Some(outcome.model)
            }
        };
        rows.push(ablation_row(&data, variant, model.as_ref())?);
    }

    let table_path = out_dir.join("ablation.tsv");
    fs::write(&table_path, format_ablation_table(&rows, plan.seed))
        .map_err(|e| Error::io(&table_path, e))?;
    Ok(rows)
}

fn provenance_lines(seed: u64) -> String {
    format!(
        "# tool = l2s {}\n# seed = {}\n",
        env!("CARGO_PKG_VERSION"),
        seed
    )
}
