//! Training loop: Adam with a step-annealed learning rate, per-step loss
//! logging, validation passes, and checkpointing with exact-resume replay.
//!
//! Determinism contract: everything random (init, batch sampling, dropout) is
//! derived from the configured seed plus the step number, so an interrupted
//! run resumed from a checkpoint produces a bitwise-identical loss log.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::featureio::{FeatureSequence, UnitSequence};
use crate::objectives::{self, LossWeights};
use crate::s2smodel::{
    forward_with_grad, init_model, CheckpointData, LossSpec, ModelConfig, ModelInput, S2SModel,
    Variant,
};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_steps: usize,
    pub base_lr: f64,
    pub anneal_rate: f64,
    pub anneal_steps: Vec<usize>,
    /// Multiplier on the whole schedule; 1.0 keeps the published values,
    /// small fixtures use 0.1 for stability. Always logged.
    pub lr_scale: f64,
    /// Global-norm gradient clip; None disables clipping.
    pub grad_clip: Option<f64>,
    pub eval_interval: usize,
    pub weights: LossWeights,
    pub seed: u64,
    pub variant: Variant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            max_steps: 20000,
            base_lr: 4.4e-2,
            anneal_rate: 0.3,
            anneal_steps: vec![3000, 4000, 5000],
            lr_scale: 1.0,
            grad_clip: Some(1.0),
            eval_interval: 500,
            weights: LossWeights::default(),
            seed: 0,
            variant: Variant::Features,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be > 0".into()));
        }
        if self.base_lr <= 0.0 {
            return Err(Error::Config("base_lr must be > 0".into()));
        }
        if !(self.anneal_rate > 0.0 && self.anneal_rate <= 1.0) {
            return Err(Error::Config(format!(
                "anneal_rate must be in (0, 1], got {}",
                self.anneal_rate
            )));
        }
        if self.anneal_steps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("anneal_steps must be strictly increasing".into()));
        }
        if self.lr_scale <= 0.0 {
            return Err(Error::Config("lr_scale must be > 0".into()));
        }
        if let Some(c) = self.grad_clip {
            if c <= 0.0 {
                return Err(Error::Config("grad_clip must be > 0 when set".into()));
            }
        }
        if self.eval_interval == 0 {
            return Err(Error::Config("eval_interval must be > 0".into()));
        }
        self.weights.validate()
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mut kv = Vec::new();
        let mut put = |k: &str, v: String| kv.push((k.to_string(), v));
        put("batch_size", self.batch_size.to_string());
        put("max_steps", self.max_steps.to_string());
        put("base_lr", format!("{}", self.base_lr));
        put("anneal_rate", format!("{}", self.anneal_rate));
        put(
            "anneal_steps",
            self.anneal_steps
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        put("lr_scale", format!("{}", self.lr_scale));
        put(
            "grad_clip",
            self.grad_clip.map_or("none".to_string(), |c| format!("{c}")),
        );
        put("eval_interval", self.eval_interval.to_string());
        put("alpha_ctc", format!("{}", self.weights.alpha_ctc));
        put("alpha_l1", format!("{}", self.weights.alpha_l1));
        put("seed", self.seed.to_string());
        put("train_variant", self.variant.as_str().to_string());
        kv
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
        cfg.batch_size = get(kv, "batch_size", cfg.batch_size)?;
        cfg.max_steps = get(kv, "max_steps", cfg.max_steps)?;
        cfg.base_lr = get(kv, "base_lr", cfg.base_lr)?;
        cfg.anneal_rate = get(kv, "anneal_rate", cfg.anneal_rate)?;
        if let Some(raw) = kv.get("anneal_steps") {
            cfg.anneal_steps = raw
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| {
                    s.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::Config(format!("bad anneal step '{s}'")))
                })
                .collect::<Result<_>>()?;
        }
        cfg.lr_scale = get(kv, "lr_scale", cfg.lr_scale)?;
        if let Some(raw) = kv.get("grad_clip") {
            cfg.grad_clip = if raw == "none" {
                None
            } else {
                Some(raw.parse().map_err(|_| {
                    Error::Config(format!("bad value for config key 'grad_clip'"))
                })?)
            };
        }
        cfg.eval_interval = get(kv, "eval_interval", cfg.eval_interval)?;
        cfg.weights.alpha_ctc = get(kv, "alpha_ctc", cfg.weights.alpha_ctc)?;
        cfg.weights.alpha_l1 = get(kv, "alpha_l1", cfg.weights.alpha_l1)?;
        cfg.seed = get(kv, "seed", cfg.seed)?;
        if let Some(raw) = kv.get("train_variant") {
            cfg.variant = Variant::parse(raw)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses UTF-8 `key = value` config text; `#` comments and blank lines are
/// ignored.
pub fn parse_kv_text(text: &str) -> Result<HashMap<String, String>> {
    let mut kv = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("config line {} is not 'key = value'", lineno + 1))
        })?;
        let key = k.trim().to_string();
        if key.is_empty() {
            return Err(Error::Config(format!("empty key on config line {}", lineno + 1)));
        }
        if kv.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!("duplicate config key '{key}'")));
        }
    }
    Ok(kv)
}

pub fn load_kv_file(path: &Path) -> Result<HashMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_kv_text(&text)
}

/// Closed-form schedule: base_lr · lr_scale · anneal_rate^(milestones ≤ step).
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let passed = cfg.anneal_steps.iter().filter(|&&m| m <= step).count();
    cfg.base_lr * cfg.lr_scale * cfg.anneal_rate.powi(passed as i32)
}

/// One training or validation utterance with its loss target attached.
#[derive(Debug, Clone)]
pub struct Example {
    pub utt_id: String,
    pub input: ExampleInput,
    pub loss: LossSpec,
}

#[derive(Debug, Clone)]
pub enum ExampleInput {
    Features(FeatureSequence),
    Units(UnitSequence),
}

impl Example {
    pub fn model_input(&self) -> ModelInput<'_> {
        match &self.input {
            ExampleInput::Features(f) => ModelInput::Features(f),
            ExampleInput::Units(u) => ModelInput::Units(u),
        }
    }
}

/// Keeps CTC targets only when the output grid can emit them; targets denser
/// than the 2T frame budget would make the loss undefined, so they fall back
/// to the reconstruction term alone.
pub fn ctc_tokens_if_feasible(tokens: Vec<usize>, out_len: usize) -> Option<Vec<usize>> {
    if !tokens.is_empty() && objectives::min_alignment_len(&tokens) <= out_len {
        Some(tokens)
    } else {
        None
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Present only on steps where the validation pass ran.
    pub val_loss: Option<f64>,
}

pub const LOG_HEADER: &str = "step\tlr\ttrain_loss\tval_loss";

pub fn format_log_row(row: &LogRow) -> String {
    let val = row.val_loss.map_or(String::new(), |v| format!("{v:.12e}"));
    format!("{}\t{:e}\t{:.12e}\t{}", row.step, row.lr, row.train_loss, val)
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: S2SModel,
    pub log: Vec<LogRow>,
    pub best_val_loss: f64,
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub state_checkpoint: PathBuf,
}

struct AdamState {
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl AdamState {
    fn new(model: &S2SModel) -> Self {
        let zeros: Vec<Array2<f64>> = model
            .tensors()
            .iter()
            .map(|t| Array2::zeros(t.raw_dim()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
        }
    }
}

fn step_rng(seed: u64, step: u64, tag: u8) -> ChaCha20Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&step.to_le_bytes());
    key[16] = tag;
    key[17] = 0x74; // trainer stream domain
    ChaCha20Rng::from_seed(key)
}

fn mean_val_loss(model: &S2SModel, val: &[Example]) -> Result<f64> {
    let mut total = 0.0;
    for ex in val {
        total += crate::s2smodel::eval_loss(model, &ex.model_input(), &ex.loss)?;
    }
    Ok(total / val.len() as f64)
}

fn config_fingerprint(train_cfg: &TrainConfig, model_cfg: &ModelConfig) -> Vec<(String, String)> {
    let mut kv = model_cfg.to_kv();
    kv.extend(train_cfg.to_kv());
    kv
}

fn write_state_checkpoint(
    path: &Path,
    model: &S2SModel,
    adam: &AdamState,
    step: usize,
    best_val: f64,
    fingerprint: &[(String, String)],
) -> Result<()> {
    let mut kv = fingerprint.to_vec();
    kv.push(("resume_step".into(), step.to_string()));
    kv.push(("best_val_bits".into(), best_val.to_bits().to_string()));
    let mut tensors = Vec::new();
    for (name, t) in model.param_names().iter().zip(model.tensors()) {
        tensors.push((format!("model.{name}"), t.clone()));
    }
    for (name, t) in model.param_names().iter().zip(&adam.m) {
        tensors.push((format!("adam_m.{name}"), t.clone()));
    }
    for (name, t) in model.param_names().iter().zip(&adam.v) {
        tensors.push((format!("adam_v.{name}"), t.clone()));
    }
    crate::s2smodel::write_checkpoint(
        &CheckpointData {
            version: 2,
            config_kv: kv,
            tensors,
        },
        path,
    )
}

fn load_state_checkpoint(
    path: &Path,
    train_cfg: &TrainConfig,
    model_cfg: &ModelConfig,
) -> Result<(S2SModel, AdamState, usize, f64)> {
    let data = crate::s2smodel::read_checkpoint(path)?;
    if data.version != 2 {
        return Err(Error::Incompatibility(format!(
            "training state needs a version-2 checkpoint, got version {}",
            data.version
        )));
    }
    let saved = data.kv_map();
    for (k, v) in config_fingerprint(train_cfg, model_cfg) {
        // max_steps may legitimately grow between the interrupted run and
        // the resume; everything else must match exactly.
        if k == "max_steps" {
            continue;
        }
        match saved.get(&k) {
            Some(sv) if *sv == v => {}
            Some(sv) => {
                return Err(Error::Incompatibility(format!(
                    "config key '{k}' changed since checkpoint: '{sv}' vs '{v}'"
                )))
            }
            None => {
                return Err(Error::Incompatibility(format!(
                    "checkpoint lacks config key '{k}'"
                )))
            }
        }
    }
    let step: usize = saved
        .get("resume_step")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Incompatibility("checkpoint lacks resume_step".into()))?;
    let best_val = saved
        .get("best_val_bits")
        .and_then(|s| s.parse::<u64>().ok())
        .map(f64::from_bits)
        .ok_or_else(|| Error::Incompatibility("checkpoint lacks best_val_bits".into()))?;

    let mut model = init_model(model_cfg, train_cfg.seed)?;
    let mut adam = AdamState::new(&model);
    let by_name: HashMap<&str, &Array2<f64>> =
        data.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
    let names = model.param_names().to_vec();
    for (i, name) in names.iter().enumerate() {
        for (prefix, slot) in [
            ("model", &mut model.tensors_mut()[i]),
            ("adam_m", &mut adam.m[i]),
            ("adam_v", &mut adam.v[i]),
        ] {
            let key = format!("{prefix}.{name}");
            let src = by_name.get(key.as_str()).ok_or_else(|| {
                Error::Incompatibility(format!("checkpoint missing tensor '{key}'"))
            })?;
            if src.raw_dim() != slot.raw_dim() {
                return Err(Error::Incompatibility(format!(
                    "tensor '{key}' shape mismatch"
                )));
            }
            slot.assign(src);
        }
    }
    Ok((model, adam, step, best_val))
}

fn validate_dataset(cfg: &TrainConfig, train: &[Example], val: &[Example]) -> Result<()> {
    if train.is_empty() {
        return Err(Error::Config("train split is empty".into()));
    }
    if val.is_empty() {
        return Err(Error::Config("validation split is empty".into()));
    }
    let variant_ok = |ex: &Example| match (&ex.loss, cfg.variant) {
        (LossSpec::Units { .. }, Variant::Units) => true,
        (LossSpec::Features { .. }, Variant::Features) => true,
        (LossSpec::FeaturesCtc { .. }, Variant::FeaturesCtc) => true,
        _ => false,
    };
    for ex in train.iter().chain(val) {
        if !variant_ok(ex) {
            return Err(Error::Config(format!(
                "example '{}' does not match variant {}",
                ex.utt_id,
                cfg.variant.as_str()
            )));
        }
    }
    Ok(())
}

/// Fresh training run; see [`run_steps`] for the loop contract.
pub fn train(
    train_cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    train_set: &[Example],
    val_set: &[Example],
    out_dir: &Path,
) -> Result<TrainOutcome> {
    train_cfg.validate()?;
    if model_cfg.variant != train_cfg.variant {
        return Err(Error::Config(format!(
            "model variant {} does not match train variant {}",
            model_cfg.variant.as_str(),
            train_cfg.variant.as_str()
        )));
    }
    validate_dataset(train_cfg, train_set, val_set)?;
    let model = init_model(model_cfg, train_cfg.seed)?;
    let adam = AdamState::new(&model);
    run_steps(
        train_cfg,
        model_cfg,
        model,
        adam,
        0,
        f64::INFINITY,
        train_set,
        val_set,
        out_dir,
        false,
    )
}

/// Continues an interrupted run from `out_dir/state.l2sc`. The loss log is
/// appended so the concatenation matches an uninterrupted run bitwise.
pub fn resume(
    train_cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    train_set: &[Example],
    val_set: &[Example],
    out_dir: &Path,
) -> Result<TrainOutcome> {
    train_cfg.validate()?;
    validate_dataset(train_cfg, train_set, val_set)?;
    let state_path = out_dir.join("state.l2sc");
    let (model, adam, step, best_val) = load_state_checkpoint(&state_path, train_cfg, model_cfg)?;
    if step >= train_cfg.max_steps {
        eprintln!(
            "warning: checkpoint already at step {step} >= max_steps {}; nothing to do",
            train_cfg.max_steps
        );
    }
    run_steps(
        train_cfg, model_cfg, model, adam, step, best_val, train_set, val_set, out_dir, true,
    )
}

#[allow(clippy::too_many_arguments)]
fn run_steps(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    mut model: S2SModel,
    mut adam: AdamState,
    start_step: usize,
    mut best_val: f64,
    train_set: &[Example],
    val_set: &[Example],
    out_dir: &Path,
    append_log: bool,
) -> Result<TrainOutcome> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join("train_log.tsv");
    let final_path = out_dir.join("final.l2sc");
    let best_path = out_dir.join("best.l2sc");
    let state_path = out_dir.join("state.l2sc");
    let fingerprint = config_fingerprint(cfg, model_cfg);

    let mut log_text = if append_log {
        fs::read_to_string(&log_path).unwrap_or_else(|_| format!("{LOG_HEADER}\n"))
    } else {
        format!("{LOG_HEADER}\n")
    };
    let mut log = Vec::new();

    for step in start_step + 1..=cfg.max_steps {
        let lr = lr_at(step, cfg);
        let mut batch_rng = step_rng(cfg.seed, step as u64, 0x62);
        let mut dropout_rng = step_rng(cfg.seed, step as u64, 0x64);

        let mut grad_sum: Vec<Array2<f64>> = model
            .tensors()
            .iter()
            .map(|t| Array2::zeros(t.raw_dim()))
            .collect();
        let mut loss_sum = 0.0;
        for _ in 0..cfg.batch_size {
            let idx = batch_rng.gen_range(0..train_set.len());
            let ex = &train_set[idx];
            let (loss, grads) = forward_with_grad(
                &model,
                &ex.model_input(),
                &ex.loss,
                Some(&mut dropout_rng),
            )
            .map_err(|e| match e {
                Error::Numeric(msg) => {
                    Error::Numeric(format!("step {step}, utterance '{}': {msg}", ex.utt_id))
                }
                other => other,
            })?;
            loss_sum += loss;
            for (acc, g) in grad_sum.iter_mut().zip(grads) {
                *acc += &g;
            }
        }
        let inv_b = 1.0 / cfg.batch_size as f64;
        let train_loss = loss_sum * inv_b;
        if !train_loss.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite training loss at step {step} (trainer)"
            )));
        }
        for g in grad_sum.iter_mut() {
            g.mapv_inplace(|v| v * inv_b);
        }

        if let Some(clip) = cfg.grad_clip {
            let norm: f64 = grad_sum
                .iter()
                .map(|g| g.iter().map(|v| v * v).sum::<f64>())
                .sum::<f64>()
                .sqrt();
            if norm > clip {
                let scale = clip / norm;
                for g in grad_sum.iter_mut() {
                    g.mapv_inplace(|v| v * scale);
                }
            }
        }

        let bias1 = 1.0 - ADAM_BETA1.powi(step as i32);
        let bias2 = 1.0 - ADAM_BETA2.powi(step as i32);
        for i in 0..grad_sum.len() {
            let g = &grad_sum[i];
            let m = &mut adam.m[i];
            let v = &mut adam.v[i];
            m.zip_mut_with(g, |mv, &gv| *mv = ADAM_BETA1 * *mv + (1.0 - ADAM_BETA1) * gv);
            v.zip_mut_with(g, |vv, &gv| *vv = ADAM_BETA2 * *vv + (1.0 - ADAM_BETA2) * gv * gv);
            let param = &mut model.tensors_mut()[i];
            for ((p, &mv), &vv) in param.iter_mut().zip(adam.m[i].iter()).zip(adam.v[i].iter()) {
                let mhat = mv / bias1;
                let vhat = vv / bias2;
                *p -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }

        let val_loss = if step % cfg.eval_interval == 0 {
            let v = mean_val_loss(&model, val_set)?;
            if v < best_val {
                best_val = v;
                crate::s2smodel::save_model(&model, &best_path)?;
            }
            Some(v)
        } else {
            None
        };

        let row = LogRow {
            step,
            lr,
            train_loss,
            val_loss,
        };
        log_text.push_str(&format_log_row(&row));
        log_text.push('\n');
        log.push(row);
    }

    fs::write(&log_path, &log_text).map_err(|e| Error::io(&log_path, e))?;
    crate::s2smodel::save_model(&model, &final_path)?;
    write_state_checkpoint(
        &state_path,
        &model,
        &adam,
        cfg.max_steps.max(start_step),
        best_val,
        &fingerprint,
    )?;
    if !best_path.exists() {
        crate::s2smodel::save_model(&model, &best_path)?;
    }
    Ok(TrainOutcome {
        model,
        log,
        best_val_loss: best_val,
        final_checkpoint: final_path,
        best_checkpoint: best_path,
        state_checkpoint: state_path,
    })
}
