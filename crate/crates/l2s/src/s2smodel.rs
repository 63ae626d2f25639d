//! Non-autoregressive encoder-decoder mapping lip representations to speech
//! representations.
//!
//! Both stacks are feed-forward transformer blocks (self-attention followed
//! by two 1-D convolutions, post-norm residuals). A two-layer transposed
//! convolution between encoder and decoder doubles the time axis to match
//! the 25 Hz video rate to the 50 Hz speech feature rate; raw transposed-conv
//! outputs are center-cropped to exactly 2T.

use std::collections::HashMap;
use std::fs;
use std::io::Read;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::featureio::{FeatureKind, FeatureSequence, UnitSequence};
use crate::objectives::{self, LossWeights};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"L2SC";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Units,
    Features,
    FeaturesCtc,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Units => "units",
            Variant::Features => "features",
            Variant::FeaturesCtc => "features_ctc",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "units" => Ok(Variant::Units),
            "features" => Ok(Variant::Features),
            "features_ctc" => Ok(Variant::FeaturesCtc),
            other => Err(Error::Config(format!("unknown variant '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub num_layers_enc: usize,
    pub num_layers_dec: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    /// Kernel widths of the two block convolutions (must be odd).
    pub conv_kernel_sizes: (usize, usize),
    /// Channel expansion of the first block convolution.
    pub conv_expansion: usize,
    pub upsample_kernels: [usize; 2],
    pub upsample_strides: [usize; 2],
    pub input_dim: usize,
    pub feature_out_dim: usize,
    pub unit_vocab: usize,
    /// Input embedding vocabulary for the units variant (lip units).
    pub input_unit_vocab: usize,
    /// CTC token inventory size excluding blank.
    pub ctc_vocab: usize,
    pub variant: Variant,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers_enc: 6,
            num_layers_dec: 6,
            hidden_dim: 512,
            num_heads: 2,
            conv_kernel_sizes: (9, 1),
            conv_expansion: 4,
            upsample_kernels: [4, 3],
            upsample_strides: [2, 1],
            input_dim: 768,
            feature_out_dim: 768,
            unit_vocab: 100,
            input_unit_vocab: 2000,
            ctc_vocab: 0,
            variant: Variant::Features,
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.num_heads == 0 {
            return Err(Error::Config("hidden_dim and num_heads must be > 0".into()));
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        let stride_product: usize = self.upsample_strides.iter().product();
        if stride_product != 2 {
            return Err(Error::Config(format!(
                "upsample stride product must be 2 (rate ratio 50/25), got {stride_product}"
            )));
        }
        if self.conv_kernel_sizes.0 % 2 == 0 || self.conv_kernel_sizes.1 % 2 == 0 {
            return Err(Error::Config("block conv kernels must be odd".into()));
        }
        if self.conv_expansion == 0 {
            return Err(Error::Config("conv_expansion must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.variant == Variant::FeaturesCtc && self.ctc_vocab == 0 {
            return Err(Error::Config(
                "features_ctc variant needs ctc_vocab > 0".into(),
            ));
        }
        if self.variant == Variant::Units && self.input_unit_vocab == 0 {
            return Err(Error::Config("units variant needs input_unit_vocab > 0".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mut kv = Vec::new();
        let mut put = |k: &str, v: String| kv.push((k.to_string(), v));
        put("num_layers_enc", self.num_layers_enc.to_string());
        put("num_layers_dec", self.num_layers_dec.to_string());
        put("hidden_dim", self.hidden_dim.to_string());
        put("num_heads", self.num_heads.to_string());
        put("conv_kernel1", self.conv_kernel_sizes.0.to_string());
        put("conv_kernel2", self.conv_kernel_sizes.1.to_string());
        put("conv_expansion", self.conv_expansion.to_string());
        put("upsample_kernel1", self.upsample_kernels[0].to_string());
        put("upsample_kernel2", self.upsample_kernels[1].to_string());
        put("upsample_stride1", self.upsample_strides[0].to_string());
        put("upsample_stride2", self.upsample_strides[1].to_string());
        put("input_dim", self.input_dim.to_string());
        put("feature_out_dim", self.feature_out_dim.to_string());
        put("unit_vocab", self.unit_vocab.to_string());
        put("input_unit_vocab", self.input_unit_vocab.to_string());
        put("ctc_vocab", self.ctc_vocab.to_string());
        put("variant", self.variant.as_str().to_string());
        put("dropout", format!("{}", self.dropout));
        kv
    }

    pub fn from_kv(kv: &HashMap<String, String>) -> Result<Self> {
        fn get<T: std::str::FromStr>(kv: &HashMap<String, String>, key: &str) -> Result<T> {
            kv.get(key)
                .ok_or_else(|| Error::Config(format!("missing config key '{key}'")))?
                .parse::<T>()
                .map_err(|_| Error::Config(format!("bad value for config key '{key}'")))
        }
        let cfg = Self {
            num_layers_enc: get(kv, "num_layers_enc")?,
            num_layers_dec: get(kv, "num_layers_dec")?,
            hidden_dim: get(kv, "hidden_dim")?,
            num_heads: get(kv, "num_heads")?,
            conv_kernel_sizes: (get(kv, "conv_kernel1")?, get(kv, "conv_kernel2")?),
            conv_expansion: get(kv, "conv_expansion")?,
            upsample_kernels: [get(kv, "upsample_kernel1")?, get(kv, "upsample_kernel2")?],
            upsample_strides: [get(kv, "upsample_stride1")?, get(kv, "upsample_stride2")?],
            input_dim: get(kv, "input_dim")?,
            feature_out_dim: get(kv, "feature_out_dim")?,
            unit_vocab: get(kv, "unit_vocab")?,
            input_unit_vocab: get(kv, "input_unit_vocab")?,
            ctc_vocab: get(kv, "ctc_vocab")?,
            variant: Variant::parse(kv.get("variant").map(|s| s.as_str()).unwrap_or(""))?,
            dropout: get(kv, "dropout")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Named parameter collection in a fixed construction order.
#[derive(Debug, Clone)]
pub struct S2SModel {
    pub config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Array2<f64>>,
    index: HashMap<String, usize>,
}

impl S2SModel {
    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Array2<f64>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&Array2<f64>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.index.get(name).copied().map(move |i| &mut self.tensors[i])
    }
}

#[derive(Debug)]
pub struct S2SForwardOutput {
    /// Upsampled encoder states, (2T) x hidden.
    pub encoder_states: Array2<f64>,
    /// (2T) x feature_out_dim; present for features and features_ctc.
    pub decoder_features: Option<Array2<f64>>,
    /// (2T) x unit_vocab pre-softmax scores; present for units.
    pub unit_logits: Option<Array2<f64>>,
    /// (2T) x (ctc_vocab + 1) pre-softmax scores; present for features_ctc.
    pub ctc_logits: Option<Array2<f64>>,
}

/// Model input: continuous lip features (feature variants) or discrete lip
/// unit ids (units variant).
#[derive(Debug, Clone)]
pub enum ModelInput<'a> {
    Features(&'a FeatureSequence),
    Units(&'a UnitSequence),
}

impl ModelInput<'_> {
    pub fn len(&self) -> usize {
        match self {
            ModelInput::Features(f) => f.num_frames(),
            ModelInput::Units(u) => u.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Loss attached to a forward pass; targets enter only here, never the
/// forward computation (non-autoregressive contract).
#[derive(Debug, Clone)]
pub enum LossSpec {
    Units {
        targets: UnitSequence,
    },
    Features {
        target: FeatureSequence,
    },
    FeaturesCtc {
        target: FeatureSequence,
        /// Blank-free token ids; None skips the CTC term (infeasible target).
        tokens: Option<Vec<usize>>,
        weights: LossWeights,
    },
}

struct ParamBuilder {
    names: Vec<String>,
    tensors: Vec<Array2<f64>>,
    rng: ChaCha20Rng,
}

impl ParamBuilder {
    /// Scaled-uniform fan-in init: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    fn weight(&mut self, name: &str, rows: usize, cols: usize, fan_in: usize) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let t = Array2::from_shape_fn((rows, cols), |_| {
            self.rng.gen::<f64>() * 2.0 * bound - bound
        });
        self.names.push(name.to_string());
        self.tensors.push(t);
    }

    fn zeros(&mut self, name: &str, rows: usize, cols: usize) {
        self.names.push(name.to_string());
        self.tensors.push(Array2::zeros((rows, cols)));
    }

    fn ones(&mut self, name: &str, rows: usize, cols: usize) {
        self.names.push(name.to_string());
        self.tensors.push(Array2::from_elem((rows, cols), 1.0));
    }
}

/// Deterministic model initialization: weights scaled-uniform fan-in,
/// biases zero, layer-norm gains one.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<S2SModel> {
    config.validate()?;
    let h = config.hidden_dim;
    let (k1, k2) = config.conv_kernel_sizes;
    let hx = h * config.conv_expansion;
    let mut b = ParamBuilder {
        names: Vec::new(),
        tensors: Vec::new(),
        rng: ChaCha20Rng::seed_from_u64(seed),
    };

    match config.variant {
        Variant::Units => b.weight("input.embed", config.input_unit_vocab, h, h),
        _ => {
            b.weight("input.proj.w", config.input_dim, h, config.input_dim);
            b.zeros("input.proj.b", 1, h);
        }
    }

    let block = |b: &mut ParamBuilder, stack: &str, i: usize| {
        for part in ["wq", "wk", "wv", "wo"] {
            b.weight(&format!("{stack}.{i}.attn.{part}"), h, h, h);
        }
        for part in ["bq", "bk", "bv", "bo"] {
            b.zeros(&format!("{stack}.{i}.attn.{part}"), 1, h);
        }
        b.ones(&format!("{stack}.{i}.ln1.gamma"), 1, h);
        b.zeros(&format!("{stack}.{i}.ln1.beta"), 1, h);
        b.weight(&format!("{stack}.{i}.conv1.w"), k1 * h, hx, k1 * h);
        b.zeros(&format!("{stack}.{i}.conv1.b"), 1, hx);
        b.weight(&format!("{stack}.{i}.conv2.w"), k2 * hx, h, k2 * hx);
        b.zeros(&format!("{stack}.{i}.conv2.b"), 1, h);
        b.ones(&format!("{stack}.{i}.ln2.gamma"), 1, h);
        b.zeros(&format!("{stack}.{i}.ln2.beta"), 1, h);
    };

    for i in 0..config.num_layers_enc {
        block(&mut b, "enc", i);
    }

    let [uk1, uk2] = config.upsample_kernels;
    b.weight("upsample.0.w", uk1 * h, h, uk1 * h);
    b.zeros("upsample.0.b", 1, h);
    b.weight("upsample.1.w", uk2 * h, h, uk2 * h);
    b.zeros("upsample.1.b", 1, h);

    for i in 0..config.num_layers_dec {
        block(&mut b, "dec", i);
    }

    match config.variant {
        Variant::Units => {
            b.weight("head.units.w", h, config.unit_vocab, h);
            b.zeros("head.units.b", 1, config.unit_vocab);
        }
        Variant::Features => {
            b.weight("head.features.w", h, config.feature_out_dim, h);
            b.zeros("head.features.b", 1, config.feature_out_dim);
        }
        Variant::FeaturesCtc => {
            b.weight("head.features.w", h, config.feature_out_dim, h);
            b.zeros("head.features.b", 1, config.feature_out_dim);
            b.weight("head.ctc.w", h, config.ctc_vocab + 1, h);
            b.zeros("head.ctc.b", 1, config.ctc_vocab + 1);
        }
    }

    let index = b
        .names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.clone(), i))
        .collect();
    Ok(S2SModel {
        config: config.clone(),
        names: b.names,
        tensors: b.tensors,
        index,
    })
}

fn positional_encoding(t_len: usize, dim: usize) -> Array2<f64> {
    let mut pe = Array2::zeros((t_len, dim));
    for t in 0..t_len {
        for i in 0..dim / 2 {
            let angle = t as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            pe[[t, 2 * i]] = angle.sin();
            pe[[t, 2 * i + 1]] = angle.cos();
        }
    }
    pe
}

struct ForwardVars {
    encoder_states: Var,
    decoder_features: Option<Var>,
    unit_logits: Option<Var>,
    ctc_logits: Option<Var>,
}

struct Forward<'m> {
    model: &'m S2SModel,
    param_vars: Vec<Var>,
}

impl<'m> Forward<'m> {
    fn new(model: &'m S2SModel, tape: &mut Tape) -> Self {
        let param_vars = model
            .tensors
            .iter()
            .map(|t| tape.leaf(t.clone()))
            .collect();
        Self { model, param_vars }
    }

    fn p(&self, name: &str) -> Var {
        self.param_vars[*self
            .model
            .index
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter '{name}'"))]
    }

    fn dropout(
        &self,
        tape: &mut Tape,
        x: Var,
        rng: Option<&mut ChaCha20Rng>,
    ) -> Var {
        let p = self.model.config.dropout;
        match rng {
            Some(rng) if p > 0.0 => {
                let shape = tape.value(x).raw_dim();
                let keep = 1.0 - p;
                let mask = Array2::from_shape_fn(shape, |_| {
                    if rng.gen::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                });
                let m = tape.leaf(mask);
                tape.mul(x, m)
            }
            _ => x,
        }
    }

    fn attention(&self, tape: &mut Tape, x: Var, prefix: &str) -> Var {
        let cfg = &self.model.config;
        let dh = cfg.head_dim();
        let q = {
            let m = tape.matmul(x, self.p(&format!("{prefix}.attn.wq")));
            tape.add_row(m, self.p(&format!("{prefix}.attn.bq")))
        };
        let k = {
            let m = tape.matmul(x, self.p(&format!("{prefix}.attn.wk")));
            tape.add_row(m, self.p(&format!("{prefix}.attn.bk")))
        };
        let v = {
            let m = tape.matmul(x, self.p(&format!("{prefix}.attn.wv")));
            tape.add_row(m, self.p(&format!("{prefix}.attn.bv")))
        };
        let mut heads = Vec::with_capacity(cfg.num_heads);
        for hd in 0..cfg.num_heads {
            let qh = tape.slice_cols(q, hd * dh, dh);
            let kh = tape.slice_cols(k, hd * dh, dh);
            let vh = tape.slice_cols(v, hd * dh, dh);
            let scores = tape.matmul_nt(qh, kh);
            let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt());
            let att = tape.softmax_rows(scaled);
            heads.push(tape.matmul(att, vh));
        }
        let ctx = tape.concat_cols(&heads);
        let o = tape.matmul(ctx, self.p(&format!("{prefix}.attn.wo")));
        tape.add_row(o, self.p(&format!("{prefix}.attn.bo")))
    }

    fn block(
        &self,
        tape: &mut Tape,
        x: Var,
        prefix: &str,
        rng: &mut Option<&mut ChaCha20Rng>,
    ) -> Var {
        let cfg = &self.model.config;
        let (k1, k2) = cfg.conv_kernel_sizes;

        let att = self.attention(tape, x, prefix);
        let att = self.dropout(tape, att, rng.as_deref_mut());
        let res = tape.add(x, att);
        let y = tape.layer_norm(
            res,
            self.p(&format!("{prefix}.ln1.gamma")),
            self.p(&format!("{prefix}.ln1.beta")),
            1e-5,
        );

        let col = tape.im2col(y, k1);
        let c = tape.matmul(col, self.p(&format!("{prefix}.conv1.w")));
        let c = tape.add_row(c, self.p(&format!("{prefix}.conv1.b")));
        let c = tape.relu(c);
        let col2 = tape.im2col(c, k2);
        let c = tape.matmul(col2, self.p(&format!("{prefix}.conv2.w")));
        let c = tape.add_row(c, self.p(&format!("{prefix}.conv2.b")));
        let c = self.dropout(tape, c, rng.as_deref_mut());
        let res2 = tape.add(y, c);
        tape.layer_norm(
            res2,
            self.p(&format!("{prefix}.ln2.gamma")),
            self.p(&format!("{prefix}.ln2.beta")),
            1e-5,
        )
    }

    /// Two transposed convolutions, then a center crop to exactly 2T.
    fn upsample(&self, tape: &mut Tape, x: Var) -> Var {
        let cfg = &self.model.config;
        let t_in = tape.value(x).nrows();
        let [uk1, uk2] = cfg.upsample_kernels;
        let [us1, us2] = cfg.upsample_strides;
        let y = tape.conv_transpose1d(x, self.p("upsample.0.w"), uk1, us1);
        let y = tape.add_row(y, self.p("upsample.0.b"));
        let y = tape.conv_transpose1d(y, self.p("upsample.1.w"), uk2, us2);
        let y = tape.add_row(y, self.p("upsample.1.b"));
        let raw_len = tape.value(y).nrows();
        let target = 2 * t_in;
        let crop = (raw_len - target) / 2;
        tape.slice_rows(y, crop, target)
    }

    fn run(
        &self,
        tape: &mut Tape,
        input: &ModelInput,
        mut rng: Option<&mut ChaCha20Rng>,
    ) -> Result<ForwardVars> {
        let cfg = &self.model.config;
        if input.is_empty() {
            return Err(Error::Shape("zero-length input".into()));
        }
        let mut x = match (input, cfg.variant) {
            (ModelInput::Features(f), Variant::Features | Variant::FeaturesCtc) => {
                if f.dim() != cfg.input_dim {
                    return Err(Error::Shape(format!(
                        "input dim {} does not match model input_dim {}",
                        f.dim(),
                        cfg.input_dim
                    )));
                }
                if f.kind != FeatureKind::Lip {
                    return Err(Error::Validation("model input must be lip features".into()));
                }
                let feats = f.frames.mapv(|v| v as f64);
                let fin = tape.leaf(feats);
                let m = tape.matmul(fin, self.p("input.proj.w"));
                tape.add_row(m, self.p("input.proj.b"))
            }
            (ModelInput::Units(u), Variant::Units) => {
                if u.codebook_size as usize > cfg.input_unit_vocab {
                    return Err(Error::Shape(format!(
                        "input codebook size {} exceeds input_unit_vocab {}",
                        u.codebook_size, cfg.input_unit_vocab
                    )));
                }
                let table = self.p("input.embed");
                tape.embedding(&u.ids, table)
            }
            (ModelInput::Units(_), _) => {
                return Err(Error::Config(
                    "unit input requires the units variant".into(),
                ))
            }
            (ModelInput::Features(_), Variant::Units) => {
                return Err(Error::Config(
                    "units variant consumes unit ids, not features".into(),
                ))
            }
        };

        let t_in = input.len();
        let pe_enc = positional_encoding(t_in, cfg.hidden_dim);
        x = tape.add_const(x, &pe_enc);
        x = self.dropout(tape, x, rng.as_deref_mut());
        for i in 0..cfg.num_layers_enc {
            x = self.block(tape, x, &format!("enc.{i}"), &mut rng);
        }

        let up = self.upsample(tape, x);

        let pe_dec = positional_encoding(2 * t_in, cfg.hidden_dim);
        let mut d = tape.add_const(up, &pe_dec);
        d = self.dropout(tape, d, rng.as_deref_mut());
        for i in 0..cfg.num_layers_dec {
            d = self.block(tape, d, &format!("dec.{i}"), &mut rng);
        }

        let mut out = ForwardVars {
            encoder_states: up,
            decoder_features: None,
            unit_logits: None,
            ctc_logits: None,
        };
        match cfg.variant {
            Variant::Units => {
                let l = tape.matmul(d, self.p("head.units.w"));
                out.unit_logits = Some(tape.add_row(l, self.p("head.units.b")));
            }
            Variant::Features => {
                let f = tape.matmul(d, self.p("head.features.w"));
                out.decoder_features = Some(tape.add_row(f, self.p("head.features.b")));
            }
            Variant::FeaturesCtc => {
                let f = tape.matmul(d, self.p("head.features.w"));
                out.decoder_features = Some(tape.add_row(f, self.p("head.features.b")));
                let c = tape.matmul(up, self.p("head.ctc.w"));
                out.ctc_logits = Some(tape.add_row(c, self.p("head.ctc.b")));
            }
        }
        Ok(out)
    }
}

/// Evaluation-mode forward pass (dropout disabled, deterministic).
pub fn forward(model: &S2SModel, input: &ModelInput) -> Result<S2SForwardOutput> {
    let mut tape = Tape::new();
    let fwd = Forward::new(model, &mut tape);
    let vars = fwd.run(&mut tape, input, None)?;
    Ok(S2SForwardOutput {
        encoder_states: tape.value(vars.encoder_states).clone(),
        decoder_features: vars.decoder_features.map(|v| tape.value(v).clone()),
        unit_logits: vars.unit_logits.map(|v| tape.value(v).clone()),
        ctc_logits: vars.ctc_logits.map(|v| tape.value(v).clone()),
    })
}

fn build_loss(
    tape: &mut Tape,
    vars: &ForwardVars,
    model: &S2SModel,
    loss_spec: &LossSpec,
) -> Result<Var> {
    match (loss_spec, model.config.variant) {
        (LossSpec::Units { targets }, Variant::Units) => {
            let logits = vars.unit_logits.expect("units variant emits unit logits");
            let t_out = tape.value(logits).nrows();
            if targets.len() != t_out {
                return Err(Error::Shape(format!(
                    "unit target length {} does not match output length {t_out}",
                    targets.len()
                )));
            }
            tape.ce_loss(logits, &targets.ids)
        }
        (LossSpec::Features { target }, Variant::Features) => {
            let pred = vars
                .decoder_features
                .expect("features variant emits decoder features");
            let t_eff = objectives::aligned_len(tape.value(pred).nrows(), target.num_frames());
            let target64 = target.frames.mapv(|v| v as f64);
            tape.l1_loss(pred, &target64, t_eff)
        }
        (
            LossSpec::FeaturesCtc {
                target,
                tokens,
                weights,
            },
            Variant::FeaturesCtc,
        ) => {
            weights.validate()?;
            let pred = vars
                .decoder_features
                .expect("features_ctc variant emits decoder features");
            let t_eff = objectives::aligned_len(tape.value(pred).nrows(), target.num_frames());
            let target64 = target.frames.mapv(|v| v as f64);
            let l1 = tape.l1_loss(pred, &target64, t_eff)?;
            let l1w = tape.scale(l1, weights.alpha_l1);
            match tokens {
                Some(tokens) => {
                    let ctc_logits = vars.ctc_logits.expect("features_ctc emits ctc logits");
                    let lp = tape.log_softmax_rows(ctc_logits);
                    let ctc = tape.ctc_loss(lp, tokens)?;
                    let ctcw = tape.scale(ctc, weights.alpha_ctc);
                    Ok(tape.add(l1w, ctcw))
                }
                None => Ok(l1w),
            }
        }
        (spec, variant) => Err(Error::Config(format!(
            "loss spec {spec:?} does not match model variant {}",
            variant.as_str()
        ))),
    }
}

/// Forward plus reverse pass. Returns the scalar loss and one gradient per
/// parameter, aligned with [`S2SModel::param_names`]. Dropout is applied only
/// when `dropout_rng` is given.
pub fn forward_with_grad(
    model: &S2SModel,
    input: &ModelInput,
    loss_spec: &LossSpec,
    mut dropout_rng: Option<&mut ChaCha20Rng>,
) -> Result<(f64, Vec<Array2<f64>>)> {
    let mut tape = Tape::new();
    let fwd = Forward::new(model, &mut tape);
    let vars = fwd.run(&mut tape, input, dropout_rng.as_deref_mut())?;
    let loss = build_loss(&mut tape, &vars, model, loss_spec)?;
    let loss_value = tape.value(loss)[[0, 0]];
    if !loss_value.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss {loss_value} for variant {}",
            model.config.variant.as_str()
        )));
    }
    let grads = tape.backward(loss);
    let out = fwd
        .param_vars
        .iter()
        .zip(model.tensors.iter())
        .map(|(v, t)| {
            grads[v.0]
                .clone()
                .unwrap_or_else(|| Array2::zeros(t.raw_dim()))
        })
        .collect();
    Ok((loss_value, out))
}

/// Evaluation-mode loss only (no gradients, no dropout).
pub fn eval_loss(model: &S2SModel, input: &ModelInput, loss_spec: &LossSpec) -> Result<f64> {
    let mut tape = Tape::new();
    let fwd = Forward::new(model, &mut tape);
    let vars = fwd.run(&mut tape, input, None)?;
    let loss = build_loss(&mut tape, &vars, model, loss_spec)?;
    Ok(tape.value(loss)[[0, 0]])
}

// ---------------------------------------------------------------------------
// Checkpoint container ("L2SC")
// ---------------------------------------------------------------------------

/// Versioned named-tensor container. Version 1 stores float32 payloads (model
/// export); version 2 stores float64 (exact training state for resume).
#[derive(Debug, Clone)]
pub struct CheckpointData {
    pub version: u32,
    pub config_kv: Vec<(String, String)>,
    pub tensors: Vec<(String, Array2<f64>)>,
}

impl CheckpointData {
    pub fn kv_map(&self) -> HashMap<String, String> {
        self.config_kv.iter().cloned().collect()
    }
}

pub fn write_checkpoint(data: &CheckpointData, path: &Path) -> Result<()> {
    if data.version != 1 && data.version != 2 {
        return Err(Error::Config(format!(
            "unsupported checkpoint version {}",
            data.version
        )));
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&data.version.to_le_bytes());
    let mut config_block = String::new();
    for (k, v) in &data.config_kv {
        config_block.push_str(&format!("{k} = {v}\n"));
    }
    let cb = config_block.as_bytes();
    buf.extend_from_slice(&(cb.len() as u32).to_le_bytes());
    buf.extend_from_slice(cb);
    buf.extend_from_slice(&(data.tensors.len() as u32).to_le_bytes());
    for (name, tensor) in &data.tensors {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u32).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.extend_from_slice(&2u32.to_le_bytes()); // rank
        buf.extend_from_slice(&(tensor.nrows() as u32).to_le_bytes());
        buf.extend_from_slice(&(tensor.ncols() as u32).to_le_bytes());
        for &v in tensor.iter() {
            if data.version == 1 {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            } else {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<CheckpointData> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = std::io::Cursor::new(&bytes[..]);
    let read_u32 = |cur: &mut std::io::Cursor<&[u8]>, what: &str| -> Result<u32> {
        let mut b = [0u8; 4];
        let offset = cur.position();
        cur.read_exact(&mut b).map_err(|_| Error::Format {
            offset,
            msg: format!("truncated reading {what}"),
        })?;
        Ok(u32::from_le_bytes(b))
    };
    let mut magic = [0u8; 4];
    cur.read_exact(&mut magic).map_err(|_| Error::Format {
        offset: 0,
        msg: "truncated magic".into(),
    })?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad checkpoint magic {:?}", String::from_utf8_lossy(&magic)),
        });
    }
    let version = read_u32(&mut cur, "version")?;
    if version != 1 && version != 2 {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported checkpoint version {version}"),
        });
    }
    let cb_len = read_u32(&mut cur, "config block length")? as usize;
    let mut cb = vec![0u8; cb_len];
    let offset = cur.position();
    cur.read_exact(&mut cb).map_err(|_| Error::Format {
        offset,
        msg: "truncated config block".into(),
    })?;
    let config_text = String::from_utf8(cb).map_err(|_| Error::Format {
        offset,
        msg: "config block is not UTF-8".into(),
    })?;
    let config_kv = config_text
        .lines()
        .filter_map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        })
        .collect();

    let n_tensors = read_u32(&mut cur, "tensor count")? as usize;
    let mut tensors = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let name_len = read_u32(&mut cur, "name length")? as usize;
        let mut nb = vec![0u8; name_len];
        let offset = cur.position();
        cur.read_exact(&mut nb).map_err(|_| Error::Format {
            offset,
            msg: "truncated tensor name".into(),
        })?;
        let name = String::from_utf8(nb).map_err(|_| Error::Format {
            offset,
            msg: "tensor name is not UTF-8".into(),
        })?;
        let rank = read_u32(&mut cur, "rank")?;
        if rank != 2 {
            return Err(Error::Format {
                offset: cur.position() - 4,
                msg: format!("unsupported tensor rank {rank}"),
            });
        }
        let rows = read_u32(&mut cur, "rows")? as usize;
        let cols = read_u32(&mut cur, "cols")? as usize;
        let elem = if version == 1 { 4 } else { 8 };
        let mut payload = vec![0u8; rows * cols * elem];
        let offset = cur.position();
        cur.read_exact(&mut payload).map_err(|_| Error::Format {
            offset,
            msg: format!("truncated payload for tensor '{name}'"),
        })?;
        let values: Vec<f64> = if version == 1 {
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect()
        } else {
            payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect()
        };
        tensors.push((
            name,
            Array2::from_shape_vec((rows, cols), values).expect("shape matches payload"),
        ));
    }
    Ok(CheckpointData {
        version,
        config_kv,
        tensors,
    })
}

/// Exports the model as a version-1 (float32) checkpoint.
pub fn save_model(model: &S2SModel, path: &Path) -> Result<()> {
    let tensors = model
        .names
        .iter()
        .cloned()
        .zip(model.tensors.iter().cloned())
        .collect();
    write_checkpoint(
        &CheckpointData {
            version: 1,
            config_kv: model.config.to_kv(),
            tensors,
        },
        path,
    )
}

pub fn model_from_checkpoint(data: &CheckpointData) -> Result<S2SModel> {
    let config = ModelConfig::from_kv(&data.kv_map())?;
    let mut model = init_model(&config, 0)?;
    let by_name: HashMap<&str, &Array2<f64>> = data
        .tensors
        .iter()
        .map(|(n, t)| (n.as_str(), t))
        .collect();
    for (name, slot) in model.names.clone().iter().zip(model.tensors.iter_mut()) {
        let src = by_name.get(name.as_str()).ok_or_else(|| {
            Error::Incompatibility(format!("checkpoint missing tensor '{name}'"))
        })?;
        if src.raw_dim() != slot.raw_dim() {
            return Err(Error::Incompatibility(format!(
                "tensor '{name}' shape mismatch: checkpoint {:?} vs model {:?}",
                src.dim(),
                slot.dim()
            )));
        }
        slot.assign(src);
    }
    Ok(model)
}

pub fn load_model(path: &Path) -> Result<S2SModel> {
    model_from_checkpoint(&read_checkpoint(path)?)
}

/// Compares analytic gradients against central differences over every
/// parameter element and returns the worst relative error. Dropout is
/// disabled on both sides.
pub fn gradient_check(
    model: &mut S2SModel,
    input: &ModelInput,
    loss_spec: &LossSpec,
    h: f64,
) -> Result<f64> {
    let (_, grads) = forward_with_grad(model, input, loss_spec, None)?;
    let mut worst = 0.0f64;
    for ti in 0..model.tensors.len() {
        let shape = model.tensors[ti].raw_dim();
        for r in 0..shape[0] {
            for c in 0..shape[1] {
                let orig = model.tensors[ti][[r, c]];
                model.tensors[ti][[r, c]] = orig + h;
                let lp = eval_loss(model, input, loss_spec)?;
                model.tensors[ti][[r, c]] = orig - h;
                let lm = eval_loss(model, input, loss_spec)?;
                model.tensors[ti][[r, c]] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let g = grads[ti][[r, c]];
                let rel = (fd - g).abs() / fd.abs().max(g.abs()).max(1e-6);
                if rel > worst {
                    worst = rel;
                }
            }
        }
    }
    Ok(worst)
}
