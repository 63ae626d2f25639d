//! Training objectives: unit cross-entropy, feature L1, CTC, and their
//! weighted combination.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::featureio::{FeatureSequence, UnitSequence};

/// Weights of the combined objective. Defaults follow the reference
/// configuration: alpha_ctc = 0.001, alpha_l1 = 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha_ctc: f64,
    pub alpha_l1: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha_ctc: 0.001,
            alpha_l1: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !self.alpha_ctc.is_finite() || !self.alpha_l1.is_finite() {
            return Err(Error::Numeric("loss weights must be finite".into()));
        }
        if self.alpha_ctc < 0.0 || self.alpha_l1 < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Character-level tokenizer for CTC targets. Blank is id 0 and is excluded
/// from transcript encoding.
#[derive(Debug, Clone)]
pub struct CtcTokenizer {
    chars: Vec<char>,
}

impl CtcTokenizer {
    /// Builds the inventory from a corpus of transcripts (sorted unique
    /// characters, including space).
    pub fn from_corpus<'a>(transcripts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut chars: Vec<char> = transcripts
            .into_iter()
            .flat_map(|t| t.chars())
            .collect();
        chars.sort_unstable();
        chars.dedup();
        Self { chars }
    }

    /// Vocabulary size excluding blank.
    pub fn vocab_size(&self) -> usize {
        self.chars.len()
    }

    pub fn encode(&self, transcript: &str) -> Result<Vec<usize>> {
        transcript
            .chars()
            .map(|c| {
                self.chars
                    .binary_search(&c)
                    .map(|i| i + 1)
                    .map_err(|_| Error::Validation(format!("character {c:?} not in inventory")))
            })
            .collect()
    }

    pub fn decode(&self, tokens: &[usize]) -> Result<String> {
        tokens
            .iter()
            .map(|&t| {
                if t == 0 || t > self.chars.len() {
                    Err(Error::Validation(format!("token id {t} out of range")))
                } else {
                    Ok(self.chars[t - 1])
                }
            })
            .collect()
    }
}

/// Mean over time of -log softmax(logits)[t, target_t].
pub fn cross_entropy_units(logits: &Array2<f64>, targets: &UnitSequence) -> Result<f64> {
    let (t_len, n) = (logits.nrows(), logits.ncols());
    if targets.len() != t_len {
        return Err(Error::Shape(format!(
            "target length {} does not match logits length {}",
            targets.len(),
            t_len
        )));
    }
    if let Some(&bad) = targets.ids.iter().find(|&&id| id as usize >= n) {
        return Err(Error::Validation(format!(
            "target id {bad} out of range for {n} classes"
        )));
    }
    let mut total = 0.0;
    for (t, &target) in targets.ids.iter().enumerate() {
        let row = logits.row(t);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let logsum = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        total += logsum - logits[[t, target as usize]];
    }
    Ok(total / t_len as f64)
}

/// Length-aligns the ground truth to the prediction: extra target frames are
/// trimmed, missing ones would be pad frames that the mask excludes, so the
/// effective length is `min(pred_len, target_len)`.
pub fn aligned_len(pred_len: usize, target_len: usize) -> usize {
    pred_len.min(target_len)
}

/// Time-averaged L1, with the per-frame absolute difference summed over
/// feature dimensions.
pub fn l1_features(pred: &Array2<f64>, target: &FeatureSequence) -> Result<f64> {
    l1_features_with(pred, target, false)
}

/// As [`l1_features`], optionally averaging (rather than summing) over the
/// feature dimensions.
pub fn l1_features_with(
    pred: &Array2<f64>,
    target: &FeatureSequence,
    mean_over_dims: bool,
) -> Result<f64> {
    if pred.ncols() != target.dim() {
        return Err(Error::Shape(format!(
            "prediction dim {} does not match target dim {}",
            pred.ncols(),
            target.dim()
        )));
    }
    let t_eff = aligned_len(pred.nrows(), target.num_frames());
    if t_eff == 0 {
        return Err(Error::Shape("empty prediction".into()));
    }
    let mut total = 0.0;
    for t in 0..t_eff {
        for d in 0..pred.ncols() {
            total += (pred[[t, d]] - target.frames[[t, d]] as f64).abs();
        }
    }
    let denom = if mean_over_dims {
        (t_eff * pred.ncols()) as f64
    } else {
        t_eff as f64
    };
    Ok(total / denom)
}

fn logsumexp2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Blank-augmented label sequence: [0, t1, 0, t2, ..., 0].
fn extend_labels(tokens: &[usize]) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * tokens.len() + 1);
    ext.push(0);
    for &t in tokens {
        ext.push(t);
        ext.push(0);
    }
    ext
}

/// Fewest frames that can emit `tokens` under the collapse rule (repeats
/// need a separating blank).
pub fn min_alignment_len(tokens: &[usize]) -> usize {
    let repeats = tokens.windows(2).filter(|w| w[0] == w[1]).count();
    tokens.len() + repeats
}

fn validate_ctc_inputs(log_probs: &Array2<f64>, tokens: &[usize]) -> Result<()> {
    let (t_frames, width) = (log_probs.nrows(), log_probs.ncols());
    if width < 2 {
        return Err(Error::Shape(
            "log_probs must have at least blank + one token column".into(),
        ));
    }
    if tokens.is_empty() {
        return Err(Error::Validation("empty CTC target".into()));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t == 0 || t >= width) {
        return Err(Error::Validation(format!(
            "token id {bad} out of range [1, {}]",
            width - 1
        )));
    }
    let needed = min_alignment_len(tokens);
    if needed > t_frames {
        return Err(Error::InfeasibleTarget(format!(
            "target needs at least {needed} frames, got {t_frames}"
        )));
    }
    Ok(())
}

/// Log-space CTC forward pass; returns the full alpha matrix (T x S).
fn ctc_alpha(log_probs: &Array2<f64>, ext: &[usize]) -> Array2<f64> {
    let t_frames = log_probs.nrows();
    let s_len = ext.len();
    let mut alpha = Array2::from_elem((t_frames, s_len), f64::NEG_INFINITY);
    alpha[[0, 0]] = log_probs[[0, ext[0]]];
    if s_len > 1 {
        alpha[[0, 1]] = log_probs[[0, ext[1]]];
    }
    for t in 1..t_frames {
        for s in 0..s_len {
            let mut acc = alpha[[t - 1, s]];
            if s >= 1 {
                acc = logsumexp2(acc, alpha[[t - 1, s - 1]]);
            }
            if s >= 2 && ext[s] != 0 && ext[s] != ext[s - 2] {
                acc = logsumexp2(acc, alpha[[t - 1, s - 2]]);
            }
            alpha[[t, s]] = acc + log_probs[[t, ext[s]]];
        }
    }
    alpha
}

/// Negative log-likelihood of the token sequence under the standard CTC
/// forward algorithm. `log_probs` rows are log-softmax normalized with blank
/// at column 0.
pub fn ctc_loss(log_probs: &Array2<f64>, tokens: &[usize]) -> Result<f64> {
    validate_ctc_inputs(log_probs, tokens)?;
    let ext = extend_labels(tokens);
    let alpha = ctc_alpha(log_probs, &ext);
    let t_last = log_probs.nrows() - 1;
    let s_len = ext.len();
    let tail = if s_len > 1 {
        logsumexp2(alpha[[t_last, s_len - 1]], alpha[[t_last, s_len - 2]])
    } else {
        alpha[[t_last, s_len - 1]]
    };
    if tail == f64::NEG_INFINITY {
        return Err(Error::Numeric("CTC total probability is zero".into()));
    }
    Ok(-tail)
}

/// Loss and gradient of [`ctc_loss`] with respect to `log_probs`, via the
/// forward-backward algorithm.
pub fn ctc_loss_and_grad(
    log_probs: &Array2<f64>,
    tokens: &[usize],
) -> Result<(f64, Array2<f64>)> {
    validate_ctc_inputs(log_probs, tokens)?;
    let ext = extend_labels(tokens);
    let t_frames = log_probs.nrows();
    let s_len = ext.len();
    let alpha = ctc_alpha(log_probs, &ext);

    // beta[t][s]: log prob of completing from (t, s), including the emission
    // at time t.
    let mut beta = Array2::from_elem((t_frames, s_len), f64::NEG_INFINITY);
    beta[[t_frames - 1, s_len - 1]] = log_probs[[t_frames - 1, ext[s_len - 1]]];
    if s_len > 1 {
        beta[[t_frames - 1, s_len - 2]] = log_probs[[t_frames - 1, ext[s_len - 2]]];
    }
    for t in (0..t_frames - 1).rev() {
        for s in 0..s_len {
            let mut acc = beta[[t + 1, s]];
            if s + 1 < s_len {
                acc = logsumexp2(acc, beta[[t + 1, s + 1]]);
            }
            if s + 2 < s_len && ext[s + 2] != 0 && ext[s + 2] != ext[s] {
                acc = logsumexp2(acc, beta[[t + 1, s + 2]]);
            }
            beta[[t, s]] = acc + log_probs[[t, ext[s]]];
        }
    }

    let log_p = if s_len > 1 {
        logsumexp2(
            alpha[[t_frames - 1, s_len - 1]],
            alpha[[t_frames - 1, s_len - 2]],
        )
    } else {
        alpha[[t_frames - 1, s_len - 1]]
    };
    if log_p == f64::NEG_INFINITY {
        return Err(Error::Numeric("CTC total probability is zero".into()));
    }

    // Each path through (t, s) carries exactly one emission log_probs[t,
    // ext[s]], so d(-log p)/d lp[t,k] = -exp(logsumexp_{s: ext[s]=k}
    // (alpha+beta-lp) - log p).
    let mut grad = Array2::<f64>::zeros((t_frames, log_probs.ncols()));
    for t in 0..t_frames {
        for s in 0..s_len {
            let k = ext[s];
            let gamma = alpha[[t, s]] + beta[[t, s]] - log_probs[[t, k]];
            if gamma > f64::NEG_INFINITY {
                grad[[t, k]] += (gamma - log_p).exp();
            }
        }
    }
    grad.mapv_inplace(|v| -v);
    Ok((-log_p, grad))
}

/// alpha_ctc * ctc + alpha_l1 * l1.
pub fn total_loss(l1: f64, ctc: f64, weights: &LossWeights) -> Result<f64> {
    weights.validate()?;
    if !l1.is_finite() || !ctc.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss components: l1={l1}, ctc={ctc}"
        )));
    }
    Ok(weights.alpha_ctc * ctc + weights.alpha_l1 * l1)
}
