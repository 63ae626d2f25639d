//! Feature/unit/waveform data model, on-disk formats, manifests, and the
//! deterministic synthetic task generator used for desk-scale fixtures.
//!
//! Binary feature container: magic `L2SF`, u32 LE version, u32 LE frame rate,
//! u32 LE T, u32 LE D, then T*D float32 LE values row-major. Version 2 adds a
//! u32 kind code after D (used for codebooks).

use std::collections::HashSet;
use std::fs;
use std::io::{Read};
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView1};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"L2SF";
pub const LIP_FRAME_RATE_HZ: u32 = 25;
pub const SPEECH_FRAME_RATE_HZ: u32 = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    Lip,
    Speech,
}

impl FeatureKind {
    pub fn code(self) -> u32 {
        match self {
            FeatureKind::Lip => 0,
            FeatureKind::Speech => 1,
        }
    }

    pub fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(FeatureKind::Lip),
            1 => Ok(FeatureKind::Speech),
            other => Err(Error::Validation(format!("unknown kind code {other}"))),
        }
    }
}

/// A timed matrix of continuous features, T frames by D dims.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub frames: Array2<f32>,
    pub frame_rate_hz: u32,
    pub kind: FeatureKind,
}

impl FeatureSequence {
    pub fn new(frames: Array2<f32>, frame_rate_hz: u32, kind: FeatureKind) -> Result<Self> {
        if frames.nrows() == 0 || frames.ncols() == 0 {
            return Err(Error::Shape(format!(
                "feature sequence must be at least 1x1, got {}x{}",
                frames.nrows(),
                frames.ncols()
            )));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite value in features".into()));
        }
        if frame_rate_hz == 0 {
            return Err(Error::Validation("frame rate must be positive".into()));
        }
        Ok(Self {
            frames,
            frame_rate_hz,
            kind,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }
}

/// A timed list of discrete cluster IDs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnitSequence {
    pub ids: Vec<u32>,
    pub codebook_size: u32,
    pub frame_rate_hz: u32,
}

impl UnitSequence {
    pub fn new(ids: Vec<u32>, codebook_size: u32, frame_rate_hz: u32) -> Result<Self> {
        if codebook_size == 0 {
            return Err(Error::Validation("codebook size must be positive".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= codebook_size) {
            return Err(Error::Validation(format!(
                "unit id {bad} out of range for codebook size {codebook_size}"
            )));
        }
        Ok(Self {
            ids,
            codebook_size,
            frame_rate_hz,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Mono audio samples in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate_hz: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate_hz: u32) -> Result<Self> {
        if sample_rate_hz == 0 {
            return Err(Error::Validation("sample rate must be positive".into()));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite sample in waveform".into()));
        }
        Ok(Self {
            samples,
            sample_rate_hz,
        })
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Validation(format!("unknown split label '{other}'"))),
        }
    }
}

/// One manifest row.
#[derive(Debug, Clone)]
pub struct UtteranceRecord {
    pub utt_id: String,
    pub lip_feature_path: PathBuf,
    pub speech_feature_path: PathBuf,
    pub transcript: String,
    pub split: Option<Split>,
}

// ---------------------------------------------------------------------------
// Binary feature container
// ---------------------------------------------------------------------------

struct CountingReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> CountingReader<R> {
    fn new(inner: R) -> Self {
        Self { inner, offset: 0 }
    }

    fn read_exact_at(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let start = self.offset;
        self.inner.read_exact(buf).map_err(|_| Error::Format {
            offset: start,
            msg: format!("truncated file while reading {what}"),
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn read_u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact_at(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }
}

pub(crate) struct ContainerHeader {
    pub frame_rate_hz: u32,
    pub kind_code: Option<u32>,
}

pub(crate) fn write_matrix_container(
    path: &Path,
    version: u32,
    frame_rate_hz: u32,
    kind_code: Option<u32>,
    matrix: &Array2<f32>,
) -> Result<()> {
    let mut buf = Vec::with_capacity(24 + matrix.len() * 4);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&version.to_le_bytes());
    buf.extend_from_slice(&frame_rate_hz.to_le_bytes());
    buf.extend_from_slice(&(matrix.nrows() as u32).to_le_bytes());
    buf.extend_from_slice(&(matrix.ncols() as u32).to_le_bytes());
    if let Some(code) = kind_code {
        buf.extend_from_slice(&code.to_le_bytes());
    }
    for row in matrix.rows() {
        for v in row {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_matrix_container(
    path: &Path,
    expect_version: u32,
) -> Result<(ContainerHeader, Array2<f32>)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = CountingReader::new(std::io::BufReader::new(file));

    let mut magic = [0u8; 4];
    r.read_exact_at(&mut magic, "magic")?;
    if &magic != FEATURE_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&magic),
                String::from_utf8_lossy(FEATURE_MAGIC)
            ),
        });
    }
    let version = r.read_u32("version")?;
    if version != expect_version {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported version {version}, expected {expect_version}"),
        });
    }
    let frame_rate_hz = r.read_u32("frame rate")?;
    let t = r.read_u32("frame count")? as usize;
    let d = r.read_u32("feature dim")? as usize;
    let kind_code = if version >= 2 {
        Some(r.read_u32("kind code")?)
    } else {
        None
    };
    if t == 0 || d == 0 {
        return Err(Error::Format {
            offset: 12,
            msg: format!("declared shape {t}x{d} must be at least 1x1"),
        });
    }
    let mut payload = vec![0u8; t * d * 4];
    r.read_exact_at(&mut payload, "float payload")?;
    let mut values = Vec::with_capacity(t * d);
    for chunk in payload.chunks_exact(4) {
        values.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
    }
    let matrix = Array2::from_shape_vec((t, d), values)
        .expect("shape checked against payload length");
    Ok((
        ContainerHeader {
            frame_rate_hz,
            kind_code,
        },
        matrix,
    ))
}

pub fn write_features(seq: &FeatureSequence, path: &Path) -> Result<()> {
    write_matrix_container(path, 1, seq.frame_rate_hz, None, &seq.frames)
}

pub fn read_features(path: &Path) -> Result<FeatureSequence> {
    let (header, matrix) = read_matrix_container(path, 1)?;
    // Kind is not stored in version 1; infer from the frame rate contract,
    // defaulting to speech for unknown rates.
    let kind = if header.frame_rate_hz == LIP_FRAME_RATE_HZ {
        FeatureKind::Lip
    } else {
        FeatureKind::Speech
    };
    FeatureSequence::new(matrix, header.frame_rate_hz, kind)
}

// ---------------------------------------------------------------------------
// Unit files
// ---------------------------------------------------------------------------

/// Writes the unit text format plus a `<path>.meta` sidecar with the frame
/// rate and codebook size.
pub fn write_units(units: &UnitSequence, path: &Path) -> Result<()> {
    let body = units
        .ids
        .iter()
        .map(|id| id.to_string())
        .collect::<Vec<_>>()
        .join(" ");
    fs::write(path, format!("{body}\n")).map_err(|e| Error::io(path, e))?;
    let meta = format!(
        "frame_rate_hz={}\ncodebook_size={}\n",
        units.frame_rate_hz, units.codebook_size
    );
    let meta_path = sidecar_path(path);
    fs::write(&meta_path, meta).map_err(|e| Error::io(&meta_path, e))
}

pub fn read_units(path: &Path) -> Result<UnitSequence> {
    let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let meta_path = sidecar_path(path);
    let meta = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let mut frame_rate_hz = None;
    let mut codebook_size = None;
    for line in meta.lines() {
        if let Some((k, v)) = line.split_once('=') {
            match k.trim() {
                "frame_rate_hz" => frame_rate_hz = v.trim().parse::<u32>().ok(),
                "codebook_size" => codebook_size = v.trim().parse::<u32>().ok(),
                _ => {}
            }
        }
    }
    let frame_rate_hz = frame_rate_hz
        .ok_or_else(|| Error::Schema(format!("missing frame_rate_hz in {}", meta_path.display())))?;
    let codebook_size = codebook_size
        .ok_or_else(|| Error::Schema(format!("missing codebook_size in {}", meta_path.display())))?;
    let mut ids = Vec::new();
    for tok in body.split_whitespace() {
        let id = tok
            .parse::<u32>()
            .map_err(|_| Error::Validation(format!("bad unit token '{tok}'")))?;
        ids.push(id);
    }
    UnitSequence::new(ids, codebook_size, frame_rate_hz)
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".meta");
    PathBuf::from(os)
}

// ---------------------------------------------------------------------------
// WAV (16-bit PCM mono)
// ---------------------------------------------------------------------------

pub fn write_wav(wave: &Waveform, path: &Path) -> Result<()> {
    let n = wave.samples.len();
    let data_len = (n * 2) as u32;
    let mut buf = Vec::with_capacity(44 + n * 2);
    buf.extend_from_slice(b"RIFF");
    buf.extend_from_slice(&(36 + data_len).to_le_bytes());
    buf.extend_from_slice(b"WAVE");
    buf.extend_from_slice(b"fmt ");
    buf.extend_from_slice(&16u32.to_le_bytes());
    buf.extend_from_slice(&1u16.to_le_bytes()); // PCM
    buf.extend_from_slice(&1u16.to_le_bytes()); // mono
    buf.extend_from_slice(&wave.sample_rate_hz.to_le_bytes());
    buf.extend_from_slice(&(wave.sample_rate_hz * 2).to_le_bytes());
    buf.extend_from_slice(&2u16.to_le_bytes()); // block align
    buf.extend_from_slice(&16u16.to_le_bytes()); // bits per sample
    buf.extend_from_slice(b"data");
    buf.extend_from_slice(&data_len.to_le_bytes());
    for &s in &wave.samples {
        let q = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        buf.extend_from_slice(&q.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_wav(path: &Path) -> Result<Waveform> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 44 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::Format {
            offset: 0,
            msg: "not a RIFF/WAVE file".into(),
        });
    }
    // Walk chunks to find fmt and data.
    let mut pos = 12usize;
    let mut sample_rate = None;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_end = (pos + 8 + size).min(bytes.len());
        let body = &bytes[pos + 8..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(Error::Format {
                        offset: pos as u64,
                        msg: "short fmt chunk".into(),
                    });
                }
                let format = u16::from_le_bytes([body[0], body[1]]);
                let channels = u16::from_le_bytes([body[2], body[3]]);
                let bits = u16::from_le_bytes([body[14], body[15]]);
                if format != 1 || channels != 1 || bits != 16 {
                    return Err(Error::Format {
                        offset: pos as u64,
                        msg: format!(
                            "expected 16-bit PCM mono, got format={format} channels={channels} bits={bits}"
                        ),
                    });
                }
                sample_rate = Some(u32::from_le_bytes(body[4..8].try_into().unwrap()));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        pos = body_end + (size & 1);
    }
    let sample_rate = sample_rate.ok_or(Error::Format {
        offset: 12,
        msg: "missing fmt chunk".into(),
    })?;
    let data = data.ok_or(Error::Format {
        offset: 12,
        msg: "missing data chunk".into(),
    })?;
    let samples = data
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32 / 32768.0)
        .collect();
    Waveform::new(samples, sample_rate)
}

// ---------------------------------------------------------------------------
// Manifests
// ---------------------------------------------------------------------------

const MANIFEST_HEADER_FULL: &str = "utt_id\tlip_feat\tspeech_feat\ttranscript\tsplit";
const MANIFEST_HEADER_NO_SPLIT: &str = "utt_id\tlip_feat\tspeech_feat\ttranscript";

pub fn load_manifest(path: &Path) -> Result<Vec<UtteranceRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text)
}

pub fn parse_manifest(text: &str) -> Result<Vec<UtteranceRecord>> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Schema("empty manifest: no header line".into()))?;
    let has_split = if header == MANIFEST_HEADER_FULL {
        true
    } else if header == MANIFEST_HEADER_NO_SPLIT {
        false
    } else {
        return Err(Error::Schema(format!(
            "bad manifest header '{header}', expected '{MANIFEST_HEADER_FULL}'"
        )));
    };

    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let expected = if has_split { 5 } else { 4 };
        if cols.len() != expected {
            return Err(Error::Schema(format!(
                "line {}: expected {} columns, got {}",
                lineno + 2,
                expected,
                cols.len()
            )));
        }
        let utt_id = cols[0].to_string();
        if !seen.insert(utt_id.clone()) {
            return Err(Error::Validation(format!("duplicate utt_id '{utt_id}'")));
        }
        let split = if has_split && !cols[4].is_empty() {
            Some(Split::parse(cols[4])?)
        } else {
            None
        };
        records.push(UtteranceRecord {
            utt_id,
            lip_feature_path: PathBuf::from(cols[1]),
            speech_feature_path: PathBuf::from(cols[2]),
            transcript: cols[3].to_string(),
            split,
        });
    }
    Ok(records)
}

pub fn write_manifest(records: &[UtteranceRecord], path: &Path) -> Result<()> {
    let mut out = String::from(MANIFEST_HEADER_FULL);
    out.push('\n');
    for r in records {
        let split = r.split.map(|s| s.as_str()).unwrap_or("");
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            r.utt_id,
            r.lip_feature_path.display(),
            r.speech_feature_path.display(),
            r.transcript,
            split
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Deterministic 90/5/5-style split. Sizes for val and test are
/// `round(n * ratio)`; the remainder goes to train.
pub fn make_split(
    ids: &[String],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<Vec<(String, Split)>> {
    if ids.is_empty() {
        return Err(Error::Validation("cannot split an empty id list".into()));
    }
    let (r_train, r_val, r_test) = ratios;
    if r_train < 0.0 || r_val < 0.0 || r_test < 0.0 {
        return Err(Error::Config("split ratios must be nonnegative".into()));
    }
    if (r_train + r_val + r_test - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios must sum to 1, got {}",
            r_train + r_val + r_test
        )));
    }
    let n = ids.len();
    let n_val = (n as f64 * r_val).round() as usize;
    let n_test = (n as f64 * r_test).round() as usize;
    if n_val + n_test > n {
        return Err(Error::Config("val+test ratios exceed the dataset".into()));
    }

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    // Fisher-Yates
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let mut assignment = vec![Split::Train; n];
    for &idx in order.iter().take(n_val) {
        assignment[idx] = Split::Val;
    }
    for &idx in order.iter().skip(n_val).take(n_test) {
        assignment[idx] = Split::Test;
    }
    Ok(ids
        .iter()
        .cloned()
        .zip(assignment)
        .collect())
}

// ---------------------------------------------------------------------------
// Synthetic task
// ---------------------------------------------------------------------------

/// Desk-scale stand-in for the external SSL encoders: each symbol has a fixed
/// random lip embedding and speech embedding; utterances are symbol sequences.
#[derive(Debug, Clone)]
pub struct SyntheticTaskSpec {
    pub vocab_size: usize,
    pub lip_dim: usize,
    pub speech_dim: usize,
    pub frames_per_symbol_lip: usize,
    pub frames_per_symbol_speech: usize,
    pub noise_sigma: f32,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            vocab_size: 100,
            lip_dim: 768,
            speech_dim: 768,
            frames_per_symbol_lip: 1,
            frames_per_symbol_speech: 2,
            noise_sigma: 0.0,
            seed: 0,
        }
    }
}

pub struct SyntheticGenerator {
    spec: SyntheticTaskSpec,
    lip_embeddings: Array2<f32>,
    speech_embeddings: Array2<f32>,
}

fn utterance_rng(seed: u64, index: u64) -> ChaCha20Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&index.to_le_bytes());
    key[16] = 0x75; // 'u'
    ChaCha20Rng::from_seed(key)
}

/// Draws `vocab` embeddings of dimension `dim`, redrawing any row within L2
/// distance 0.5 of an earlier row so the symbol->embedding map stays injective
/// with a margin.
fn draw_embedding_table(rng: &mut impl RngCore, vocab: usize, dim: usize) -> Array2<f32> {
    let mut table = Array2::<f32>::zeros((vocab, dim));
    let mut row = vec![0.0f32; dim];
    for k in 0..vocab {
        loop {
            for v in row.iter_mut() {
                *v = rng.sample::<f64, _>(StandardNormal) as f32;
            }
            let too_close = (0..k).any(|j| {
                let d2: f32 = table
                    .row(j)
                    .iter()
                    .zip(&row)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                d2 < 0.25
            });
            if !too_close {
                break;
            }
        }
        for (j, &v) in row.iter().enumerate() {
            table[[k, j]] = v;
        }
    }
    table
}

impl SyntheticGenerator {
    pub fn new(spec: SyntheticTaskSpec) -> Result<Self> {
        if spec.vocab_size == 0 || spec.lip_dim == 0 || spec.speech_dim == 0 {
            return Err(Error::Config("synthetic spec dims must be positive".into()));
        }
        if spec.noise_sigma < 0.0 {
            return Err(Error::Config("noise_sigma must be nonnegative".into()));
        }
        let mut key = [0u8; 32];
        key[0..8].copy_from_slice(&spec.seed.to_le_bytes());
        key[16] = 0x65; // 'e'
        let mut rng = ChaCha20Rng::from_seed(key);
        let lip_embeddings = draw_embedding_table(&mut rng, spec.vocab_size, spec.lip_dim);
        let speech_embeddings = draw_embedding_table(&mut rng, spec.vocab_size, spec.speech_dim);
        Ok(Self {
            spec,
            lip_embeddings,
            speech_embeddings,
        })
    }

    pub fn spec(&self) -> &SyntheticTaskSpec {
        &self.spec
    }

    pub fn lip_embeddings(&self) -> &Array2<f32> {
        &self.lip_embeddings
    }

    pub fn speech_embeddings(&self) -> &Array2<f32> {
        &self.speech_embeddings
    }

    /// Renders an utterance from an explicit symbol sequence. Noise is drawn
    /// from the utterance stream identified by `utt_index`.
    pub fn render(
        &self,
        symbols: &[usize],
        utt_index: u64,
    ) -> Result<(FeatureSequence, FeatureSequence, UnitSequence, String)> {
        if symbols.is_empty() {
            return Err(Error::Validation("need at least one symbol".into()));
        }
        if let Some(&bad) = symbols.iter().find(|&&s| s >= self.spec.vocab_size) {
            return Err(Error::Validation(format!(
                "symbol {bad} out of range for vocab {}",
                self.spec.vocab_size
            )));
        }
        let mut rng = utterance_rng(self.spec.seed, utt_index);
        // Skip the symbol-draw stream so render() and utterance() agree on
        // the noise stream for the same utt_index.
        let _ = (0..symbols.len()).map(|_| rng.next_u64()).count();

        let spl = self.spec.frames_per_symbol_lip;
        let sps = self.spec.frames_per_symbol_speech;
        let t_lip = symbols.len() * spl;
        let t_speech = symbols.len() * sps;

        let mut lip = Array2::<f32>::zeros((t_lip, self.spec.lip_dim));
        for (i, &s) in symbols.iter().enumerate() {
            for r in 0..spl {
                lip.row_mut(i * spl + r).assign(&self.lip_embeddings.row(s));
            }
        }

        let mut speech = Array2::<f32>::zeros((t_speech, self.spec.speech_dim));
        let mut unit_ids = Vec::with_capacity(t_speech);
        for (i, &s) in symbols.iter().enumerate() {
            for r in 0..sps {
                let t = i * sps + r;
                for d in 0..self.spec.speech_dim {
                    let noise: f64 = rng.sample(StandardNormal);
                    speech[[t, d]] =
                        self.speech_embeddings[[s, d]] + self.spec.noise_sigma * noise as f32;
                }
                unit_ids.push(s as u32);
            }
        }

        let transcript = symbols
            .iter()
            .map(|s| format!("w{s}"))
            .collect::<Vec<_>>()
            .join(" ");

        Ok((
            FeatureSequence::new(lip, LIP_FRAME_RATE_HZ, FeatureKind::Lip)?,
            FeatureSequence::new(speech, SPEECH_FRAME_RATE_HZ, FeatureKind::Speech)?,
            UnitSequence::new(unit_ids, self.spec.vocab_size as u32, SPEECH_FRAME_RATE_HZ)?,
            transcript,
        ))
    }

    /// Generates utterance `utt_index` with `num_symbols` random symbols.
    pub fn utterance(
        &self,
        utt_index: u64,
        num_symbols: usize,
    ) -> Result<(FeatureSequence, FeatureSequence, UnitSequence, String)> {
        if num_symbols == 0 {
            return Err(Error::Validation("num_symbols must be >= 1".into()));
        }
        let mut rng = utterance_rng(self.spec.seed, utt_index);
        let symbols: Vec<usize> = (0..num_symbols)
            .map(|_| (rng.next_u64() % self.spec.vocab_size as u64) as usize)
            .collect();
        self.render(&symbols, utt_index)
    }
}

/// Pure function of (spec, num_symbols): utterance 0 of the generator.
pub fn generate_synthetic_pair(
    spec: &SyntheticTaskSpec,
    num_symbols: usize,
) -> Result<(FeatureSequence, FeatureSequence, UnitSequence, String)> {
    SyntheticGenerator::new(spec.clone())?.utterance(0, num_symbols)
}

pub(crate) fn l2_distance_sq(a: ArrayView1<f32>, b: ArrayView1<f32>) -> f32 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use tempfile::tempdir;

    #[test]
    fn feature_roundtrip_identity() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("x.l2sf");
        let frames = array![
            [1.0f32, 2.0, 3.0, 4.0],
            [5.0, 6.0, 7.0, 8.0],
            [-1.5, 0.25, 1e-7, 9e6]
        ];
        let seq = FeatureSequence::new(frames, 25, FeatureKind::Lip).unwrap();
        write_features(&seq, &path).unwrap();
        let back = read_features(&path).unwrap();
        assert_eq!(seq.frames, back.frames);
        assert_eq!(seq.frame_rate_hz, back.frame_rate_hz);
        assert_eq!(back.kind, FeatureKind::Lip);
    }

    #[test]
    fn bad_magic_is_format_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.l2sf");
        std::fs::write(&path, b"XXXX\x01\x00\x00\x00").unwrap();
        match read_features(&path) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_is_format_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.l2sf");
        let seq = FeatureSequence::new(
            Array2::from_elem((4, 3), 1.0f32),
            50,
            FeatureKind::Speech,
        )
        .unwrap();
        write_features(&seq, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        match read_features(&path) {
            Err(Error::Format { msg, .. }) => assert!(msg.contains("truncated"), "{msg}"),
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn manifest_counts_by_split() {
        let mut text = String::from("utt_id\tlip_feat\tspeech_feat\ttranscript\tsplit\n");
        for i in 0..20 {
            let split = if i < 18 {
                "train"
            } else if i == 18 {
                "val"
            } else {
                "test"
            };
            text.push_str(&format!("u{i}\tl{i}.l2sf\ts{i}.l2sf\thello\t{split}\n"));
        }
        let records = parse_manifest(&text).unwrap();
        let count = |s| records.iter().filter(|r| r.split == Some(s)).count();
        assert_eq!(count(Split::Train), 18);
        assert_eq!(count(Split::Val), 1);
        assert_eq!(count(Split::Test), 1);
    }

    #[test]
    fn manifest_duplicate_id_rejected() {
        let text = "utt_id\tlip_feat\tspeech_feat\ttranscript\tsplit\n\
                    u1\ta\tb\tx\ttrain\n\
                    u1\tc\td\ty\ttrain\n";
        match parse_manifest(text) {
            Err(Error::Validation(msg)) => assert!(msg.contains("u1")),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn empty_manifest_is_schema_error() {
        assert!(matches!(parse_manifest(""), Err(Error::Schema(_))));
    }

    #[test]
    fn split_100_ids_gives_90_5_5() {
        let ids: Vec<String> = (0..100).map(|i| format!("u{i}")).collect();
        let assignment = make_split(&ids, (0.90, 0.05, 0.05), 7).unwrap();
        let count = |s| assignment.iter().filter(|(_, sp)| *sp == s).count();
        assert_eq!(count(Split::Train), 90);
        assert_eq!(count(Split::Val), 5);
        assert_eq!(count(Split::Test), 5);
    }

    #[test]
    fn split_single_id_goes_to_train() {
        let ids = vec!["only".to_string()];
        let assignment = make_split(&ids, (0.90, 0.05, 0.05), 1).unwrap();
        assert_eq!(assignment[0].1, Split::Train);
    }

    #[test]
    fn split_is_deterministic() {
        let ids: Vec<String> = (0..53).map(|i| format!("u{i}")).collect();
        let a = make_split(&ids, (0.90, 0.05, 0.05), 42).unwrap();
        let b = make_split(&ids, (0.90, 0.05, 0.05), 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn split_bad_ratios_rejected() {
        let ids = vec!["a".to_string()];
        assert!(matches!(
            make_split(&ids, (0.5, 0.3, 0.3), 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn synthetic_zero_noise_matches_embeddings() {
        let spec = SyntheticTaskSpec {
            vocab_size: 10,
            lip_dim: 8,
            speech_dim: 8,
            noise_sigma: 0.0,
            seed: 3,
            ..Default::default()
        };
        let gen = SyntheticGenerator::new(spec.clone()).unwrap();
        let (lip, speech, units, _) = generate_synthetic_pair(&spec, 5).unwrap();
        assert_eq!(lip.num_frames(), 5);
        assert_eq!(speech.num_frames(), 10);
        assert_eq!(lip.frame_rate_hz, 25);
        assert_eq!(speech.frame_rate_hz, 50);
        for (t, &u) in units.ids.iter().enumerate() {
            let emb = gen.speech_embeddings().row(u as usize);
            for d in 0..8 {
                assert_eq!(speech.frames[[t, d]], emb[d]);
            }
        }
    }

    #[test]
    fn synthetic_is_deterministic() {
        let spec = SyntheticTaskSpec {
            vocab_size: 20,
            lip_dim: 16,
            speech_dim: 16,
            noise_sigma: 0.05,
            seed: 9,
            ..Default::default()
        };
        let a = generate_synthetic_pair(&spec, 7).unwrap();
        let b = generate_synthetic_pair(&spec, 7).unwrap();
        assert_eq!(a.0.frames, b.0.frames);
        assert_eq!(a.1.frames, b.1.frames);
        assert_eq!(a.2.ids, b.2.ids);
        assert_eq!(a.3, b.3);
    }

    #[test]
    fn synthetic_transcript_uses_pseudo_words() {
        let spec = SyntheticTaskSpec {
            vocab_size: 30,
            lip_dim: 4,
            speech_dim: 4,
            seed: 1,
            ..Default::default()
        };
        let gen = SyntheticGenerator::new(spec).unwrap();
        let (_, _, units, transcript) = gen.render(&[17, 3], 0).unwrap();
        assert_eq!(transcript, "w17 w3");
        assert_eq!(units.ids, vec![17, 17, 3, 3]);
    }

    #[test]
    fn wav_roundtrip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("w.wav");
        let samples: Vec<f32> = (0..320)
            .map(|i| 0.5 * (i as f32 * 0.1).sin())
            .collect();
        let wave = Waveform::new(samples.clone(), 16000).unwrap();
        write_wav(&wave, &path).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.sample_rate_hz, 16000);
        assert_eq!(back.samples.len(), 320);
        for (a, b) in samples.iter().zip(&back.samples) {
            assert!((a - b).abs() < 1.0 / 32000.0);
        }
    }

    #[test]
    fn unit_file_roundtrip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("u.units");
        let units = UnitSequence::new(vec![1, 2, 3], 100, 50).unwrap();
        write_units(&units, &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "1 2 3\n");
        let back = read_units(&path).unwrap();
        assert_eq!(back, units);
    }
}
