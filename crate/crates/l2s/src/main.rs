//! `l2s` command-line entry point. Exit codes: 0 success, 2 validation
//! failure, 3 numeric failure, 4 config error.

use std::collections::HashMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use l2s::error::{Error, Result};
use l2s::featureio::{FeatureKind, Split};
use l2s::pipeline::{
    self, AblationPlan, AblationVariant, InferMode, PrepConfig,
};
use l2s::trainer::load_kv_file;

#[derive(Parser)]
#[command(name = "l2s", version, about = "Lip-to-speech synthesis toolkit")]
struct Cli {
    /// Key-value config file (`key = value` lines, `#` comments).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every randomized stage; identical seeds reproduce outputs
    /// byte for byte.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output directory for commands that write multiple artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Validate a dataset manifest (rates, dims, 2:1 length contract) and
    /// assign splits when missing.
    Prepare {
        /// Dataset manifest; ignored with --synthetic.
        #[arg(long, required_unless_present = "synthetic")]
        manifest: Option<PathBuf>,
        /// Materialize the synthetic task under --out first.
        #[arg(long)]
        synthetic: bool,
    },
    /// Fit a k-means codebook on one feature stream of one split.
    FitKmeans {
        #[arg(long)]
        manifest: PathBuf,
        /// Feature stream: "lip" or "speech".
        #[arg(long)]
        stream: String,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long)]
        output: PathBuf,
    },
    /// Train the sequence model on a prepared manifest.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// Continue from --out/state.l2sc instead of starting fresh.
        #[arg(long)]
        resume: bool,
    },
    /// Run one utterance through a checkpoint.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Lip features (feature modes) or lip units (units mode).
        #[arg(long)]
        input: PathBuf,
        /// "features_then_quantize" or "units_direct".
        #[arg(long)]
        mode: String,
        /// Speech codebook; required by features_then_quantize.
        #[arg(long)]
        codebook: Option<PathBuf>,
        /// Predicted unit file.
        #[arg(long)]
        output: PathBuf,
        /// Also write the predicted feature sequence here.
        #[arg(long)]
        features_output: Option<PathBuf>,
    },
    /// Render a unit file to audio (toy vocoder) or export it for an
    /// external vocoder.
    Synthesize {
        #[arg(long)]
        units: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Score synthesized audio and hypothesis transcripts against a manifest.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        /// Reference WAVs, one `<utt_id>.wav` per manifest row.
        #[arg(long)]
        ref_dir: PathBuf,
        /// Synthesized WAVs under test.
        #[arg(long)]
        deg_dir: PathBuf,
        /// Hypothesis transcripts, one `<utt_id>.txt` per row.
        #[arg(long)]
        hyp_dir: PathBuf,
        /// Label of the ASR that produced the hypotheses.
        #[arg(long, default_value = "external-unspecified")]
        asr_label: String,
    },
    /// Train and score model variants side by side on a shared split.
    Ablate {
        #[arg(long)]
        manifest: PathBuf,
        /// Comma-separated variant names; defaults to all five.
        #[arg(long)]
        variants: Option<String>,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<HashMap<String, String>> {
    match path {
        Some(p) => load_kv_file(p),
        None => Ok(HashMap::new()),
    }
}

fn run(cli: Cli) -> Result<()> {
    let kv = load_config(&cli.config)?;
    match cli.cmd {
        Cmd::Prepare {
            manifest,
            synthetic,
        } => {
            let report = if synthetic {
                pipeline::cmd_prepare_synthetic(&kv, cli.seed, &cli.out)?
            } else {
                let manifest = manifest.expect("clap enforces presence");
                let prep = PrepConfig::from_kv(&kv)?;
                pipeline::cmd_prepare(&manifest, &prep, cli.seed, &cli.out)?
            };
            println!(
                "prepared {} utterances, {} violations; manifest: {}",
                report.total_utterances,
                report.violations.len(),
                report.manifest_path.display()
            );
        }
        Cmd::FitKmeans {
            manifest,
            stream,
            k,
            split,
            output,
        } => {
            let kind = match stream.as_str() {
                "lip" => FeatureKind::Lip,
                "speech" => FeatureKind::Speech,
                other => {
                    return Err(Error::Config(format!(
                        "unknown feature stream '{other}' (expected lip or speech)"
                    )))
                }
            };
            let cb =
                pipeline::cmd_fit_kmeans(&manifest, kind, k, Split::parse(&split)?, cli.seed, &output)?;
            println!(
                "fitted {}-centroid codebook (inertia {:.6e}) to {}",
                cb.k(),
                cb.fit_metadata.inertia,
                output.display()
            );
        }
        Cmd::Train { manifest, resume } => {
            let outcome = pipeline::cmd_train(&kv, &manifest, &cli.out, resume)?;
            println!(
                "trained to step {}; best val loss {:.6e}; checkpoints under {}",
                outcome.log.last().map_or(0, |r| r.step),
                outcome.best_val_loss,
                cli.out.display()
            );
        }
        Cmd::Infer {
            checkpoint,
            input,
            mode,
            codebook,
            output,
            features_output,
        } => {
            let units = pipeline::cmd_infer(
                &checkpoint,
                &input,
                InferMode::parse(&mode)?,
                codebook.as_deref(),
                &output,
                features_output.as_deref(),
            )?;
            println!("wrote {} units to {}", units.len(), output.display());
        }
        Cmd::Synthesize { units, output } => {
            let spec = pipeline::vocoder_spec_from_kv(&kv)?;
            pipeline::cmd_synthesize(&units, &spec, &output)?;
            println!("wrote {}", output.display());
        }
        Cmd::Evaluate {
            manifest,
            ref_dir,
            deg_dir,
            hyp_dir,
            asr_label,
        } => {
            std::fs::create_dir_all(&cli.out).map_err(|e| Error::io(&cli.out, e))?;
            let report_path = cli.out.join("metrics.tsv");
            let report = pipeline::cmd_evaluate(
                &manifest, &ref_dir, &deg_dir, &hyp_dir, &asr_label, cli.seed, &report_path,
            )?;
            println!(
                "mean stoi {:.4}, mean estoi {:.4}, corpus wer {:.4}; report: {}",
                report.mean_stoi,
                report.mean_estoi,
                report.corpus_wer,
                report_path.display()
            );
        }
        Cmd::Ablate { manifest, variants } => {
            let variants = match variants {
                None => pipeline::ALL_ABLATION_VARIANTS.to_vec(),
                Some(raw) => raw
                    .split(',')
                    .map(|s| AblationVariant::parse(s.trim()))
                    .collect::<Result<_>>()?,
            };
            let plan = AblationPlan {
                variants,
                seed: cli.seed,
            };
            let rows = pipeline::cmd_ablate(&plan, &kv, &manifest, &cli.out)?;
            print!("{}", pipeline::format_ablation_table(&rows, cli.seed));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
