use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Subcommand, ValueEnum};
use halluguard::eval::DEFAULT_TAU_R;
use halluguard::tiny_lm::vocab::{addition_corpus, copy_corpus, encode_corpus};
use halluguard::tiny_lm::{
    detector_scorer, guided_beam_search, make_labeled_dataset, masked_accuracy, sample_k, train_tiny_lm,
    write_checkpoint, TinyLMConfig, TrainConfig,
};
use halluguard::{write_bundle, DetectorConfig, TrajectoryBundle};

use crate::args::{invalid, load_model, BeamArgs, DecodeArgs, DetectorArgs, GramArgs, PromptArgs};
use crate::commands::{output, BUNDLE_EXT};

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Task {
    Addition,
    Copy,
}

#[derive(Subcommand, Debug)]
pub enum TinyLmCmd {
    /// Train a model and write a checkpoint
    Train {
        /// Built-in corpus
        #[arg(long, value_enum, default_value = "addition")]
        task: Task,
        /// UTF-8 corpus, one sequence per line (replaces --task)
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value = "3000")]
        steps: usize,
        #[arg(long, default_value = "3e-3")]
        lr: f64,
        #[arg(long, default_value = "32")]
        batch_size: usize,
        #[arg(long, default_value = "0.01")]
        weight_decay: f64,
        #[arg(long, default_value = "100")]
        warmup: usize,
        #[arg(long, default_value = "32")]
        d_model: usize,
        #[arg(long, default_value = "2")]
        layers: usize,
        #[arg(long, default_value = "4")]
        heads: usize,
        #[arg(long, default_value = "16")]
        context: usize,
        #[arg(long, default_value = "0")]
        seed: u64,
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Sample K generations per prompt and write one bundle per prompt
    Sample {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        prompts: PromptArgs,
        #[command(flatten)]
        decode: DecodeArgs,
        #[arg(long, default_value = "0")]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Sample and label bundles against the prompt references
    Dataset {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        prompts: PromptArgs,
        #[command(flatten)]
        decode: DecodeArgs,
        #[arg(long, default_value = "0.5")]
        tau_r: f64,
        #[arg(long, default_value = "0")]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Beam search with detector-guided reranking
    Rerank {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        prompts: PromptArgs,
        #[command(flatten)]
        beam: BeamArgs,
        #[command(flatten)]
        detector: DetectorArgs,
        #[command(flatten)]
        spectral: GramArgs,
        #[arg(long, default_value = "0")]
        seed: u64,
        #[arg(short, long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

/// FNV-1a, used to fingerprint checkpoints.
fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

fn write_bundles(dir: &Path, bundles: &[TrajectoryBundle]) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(halluguard::Error::from)
        .with_context(|| format!("creating {}", dir.display()))?;
    for b in bundles {
        let path = dir.join(format!("{}.{BUNDLE_EXT}", b.prompt_id));
        let mut w = BufWriter::new(
            File::create(&path)
                .map_err(halluguard::Error::from)
                .with_context(|| format!("creating {}", path.display()))?,
        );
        write_bundle(b, &mut w).with_context(|| format!("writing {}", path.display()))?;
        w.flush()?;
    }
    Ok(())
}

pub fn run(cmd: TinyLmCmd) -> Result<()> {
    match cmd {
        TinyLmCmd::Train {
            task,
            corpus,
            steps,
            lr,
            batch_size,
            weight_decay,
            warmup,
            d_model,
            layers,
            heads,
            context,
            seed,
            out,
            config: _,
        } => {
            let lines = match &corpus {
                Some(p) => std::fs::read_to_string(p)
                    .map_err(halluguard::Error::from)
                    .with_context(|| format!("reading {}", p.display()))?
                    .lines()
                    .filter(|l| !l.trim().is_empty())
                    .map(str::to_string)
                    .collect(),
                None => match task {
                    Task::Addition => addition_corpus(),
                    Task::Copy => copy_corpus(4000, 5, seed),
                },
            };
            let seqs = encode_corpus(&lines)?;
            let cfg = TinyLMConfig {
                d_model,
                n_layers: layers,
                n_heads: heads,
                context_len: context,
                seed,
                ..TinyLMConfig::default()
            };
            let train = TrainConfig {
                steps,
                lr,
                batch_size,
                weight_decay,
                warmup,
                seed,
                ..TrainConfig::default()
            };
            let outcome = train_tiny_lm(&seqs, cfg, &train)?;
            let acc = masked_accuracy(&outcome.model, &seqs)?;
            let mut bytes = Vec::new();
            write_checkpoint(&outcome.model, &mut bytes)?;
            std::fs::write(&out, &bytes)
                .map_err(halluguard::Error::from)
                .with_context(|| format!("writing {}", out.display()))?;
            let first = outcome.losses.first().copied().unwrap_or(f64::NAN);
            let last = outcome.losses.last().copied().unwrap_or(f64::NAN);
            println!(
                "# seed={seed} steps={steps} loss={first:.4}->{last:.4} accuracy={acc:.4} fnv1a={:016x}",
                fnv1a(&bytes)
            );
        }
        TinyLmCmd::Sample {
            model,
            prompts,
            decode,
            seed,
            out_dir,
            config: _,
        } => {
            let m = load_model(&model)?;
            let dc = decode.config(seed);
            let bundles = prompts
                .load()?
                .iter()
                .map(|p| sample_k(&m, p, &dc, decode.corruption))
                .collect::<halluguard::Result<Vec<_>>>()?;
            write_bundles(&out_dir, &bundles)?;
            println!("# seed={seed} wrote {} bundles to {}", bundles.len(), out_dir.display());
        }
        TinyLmCmd::Dataset {
            model,
            prompts,
            decode,
            tau_r,
            seed,
            out_dir,
            config: _,
        } => {
            if !(tau_r > 0.0 && tau_r <= 1.0) {
                return Err(invalid("tau_r", format!("must lie in (0, 1], got {tau_r} (default {DEFAULT_TAU_R})")).into());
            }
            let m = load_model(&model)?;
            let prompts = prompts.load()?;
            if let Some(p) = prompts.iter().find(|p| p.references.is_empty()) {
                return Err(invalid("prompts", format!("prompt {} has no references", p.id)).into());
            }
            let ds = make_labeled_dataset(&m, &prompts, &decode.config(seed), decode.corruption, tau_r)?;
            write_bundles(&out_dir, &ds)?;
            let pos = ds.iter().filter(|b| b.label == Some(1)).count();
            println!(
                "# seed={seed} wrote {} bundles to {}; hallucination rate {:.4} ({pos}/{})",
                ds.len(),
                out_dir.display(),
                pos as f64 / ds.len() as f64,
                ds.len()
            );
        }
        TinyLmCmd::Rerank {
            model,
            prompts,
            beam,
            detector,
            spectral,
            seed,
            out,
            config: _,
        } => {
            let m = load_model(&model)?;
            let cfg = beam.config();
            let dcfg = DetectorConfig {
                spectral: spectral.config(),
                consistency_sim: detector.consistency_sim,
                link_threshold: detector.link_threshold,
                ..DetectorConfig::default()
            };
            let scorer = detector_scorer(beam.detector, dcfg);
            let prompts = prompts.load()?;
            let mut w = output(out.as_deref())?;
            writeln!(w, "# seed={seed} detector={} weight={}", beam.detector, cfg.weight)?;
            let mut csv = csv::Writer::from_writer(&mut w);
            csv.write_record(["prompt_id", "output", "correct", "logprob", "scorer_failures"])?;
            let (mut hits, mut scored) = (0usize, 0usize);
            for p in &prompts {
                let r = guided_beam_search(&m, &p.tokens, &cfg, Some(&scorer))?;
                let correct = if p.references.is_empty() {
                    "NA".to_string()
                } else {
                    scored += 1;
                    let ok = p.references.iter().any(|x| *x == r.text);
                    hits += usize::from(ok);
                    u8::from(ok).to_string()
                };
                csv.write_record([
                    p.id.clone(),
                    r.text.clone(),
                    correct,
                    r.logprob.to_string(),
                    r.scorer_failures.to_string(),
                ])?;
            }
            csv.flush()?;
            drop(csv);
            w.flush()?;
            if scored > 0 {
                writeln!(io::stderr(), "accuracy {:.4} ({hits}/{scored})", hits as f64 / scored as f64)?;
            }
        }
    }
    Ok(())
}
