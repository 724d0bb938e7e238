use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use halluguard::detectors::{parse_detectors, Similarity};
use halluguard::eval::{ClipConfig, EvalConfig, ThresholdMode};
use halluguard::spectral::PowerIteration;
use halluguard::tiny_lm::vocab::{addition_prompts, encode, Prompt};
use halluguard::tiny_lm::{read_checkpoint, BeamConfig, Corruption, DecodeConfig, TinyLM};
use halluguard::{AmpMode, Detector, DetectorConfig, SpectralConfig};

#[derive(Args, Debug, Clone)]
pub struct DetectorArgs {
    /// Comma-separated detectors, or `all`
    #[arg(long, default_value = "all")]
    pub detectors: String,

    /// Similarity for lexical consistency: rouge-l or cosine
    #[arg(long, default_value = "rouge-l")]
    pub consistency_sim: Similarity,

    /// Cosine link threshold for semantic entropy clustering
    #[arg(long, default_value = "0.9")]
    pub link_threshold: f64,
}

impl DetectorArgs {
    pub fn list(&self) -> Result<Vec<Detector>> {
        Ok(parse_detectors(&self.detectors)?)
    }
}

#[derive(Args, Debug, Clone)]
pub struct GramArgs {
    /// Ridge added to the Gram diagonal
    #[arg(long, default_value = "1e-3")]
    pub ridge: f64,

    /// Use raw embeddings instead of unit-normalized rows
    #[arg(long)]
    pub no_normalize: bool,

    /// Floor on hidden-state increments in proxy mode
    #[arg(long, default_value = "1e-8")]
    pub floor: f64,
}

impl GramArgs {
    pub fn config(&self) -> SpectralConfig {
        SpectralConfig {
            ridge: self.ridge,
            normalize: !self.no_normalize,
            floor: self.floor,
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct SpectralArgs {
    #[command(flatten)]
    pub gram: GramArgs,

    /// Amplification estimate: proxy (from step states) or exact (needs --model)
    #[arg(long, default_value = "proxy")]
    pub amp_mode: AmpMode,

    /// Tiny LM checkpoint that produced the bundles (exact mode)
    #[arg(long)]
    pub model: Option<PathBuf>,

    /// Power-iteration budget per step (exact mode)
    #[arg(long, default_value = "20")]
    pub power_iters: usize,

    /// Power-iteration relative tolerance (exact mode)
    #[arg(long, default_value = "1e-6")]
    pub power_tol: f64,
}

impl SpectralArgs {
    pub fn config(&self) -> SpectralConfig {
        self.gram.config()
    }

    pub fn power(&self, seed: u64) -> PowerIteration {
        PowerIteration {
            iters: self.power_iters,
            tol: self.power_tol,
            seed,
            ..PowerIteration::default()
        }
    }

    /// The model, when exact amplification is requested.
    pub fn exact_model(&self) -> Result<Option<TinyLM>> {
        match (self.amp_mode, &self.model) {
            (AmpMode::ExactJacobian, Some(p)) => Ok(Some(load_model(p)?)),
            (AmpMode::ExactJacobian, None) => Err(invalid("model", "exact amplification needs --model").into()),
            _ => Ok(None),
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct ClipArgs {
    /// Disable feature clipping
    #[arg(long)]
    pub no_clip: bool,

    /// Memory bank capacity for clipping thresholds
    #[arg(long, default_value = "3000")]
    pub bank: usize,

    /// Two-sided clipping quantile
    #[arg(long, default_value = "0.002")]
    pub quantile: f64,
}

#[derive(Args, Debug, Clone)]
pub struct ScoringArgs {
    #[command(flatten)]
    pub detectors: DetectorArgs,
    #[command(flatten)]
    pub spectral: SpectralArgs,
    #[command(flatten)]
    pub clip: ClipArgs,

    /// ROUGE-L threshold below which a generation counts as hallucinated
    #[arg(long, default_value = "0.5")]
    pub tau_r: f64,

    /// Fit z-calibration of the score components on these bundles first
    #[arg(long, num_args = 1.., value_name = "PATH")]
    pub calibrate_on: Vec<PathBuf>,
}

impl ScoringArgs {
    pub fn eval_config(&self, threshold: ThresholdMode) -> EvalConfig {
        EvalConfig {
            detector: DetectorConfig {
                spectral: self.spectral.config(),
                amp_mode: self.spectral.amp_mode,
                consistency_sim: self.detectors.consistency_sim,
                link_threshold: self.detectors.link_threshold,
                calibration: None,
            },
            clip: (!self.clip.no_clip).then(|| ClipConfig {
                capacity: self.clip.bank,
                quantile: self.clip.quantile,
            }),
            tau_r: self.tau_r,
            threshold,
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct DecodeArgs {
    #[arg(long, default_value = "0.5")]
    pub temperature: f64,

    #[arg(long, default_value = "0.95")]
    pub top_p: f64,

    #[arg(long, default_value = "10")]
    pub top_k: usize,

    /// Generations per prompt (K)
    #[arg(short = 'k', long = "samples", default_value = "10")]
    pub k: usize,

    #[arg(long, default_value = "8")]
    pub max_steps: usize,

    /// Argmax decoding
    #[arg(long)]
    pub greedy: bool,

    /// none, high-temp:FACTOR or state-noise:RHO
    #[arg(long, default_value = "none")]
    pub corruption: Corruption,
}

impl DecodeArgs {
    pub fn config(&self, seed: u64) -> DecodeConfig {
        DecodeConfig {
            temperature: self.temperature,
            top_p: self.top_p,
            top_k: self.top_k,
            k: self.k,
            max_steps: self.max_steps,
            seed,
            greedy: self.greedy,
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct PromptArgs {
    /// Prompt file: one prompt per line, references after tabs
    #[arg(long)]
    pub prompts: Option<PathBuf>,

    /// Number of generated addition prompts when no file is given
    #[arg(long, default_value = "20")]
    pub n: usize,

    /// Seed for generated addition prompts
    #[arg(long, default_value = "0")]
    pub prompt_seed: u64,
}

impl PromptArgs {
    pub fn load(&self) -> Result<Vec<Prompt>> {
        let Some(path) = &self.prompts else {
            return Ok(addition_prompts(self.n, self.prompt_seed));
        };
        let text = std::fs::read_to_string(path).map_err(halluguard::Error::from).with_context(|| format!("reading {}", path.display()))?;
        let mut out = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split('\t');
            let prompt = parts.next().unwrap_or_default().to_string();
            let tokens = encode(&prompt).with_context(|| format!("{}:{}", path.display(), i + 1))?;
            out.push(Prompt {
                id: format!("p-{:04}", out.len()),
                text: prompt,
                tokens,
                references: parts.map(str::to_string).collect(),
            });
        }
        if out.is_empty() {
            bail!(invalid("prompts", format!("{} holds no prompts", path.display())));
        }
        Ok(out)
    }
}

#[derive(Args, Debug, Clone)]
pub struct BeamArgs {
    #[arg(long, default_value = "10")]
    pub beam: usize,

    /// Weight of the detector term in the ranking (0 = plain beam search)
    #[arg(long, default_value = "0.5")]
    pub weight: f64,

    #[arg(long, default_value = "1")]
    pub rerank_every: usize,

    /// Candidates rescored per rerank step (0 = twice the beam)
    #[arg(long, default_value = "0")]
    pub shortlist: usize,

    /// Next-token extensions per candidate mini-bundle
    #[arg(long, default_value = "3")]
    pub extensions: usize,

    #[arg(long, default_value = "8")]
    pub max_steps: usize,

    /// Detector used to score candidates
    #[arg(long, default_value = "halluguard")]
    pub detector: Detector,
}

impl BeamArgs {
    pub fn config(&self) -> BeamConfig {
        BeamConfig {
            beam: self.beam,
            max_steps: self.max_steps,
            weight: self.weight,
            rerank_every: self.rerank_every,
            shortlist: self.shortlist,
            extensions: self.extensions,
        }
    }
}

pub fn invalid(field: &str, reason: impl Into<String>) -> halluguard::Error {
    halluguard::Error::InvalidParam {
        field: field.into(),
        reason: reason.into(),
    }
}

pub fn load_model(path: &PathBuf) -> Result<TinyLM> {
    let f = std::fs::File::open(path).map_err(halluguard::Error::from).with_context(|| format!("opening {}", path.display()))?;
    Ok(read_checkpoint(std::io::BufReader::new(f)).with_context(|| format!("reading {}", path.display()))?)
}
