//! HalluGuard and the baselines that need nothing beyond a bundle.
//!
//! Each detector declares its orientation; the evaluation harness flips
//! signs so that "higher = hallucinated" everywhere downstream.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::bundle::TrajectoryBundle;
use crate::clipping::ClipThresholds;
use crate::error::{invalid, Error, Result};
use crate::linalg::{dot, norm};
use crate::spectral::{
    halluguard_components, halluguard_components_with, halluguard_score, AmpMode,
    AmplificationEstimate, CalibrationStats, Components, SpectralConfig,
};

pub const DEFAULT_LINK_THRESHOLD: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Detector {
    HalluGuard,
    Perplexity,
    LnEntropy,
    Energy,
    LexicalConsistency,
    SemanticEntropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Orientation {
    HigherIsHallucinated,
    LowerIsHallucinated,
}

impl Orientation {
    /// Sign that maps a raw score onto the "higher = hallucinated" axis.
    pub fn sign(self) -> f64 {
        match self {
            Orientation::HigherIsHallucinated => 1.0,
            Orientation::LowerIsHallucinated => -1.0,
        }
    }
}

impl Detector {
    pub const ALL: [Detector; 6] = [
        Detector::HalluGuard,
        Detector::Perplexity,
        Detector::LnEntropy,
        Detector::Energy,
        Detector::LexicalConsistency,
        Detector::SemanticEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Detector::HalluGuard => "halluguard",
            Detector::Perplexity => "perplexity",
            Detector::LnEntropy => "ln_entropy",
            Detector::Energy => "energy",
            Detector::LexicalConsistency => "lexical_consistency",
            Detector::SemanticEntropy => "semantic_entropy",
        }
    }

    pub fn orientation(self) -> Orientation {
        match self {
            Detector::HalluGuard | Detector::LexicalConsistency => {
                Orientation::LowerIsHallucinated
            }
            _ => Orientation::HigherIsHallucinated,
        }
    }
}

impl fmt::Display for Detector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Detector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Detector::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| invalid("detector", format!("unknown detector `{s}`")))
    }
}

/// Parses a comma-separated detector list; `all` selects every detector.
pub fn parse_detectors(s: &str) -> Result<Vec<Detector>> {
    if s.trim() == "all" {
        return Ok(Detector::ALL.to_vec());
    }
    let mut out: Vec<Detector> = s
        .split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(Detector::from_str)
        .collect::<Result<_>>()?;
    out.sort();
    out.dedup();
    if out.is_empty() {
        return Err(invalid("detectors", "empty detector list"));
    }
    Ok(out)
}

fn require_nonempty<T>(xs: &[T], what: &'static str) -> Result<()> {
    if xs.is_empty() {
        return Err(Error::Insufficient {
            what,
            needed: 1,
            got: 0,
        });
    }
    Ok(())
}

/// Sequence negative log-likelihood per token, `-(1/T) sum log p_t`.
pub fn perplexity(logprob: &[f32]) -> Result<f64> {
    require_nonempty(logprob, "tokens")?;
    Ok(-logprob.iter().map(|&x| f64::from(x)).sum::<f64>() / logprob.len() as f64)
}

/// Length-normalized NLL averaged over the K generations.
pub fn ln_entropy(bundle: &TrajectoryBundle) -> Result<f64> {
    if bundle.k() < 2 {
        return Err(Error::Insufficient {
            what: "generations",
            needed: 2,
            got: bundle.k(),
        });
    }
    let mut acc = 0.0;
    for g in &bundle.generations {
        acc += perplexity(&g.logprob)?;
    }
    Ok(acc / bundle.k() as f64)
}

/// Sequence-mean free energy at unit temperature, `-(1/T) sum lse_t`.
pub fn energy_score(step_lse: &[f32]) -> Result<f64> {
    require_nonempty(step_lse, "steps")?;
    Ok(-step_lse.iter().map(|&x| f64::from(x)).sum::<f64>() / step_lse.len() as f64)
}

fn lcs_len(a: &[&str], b: &[&str]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F-measure over whitespace tokens; 0 when either side is empty.
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    let c: Vec<&str> = candidate.split_whitespace().collect();
    let r: Vec<&str> = reference.split_whitespace().collect();
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(&c, &r) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / c.len() as f64;
    let rec = lcs / r.len() as f64;
    2.0 * p * rec / (p + rec)
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = norm(a);
    let nb = norm(b);
    if na <= 1e-12 || nb <= 1e-12 {
        return Err(Error::DegenerateEmbedding {
            row: usize::from(na > 1e-12),
        });
    }
    Ok(dot(a, b) / (na * nb))
}

/// Mean of `sim` over all `K (K - 1) / 2` unordered pairs.
pub fn mean_pairwise<T>(items: &[T], mut sim: impl FnMut(&T, &T) -> Result<f64>) -> Result<f64> {
    let k = items.len();
    if k < 2 {
        return Err(Error::Insufficient {
            what: "items",
            needed: 2,
            got: k,
        });
    }
    let mut acc = 0.0;
    for i in 0..k {
        for j in (i + 1)..k {
            acc += sim(&items[i], &items[j])?;
        }
    }
    Ok(acc / (k * (k - 1) / 2) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Similarity {
    RougeL,
    EmbedCosine,
}

impl FromStr for Similarity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rouge-l" | "rouge_l" | "rougel" => Ok(Similarity::RougeL),
            "embed-cosine" | "cosine" => Ok(Similarity::EmbedCosine),
            other => Err(invalid("consistency_sim", format!("unknown similarity `{other}`"))),
        }
    }
}

/// Cross-sample consistency: mean pairwise similarity of the K generations.
/// Low values mean diverging generations.
pub fn lexical_consistency(bundle: &TrajectoryBundle, sim: Similarity) -> Result<f64> {
    match sim {
        Similarity::RougeL => {
            let texts: Vec<&str> = bundle.generations.iter().map(|g| g.text.as_str()).collect();
            lexical_consistency_texts(&texts)
        }
        Similarity::EmbedCosine => {
            let embeds: Vec<Vec<f64>> = bundle
                .generations
                .iter()
                .map(|g| g.sent_embed.iter().map(|&x| f64::from(x)).collect())
                .collect();
            mean_pairwise(&embeds, |a, b| cosine(a, b))
        }
    }
}

pub fn lexical_consistency_texts(texts: &[&str]) -> Result<f64> {
    mean_pairwise(texts, |a, b| Ok(rouge_l(a, b)))
}

/// Entropy of single-linkage clusters, linking pairs with cosine >= threshold.
pub fn semantic_entropy_lite(embeddings: &[Vec<f64>], link_threshold: f64) -> Result<f64> {
    let k = embeddings.len();
    if k < 2 {
        return Err(Error::Insufficient {
            what: "embeddings",
            needed: 2,
            got: k,
        });
    }
    let unit: Vec<Vec<f64>> = embeddings
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let n = norm(e);
            if n <= 1e-12 || !n.is_finite() {
                Err(Error::DegenerateEmbedding { row: i })
            } else {
                Ok(e.iter().map(|x| x / n).collect())
            }
        })
        .collect::<Result<_>>()?;
    let mut parent: Vec<usize> = (0..k).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for i in 0..k {
        for j in (i + 1)..k {
            if dot(&unit[i], &unit[j]) >= link_threshold {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut sizes = BTreeMap::<usize, usize>::new();
    for i in 0..k {
        *sizes.entry(find(&mut parent, i)).or_default() += 1;
    }
    let kf = k as f64;
    let h: f64 = sizes
        .values()
        .map(|&n| {
            let p = n as f64 / kf;
            -p * p.ln()
        })
        .sum();
    // a single cluster gives -0.0
    Ok(h.max(0.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorConfig {
    pub spectral: SpectralConfig,
    pub amp_mode: AmpMode,
    pub consistency_sim: Similarity,
    pub link_threshold: f64,
    pub calibration: Option<CalibrationStats>,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            spectral: SpectralConfig::default(),
            amp_mode: AmpMode::StateDeltaProxy,
            consistency_sim: Similarity::RougeL,
            link_threshold: DEFAULT_LINK_THRESHOLD,
            calibration: None,
        }
    }
}

/// Optional inputs that live outside the bundle.
#[derive(Debug, Clone, Copy, Default)]
pub struct ScoreContext<'a> {
    /// Clipping thresholds from the caller-owned memory bank.
    pub clip: Option<&'a ClipThresholds>,
    /// Exact amplification from an attached model (required when
    /// `amp_mode` is exact).
    pub exact_amp: Option<&'a AmplificationEstimate>,
}

/// Per-bundle detector outputs. `None` marks an unavailable detector.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorScores {
    pub prompt_id: String,
    pub scores: BTreeMap<Detector, Option<f64>>,
    /// Raw HalluGuard components when that detector ran.
    pub components: Option<Components>,
}

impl DetectorScores {
    pub fn get(&self, d: Detector) -> Option<f64> {
        self.scores.get(&d).copied().flatten()
    }

    pub fn orientation(&self, d: Detector) -> Orientation {
        d.orientation()
    }
}

fn primary(bundle: &TrajectoryBundle) -> Result<&crate::bundle::Generation> {
    bundle.generations.first().ok_or(Error::Insufficient {
        what: "generations",
        needed: 1,
        got: 0,
    })
}

fn halluguard_raw(
    bundle: &TrajectoryBundle,
    cfg: &DetectorConfig,
    ctx: &ScoreContext<'_>,
) -> Result<Components> {
    match cfg.amp_mode {
        AmpMode::StateDeltaProxy => halluguard_components(bundle, &cfg.spectral, ctx.clip),
        AmpMode::ExactJacobian => {
            let amp = ctx.exact_amp.ok_or_else(|| {
                invalid("amp_mode", "exact amplification requires an attached model")
            })?;
            halluguard_components_with(bundle, &cfg.spectral, ctx.clip, amp)
        }
    }
}

/// Runs one detector. Perplexity and energy use the primary (first) generation.
pub fn score_one(
    bundle: &TrajectoryBundle,
    detector: Detector,
    cfg: &DetectorConfig,
    ctx: &ScoreContext<'_>,
) -> Result<f64> {
    let s = match detector {
        Detector::HalluGuard => {
            let c = halluguard_raw(bundle, cfg, ctx)?;
            halluguard_score(&c, cfg.calibration.as_ref())?
        }
        Detector::Perplexity => perplexity(&primary(bundle)?.logprob)?,
        Detector::LnEntropy => ln_entropy(bundle)?,
        Detector::Energy => energy_score(&primary(bundle)?.step_lse)?,
        Detector::LexicalConsistency => lexical_consistency(bundle, cfg.consistency_sim)?,
        Detector::SemanticEntropy => {
            let embeds: Vec<Vec<f64>> = bundle
                .generations
                .iter()
                .map(|g| g.sent_embed.iter().map(|&x| f64::from(x)).collect())
                .collect();
            semantic_entropy_lite(&embeds, cfg.link_threshold)?
        }
    };
    if !s.is_finite() {
        return Err(Error::NonFinite(format!("{detector} score")));
    }
    Ok(s)
}

/// Scores a bundle with every requested detector. A detector whose inputs
/// are missing is recorded as unavailable rather than failing the sample.
pub fn score_sample(
    bundle: &TrajectoryBundle,
    detectors: &[Detector],
    cfg: &DetectorConfig,
    ctx: &ScoreContext<'_>,
) -> DetectorScores {
    let mut scores = BTreeMap::new();
    let mut components = None;
    for &d in detectors {
        let value = if d == Detector::HalluGuard {
            halluguard_raw(bundle, cfg, ctx).ok().and_then(|c| {
                components = Some(c);
                halluguard_score(&c, cfg.calibration.as_ref()).ok()
            })
        } else {
            score_one(bundle, d, cfg, ctx).ok()
        };
        scores.insert(d, value.filter(|v| v.is_finite()));
    }
    DetectorScores {
        prompt_id: bundle.prompt_id.clone(),
        scores,
        components,
    }
}
