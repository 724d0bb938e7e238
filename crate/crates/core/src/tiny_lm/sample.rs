//! Sampling K generations into trajectory bundles, optional corruption of the
//! rollouts, and labeled dataset construction.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::model::{log_softmax, logsumexp, Acts, TinyLM};
use super::step_map::StepMaps;
use super::vocab::{decode, encode, Prompt, EOS};
use crate::bundle::{Generation, TrajectoryBundle};
use crate::error::{invalid, Error, Result};
use crate::eval::{best_rouge, label_by_rouge};
use crate::seed::{derive_seed, rng_for};
use crate::spectral::{aggregate_max, amplification_exact, AmplificationEstimate, PowerIteration};

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeConfig {
    pub temperature: f64,
    pub top_p: f64,
    pub top_k: usize,
    /// Generations per prompt.
    pub k: usize,
    pub max_steps: usize,
    pub seed: u64,
    /// Argmax decoding; every generation is then identical.
    pub greedy: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            temperature: 0.5,
            top_p: 0.95,
            top_k: 10,
            k: 10,
            max_steps: 8,
            seed: 0,
            greedy: false,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(invalid("temperature", "must be positive"));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(invalid("top_p", "must lie in (0, 1]"));
        }
        if self.top_k == 0 {
            return Err(invalid("top_k", "must be at least 1"));
        }
        if self.k < 2 {
            return Err(invalid("k", "must be at least 2"));
        }
        if self.max_steps == 0 {
            return Err(invalid("max_steps", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Corruption {
    None,
    /// Temperature multiplied by this factor.
    HighTemp(f64),
    /// Each step, the final position's mid-layer state `h` gets
    /// `rho |h| g / sqrt(d)` added, with `g` standard normal.
    StateNoise(f64),
}

impl fmt::Display for Corruption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Corruption::None => write!(f, "none"),
            Corruption::HighTemp(x) => write!(f, "high-temp:{x}"),
            Corruption::StateNoise(r) => write!(f, "state-noise:{r}"),
        }
    }
}

impl std::str::FromStr for Corruption {
    type Err = Error;

    /// `none`, `high-temp:<factor>` or `state-noise:<rho>`.
    fn from_str(s: &str) -> Result<Self> {
        let num = |v: &str| {
            v.parse::<f64>()
                .ok()
                .filter(|x| x.is_finite() && *x >= 0.0)
                .ok_or_else(|| invalid("corruption", format!("bad level `{v}`")))
        };
        match s.split_once(':') {
            None if s == "none" => Ok(Corruption::None),
            Some(("high-temp", v)) => Ok(Corruption::HighTemp(num(v)?)),
            Some(("state-noise", v)) => Ok(Corruption::StateNoise(num(v)?)),
            _ => Err(invalid("corruption", format!("unknown mode `{s}`"))),
        }
    }
}

/// Top-k then nucleus truncation of `softmax(logits / temperature)`,
/// renormalized. Sorted by probability, ties by token id.
pub fn truncated_distribution(logits: &[f64], temperature: f64, top_k: usize, top_p: f64) -> Vec<(u32, f64)> {
    let scaled: Vec<f64> = logits.iter().map(|x| x / temperature).collect();
    let lp = log_softmax(&scaled);
    let mut ranked: Vec<(u32, f64)> = lp.iter().enumerate().map(|(i, l)| (i as u32, l.exp())).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(top_k.max(1));
    let mut cum = 0.0;
    let mut keep = 0;
    for (_, p) in &ranked {
        cum += p;
        keep += 1;
        if cum >= top_p {
            break;
        }
    }
    ranked.truncate(keep);
    let z: f64 = ranked.iter().map(|(_, p)| p).sum();
    ranked.into_iter().map(|(t, p)| (t, p / z)).collect()
}

fn entropy(logits: &[f64]) -> f64 {
    log_softmax(logits).iter().map(|l| -l.exp() * l).sum()
}

fn argmax(xs: &[f64]) -> u32 {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best as u32
}

fn row(buf: &[f64], i: usize, w: usize) -> &[f64] {
    &buf[i * w..][..w]
}

fn mid_states(model: &TinyLM, acts: &Acts) -> Vec<f64> {
    acts.layers[model.config.mid_layer() - 1].out.clone()
}

fn to_f32(xs: &[f64]) -> Vec<f32> {
    xs.iter().map(|&x| x as f32).collect()
}

fn text_of(tokens: &[u32]) -> String {
    let body: Vec<u32> = tokens.iter().copied().filter(|&t| t != EOS).collect();
    decode(&body)
}

/// A generation scored by the model at unit temperature: `seq[prompt_len..]`
/// are the generated tokens, states are taken where each token was predicted.
pub fn record_generation(model: &TinyLM, prompt_len: usize, seq: &[u32]) -> Result<Generation> {
    if prompt_len == 0 || prompt_len >= seq.len() {
        return Err(invalid("prompt_len", "needs a non-empty prompt and at least one generated token"));
    }
    let acts = model.run(seq)?;
    let (d, v) = (model.config.d_model, model.config.vocab_size);
    let states = mid_states(model, &acts);
    let mut g = Generation::default();
    let mut step_states = Vec::new();
    for j in prompt_len..seq.len() {
        let logits = row(&acts.logits, j - 1, v);
        g.tokens.push(seq[j]);
        g.logprob.push(log_softmax(logits)[seq[j] as usize] as f32);
        g.step_entropy.push(entropy(logits) as f32);
        g.step_lse.push(logsumexp(logits) as f32);
        step_states.extend(to_f32(row(&states, j - 1, d)));
    }
    g.text = text_of(&g.tokens);
    g.sent_embed = to_f32(row(&states, seq.len() - 1, d));
    g.step_states = Some(step_states);
    Ok(g)
}

fn rollout(model: &TinyLM, prompt: &[u32], dc: &DecodeConfig, corruption: Corruption, g: u64) -> Result<Generation> {
    let cfg = &model.config;
    let (d, v) = (cfg.d_model, cfg.vocab_size);
    let mid = cfg.mid_layer();
    let mut rng = rng_for(dc.seed, "rollout", g);
    let mut noise_rng = rng_for(dc.seed, "state_noise", g);
    let temperature = match corruption {
        Corruption::HighTemp(f) => dc.temperature * f,
        _ => dc.temperature,
    };
    let mut seq = prompt.to_vec();
    let mut gen = Generation::default();
    let mut step_states = Vec::new();
    for _ in 0..dc.max_steps {
        let last = seq.len() - 1;
        let acts = match corruption {
            Corruption::StateNoise(rho) if rho > 0.0 => {
                let noise: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut noise_rng)).collect();
                let mut hook = |l: usize, resid: &mut [f64]| {
                    if l + 1 == mid {
                        let h = &mut resid[last * d..][..d];
                        let scale = rho * crate::linalg::norm(h) / (d as f64).sqrt();
                        for (x, n) in h.iter_mut().zip(&noise) {
                            *x += scale * n;
                        }
                    }
                };
                model.forward(&seq, 1, seq.len(), Some(&mut hook))?
            }
            _ => model.run(&seq)?,
        };
        let logits = row(&acts.logits, last, v);
        let (tok, lp) = if dc.greedy {
            (argmax(logits), 0.0)
        } else {
            let dist = truncated_distribution(logits, temperature, dc.top_k, dc.top_p);
            let u: f64 = rng.random();
            let mut cum = 0.0;
            let mut pick = dist[dist.len() - 1];
            for &(t, p) in &dist {
                cum += p;
                if u < cum {
                    pick = (t, p);
                    break;
                }
            }
            (pick.0, pick.1.ln())
        };
        step_states.extend(to_f32(row(&acts.layers[mid - 1].out, last, d)));
        gen.tokens.push(tok);
        gen.logprob.push(lp.min(0.0) as f32);
        gen.step_entropy.push(entropy(logits) as f32);
        gen.step_lse.push(logsumexp(logits) as f32);
        seq.push(tok);
        if tok == EOS || seq.len() == cfg.context_len {
            break;
        }
    }
    let acts = model.run(&seq)?;
    gen.sent_embed = to_f32(row(&acts.layers[mid - 1].out, seq.len() - 1, d));
    gen.step_states = Some(step_states);
    gen.text = text_of(&gen.tokens);
    Ok(gen)
}

/// `K` seeded generations for one prompt. Generation `g` draws from its own
/// stream, so bundles are bit-reproducible for a fixed seed.
pub fn sample_k(model: &TinyLM, prompt: &Prompt, dc: &DecodeConfig, corruption: Corruption) -> Result<TrajectoryBundle> {
    dc.validate()?;
    if prompt.tokens.is_empty() {
        return Err(invalid("prompt", "empty"));
    }
    if prompt.tokens.len() >= model.config.context_len {
        return Err(Error::ContextOverflow {
            len: prompt.tokens.len() + 1,
            context: model.config.context_len,
        });
    }
    let generations = (0..dc.k as u64)
        .map(|g| rollout(model, &prompt.tokens, dc, corruption, g))
        .collect::<Result<Vec<_>>>()?;
    let mut meta = BTreeMap::new();
    meta.insert("source".into(), "tiny_lm".into());
    meta.insert("corruption".into(), corruption.to_string());
    meta.insert("seed".into(), dc.seed.to_string());
    meta.insert("mid_layer".into(), model.config.mid_layer().to_string());
    meta.insert(
        "decode".into(),
        format!(
            "temperature={} top_p={} top_k={} greedy={}",
            dc.temperature, dc.top_p, dc.top_k, dc.greedy
        ),
    );
    Ok(TrajectoryBundle {
        prompt_id: prompt.id.clone(),
        prompt_text: prompt.text.clone(),
        references: prompt.references.clone(),
        generations,
        label: None,
        rouge_to_ref: None,
        embed_dim: model.config.d_model,
        meta,
    })
}

/// Samples every prompt (prompt `i` uses seed `derive(seed, "prompt", i)`)
/// and labels each bundle by ROUGE-L of its first generation.
pub fn make_labeled_dataset(
    model: &TinyLM,
    prompts: &[Prompt],
    dc: &DecodeConfig,
    corruption: Corruption,
    tau_r: f64,
) -> Result<Vec<TrajectoryBundle>> {
    prompts
        .iter()
        .enumerate()
        .map(|(i, p)| {
            if p.references.is_empty() {
                return Err(invalid("references", format!("missing for {}", p.id)));
            }
            let local = DecodeConfig {
                seed: derive_seed(dc.seed, "prompt", i as u64),
                ..dc.clone()
            };
            let mut b = sample_k(model, p, &local, corruption)?;
            let primary = &b.generations[0].text;
            b.label = Some(label_by_rouge(primary, &p.references, tau_r)?);
            b.rouge_to_ref = Some(best_rouge(primary, &p.references) as f32);
            Ok(b)
        })
        .collect()
}

/// Exact per-step amplification of a bundle sampled from `model`: power
/// iteration on each generation's step-map Jacobians, maximized over
/// generations. Generations with a single step contribute nothing.
pub fn exact_amplification(model: &TinyLM, bundle: &TrajectoryBundle, cfg: &PowerIteration) -> Result<AmplificationEstimate> {
    let prompt = encode(&bundle.prompt_text)?;
    let mut per_gen = Vec::new();
    for g in &bundle.generations {
        if g.tokens.len() < 2 {
            continue;
        }
        let mut seq = prompt.clone();
        seq.extend_from_slice(&g.tokens[..g.tokens.len() - 1]);
        let maps = StepMaps::new(model, &seq, prompt.len())?;
        per_gen.push(amplification_exact(&maps, maps.steps(), cfg)?);
    }
    aggregate_max(&per_gen).ok_or(Error::Insufficient {
        what: "generations with two or more steps",
        needed: 1,
        got: 0,
    })
}
