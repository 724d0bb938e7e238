//! Beam search with optional detector-guided reranking.
//!
//! Candidates are ranked by length-normalized log-probability. On rerank
//! steps the best `shortlist` candidates are rescored as
//! `(1 - w) * lp_norm + w * z`, where `z` is the detector's reliability score
//! z-normalized across the shortlist. A candidate's detector score comes from
//! a mini-bundle of its top next-token extensions.

use std::collections::BTreeMap;

use super::model::{log_softmax, TinyLM};
use super::sample::record_generation;
use super::vocab::{decode, EOS};
use crate::bundle::TrajectoryBundle;
use crate::detectors::{score_sample, Detector, DetectorConfig, ScoreContext};
use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct BeamConfig {
    pub beam: usize,
    pub max_steps: usize,
    /// Weight of the detector term; 0 is plain beam search.
    pub weight: f64,
    pub rerank_every: usize,
    /// Candidates rescored per rerank step; 0 means `2 * beam`.
    pub shortlist: usize,
    /// Next-token extensions per candidate mini-bundle.
    pub extensions: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            beam: 10,
            max_steps: 8,
            weight: 0.5,
            rerank_every: 1,
            shortlist: 0,
            extensions: 3,
        }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam == 0 {
            return Err(invalid("beam", "must be at least 1"));
        }
        if self.max_steps == 0 || self.rerank_every == 0 {
            return Err(invalid("max_steps", "max_steps and rerank_every must be positive"));
        }
        if !(0.0..=1.0).contains(&self.weight) {
            return Err(invalid("weight", "must lie in [0, 1]"));
        }
        if self.extensions < 2 {
            return Err(invalid("extensions", "a mini-bundle needs at least 2 generations"));
        }
        Ok(())
    }
}

/// Maps a mini-bundle to a reliability score (higher = more trustworthy).
pub type Scorer<'a> = &'a dyn Fn(&TrajectoryBundle) -> Result<f64>;

/// Reliability scorer from a detector: its oriented score, negated.
pub fn detector_scorer(detector: Detector, cfg: DetectorConfig) -> impl Fn(&TrajectoryBundle) -> Result<f64> {
    move |b: &TrajectoryBundle| {
        let s = score_sample(b, &[detector], &cfg, &ScoreContext::default());
        s.get(detector)
            .map(|raw| -detector.orientation().sign() * raw)
            .ok_or_else(|| invalid(detector.name(), "unavailable on this candidate"))
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Hyp {
    gen: Vec<u32>,
    sum_lp: f64,
    done: bool,
    /// Detector score, computed once per candidate.
    score: Option<Option<f64>>,
}

impl Hyp {
    fn lp_norm(&self) -> f64 {
        if self.gen.is_empty() {
            0.0
        } else {
            self.sum_lp / self.gen.len() as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamResult {
    /// Generated tokens, including a final end marker if one was produced.
    pub tokens: Vec<u32>,
    pub text: String,
    pub logprob: f64,
    /// Candidates whose detector score failed and fell back to log-probability.
    pub scorer_failures: usize,
}

fn by_lp(a: &Hyp, b: &Hyp) -> std::cmp::Ordering {
    b.lp_norm().total_cmp(&a.lp_norm()).then_with(|| a.gen.cmp(&b.gen))
}

/// Mini-bundle for a candidate: its top `m` next-token extensions.
fn mini_bundle(model: &TinyLM, prompt: &[u32], gen: &[u32], m: usize) -> Result<TrajectoryBundle> {
    let mut seq = prompt.to_vec();
    seq.extend_from_slice(gen);
    if seq.len() >= model.config.context_len {
        return Err(Error::ContextOverflow {
            len: seq.len() + 1,
            context: model.config.context_len,
        });
    }
    let acts = model.run(&seq)?;
    let v = model.config.vocab_size;
    let lp = log_softmax(&acts.logits[(seq.len() - 1) * v..][..v]);
    let mut order: Vec<usize> = (0..v).collect();
    order.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]).then(a.cmp(&b)));
    let generations = order[..m.min(v)]
        .iter()
        .map(|&tok| {
            let mut ext = seq.clone();
            ext.push(tok as u32);
            record_generation(model, prompt.len(), &ext)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrajectoryBundle {
        prompt_id: String::new(),
        prompt_text: decode(prompt),
        references: Vec::new(),
        generations,
        label: None,
        rouge_to_ref: None,
        embed_dim: model.config.d_model,
        meta: BTreeMap::new(),
    })
}

/// Beam search from `prompt`; `scorer` is ignored when `cfg.weight == 0`.
pub fn guided_beam_search(model: &TinyLM, prompt: &[u32], cfg: &BeamConfig, scorer: Option<Scorer>) -> Result<BeamResult> {
    cfg.validate()?;
    if prompt.is_empty() || prompt.len() >= model.config.context_len {
        return Err(Error::ContextOverflow {
            len: prompt.len() + 1,
            context: model.config.context_len,
        });
    }
    let v = model.config.vocab_size;
    let shortlist = if cfg.shortlist == 0 { 2 * cfg.beam } else { cfg.shortlist };
    let scorer = scorer.filter(|_| cfg.weight > 0.0);
    let mut failures = 0usize;
    let mut beams = vec![Hyp {
        gen: Vec::new(),
        sum_lp: 0.0,
        done: false,
        score: None,
    }];
    for step in 0..cfg.max_steps {
        if beams.iter().all(|h| h.done) {
            break;
        }
        let mut cands = Vec::new();
        for h in beams {
            if h.done {
                cands.push(h);
                continue;
            }
            let mut seq = prompt.to_vec();
            seq.extend_from_slice(&h.gen);
            let acts = model.run(&seq)?;
            let lp = log_softmax(&acts.logits[(seq.len() - 1) * v..][..v]);
            for (tok, l) in lp.iter().enumerate() {
                let mut gen = h.gen.clone();
                gen.push(tok as u32);
                let done = tok as u32 == EOS
                    || gen.len() == cfg.max_steps
                    || prompt.len() + gen.len() == model.config.context_len;
                cands.push(Hyp {
                    gen,
                    sum_lp: h.sum_lp + l,
                    done,
                    score: None,
                });
            }
        }
        cands.sort_by(by_lp);
        match scorer {
            Some(score) if (step + 1) % cfg.rerank_every == 0 => {
                cands.truncate(shortlist);
                for c in cands.iter_mut() {
                    if c.score.is_none() {
                        let s = mini_bundle(model, prompt, &c.gen, cfg.extensions).and_then(|b| score(&b));
                        c.score = Some(s.ok().filter(|x| x.is_finite()));
                    }
                }
                let ok: Vec<f64> = cands.iter().filter_map(|c| c.score.flatten()).collect();
                failures += cands.len() - ok.len();
                let n = ok.len() as f64;
                let mean = ok.iter().sum::<f64>() / n.max(1.0);
                let sd = (ok.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n.max(1.0)).sqrt();
                let rank = |c: &Hyp| match c.score.flatten() {
                    Some(s) => {
                        let z = if sd > 0.0 { (s - mean) / sd } else { 0.0 };
                        (1.0 - cfg.weight) * c.lp_norm() + cfg.weight * z
                    }
                    None => c.lp_norm(),
                };
                let mut keyed: Vec<(f64, Hyp)> = cands.into_iter().map(|c| (rank(&c), c)).collect();
                keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| by_lp(&a.1, &b.1)));
                cands = keyed.into_iter().map(|(_, c)| c).collect();
            }
            _ => {}
        }
        cands.truncate(cfg.beam);
        beams = cands;
    }
    let best = beams.into_iter().next().expect("beam is never empty");
    let text = decode(&best.gen.iter().copied().filter(|&t| t != EOS).collect::<Vec<_>>());
    Ok(BeamResult {
        tokens: best.gen,
        text,
        logprob: best.sum_lp,
        scorer_failures: failures,
    })
}

/// Argmax decoding for up to `max_steps` tokens.
pub fn greedy_decode(model: &TinyLM, prompt: &[u32], max_steps: usize) -> Result<Vec<u32>> {
    let v = model.config.vocab_size;
    let mut seq = prompt.to_vec();
    let mut out = Vec::new();
    for _ in 0..max_steps {
        if seq.len() >= model.config.context_len + 1 {
            break;
        }
        let acts = model.run(&seq)?;
        let row = &acts.logits[(seq.len() - 1) * v..][..v];
        let mut best = 0;
        for i in 1..v {
            if row[i] > row[best] {
                best = i;
            }
        }
        out.push(best as u32);
        seq.push(best as u32);
        if best as u32 == EOS || seq.len() == model.config.context_len {
            break;
        }
    }
    Ok(out)
}
