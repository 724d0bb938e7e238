//! AdamW training on delimiter-masked next-token loss.

use rand::Rng;

use super::model::{TinyLM, TinyLMConfig};
use super::vocab::{delimiter_pos, EOS};
use crate::error::{invalid, Error, Result};
use crate::seed::rng_for;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub warmup: usize,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            lr: 3e-3,
            batch_size: 32,
            weight_decay: 0.01,
            warmup: 100,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.lr * (step + 1) as f64 / self.warmup as f64;
        }
        let span = (self.steps - self.warmup).max(1) as f64;
        let frac = (step - self.warmup) as f64 / span;
        let min = 0.1 * self.lr;
        min + 0.5 * (self.lr - min) * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: TinyLM,
    /// Training loss per step.
    pub losses: Vec<f64>,
}

/// Next-token targets and loss weights for one sequence padded to `t`.
///
/// Only positions whose target follows the first `=` or `|` count; sequences
/// without a delimiter are trained on every position.
pub fn targets_and_mask(seq: &[u32], t: usize) -> (Vec<u32>, Vec<u32>, Vec<f64>) {
    let start = delimiter_pos(seq).map_or(1, |p| p + 1);
    let mut tokens = vec![EOS; t];
    let mut targets = vec![EOS; t];
    let mut mask = vec![0.0; t];
    for i in 0..t {
        if i < seq.len() {
            tokens[i] = seq[i];
        }
        if i + 1 < seq.len() {
            targets[i] = seq[i + 1];
            if i + 1 >= start {
                mask[i] = 1.0;
            }
        }
    }
    (tokens, targets, mask)
}

struct Batch {
    tokens: Vec<u32>,
    targets: Vec<u32>,
    mask: Vec<f64>,
    b: usize,
    t: usize,
}

fn make_batch(corpus: &[Vec<u32>], idx: &[usize]) -> Batch {
    let t = idx.iter().map(|&i| corpus[i].len()).max().unwrap_or(1).saturating_sub(1).max(1);
    let mut out = Batch {
        tokens: Vec::with_capacity(idx.len() * t),
        targets: Vec::with_capacity(idx.len() * t),
        mask: Vec::with_capacity(idx.len() * t),
        b: idx.len(),
        t,
    };
    for &i in idx {
        let (tk, tg, m) = targets_and_mask(&corpus[i], t);
        out.tokens.extend(tk);
        out.targets.extend(tg);
        out.mask.extend(m);
    }
    out
}

fn decays(name: &str) -> bool {
    let kind = name.rsplit('.').next().unwrap_or(name);
    kind.starts_with('w')
}

pub fn train_tiny_lm(corpus: &[Vec<u32>], config: TinyLMConfig, train: &TrainConfig) -> Result<TrainOutcome> {
    if corpus.is_empty() {
        return Err(Error::Insufficient {
            what: "training sequences",
            needed: 1,
            got: 0,
        });
    }
    if config.context_len < 2 {
        return Err(invalid("context_len", "must be at least 2"));
    }
    if train.steps == 0 || train.batch_size == 0 || !(train.lr > 0.0) {
        return Err(invalid("train", "steps, batch_size and lr must be positive"));
    }
    for s in corpus {
        if s.len() < 2 {
            return Err(invalid("corpus", "every sequence needs at least two tokens"));
        }
        if s.len() - 1 > config.context_len {
            return Err(Error::ContextOverflow {
                len: s.len() - 1,
                context: config.context_len,
            });
        }
    }
    let mut model = TinyLM::init(config)?;
    let n = model.n_params();
    let decay_mask: Vec<bool> = {
        let mut m = vec![false; n];
        for (name, off, len) in &model.layout.tensors {
            if decays(name) {
                m[*off..off + len].fill(true);
            }
        }
        m
    };
    let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let mut m1 = vec![0.0; n];
    let mut m2 = vec![0.0; n];
    let mut losses = Vec::with_capacity(train.steps);
    for step in 0..train.steps {
        let mut rng = rng_for(train.seed, "batch", step as u64);
        let idx: Vec<usize> = (0..train.batch_size).map(|_| rng.random_range(0..corpus.len())).collect();
        let batch = make_batch(corpus, &idx);
        let (loss, mut g) = model.loss_and_grad(&batch.tokens, &batch.targets, &batch.mask, batch.b, batch.t)?;
        if !loss.is_finite() || g.iter().any(|x| !x.is_finite()) {
            return Err(Error::Divergence(step));
        }
        losses.push(loss);
        let gn = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        if train.grad_clip > 0.0 && gn > train.grad_clip {
            let s = train.grad_clip / gn;
            g.iter_mut().for_each(|x| *x *= s);
        }
        let lr = train.lr_at(step);
        let c1 = 1.0 - b1.powi(step as i32 + 1);
        let c2 = 1.0 - b2.powi(step as i32 + 1);
        for i in 0..n {
            m1[i] = b1 * m1[i] + (1.0 - b1) * g[i];
            m2[i] = b2 * m2[i] + (1.0 - b2) * g[i] * g[i];
            let update = (m1[i] / c1) / ((m2[i] / c2).sqrt() + eps);
            let wd = if decay_mask[i] { train.weight_decay * model.params[i] } else { 0.0 };
            model.params[i] -= lr * (update + wd);
        }
    }
    model.round_to_f32();
    Ok(TrainOutcome { model, losses })
}

/// Argmax next-token accuracy over the masked (post-delimiter) positions.
pub fn masked_accuracy(model: &TinyLM, corpus: &[Vec<u32>]) -> Result<f64> {
    let v = model.config.vocab_size;
    let (mut hit, mut total) = (0usize, 0usize);
    for seq in corpus {
        let t = seq.len() - 1;
        let (tokens, targets, mask) = targets_and_mask(seq, t);
        let acts = model.run(&tokens)?;
        for i in 0..t {
            if mask[i] == 0.0 {
                continue;
            }
            let row = &acts.logits[i * v..][..v];
            let arg = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(k, _)| k as u32)
                .unwrap_or(0);
            hit += usize::from(arg == targets[i]);
            total += 1;
        }
    }
    if total == 0 {
        return Err(invalid("corpus", "no scored positions"));
    }
    Ok(hit as f64 / total as f64)
}
