//! A pre-LayerNorm GPT-style decoder in `f64` with tied input/output
//! embeddings, plus its hand-written backward pass.
//!
//! Parameters live in one flat vector in a fixed order: `wte`, `wpe`, then per
//! block `ln1_g ln1_b w_qkv b_qkv w_o b_o ln2_g ln2_b w_fc b_fc w_proj b_proj`,
//! then `lnf_g lnf_b`. Weight matrices are stored `in x out`, row-major.

use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Error, Result};
use crate::seed::rng_for;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TinyLMConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_len: usize,
    pub seed: u64,
}

impl Default for TinyLMConfig {
    fn default() -> Self {
        Self {
            vocab_size: super::vocab::VOCAB_SIZE,
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            context_len: 16,
            seed: 0,
        }
    }
}

impl TinyLMConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("context_len", self.context_len),
        ] {
            if v == 0 {
                return Err(invalid(name, "must be positive"));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(invalid("n_heads", "must divide d_model"));
        }
        Ok(())
    }

    /// Number of blocks applied before the mid-layer state, `ceil(L / 2)`.
    pub fn mid_layer(&self) -> usize {
        self.n_layers.div_ceil(2)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerOffsets {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub w_qkv: usize,
    pub b_qkv: usize,
    pub w_o: usize,
    pub b_o: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w_fc: usize,
    pub b_fc: usize,
    pub w_proj: usize,
    pub b_proj: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub wte: usize,
    pub wpe: usize,
    pub layers: Vec<LayerOffsets>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub total: usize,
    /// `(name, offset, len)` for every tensor in declared order.
    pub tensors: Vec<(String, usize, usize)>,
}

impl Layout {
    pub fn new(cfg: &TinyLMConfig) -> Self {
        let (v, d, c) = (cfg.vocab_size, cfg.d_model, cfg.context_len);
        let mut tensors = Vec::new();
        let mut at = 0;
        let mut take = |name: String, len: usize| {
            let off = at;
            tensors.push((name, off, len));
            at += len;
            off
        };
        let wte = take("wte".into(), v * d);
        let wpe = take("wpe".into(), c * d);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let mut t = |n: &str, len| take(format!("h{l}.{n}"), len);
            layers.push(LayerOffsets {
                ln1_g: t("ln1_g", d),
                ln1_b: t("ln1_b", d),
                w_qkv: t("w_qkv", d * 3 * d),
                b_qkv: t("b_qkv", 3 * d),
                w_o: t("w_o", d * d),
                b_o: t("b_o", d),
                ln2_g: t("ln2_g", d),
                ln2_b: t("ln2_b", d),
                w_fc: t("w_fc", d * 4 * d),
                b_fc: t("b_fc", 4 * d),
                w_proj: t("w_proj", 4 * d * d),
                b_proj: t("b_proj", d),
            });
        }
        let lnf_g = take("lnf_g".into(), d);
        let lnf_b = take("lnf_b".into(), d);
        Self {
            wte,
            wpe,
            layers,
            lnf_g,
            lnf_b,
            total: at,
            tensors,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinyLM {
    pub config: TinyLMConfig,
    pub params: Vec<f64>,
    pub layout: Layout,
}

/// Activations of one block.
#[derive(Debug, Clone, Default)]
pub struct LayerActs {
    pub ln1: Vec<f64>,
    pub ln1_mean: Vec<f64>,
    pub ln1_rstd: Vec<f64>,
    /// `B T x 3d`: queries, keys, values.
    pub qkv: Vec<f64>,
    /// `B H T T` attention weights.
    pub att: Vec<f64>,
    pub atty: Vec<f64>,
    pub attproj: Vec<f64>,
    pub resid_mid: Vec<f64>,
    pub ln2: Vec<f64>,
    pub ln2_mean: Vec<f64>,
    pub ln2_rstd: Vec<f64>,
    pub fch: Vec<f64>,
    pub fch_gelu: Vec<f64>,
    pub fcproj: Vec<f64>,
    /// Residual stream after the block (after any hook).
    pub out: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Acts {
    pub b: usize,
    pub t: usize,
    pub encoded: Vec<f64>,
    pub layers: Vec<LayerActs>,
    pub lnf: Vec<f64>,
    pub lnf_mean: Vec<f64>,
    pub lnf_rstd: Vec<f64>,
    pub logits: Vec<f64>,
}

/// Called after each block with the block index and the `B T x d` residual.
pub type BlockHook<'a> = &'a mut dyn FnMut(usize, &mut [f64]);

impl TinyLM {
    pub fn init(config: TinyLMConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![0.0; layout.total];
        let mut rng = rng_for(config.seed, "init", 0);
        let std = Normal::new(0.0, 0.02).expect("valid std");
        let proj_std = Normal::new(0.0, 0.02 / (2.0 * config.n_layers as f64).sqrt()).expect("valid std");
        for (name, off, len) in &layout.tensors {
            let slot = &mut params[*off..off + len];
            let kind = name.rsplit('.').next().unwrap_or(name);
            match kind {
                "ln1_g" | "ln2_g" | "lnf_g" => slot.fill(1.0),
                "wte" | "wpe" | "w_qkv" | "w_fc" => slot.iter_mut().for_each(|x| *x = std.sample(&mut rng)),
                "w_o" | "w_proj" => slot.iter_mut().for_each(|x| *x = proj_std.sample(&mut rng)),
                _ => {}
            }
        }
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    pub fn from_params(config: TinyLMConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(Error::DimensionMismatch(format!(
                "{} parameters for a layout of {}",
                params.len(),
                layout.total
            )));
        }
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    pub fn n_params(&self) -> usize {
        self.layout.total
    }

    pub fn slice(&self, off: usize, len: usize) -> &[f64] {
        &self.params[off..off + len]
    }

    /// Rounds every weight to the nearest `f32`, matching what a checkpoint stores.
    pub fn round_to_f32(&mut self) {
        for p in &mut self.params {
            *p = f64::from(*p as f32);
        }
    }

    pub fn embedding(&self, token: u32) -> &[f64] {
        let d = self.config.d_model;
        self.slice(self.layout.wte + token as usize * d, d)
    }

    pub fn position(&self, pos: usize) -> &[f64] {
        let d = self.config.d_model;
        self.slice(self.layout.wpe + pos * d, d)
    }

    fn check_tokens(&self, tokens: &[u32], t: usize) -> Result<()> {
        if t == 0 || t > self.config.context_len {
            return Err(Error::ContextOverflow {
                len: t,
                context: self.config.context_len,
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&x| x as usize >= self.config.vocab_size) {
            return Err(Error::OutOfRange {
                index: bad as usize,
                lo: 0,
                hi: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Forward pass over `b` sequences of length `t` (row-major `tokens`).
    pub fn forward(&self, tokens: &[u32], b: usize, t: usize, mut hook: Option<BlockHook>) -> Result<Acts> {
        if tokens.len() != b * t {
            return Err(Error::DimensionMismatch(format!("{} tokens for {b}x{t}", tokens.len())));
        }
        self.check_tokens(tokens, t)?;
        let cfg = &self.config;
        let (d, v, nh) = (cfg.d_model, cfg.vocab_size, cfg.n_heads);
        let n = b * t;
        let mut encoded = vec![0.0; n * d];
        for bi in 0..b {
            for ti in 0..t {
                let row = &mut encoded[(bi * t + ti) * d..][..d];
                let e = self.embedding(tokens[bi * t + ti]);
                let p = self.position(ti);
                for j in 0..d {
                    row[j] = e[j] + p[j];
                }
            }
        }
        let mut layers: Vec<LayerActs> = Vec::with_capacity(cfg.n_layers);
        for (l, lo) in self.layout.layers.iter().enumerate() {
            let input = if l == 0 { &encoded } else { &layers[l - 1].out };
            let mut a = LayerActs {
                ln1: vec![0.0; n * d],
                ln1_mean: vec![0.0; n],
                ln1_rstd: vec![0.0; n],
                qkv: vec![0.0; n * 3 * d],
                att: vec![0.0; b * nh * t * t],
                atty: vec![0.0; n * d],
                attproj: vec![0.0; n * d],
                resid_mid: vec![0.0; n * d],
                ln2: vec![0.0; n * d],
                ln2_mean: vec![0.0; n],
                ln2_rstd: vec![0.0; n],
                fch: vec![0.0; n * 4 * d],
                fch_gelu: vec![0.0; n * 4 * d],
                fcproj: vec![0.0; n * d],
                out: vec![0.0; n * d],
            };
            let p = &self.params;
            layernorm_forward(&mut a.ln1, &mut a.ln1_mean, &mut a.ln1_rstd, input, &p[lo.ln1_g..][..d], &p[lo.ln1_b..][..d], n, d);
            matmul_forward(&mut a.qkv, &a.ln1, &p[lo.w_qkv..][..d * 3 * d], &p[lo.b_qkv..][..3 * d], n, d, 3 * d);
            attention_forward(&mut a.atty, &mut a.att, &a.qkv, b, t, d, nh);
            matmul_forward(&mut a.attproj, &a.atty, &p[lo.w_o..][..d * d], &p[lo.b_o..][..d], n, d, d);
            for i in 0..n * d {
                a.resid_mid[i] = input[i] + a.attproj[i];
            }
            layernorm_forward(&mut a.ln2, &mut a.ln2_mean, &mut a.ln2_rstd, &a.resid_mid, &p[lo.ln2_g..][..d], &p[lo.ln2_b..][..d], n, d);
            matmul_forward(&mut a.fch, &a.ln2, &p[lo.w_fc..][..d * 4 * d], &p[lo.b_fc..][..4 * d], n, d, 4 * d);
            for i in 0..a.fch.len() {
                a.fch_gelu[i] = gelu(a.fch[i]);
            }
            matmul_forward(&mut a.fcproj, &a.fch_gelu, &p[lo.w_proj..][..4 * d * d], &p[lo.b_proj..][..d], n, 4 * d, d);
            for i in 0..n * d {
                a.out[i] = a.resid_mid[i] + a.fcproj[i];
            }
            if let Some(h) = hook.as_mut() {
                h(l, &mut a.out);
            }
            layers.push(a);
        }
        let last = layers.last().map_or(&encoded, |a| &a.out);
        let mut lnf = vec![0.0; n * d];
        let mut lnf_mean = vec![0.0; n];
        let mut lnf_rstd = vec![0.0; n];
        let p = &self.params;
        layernorm_forward(&mut lnf, &mut lnf_mean, &mut lnf_rstd, last, &p[self.layout.lnf_g..][..d], &p[self.layout.lnf_b..][..d], n, d);
        let wte = &p[self.layout.wte..][..v * d];
        let mut logits = vec![0.0; n * v];
        for i in 0..n {
            let x = &lnf[i * d..][..d];
            for (tok, out) in logits[i * v..][..v].iter_mut().enumerate() {
                *out = dot(x, &wte[tok * d..][..d]);
            }
        }
        Ok(Acts {
            b,
            t,
            encoded,
            layers,
            lnf,
            lnf_mean,
            lnf_rstd,
            logits,
        })
    }

    /// Single-sequence forward.
    pub fn run(&self, tokens: &[u32]) -> Result<Acts> {
        self.forward(tokens, 1, tokens.len(), None)
    }

    /// Mean masked next-token cross-entropy and its parameter gradient.
    ///
    /// `targets[i]` is the token following position `i`; `mask[i]` weights it.
    pub fn loss_and_grad(
        &self,
        tokens: &[u32],
        targets: &[u32],
        mask: &[f64],
        b: usize,
        t: usize,
    ) -> Result<(f64, Vec<f64>)> {
        let acts = self.forward(tokens, b, t, None)?;
        let (loss, dlogits) = masked_cross_entropy(&acts.logits, targets, mask, self.config.vocab_size)?;
        Ok((loss, self.backward(&acts, tokens, &dlogits)))
    }

    /// Loss only.
    pub fn loss(&self, tokens: &[u32], targets: &[u32], mask: &[f64], b: usize, t: usize) -> Result<f64> {
        let acts = self.forward(tokens, b, t, None)?;
        masked_cross_entropy(&acts.logits, targets, mask, self.config.vocab_size).map(|(l, _)| l)
    }

    /// Backpropagates `dlogits` through the network.
    pub fn backward(&self, acts: &Acts, tokens: &[u32], dlogits: &[f64]) -> Vec<f64> {
        let cfg = &self.config;
        let (d, v, nh) = (cfg.d_model, cfg.vocab_size, cfg.n_heads);
        let (b, t) = (acts.b, acts.t);
        let n = b * t;
        let lay = &self.layout;
        let p = &self.params;
        let mut g = vec![0.0; lay.total];

        // tied unembedding
        let mut dlnf = vec![0.0; n * d];
        {
            let wte = &p[lay.wte..][..v * d];
            let (_, rest) = g.split_at_mut(lay.wte);
            let dwte = &mut rest[..v * d];
            for i in 0..n {
                let x = &acts.lnf[i * d..][..d];
                let dx = &mut dlnf[i * d..][..d];
                for tok in 0..v {
                    let dl = dlogits[i * v + tok];
                    if dl == 0.0 {
                        continue;
                    }
                    let w = &wte[tok * d..][..d];
                    let dw = &mut dwte[tok * d..][..d];
                    for j in 0..d {
                        dx[j] += dl * w[j];
                        dw[j] += dl * x[j];
                    }
                }
            }
        }
        let last = acts.layers.last().map_or(&acts.encoded, |a| &a.out);
        let mut dresid = vec![0.0; n * d];
        {
            let (dg, db) = two_slices(&mut g, lay.lnf_g, lay.lnf_b, d);
            layernorm_backward(&mut dresid, dg, db, &dlnf, last, &p[lay.lnf_g..][..d], &acts.lnf_mean, &acts.lnf_rstd, n, d);
        }

        for l in (0..cfg.n_layers).rev() {
            let lo = &lay.layers[l];
            let a = &acts.layers[l];
            let input = if l == 0 { &acts.encoded } else { &acts.layers[l - 1].out };
            // dresid is d(out); out = resid_mid + fcproj
            let mut dfch_gelu = vec![0.0; n * 4 * d];
            {
                let (dw, dbias) = two_slices_sized(&mut g, lo.w_proj, 4 * d * d, lo.b_proj, d);
                matmul_backward(&mut dfch_gelu, dw, dbias, &dresid, &a.fch_gelu, &p[lo.w_proj..][..4 * d * d], n, 4 * d, d);
            }
            let mut dfch = vec![0.0; n * 4 * d];
            for i in 0..dfch.len() {
                dfch[i] = dfch_gelu[i] * gelu_grad(a.fch[i]);
            }
            let mut dln2 = vec![0.0; n * d];
            {
                let (dw, dbias) = two_slices_sized(&mut g, lo.w_fc, d * 4 * d, lo.b_fc, 4 * d);
                matmul_backward(&mut dln2, dw, dbias, &dfch, &a.ln2, &p[lo.w_fc..][..d * 4 * d], n, d, 4 * d);
            }
            let mut dresid_mid = dresid.clone();
            {
                let (dg, db) = two_slices(&mut g, lo.ln2_g, lo.ln2_b, d);
                layernorm_backward(&mut dresid_mid, dg, db, &dln2, &a.resid_mid, &p[lo.ln2_g..][..d], &a.ln2_mean, &a.ln2_rstd, n, d);
            }
            // resid_mid = input + attproj
            let mut datty = vec![0.0; n * d];
            {
                let (dw, dbias) = two_slices_sized(&mut g, lo.w_o, d * d, lo.b_o, d);
                matmul_backward(&mut datty, dw, dbias, &dresid_mid, &a.atty, &p[lo.w_o..][..d * d], n, d, d);
            }
            let mut dqkv = vec![0.0; n * 3 * d];
            attention_backward(&mut dqkv, &datty, &a.qkv, &a.att, b, t, d, nh);
            let mut dln1 = vec![0.0; n * d];
            {
                let (dw, dbias) = two_slices_sized(&mut g, lo.w_qkv, d * 3 * d, lo.b_qkv, 3 * d);
                matmul_backward(&mut dln1, dw, dbias, &dqkv, &a.ln1, &p[lo.w_qkv..][..d * 3 * d], n, d, 3 * d);
            }
            let mut dinput = dresid_mid;
            {
                let (dg, db) = two_slices(&mut g, lo.ln1_g, lo.ln1_b, d);
                layernorm_backward(&mut dinput, dg, db, &dln1, input, &p[lo.ln1_g..][..d], &a.ln1_mean, &a.ln1_rstd, n, d);
            }
            dresid = dinput;
        }

        for bi in 0..b {
            for ti in 0..t {
                let i = bi * t + ti;
                let tok = tokens[i] as usize;
                for j in 0..d {
                    g[lay.wte + tok * d + j] += dresid[i * d + j];
                    g[lay.wpe + ti * d + j] += dresid[i * d + j];
                }
            }
        }
        g
    }
}

fn two_slices(g: &mut [f64], a: usize, b: usize, len: usize) -> (&mut [f64], &mut [f64]) {
    two_slices_sized(g, a, len, b, len)
}

/// Disjoint mutable views `g[a..a+la]` and `g[b..b+lb]` with `a + la <= b`.
fn two_slices_sized(g: &mut [f64], a: usize, la: usize, b: usize, lb: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a + la <= b);
    let (head, tail) = g.split_at_mut(b);
    (&mut head[a..a + la], &mut tail[..lb])
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[allow(clippy::too_many_arguments)]
fn layernorm_forward(out: &mut [f64], mean: &mut [f64], rstd: &mut [f64], inp: &[f64], g: &[f64], b: &[f64], n: usize, c: usize) {
    for i in 0..n {
        let x = &inp[i * c..][..c];
        let m = x.iter().sum::<f64>() / c as f64;
        let var = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / c as f64;
        let s = 1.0 / (var + LN_EPS).sqrt();
        let o = &mut out[i * c..][..c];
        for j in 0..c {
            o[j] = (x[j] - m) * s * g[j] + b[j];
        }
        mean[i] = m;
        rstd[i] = s;
    }
}

#[allow(clippy::too_many_arguments)]
fn layernorm_backward(
    dinp: &mut [f64],
    dg: &mut [f64],
    db: &mut [f64],
    dout: &[f64],
    inp: &[f64],
    g: &[f64],
    mean: &[f64],
    rstd: &[f64],
    n: usize,
    c: usize,
) {
    for i in 0..n {
        let x = &inp[i * c..][..c];
        let dy = &dout[i * c..][..c];
        let (m, s) = (mean[i], rstd[i]);
        let mut mean_dnorm = 0.0;
        let mut mean_dnorm_norm = 0.0;
        for j in 0..c {
            let norm = (x[j] - m) * s;
            let dnorm = g[j] * dy[j];
            mean_dnorm += dnorm;
            mean_dnorm_norm += dnorm * norm;
        }
        mean_dnorm /= c as f64;
        mean_dnorm_norm /= c as f64;
        let dx = &mut dinp[i * c..][..c];
        for j in 0..c {
            let norm = (x[j] - m) * s;
            let dnorm = g[j] * dy[j];
            dg[j] += dy[j] * norm;
            db[j] += dy[j];
            dx[j] += s * (dnorm - mean_dnorm - norm * mean_dnorm_norm);
        }
    }
}

/// `out[n x oc] = inp[n x c] w[c x oc] + bias`.
pub(crate) fn matmul_forward(out: &mut [f64], inp: &[f64], w: &[f64], bias: &[f64], n: usize, c: usize, oc: usize) {
    for i in 0..n {
        let o = &mut out[i * oc..][..oc];
        o.copy_from_slice(bias);
        let x = &inp[i * c..][..c];
        for (k, &xk) in x.iter().enumerate() {
            let wr = &w[k * oc..][..oc];
            for j in 0..oc {
                o[j] += xk * wr[j];
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn matmul_backward(
    dinp: &mut [f64],
    dw: &mut [f64],
    dbias: &mut [f64],
    dout: &[f64],
    inp: &[f64],
    w: &[f64],
    n: usize,
    c: usize,
    oc: usize,
) {
    for i in 0..n {
        let dy = &dout[i * oc..][..oc];
        let x = &inp[i * c..][..c];
        let dx = &mut dinp[i * c..][..c];
        for k in 0..c {
            let wr = &w[k * oc..][..oc];
            dx[k] += dot(dy, wr);
            let dwr = &mut dw[k * oc..][..oc];
            let xk = x[k];
            for j in 0..oc {
                dwr[j] += xk * dy[j];
            }
        }
        for j in 0..oc {
            dbias[j] += dy[j];
        }
    }
}

fn attention_forward(out: &mut [f64], att: &mut [f64], qkv: &[f64], b: usize, t: usize, c: usize, nh: usize) {
    let hs = c / nh;
    let scale = 1.0 / (hs as f64).sqrt();
    let c3 = 3 * c;
    for bi in 0..b {
        for ti in 0..t {
            for h in 0..nh {
                let q = &qkv[(bi * t + ti) * c3 + h * hs..][..hs];
                let arow = &mut att[((bi * nh + h) * t + ti) * t..][..t];
                let mut maxv = f64::NEG_INFINITY;
                for t2 in 0..=ti {
                    let k = &qkv[(bi * t + t2) * c3 + c + h * hs..][..hs];
                    let s = dot(q, k) * scale;
                    arow[t2] = s;
                    maxv = maxv.max(s);
                }
                let mut sum = 0.0;
                for a in arow.iter_mut().take(ti + 1) {
                    *a = (*a - maxv).exp();
                    sum += *a;
                }
                for (t2, a) in arow.iter_mut().enumerate() {
                    *a = if t2 <= ti { *a / sum } else { 0.0 };
                }
                let o = &mut out[(bi * t + ti) * c + h * hs..][..hs];
                o.fill(0.0);
                for t2 in 0..=ti {
                    let vv = &qkv[(bi * t + t2) * c3 + 2 * c + h * hs..][..hs];
                    let w = arow[t2];
                    for j in 0..hs {
                        o[j] += w * vv[j];
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(dqkv: &mut [f64], dout: &[f64], qkv: &[f64], att: &[f64], b: usize, t: usize, c: usize, nh: usize) {
    let hs = c / nh;
    let scale = 1.0 / (hs as f64).sqrt();
    let c3 = 3 * c;
    let mut datt = vec![0.0; t];
    for bi in 0..b {
        for ti in 0..t {
            for h in 0..nh {
                let arow = &att[((bi * nh + h) * t + ti) * t..][..t];
                let dy = &dout[(bi * t + ti) * c + h * hs..][..hs];
                for t2 in 0..=ti {
                    let vo = (bi * t + t2) * c3 + 2 * c + h * hs;
                    datt[t2] = dot(dy, &qkv[vo..][..hs]);
                    for j in 0..hs {
                        dqkv[vo + j] += arow[t2] * dy[j];
                    }
                }
                let inner: f64 = (0..=ti).map(|t2| arow[t2] * datt[t2]).sum();
                let qo = (bi * t + ti) * c3 + h * hs;
                for t2 in 0..=ti {
                    let dpre = arow[t2] * (datt[t2] - inner) * scale;
                    if dpre == 0.0 {
                        continue;
                    }
                    let ko = (bi * t + t2) * c3 + c + h * hs;
                    for j in 0..hs {
                        dqkv[qo + j] += dpre * qkv[ko + j];
                        dqkv[ko + j] += dpre * qkv[qo + j];
                    }
                }
            }
        }
    }
}

/// Log-softmax of a logit row.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    logits.iter().map(|x| x - lse).collect()
}

pub fn logsumexp(logits: &[f64]) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + logits.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Weighted mean cross-entropy and `d loss / d logits`.
pub fn masked_cross_entropy(logits: &[f64], targets: &[u32], mask: &[f64], v: usize) -> Result<(f64, Vec<f64>)> {
    let n = targets.len();
    if logits.len() != n * v || mask.len() != n {
        return Err(Error::DimensionMismatch("logits, targets and mask disagree".into()));
    }
    let total: f64 = mask.iter().sum();
    if !(total > 0.0) {
        return Err(invalid("mask", "selects no positions"));
    }
    let mut loss = 0.0;
    let mut d = vec![0.0; n * v];
    for i in 0..n {
        if mask[i] == 0.0 {
            continue;
        }
        let lp = log_softmax(&logits[i * v..][..v]);
        let w = mask[i] / total;
        loss -= w * lp[targets[i] as usize];
        for (tok, &l) in lp.iter().enumerate() {
            d[i * v + tok] = w * (l.exp() - if tok == targets[i] as usize { 1.0 } else { 0.0 });
        }
    }
    Ok((loss, d))
}
