//! The step map `h_{t-1} -> h_t` between consecutive mid-layer states and
//! its exact Jacobian-vector products.
//!
//! With the sampled tokens held fixed, the previous mid-layer state `h` (at
//! position `q - 1`) runs through the upper blocks and the output head to give
//! a next-token distribution `p(h)`. The input at position `q` is the actual
//! token embedding shifted by `wte^T (p(h) - p(h0))`, which then runs through
//! the lower blocks to give the new mid-layer state. Attention keys and values
//! of earlier positions are frozen at their values in the real run, so at
//! `h = h0` the map reproduces the real next state exactly.

use super::autodiff::{Dual, Scalar, Var};
use super::model::TinyLM;
use crate::error::{Error, Result};
use crate::spectral::JacobianOracle;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4;

/// One block's weights with matrices transposed to `out x in` rows.
struct BlockWeights {
    ln1_g: Vec<f64>,
    ln1_b: Vec<f64>,
    w_qkv_t: Vec<f64>,
    b_qkv: Vec<f64>,
    w_o_t: Vec<f64>,
    b_o: Vec<f64>,
    ln2_g: Vec<f64>,
    ln2_b: Vec<f64>,
    w_fc_t: Vec<f64>,
    b_fc: Vec<f64>,
    w_proj_t: Vec<f64>,
    b_proj: Vec<f64>,
}

fn transpose(w: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = w[r * cols + c];
        }
    }
    out
}

/// Frozen keys and values of earlier positions for one block (`n x d` each).
struct Past {
    k: Vec<f64>,
    v: Vec<f64>,
    n: usize,
}

struct Context {
    upper: Vec<Past>,
    lower: Vec<Past>,
    /// `wte[tok_q] + wpe[q] - wte^T p0`.
    base: Vec<f64>,
    h0: Vec<f64>,
    h1: Vec<f64>,
}

/// Step-map Jacobians along one token sequence.
pub struct StepMaps {
    d: usize,
    n_heads: usize,
    vocab: usize,
    blocks: Vec<BlockWeights>,
    mid: usize,
    lnf_g: Vec<f64>,
    lnf_b: Vec<f64>,
    wte: Vec<f64>,
    wte_t: Vec<f64>,
    first_q: usize,
    contexts: Vec<Context>,
}

impl StepMaps {
    /// Maps for `q = first_q .. seq.len() - 1`: step `t` goes from the
    /// mid-layer state at `first_q + t - 1` to the one at `first_q + t`.
    pub fn new(model: &TinyLM, seq: &[u32], first_q: usize) -> Result<Self> {
        let cfg = &model.config;
        let (d, v) = (cfg.d_model, cfg.vocab_size);
        if first_q == 0 || first_q >= seq.len() {
            return Err(Error::OutOfRange {
                index: first_q,
                lo: 1,
                hi: seq.len(),
            });
        }
        let lay = &model.layout;
        let p = &model.params;
        let blocks = lay
            .layers
            .iter()
            .map(|lo| BlockWeights {
                ln1_g: p[lo.ln1_g..][..d].to_vec(),
                ln1_b: p[lo.ln1_b..][..d].to_vec(),
                w_qkv_t: transpose(&p[lo.w_qkv..][..3 * d * d], d, 3 * d),
                b_qkv: p[lo.b_qkv..][..3 * d].to_vec(),
                w_o_t: transpose(&p[lo.w_o..][..d * d], d, d),
                b_o: p[lo.b_o..][..d].to_vec(),
                ln2_g: p[lo.ln2_g..][..d].to_vec(),
                ln2_b: p[lo.ln2_b..][..d].to_vec(),
                w_fc_t: transpose(&p[lo.w_fc..][..4 * d * d], d, 4 * d),
                b_fc: p[lo.b_fc..][..4 * d].to_vec(),
                w_proj_t: transpose(&p[lo.w_proj..][..4 * d * d], 4 * d, d),
                b_proj: p[lo.b_proj..][..d].to_vec(),
            })
            .collect();
        let wte = p[lay.wte..][..v * d].to_vec();
        let wte_t = transpose(&wte, v, d);
        let acts = model.run(seq)?;
        let mid = cfg.mid_layer();
        let past = |l: usize, n: usize| {
            let qkv = &acts.layers[l].qkv;
            let mut k = Vec::with_capacity(n * d);
            let mut vv = Vec::with_capacity(n * d);
            for j in 0..n {
                k.extend_from_slice(&qkv[j * 3 * d + d..][..d]);
                vv.extend_from_slice(&qkv[j * 3 * d + 2 * d..][..d]);
            }
            Past { k, v: vv, n }
        };
        let state = |pos: usize| acts.layers[mid - 1].out[pos * d..][..d].to_vec();
        let mut contexts = Vec::new();
        for q in first_q..seq.len() {
            let logits = &acts.logits[(q - 1) * v..][..v];
            let lse = super::model::logsumexp(logits);
            let p0: Vec<f64> = logits.iter().map(|x| (x - lse).exp()).collect();
            let e = model.embedding(seq[q]);
            let pe = model.position(q);
            let base = (0..d)
                .map(|i| e[i] + pe[i] - (0..v).map(|tok| p0[tok] * wte[tok * d + i]).sum::<f64>())
                .collect();
            contexts.push(Context {
                upper: (mid..cfg.n_layers).map(|l| past(l, q - 1)).collect(),
                lower: (0..mid).map(|l| past(l, q)).collect(),
                base,
                h0: state(q - 1),
                h1: state(q),
            });
        }
        Ok(Self {
            d,
            n_heads: cfg.n_heads,
            vocab: v,
            blocks,
            mid,
            lnf_g: p[lay.lnf_g..][..d].to_vec(),
            lnf_b: p[lay.lnf_b..][..d].to_vec(),
            wte,
            wte_t,
            first_q,
            contexts,
        })
    }

    pub fn steps(&self) -> usize {
        self.contexts.len()
    }

    /// Position of the state step `t` maps into.
    pub fn target_position(&self, t: usize) -> usize {
        self.first_q + t
    }

    /// The real states `(h_{t-1}, h_t)` around step `t`.
    pub fn states(&self, t: usize) -> Result<(&[f64], &[f64])> {
        let c = self.ctx(t)?;
        Ok((&c.h0, &c.h1))
    }

    fn ctx(&self, t: usize) -> Result<&Context> {
        self.contexts.get(t).ok_or(Error::OutOfRange {
            index: t,
            lo: 0,
            hi: self.contexts.len(),
        })
    }

    /// Evaluates step `t` at an arbitrary input state.
    pub fn eval(&self, t: usize, h: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(h.len())?;
        Ok(self.apply(self.ctx(t)?, h))
    }

    fn check_dim(&self, n: usize) -> Result<()> {
        if n != self.d {
            return Err(Error::DimensionMismatch(format!("state of length {n}, model width {}", self.d)));
        }
        Ok(())
    }

    /// Dense Jacobian of step `t` by central differences, row-major `d x d`.
    pub fn jacobian_fd(&self, t: usize, step: f64) -> Result<Vec<f64>> {
        let c = self.ctx(t)?;
        let d = self.d;
        let mut jac = vec![0.0; d * d];
        let mut h = c.h0.clone();
        for j in 0..d {
            let x = h[j];
            h[j] = x + step;
            let plus = self.apply(c, &h);
            h[j] = x - step;
            let minus = self.apply(c, &h);
            h[j] = x;
            for i in 0..d {
                jac[i * d + j] = (plus[i] - minus[i]) / (2.0 * step);
            }
        }
        Ok(jac)
    }

    fn apply<S: Scalar>(&self, c: &Context, h: &[S]) -> Vec<S> {
        let mut x = h.to_vec();
        for (i, past) in c.upper.iter().enumerate() {
            x = self.block(&self.blocks[self.mid + i], &x, past);
        }
        let xf = layer_norm(&x, &self.lnf_g, &self.lnf_b);
        let d = self.d;
        let logits: Vec<S> = (0..self.vocab)
            .map(|tok| S::lin_comb(&self.wte[tok * d..][..d], &xf, 0.0))
            .collect();
        let probs = softmax(&logits);
        let mut x: Vec<S> = (0..d)
            .map(|i| S::lin_comb(&self.wte_t[i * self.vocab..][..self.vocab], &probs, c.base[i]))
            .collect();
        for (l, past) in c.lower.iter().enumerate() {
            x = self.block(&self.blocks[l], &x, past);
        }
        x
    }

    /// One block at a single new position attending to frozen `past` plus itself.
    fn block<S: Scalar>(&self, w: &BlockWeights, x: &[S], past: &Past) -> Vec<S> {
        let d = self.d;
        let hs = d / self.n_heads;
        let scale = 1.0 / (hs as f64).sqrt();
        let a = layer_norm(x, &w.ln1_g, &w.ln1_b);
        let qkv = linear(&a, &w.w_qkv_t, &w.b_qkv, d);
        let (q, rest) = qkv.split_at(d);
        let (k_self, v_self) = rest.split_at(d);
        let mut y = Vec::with_capacity(d);
        for h in 0..self.n_heads {
            let qh = &q[h * hs..][..hs];
            let mut scores: Vec<S> = (0..past.n)
                .map(|j| {
                    let kj: Vec<f64> = past.k[j * d + h * hs..][..hs].iter().map(|k| k * scale).collect();
                    S::lin_comb(&kj, qh, 0.0)
                })
                .collect();
            let prods: Vec<S> = (0..hs).map(|i| qh[i] * k_self[h * hs + i]).collect();
            scores.push(S::lin_comb(&vec![scale; hs], &prods, 0.0));
            let att = softmax(&scores);
            for i in 0..hs {
                let vp: Vec<f64> = (0..past.n).map(|j| past.v[j * d + h * hs + i]).collect();
                y.push(S::lin_comb(&vp, &att[..past.n], 0.0) + att[past.n] * v_self[h * hs + i]);
            }
        }
        let o = linear(&y, &w.w_o_t, &w.b_o, d);
        let x1: Vec<S> = x.iter().zip(&o).map(|(&a, &b)| a + b).collect();
        let a2 = layer_norm(&x1, &w.ln2_g, &w.ln2_b);
        let fc = linear(&a2, &w.w_fc_t, &w.b_fc, d);
        let act: Vec<S> = fc.into_iter().map(gelu).collect();
        let proj = linear(&act, &w.w_proj_t, &w.b_proj, 4 * d);
        x1.iter().zip(&proj).map(|(&a, &b)| a + b).collect()
    }
}

/// `w_t` holds one `in_dim` row per output.
fn linear<S: Scalar>(x: &[S], w_t: &[f64], b: &[f64], in_dim: usize) -> Vec<S> {
    b.iter()
        .enumerate()
        .map(|(o, &bias)| S::lin_comb(&w_t[o * in_dim..][..in_dim], x, bias))
        .collect()
}

fn layer_norm<S: Scalar>(x: &[S], g: &[f64], b: &[f64]) -> Vec<S> {
    let n = x.len();
    let inv = vec![1.0 / n as f64; n];
    let mean = S::lin_comb(&inv, x, 0.0);
    let centered: Vec<S> = x.iter().map(|&v| v - mean).collect();
    let sq: Vec<S> = centered.iter().map(|&c| c * c).collect();
    let var = S::lin_comb(&inv, &sq, LN_EPS);
    let rstd = S::cst(1.0) / var.sqrt();
    centered
        .iter()
        .enumerate()
        .map(|(j, &c)| S::lin_comb(&[g[j]], &[c * rstd], b[j]))
        .collect()
}

fn softmax<S: Scalar>(x: &[S]) -> Vec<S> {
    let m = x.iter().map(|v| v.val()).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<S> = x.iter().map(|&v| (v - S::cst(m)).exp()).collect();
    let z = S::lin_comb(&vec![1.0; e.len()], &e, 0.0);
    e.into_iter().map(|v| v / z).collect()
}

fn gelu<S: Scalar>(x: S) -> S {
    let x3 = x * x * x;
    let t = S::lin_comb(&[GELU_C, GELU_C * 0.044715], &[x, x3], 0.0).tanh();
    x * S::lin_comb(&[0.5], &[t], 0.5)
}

impl JacobianOracle for StepMaps {
    fn in_dim(&self) -> usize {
        self.d
    }

    fn jvp(&self, t: usize, v: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(v.len())?;
        let c = self.ctx(t)?;
        let h: Vec<Dual> = c.h0.iter().zip(v).map(|(&x, &dx)| Dual::new(x, dx)).collect();
        Ok(self.apply(c, &h).into_iter().map(|y| y.d).collect())
    }

    fn vjp(&self, t: usize, u: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(u.len())?;
        let c = self.ctx(t)?;
        let leaves = Var::leaves(&c.h0);
        let out = self.apply(c, &leaves);
        Ok(Var::backward(&out, u, &leaves))
    }
}
