//! Scalar types for differentiating the step map: plain `f64`, forward-mode
//! [`Dual`], and a reverse-mode [`Var`] recorded on a thread-local tape.

use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};

pub trait Scalar:
    Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Div<Output = Self> + Neg<Output = Self>
{
    fn cst(x: f64) -> Self;
    fn val(self) -> f64;
    fn exp(self) -> Self;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;
    /// `bias + sum_i w_i x_i`.
    fn lin_comb(w: &[f64], xs: &[Self], bias: f64) -> Self;
}

impl Scalar for f64 {
    fn cst(x: f64) -> Self {
        x
    }
    fn val(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn lin_comb(w: &[f64], xs: &[Self], bias: f64) -> Self {
        bias + w.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>()
    }
}

/// Value and one directional derivative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual {
    pub v: f64,
    pub d: f64,
}

impl Dual {
    pub fn new(v: f64, d: f64) -> Self {
        Self { v, d }
    }
}

impl Add for Dual {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.v + o.v, self.d + o.d)
    }
}

impl Sub for Dual {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.v - o.v, self.d - o.d)
    }
}

impl Mul for Dual {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        Self::new(self.v * o.v, self.d * o.v + self.v * o.d)
    }
}

impl Div for Dual {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        Self::new(self.v / o.v, (self.d * o.v - self.v * o.d) / (o.v * o.v))
    }
}

impl Neg for Dual {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.v, -self.d)
    }
}

impl Scalar for Dual {
    fn cst(x: f64) -> Self {
        Self::new(x, 0.0)
    }
    fn val(self) -> f64 {
        self.v
    }
    fn exp(self) -> Self {
        let e = self.v.exp();
        Self::new(e, e * self.d)
    }
    fn tanh(self) -> Self {
        let t = self.v.tanh();
        Self::new(t, (1.0 - t * t) * self.d)
    }
    fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        Self::new(s, 0.5 * self.d / s)
    }
    fn lin_comb(w: &[f64], xs: &[Self], bias: f64) -> Self {
        let mut v = bias;
        let mut d = 0.0;
        for (a, x) in w.iter().zip(xs) {
            v += a * x.v;
            d += a * x.d;
        }
        Self::new(v, d)
    }
}

#[derive(Default)]
struct Tape {
    /// `(start, len)` into `parents` for each node.
    spans: Vec<(u32, u32)>,
    parents: Vec<(u32, f64)>,
}

thread_local! {
    static TAPE: RefCell<Tape> = RefCell::new(Tape::default());
}

/// Reverse-mode scalar. Constants never touch the tape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Var {
    Const(f64),
    Node { id: u32, v: f64 },
}

fn record(v: f64, parents: impl IntoIterator<Item = (u32, f64)>) -> Var {
    TAPE.with(|t| {
        let mut t = t.borrow_mut();
        let start = t.parents.len() as u32;
        t.parents.extend(parents);
        let len = t.parents.len() as u32 - start;
        let id = t.spans.len() as u32;
        t.spans.push((start, len));
        Var::Node { id, v }
    })
}

impl Var {
    /// Clears the tape and returns fresh leaves for `values`.
    pub fn leaves(values: &[f64]) -> Vec<Var> {
        TAPE.with(|t| {
            let mut t = t.borrow_mut();
            t.spans.clear();
            t.parents.clear();
        });
        values.iter().map(|&v| record(v, [])).collect()
    }

    /// Gradient of `sum_i seeds_i outputs_i` with respect to `leaves`.
    pub fn backward(outputs: &[Var], seeds: &[f64], leaves: &[Var]) -> Vec<f64> {
        TAPE.with(|t| {
            let t = t.borrow();
            let mut adj = vec![0.0; t.spans.len()];
            for (o, s) in outputs.iter().zip(seeds) {
                if let Var::Node { id, .. } = o {
                    adj[*id as usize] += s;
                }
            }
            for i in (0..t.spans.len()).rev() {
                let a = adj[i];
                if a == 0.0 {
                    continue;
                }
                let (start, len) = t.spans[i];
                for &(p, w) in &t.parents[start as usize..(start + len) as usize] {
                    adj[p as usize] += a * w;
                }
            }
            leaves
                .iter()
                .map(|l| match l {
                    Var::Node { id, .. } => adj[*id as usize],
                    Var::Const(_) => 0.0,
                })
                .collect()
        })
    }

    fn unary(self, v: f64, dv: f64) -> Var {
        match self {
            Var::Const(_) => Var::Const(v),
            Var::Node { id, .. } => record(v, [(id, dv)]),
        }
    }

    fn binary(a: Var, b: Var, v: f64, da: f64, db: f64) -> Var {
        match (a, b) {
            (Var::Const(_), Var::Const(_)) => Var::Const(v),
            (Var::Node { id, .. }, Var::Const(_)) => record(v, [(id, da)]),
            (Var::Const(_), Var::Node { id, .. }) => record(v, [(id, db)]),
            (Var::Node { id: i, .. }, Var::Node { id: j, .. }) => record(v, [(i, da), (j, db)]),
        }
    }
}

impl Add for Var {
    type Output = Var;
    fn add(self, o: Var) -> Var {
        Var::binary(self, o, self.val() + o.val(), 1.0, 1.0)
    }
}

impl Sub for Var {
    type Output = Var;
    fn sub(self, o: Var) -> Var {
        Var::binary(self, o, self.val() - o.val(), 1.0, -1.0)
    }
}

impl Mul for Var {
    type Output = Var;
    fn mul(self, o: Var) -> Var {
        let (a, b) = (self.val(), o.val());
        Var::binary(self, o, a * b, b, a)
    }
}

impl Div for Var {
    type Output = Var;
    fn div(self, o: Var) -> Var {
        let (a, b) = (self.val(), o.val());
        Var::binary(self, o, a / b, 1.0 / b, -a / (b * b))
    }
}

impl Neg for Var {
    type Output = Var;
    fn neg(self) -> Var {
        self.unary(-self.val(), -1.0)
    }
}

impl Scalar for Var {
    fn cst(x: f64) -> Self {
        Var::Const(x)
    }
    fn val(self) -> f64 {
        match self {
            Var::Const(v) | Var::Node { v, .. } => v,
        }
    }
    fn exp(self) -> Self {
        let e = self.val().exp();
        self.unary(e, e)
    }
    fn tanh(self) -> Self {
        let t = self.val().tanh();
        self.unary(t, 1.0 - t * t)
    }
    fn sqrt(self) -> Self {
        let s = self.val().sqrt();
        self.unary(s, 0.5 / s)
    }
    fn lin_comb(w: &[f64], xs: &[Self], bias: f64) -> Self {
        let mut v = bias;
        let mut parents = Vec::new();
        for (&a, x) in w.iter().zip(xs) {
            v += a * x.val();
            if let Var::Node { id, .. } = x {
                if a != 0.0 {
                    parents.push((*id, a));
                }
            }
        }
        if parents.is_empty() {
            Var::Const(v)
        } else {
            record(v, parents)
        }
    }
}
