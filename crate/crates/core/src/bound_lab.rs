//! The hallucination risk bound and numerical checks of its supporting lemmas.
//!
//! The risk bound is the sum of a data term,
//! `(1 + k_pt ln(complexity) + k eps_mismatch / signal_k) inf_approx`,
//! and a reasoning term, `L exp(-K eps^2 / C) alpha (exp(beta T) - 1)`.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{invalid, Error, Result};
use crate::linalg::{column_projector, singular_values_desc, spectral_norm};
use crate::seed::rng_for;
use crate::spectral::Spectrum;

/// Every bound constant that cannot be computed from data.
///
/// `ridge`, `alpha_amp` and `decay_alpha` are three distinct quantities that
/// share one Greek letter in the theory.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundParams {
    pub inf_approx: f64,
    pub k_pt: f64,
    pub complexity_pl: f64,
    pub k: f64,
    pub eps_mismatch: f64,
    pub signal_k: f64,
    pub l_size: f64,
    pub k_rollouts: u32,
    pub eps: f64,
    pub c: f64,
    pub alpha_amp: f64,
    pub beta: f64,
    pub t: u32,
    pub ridge: f64,
    pub s: f64,
    pub r_s: f64,
    pub lambda_bar: f64,
    pub lambda_lower: f64,
    pub decay_alpha: f64,
    pub h_star: f64,
    pub rho: f64,
    pub l_phi: f64,
    pub c_v: f64,
    pub c_pi: f64,
    pub c_d: f64,
    pub c_d_lower: f64,
    pub sigma_delta: f64,
}

impl Default for BoundParams {
    /// Data term 1.25 and reasoning term 7 at `T = 3`.
    fn default() -> Self {
        Self {
            inf_approx: 0.5,
            k_pt: 1.0,
            complexity_pl: std::f64::consts::E,
            k: 2.0,
            eps_mismatch: 1.0,
            signal_k: 4.0,
            l_size: 2.0,
            k_rollouts: 1,
            eps: 1.0,
            c: 1.0 / std::f64::consts::LN_2,
            alpha_amp: 1.0,
            beta: std::f64::consts::LN_2,
            t: 3,
            ridge: 1e-3,
            s: 1.0,
            r_s: 1.0,
            lambda_bar: 1.0,
            lambda_lower: 1.0,
            decay_alpha: 2.0,
            h_star: 1.0,
            rho: 1.0,
            l_phi: 1.0,
            c_v: 1.0,
            c_pi: 2.0,
            c_d: 1.0,
            c_d_lower: 1.0,
            sigma_delta: 1.0,
        }
    }
}

/// Keys accepted in a params file, in file-name spelling.
pub const PARAM_KEYS: [&str; 27] = [
    "inf_approx", "k_pt", "complexity_PL", "k", "eps_mismatch", "signal_k", "L_size",
    "K_rollouts", "eps", "C", "alpha_amp", "beta", "T", "ridge", "s", "R_s", "lambda_bar",
    "lambda_lower", "decay_alpha", "H_star", "rho", "L_Phi", "c_v", "C_Pi", "C_d", "c_d",
    "sigma_delta",
];

impl BoundParams {
    fn slot(&mut self, key: &str) -> Option<&mut f64> {
        Some(match key {
            "inf_approx" => &mut self.inf_approx,
            "k_pt" => &mut self.k_pt,
            "complexity_PL" => &mut self.complexity_pl,
            "k" => &mut self.k,
            "eps_mismatch" => &mut self.eps_mismatch,
            "signal_k" => &mut self.signal_k,
            "L_size" => &mut self.l_size,
            "eps" => &mut self.eps,
            "C" => &mut self.c,
            "alpha_amp" => &mut self.alpha_amp,
            "beta" => &mut self.beta,
            "ridge" => &mut self.ridge,
            "s" => &mut self.s,
            "R_s" => &mut self.r_s,
            "lambda_bar" => &mut self.lambda_bar,
            "lambda_lower" => &mut self.lambda_lower,
            "decay_alpha" => &mut self.decay_alpha,
            "H_star" => &mut self.h_star,
            "rho" => &mut self.rho,
            "L_Phi" => &mut self.l_phi,
            "c_v" => &mut self.c_v,
            "C_Pi" => &mut self.c_pi,
            "C_d" => &mut self.c_d,
            "c_d" => &mut self.c_d_lower,
            "sigma_delta" => &mut self.sigma_delta,
            _ => return None,
        })
    }

    /// Applies `key=value` pairs over the defaults. Unknown keys are errors.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut p = Self::default();
        for (key, value) in pairs {
            match key {
                "K_rollouts" | "T" => {
                    let v: u32 = value
                        .parse()
                        .map_err(|_| invalid(key, format!("expected a non-negative integer, got `{value}`")))?;
                    if key == "T" {
                        p.t = v;
                    } else {
                        p.k_rollouts = v;
                    }
                }
                _ => {
                    let v: f64 = value
                        .parse()
                        .map_err(|_| invalid(key, format!("expected a number, got `{value}`")))?;
                    *p.slot(key).ok_or_else(|| invalid(key, "unknown parameter"))? = v;
                }
            }
        }
        p.validate()?;
        Ok(p)
    }

    /// Parses a flat `key=value` file; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let pairs = crate::config::parse_pairs(text)?;
        Self::from_pairs(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))
    }

    pub fn to_pairs(&self) -> BTreeMap<String, String> {
        let mut p = self.clone();
        let mut out = BTreeMap::new();
        for key in PARAM_KEYS {
            let v = match key {
                "K_rollouts" => p.k_rollouts.to_string(),
                "T" => p.t.to_string(),
                _ => p.slot(key).map(|x| x.to_string()).unwrap_or_default(),
            };
            out.insert(key.to_string(), v);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let checks: [(&'static str, f64, bool); 25] = [
            ("inf_approx", self.inf_approx, self.inf_approx >= 0.0),
            ("k_pt", self.k_pt, self.k_pt >= 0.0),
            ("complexity_PL", self.complexity_pl, self.complexity_pl > 1.0),
            ("k", self.k, self.k >= 0.0),
            ("eps_mismatch", self.eps_mismatch, self.eps_mismatch >= 0.0),
            ("signal_k", self.signal_k, self.signal_k > 0.0),
            ("L_size", self.l_size, self.l_size > 0.0),
            ("eps", self.eps, self.eps > 0.0),
            ("C", self.c, self.c > 0.0),
            ("alpha_amp", self.alpha_amp, self.alpha_amp > 0.0),
            ("beta", self.beta, self.beta >= 0.0),
            ("ridge", self.ridge, self.ridge > 0.0),
            ("s", self.s, self.s > 0.0),
            ("R_s", self.r_s, self.r_s > 0.0),
            ("lambda_lower", self.lambda_lower, self.lambda_lower > 0.0),
            ("lambda_bar", self.lambda_bar, self.lambda_bar >= self.lambda_lower),
            ("decay_alpha", self.decay_alpha, self.decay_alpha > 1.0),
            ("H_star", self.h_star, self.h_star > 0.0),
            ("rho", self.rho, self.rho > 0.0),
            ("L_Phi", self.l_phi, self.l_phi > 0.0),
            ("c_v", self.c_v, self.c_v > 0.0),
            ("C_Pi", self.c_pi, self.c_pi > 0.0),
            ("C_d", self.c_d, self.c_d > 0.0),
            ("c_d", self.c_d_lower, self.c_d_lower > 0.0),
            ("sigma_delta", self.sigma_delta, self.sigma_delta > 0.0),
        ];
        for (name, v, ok) in checks {
            if !v.is_finite() {
                return Err(invalid(name, "must be finite"));
            }
            if !ok {
                return Err(invalid(name, format!("out of range: {v}")));
            }
        }
        if self.k_rollouts < 1 {
            return Err(invalid("K_rollouts", "must be at least 1"));
        }
        Ok(())
    }

    pub fn with_t(&self, t: u32) -> Self {
        Self { t, ..self.clone() }
    }
}

pub fn data_term(p: &BoundParams) -> Result<f64> {
    p.validate()?;
    let mult = 1.0 + p.k_pt * p.complexity_pl.ln() + p.k * p.eps_mismatch / p.signal_k;
    Ok(mult * p.inf_approx)
}

pub fn reasoning_term(p: &BoundParams) -> Result<f64> {
    p.validate()?;
    let conc = (-f64::from(p.k_rollouts) * p.eps * p.eps / p.c).exp();
    Ok(p.l_size * conc * p.alpha_amp * (p.beta * f64::from(p.t)).exp_m1())
}

pub fn risk_bound(p: &BoundParams) -> Result<f64> {
    Ok(data_term(p)? + reasoning_term(p)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiskPoint {
    pub t: u32,
    pub data_term: f64,
    pub reasoning_term: f64,
    pub bound: f64,
    pub empirical: f64,
}

/// Noisy "measured" risk against the bound.
///
/// At each `T` the two terms are perturbed as `D (1 + g1) + R (1 + g2)` with
/// independent `g ~ N(0, noise_std^2)`, floored at zero and capped at the
/// bound so the bound stays an envelope by construction.
pub fn simulate_empirical_risk(
    p: &BoundParams,
    noise_std: f64,
    seed: u64,
    t_range: &[u32],
) -> Result<Vec<RiskPoint>> {
    if !(noise_std >= 0.0) || !noise_std.is_finite() {
        return Err(invalid("noise_std", "must be finite and non-negative"));
    }
    if t_range.is_empty() {
        return Err(Error::Insufficient {
            what: "T values",
            needed: 1,
            got: 0,
        });
    }
    let normal = Normal::new(0.0, noise_std).map_err(|e| invalid("noise_std", e.to_string()))?;
    let mut rng = rng_for(seed, "empirical_risk", 0);
    t_range
        .iter()
        .map(|&t| {
            let q = p.with_t(t);
            let d = data_term(&q)?;
            let r = reasoning_term(&q)?;
            let bound = d + r;
            let (g1, g2) = if noise_std == 0.0 {
                (0.0, 0.0)
            } else {
                (normal.sample(&mut rng), normal.sample(&mut rng))
            };
            let raw = d * (1.0 + g1) + r * (1.0 + g2);
            Ok(RiskPoint {
                t,
                data_term: d,
                reasoning_term: r,
                bound,
                empirical: raw.max(0.0).min(bound),
            })
        })
        .collect()
}

/// Smallest `T` in `t_range` whose reasoning term exceeds the data term.
pub fn decomposition_crossover(p: &BoundParams, t_range: &[u32]) -> Result<Option<u32>> {
    if t_range.windows(2).any(|w| w[0] > w[1]) {
        return Err(invalid("T_range", "must be sorted ascending"));
    }
    for &t in t_range {
        let q = p.with_t(t);
        if reasoning_term(&q)? > data_term(&q)? {
            return Ok(Some(t));
        }
    }
    Ok(None)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubmultReport {
    /// `||J_T ... J_1||_2`
    pub lhs: f64,
    /// `prod ||J_t||_2`
    pub rhs_product: f64,
    /// `(max_t ||J_t||_2)^T`
    pub rhs_sigma_max_t: f64,
    pub holds: bool,
    pub gap: f64,
}

const REL_TOL: f64 = 1e-9;

pub fn verify_submultiplicativity(jacobians: &[DMatrix<f64>]) -> Result<SubmultReport> {
    let first = jacobians.first().ok_or(Error::Insufficient {
        what: "Jacobians",
        needed: 1,
        got: 0,
    })?;
    let n = first.nrows();
    for (i, j) in jacobians.iter().enumerate() {
        if j.nrows() != n || j.ncols() != n {
            return Err(Error::DimensionMismatch(format!(
                "Jacobian {i} is {}x{}, expected {n}x{n}",
                j.nrows(),
                j.ncols()
            )));
        }
    }
    let mut prod = DMatrix::<f64>::identity(n, n);
    let mut rhs_product = 1.0;
    let mut sigma_max = 0.0f64;
    for j in jacobians {
        prod = j * prod;
        let s = spectral_norm(j);
        rhs_product *= s;
        sigma_max = sigma_max.max(s);
    }
    let lhs = spectral_norm(&prod);
    let rhs_sigma_max_t = sigma_max.powi(jacobians.len() as i32);
    let holds = lhs <= rhs_product * (1.0 + REL_TOL) + REL_TOL
        && rhs_product <= rhs_sigma_max_t * (1.0 + REL_TOL) + REL_TOL;
    Ok(SubmultReport {
        lhs,
        rhs_product,
        rhs_sigma_max_t,
        holds,
        gap: rhs_product - lhs,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetBoundReport {
    pub lambda_min: f64,
    /// `det K / lambda_bar^(K-1)`
    pub lower_bound: f64,
    pub holds: bool,
    pub gap: f64,
}

/// Checks `lambda_min >= det K / lambda_bar^(K-1)`.
pub fn verify_det_lower_bound(spectrum: &Spectrum, lambda_bar: f64) -> Result<DetBoundReport> {
    let l1 = spectrum.lambda_max();
    if !(lambda_bar >= l1 * (1.0 - REL_TOL)) {
        return Err(invalid(
            "lambda_bar",
            format!("must be at least the top eigenvalue {l1}, got {lambda_bar}"),
        ));
    }
    let k = spectrum.eigenvalues.len() as f64;
    let lower = (spectrum.log_det - (k - 1.0) * lambda_bar.ln()).exp();
    let lambda_min = spectrum.lambda_min();
    Ok(DetBoundReport {
        lambda_min,
        lower_bound: lower,
        holds: lambda_min >= lower - REL_TOL * lower.abs().max(1.0),
        gap: lambda_min - lower,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorReport {
    /// `||P~ u* - P u*||`
    pub deviation: f64,
    /// Condition number of `Phi^T Phi`.
    pub kappa: f64,
    pub lambda_min: f64,
    /// `C_Pi kappa ||dPhi||_2 / sqrt(lambda_min) ||u*||`
    pub bound_rhs: f64,
}

impl ProjectorReport {
    pub fn within_bound(&self) -> bool {
        self.deviation <= self.bound_rhs * (1.0 + REL_TOL) + 1e-15
    }
}

pub fn projector_deviation(
    phi: &DMatrix<f64>,
    dphi: &DMatrix<f64>,
    u_star: &[f64],
    c_pi: f64,
) -> Result<ProjectorReport> {
    let (d, r) = phi.shape();
    if dphi.shape() != (d, r) || u_star.len() != d {
        return Err(Error::DimensionMismatch(format!(
            "features {d}x{r}, perturbation {}x{}, target {}",
            dphi.nrows(),
            dphi.ncols(),
            u_star.len()
        )));
    }
    if r > d {
        return Err(invalid("features", "more columns than rows"));
    }
    let sv = singular_values_desc(phi);
    let smin = sv.last().copied().unwrap_or(0.0);
    if !(smin > 1e-12 * sv[0].max(1e-300)) {
        return Err(invalid("features", "not full column rank"));
    }
    let perturbed = phi + dphi;
    let psv = singular_values_desc(&perturbed);
    let pmin = psv.last().copied().unwrap_or(0.0);
    if !(pmin > 1e-12 * psv[0].max(1e-300)) {
        return Err(Error::DegeneratePerturbation(pmin));
    }
    let p = column_projector(phi).ok_or_else(|| invalid("features", "singular Gram matrix"))?;
    let pt = column_projector(&perturbed).ok_or(Error::DegeneratePerturbation(pmin))?;
    let u = DMatrix::from_column_slice(d, 1, u_star);
    let deviation = ((pt - p) * &u).norm();
    let lambda_max = sv[0] * sv[0];
    let lambda_min = smin * smin;
    let kappa = lambda_max / lambda_min;
    let bound_rhs = c_pi * kappa * spectral_norm(dphi) / lambda_min.sqrt() * u.norm();
    Ok(ProjectorReport {
        deviation,
        kappa,
        lambda_min,
        bound_rhs,
    })
}

fn random_orthogonal(n: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let g = DMatrix::<f64>::from_fn(n, n, |_, _| StandardNormal.sample(rng));
    let qr = g.qr();
    let mut q = qr.q();
    // sign fix for a uniform distribution over the group
    let rdiag = qr.r().diagonal();
    for j in 0..n {
        if rdiag[j] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

pub const SCALING_DIM: usize = 8;
pub const SCALING_RANK: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct KappaScaling {
    pub kappas: Vec<f64>,
    /// Max over trials of the squared projector deviation, per grid point.
    pub max_sq_deviation: Vec<f64>,
    /// Least-squares slope of `ln max_sq_deviation` against `ln kappa`.
    pub slope: f64,
}

/// Projector sensitivity as the feature conditioning worsens.
///
/// For each `kappa`, features `Phi = U diag(sqrt(kappa), 1, ..., 1) V^T` with
/// random orthonormal `U`, `V` (8x3) are perturbed by `delta_norm w v_min^T`,
/// where `v_min` is the right singular vector of the smallest singular value
/// and `w` a random unit direction outside the column space. The target `u*`
/// is a random unit vector.
pub fn kappa_scaling_experiment(
    kappa_grid: &[f64],
    delta_norm: f64,
    trials: usize,
    seed: u64,
) -> Result<KappaScaling> {
    if kappa_grid.len() < 3 {
        return Err(invalid("kappa_grid", "needs at least 3 points"));
    }
    if kappa_grid.iter().any(|&k| !(k >= 1.0) || !k.is_finite()) {
        return Err(invalid("kappa_grid", "values must be finite and at least 1"));
    }
    let lo = kappa_grid.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = kappa_grid.iter().copied().fold(0.0, f64::max);
    if hi < 10.0 * lo {
        return Err(invalid("kappa_grid", "must span at least one decade"));
    }
    if !(delta_norm > 0.0) || trials == 0 {
        return Err(invalid("delta_norm", "needs a positive norm and at least one trial"));
    }
    let (d, r) = (SCALING_DIM, SCALING_RANK);
    let mut max_sq = Vec::with_capacity(kappa_grid.len());
    for (gi, &kappa) in kappa_grid.iter().enumerate() {
        let mut rng = rng_for(seed, "kappa_scaling", gi as u64);
        let mut best = 0.0f64;
        for _ in 0..trials {
            let q = random_orthogonal(d, &mut rng);
            let v = random_orthogonal(r, &mut rng);
            let u = q.columns(0, r).into_owned();
            let mut s = DMatrix::<f64>::identity(r, r);
            s[(0, 0)] = kappa.sqrt();
            let phi = &u * s * v.transpose();
            let v_min = v.column(r - 1).into_owned();
            let coef: Vec<f64> = (0..d - r).map(|_| StandardNormal.sample(&mut rng)).collect();
            let mut w = q.columns(r, d - r) * nalgebra::DVector::from_vec(coef);
            w /= w.norm();
            let dphi = (w * v_min.transpose()) * delta_norm;
            let mut target: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let tn = crate::linalg::norm(&target);
            target.iter_mut().for_each(|x| *x /= tn);
            let rep = projector_deviation(&phi, &dphi, &target, 2.0)?;
            best = best.max(rep.deviation * rep.deviation);
        }
        max_sq.push(best);
    }
    let xs: Vec<f64> = kappa_grid.iter().map(|k| k.ln()).collect();
    let ys: Vec<f64> = max_sq.iter().map(|v| v.max(1e-300).ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    Ok(KappaScaling {
        kappas: kappa_grid.to_vec(),
        max_sq_deviation: max_sq,
        slope: sxy / sxx,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FreedmanConfig {
    /// Increments per rollout.
    pub horizon: usize,
    /// Increments are uniform on `[-b, b]`.
    pub increment_bound: f64,
    pub trials: usize,
    pub seed: u64,
}

impl Default for FreedmanConfig {
    fn default() -> Self {
        Self {
            horizon: 8,
            increment_bound: 1.0,
            trials: 10_000,
            seed: 0x5eed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FreedmanPoint {
    pub k: usize,
    /// Monte-Carlo `P(|mean deviation| > eps)`.
    pub exceedance: f64,
    /// `min(1, 2 exp(-K eps^2 / C))`.
    pub envelope: f64,
}

/// Concentration constant implied by bounded increments: `C = 2 b^2 / H`.
pub fn freedman_constant(cfg: &FreedmanConfig) -> f64 {
    2.0 * cfg.increment_bound * cfg.increment_bound / cfg.horizon as f64
}

/// Each rollout's deviation is the average of `horizon` bounded martingale
/// increments; the statistic is the mean deviation over `K` rollouts.
pub fn freedman_sanity(k_grid: &[usize], eps: f64, cfg: &FreedmanConfig) -> Result<Vec<FreedmanPoint>> {
    if k_grid.is_empty() || k_grid.contains(&0) {
        return Err(invalid("K_rollouts", "grid must be non-empty with K >= 1"));
    }
    if !(eps > 0.0) || cfg.horizon == 0 || !(cfg.increment_bound > 0.0) || cfg.trials == 0 {
        return Err(invalid("freedman", "eps, horizon, bound and trials must be positive"));
    }
    let c = freedman_constant(cfg);
    let b = cfg.increment_bound;
    let h = cfg.horizon as f64;
    k_grid
        .iter()
        .enumerate()
        .map(|(gi, &k)| {
            let mut rng = rng_for(cfg.seed, "freedman", gi as u64);
            let mut hits = 0usize;
            for _ in 0..cfg.trials {
                let mut total = 0.0;
                for _ in 0..k * cfg.horizon {
                    total += rng.random_range(-b..=b);
                }
                if (total / (k as f64 * h)).abs() > eps {
                    hits += 1;
                }
            }
            Ok(FreedmanPoint {
                k,
                exceedance: hits as f64 / cfg.trials as f64,
                envelope: (2.0 * (-(k as f64) * eps * eps / c).exp()).min(1.0),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{build_gram, spectral_summary};

    fn zero_data() -> BoundParams {
        BoundParams {
            inf_approx: 0.0,
            ..BoundParams::default()
        }
    }

    #[test]
    fn data_term_examples() {
        let p = BoundParams {
            k_pt: 0.0,
            k: 0.0,
            ..BoundParams::default()
        };
        assert_eq!(data_term(&p).unwrap(), 0.5);
        assert_eq!(data_term(&zero_data()).unwrap(), 0.0);
        assert!((data_term(&BoundParams::default()).unwrap() - 1.25).abs() < 1e-15);
        let bad = BoundParams {
            signal_k: 0.0,
            ..BoundParams::default()
        };
        assert!(data_term(&bad).is_err());
    }

    #[test]
    fn reasoning_term_examples() {
        let p = BoundParams::default();
        assert_eq!(reasoning_term(&p.with_t(0)).unwrap(), 0.0);
        let flat = BoundParams {
            beta: 0.0,
            ..p.clone()
        };
        assert_eq!(reasoning_term(&flat).unwrap(), 0.0);
        assert!((reasoning_term(&p).unwrap() - 7.0).abs() < 1e-12);
    }

    #[test]
    fn risk_bound_examples() {
        let p = BoundParams::default();
        assert!((risk_bound(&p).unwrap() - 8.25).abs() < 1e-12);
        let z = BoundParams {
            beta: 0.0,
            ..zero_data()
        };
        assert_eq!(risk_bound(&z).unwrap(), 0.0);
        assert!(risk_bound(&p.with_t(4)).unwrap() >= risk_bound(&p).unwrap());
    }

    #[test]
    fn empirical_risk_examples() {
        let p = BoundParams::default();
        let ts: Vec<u32> = (0..40).collect();
        for pt in simulate_empirical_risk(&p, 0.0, 1, &ts).unwrap() {
            assert_eq!(pt.empirical, pt.data_term + pt.reasoning_term);
        }
        for seed in 0..20 {
            for pt in simulate_empirical_risk(&p, 0.05, seed, &ts).unwrap() {
                assert!(pt.empirical <= pt.bound && pt.empirical >= 0.0);
            }
        }
        let a = simulate_empirical_risk(&p, 0.05, 9, &ts).unwrap();
        assert_eq!(a, simulate_empirical_risk(&p, 0.05, 9, &ts).unwrap());
    }

    #[test]
    fn empirical_ratio_settles() {
        let p = BoundParams::default();
        let ts: Vec<u32> = (0..40).collect();
        let pts = simulate_empirical_risk(&p, 0.02, 3, &ts).unwrap();
        let top: Vec<f64> = pts[30..].iter().map(|pt| pt.empirical / pt.bound).collect();
        let mean = top.iter().sum::<f64>() / top.len() as f64;
        for r in top {
            assert!((r - mean).abs() <= 0.1 * mean, "{r} vs {mean}");
        }
    }

    #[test]
    fn crossover_examples() {
        let ts: Vec<u32> = (0..50).collect();
        let flat = BoundParams {
            beta: 0.0,
            ..BoundParams::default()
        };
        assert_eq!(decomposition_crossover(&flat, &ts).unwrap(), None);
        assert_eq!(decomposition_crossover(&zero_data(), &ts).unwrap(), Some(1));
        // reasoning (2^T - 1) first exceeds 1.25 at T = 2
        assert_eq!(decomposition_crossover(&BoundParams::default(), &ts).unwrap(), Some(2));
        assert!(decomposition_crossover(&flat, &[3, 1]).is_err());
    }

    #[test]
    fn submult_examples() {
        let id = DMatrix::<f64>::identity(3, 3);
        let r = verify_submultiplicativity(&[id.clone(), id.clone(), id]).unwrap();
        assert!((r.lhs - 1.0).abs() < 1e-12 && r.holds);
        assert!((r.rhs_sigma_max_t - 1.0).abs() < 1e-12);

        let mut e = DMatrix::<f64>::zeros(3, 3);
        e[(0, 0)] = 2.0;
        let r = verify_submultiplicativity(&[e.clone(), e.clone(), e]).unwrap();
        assert!((r.lhs - 8.0).abs() < 1e-12 && (r.rhs_product - 8.0).abs() < 1e-12);

        let mut rng = rng_for(4, "t", 0);
        for _ in 0..20 {
            let js: Vec<DMatrix<f64>> = (0..3)
                .map(|_| DMatrix::from_fn(4, 4, |_, _| StandardNormal.sample(&mut rng)))
                .collect();
            let r = verify_submultiplicativity(&js).unwrap();
            assert!(r.holds && r.lhs < r.rhs_product);
        }
        assert!(verify_submultiplicativity(&[DMatrix::zeros(2, 2), DMatrix::zeros(3, 3)]).is_err());
    }

    fn spectrum_of(diag: &[f64]) -> Spectrum {
        let n = diag.len();
        let g = crate::spectral::GramMatrix {
            entries: DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(diag)),
            ridge: 0.0,
            normalized: false,
        };
        let _ = n;
        spectral_summary(&g).unwrap()
    }

    #[test]
    fn det_bound_examples() {
        let r = verify_det_lower_bound(&spectrum_of(&[1.0, 1.0, 1.0]), 1.0).unwrap();
        assert!(r.holds && r.gap.abs() < 1e-12);
        let r = verify_det_lower_bound(&spectrum_of(&[3.0, 1.0]), 3.0).unwrap();
        assert!(r.holds && r.gap.abs() < 1e-12);
        let r = verify_det_lower_bound(&spectrum_of(&[2.0, 1.0, 0.5]), 2.0).unwrap();
        assert!(r.holds && (r.lower_bound - 0.25).abs() < 1e-12);
        assert!(verify_det_lower_bound(&spectrum_of(&[2.0, 1.0]), 1.5).is_err());
        let g = build_gram(&[vec![1.0, 0.0], vec![0.6, 0.8]], 1e-3, true).unwrap();
        let s = spectral_summary(&g).unwrap();
        assert!(verify_det_lower_bound(&s, s.lambda_max()).unwrap().holds);
    }

    #[test]
    fn projector_examples() {
        let mut rng = rng_for(11, "t", 0);
        let q = random_orthogonal(6, &mut rng);
        let phi = q.columns(0, 2).into_owned();
        let u = [1.0, -2.0, 0.5, 0.0, 3.0, 1.0];
        let zero = DMatrix::zeros(6, 2);
        assert_eq!(projector_deviation(&phi, &zero, &u, 2.0).unwrap().deviation, 0.0);
        // perturbation inside the column space keeps the projector
        let inside = &phi * DMatrix::from_row_slice(2, 2, &[0.1, 0.0, 0.05, 0.2]);
        assert!(projector_deviation(&phi, &inside, &u, 2.0).unwrap().deviation < 1e-12);
        for _ in 0..20 {
            let dphi = DMatrix::from_fn(6, 2, |_, _| {
                let g: f64 = StandardNormal.sample(&mut rng);
                1e-3 * g
            });
            let r = projector_deviation(&phi, &dphi, &u, 2.0).unwrap();
            assert!((r.kappa - 1.0).abs() < 1e-9);
            let un = crate::linalg::norm(&u);
            assert!(r.deviation <= 2.0 * spectral_norm(&dphi) * un);
            assert!(r.within_bound());
        }
        let kill = -phi.clone();
        assert!(matches!(
            projector_deviation(&phi, &kill, &u, 2.0),
            Err(Error::DegeneratePerturbation(_))
        ));
    }

    #[test]
    fn kappa_grid_validation() {
        assert!(kappa_scaling_experiment(&[10.0, 10.0, 10.0], 1e-3, 5, 0).is_err());
        assert!(kappa_scaling_experiment(&[10.0, 100.0], 1e-3, 5, 0).is_err());
    }

    #[test]
    fn kappa_deviation_linear_in_delta() {
        let a = kappa_scaling_experiment(&[10.0, 100.0, 1000.0], 1e-4, 20, 5).unwrap();
        let b = kappa_scaling_experiment(&[10.0, 100.0, 1000.0], 1e-3, 20, 5).unwrap();
        for (x, y) in a.max_sq_deviation.iter().zip(&b.max_sq_deviation) {
            let ratio = (y / x).sqrt();
            assert!((ratio - 10.0).abs() <= 2.0, "ratio {ratio}");
        }
    }

    #[test]
    fn freedman_examples() {
        let cfg = FreedmanConfig {
            trials: 4000,
            ..FreedmanConfig::default()
        };
        let pts = freedman_sanity(&[1, 64], 0.15, &cfg).unwrap();
        assert!(pts[1].exceedance < pts[0].exceedance);
        for p in &pts {
            assert!(p.exceedance <= p.envelope);
        }
        let none = freedman_sanity(&[1, 4], 1.0, &cfg).unwrap();
        assert!(none.iter().all(|p| p.exceedance == 0.0));
        let far = freedman_sanity(&[100_000], 0.5, &FreedmanConfig { trials: 1, ..cfg }).unwrap();
        assert!(far[0].envelope < 1e-100);
    }

    #[test]
    fn params_parse() {
        let p = BoundParams::parse("# derived\nbeta = 0\nT=5\n").unwrap();
        assert_eq!((p.beta, p.t), (0.0, 5));
        assert!(matches!(
            BoundParams::parse("betta=1"),
            Err(Error::InvalidParam { field, .. }) if field == "betta"
        ));
        assert!(matches!(
            BoundParams::parse("signal_k=-1"),
            Err(Error::InvalidParam { field, .. }) if field == "signal_k"
        ));
        let back = BoundParams::from_pairs(
            BoundParams::default().to_pairs().iter().map(|(k, v)| (k.as_str(), v.as_str())),
        )
        .unwrap();
        assert_eq!(back, BoundParams::default());
    }
}
