//! Gram-spectrum and amplification components of the HalluGuard score.
//!
//! The score combines three terms computed from one bundle:
//!
//! * `log det K` of the ridged Gram matrix over the K generation embeddings
//!   (representational adequacy; log-det stands in for det, which underflows),
//! * `log sigma_max`, the largest per-step amplification of the decoder state,
//! * `-log kappa(K)^2`, a penalty on ill-conditioned Gram spectra.
//!
//! Higher scores mean a more reliable sample.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::bundle::TrajectoryBundle;
use crate::clipping::{clip_rows, ClipThresholds};
use crate::error::{Error, Result};
use crate::linalg::{self, dot, norm};

pub const DEFAULT_RIDGE: f64 = 1e-3;
pub const DEFAULT_PROXY_FLOOR: f64 = 1e-8;
pub const COMPONENT_NAMES: [&str; 3] = ["log_det", "log_sigma_max", "log_kappa_sq"];

/// Ridged Gram matrix `E E^T + ridge * I` over (optionally unit-normalized) rows.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    pub entries: DMatrix<f64>,
    pub ridge: f64,
    pub normalized: bool,
}

impl GramMatrix {
    pub fn size(&self) -> usize {
        self.entries.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    /// Descending.
    pub eigenvalues: Vec<f64>,
    /// From the Cholesky factor.
    pub log_det: f64,
    pub kappa: f64,
    pub trace: f64,
}

impl Spectrum {
    pub fn lambda_max(&self) -> f64 {
        self.eigenvalues[0]
    }

    pub fn lambda_min(&self) -> f64 {
        *self.eigenvalues.last().expect("non-empty spectrum")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AmpMode {
    ExactJacobian,
    StateDeltaProxy,
}

impl AmpMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AmpMode::ExactJacobian => "exact",
            AmpMode::StateDeltaProxy => "proxy",
        }
    }
}

impl std::str::FromStr for AmpMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(AmpMode::ExactJacobian),
            "proxy" => Ok(AmpMode::StateDeltaProxy),
            _ => Err(Error::InvalidParam {
                field: "amp_mode".into(),
                reason: format!("expected `exact` or `proxy`, got `{s}`"),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AmplificationEstimate {
    pub sigma_max: f64,
    /// Mean per-step log amplification.
    pub beta_avg: f64,
    pub mode: AmpMode,
    pub per_step: Option<Vec<f64>>,
}

impl AmplificationEstimate {
    fn from_steps(per_step: Vec<f64>, mode: AmpMode) -> Self {
        let sigma_max = per_step.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let beta_avg = per_step.iter().map(|s| s.ln()).sum::<f64>() / per_step.len() as f64;
        Self {
            sigma_max,
            beta_avg,
            mode,
            per_step: Some(per_step),
        }
    }
}

/// Aggregates per-generation estimates: `sigma_max` is the maximum over
/// generations, `beta_avg` the mean of per-generation averages.
pub fn aggregate_max(estimates: &[AmplificationEstimate]) -> Option<AmplificationEstimate> {
    let first = estimates.first()?;
    let sigma_max = estimates
        .iter()
        .map(|e| e.sigma_max)
        .fold(f64::NEG_INFINITY, f64::max);
    let beta_avg = estimates.iter().map(|e| e.beta_avg).sum::<f64>() / estimates.len() as f64;
    Some(AmplificationEstimate {
        sigma_max,
        beta_avg,
        mode: first.mode,
        per_step: None,
    })
}

/// Builds `G = E E^T + ridge * I` from `K` embedding rows.
pub fn build_gram(embeddings: &[Vec<f64>], ridge: f64, normalize: bool) -> Result<GramMatrix> {
    let k = embeddings.len();
    if k < 2 {
        return Err(Error::Insufficient {
            what: "embedding rows",
            needed: 2,
            got: k,
        });
    }
    if !(ridge >= 0.0) || !ridge.is_finite() {
        return Err(crate::error::invalid("ridge", "must be finite and >= 0"));
    }
    let d = embeddings[0].len();
    let mut rows = Vec::with_capacity(k);
    for (i, row) in embeddings.iter().enumerate() {
        if row.len() != d {
            return Err(Error::DimensionMismatch(format!(
                "embedding row {i} has length {}, expected {d}",
                row.len()
            )));
        }
        if row.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("embedding row {i}")));
        }
        if normalize {
            let n = norm(row);
            if n <= 1e-12 {
                return Err(Error::DegenerateEmbedding { row: i });
            }
            rows.push(row.iter().map(|x| x / n).collect::<Vec<_>>());
        } else {
            rows.push(row.clone());
        }
    }
    let mut g = DMatrix::zeros(k, k);
    for i in 0..k {
        for j in i..k {
            let v = dot(&rows[i], &rows[j]);
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
        g[(i, i)] += ridge;
    }
    Ok(GramMatrix {
        entries: g,
        ridge,
        normalized: normalize,
    })
}

/// Eigenvalues (symmetric solver), Cholesky log-det, condition number, trace.
pub fn spectral_summary(gram: &GramMatrix) -> Result<Spectrum> {
    let log_det = linalg::cholesky_log_det(&gram.entries)?;
    let eigenvalues = linalg::sym_eigenvalues_desc(&gram.entries);
    let lmin = *eigenvalues.last().expect("K >= 1");
    if !(lmin > 0.0) {
        return Err(Error::NotPositiveDefinite {
            pivot: eigenvalues.len() - 1,
            value: lmin,
        });
    }
    Ok(Spectrum {
        kappa: eigenvalues[0] / lmin,
        trace: gram.entries.trace(),
        log_det,
        eigenvalues,
    })
}

/// Step-indexed Jacobian access: `J_t v` and `J_t^T u`.
pub trait JacobianOracle {
    /// Input dimension of every `J_t`.
    fn in_dim(&self) -> usize;

    fn out_dim(&self) -> usize {
        self.in_dim()
    }

    fn jvp(&self, t: usize, v: &[f64]) -> Result<Vec<f64>>;

    fn vjp(&self, t: usize, u: &[f64]) -> Result<Vec<f64>>;
}

/// Dense matrices as an oracle; handy for tests and the bound lab.
pub struct DenseJacobians(pub Vec<DMatrix<f64>>);

impl JacobianOracle for DenseJacobians {
    fn in_dim(&self) -> usize {
        self.0[0].ncols()
    }

    fn out_dim(&self) -> usize {
        self.0[0].nrows()
    }

    fn jvp(&self, t: usize, v: &[f64]) -> Result<Vec<f64>> {
        let j = self.0.get(t).ok_or(Error::OutOfRange {
            index: t,
            lo: 0,
            hi: self.0.len(),
        })?;
        Ok((j * linalg::to_dvector(v)).iter().copied().collect())
    }

    fn vjp(&self, t: usize, u: &[f64]) -> Result<Vec<f64>> {
        let j = self.0.get(t).ok_or(Error::OutOfRange {
            index: t,
            lo: 0,
            hi: self.0.len(),
        })?;
        Ok((j.transpose() * linalg::to_dvector(u)).iter().copied().collect())
    }
}

/// Power-iteration settings for [`amplification_exact`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerIteration {
    pub iters: usize,
    /// Relative change of the singular-value estimate that counts as converged.
    pub tol: f64,
    pub seed: u64,
    /// Random probes per step for the adjoint identity check.
    pub adjoint_probes: usize,
    pub adjoint_tol: f64,
}

impl Default for PowerIteration {
    fn default() -> Self {
        Self {
            iters: 20,
            tol: 1e-6,
            seed: 0x5eed,
            adjoint_probes: 2,
            adjoint_tol: 1e-6,
        }
    }
}

fn random_unit(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let nv = norm(&v);
        if nv > 1e-12 {
            return v.into_iter().map(|x| x / nv).collect();
        }
    }
}

/// Largest singular value of one `J_t` by power iteration on `J_t^T J_t`.
pub fn spectral_norm_power<O: JacobianOracle + ?Sized>(
    oracle: &O,
    t: usize,
    cfg: &PowerIteration,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut v = random_unit(rng, oracle.in_dim());
    let mut prev = f64::NAN;
    for it in 0..cfg.iters {
        let jv = oracle.jvp(t, &v)?;
        let sigma = norm(&jv);
        if sigma == 0.0 {
            return Ok(0.0);
        }
        if it > 0 && (sigma - prev).abs() <= cfg.tol * sigma {
            return Ok(sigma);
        }
        prev = sigma;
        let w = oracle.vjp(t, &jv)?;
        let nw = norm(&w);
        if nw == 0.0 {
            return Ok(sigma);
        }
        v = w.into_iter().map(|x| x / nw).collect();
    }
    Err(Error::NoConvergence {
        step: t,
        iters: cfg.iters,
        last: prev,
    })
}

/// Checks `<J v, u> = <v, J^T u>` on random probes.
pub fn check_adjoint<O: JacobianOracle + ?Sized>(
    oracle: &O,
    t: usize,
    probes: usize,
    tol: f64,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    for _ in 0..probes {
        let v = random_unit(rng, oracle.in_dim());
        let u = random_unit(rng, oracle.out_dim());
        let lhs = dot(&oracle.jvp(t, &v)?, &u);
        let rhs = dot(&v, &oracle.vjp(t, &u)?);
        if (lhs - rhs).abs() > tol * lhs.abs().max(1.0) {
            return Err(Error::InconsistentOracle { step: t, lhs, rhs });
        }
    }
    Ok(())
}

/// Per-step spectral norms `sigma_t = ||J_t||_2` for `t in 0..steps`, then
/// `sigma_max = max sigma_t` and `beta_avg = mean log sigma_t`.
pub fn amplification_exact<O: JacobianOracle + ?Sized>(
    oracle: &O,
    steps: usize,
    cfg: &PowerIteration,
) -> Result<AmplificationEstimate> {
    if steps == 0 {
        return Err(Error::Insufficient {
            what: "decoding steps",
            needed: 1,
            got: 0,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut per_step = Vec::with_capacity(steps);
    for t in 0..steps {
        check_adjoint(oracle, t, cfg.adjoint_probes, cfg.adjoint_tol, &mut rng)?;
        let sigma = spectral_norm_power(oracle, t, cfg, &mut rng)?;
        if !(sigma > 0.0) {
            return Err(Error::NonFinite(format!("log of zero spectral norm at step {t}")));
        }
        per_step.push(sigma);
    }
    Ok(AmplificationEstimate::from_steps(
        per_step,
        AmpMode::ExactJacobian,
    ))
}

/// Bundle-only fallback: ratios of consecutive hidden-state increments,
/// `a_t = max(|h_{t+1} - h_t|, floor) / max(|h_t - h_{t-1}|, floor)`.
///
/// When every increment is below `floor` the rollout is treated as
/// non-expansive (`sigma_max = 1`, `beta_avg = 0`).
pub fn amplification_proxy(states: &[Vec<f64>], floor: f64) -> Result<AmplificationEstimate> {
    if states.len() < 3 {
        return Err(Error::Insufficient {
            what: "step states",
            needed: 3,
            got: states.len(),
        });
    }
    let deltas: Vec<f64> = states
        .windows(2)
        .map(|w| {
            let diff: Vec<f64> = w[1].iter().zip(&w[0]).map(|(a, b)| a - b).collect();
            norm(&diff)
        })
        .collect();
    if deltas.iter().all(|&d| d < floor) {
        return Ok(AmplificationEstimate {
            sigma_max: 1.0,
            beta_avg: 0.0,
            mode: AmpMode::StateDeltaProxy,
            per_step: Some(vec![1.0; deltas.len() - 1]),
        });
    }
    let ratios = deltas
        .windows(2)
        .map(|w| w[1].max(floor) / w[0].max(floor))
        .collect();
    Ok(AmplificationEstimate::from_steps(
        ratios,
        AmpMode::StateDeltaProxy,
    ))
}

/// The three score components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Components {
    pub log_det: f64,
    pub log_sigma_max: f64,
    pub log_kappa_sq: f64,
}

impl Components {
    pub fn as_array(&self) -> [f64; 3] {
        [self.log_det, self.log_sigma_max, self.log_kappa_sq]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self {
            log_det: a[0],
            log_sigma_max: a[1],
            log_kappa_sq: a[2],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralConfig {
    pub ridge: f64,
    pub normalize: bool,
    pub floor: f64,
}

impl Default for SpectralConfig {
    fn default() -> Self {
        Self {
            ridge: DEFAULT_RIDGE,
            normalize: true,
            floor: DEFAULT_PROXY_FLOOR,
        }
    }
}

/// `(log det, log kappa^2)` of the Gram matrix over the bundle's sentence embeddings.
pub fn gram_components(
    bundle: &TrajectoryBundle,
    cfg: &SpectralConfig,
    clip: Option<&ClipThresholds>,
) -> Result<(f64, f64)> {
    let mut embeds: Vec<Vec<f64>> = bundle
        .generations
        .iter()
        .map(|g| g.sent_embed.iter().map(|&x| f64::from(x)).collect())
        .collect();
    if let Some(th) = clip {
        clip_rows(&mut embeds, th)?;
    }
    let gram = build_gram(&embeds, cfg.ridge, cfg.normalize)?;
    let spec = spectral_summary(&gram)?;
    Ok((spec.log_det, 2.0 * spec.kappa.ln()))
}

/// Proxy amplification over every generation that carries step states
/// (and has at least three of them), aggregated by maximum.
pub fn bundle_amplification_proxy(
    bundle: &TrajectoryBundle,
    floor: f64,
    clip: Option<&ClipThresholds>,
) -> Result<AmplificationEstimate> {
    let d = bundle.embed_dim;
    let mut estimates = Vec::new();
    for g in &bundle.generations {
        let Some(states) = &g.step_states else {
            continue;
        };
        let mut rows: Vec<Vec<f64>> = states
            .chunks_exact(d)
            .map(|r| r.iter().map(|&x| f64::from(x)).collect())
            .collect();
        if rows.len() < 3 {
            continue;
        }
        if let Some(th) = clip {
            clip_rows(&mut rows, th)?;
        }
        estimates.push(amplification_proxy(&rows, floor)?);
    }
    aggregate_max(&estimates).ok_or(Error::Insufficient {
        what: "generations with >= 3 step states",
        needed: 1,
        got: 0,
    })
}

/// Components with the proxy amplification estimate.
pub fn halluguard_components(
    bundle: &TrajectoryBundle,
    cfg: &SpectralConfig,
    clip: Option<&ClipThresholds>,
) -> Result<Components> {
    let amp = bundle_amplification_proxy(bundle, cfg.floor, clip)?;
    halluguard_components_with(bundle, cfg, clip, &amp)
}

/// Components with an externally supplied amplification estimate
/// (e.g. exact Jacobians from an attached model).
pub fn halluguard_components_with(
    bundle: &TrajectoryBundle,
    cfg: &SpectralConfig,
    clip: Option<&ClipThresholds>,
    amp: &AmplificationEstimate,
) -> Result<Components> {
    let (log_det, log_kappa_sq) = gram_components(bundle, cfg, clip)?;
    if !(amp.sigma_max > 0.0) || !amp.sigma_max.is_finite() {
        return Err(Error::NonFinite("sigma_max".into()));
    }
    Ok(Components {
        log_det,
        log_sigma_max: amp.sigma_max.ln(),
        log_kappa_sq,
    })
}

/// Per-component mean and (population) standard deviation over a validation split.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl CalibrationStats {
    pub fn names(&self) -> [&'static str; 3] {
        COMPONENT_NAMES
    }

    pub fn z(&self, c: &Components) -> Result<[f64; 3]> {
        let raw = c.as_array();
        let mut out = [0.0; 3];
        for i in 0..3 {
            if !(self.std[i] > 0.0) {
                return Err(Error::DegenerateCalibration(COMPONENT_NAMES[i].into()));
            }
            out[i] = (raw[i] - self.mean[i]) / self.std[i];
        }
        Ok(out)
    }
}

/// `log det + log sigma_max - log kappa^2`, or the same sum over
/// per-component z-scores when calibration statistics are supplied.
pub fn halluguard_score(c: &Components, calibration: Option<&CalibrationStats>) -> Result<f64> {
    if c.as_array().iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("score components".into()));
    }
    let [a, b, k] = match calibration {
        Some(cal) => cal.z(c)?,
        None => c.as_array(),
    };
    Ok(a + b - k)
}
