//! Detector evaluation: labeling, threshold-free metrics, operating points,
//! z-calibration, and dataset-level comparison.
//!
//! Every metric here expects scores oriented so that higher means
//! hallucinated; [`orient`] applies a detector's declared orientation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{Read, Write};

use crate::bundle::TrajectoryBundle;
use crate::clipping::{compute_thresholds, MemoryBank};
use crate::detectors::{rouge_l, score_sample, Detector, DetectorConfig, DetectorScores, ScoreContext};
use crate::error::{invalid, Error, Result};
use crate::spectral::{halluguard_components, AmplificationEstimate, CalibrationStats, Components, SpectralConfig, COMPONENT_NAMES};

pub const DEFAULT_TAU_R: f64 = 0.5;
pub const REPORT_FPRS: [f64; 2] = [0.05, 0.10];

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledScore {
    pub prompt_id: String,
    /// Oriented: higher = hallucinated.
    pub score: f64,
    /// 1 = hallucinated.
    pub label: u8,
}

impl LabeledScore {
    pub fn new(prompt_id: impl Into<String>, score: f64, label: u8) -> Self {
        Self {
            prompt_id: prompt_id.into(),
            score,
            label,
        }
    }
}

/// Oriented score for a detector.
pub fn orient(detector: Detector, raw: f64) -> f64 {
    detector.orientation().sign() * raw
}

/// 1 (hallucinated) iff the best ROUGE-L against any reference is below `tau_r`.
pub fn label_by_rouge(text: &str, references: &[String], tau_r: f64) -> Result<u8> {
    if references.is_empty() {
        return Err(Error::Insufficient {
            what: "references",
            needed: 1,
            got: 0,
        });
    }
    Ok(u8::from(best_rouge(text, references) < tau_r))
}

pub fn best_rouge(text: &str, references: &[String]) -> f64 {
    references
        .iter()
        .map(|r| rouge_l(text, r))
        .fold(0.0, f64::max)
}

fn class_counts(scores: &[LabeledScore]) -> (usize, usize) {
    let pos = scores.iter().filter(|s| s.label == 1).count();
    (pos, scores.len() - pos)
}

fn check_finite(scores: &[LabeledScore]) -> Result<()> {
    match scores.iter().find(|s| !s.score.is_finite()) {
        Some(s) => Err(Error::NonFinite(format!("score for {}", s.prompt_id))),
        None => Ok(()),
    }
}

fn require_both(scores: &[LabeledScore]) -> Result<(usize, usize)> {
    check_finite(scores)?;
    let (p, n) = class_counts(scores);
    if p == 0 || n == 0 {
        return Err(Error::UndefinedMetric { n_pos: p, n_neg: n });
    }
    Ok((p, n))
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half. Computed from mid-ranks in `O(n log n)`.
pub fn auroc(scores: &[LabeledScore]) -> Result<f64> {
    let (n_pos, n_neg) = require_both(scores)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].score.total_cmp(&scores[b].score));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]].score == scores[idx[i]].score {
            j += 1;
        }
        // 1-based mid-rank of the tie block
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            if scores[k].label == 1 {
                rank_sum_pos += mid;
            }
        }
        i = j + 1;
    }
    let p = n_pos as f64;
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n_neg as f64))
}

/// Average precision, `sum_k (R_k - R_{k-1}) P_k`, walking the list in
/// descending score order. Ties keep input order (stable sort), so a
/// positive listed before a tied negative is credited first.
pub fn auprc(scores: &[LabeledScore]) -> Result<f64> {
    check_finite(scores)?;
    let (n_pos, n_neg) = class_counts(scores);
    if n_pos == 0 {
        return Err(Error::UndefinedMetric { n_pos, n_neg });
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].score.total_cmp(&scores[a].score));
    let mut tp = 0usize;
    let mut ap = 0.0;
    for (rank, &k) in idx.iter().enumerate() {
        if scores[k].label == 1 {
            tp += 1;
            ap += tp as f64 / (rank + 1) as f64;
        }
    }
    Ok(ap / n_pos as f64)
}

/// Operating points `(threshold, tpr, fpr)` for "flag if score >= threshold",
/// from the empty prediction (threshold +inf) down to the lowest score.
fn roc_steps(scores: &[LabeledScore], n_pos: usize, n_neg: usize) -> Vec<(f64, f64, f64)> {
    let mut sorted: Vec<&LabeledScore> = scores.iter().collect();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut out = vec![(f64::INFINITY, 0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let s = sorted[i].score;
        while i < sorted.len() && sorted[i].score == s {
            if sorted[i].label == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push((s, tp as f64 / n_pos as f64, fp as f64 / n_neg as f64));
    }
    out
}

/// Threshold with the highest TPR among those whose FPR stays within `fpr`
/// (the lowest such cut, since TPR grows as the cut moves down).
fn fpr_cut(scores: &[LabeledScore], fpr: f64) -> Result<(f64, f64)> {
    if !(fpr > 0.0 && fpr < 1.0) {
        return Err(invalid("fpr", "must lie in (0, 1)"));
    }
    let (p, n) = require_both(scores)?;
    let best = roc_steps(scores, p, n)
        .into_iter()
        .filter(|&(_, _, f)| f <= fpr + 1e-12)
        .last()
        .expect("the empty prediction always qualifies");
    Ok((best.0, best.1))
}

pub fn tpr_at_fpr(scores: &[LabeledScore], fpr: f64) -> Result<f64> {
    fpr_cut(scores, fpr).map(|(_, tpr)| tpr)
}

/// F1 of "flag if score >= threshold".
pub fn f1_at(scores: &[LabeledScore], threshold: f64) -> f64 {
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for s in scores {
        match (s.score >= threshold, s.label == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    if tp == 0 {
        return 0.0;
    }
    2.0 * tp as f64 / (2 * tp + fp + fneg) as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdMode {
    /// Flag the top `pi_target` fraction of scores.
    Quantile(f64),
    /// Quantile mode with `pi_target` set to the observed positive rate.
    MatchPrevalence,
    /// Highest-TPR cut with FPR at most `f`.
    FixedFpr(f64),
    /// `tau = c_fn / (c_fp + c_fn) * (1 - pi) / pi` on probability-like scores.
    Bayes { c_fp: f64, c_fn: f64, pi: f64 },
}

impl std::str::FromStr for ThresholdMode {
    type Err = Error;

    /// `match-prevalence`, `quantile:PI`, `fixed-fpr:F` or `bayes:C_FP,C_FN,PI`.
    fn from_str(s: &str) -> Result<Self> {
        let nums = |v: &str, n: usize| -> Result<Vec<f64>> {
            let xs = v
                .split(',')
                .map(|x| x.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| invalid("threshold", format!("bad number in `{s}`")))?;
            if xs.len() != n {
                return Err(invalid("threshold", format!("`{s}` needs {n} value(s)")));
            }
            Ok(xs)
        };
        match s.split_once(':') {
            None if s == "match-prevalence" => Ok(ThresholdMode::MatchPrevalence),
            Some(("quantile", v)) => Ok(ThresholdMode::Quantile(nums(v, 1)?[0])),
            Some(("fixed-fpr", v)) => Ok(ThresholdMode::FixedFpr(nums(v, 1)?[0])),
            Some(("bayes", v)) => {
                let x = nums(v, 3)?;
                Ok(ThresholdMode::Bayes {
                    c_fp: x[0],
                    c_fn: x[1],
                    pi: x[2],
                })
            }
            _ => Err(invalid("threshold", format!("unknown mode `{s}`"))),
        }
    }
}

/// Picks a decision threshold on validation scores.
///
/// Quantile mode sorts ascending, flags the top `round(pi n)` scores, and
/// places the threshold at the midpoint between the last unflagged and the
/// first flagged score.
pub fn select_threshold(scores: &[LabeledScore], mode: ThresholdMode) -> Result<f64> {
    if let ThresholdMode::Bayes { c_fp, c_fn, pi } = mode {
        if !(pi > 0.0 && pi < 1.0) {
            return Err(invalid("pi", "must lie in (0, 1)"));
        }
        if !(c_fp >= 0.0 && c_fn >= 0.0 && c_fp + c_fn > 0.0) {
            return Err(invalid("costs", "must be non-negative and not both zero"));
        }
        return Ok(c_fn / (c_fp + c_fn) * (1.0 - pi) / pi);
    }
    if scores.is_empty() {
        return Err(Error::Insufficient {
            what: "validation scores",
            needed: 1,
            got: 0,
        });
    }
    check_finite(scores)?;
    let pi = match mode {
        ThresholdMode::Quantile(pi) => pi,
        ThresholdMode::MatchPrevalence => class_counts(scores).0 as f64 / scores.len() as f64,
        ThresholdMode::FixedFpr(f) => return fpr_cut(scores, f).map(|(t, _)| t),
        ThresholdMode::Bayes { .. } => unreachable!(),
    };
    if !(0.0..=1.0).contains(&pi) {
        return Err(invalid("pi_target", "must lie in [0, 1]"));
    }
    let mut sorted: Vec<f64> = scores.iter().map(|s| s.score).collect();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let flagged = (pi * n as f64).round() as usize;
    Ok(match flagged {
        0 => f64::INFINITY,
        f if f >= n => sorted[0],
        f => 0.5 * (sorted[n - f - 1] + sorted[n - f]),
    })
}

/// Per-component mean and population standard deviation.
pub fn fit_z_calibration(triples: &[Components]) -> Result<CalibrationStats> {
    if triples.len() < 2 {
        return Err(Error::Insufficient {
            what: "component triples",
            needed: 2,
            got: triples.len(),
        });
    }
    let n = triples.len() as f64;
    let mut mean = [0.0; 3];
    let mut std = [0.0; 3];
    for i in 0..3 {
        let xs = triples.iter().map(|c| c.as_array()[i]);
        let m = xs.clone().sum::<f64>() / n;
        let var = xs.map(|x| (x - m) * (x - m)).sum::<f64>() / n;
        if !(var > 0.0) {
            return Err(Error::DegenerateCalibration(COMPONENT_NAMES[i].into()));
        }
        mean[i] = m;
        std[i] = var.sqrt();
    }
    Ok(CalibrationStats { mean, std })
}

/// One scored sample, as carried by the score CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub prompt_id: String,
    pub label: Option<u8>,
    pub rouge_to_ref: Option<f64>,
    /// Raw (un-oriented) scores; `None` = unavailable.
    pub scores: BTreeMap<Detector, Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorMetrics {
    pub detector: Detector,
    pub auroc: f64,
    pub auprc: f64,
    pub f1: f64,
    /// `(fpr, tpr)` at each reported false-positive budget.
    pub tpr_at_fpr: Vec<(f64, f64)>,
    pub threshold: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub n_unavailable: usize,
}

impl DetectorMetrics {
    pub fn tpr_at(&self, fpr: f64) -> Option<f64> {
        self.tpr_at_fpr
            .iter()
            .find(|(f, _)| (f - fpr).abs() < 1e-12)
            .map(|&(_, t)| t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub detectors: Vec<DetectorMetrics>,
}

impl EvalReport {
    pub fn get(&self, d: Detector) -> Option<&DetectorMetrics> {
        self.detectors.iter().find(|m| m.detector == d)
    }
}

/// Metrics for every detector column of `rows`.
pub fn evaluate_rows(
    rows: &[ScoreRow],
    detectors: &[Detector],
    mode: ThresholdMode,
) -> Result<EvalReport> {
    let mut out = Vec::new();
    for &d in detectors {
        let mut labeled = Vec::new();
        let mut unavailable = 0;
        for r in rows {
            let label = r.label.ok_or_else(|| invalid("label", format!("missing for {}", r.prompt_id)))?;
            match r.scores.get(&d).copied().flatten() {
                Some(s) => labeled.push(LabeledScore::new(r.prompt_id.clone(), orient(d, s), label)),
                None => unavailable += 1,
            }
        }
        let (n_pos, n_neg) = require_both(&labeled)?;
        let threshold = select_threshold(&labeled, mode)?;
        let tpr = REPORT_FPRS
            .iter()
            .map(|&f| tpr_at_fpr(&labeled, f).map(|t| (f, t)))
            .collect::<Result<_>>()?;
        out.push(DetectorMetrics {
            detector: d,
            auroc: auroc(&labeled)?,
            auprc: auprc(&labeled)?,
            f1: f1_at(&labeled, threshold),
            tpr_at_fpr: tpr,
            threshold,
            n_pos,
            n_neg,
            n_unavailable: unavailable,
        });
    }
    Ok(EvalReport { detectors: out })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipConfig {
    pub capacity: usize,
    pub quantile: f64,
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self {
            capacity: crate::clipping::DEFAULT_CAPACITY,
            quantile: crate::clipping::DEFAULT_QUANTILE,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub detector: DetectorConfig,
    /// `None` disables clipping.
    pub clip: Option<ClipConfig>,
    pub tau_r: f64,
    pub threshold: ThresholdMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            detector: DetectorConfig::default(),
            clip: Some(ClipConfig::default()),
            tau_r: DEFAULT_TAU_R,
            threshold: ThresholdMode::MatchPrevalence,
        }
    }
}

/// Stored label, else ROUGE-L labeling of the primary (first) generation.
pub fn bundle_label(bundle: &TrajectoryBundle, tau_r: f64) -> Result<u8> {
    if let Some(l) = bundle.label {
        return Ok(l);
    }
    let primary = bundle.generations.first().ok_or(Error::Insufficient {
        what: "generations",
        needed: 1,
        got: 0,
    })?;
    label_by_rouge(&primary.text, &bundle.references, tau_r)
}

/// Scores bundles in order. With clipping on, thresholds come from the bank
/// as it stood before each bundle, and the bundle's vectors are banked after.
pub fn score_dataset(
    dataset: &[TrajectoryBundle],
    detectors: &[Detector],
    cfg: &EvalConfig,
) -> Result<Vec<DetectorScores>> {
    score_dataset_with(dataset, detectors, cfg, None)
}

/// [`score_dataset`] with one externally computed amplification estimate per
/// bundle, used when the detector config asks for exact amplification. A
/// missing estimate leaves HalluGuard unavailable for that bundle.
pub fn score_dataset_with(
    dataset: &[TrajectoryBundle],
    detectors: &[Detector],
    cfg: &EvalConfig,
    exact_amps: Option<&[Option<AmplificationEstimate>]>,
) -> Result<Vec<DetectorScores>> {
    if let Some(a) = exact_amps {
        if a.len() != dataset.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} amplification estimates for {} bundles",
                a.len(),
                dataset.len()
            )));
        }
    }
    let mut bank = cfg.clip.as_ref().map(|c| MemoryBank::new(c.capacity));
    let mut out = Vec::with_capacity(dataset.len());
    for b in dataset {
        let th = match (&bank, &cfg.clip) {
            (Some(bank), Some(c)) if bank.count() >= 2 => Some(compute_thresholds(bank, c.quantile)?),
            _ => None,
        };
        let ctx = ScoreContext {
            clip: th.as_ref(),
            exact_amp: exact_amps.and_then(|a| a[out.len()].as_ref()),
        };
        out.push(score_sample(b, detectors, &cfg.detector, &ctx));
        if let Some(bank) = bank.as_mut() {
            bank_bundle(bank, b)?;
        }
    }
    Ok(out)
}

/// Pushes a bundle's sentence embeddings and step-state rows into the bank.
pub fn bank_bundle(bank: &mut MemoryBank, b: &TrajectoryBundle) -> Result<()> {
    let d = b.embed_dim;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for g in &b.generations {
        rows.push(g.sent_embed.iter().map(|&x| f64::from(x)).collect());
        if let Some(s) = &g.step_states {
            rows.extend(s.chunks_exact(d).map(|r| r.iter().map(|&x| f64::from(x)).collect()));
        }
    }
    bank.update(&rows)
}

/// Turns detector outputs into score rows, labeling each bundle.
pub fn score_rows(
    dataset: &[TrajectoryBundle],
    scores: &[DetectorScores],
    tau_r: f64,
) -> Result<Vec<ScoreRow>> {
    dataset
        .iter()
        .zip(scores)
        .map(|(b, s)| {
            let label = if b.label.is_some() || !b.references.is_empty() {
                Some(bundle_label(b, tau_r)?)
            } else {
                None
            };
            Ok(ScoreRow {
                prompt_id: b.prompt_id.clone(),
                label,
                rouge_to_ref: b.rouge_to_ref.map(f64::from),
                scores: s.scores.clone(),
            })
        })
        .collect()
}

/// Scores and evaluates a labeled dataset.
pub fn evaluate(
    dataset: &[TrajectoryBundle],
    detectors: &[Detector],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let scores = score_dataset(dataset, detectors, cfg)?;
    let rows = score_rows(dataset, &scores, cfg.tau_r)?;
    if rows.iter().any(|r| r.label.is_none()) {
        return Err(invalid("dataset", "every bundle needs a label or references"));
    }
    evaluate_rows(&rows, detectors, cfg.threshold)
}

/// Fits z-calibration on the HalluGuard components of a validation split.
pub fn calibrate_on(dataset: &[TrajectoryBundle], cfg: &EvalConfig) -> Result<CalibrationStats> {
    let mut plain = cfg.clone();
    plain.detector.calibration = None;
    let scores = score_dataset(dataset, &[Detector::HalluGuard], &plain)?;
    let triples: Vec<Components> = scores.iter().filter_map(|s| s.components).collect();
    fit_z_calibration(&triples)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Proxy {
    /// `log det K`.
    LogDet,
    /// `log sigma_max - log kappa^2`.
    AmpMinusCond,
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch(format!("{} vs {}", x.len(), y.len())));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if !(sxx > 0.0) || !(syy > 0.0) {
        return Err(invalid("correlation", "zero variance in an input"));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Pearson correlation between a spectral proxy and the non-hallucination
/// indicator `1 - label` across bundles.
pub fn proxy_task_correlation(
    dataset: &[TrajectoryBundle],
    proxy: Proxy,
    cfg: &SpectralConfig,
    tau_r: f64,
) -> Result<f64> {
    if dataset.len() < 10 {
        return Err(Error::Insufficient {
            what: "labeled bundles",
            needed: 10,
            got: dataset.len(),
        });
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for b in dataset {
        let c = halluguard_components(b, cfg, None)?;
        xs.push(match proxy {
            Proxy::LogDet => c.log_det,
            Proxy::AmpMinusCond => c.log_sigma_max - c.log_kappa_sq,
        });
        ys.push(1.0 - f64::from(bundle_label(b, tau_r)?));
    }
    pearson(&xs, &ys)
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "NA".to_string(), |v| v.to_string())
}

/// Writes the score CSV: `prompt_id,label,rouge_to_ref,<detector>...`.
pub fn write_score_csv<W: Write>(rows: &[ScoreRow], detectors: &[Detector], sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    let mut header = vec!["prompt_id".to_string(), "label".into(), "rouge_to_ref".into()];
    header.extend(detectors.iter().map(|d| d.name().to_string()));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.prompt_id.clone(),
            r.label.map_or_else(|| "NA".into(), |l| l.to_string()),
            fmt_opt(r.rouge_to_ref),
        ];
        rec.extend(detectors.iter().map(|d| fmt_opt(r.scores.get(d).copied().flatten())));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn parse_opt(field: &str, what: &str) -> Result<Option<f64>> {
    if field == "NA" || field.is_empty() {
        return Ok(None);
    }
    field
        .parse::<f64>()
        .map(Some)
        .map_err(|_| invalid(what, format!("not a number: `{field}`")))
}

/// Reads a score CSV. Detector columns are every column after `rouge_to_ref`;
/// lines starting with `#` are skipped.
pub fn read_score_csv<R: Read>(source: R) -> Result<(Vec<ScoreRow>, Vec<Detector>)> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(source);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let col = |name: &str| header.iter().position(|h| h == name);
    let id_col = col("prompt_id").ok_or_else(|| invalid("prompt_id", "missing column"))?;
    let label_col = col("label").ok_or_else(|| invalid("label", "missing column"))?;
    let rouge_col = col("rouge_to_ref");
    let detector_cols: Vec<(usize, Detector)> = header
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != id_col && *i != label_col && Some(*i) != rouge_col)
        .map(|(i, h)| h.parse::<Detector>().map(|d| (i, d)))
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let label = match rec.get(label_col).unwrap_or("NA") {
            "NA" | "" => None,
            "0" => Some(0),
            "1" => Some(1),
            other => return Err(invalid("label", format!("expected 0/1, got `{other}`"))),
        };
        let mut scores = BTreeMap::new();
        for &(i, d) in &detector_cols {
            scores.insert(d, parse_opt(rec.get(i).unwrap_or("NA"), d.name())?);
        }
        rows.push(ScoreRow {
            prompt_id: rec.get(id_col).unwrap_or_default().to_string(),
            label,
            rouge_to_ref: match rouge_col {
                Some(i) => parse_opt(rec.get(i).unwrap_or("NA"), "rouge_to_ref")?,
                None => None,
            },
            scores,
        });
    }
    Ok((rows, detector_cols.into_iter().map(|(_, d)| d).collect()))
}

pub fn write_report_csv<W: Write>(report: &EvalReport, sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record([
        "detector", "auroc", "auprc", "f1", "tpr_at_5", "tpr_at_10", "threshold", "n_pos", "n_neg",
    ])?;
    for m in &report.detectors {
        w.write_record([
            m.detector.name().to_string(),
            m.auroc.to_string(),
            m.auprc.to_string(),
            m.f1.to_string(),
            fmt_opt(m.tpr_at(0.05)),
            fmt_opt(m.tpr_at(0.10)),
            m.threshold.to_string(),
            m.n_pos.to_string(),
            m.n_neg.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Fixed-width table for terminals.
pub fn format_report_table(report: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<20} {:>7} {:>7} {:>7} {:>8} {:>8} {:>6} {:>6}",
        "detector", "AUROC", "AUPRC", "F1", "TPR@5%", "TPR@10%", "n_pos", "n_neg"
    );
    for m in &report.detectors {
        let _ = writeln!(
            s,
            "{:<20} {:>7.4} {:>7.4} {:>7.4} {:>8.4} {:>8.4} {:>6} {:>6}",
            m.detector.name(),
            m.auroc,
            m.auprc,
            m.f1,
            m.tpr_at(0.05).unwrap_or(f64::NAN),
            m.tpr_at(0.10).unwrap_or(f64::NAN),
            m.n_pos,
            m.n_neg
        );
    }
    s
}
