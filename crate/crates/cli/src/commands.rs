use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use halluguard::bound_lab::{decomposition_crossover, simulate_empirical_risk, BoundParams};
use halluguard::bundle::ValidationReport;
use halluguard::eval::{
    evaluate_rows, fit_z_calibration, format_report_table, read_score_csv, score_dataset_with, score_rows,
    write_report_csv, write_score_csv, EvalConfig, ScoreRow, ThresholdMode,
};
use halluguard::tiny_lm::exact_amplification;
use halluguard::{read_bundle, validate_bundle, AmplificationEstimate, Detector, TrajectoryBundle};

use crate::args::{invalid, ScoringArgs};

pub const BUNDLE_EXT: &str = "hgb";

pub fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p)
                .map_err(halluguard::Error::from)
                .with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

/// Expands directories to their `*.hgb` files, sorted by name.
pub fn bundle_paths(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut files: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(halluguard::Error::from)
                .with_context(|| format!("listing {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == BUNDLE_EXT))
                .collect();
            files.sort();
            out.extend(files);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

pub fn load_bundle(path: &Path) -> Result<TrajectoryBundle> {
    let f = File::open(path)
        .map_err(halluguard::Error::from)
        .with_context(|| format!("opening {}", path.display()))?;
    Ok(read_bundle(&mut BufReader::new(f)).with_context(|| format!("reading {}", path.display()))?)
}

/// Loads bundles and orders them by prompt id.
pub fn load_bundles(inputs: &[PathBuf]) -> Result<Vec<TrajectoryBundle>> {
    let mut ds = bundle_paths(inputs)?
        .iter()
        .map(|p| load_bundle(p))
        .collect::<Result<Vec<_>>>()?;
    if ds.is_empty() {
        return Err(invalid("bundles", "no bundle files given").into());
    }
    ds.sort_by(|a, b| a.prompt_id.cmp(&b.prompt_id));
    Ok(ds)
}

fn exact_amps(
    ds: &[TrajectoryBundle],
    args: &ScoringArgs,
    seed: u64,
) -> Result<Option<Vec<Option<AmplificationEstimate>>>> {
    let Some(model) = args.spectral.exact_model()? else {
        return Ok(None);
    };
    let pi = args.spectral.power(seed);
    Ok(Some(ds.iter().map(|b| exact_amplification(&model, b, &pi).ok()).collect()))
}

/// Scores bundles in prompt-id order, fitting z-calibration first when asked.
pub fn score_bundles(
    ds: &[TrajectoryBundle],
    args: &ScoringArgs,
    seed: u64,
    threshold: ThresholdMode,
) -> Result<(Vec<ScoreRow>, Vec<Detector>, EvalConfig)> {
    let detectors = args.detectors.list()?;
    let mut cfg = args.eval_config(threshold);
    if !args.calibrate_on.is_empty() {
        let cal = load_bundles(&args.calibrate_on)?;
        let amps = exact_amps(&cal, args, seed)?;
        let scores = score_dataset_with(&cal, &[Detector::HalluGuard], &cfg, amps.as_deref())?;
        let triples: Vec<_> = scores.iter().filter_map(|s| s.components).collect();
        cfg.detector.calibration = Some(fit_z_calibration(&triples).context("fitting calibration")?);
    }
    let amps = exact_amps(ds, args, seed)?;
    let scores = score_dataset_with(ds, &detectors, &cfg, amps.as_deref())?;
    let rows = score_rows(ds, &scores, cfg.tau_r)?;
    Ok((rows, detectors, cfg))
}

pub fn score(inputs: &[PathBuf], args: &ScoringArgs, seed: u64, out: Option<&Path>) -> Result<()> {
    let ds = load_bundles(inputs)?;
    let (rows, detectors, _) = score_bundles(&ds, args, seed, ThresholdMode::MatchPrevalence)?;
    let mut w = output(out)?;
    writeln!(w, "# seed={seed}")?;
    write_score_csv(&rows, &detectors, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn eval(
    inputs: &[PathBuf],
    scores_csv: Option<&Path>,
    args: &ScoringArgs,
    threshold: ThresholdMode,
    seed: u64,
    report: Option<&Path>,
) -> Result<()> {
    let (rows, detectors) = match scores_csv {
        Some(p) => {
            let f = File::open(p)
                .map_err(halluguard::Error::from)
                .with_context(|| format!("opening {}", p.display()))?;
            let (mut rows, dets) = read_score_csv(BufReader::new(f)).with_context(|| format!("reading {}", p.display()))?;
            rows.sort_by(|a, b| a.prompt_id.cmp(&b.prompt_id));
            (rows, dets)
        }
        None => {
            let ds = load_bundles(inputs)?;
            let (rows, dets, _) = score_bundles(&ds, args, seed, threshold)?;
            (rows, dets)
        }
    };
    let rep = evaluate_rows(&rows, &detectors, threshold)?;
    let mut stdout = io::stdout().lock();
    writeln!(stdout, "# seed={seed} n={}", rows.len())?;
    write!(stdout, "{}", format_report_table(&rep))?;
    if let Some(path) = report {
        let mut w = output(Some(path))?;
        writeln!(w, "# seed={seed}")?;
        write_report_csv(&rep, &mut w)?;
        w.flush()?;
    }
    Ok(())
}

pub fn simulate_bound(
    params: Option<&Path>,
    t_min: u32,
    t_max: u32,
    noise: f64,
    seed: u64,
    out: Option<&Path>,
) -> Result<()> {
    let p = match params {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(halluguard::Error::from)
                .with_context(|| format!("reading {}", path.display()))?;
            BoundParams::parse(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => BoundParams::default(),
    };
    if t_min > t_max {
        return Err(invalid("t_range", format!("t-min {t_min} exceeds t-max {t_max}")).into());
    }
    let ts: Vec<u32> = (t_min..=t_max).collect();
    let points = simulate_empirical_risk(&p, noise, seed, &ts)?;
    let crossover = decomposition_crossover(&p, &ts)?;
    let mut w = output(out)?;
    writeln!(
        w,
        "# seed={seed} crossover_T={}",
        crossover.map_or_else(|| "none".to_string(), |t| t.to_string())
    )?;
    let mut csv = csv::Writer::from_writer(&mut w);
    csv.write_record(["T", "data_term", "reasoning_term", "bound", "empirical"])?;
    for pt in points {
        csv.write_record([
            pt.t.to_string(),
            pt.data_term.to_string(),
            pt.reasoning_term.to_string(),
            pt.bound.to_string(),
            pt.empirical.to_string(),
        ])?;
    }
    csv.flush()?;
    drop(csv);
    w.flush()?;
    Ok(())
}

/// Returns the number of files that failed to read or validate.
pub fn bundle_validate(inputs: &[PathBuf]) -> Result<usize> {
    let mut bad = 0;
    let mut out = io::stdout().lock();
    for p in bundle_paths(inputs)? {
        match load_bundle(&p) {
            Ok(b) => {
                let ValidationReport { violations } = validate_bundle(&b);
                if violations.is_empty() {
                    writeln!(out, "{}: ok", p.display())?;
                } else {
                    bad += 1;
                    for v in violations {
                        writeln!(out, "{}: {v}", p.display())?;
                    }
                }
            }
            Err(e) => {
                bad += 1;
                writeln!(out, "{}: {e:#}", p.display())?;
            }
        }
    }
    Ok(bad)
}

pub fn bundle_inspect(path: &Path) -> Result<()> {
    let b = load_bundle(path)?;
    let mut out = io::stdout().lock();
    writeln!(out, "prompt_id: {}", b.prompt_id)?;
    writeln!(out, "prompt_text: {:?}", b.prompt_text)?;
    writeln!(out, "references: {:?}", b.references)?;
    writeln!(out, "K: {}", b.k())?;
    writeln!(out, "embed_dim: {}", b.embed_dim)?;
    writeln!(out, "label: {}", b.label.map_or_else(|| "NA".into(), |l| l.to_string()))?;
    writeln!(
        out,
        "rouge_to_ref: {}",
        b.rouge_to_ref.map_or_else(|| "NA".into(), |r| r.to_string())
    )?;
    for (k, v) in &b.meta {
        writeln!(out, "meta.{k}: {v}")?;
    }
    for (i, g) in b.generations.iter().enumerate() {
        let nll: f32 = -g.logprob.iter().sum::<f32>();
        writeln!(
            out,
            "gen {i}: T={} states={} nll={nll:.4} text={:?}",
            g.len(),
            if g.step_states.is_some() { "yes" } else { "no" },
            g.text
        )?;
    }
    let report = validate_bundle(&b);
    writeln!(out, "valid: {}", report.ok())?;
    Ok(())
}
