//! Repetition-count metrics, key-frame selection precision/recall, exact
//! match, and attention cost accounting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::flops;

/// Off-by-one accuracy, exact-count accuracy, ground-truth-normalized MAE,
/// and unnormalized RMSE.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountMetrics {
    pub obo: f64,
    pub obz: f64,
    pub mae: f64,
    pub rmse: f64,
}

pub fn count_metrics(predictions: &[f64], truths: &[f64]) -> Result<CountMetrics> {
    if predictions.len() != truths.len() {
        return Err(Error::dim(
            "count_metrics",
            format!("{} predictions for {} ground truths", predictions.len(), truths.len()),
        ));
    }
    if truths.is_empty() {
        return Err(Error::Domain("count metrics need at least one pair".into()));
    }
    if let Some(g) = truths.iter().find(|&&g| g <= 0.0) {
        return Err(Error::Domain(format!(
            "ground-truth count {g} must be positive for MAE"
        )));
    }
    if predictions.iter().any(|&p| p < 0.0 || !p.is_finite()) {
        return Err(Error::Domain("predicted counts must be finite and non-negative".into()));
    }
    let n = truths.len() as f64;
    let mut obo = 0.0;
    let mut obz = 0.0;
    let mut mae = 0.0;
    let mut sq = 0.0;
    for (&p, &g) in predictions.iter().zip(truths) {
        let e = (p - g).abs();
        if e <= 1.0 {
            obo += 1.0;
        }
        if p == g {
            obz += 1.0;
        }
        mae += e / g;
        sq += e * e;
    }
    Ok(CountMetrics {
        obo: obo / n,
        obz: obz / n,
        mae: mae / n,
        rmse: (sq / n).sqrt(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
}

/// Greedy nearest matching: each selected index (in ascending order) claims
/// the nearest still-unmatched truth index within `tolerance` frames (ties
/// to the earlier truth). Empty selections score zero on both axes.
pub fn selection_pr(selected: &[usize], truth: &[usize], tolerance: usize) -> PrecisionRecall {
    if selected.is_empty() {
        return PrecisionRecall {
            precision: 0.0,
            recall: 0.0,
        };
    }
    let mut sel = selected.to_vec();
    sel.sort_unstable();
    let mut used = vec![false; truth.len()];
    let mut hits = 0usize;
    for &s in &sel {
        let best = truth
            .iter()
            .enumerate()
            .filter(|(i, &g)| !used[*i] && s.abs_diff(g) <= tolerance)
            .min_by_key(|(i, &g)| (s.abs_diff(g), *i));
        if let Some((i, _)) = best {
            used[i] = true;
            hits += 1;
        }
    }
    PrecisionRecall {
        precision: hits as f64 / sel.len() as f64,
        recall: if truth.is_empty() {
            0.0
        } else {
            hits as f64 / truth.len() as f64
        },
    }
}

/// Fraction of positions whose whitespace-normalized strings agree.
pub fn exact_match(outputs: &[String], targets: &[String]) -> Result<f64> {
    if outputs.len() != targets.len() {
        return Err(Error::dim(
            "exact_match",
            format!("{} outputs for {} targets", outputs.len(), targets.len()),
        ));
    }
    if outputs.is_empty() {
        return Ok(0.0);
    }
    let norm = |s: &str| s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    let hits = outputs.iter().zip(targets).filter(|(a, b)| norm(a) == norm(b)).count();
    Ok(hits as f64 / outputs.len() as f64)
}

/// Analytic multiply-accumulates of one single-head self-attention core
/// over `len` rows of width `h`: `QKᵀ` and `weights·V` (`len²·h` each)
/// plus one unit per softmax entry.
pub fn attention_macs(len: usize, h: usize) -> u64 {
    let l = len as u64;
    2 * l * l * h as u64 + l * l
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopReport {
    pub text_len: usize,
    pub frames: usize,
    pub k: usize,
    pub hidden: usize,
    pub fused_analytic: u64,
    pub fused_measured: u64,
    pub baseline_analytic: u64,
    pub baseline_measured: u64,
    pub analytic_ratio: f64,
    pub measured_ratio: f64,
}

/// Measured MACs of `run`, which must execute inside an active counter
/// scope; returns a state error otherwise.
pub fn measure_flops(run: impl FnOnce() -> Result<()>) -> Result<u64> {
    let before = flops::current_macs()?;
    run()?;
    Ok(flops::current_macs()? - before)
}

/// Least-squares fit of `y = c·x²` and its coefficient of determination.
pub fn quadratic_fit_r2(lengths: &[usize], counts: &[u64]) -> (f64, f64) {
    let xs: Vec<f64> = lengths.iter().map(|&l| (l * l) as f64).collect();
    let ys: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    let c = xs.iter().zip(&ys).map(|(x, y)| x * y).sum::<f64>() / xs.iter().map(|x| x * x).sum::<f64>();
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let ss_tot: f64 = ys.iter().map(|y| (y - mean).powi(2)).sum();
    let ss_res: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - c * x).powi(2)).sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    (c, r2)
}

/// Everything evaluation needs to know about one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleOutcome {
    pub id: String,
    pub generated: String,
    pub answer: String,
    /// Ground-truth count when the answer is a repetition count.
    pub count_truth: Option<usize>,
    pub frames: usize,
    pub selected: Vec<usize>,
    pub key_frames: Vec<usize>,
    pub nll: f64,
}

/// First whitespace-separated token of `text` that is a non-negative
/// integer.
pub fn parse_count(text: &str) -> Option<f64> {
    text.split_whitespace()
        .find_map(|w| w.parse::<u32>().ok())
        .map(f64::from)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountSummary {
    pub queries: usize,
    /// Generated answers with no parseable count; scored as a prediction
    /// of zero.
    pub unparsed: usize,
    pub metrics: Option<CountMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionSummary {
    pub tolerance: usize,
    pub precision: f64,
    pub recall: f64,
    /// Mean `K / T` over samples, the recall of uniformly random frames
    /// without tolerance.
    pub baseline_recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub samples: usize,
    pub mean_nll: f64,
    pub exact_match: f64,
    pub counting: CountSummary,
    pub selection: SelectionSummary,
}

pub fn summarize(outcomes: &[SampleOutcome], tolerance: usize) -> Result<EvalSummary> {
    if outcomes.is_empty() {
        return Err(Error::Domain("nothing to evaluate".into()));
    }
    let n = outcomes.len() as f64;
    let generated: Vec<String> = outcomes.iter().map(|o| o.generated.clone()).collect();
    let answers: Vec<String> = outcomes.iter().map(|o| o.answer.clone()).collect();

    let mut predictions = Vec::new();
    let mut truths = Vec::new();
    let mut unparsed = 0;
    for o in outcomes {
        if let Some(g) = o.count_truth {
            let p = parse_count(&o.generated).unwrap_or_else(|| {
                unparsed += 1;
                0.0
            });
            predictions.push(p);
            truths.push(g as f64);
        }
    }
    let metrics = if truths.is_empty() {
        None
    } else {
        Some(count_metrics(&predictions, &truths)?)
    };

    let (mut precision, mut recall, mut baseline) = (0.0, 0.0, 0.0);
    for o in outcomes {
        let pr = selection_pr(&o.selected, &o.key_frames, tolerance);
        precision += pr.precision / n;
        recall += pr.recall / n;
        baseline += o.selected.len() as f64 / o.frames.max(1) as f64 / n;
    }
    Ok(EvalSummary {
        samples: outcomes.len(),
        mean_nll: outcomes.iter().map(|o| o.nll).sum::<f64>() / n,
        exact_match: exact_match(&generated, &answers)?,
        counting: CountSummary {
            queries: truths.len(),
            unparsed,
            metrics,
        },
        selection: SelectionSummary {
            tolerance,
            precision,
            recall,
            baseline_recall: baseline,
        },
    })
}
