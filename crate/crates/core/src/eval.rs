//! Accuracy-vs-threshold evaluation of source color prediction on generated datasets.
//!
//! An instruction counts as correct at threshold `t` when the colors predicted with
//! confidence above `t` are nonempty, each matches some ground-truth color, and every
//! ground-truth color is matched. Low thresholds lose to spurious bins, high ones to misses.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::color::{ColorTerm, Rgb8};
use crate::design::DesignBundle;
use crate::instruction::parse_instruction;
use crate::predict::{predict_element, predict_source_colors, PredictConfig, DEFAULT_THRESHOLD, TOP_K};
use crate::synth::{load_dataset, InstructionCase, SynthError};

/// Largest per-channel difference at which a prediction matches a ground-truth color.
pub const MATCH_TOLERANCE: u8 = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub thresholds: Vec<f64>,
    pub tolerance: u8,
    pub top_k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            // 0.05, 0.10, ..., 0.95
            thresholds: (1..=19).map(|i| i as f64 * 0.05).collect(),
            tolerance: MATCH_TOLERANCE,
            top_k: TOP_K,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("dataset has no instructions")]
    EmptyDataset,
    #[error(transparent)]
    Dataset(#[from] SynthError),
}

impl EvalError {
    pub fn code(&self) -> &'static str {
        match self {
            EvalError::EmptyDataset => "empty-dataset",
            EvalError::Dataset(e) => e.code(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub count: usize,
    pub correct: usize,
    pub accuracy: f64,
}

/// Top-prediction quality per annotated element, split by voting rule.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ElementStats {
    pub count: usize,
    pub exact: usize,
    pub within_tolerance: usize,
    /// Mean squared per-channel error of the top prediction, in 8-bit units.
    pub mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cases: usize,
    pub instructions: usize,
    pub tolerance: u8,
    pub curve: Vec<CurvePoint>,
    pub best_threshold: f64,
    pub best_accuracy: f64,
    pub default_threshold: f64,
    pub default_accuracy: f64,
    /// Mean squared per-channel error between each ground-truth color and its nearest prediction.
    pub color_mse: f64,
    pub round_trip_rate: f64,
    pub parse_failures: usize,
    pub by_granularity: BTreeMap<String, GroupStats>,
    pub by_class: BTreeMap<String, GroupStats>,
    pub filled_elements: ElementStats,
    pub text_elements: ElementStats,
}

impl EvalReport {
    /// Plot-ready table: one `threshold<TAB>accuracy` row per curve point.
    pub fn curve_tsv(&self) -> String {
        let mut s = String::from("threshold\taccuracy\n");
        for p in &self.curve {
            let _ = writeln!(s, "{:.2}\t{:.6}", p.threshold, p.accuracy);
        }
        s
    }
}

fn channel_diff(a: Rgb8, b: Rgb8) -> u8 {
    a.to_array().iter().zip(b.to_array()).map(|(x, y)| x.abs_diff(y)).max().unwrap()
}

fn squared_error(a: Rgb8, b: Rgb8) -> f64 {
    a.to_array()
        .iter()
        .zip(b.to_array())
        .map(|(x, y)| (*x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / 3.0
}

/// Whether predictions above `t` match the ground truth exactly as a set, up to `tol`.
pub fn prediction_correct(pred: &[(Rgb8, f64)], gt: &[Rgb8], t: f64, tol: u8) -> bool {
    let kept: Vec<Rgb8> = pred.iter().filter(|(_, c)| *c > t).map(|(p, _)| *p).collect();
    !kept.is_empty()
        && !gt.is_empty()
        && kept.iter().all(|p| gt.iter().any(|g| channel_diff(*p, *g) <= tol))
        && gt.iter().all(|g| kept.iter().any(|p| channel_diff(*p, *g) <= tol))
}

struct Scored {
    class: String,
    granularity: String,
    round_trip: bool,
    parsed: bool,
    preds: Vec<(Rgb8, f64)>,
    gt: Vec<Rgb8>,
}

fn score_instruction(b: &DesignBundle, inst: &InstructionCase, pc: &PredictConfig) -> Scored {
    let parsed = parse_instruction(&inst.text);
    let round_trip = parsed.as_ref().is_ok_and(|a| *a == inst.ast);
    let preds = parsed
        .as_ref()
        .ok()
        .and_then(|a| predict_source_colors(b, &a.source, pc).ok())
        .map(|s| s.colors.iter().map(|c| (c.rgb, c.confidence)).collect())
        .unwrap_or_default();
    Scored {
        class: inst.ast.source.class.as_str().to_string(),
        granularity: inst.granularity.to_string(),
        round_trip,
        parsed: parsed.is_ok(),
        preds,
        gt: inst.gt_source_colors.clone(),
    }
}

fn element_stats(cases: &[(String, DesignBundle, Vec<InstructionCase>)], k: usize) -> (ElementStats, ElementStats) {
    let rows: Vec<(bool, u8, f64)> = cases
        .par_iter()
        .flat_map_iter(|(_, b, _)| {
            b.elements.iter().filter_map(move |e| {
                let gt = e.color?;
                let top = predict_element(b, e, ColorTerm::None, k).ok()?.first()?.rgb;
                Some((e.class.is_text_based(), channel_diff(top, gt), squared_error(top, gt)))
            })
        })
        .collect();
    let mut filled = ElementStats::default();
    let mut text = ElementStats::default();
    for (is_text, d, se) in rows {
        let s = if is_text { &mut text } else { &mut filled };
        s.count += 1;
        s.exact += (d == 0) as usize;
        s.within_tolerance += (d <= MATCH_TOLERANCE) as usize;
        s.mse += se;
    }
    for s in [&mut filled, &mut text] {
        if s.count > 0 {
            s.mse /= s.count as f64;
        }
    }
    (filled, text)
}

fn ratio(n: usize, d: usize) -> f64 {
    if d == 0 { 0.0 } else { n as f64 / d as f64 }
}

/// Evaluates loaded cases. Predictions are made once with threshold 0, then swept.
pub fn evaluate_cases(
    cases: &[(String, DesignBundle, Vec<InstructionCase>)],
    cfg: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    let pc = PredictConfig {
        threshold: 0.0,
        top_k: cfg.top_k,
    };
    let scored: Vec<Scored> = cases
        .par_iter()
        .flat_map_iter(|(_, b, insts)| insts.iter().map(|i| score_instruction(b, i, &pc)).collect::<Vec<_>>())
        .collect();
    if scored.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let n = scored.len();
    let acc_at = |t: f64| ratio(scored.iter().filter(|s| prediction_correct(&s.preds, &s.gt, t, cfg.tolerance)).count(), n);
    let curve: Vec<CurvePoint> = cfg
        .thresholds
        .iter()
        .map(|&t| CurvePoint {
            threshold: t,
            accuracy: acc_at(t),
        })
        .collect();
    // First maximum, so a plateau reports its lowest threshold.
    let best = curve
        .iter()
        .fold(None::<&CurvePoint>, |b, p| match b {
            Some(b) if b.accuracy >= p.accuracy => Some(b),
            _ => Some(p),
        })
        .cloned()
        .unwrap_or(CurvePoint {
            threshold: DEFAULT_THRESHOLD,
            accuracy: acc_at(DEFAULT_THRESHOLD),
        });
    let mut se = 0.0;
    let mut se_n = 0usize;
    for s in &scored {
        for g in &s.gt {
            let nearest = s.preds.iter().map(|(p, _)| squared_error(*p, *g)).fold(f64::INFINITY, f64::min);
            if nearest.is_finite() {
                se += nearest;
                se_n += 1;
            }
        }
    }
    let mut by_granularity: BTreeMap<String, GroupStats> = BTreeMap::new();
    let mut by_class: BTreeMap<String, GroupStats> = BTreeMap::new();
    for s in &scored {
        let ok = prediction_correct(&s.preds, &s.gt, DEFAULT_THRESHOLD, cfg.tolerance);
        for (map, key) in [(&mut by_granularity, &s.granularity), (&mut by_class, &s.class)] {
            let g = map.entry(key.clone()).or_default();
            g.count += 1;
            g.correct += ok as usize;
        }
    }
    for g in by_granularity.values_mut().chain(by_class.values_mut()) {
        g.accuracy = ratio(g.correct, g.count);
    }
    let (filled_elements, text_elements) = element_stats(cases, cfg.top_k);
    Ok(EvalReport {
        cases: cases.len(),
        instructions: n,
        tolerance: cfg.tolerance,
        best_threshold: best.threshold,
        best_accuracy: best.accuracy,
        curve,
        default_threshold: DEFAULT_THRESHOLD,
        default_accuracy: acc_at(DEFAULT_THRESHOLD),
        color_mse: if se_n == 0 { f64::NAN } else { se / se_n as f64 },
        round_trip_rate: ratio(scored.iter().filter(|s| s.round_trip).count(), n),
        parse_failures: scored.iter().filter(|s| !s.parsed).count(),
        by_granularity,
        by_class,
        filled_elements,
        text_elements,
    })
}

pub fn evaluate_dataset(dir: &Path, cfg: &EvalConfig) -> Result<EvalReport, EvalError> {
    let cases = load_dataset(dir)?;
    evaluate_cases(&cases, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_cases, DegradeConfig, GeneratorConfig};

    fn loaded(cfg: &GeneratorConfig) -> Vec<(String, DesignBundle, Vec<InstructionCase>)> {
        generate_cases(cfg)
            .unwrap()
            .into_iter()
            .map(|c| (format!("{}", c.index), c.bundle, c.instructions))
            .collect()
    }

    #[test]
    fn set_match_rule() {
        let r = Rgb8::new(200, 10, 10);
        let b = Rgb8::new(10, 10, 200);
        let near_r = Rgb8::new(206, 4, 10);
        assert!(prediction_correct(&[(near_r, 1.0)], &[r], 0.5, 6));
        assert!(!prediction_correct(&[(Rgb8::new(207, 10, 10), 1.0)], &[r], 0.5, 6));
        // A spurious color above the threshold fails; below it is ignored.
        assert!(!prediction_correct(&[(r, 1.0), (b, 0.3)], &[r], 0.2, 0));
        assert!(prediction_correct(&[(r, 1.0), (b, 0.3)], &[r], 0.3, 0));
        // Every ground-truth color must be covered.
        assert!(!prediction_correct(&[(r, 1.0)], &[r, b], 0.5, 0));
        assert!(!prediction_correct(&[], &[r], 0.0, 0));
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let e = evaluate_cases(&[], &EvalConfig::default()).unwrap_err();
        assert_eq!(e.code(), "empty-dataset");
    }

    #[test]
    fn clean_data_is_exact() {
        let cfg = GeneratorConfig {
            seed: 2,
            count: 30,
            ..GeneratorConfig::default()
        };
        let r = evaluate_cases(&loaded(&cfg), &EvalConfig::default()).unwrap();
        assert_eq!(r.filled_elements.mse, 0.0);
        assert_eq!(r.filled_elements.exact, r.filled_elements.count);
        assert_eq!(r.round_trip_rate, 1.0);
        assert_eq!(r.color_mse, 0.0);
        for p in r.curve.iter().filter(|p| p.threshold <= 0.9) {
            assert!(p.accuracy >= 0.99, "{p:?}");
        }
        assert_eq!(r.curve_tsv().lines().count(), 20);
    }

    #[test]
    fn degraded_data_reports_finite_mse() {
        let cfg = GeneratorConfig {
            seed: 2,
            count: 20,
            degrade: Some(DegradeConfig {
                strength: 1.0,
                gradient: true,
            }),
            ..GeneratorConfig::default()
        };
        let r = evaluate_cases(&loaded(&cfg), &EvalConfig::default()).unwrap();
        assert!(r.color_mse.is_finite() && r.color_mse > 0.0);
        assert!(r.curve.iter().any(|p| p.threshold == r.best_threshold && p.accuracy == r.best_accuracy));
        assert!(r.curve.iter().all(|p| p.accuracy <= r.best_accuracy));
    }
}
