//! AUC, Logloss, and training-time ratios.

use std::fmt::Write as _;

use crate::error::{Error, Result};

pub const LOGLOSS_EPS: f64 = 1e-15;

/// Area under the ROC curve, i.e. the Mann–Whitney statistic
/// `P(s⁺ > s⁻) + ½ P(s⁺ = s⁻)`.
///
/// Sorts once and walks tie groups; the pair count is kept in integers so
/// the result is exact up to the final division.
pub fn auc(scores: &[(f64, u8)]) -> Result<f64> {
    if let Some((s, _)) = scores.iter().find(|(s, _)| s.is_nan()) {
        return Err(Error::NonFinite(format!("score {s}")));
    }
    let n_pos = scores.iter().filter(|(_, y)| *y == 1).count() as u128;
    let n_neg = scores.len() as u128 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedAuc);
    }
    let mut sorted: Vec<(f64, u8)> = scores.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));

    // twice the number of correctly ordered pairs, ties counting one
    let mut doubled: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u128, 0u128);
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            if sorted[j].1 == 1 {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        doubled += 2 * pos * neg_below + pos * neg;
        neg_below += neg;
        i = j;
    }
    Ok(doubled as f64 / (2 * n_pos * n_neg) as f64)
}

/// Mean binary cross-entropy with probabilities clamped to `[ε, 1-ε]`.
pub fn logloss(probs: &[(f64, u8)]) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::EmptyInput("logloss of no predictions"));
    }
    let mut total = 0.0;
    for &(p, y) in probs {
        if p.is_nan() {
            return Err(Error::NonFinite("predicted probability".into()));
        }
        let p = p.clamp(LOGLOSS_EPS, 1.0 - LOGLOSS_EPS);
        total -= if y == 1 { p.ln() } else { (1.0 - p).ln() };
    }
    Ok(total / probs.len() as f64)
}

/// `model_seconds / lr_seconds`.
pub fn efficiency_ratio(model_train_seconds: f64, lr_train_seconds: f64) -> Result<f64> {
    if !(model_train_seconds > 0.0 && lr_train_seconds > 0.0) {
        return Err(Error::config(format!(
            "timings must be positive (model {model_train_seconds}s, LR {lr_train_seconds}s)"
        )));
    }
    Ok(model_train_seconds / lr_train_seconds)
}

/// Metrics of one model on one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub model: String,
    pub dataset: String,
    /// `None` when the evaluated labels are single-class.
    pub auc: Option<f64>,
    pub logloss: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub wall_time: f64,
}

impl EvalReport {
    /// Score `predictions` (probability, label).
    pub fn from_predictions(model: &str, dataset: &str, predictions: &[(f64, u8)], wall_time: f64) -> Result<Self> {
        let n_pos = predictions.iter().filter(|(_, y)| *y == 1).count();
        let auc = match auc(predictions) {
            Ok(a) => Some(a),
            Err(Error::UndefinedAuc) => None,
            Err(e) => return Err(e),
        };
        Ok(Self {
            model: model.to_string(),
            dataset: dataset.to_string(),
            auc,
            logloss: logloss(predictions)?,
            n_pos,
            n_neg: predictions.len() - n_pos,
            wall_time,
        })
    }

    /// `tag=value` record. Timing is left out unless asked for so that reruns
    /// produce identical files.
    pub fn to_record(&self, with_timing: bool) -> String {
        let mut s = format!("model={} dataset={} auc={} logloss={:.8} n_pos={} n_neg={}",
            self.model,
            self.dataset,
            self.auc.map_or("NA".to_string(), |a| format!("{a:.8}")),
            self.logloss,
            self.n_pos,
            self.n_neg
        );
        if with_timing {
            let _ = write!(s, " wall_time={:.3}", self.wall_time);
        }
        s
    }
}

/// Fixed-width table with AUC and Logloss columns.
pub fn format_table(reports: &[EvalReport]) -> String {
    let width = reports.iter().map(|r| r.model.len()).max().unwrap_or(5).max(5);
    let mut out = format!("{:<width$}  {:>8}  {:>9}\n", "model", "AUC", "Logloss");
    for r in reports {
        let auc = r.auc.map_or("NA".to_string(), |a| format!("{a:.4}"));
        let _ = writeln!(out, "{:<width$}  {:>8}  {:>9.5}", r.model, auc, r.logloss);
    }
    out
}
