//! End-to-end spotting metrics with and without a full lexicon.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Polygon, DEFAULT_RASTER_SCALE};
use crate::synth::{Lexicon, TextInstance};
use crate::training::greedy_match;

/// One spotted word.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub polygon: Polygon,
    pub text: String,
    pub confidence: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LexiconMode {
    None,
    /// Predictions are corrected to the nearest word before matching.
    Full(Lexicon),
}

impl LexiconMode {
    pub fn full(lexicon: Lexicon) -> Result<Self> {
        if lexicon.is_empty() {
            return Err(Error::Input("full lexicon mode needs a non-empty lexicon".into()));
        }
        Ok(LexiconMode::Full(lexicon))
    }

    pub fn name(&self) -> &'static str {
        match self {
            LexiconMode::None => "none",
            LexiconMode::Full(_) => "full",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalResult {
    pub mode: String,
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
    pub n_matched: usize,
    pub n_pred: usize,
    pub n_gt: usize,
}

impl EvalResult {
    pub fn from_counts(mode: &str, n_matched: usize, n_pred: usize, n_gt: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(n_matched, n_pred);
        let recall = ratio(n_matched, n_gt);
        let f_measure = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        EvalResult {
            mode: mode.to_string(),
            precision,
            recall,
            f_measure,
            n_matched,
            n_pred,
            n_gt,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("result serializes")
    }
}

/// Levenshtein distance over chars with unit costs.
pub fn edit_distance(a: &str, b: &str) -> usize {
    let b: Vec<char> = b.chars().collect();
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, ca) in a.chars().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let next = (diag + usize::from(ca != cb)).min(row[j] + 1).min(row[j + 1] + 1);
            diag = row[j + 1];
            row[j + 1] = next;
        }
    }
    row[b.len()]
}

/// Nearest lexicon word to the lowercased prediction; ties go to the
/// lexicographically smallest word.
pub fn lexicon_correct(pred: &str, lexicon: &Lexicon) -> String {
    let p = pred.to_lowercase();
    lexicon
        .words()
        .iter()
        .map(|w| (edit_distance(&p, w), w))
        .min()
        .map_or(p.clone(), |(_, w)| w.clone())
}

fn normalize(text: &str, mode: &LexiconMode) -> String {
    match mode {
        LexiconMode::None => text.to_lowercase(),
        LexiconMode::Full(lex) => lexicon_correct(text, lex),
    }
}

/// Greedy confidence-ordered matching per image where a pair counts only
/// if the polygons overlap by `iou_match` and the transcriptions agree.
pub fn evaluate_end_to_end(
    predictions: &[Vec<Prediction>],
    gts: &[Vec<TextInstance>],
    mode: &LexiconMode,
    iou_match: f64,
) -> Result<EvalResult> {
    if predictions.len() != gts.len() {
        return Err(Error::Input(format!(
            "{} prediction lists for {} images",
            predictions.len(),
            gts.len()
        )));
    }
    let (mut matched, mut n_pred, mut n_gt) = (0, 0, 0);
    for (preds, truth) in predictions.iter().zip(gts) {
        let texts: Vec<String> = preds.iter().map(|p| normalize(&p.text, mode)).collect();
        let want: Vec<String> = truth.iter().map(|g| g.text.to_lowercase()).collect();
        let polys: Vec<Polygon> = preds.iter().map(|p| p.polygon.clone()).collect();
        let conf: Vec<f64> = preds.iter().map(|p| p.confidence).collect();
        let gpolys: Vec<Polygon> = truth.iter().map(|g| g.region.polygon()).collect();
        let m = greedy_match(&polys, &conf, &gpolys, iou_match, DEFAULT_RASTER_SCALE, |c, g| {
            texts[c] == want[g]
        });
        matched += m.iter().filter(|a| a.is_some()).count();
        n_pred += preds.len();
        n_gt += truth.len();
    }
    Ok(EvalResult::from_counts(mode.name(), matched, n_pred, n_gt))
}
