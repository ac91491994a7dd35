//! AUC-ROC evaluation for multi-label taggers, plus the bins-per-kHz
//! frequency-resolution report.
//!
//! Per-tag AUC is the Mann-Whitney statistic with half credit for ties,
//! computed by sorting. The macro score is the unweighted mean over tags
//! that have both classes present; degenerate tags are skipped and counted.

mod report;
mod svg;

pub use report::write_report;
pub use svg::{bar_chart, line_plot, Series};

use std::fmt;

use crate::audio::{mel_bins_per_khz, mel_filterbank, AudioError, FeatureKind, FrontendConfig};

#[derive(Debug)]
pub enum EvalError {
    /// AUC is undefined without at least one positive and one negative.
    SingleClass { n_pos: usize, n_neg: usize },
    /// Every tag in the batch was single-class.
    EmptyReport,
    BadInput(String),
    Audio(AudioError),
}

impl fmt::Display for EvalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalError::SingleClass { n_pos, n_neg } => write!(
                f,
                "auc undefined: {n_pos} positives and {n_neg} negatives"
            ),
            EvalError::EmptyReport => {
                write!(f, "auc undefined for every tag; nothing to average")
            }
            EvalError::BadInput(detail) => write!(f, "bad eval input: {detail}"),
            EvalError::Audio(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for EvalError {}

impl From<AudioError> for EvalError {
    fn from(e: AudioError) -> Self {
        EvalError::Audio(e)
    }
}

/// Scores and binary labels for one tag.
pub struct TagScores {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

impl TagScores {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<TagScores, EvalError> {
        if scores.len() != labels.len() {
            return Err(EvalError::BadInput(format!(
                "{} scores vs {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
            return Err(EvalError::BadInput(format!("non-finite score {s}")));
        }
        Ok(TagScores { scores, labels })
    }

    fn class_counts(&self) -> (usize, usize) {
        let n_pos = self.labels.iter().filter(|&&l| l).count();
        (n_pos, self.labels.len() - n_pos)
    }
}

/// Probability that a random positive outranks a random negative, ties at
/// half credit. Sorting gives O(N log N); ties share their midrank.
pub fn roc_auc(t: &TagScores) -> Result<f64, EvalError> {
    let (n_pos, n_neg) = t.class_counts();
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::SingleClass { n_pos, n_neg });
    }
    let mut idx: Vec<usize> = (0..t.scores.len()).collect();
    idx.sort_by(|&a, &b| t.scores[a].total_cmp(&t.scores[b]));
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && t.scores[idx[j]] == t.scores[idx[i]] {
            j += 1;
        }
        // One-based ranks i+1..=j share their mean.
        let midrank = (i + 1 + j) as f64 / 2.0;
        for &k in &idx[i..j] {
            if t.labels[k] {
                pos_rank_sum += midrank;
            }
        }
        i = j;
    }
    let u = pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AucReport {
    pub per_tag: Vec<Option<f64>>,
    pub n_pos: Vec<usize>,
    pub n_neg: Vec<usize>,
    pub macro_auc: f64,
    pub n_skipped: usize,
}

/// Per-tag AUC over an `n x k` score/label batch and the macro mean over
/// the tags where it is defined.
pub fn macro_auc(scores: &[f32], labels: &[f32], n: usize, k: usize) -> Result<AucReport, EvalError> {
    if scores.len() != n * k || labels.len() != n * k {
        return Err(EvalError::BadInput(format!(
            "want {n}x{k} scores and labels, got {} and {}",
            scores.len(),
            labels.len()
        )));
    }
    let mut per_tag = Vec::with_capacity(k);
    let mut n_pos = Vec::with_capacity(k);
    let mut n_neg = Vec::with_capacity(k);
    let mut sum = 0.0;
    let mut defined = 0usize;
    for tag in 0..k {
        let col_scores: Vec<f64> = (0..n).map(|i| scores[i * k + tag] as f64).collect();
        let col_labels: Vec<bool> = (0..n).map(|i| labels[i * k + tag] > 0.5).collect();
        let t = TagScores::new(col_scores, col_labels)?;
        let (p, q) = t.class_counts();
        n_pos.push(p);
        n_neg.push(q);
        match roc_auc(&t) {
            Ok(a) => {
                sum += a;
                defined += 1;
                per_tag.push(Some(a));
            }
            Err(EvalError::SingleClass { .. }) => per_tag.push(None),
            Err(e) => return Err(e),
        }
    }
    if defined == 0 {
        return Err(EvalError::EmptyReport);
    }
    Ok(AucReport {
        per_tag,
        n_pos,
        n_neg,
        macro_auc: sum / defined as f64,
        n_skipped: k - defined,
    })
}

/// ROC staircase from (0,0) to (1,1), one point per distinct score
/// threshold; tied scores collapse into a single diagonal step.
pub fn roc_curve(t: &TagScores) -> Result<Vec<(f64, f64)>, EvalError> {
    let (n_pos, n_neg) = t.class_counts();
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::SingleClass { n_pos, n_neg });
    }
    let mut idx: Vec<usize> = (0..t.scores.len()).collect();
    idx.sort_by(|&a, &b| t.scores[b].total_cmp(&t.scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && t.scores[idx[j]] == t.scores[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..j] {
            if t.labels[k] {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        points.push((fp as f64 / n_neg as f64, tp as f64 / n_pos as f64));
        i = j;
    }
    Ok(points)
}

pub fn trapezoid_area(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

/// How many band centers fall into each 1 kHz slice of the spectrum, for
/// the mel and linear frontends. Centers on the top edge count toward the
/// band they close.
pub fn bins_per_khz(kind: FeatureKind, cfg: &FrontendConfig) -> Result<Vec<usize>, EvalError> {
    match kind {
        FeatureKind::LogMel => {
            let fb = mel_filterbank(cfg)?;
            Ok(mel_bins_per_khz(&fb, cfg.fmax))
        }
        FeatureKind::LogStft => {
            let bands = (cfg.fmax / 1000.0).ceil() as usize;
            let spacing = cfg.target_rate as f64 / cfg.n_fft as f64;
            let mut counts = vec![0usize; bands];
            for bin in 0..cfg.n_bins() {
                let center = bin as f64 * spacing;
                let band = ((center / 1000.0).floor() as usize).min(bands - 1);
                counts[band] += 1;
            }
            Ok(counts)
        }
        FeatureKind::MfccStack => Err(EvalError::BadInput(
            "cepstral bands have no center frequency; use mel or stft".into(),
        )),
    }
}
