// SPDX-License-Identifier: Apache-2.0

//! Confusion matrices, precision/recall/F1, rank-based ROC-AUC and
//! stratified k-fold cross-validation.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("label `{0}` is not in the class list")]
    UnknownLabel(String),
    #[error("{left} truths vs {right} predictions")]
    LengthMismatch { left: usize, right: usize },
    #[error("AUC needs both classes")]
    SingleClassInput,
    #[error("class `{class}` has {count} members, fewer than {k} folds")]
    TooFewSamples {
        class: String,
        count: usize,
        k: usize,
    },
    #[error("k must be at least 2, got {0}")]
    BadFoldCount(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<String>,
    /// `counts[i][j]`: true class `i` predicted as `j`.
    pub counts: Vec<Vec<u64>>,
}

pub fn confusion_matrix<L: PartialEq + fmt::Display>(
    truth: &[L],
    pred: &[L],
    classes: &[L],
) -> Result<ConfusionMatrix, EvalError> {
    if truth.len() != pred.len() {
        return Err(EvalError::LengthMismatch {
            left: truth.len(),
            right: pred.len(),
        });
    }
    let pos = |l: &L| {
        classes
            .iter()
            .position(|c| c == l)
            .ok_or_else(|| EvalError::UnknownLabel(l.to_string()))
    };
    let mut counts = vec![vec![0u64; classes.len()]; classes.len()];
    for (t, p) in truth.iter().zip(pred) {
        counts[pos(t)?][pos(p)?] += 1;
    }
    Ok(ConfusionMatrix {
        classes: classes.iter().map(|c| c.to_string()).collect(),
        counts,
    })
}

impl ConfusionMatrix {
    /// Builds a matrix directly from counts.
    pub fn from_counts(classes: Vec<String>, counts: Vec<Vec<u64>>) -> Self {
        assert!(counts.len() == classes.len() && counts.iter().all(|r| r.len() == classes.len()));
        Self { classes, counts }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sum(&self, i: usize) -> u64 {
        self.counts[i].iter().sum()
    }

    pub fn col_sum(&self, j: usize) -> u64 {
        self.counts.iter().map(|r| r[j]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.trace(), self.total()).0
    }
}

impl fmt::Display for ConfusionMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let w = self
            .classes
            .iter()
            .map(|c| c.len())
            .max()
            .unwrap_or(0)
            .max(8);
        write!(f, "{:>w$}", "true\\pred")?;
        for c in &self.classes {
            write!(f, " {c:>w$}")?;
        }
        writeln!(f)?;
        for (c, row) in self.classes.iter().zip(&self.counts) {
            write!(f, "{c:>w$}")?;
            for n in row {
                write!(f, " {n:>w$}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub class: String,
    /// Percentages in [0, 100].
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: u64,
    pub support: u64,
    /// Set when a zero denominator forced the value to 0.
    pub precision_undefined: bool,
    pub recall_undefined: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CvSummary {
    pub k: usize,
    pub fold_scores: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (n - 1).
    pub std: f64,
}

impl fmt::Display for CvSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4} ± {:.4}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub classes: Vec<ClassMetrics>,
    pub correct: u64,
    pub total: u64,
    pub accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cv: Option<CvSummary>,
}

pub fn prf_metrics(cm: &ConfusionMatrix) -> MetricsReport {
    let classes = cm
        .classes
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let tp = cm.counts[i][i];
            let (p, p_undef) = ratio(tp, cm.col_sum(i));
            let (r, r_undef) = ratio(tp, cm.row_sum(i));
            let f1 = if p + r > 0.0 {
                2.0 * p * r / (p + r)
            } else {
                0.0
            };
            ClassMetrics {
                class: name.clone(),
                precision: 100.0 * p,
                recall: 100.0 * r,
                f1: 100.0 * f1,
                tp,
                support: cm.row_sum(i),
                precision_undefined: p_undef,
                recall_undefined: r_undef,
            }
        })
        .collect();
    MetricsReport {
        classes,
        correct: cm.trace(),
        total: cm.total(),
        accuracy: cm.accuracy(),
        auc: None,
        cv: None,
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let w = self
            .classes
            .iter()
            .map(|c| c.class.len())
            .max()
            .unwrap_or(5)
            .max(5);
        writeln!(
            f,
            "{:<w$} {:>12} {:>9} {:>7} {:>7}",
            "Class", "Precision(%)", "Recall(%)", "F1(%)", "TP"
        )?;
        for c in &self.classes {
            writeln!(
                f,
                "{:<w$} {:>12.2} {:>9.2} {:>7.2} {:>7}",
                c.class, c.precision, c.recall, c.f1, c.tp
            )?;
        }
        writeln!(
            f,
            "Overall accuracy {:.2}% ({} / {})",
            100.0 * self.accuracy,
            self.correct,
            self.total
        )?;
        if let Some(auc) = self.auc {
            writeln!(f, "AUC {auc:.4}")?;
        }
        if let Some(cv) = &self.cv {
            writeln!(f, "{}-fold CV accuracy {cv}", cv.k)?;
        }
        Ok(())
    }
}

/// Mann-Whitney AUC with average ranks for ties.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            left: labels.len(),
            right: scores.len(),
        });
    }
    let n_pos = labels.iter().filter(|&&b| b).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::SingleClassInput);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j averaged
        let avg = (i + 1 + j) as f64 / 2.0;
        let pos_in_run = order[i..j].iter().filter(|&&k| labels[k]).count();
        rank_sum_pos += avg * pos_in_run as f64;
        i = j;
    }
    let n_pos_f = n_pos as f64;
    Ok((rank_sum_pos - n_pos_f * (n_pos_f + 1.0) / 2.0) / (n_pos_f * n_neg as f64))
}

/// Stratified, shuffled fold assignment. Within each class the members are
/// shuffled and dealt round-robin, starting where the previous class left
/// off, so fold sizes and per-fold class counts differ by at most one.
pub fn stratified_folds<C: Ord + Clone + fmt::Display>(
    classes: &[C],
    k: usize,
    seed: u64,
) -> Result<Vec<usize>, EvalError> {
    if k < 2 {
        return Err(EvalError::BadFoldCount(k));
    }
    let mut distinct: Vec<C> = classes.to_vec();
    distinct.sort();
    distinct.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold = vec![0usize; classes.len()];
    let mut next = 0usize;
    for c in distinct {
        let mut members: Vec<usize> = (0..classes.len()).filter(|&i| classes[i] == c).collect();
        if members.len() < k {
            return Err(EvalError::TooFewSamples {
                class: c.to_string(),
                count: members.len(),
                k,
            });
        }
        members.shuffle(&mut rng);
        for m in members {
            fold[m] = next % k;
            next += 1;
        }
    }
    Ok(fold)
}

/// Runs `score(train, validation)` once per fold and summarizes.
pub fn kfold_cv<C, F>(
    classes: &[C],
    k: usize,
    seed: u64,
    mut score: F,
) -> Result<CvSummary, EvalError>
where
    C: Ord + Clone + fmt::Display,
    F: FnMut(&[usize], &[usize]) -> f64,
{
    let folds = stratified_folds(classes, k, seed)?;
    let fold_scores: Vec<f64> = (0..k)
        .map(|f| {
            let (val, train): (Vec<usize>, Vec<usize>) =
                (0..classes.len()).partition(|&i| folds[i] == f);
            score(&train, &val)
        })
        .collect();
    Ok(summarize(k, fold_scores))
}

pub fn summarize(k: usize, fold_scores: Vec<f64>) -> CvSummary {
    let n = fold_scores.len() as f64;
    let mean = fold_scores.iter().sum::<f64>() / n;
    let var = if fold_scores.len() > 1 {
        fold_scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    CvSummary {
        k,
        fold_scores,
        mean,
        std: var.sqrt(),
    }
}
