//! Maximum-likelihood classification, majority-vote fusion and metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hmm::FeatureSequence;
use crate::model::HmmModel;
use crate::numerics::RngStream;
use crate::par;

/// One model per class.
#[derive(Debug, Clone)]
pub struct ClassifierBank {
    labels: Vec<String>,
    models: Vec<HmmModel>,
}

impl ClassifierBank {
    pub fn new(labels: Vec<String>, models: Vec<HmmModel>) -> Result<Self> {
        if labels.is_empty() || labels.len() != models.len() {
            return Err(Error::shape(format!(
                "{} labels for {} models",
                labels.len(),
                models.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = labels.iter().find(|l| !seen.insert(*l)) {
            return Err(Error::invalid(format!("duplicate class label '{dup}'")));
        }
        let d = models[0].dim();
        if models.iter().any(|m| m.dim() != d) {
            return Err(Error::shape("class models disagree on feature dimension"));
        }
        Ok(Self { labels, models })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn models(&self) -> &[HmmModel] {
        &self.models
    }

    pub fn dim(&self) -> usize {
        self.models[0].dim()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// Per-class raw log-likelihoods.
    pub scores: Vec<f64>,
    pub label: usize,
    /// Another class scored exactly as high as `label`.
    pub tie: bool,
}

impl Prediction {
    /// Argmax with exact ties going to the lowest index.
    pub fn from_scores(scores: Vec<f64>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::Empty("class scores"));
        }
        if let Some(c) = scores.iter().position(|s| s.is_nan()) {
            return Err(Error::NonFinite(format!("score of class {c}")));
        }
        let mut label = 0;
        for (c, &s) in scores.iter().enumerate() {
            if s > scores[label] {
                label = c;
            }
        }
        let tie = scores.iter().enumerate().any(|(c, &s)| c != label && s == scores[label]);
        Ok(Self { scores, label, tie })
    }
}

/// Scores `seq` under every class model and takes the argmax.
pub fn classify(bank: &ClassifierBank, seq: &FeatureSequence) -> Result<Prediction> {
    let scores = bank
        .models
        .iter()
        .map(|m| m.log_likelihood(seq))
        .collect::<Result<Vec<_>>>()?;
    Prediction::from_scores(scores)
}

/// [`classify`] over many sequences, in parallel, results in input order.
pub fn classify_all(bank: &ClassifierBank, data: &[FeatureSequence]) -> Result<Vec<Prediction>> {
    par::try_map(data, |x| classify(bank, x))
}

/// Majority label if any label has at least two votes, otherwise a
/// uniformly random choice among the distinct labels.
pub fn vote(labels: &[usize], rng: &mut RngStream) -> Result<usize> {
    if labels.len() < 2 {
        return Err(Error::invalid("voting needs at least two predictions"));
    }
    let mut distinct: Vec<usize> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    for &l in labels {
        match distinct.iter().position(|d| *d == l) {
            Some(i) => counts[i] += 1,
            None => {
                distinct.push(l);
                counts.push(1);
            }
        }
    }
    let best = *counts.iter().max().expect("non-empty");
    if best >= 2 {
        let winners: Vec<usize> = (0..distinct.len()).filter(|&i| counts[i] == best).collect();
        if winners.len() == 1 {
            return Ok(distinct[winners[0]]);
        }
        return Ok(distinct[winners[rng.below(winners.len())]]);
    }
    Ok(distinct[rng.below(distinct.len())])
}

/// Each count divided by the largest count.
pub fn sample_ratio(counts: &[usize]) -> Result<Vec<f64>> {
    let max = counts.iter().copied().max().unwrap_or(0);
    if max == 0 {
        return Err(Error::invalid("sample ratio needs a class with a positive count"));
    }
    Ok(counts.iter().map(|&c| c as f64 / max as f64).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub total: usize,
    pub per_class: Vec<ClassMetrics>,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
    /// `confusion[truth][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

/// Accuracy, per-class and support-weighted precision/recall/F1, and the
/// confusion matrix. Undefined ratios count as 0.
pub fn evaluate(predicted: &[usize], truth: &[usize], labels: &[String]) -> Result<EvalReport> {
    if predicted.len() != truth.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} reference labels",
            predicted.len(),
            truth.len()
        )));
    }
    if predicted.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let c = labels.len();
    if let Some(bad) = predicted.iter().chain(truth).find(|&&l| l >= c) {
        return Err(Error::invalid(format!("label index {bad} outside {c} classes")));
    }
    let mut confusion = vec![vec![0usize; c]; c];
    for (&p, &t) in predicted.iter().zip(truth) {
        confusion[t][p] += 1;
    }
    let total = truth.len();
    let correct: usize = (0..c).map(|i| confusion[i][i]).sum();
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let per_class: Vec<ClassMetrics> = (0..c)
        .map(|i| {
            let tp = confusion[i][i];
            let support: usize = confusion[i].iter().sum();
            let predicted_i: usize = (0..c).map(|t| confusion[t][i]).sum();
            let precision = ratio(tp, predicted_i);
            let recall = ratio(tp, support);
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassMetrics {
                label: labels[i].clone(),
                precision,
                recall,
                f1,
                support,
            }
        })
        .collect();
    let weighted = |f: fn(&ClassMetrics) -> f64| -> f64 {
        per_class.iter().map(|m| f(m) * m.support as f64).sum::<f64>() / total as f64
    };
    Ok(EvalReport {
        accuracy: ratio(correct, total),
        total,
        weighted_precision: weighted(|m| m.precision),
        weighted_recall: weighted(|m| m.recall),
        weighted_f1: weighted(|m| m.f1),
        per_class,
        confusion,
    })
}

impl EvalReport {
    /// Plain-text table; per-class rows when `by_class`.
    pub fn to_table(&self, by_class: bool) -> String {
        let mut s = String::new();
        s.push_str(&format!("accuracy\t{:.6}\t({} utterances)\n", self.accuracy, self.total));
        s.push_str(&format!(
            "weighted\tP={:.6}\tR={:.6}\tF1={:.6}\n",
            self.weighted_precision, self.weighted_recall, self.weighted_f1
        ));
        if by_class {
            s.push_str("label\tprecision\trecall\tf1\tsupport\n");
            for m in &self.per_class {
                s.push_str(&format!(
                    "{}\t{:.6}\t{:.6}\t{:.6}\t{}\n",
                    m.label, m.precision, m.recall, m.f1, m.support
                ));
            }
            s.push_str("confusion (rows = truth)\n");
            for row in &self.confusion {
                let cells: Vec<String> = row.iter().map(usize::to_string).collect();
                s.push_str(&cells.join("\t"));
                s.push('\n');
            }
        }
        s
    }
}
