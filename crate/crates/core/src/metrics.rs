//! Precision/recall/F1 reporting over a label set.

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub label: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub per_class: Vec<ClassMetrics>,
    /// confusion[gold][pred]
    pub confusion: Vec<Vec<usize>>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub accuracy: f64,
}

impl EvalReport {
    /// Macro values average over classes with support > 0 only, so absent
    /// classes cannot zero out the mean.
    pub fn from_pairs(gold: &[usize], pred: &[usize], num_classes: usize) -> Result<EvalReport> {
        if gold.is_empty() {
            return Err(Error::Data("empty evaluation split".into()));
        }
        if gold.len() != pred.len() {
            return Err(Error::Data(format!(
                "gold/pred length mismatch: {} vs {}",
                gold.len(),
                pred.len()
            )));
        }
        let mut confusion = vec![vec![0usize; num_classes]; num_classes];
        for (&g, &p) in gold.iter().zip(pred) {
            if g >= num_classes || p >= num_classes {
                return Err(Error::Data(format!(
                    "label out of range: gold {g}, pred {p}, classes {num_classes}"
                )));
            }
            confusion[g][p] += 1;
        }

        let mut per_class = Vec::with_capacity(num_classes);
        for c in 0..num_classes {
            let tp = confusion[c][c];
            let fn_ = confusion[c].iter().sum::<usize>() - tp;
            let fp = (0..num_classes).map(|g| confusion[g][c]).sum::<usize>() - tp;
            let support = tp + fn_;
            let precision = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
            let recall = if support > 0 { tp as f64 / support as f64 } else { 0.0 };
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            per_class.push(ClassMetrics {
                label: c,
                precision,
                recall,
                f1,
                support,
                tp,
                fp,
                fn_,
            });
        }

        let live: Vec<&ClassMetrics> = per_class.iter().filter(|m| m.support > 0).collect();
        let mean = |f: &dyn Fn(&ClassMetrics) -> f64| {
            live.iter().map(|m| f(m)).sum::<f64>() / live.len().max(1) as f64
        };
        let correct: usize = (0..num_classes).map(|c| confusion[c][c]).sum();
        Ok(EvalReport {
            macro_precision: mean(&|m| m.precision),
            macro_recall: mean(&|m| m.recall),
            macro_f1: mean(&|m| m.f1),
            accuracy: correct as f64 / gold.len() as f64,
            per_class,
            confusion,
        })
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str("label  precision  recall     f1     support\n");
        for m in &self.per_class {
            out.push_str(&format!(
                "{:>5}  {:>9.4}  {:>6.4}  {:>6.4}  {:>7}\n",
                m.label, m.precision, m.recall, m.f1, m.support
            ));
        }
        out.push_str(&format!(
            "macro  {:>9.4}  {:>6.4}  {:>6.4}  accuracy {:.4}\n",
            self.macro_precision, self.macro_recall, self.macro_f1, self.accuracy
        ));
        out
    }
}
