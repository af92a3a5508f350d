//! Classification metrics.

use std::fmt::Write as _;

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub weighted_f1: f64,
    pub macro_f1: f64,
    pub accuracy: f64,
    pub top_k: f64,
    pub k: usize,
    /// `confusion[truth][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub per_class_f1: Vec<f64>,
}

/// Rank of the true class: how many logits are strictly larger.
fn rank_of(row: &[f32], truth: usize) -> usize {
    row.iter().filter(|&&x| x > row[truth]).count()
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

impl Metrics {
    /// Metrics from per-sample logits. Predictions are the argmax (lowest
    /// index on ties).
    pub fn from_logits(logits: &[Vec<f32>], truth: &[usize], classes: usize, k: usize) -> Metrics {
        assert_eq!(logits.len(), truth.len());
        let preds: Vec<usize> = logits.iter().map(|r| argmax(r)).collect();
        let in_top_k = logits.iter().zip(truth).filter(|(r, &t)| rank_of(r, t) < k).count();
        let mut m = Self::from_predictions(&preds, truth, classes);
        m.k = k;
        m.top_k = if truth.is_empty() { 0.0 } else { in_top_k as f64 / truth.len() as f64 };
        m
    }

    /// Metrics from hard predictions; top-k is set to top-1.
    pub fn from_predictions(preds: &[usize], truth: &[usize], classes: usize) -> Metrics {
        assert_eq!(preds.len(), truth.len());
        let mut confusion = vec![vec![0usize; classes]; classes];
        for (&p, &t) in preds.iter().zip(truth) {
            confusion[t][p] += 1;
        }
        let n = truth.len();
        let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
        let mut per_class_f1 = Vec::with_capacity(classes);
        let mut weighted = 0.0;
        for c in 0..classes {
            let tp = confusion[c][c] as f64;
            let support: usize = confusion[c].iter().sum();
            let predicted: usize = (0..classes).map(|t| confusion[t][c]).sum();
            let precision = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
            let recall = if support == 0 { 0.0 } else { tp / support as f64 };
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            per_class_f1.push(f1);
            weighted += f1 * support as f64;
        }
        let acc = if n == 0 { 0.0 } else { correct as f64 / n as f64 };
        Metrics {
            weighted_f1: if n == 0 { 0.0 } else { weighted / n as f64 },
            macro_f1: per_class_f1.iter().sum::<f64>() / classes as f64,
            accuracy: acc,
            top_k: acc,
            k: 1,
            confusion,
            per_class_f1,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        writeln!(s, "weighted_f1,{}", self.weighted_f1).unwrap();
        writeln!(s, "macro_f1,{}", self.macro_f1).unwrap();
        writeln!(s, "accuracy,{}", self.accuracy).unwrap();
        writeln!(s, "top_{},{}", self.k, self.top_k).unwrap();
        for (c, f) in self.per_class_f1.iter().enumerate() {
            writeln!(s, "f1_class_{c},{f}").unwrap();
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "weighted F1 {:.4}  macro F1 {:.4}  accuracy {:.4}  top-{} {:.4}\nconfusion (rows = truth):\n",
            self.weighted_f1, self.macro_f1, self.accuracy, self.k, self.top_k
        );
        for row in &self.confusion {
            let cells: Vec<String> = row.iter().map(|c| format!("{c:>6}")).collect();
            writeln!(s, "{}", cells.join("")).unwrap();
        }
        s
    }
}
