//! Accuracy, counting RMSE and segmentation mIoU.
//!
//! [`MetricsAccumulator`] sums raw counts, so shards merge exactly in any order.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::qa::{Category, QAPair};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("usage error: {0}")]
    Usage(String),
}

type Result<T> = std::result::Result<T, MetricsError>;

/// A decoded model answer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub answer: String,
    /// Count used for RMSE; falls back to parsing `answer`.
    #[serde(default)]
    pub numeric: Option<u32>,
}

impl Prediction {
    fn count(&self) -> Option<u32> {
        self.numeric.or_else(|| self.answer.trim_end_matches('+').parse().ok())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsAccumulator {
    /// `(correct, total)` per category in [`Category::ALL`] order.
    pub answers: [(u64, u64); 6],
    /// `(Σ squared error, n)` for basic and relational counting.
    pub basic_sq: (f64, u64),
    pub rel_sq: (f64, u64),
    pub num_classes: usize,
    /// Row-major `truth × prediction` pixel counts.
    pub confusion: Vec<u64>,
}

fn cat_index(c: Category) -> usize {
    Category::ALL.iter().position(|&x| x == c).expect("listed category")
}

impl MetricsAccumulator {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            confusion: vec![0; num_classes * num_classes],
            ..Self::default()
        }
    }

    pub fn add_answer(&mut self, pred: &Prediction, truth: &QAPair) -> Result<()> {
        let slot = &mut self.answers[cat_index(truth.category)];
        slot.1 += 1;
        if pred.answer == truth.answer {
            slot.0 += 1;
        }
        if truth.category.is_counting() {
            let gt = truth
                .numeric_value
                .ok_or_else(|| MetricsError::Usage(format!("counting question {:?} lacks a numeric value", truth.question)))?;
            let pr = pred
                .count()
                .ok_or_else(|| MetricsError::Usage(format!("prediction {:?} for a counting question has no count", pred.answer)))?;
            let e = pr as f64 - gt as f64;
            let acc = if truth.category == Category::BasicCounting { &mut self.basic_sq } else { &mut self.rel_sq };
            acc.0 += e * e;
            acc.1 += 1;
        }
        Ok(())
    }

    pub fn add_mask(&mut self, pred: &[u8], truth: &[u8]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(MetricsError::Usage(format!("mask sizes differ: {} vs {}", pred.len(), truth.len())));
        }
        let k = self.num_classes;
        for (&p, &t) in pred.iter().zip(truth) {
            let (p, t) = (p as usize, t as usize);
            if p >= k || t >= k {
                return Err(MetricsError::Usage(format!("class id outside {k} classes")));
            }
            self.confusion[t * k + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if self.num_classes != other.num_classes {
            return Err(MetricsError::Usage("class counts differ".into()));
        }
        for (a, b) in self.answers.iter_mut().zip(other.answers) {
            a.0 += b.0;
            a.1 += b.1;
        }
        self.basic_sq.0 += other.basic_sq.0;
        self.basic_sq.1 += other.basic_sq.1;
        self.rel_sq.0 += other.rel_sq.0;
        self.rel_sq.1 += other.rel_sq.1;
        for (a, b) in self.confusion.iter_mut().zip(&other.confusion) {
            *a += b;
        }
        Ok(())
    }

    pub fn report(&self) -> MetricsReport {
        let rmse = |(s, n): (f64, u64)| if n == 0 { None } else { Some((s / n as f64).sqrt()) };
        let categories = Category::ALL
            .iter()
            .zip(self.answers)
            .map(|(&category, (correct, total))| CategoryScore {
                category,
                correct,
                total,
                accuracy: (total > 0).then(|| correct as f64 / total as f64),
            })
            .collect();
        let (correct, total) = self.answers.iter().fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
        let pooled = (self.basic_sq.0 + self.rel_sq.0, self.basic_sq.1 + self.rel_sq.1);
        MetricsReport {
            categories,
            oa: (total > 0).then(|| correct as f64 / total as f64),
            rmse_basic_counting: rmse(self.basic_sq),
            rmse_rel_counting: rmse(self.rel_sq),
            or: rmse(pooled),
            miou: self.miou(),
            questions: total,
        }
    }

    /// Mean IoU over classes present in truth or prediction.
    fn miou(&self) -> Option<f64> {
        let k = self.num_classes;
        let mut sum = 0.0;
        let mut n = 0;
        for c in 0..k {
            let tp = self.confusion[c * k + c];
            let fn_: u64 = (0..k).map(|p| self.confusion[c * k + p]).sum::<u64>() - tp;
            let fp: u64 = (0..k).map(|t| self.confusion[t * k + c]).sum::<u64>() - tp;
            let denom = tp + fp + fn_;
            if denom > 0 {
                sum += tp as f64 / denom as f64;
                n += 1;
            }
        }
        (n > 0).then(|| sum / n as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryScore {
    pub category: Category,
    pub correct: u64,
    pub total: u64,
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// In table column order.
    pub categories: Vec<CategoryScore>,
    pub oa: Option<f64>,
    pub rmse_basic_counting: Option<f64>,
    pub rmse_rel_counting: Option<f64>,
    /// RMSE pooled over all counting questions.
    pub or: Option<f64>,
    pub miou: Option<f64>,
    pub questions: u64,
}

const CSV_COLUMNS: [&str; 12] = [
    "bas_ju", "rel_ju", "bas_co", "rel_co", "obj_an", "com_an", "oa", "rmse_bas_co", "rmse_rel_co", "or", "miou", "questions",
];

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

impl MetricsReport {
    pub fn csv_header() -> String {
        CSV_COLUMNS.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cells: Vec<String> = self.categories.iter().map(|c| fmt_opt(c.accuracy)).collect();
        cells.extend([
            fmt_opt(self.oa),
            fmt_opt(self.rmse_basic_counting),
            fmt_opt(self.rmse_rel_counting),
            fmt_opt(self.or),
            fmt_opt(self.miou),
            self.questions.to_string(),
        ]);
        cells.join(",")
    }

    /// Header plus one row, newline terminated.
    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", Self::csv_header(), self.csv_row())
    }

    pub fn accuracy(&self, c: Category) -> Option<f64> {
        self.categories.iter().find(|s| s.category == c).and_then(|s| s.accuracy)
    }
}

/// Scores aligned predictions, QA pairs and (optionally empty) mask lists.
pub fn evaluate(
    predictions: &[Prediction],
    qa: &[QAPair],
    seg_preds: &[&[u8]],
    seg_gts: &[&[u8]],
    num_classes: usize,
) -> Result<MetricsReport> {
    if predictions.len() != qa.len() {
        return Err(MetricsError::Usage(format!("{} predictions for {} questions", predictions.len(), qa.len())));
    }
    if seg_preds.len() != seg_gts.len() {
        return Err(MetricsError::Usage(format!("{} predicted masks for {} truths", seg_preds.len(), seg_gts.len())));
    }
    let mut acc = MetricsAccumulator::new(num_classes);
    for (p, t) in predictions.iter().zip(qa) {
        acc.add_answer(p, t)?;
    }
    for (p, t) in seg_preds.iter().zip(seg_gts) {
        acc.add_mask(p, t)?;
    }
    Ok(acc.report())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn qa(cat: Category, answer: &str, n: Option<u32>) -> QAPair {
        QAPair {
            question: "q".into(),
            category: cat,
            answer: answer.into(),
            numeric_value: n,
            template_id: "t".into(),
        }
    }

    fn pred(a: &str) -> Prediction {
        Prediction {
            answer: a.into(),
            numeric: None,
        }
    }

    #[test]
    fn perfect_predictions() {
        let truth = vec![qa(Category::BasicJudging, "Yes", None), qa(Category::BasicCounting, "3", Some(3))];
        let preds: Vec<Prediction> = truth.iter().map(|q| pred(&q.answer)).collect();
        let m = [0u8, 1, 1, 2];
        let r = evaluate(&preds, &truth, &[&m], &[&m], 8).unwrap();
        assert_eq!(r.oa, Some(1.0));
        assert_eq!(r.or, Some(0.0));
        assert_eq!(r.miou, Some(1.0));
    }

    #[test]
    fn off_by_one_counts_give_unit_rmse() {
        let truth: Vec<QAPair> = (0..5).map(|i| qa(Category::RelCounting, &i.to_string(), Some(i))).collect();
        let preds: Vec<Prediction> = (0..5).map(|i| pred(&(i + 1).to_string())).collect();
        let r = evaluate(&preds, &truth, &[], &[], 8).unwrap();
        assert_eq!(r.rmse_rel_counting, Some(1.0));
        assert_eq!(r.or, Some(1.0));
        assert_eq!(r.rmse_basic_counting, None);
    }

    #[test]
    fn length_mismatch_rejected() {
        assert!(evaluate(&[], &[qa(Category::BasicJudging, "No", None)], &[], &[], 8).is_err());
    }

    #[test]
    fn merge_equals_whole() {
        let truth: Vec<QAPair> = (0..6).map(|i| qa(Category::BasicCounting, &i.to_string(), Some(i))).collect();
        let preds: Vec<Prediction> = (0..6).map(|i| pred(&((i * 7) % 5).to_string())).collect();
        let whole = evaluate(&preds, &truth, &[], &[], 8).unwrap();
        let mut a = MetricsAccumulator::new(8);
        let mut b = MetricsAccumulator::new(8);
        for i in 0..6 {
            let acc = if i % 2 == 0 { &mut a } else { &mut b };
            acc.add_answer(&preds[i], &truth[i]).unwrap();
        }
        b.merge(&a).unwrap();
        assert_eq!(b.report(), whole);
    }

    #[test]
    fn csv_is_stable() {
        let r = evaluate(&[pred("No")], &[qa(Category::BasicJudging, "No", None)], &[], &[], 8).unwrap();
        let csv = r.to_csv();
        assert!(csv.starts_with("bas_ju,rel_ju,"));
        assert_eq!(csv.lines().nth(1).unwrap(), "1.000000,,,,,,1.000000,,,,,1");
    }
}
