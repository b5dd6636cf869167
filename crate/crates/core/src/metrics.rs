//! Segmentation metrics restricted to field-of-view pixels.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

fn ratio(num: u64, den: u64, what: &str) -> f64 {
    if den == 0 {
        log::warn!("{what} has a zero denominator; reporting 0");
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// Sensitivity `tp / (tp + fn)`.
    pub fn se(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_, "sensitivity")
    }

    /// Specificity `tn / (tn + fp)`.
    pub fn sp(&self) -> f64 {
        ratio(self.tn, self.tn + self.fp, "specificity")
    }

    pub fn acc(&self) -> f64 {
        ratio(self.tp + self.tn, self.total(), "accuracy")
    }

    /// `2 tp / (2 tp + fp + fn)`, the Dice coefficient of the binary masks.
    pub fn f1(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_, "F1")
    }
}

impl std::ops::Add for Confusion {
    type Output = Confusion;
    fn add(self, o: Confusion) -> Confusion {
        Confusion { tp: self.tp + o.tp, fp: self.fp + o.fp, tn: self.tn + o.tn, fn_: self.fn_ + o.fn_ }
    }
}

fn check_shapes(prob: &Tensor, label: &Tensor, fov: &Tensor) -> Result<()> {
    if prob.shape() != label.shape() || prob.shape() != fov.shape() {
        return Err(Error::shape(format!(
            "metric inputs disagree: prob {:?}, label {:?}, fov {:?}",
            prob.shape(),
            label.shape(),
            fov.shape()
        )));
    }
    Ok(())
}

/// Counts over FOV pixels; a pixel is predicted positive when
/// `prob >= threshold`.
pub fn confusion(prob: &Tensor, label: &Tensor, fov: &Tensor, threshold: f64) -> Result<Confusion> {
    check_shapes(prob, label, fov)?;
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid(format!("threshold must lie in (0, 1), got {threshold}")));
    }
    let mut c = Confusion::default();
    for ((&p, &y), &f) in prob.data().iter().zip(label.data()).zip(fov.data()) {
        if f < 0.5 {
            continue;
        }
        match (p >= threshold, y >= 0.5) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    if c.total() == 0 {
        return Err(Error::invalid("field of view is empty"));
    }
    Ok(c)
}

/// FOV pixels as `(score, positive)` pairs.
fn scored(prob: &Tensor, label: &Tensor, fov: &Tensor) -> Result<Vec<(f64, bool)>> {
    check_shapes(prob, label, fov)?;
    Ok(prob
        .data()
        .iter()
        .zip(label.data())
        .zip(fov.data())
        .filter(|(_, &f)| f >= 0.5)
        .map(|((&p, &y), _)| (p, y >= 0.5))
        .collect())
}

/// Mann-Whitney estimate of the ROC area with average ranks for ties.
/// `None` when only one class is present.
pub fn auc_of(mut pairs: Vec<(f64, bool)>) -> Option<f64> {
    if pairs.iter().any(|(p, _)| p.is_nan()) {
        return None;
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n_pos = pairs.iter().filter(|(_, y)| *y).count();
    let n_neg = pairs.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < pairs.len() {
        let mut j = i;
        while j + 1 < pairs.len() && pairs[j + 1].0 == pairs[i].0 {
            j += 1;
        }
        // ranks i+1..=j+1 share their mean
        let rank = (i + j + 2) as f64 / 2.0;
        rank_sum += rank * pairs[i..=j].iter().filter(|(_, y)| *y).count() as f64;
        i = j + 1;
    }
    let (np, nn) = (n_pos as f64, n_neg as f64);
    Some((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

pub fn auc(prob: &Tensor, label: &Tensor, fov: &Tensor) -> Result<Option<f64>> {
    Ok(auc_of(scored(prob, label, fov)?))
}

/// The five reported metrics. `auc` is `None` when undefined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub se: f64,
    pub sp: f64,
    pub f1: f64,
    pub acc: f64,
    pub auc: Option<f64>,
}

impl Metrics {
    pub fn from_confusion(c: &Confusion, auc: Option<f64>) -> Self {
        Self { se: c.se(), sp: c.sp(), f1: c.f1(), acc: c.acc(), auc }
    }
}

/// Pooled (micro) and per-image mean (macro) metrics of a test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub micro: Metrics,
    pub macro_avg: Metrics,
    pub per_image: Vec<Metrics>,
    pub confusion: Confusion,
}

/// `(prob, label, fov)` triples of one dataset.
pub fn evaluate_set(items: &[(Tensor, Tensor, Tensor)], threshold: f64) -> Result<Report> {
    if items.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty dataset"));
    }
    let mut total = Confusion::default();
    let mut pooled = Vec::new();
    let mut per_image = Vec::with_capacity(items.len());
    for (prob, label, fov) in items {
        let c = confusion(prob, label, fov, threshold)?;
        let pairs = scored(prob, label, fov)?;
        per_image.push(Metrics::from_confusion(&c, auc_of(pairs.clone())));
        pooled.extend(pairs);
        total = total + c;
    }
    let n = per_image.len() as f64;
    let mean = |f: fn(&Metrics) -> f64| per_image.iter().map(f).sum::<f64>() / n;
    let aucs: Vec<f64> = per_image.iter().filter_map(|m| m.auc).collect();
    let macro_avg = Metrics {
        se: mean(|m| m.se),
        sp: mean(|m| m.sp),
        f1: mean(|m| m.f1),
        acc: mean(|m| m.acc),
        auc: if aucs.is_empty() { None } else { Some(aucs.iter().sum::<f64>() / aucs.len() as f64) },
    };
    Ok(Report { micro: Metrics::from_confusion(&total, auc_of(pooled)), macro_avg, per_image, confusion: total })
}

pub const CSV_HEADER: &str = "dataset,model,Se,Sp,F1,Acc,AUC";

/// One CSV row with four decimals; an undefined AUC is written as `NA`.
pub fn csv_row(dataset: &str, model: &str, m: &Metrics) -> String {
    let mut s = format!("{dataset},{model},{:.4},{:.4},{:.4},{:.4},", m.se, m.sp, m.f1, m.acc);
    match m.auc {
        Some(a) => write!(s, "{a:.4}").unwrap(),
        None => s.push_str("NA"),
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn hand_confusion() {
        let c = Confusion { tp: 2, fp: 1, tn: 6, fn_: 1 };
        assert!((c.se() - 2.0 / 3.0).abs() < 1e-15);
        assert!((c.sp() - 6.0 / 7.0).abs() < 1e-15);
        assert!((c.acc() - 0.8).abs() < 1e-15);
        assert!((c.f1() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn confusion_counts_fov_only() {
        let prob = t(&[0.9, 0.2, 0.7, 0.1, 0.6]);
        let label = t(&[1.0, 1.0, 0.0, 0.0, 1.0]);
        let fov = t(&[1.0, 1.0, 1.0, 1.0, 0.0]);
        let c = confusion(&prob, &label, &fov, 0.5).unwrap();
        assert_eq!(c, Confusion { tp: 1, fp: 1, tn: 1, fn_: 1 });
    }

    #[test]
    fn empty_fov_is_error() {
        let z = t(&[0.0, 0.0]);
        assert!(confusion(&z, &z, &z, 0.5).is_err());
    }

    #[test]
    fn zero_denominators_report_zero() {
        let c = Confusion { tp: 0, fp: 0, tn: 3, fn_: 0 };
        assert_eq!(c.se(), 0.0);
        assert_eq!(c.f1(), 0.0);
        assert_eq!(c.sp(), 1.0);
    }

    #[test]
    fn auc_edge_cases() {
        let label = t(&[0.0, 0.0, 1.0, 1.0]);
        let fov = t(&[1.0; 4]);
        assert_eq!(auc(&t(&[0.1, 0.2, 0.3, 0.4]), &label, &fov).unwrap(), Some(1.0));
        assert_eq!(auc(&t(&[0.5; 4]), &label, &fov).unwrap(), Some(0.5));
        assert_eq!(auc(&t(&[0.4, 0.3, 0.2, 0.1]), &label, &fov).unwrap(), Some(0.0));
        assert_eq!(auc(&t(&[0.5; 4]), &t(&[1.0; 4]), &fov).unwrap(), None);
    }

    #[test]
    fn csv_formatting() {
        let m = Metrics { se: 0.5, sp: 1.0, f1: 2.0 / 3.0, acc: 0.8, auc: None };
        assert_eq!(csv_row("synthetic", "FRS", &m), "synthetic,FRS,0.5000,1.0000,0.6667,0.8000,NA");
    }

    #[test]
    fn micro_and_macro_differ() {
        let items = vec![
            (t(&[0.9, 0.1]), t(&[1.0, 0.0]), t(&[1.0, 1.0])),
            (t(&[0.9, 0.9, 0.9, 0.1]), t(&[1.0, 0.0, 0.0, 0.0]), t(&[1.0; 4])),
        ];
        let r = evaluate_set(&items, 0.5).unwrap();
        assert_eq!(r.confusion, Confusion { tp: 2, fp: 2, tn: 2, fn_: 0 });
        assert!((r.micro.acc - 4.0 / 6.0).abs() < 1e-15);
        assert!((r.macro_avg.acc - 0.75).abs() < 1e-15);
        assert!(evaluate_set(&[], 0.5).is_err());
    }
}
