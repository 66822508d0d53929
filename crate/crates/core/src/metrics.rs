//! Cumulative confusion matrix and the scores derived from it.

use std::fmt::Write as _;

use crate::config::MetricClasses;
use crate::error::{data_err, shape_err, Result};
use crate::loss::IGNORE_LABEL;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    /// Row-major `C × C`; rows are reference classes, columns predictions.
    pub counts: Vec<u64>,
    pub class_names: Vec<String>,
    /// Pixels whose reference class is flagged here are not counted.
    pub ignore: Vec<bool>,
}

impl ConfusionMatrix {
    pub fn new(class_names: &[&str]) -> Self {
        let c = class_names.len();
        ConfusionMatrix {
            counts: vec![0; c * c],
            class_names: class_names.iter().map(|s| s.to_string()).collect(),
            ignore: vec![false; c],
        }
    }

    pub fn with_classes(c: usize) -> Self {
        let names: Vec<String> = (0..c).map(|i| format!("class{i}")).collect();
        Self::new(&names.iter().map(String::as_str).collect::<Vec<_>>())
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn get(&self, reference: usize, predicted: usize) -> u64 {
        self.counts[reference * self.num_classes() + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one pixel pair per position. Reference pixels equal to
    /// `IGNORE_LABEL` or of an ignored class are skipped.
    pub fn accumulate(&mut self, pred: &[u8], reference: &[u8]) -> Result<()> {
        if pred.len() != reference.len() {
            return Err(shape_err(format!("{} predictions vs {} references", pred.len(), reference.len())));
        }
        let c = self.num_classes();
        // Validate first so a failed call leaves the matrix untouched.
        for (&p, &r) in pred.iter().zip(reference) {
            if r != IGNORE_LABEL && r as usize >= c {
                return Err(data_err(format!("reference class {r} outside 0..{c}")));
            }
            if r != IGNORE_LABEL && p as usize >= c {
                return Err(data_err(format!("predicted class {p} outside 0..{c}")));
            }
        }
        for (&p, &r) in pred.iter().zip(reference) {
            if r == IGNORE_LABEL || self.ignore[r as usize] {
                continue;
            }
            self.counts[r as usize * c + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.counts.len() != self.counts.len() {
            return Err(shape_err(format!(
                "merging {}-class into {}-class matrix",
                other.num_classes(),
                self.num_classes()
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn true_positives(&self, k: usize) -> u64 {
        self.get(k, k)
    }

    /// Predicted as `k` but belonging elsewhere.
    pub fn false_positives(&self, k: usize) -> u64 {
        (0..self.num_classes()).filter(|&r| r != k).map(|r| self.get(r, k)).sum()
    }

    pub fn false_negatives(&self, k: usize) -> u64 {
        (0..self.num_classes()).filter(|&p| p != k).map(|p| self.get(k, p)).sum()
    }

    pub fn true_negatives(&self, k: usize) -> u64 {
        self.total() - self.true_positives(k) - self.false_positives(k) - self.false_negatives(k)
    }

    fn nonempty(&self) -> Result<u64> {
        match self.total() {
            0 => Err(data_err("confusion matrix is empty")),
            n => Ok(n),
        }
    }

    /// Correctly labeled pixels over all scored pixels.
    pub fn oa(&self) -> Result<f64> {
        let n = self.nonempty()?;
        let trace: u64 = (0..self.num_classes()).map(|k| self.true_positives(k)).sum();
        Ok(trace as f64 / n as f64)
    }

    pub fn class_scores(&self) -> Result<Vec<ClassScore>> {
        self.nonempty()?;
        Ok((0..self.num_classes())
            .map(|k| {
                let (tp, fp, fn_) = (self.true_positives(k), self.false_positives(k), self.false_negatives(k));
                let ratio = |num: u64, den: u64| if den == 0 { (0.0, true) } else { (num as f64 / den as f64, false) };
                let (iou, iou_undef) = ratio(tp, tp + fp + fn_);
                let (precision, p_undef) = ratio(tp, tp + fp);
                let (recall, r_undef) = ratio(tp, tp + fn_);
                let (f1, f1_undef) = if p_undef || r_undef || precision + recall == 0.0 {
                    (0.0, true)
                } else {
                    (2.0 * precision * recall / (precision + recall), false)
                };
                ClassScore {
                    name: self.class_names[k].clone(),
                    iou,
                    precision,
                    recall,
                    f1,
                    flagged: iou_undef || f1_undef,
                    absent: tp + fp + fn_ == 0,
                }
            })
            .collect())
    }

    /// Classes averaged into the mean scores.
    pub fn mean_classes(&self, which: MetricClasses) -> Vec<usize> {
        let c = self.num_classes();
        let upto = match which {
            MetricClasses::All => c,
            MetricClasses::Foreground => c.saturating_sub(1).max(1),
        };
        (0..upto).filter(|&k| !self.ignore[k]).collect()
    }

    fn mean_of(&self, which: MetricClasses, f: impl Fn(&ClassScore) -> f64) -> Result<f64> {
        let scores = self.class_scores()?;
        let used: Vec<f64> =
            self.mean_classes(which).into_iter().filter(|&k| !scores[k].absent).map(|k| f(&scores[k])).collect();
        if used.is_empty() {
            return Err(data_err("no scored classes to average"));
        }
        Ok(used.iter().sum::<f64>() / used.len() as f64)
    }

    pub fn miou(&self, which: MetricClasses) -> Result<f64> {
        self.mean_of(which, |s| s.iou)
    }

    pub fn per_class_f1(&self) -> Result<Vec<f64>> {
        Ok(self.class_scores()?.into_iter().map(|s| s.f1).collect())
    }

    /// Unweighted mean of per-class F1.
    pub fn mean_f1(&self, which: MetricClasses) -> Result<f64> {
        self.mean_of(which, |s| s.f1)
    }

    /// Σ TP over Σ (TP + FP + TN + FN), i.e. trace / (C · total).
    pub fn oa_literal(&self) -> Result<f64> {
        let n = self.nonempty()?;
        let c = self.num_classes() as u64;
        let trace: u64 = (0..self.num_classes()).map(|k| self.true_positives(k)).sum();
        let all: u64 = (0..self.num_classes())
            .map(|k| {
                self.true_positives(k) + self.false_positives(k) + self.true_negatives(k) + self.false_negatives(k)
            })
            .sum();
        debug_assert_eq!(all, c * n);
        Ok(trace as f64 / all as f64)
    }

    /// F1 of the macro-averaged precision and recall.
    pub fn macro_f1(&self, which: MetricClasses) -> Result<f64> {
        let p = self.mean_of(which, |s| s.precision)?;
        let r = self.mean_of(which, |s| s.recall)?;
        Ok(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) })
    }

    pub fn report(&self, which: MetricClasses) -> Result<MetricsReport> {
        Ok(MetricsReport {
            classes: self.class_scores()?,
            mean_classes: self.mean_classes(which),
            oa: self.oa()?,
            miou: self.miou(which)?,
            mean_f1: self.mean_f1(which)?,
            oa_literal: self.oa_literal()?,
            macro_f1: self.macro_f1(which)?,
            pixels: self.total(),
            params: None,
            flops: None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassScore {
    pub name: String,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Some ratio had a zero denominator and was reported as 0.
    pub flagged: bool,
    /// Neither referenced nor predicted anywhere; left out of means.
    pub absent: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub classes: Vec<ClassScore>,
    pub mean_classes: Vec<usize>,
    pub oa: f64,
    pub miou: f64,
    pub mean_f1: f64,
    pub oa_literal: f64,
    pub macro_f1: f64,
    pub pixels: u64,
    pub params: Option<usize>,
    pub flops: Option<u64>,
}

impl MetricsReport {
    /// Tab-separated table: one row per class, then the means.
    pub fn to_table(&self) -> String {
        let mut s = String::from("class\tIoU\tF1\tprecision\trecall\tflag\n");
        for c in &self.classes {
            let flag = if c.absent {
                "absent"
            } else if c.flagged {
                "zero-denominator"
            } else {
                ""
            };
            let _ = writeln!(s, "{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{flag}", c.name, c.iou, c.f1, c.precision, c.recall);
        }
        let _ = writeln!(s, "OA\t{:.4}", self.oa);
        let _ = writeln!(s, "mIoU\t{:.4}", self.miou);
        let _ = writeln!(s, "mean F1\t{:.4}", self.mean_f1);
        s
    }

    /// `key = value` lines for machine consumption.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "oa = {}", self.oa);
        let _ = writeln!(s, "miou = {}", self.miou);
        let _ = writeln!(s, "mean_f1 = {}", self.mean_f1);
        let _ = writeln!(s, "oa_literal = {}", self.oa_literal);
        let _ = writeln!(s, "macro_f1 = {}", self.macro_f1);
        let _ = writeln!(s, "pixels = {}", self.pixels);
        let names: Vec<&str> = self.mean_classes.iter().map(|&k| self.classes[k].name.as_str()).collect();
        let _ = writeln!(s, "mean_classes = {}", names.join(","));
        for c in &self.classes {
            let _ = writeln!(s, "iou.{} = {}", c.name, c.iou);
            let _ = writeln!(s, "f1.{} = {}", c.name, c.f1);
            let _ = writeln!(s, "precision.{} = {}", c.name, c.precision);
            let _ = writeln!(s, "recall.{} = {}", c.name, c.recall);
            let _ = writeln!(s, "flagged.{} = {}", c.name, c.flagged);
        }
        if let Some(p) = self.params {
            let _ = writeln!(s, "params = {p}");
        }
        if let Some(f) = self.flops {
            let _ = writeln!(s, "flops = {f}");
        }
        s
    }
}
