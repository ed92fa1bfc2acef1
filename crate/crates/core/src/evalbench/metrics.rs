use std::fmt::Write as _;
use std::path::PathBuf;

use super::dataset::{load_image, LabeledImage};
use super::image_ops::preprocess;
use crate::error::{Error, Result};
use crate::graph::{classify, DrLabel, ModelGraph};
use crate::par;

/// Square count matrix; rows are true classes, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            n: classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Shape("confusion matrix rows must form a square".into()));
        }
        Ok(ConfusionMatrix {
            n,
            counts: rows.concat(),
        })
    }

    pub fn classes(&self) -> usize {
        self.n
    }

    pub fn add(&mut self, truth: usize, predicted: usize) {
        assert!(truth < self.n && predicted < self.n, "class index out of range");
        self.counts[truth * self.n + predicted] += 1;
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.n + predicted]
    }

    pub fn row(&self, truth: usize) -> &[u64] {
        &self.counts[truth * self.n..(truth + 1) * self.n]
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.n, other.n, "merging matrices of different size");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n).map(|i| self.get(i, i)).sum()
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationReport {
    pub confusion: ConfusionMatrix,
    pub accuracy: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

impl ClassificationReport {
    /// Metrics from a confusion matrix. Rates with an empty denominator are 0.
    pub fn from_confusion(confusion: ConfusionMatrix) -> Self {
        let n = confusion.classes();
        let mut precision = Vec::with_capacity(n);
        let mut recall = Vec::with_capacity(n);
        for k in 0..n {
            let tp = confusion.get(k, k);
            let predicted: u64 = (0..n).map(|t| confusion.get(t, k)).sum();
            let actual: u64 = confusion.row(k).iter().sum();
            precision.push(ratio(tp, predicted));
            recall.push(ratio(tp, actual));
        }
        let f1: Vec<f64> = precision.iter().zip(&recall).map(|(&p, &r)| harmonic(p, r)).collect();
        let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
        ClassificationReport {
            accuracy: ratio(confusion.trace(), confusion.total()),
            macro_precision: mean(&precision),
            macro_recall: mean(&recall),
            macro_f1: mean(&f1),
            precision,
            recall,
            f1,
            confusion,
        }
    }

    fn class_name(&self, k: usize) -> String {
        match (self.confusion.classes(), DrLabel::from_index(k)) {
            (5, Some(l)) => l.name().to_string(),
            _ => format!("class{k}"),
        }
    }

    /// Aligned table for terminals.
    pub fn to_text(&self) -> String {
        let n = self.confusion.classes();
        let mut out = String::new();
        let _ = writeln!(out, "samples   {}", self.confusion.total());
        let _ = writeln!(out, "accuracy  {:.4}", self.accuracy);
        let _ = writeln!(out);
        let _ = writeln!(out, "{:<14} {:>9} {:>9} {:>9} {:>7}", "class", "precision", "recall", "f1", "support");
        for k in 0..n {
            let support: u64 = self.confusion.row(k).iter().sum();
            let _ = writeln!(
                out,
                "{:<14} {:>9.4} {:>9.4} {:>9.4} {:>7}",
                self.class_name(k),
                self.precision[k],
                self.recall[k],
                self.f1[k],
                support
            );
        }
        let _ = writeln!(
            out,
            "{:<14} {:>9.4} {:>9.4} {:>9.4}",
            "macro", self.macro_precision, self.macro_recall, self.macro_f1
        );
        let _ = writeln!(out);
        let _ = writeln!(out, "confusion (rows = true, columns = predicted)");
        for k in 0..n {
            let row: Vec<String> = self.confusion.row(k).iter().map(|c| format!("{c:>6}")).collect();
            let _ = writeln!(out, "{:<14}{}", self.class_name(k), row.join(""));
        }
        out
    }

    /// One `key=value` per line; confusion rows as space-separated counts.
    pub fn to_key_value(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "samples={}", self.confusion.total());
        let _ = writeln!(out, "accuracy={}", self.accuracy);
        for k in 0..self.confusion.classes() {
            let name = self.class_name(k);
            let _ = writeln!(out, "precision.{name}={}", self.precision[k]);
            let _ = writeln!(out, "recall.{name}={}", self.recall[k]);
            let _ = writeln!(out, "f1.{name}={}", self.f1[k]);
        }
        let _ = writeln!(out, "macro_precision={}", self.macro_precision);
        let _ = writeln!(out, "macro_recall={}", self.macro_recall);
        let _ = writeln!(out, "macro_f1={}", self.macro_f1);
        for k in 0..self.confusion.classes() {
            let row: Vec<String> = self.confusion.row(k).iter().map(u64::to_string).collect();
            let _ = writeln!(out, "confusion.{}={}", self.class_name(k), row.join(" "));
        }
        out
    }
}

/// Classifies every image and scores the predictions.
pub fn evaluate(graph: &ModelGraph, images: &[LabeledImage]) -> Result<ClassificationReport> {
    if images.is_empty() {
        return Err(Error::Dataset("nothing to evaluate".into()));
    }
    let predictions = par::map(images, |img| {
        let x = preprocess(&img.pixels)?;
        classify(graph, &x).map(|(label, _)| label)
    });
    let mut confusion = ConfusionMatrix::new(DrLabel::ALL.len());
    for (img, p) in images.iter().zip(predictions) {
        confusion.add(img.label.index(), p?.index());
    }
    Ok(ClassificationReport::from_confusion(confusion))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathEvaluation {
    pub report: ClassificationReport,
    /// Files that could not be decoded.
    pub skipped: Vec<(PathBuf, String)>,
}

/// Like [`evaluate`], decoding each file on demand so the whole dataset
/// never sits in memory. Undecodable files are skipped.
pub fn evaluate_paths(graph: &ModelGraph, entries: &[(PathBuf, DrLabel)]) -> Result<PathEvaluation> {
    let outcomes = par::map(entries, |(path, _)| -> Result<Option<DrLabel>> {
        let img = match load_image(path) {
            Ok(img) => img,
            Err(e @ Error::Dataset(_)) => {
                log::warn!("skipping {}: {e}", path.display());
                return Ok(None);
            }
            Err(e) => return Err(e),
        };
        let x = preprocess(&img)?;
        classify(graph, &x).map(|(label, _)| Some(label))
    });
    let mut confusion = ConfusionMatrix::new(DrLabel::ALL.len());
    let mut skipped = Vec::new();
    for ((path, truth), outcome) in entries.iter().zip(outcomes) {
        match outcome {
            Ok(Some(p)) => confusion.add(truth.index(), p.index()),
            Ok(None) => skipped.push((path.clone(), "undecodable image".to_string())),
            Err(e @ Error::Shape(_)) => skipped.push((path.clone(), e.to_string())),
            Err(e) => return Err(e),
        }
    }
    if confusion.total() == 0 {
        return Err(Error::Dataset("no decodable images to evaluate".into()));
    }
    Ok(PathEvaluation {
        report: ClassificationReport::from_confusion(confusion),
        skipped,
    })
}
