//! Multi-label evaluation: precision/recall/F1 (macro and micro), Hamming
//! loss, Brier score, and the spectral class-similarity matrix.
//!
//! Ratios with an empty denominator are 0.

use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("class `{0}` has no pixel vectors")]
    EmptyClass(String),
}

pub type Result<T> = std::result::Result<T, MetricError>;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ClassPrf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrfScores {
    pub macro_p: f64,
    pub macro_r: f64,
    pub macro_f1: f64,
    pub micro_p: f64,
    pub micro_r: f64,
    pub micro_f1: f64,
    pub per_class: Vec<ClassPrf>,
}

/// A total plus its per-class column breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub total: f64,
    pub per_class: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub hamming: f64,
    pub brier: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub macro_p: f64,
    pub macro_r: f64,
    pub macro_f1: f64,
    pub micro_p: f64,
    pub micro_r: f64,
    pub micro_f1: f64,
    pub hamming_total: f64,
    pub brier_total: f64,
    pub n_samples: usize,
    pub n_labels: usize,
    pub per_class: Vec<ClassMetrics>,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

fn f1(p: f64, r: f64) -> f64 {
    ratio(2.0 * p * r, p + r)
}

fn check_shapes<A, B>(a: &ArrayView2<A>, b: &ArrayView2<B>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(MetricError::ShapeMismatch(a.dim(), b.dim()));
    }
    Ok(())
}

fn check_binary(name: &str, m: &ArrayView2<u8>) -> Result<()> {
    if m.iter().any(|v| *v > 1) {
        return Err(MetricError::Validation(format!("{name} must be binary")));
    }
    Ok(())
}

pub fn prf_report(y_true: ArrayView2<u8>, y_pred: ArrayView2<u8>) -> Result<PrfScores> {
    check_shapes(&y_true, &y_pred)?;
    check_binary("y_true", &y_true)?;
    check_binary("y_pred", &y_pred)?;
    let l = y_true.ncols();
    let (mut tp_all, mut fp_all, mut fn_all) = (0.0, 0.0, 0.0);
    let mut per_class = Vec::with_capacity(l);
    for c in 0..l {
        let (mut tp, mut fp, mut fneg) = (0.0, 0.0, 0.0);
        for (t, p) in y_true.column(c).iter().zip(y_pred.column(c)) {
            match (*t, *p) {
                (1, 1) => tp += 1.0,
                (0, 1) => fp += 1.0,
                (1, 0) => fneg += 1.0,
                _ => {}
            }
        }
        tp_all += tp;
        fp_all += fp;
        fn_all += fneg;
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fneg);
        per_class.push(ClassPrf {
            precision,
            recall,
            f1: f1(precision, recall),
        });
    }
    let mean = |f: fn(&ClassPrf) -> f64| ratio(per_class.iter().map(f).sum(), l as f64);
    let micro_p = ratio(tp_all, tp_all + fp_all);
    let micro_r = ratio(tp_all, tp_all + fn_all);
    Ok(PrfScores {
        macro_p: mean(|c| c.precision),
        macro_r: mean(|c| c.recall),
        macro_f1: mean(|c| c.f1),
        micro_p,
        micro_r,
        micro_f1: ratio(2.0 * tp_all, 2.0 * tp_all + fp_all + fn_all),
        per_class,
    })
}

pub fn hamming_loss(y_true: ArrayView2<u8>, y_pred: ArrayView2<u8>) -> Result<Breakdown> {
    check_shapes(&y_true, &y_pred)?;
    check_binary("y_true", &y_true)?;
    check_binary("y_pred", &y_pred)?;
    let (n, l) = y_true.dim();
    let per_class: Vec<f64> = (0..l)
        .map(|c| {
            let miss = y_true.column(c).iter().zip(y_pred.column(c)).filter(|(a, b)| a != b).count();
            ratio(miss as f64, n as f64)
        })
        .collect();
    Ok(Breakdown {
        total: ratio(per_class.iter().sum(), l as f64),
        per_class,
    })
}

pub fn brier_score(y_true: ArrayView2<u8>, probs: ArrayView2<f64>) -> Result<Breakdown> {
    check_shapes(&y_true, &probs)?;
    check_binary("y_true", &y_true)?;
    if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(MetricError::Validation("probabilities must lie in [0, 1]".into()));
    }
    let (n, l) = y_true.dim();
    let per_class: Vec<f64> = (0..l)
        .map(|c| {
            let sq: f64 = y_true
                .column(c)
                .iter()
                .zip(probs.column(c))
                .map(|(y, p)| (p - f64::from(*y)).powi(2))
                .sum();
            ratio(sq, n as f64)
        })
        .collect();
    Ok(Breakdown {
        total: ratio(per_class.iter().sum(), l as f64),
        per_class,
    })
}

/// Thresholds probabilities (`p >= threshold` is positive).
pub fn binarize(probs: ArrayView2<f64>, threshold: f64) -> Array2<u8> {
    probs.mapv(|p| u8::from(p >= threshold))
}

/// Full report from probabilities; predictions use `threshold`.
pub fn evaluate(y_true: ArrayView2<u8>, probs: ArrayView2<f64>, threshold: f64, class_names: &[String]) -> Result<MetricReport> {
    if class_names.len() != y_true.ncols() {
        return Err(MetricError::Validation(format!(
            "{} class names for {} label columns",
            class_names.len(),
            y_true.ncols()
        )));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(MetricError::Validation(format!("threshold {threshold} outside [0, 1]")));
    }
    let y_pred = binarize(probs, threshold);
    let prf = prf_report(y_true, y_pred.view())?;
    let ham = hamming_loss(y_true, y_pred.view())?;
    let brier = brier_score(y_true, probs)?;
    let per_class = class_names
        .iter()
        .enumerate()
        .map(|(c, name)| ClassMetrics {
            class: name.clone(),
            precision: prf.per_class[c].precision,
            recall: prf.per_class[c].recall,
            f1: prf.per_class[c].f1,
            hamming: ham.per_class[c],
            brier: brier.per_class[c],
        })
        .collect();
    Ok(MetricReport {
        macro_p: prf.macro_p,
        macro_r: prf.macro_r,
        macro_f1: prf.macro_f1,
        micro_p: prf.micro_p,
        micro_r: prf.micro_r,
        micro_f1: prf.micro_f1,
        hamming_total: ham.total,
        brier_total: brier.total,
        n_samples: y_true.nrows(),
        n_labels: y_true.ncols(),
        per_class,
    })
}

impl MetricReport {
    /// Headline scalars, in a fixed order.
    pub fn scalars(&self) -> [(&'static str, f64); 8] {
        [
            ("macro_p", self.macro_p),
            ("macro_r", self.macro_r),
            ("macro_f1", self.macro_f1),
            ("micro_p", self.micro_p),
            ("micro_r", self.micro_r),
            ("micro_f1", self.micro_f1),
            ("hamming_total", self.hamming_total),
            ("brier_total", self.brier_total),
        ]
    }

    /// One row per class.
    pub fn per_class_csv(&self) -> String {
        let mut out = String::from("class,precision,recall,f1,hamming,brier\n");
        for c in &self.per_class {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                csv_field(&c.class),
                c.precision,
                c.recall,
                c.f1,
                c.hamming,
                c.brier
            );
        }
        out
    }
}

/// Which per-class column a cross-run table reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerClassMetric {
    Precision,
    Recall,
    F1,
    Hamming,
    Brier,
}

impl PerClassMetric {
    fn pick(self, c: &ClassMetrics) -> f64 {
        match self {
            Self::Precision => c.precision,
            Self::Recall => c.recall,
            Self::F1 => c.f1,
            Self::Hamming => c.hamming,
            Self::Brier => c.brier,
        }
    }
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per-class table across models: `class,<model>_mean,<model>_std,...`.
/// Each model contributes the reports of its repeated runs.
pub fn per_class_table_csv(models: &[(String, Vec<MetricReport>)], metric: PerClassMetric) -> Result<String> {
    let Some((_, first)) = models.iter().find(|(_, r)| !r.is_empty()) else {
        return Ok(String::from("class\n"));
    };
    let classes: Vec<String> = first[0].per_class.iter().map(|c| c.class.clone()).collect();
    for (name, runs) in models {
        if runs.iter().any(|r| r.per_class.len() != classes.len()) {
            return Err(MetricError::Validation(format!("model `{name}` has a different label set")));
        }
    }
    let mut out = String::from("class");
    for (name, _) in models {
        let _ = write!(out, ",{0}_mean,{0}_std", csv_field(name));
    }
    out.push('\n');
    for (c, class) in classes.iter().enumerate() {
        out.push_str(&csv_field(class));
        for (_, runs) in models {
            let vals: Vec<f64> = runs.iter().map(|r| metric.pick(&r.per_class[c])).collect();
            let (m, s) = mean_std(&vals);
            let _ = write!(out, ",{m},{s}");
        }
        out.push('\n');
    }
    Ok(out)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Pairwise `1 / (1 + |mean_a - mean_b|)` between class-mean spectral vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSimilarityMatrix {
    pub classes: Vec<String>,
    pub values: Array2<f64>,
}

/// `class_pixels[i] = (name, P x B matrix of spectral vectors)`.
pub fn class_similarity(class_pixels: &[(String, Array2<f64>)]) -> Result<ClassSimilarityMatrix> {
    let bands = class_pixels.first().map(|(_, m)| m.ncols()).unwrap_or(0);
    let mut means = Vec::with_capacity(class_pixels.len());
    for (name, px) in class_pixels {
        if px.nrows() == 0 {
            return Err(MetricError::EmptyClass(name.clone()));
        }
        if px.ncols() != bands {
            return Err(MetricError::Validation(format!(
                "class `{name}` has {}-band vectors, expected {bands}",
                px.ncols()
            )));
        }
        means.push(px.mean_axis(Axis(0)).expect("non-empty"));
    }
    let l = means.len();
    let mut values = Array2::ones((l, l));
    for a in 0..l {
        for b in a + 1..l {
            let d = (&means[a] - &means[b]).mapv(|v| v * v).sum().sqrt();
            let s = 1.0 / (1.0 + d);
            values[[a, b]] = s;
            values[[b, a]] = s;
        }
    }
    Ok(ClassSimilarityMatrix {
        classes: class_pixels.iter().map(|(n, _)| n.clone()).collect(),
        values,
    })
}

impl ClassSimilarityMatrix {
    pub fn mean_off_diagonal(&self) -> f64 {
        let l = self.classes.len();
        if l < 2 {
            return 1.0;
        }
        (self.values.sum() - l as f64) / (l * (l - 1)) as f64
    }

    /// The most similar distinct pair `(a, b, similarity)` with `a < b`.
    pub fn most_similar_pair(&self) -> Option<(usize, usize, f64)> {
        let l = self.classes.len();
        let mut best: Option<(usize, usize, f64)> = None;
        for a in 0..l {
            for b in a + 1..l {
                let v = self.values[[a, b]];
                if best.is_none_or(|(_, _, bv)| v > bv) {
                    best = Some((a, b, v));
                }
            }
        }
        best
    }

    /// `L x L` matrix with a header row and a leading class column.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class");
        for c in &self.classes {
            let _ = write!(out, ",{}", csv_field(c));
        }
        out.push('\n');
        for (c, row) in self.classes.iter().zip(self.values.outer_iter()) {
            out.push_str(&csv_field(c));
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}
