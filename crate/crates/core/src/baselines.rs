//! Confusion metrics and an RBF-kernel SVM trained by sequential minimal
//! optimisation, over raw pixels or precomputed embeddings.

use std::collections::HashMap;
use std::fmt;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::data::{Label, Manifest};
use crate::image::write_atomic;
use crate::rng::stream;
use crate::{Error, Image, Result};

// ----------------------------------------------------------------- metrics

/// Confusion counts with alcohol as the positive class.
///
/// Rates whose denominator is zero (no positives or no negatives) are NaN.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
    pub accuracy: f64,
    /// Sensitivity, the alcohol-class accuracy.
    pub tpr: f64,
    /// Specificity, the no-alcohol-class accuracy.
    pub tnr: f64,
}

/// No samples: every rate is NaN.
impl Default for MetricsReport {
    fn default() -> Self {
        MetricsReport {
            tp: 0,
            tn: 0,
            fp: 0,
            fn_: 0,
            accuracy: f64::NAN,
            tpr: f64::NAN,
            tnr: f64::NAN,
        }
    }
}

impl MetricsReport {
    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn positives(&self) -> usize {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> usize {
        self.tn + self.fp
    }

    /// Mean of TPR and TNR; falls back to whichever is defined.
    pub fn balanced_accuracy(&self) -> f64 {
        match (self.tpr.is_nan(), self.tnr.is_nan()) {
            (false, false) => 0.5 * (self.tpr + self.tnr),
            (false, true) => self.tpr,
            (true, false) => self.tnr,
            (true, true) => f64::NAN,
        }
    }

    pub fn csv_header() -> &'static str {
        "tp,tn,fp,fn,accuracy,tnr,tpr"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.tp,
            self.tn,
            self.fp,
            self.fn_,
            percent(self.accuracy),
            percent(self.tnr),
            percent(self.tpr)
        )
    }
}

/// Two-decimal percentage.
pub fn percent(v: f64) -> String {
    if v.is_nan() {
        "n/a".into()
    } else {
        format!("{:.2}", 100.0 * v)
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Accuracy {}%  Specificity(TNR) {}%  Sensitivity(TPR) {}%  [TP {} TN {} FP {} FN {}]",
            percent(self.accuracy),
            percent(self.tnr),
            percent(self.tpr),
            self.tp,
            self.tn,
            self.fp,
            self.fn_
        )
    }
}

pub fn confusion_metrics(predictions: &[Label], truth: &[Label]) -> Result<MetricsReport> {
    if predictions.len() != truth.len() {
        return Err(Error::Dimension {
            expected: truth.len(),
            found: predictions.len(),
        });
    }
    if truth.is_empty() {
        return Err(Error::Empty("predictions"));
    }
    let (mut tp, mut tn, mut fp, mut fn_) = (0, 0, 0, 0);
    for (p, t) in predictions.iter().zip(truth) {
        match (p.is_positive(), t.is_positive()) {
            (true, true) => tp += 1,
            (false, false) => tn += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
        }
    }
    let ratio = |a: usize, b: usize| {
        if b == 0 {
            f64::NAN
        } else {
            a as f64 / b as f64
        }
    };
    Ok(MetricsReport {
        tp,
        tn,
        fp,
        fn_,
        accuracy: ratio(tp + tn, truth.len()),
        tpr: ratio(tp, tp + fn_),
        tnr: ratio(tn, tn + fp),
    })
}

// ---------------------------------------------------------------- features

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    RawPixels,
    Embedding(usize),
}

/// Row-major sample × feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub provenance: Provenance,
    cols: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(provenance: Provenance, cols: usize, data: Vec<f64>) -> Result<Self> {
        if cols == 0 || !data.len().is_multiple_of(cols) {
            return Err(Error::shape(
                "feature_matrix",
                format!("{} values do not form rows of {cols}", data.len()),
            ));
        }
        Ok(FeatureMatrix {
            provenance,
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.cols
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn select(&self, indices: &[usize]) -> FeatureMatrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        FeatureMatrix {
            provenance: self.provenance,
            cols: self.cols,
            data,
        }
    }

    /// Flattened pixels of each image, keeping every `stride`-th pixel.
    pub fn from_images(images: &[Image], stride: usize) -> Result<Self> {
        let stride = stride.max(1);
        let first = images.first().ok_or(Error::Empty("images"))?;
        let cols = first.pixels().len().div_ceil(stride);
        let mut data = Vec::with_capacity(images.len() * cols);
        for img in images {
            img.ensure_standard()?;
            data.extend(img.pixels().iter().step_by(stride));
        }
        FeatureMatrix::new(Provenance::RawPixels, cols, data)
    }
}

/// Raw-pixel training sets above this size are subsampled to every 4th pixel
/// unless full resolution is requested.
pub const RAW_PIXEL_SUBSAMPLE_ABOVE: usize = 10_000;

pub fn raw_pixel_stride(samples: usize, full_resolution: bool) -> usize {
    if !full_resolution && samples > RAW_PIXEL_SUBSAMPLE_ABOVE {
        4
    } else {
        1
    }
}

pub const EMBEDDING_DIMS: [usize; 3] = [512, 2048, 49];

/// Embeddings CSV: `sample_id,f1..fD`, with an optional header row.
pub fn load_embeddings(
    path: impl AsRef<Path>,
    expected_dim: usize,
) -> Result<(Vec<String>, FeatureMatrix)> {
    let path = path.as_ref();
    if !EMBEDDING_DIMS.contains(&expected_dim) {
        return Err(Error::InvalidArgument(format!(
            "embedding dimension {expected_dim} not in {EMBEDDING_DIMS:?}"
        )));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::csv(path, e))?;
    let mut ids = Vec::new();
    let mut data = Vec::new();
    for (line, row) in reader.records().enumerate() {
        let row = row.map_err(|e| Error::csv(path, e))?;
        let found = row.len().saturating_sub(1);
        if found != expected_dim {
            return Err(Error::Dimension {
                expected: expected_dim,
                found,
            });
        }
        let values: std::result::Result<Vec<f64>, _> = row
            .iter()
            .skip(1)
            .map(|v| v.trim().parse::<f64>())
            .collect();
        match values {
            Ok(v) => {
                ids.push(row[0].to_string());
                data.extend(v);
            }
            Err(_) if line == 0 => continue,
            Err(e) => {
                return Err(Error::Validation(format!(
                    "{}: row {}: {e}",
                    path.display(),
                    line + 1
                )))
            }
        }
    }
    if ids.is_empty() {
        return Err(Error::Empty("embeddings file"));
    }
    Ok((
        ids,
        FeatureMatrix::new(Provenance::Embedding(expected_dim), expected_dim, data)?,
    ))
}

/// Labels for embedding ids, matched against manifest image paths or their
/// file stems.
pub fn labels_for_ids(manifest: &Manifest, ids: &[String]) -> Result<Vec<Label>> {
    let mut by_id = HashMap::new();
    for r in &manifest.records {
        by_id.insert(r.path.clone(), r.label);
        if let Some(stem) = Path::new(&r.path).file_stem() {
            by_id.insert(stem.to_string_lossy().into_owned(), r.label);
        }
    }
    ids.iter()
        .map(|id| {
            by_id
                .get(id)
                .copied()
                .ok_or_else(|| Error::Validation(format!("embedding id `{id}` not in manifest")))
        })
        .collect()
}

// --------------------------------------------------------------------- SVM

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SvmParams {
    pub c: f64,
    pub gamma: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl SvmParams {
    pub fn new(c: f64, gamma: f64) -> Self {
        SvmParams {
            c,
            gamma,
            tolerance: 1e-3,
            max_iterations: 1_000_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SvmModel {
    pub support_vectors: FeatureMatrix,
    /// `αᵢ yᵢ` for each support vector.
    pub coefficients: Vec<f64>,
    pub bias: f64,
    pub gamma: f64,
    pub c: f64,
    /// Dual variables of every training sample, in training order.
    pub alphas: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

fn rbf(a: &[f64], b: &[f64], gamma: f64) -> f64 {
    (-gamma * a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()).exp()
}

fn sign(label: Label) -> f64 {
    if label.is_positive() {
        1.0
    } else {
        -1.0
    }
}

/// Kernel rows computed on demand and kept in a bounded FIFO cache.
struct KernelCache<'a> {
    x: &'a FeatureMatrix,
    gamma: f64,
    rows: HashMap<usize, Vec<f64>>,
    order: std::collections::VecDeque<usize>,
    capacity: usize,
}

impl<'a> KernelCache<'a> {
    fn new(x: &'a FeatureMatrix, gamma: f64) -> Self {
        let n = x.rows();
        // about 256 MB of rows
        let capacity = ((32usize << 20) / n.max(1)).clamp(2, n.max(2));
        KernelCache {
            x,
            gamma,
            rows: HashMap::new(),
            order: Default::default(),
            capacity,
        }
    }

    fn row(&mut self, i: usize) -> &[f64] {
        if !self.rows.contains_key(&i) {
            if self.order.len() >= self.capacity {
                if let Some(old) = self.order.pop_front() {
                    self.rows.remove(&old);
                }
            }
            let xi = self.x.row(i);
            let row: Vec<f64> = (0..self.x.rows())
                .into_par_iter()
                .map(|j| rbf(xi, self.x.row(j), self.gamma))
                .collect();
            self.rows.insert(i, row);
            self.order.push_back(i);
        }
        &self.rows[&i]
    }
}

/// Soft-margin dual solved by SMO with second-order working-set selection.
pub fn svm_train(
    features: &FeatureMatrix,
    labels: &[Label],
    params: SvmParams,
) -> Result<SvmModel> {
    let n = features.rows();
    if labels.len() != n {
        return Err(Error::Dimension {
            expected: n,
            found: labels.len(),
        });
    }
    if !(params.c > 0.0 && params.gamma > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "C ({}) and gamma ({}) must be positive",
            params.c, params.gamma
        )));
    }
    let positives = labels.iter().filter(|l| l.is_positive()).count();
    if positives == 0 || positives == n {
        return Err(Error::SingleClass);
    }
    let y: Vec<f64> = labels.iter().map(|&l| sign(l)).collect();
    let c = params.c;
    let mut alpha = vec![0.0; n];
    let mut grad = vec![-1.0; n];
    let mut cache = KernelCache::new(features, params.gamma);
    let up = |a: f64, y: f64| (y > 0.0 && a < c) || (y < 0.0 && a > 0.0);
    let low = |a: f64, y: f64| (y < 0.0 && a < c) || (y > 0.0 && a > 0.0);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < params.max_iterations {
        let mut i = usize::MAX;
        let mut gmax = f64::NEG_INFINITY;
        for t in 0..n {
            if up(alpha[t], y[t]) && -y[t] * grad[t] > gmax {
                gmax = -y[t] * grad[t];
                i = t;
            }
        }
        let gmin = (0..n)
            .filter(|&t| low(alpha[t], y[t]))
            .map(|t| -y[t] * grad[t])
            .fold(f64::INFINITY, f64::min);
        if i == usize::MAX || gmax - gmin < params.tolerance {
            converged = true;
            break;
        }
        let ki = cache.row(i).to_vec();
        let mut j = usize::MAX;
        let mut best = f64::INFINITY;
        for t in 0..n {
            if !low(alpha[t], y[t]) {
                continue;
            }
            let b = gmax + y[t] * grad[t];
            if b > 0.0 {
                let a = (ki[i] + 1.0 - 2.0 * ki[t]).max(1e-12);
                if -b * b / a < best {
                    best = -b * b / a;
                    j = t;
                }
            }
        }
        if j == usize::MAX {
            converged = true;
            break;
        }
        let kj = cache.row(j).to_vec();
        let (ai, aj) = (alpha[i], alpha[j]);
        let quad = (ki[i] + kj[j] - 2.0 * ki[j]).max(1e-12);
        if y[i] != y[j] {
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 && alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = diff;
            } else if diff <= 0.0 && alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 && alpha[i] > c {
                alpha[i] = c;
                alpha[j] = c - diff;
            } else if diff <= 0.0 && alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c && alpha[i] > c {
                alpha[i] = c;
                alpha[j] = sum - c;
            } else if sum <= c && alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c && alpha[j] > c {
                alpha[j] = c;
                alpha[i] = sum - c;
            } else if sum <= c && alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let (di, dj) = (alpha[i] - ai, alpha[j] - aj);
        for t in 0..n {
            grad[t] += y[t] * (y[i] * ki[t] * di + y[j] * kj[t] * dj);
        }
        iterations += 1;
    }
    if !converged {
        log::warn!(
            "SMO stopped after {iterations} iterations without reaching KKT tolerance {}",
            params.tolerance
        );
    }

    // bias from free support vectors, else the midpoint of the feasible range
    let free: Vec<f64> = (0..n)
        .filter(|&t| alpha[t] > 0.0 && alpha[t] < c)
        .map(|t| y[t] * grad[t])
        .collect();
    let rho = if free.is_empty() {
        let ub = (0..n)
            .filter(|&t| up(alpha[t], y[t]))
            .map(|t| y[t] * grad[t])
            .fold(f64::INFINITY, f64::min);
        let lb = (0..n)
            .filter(|&t| low(alpha[t], y[t]))
            .map(|t| y[t] * grad[t])
            .fold(f64::NEG_INFINITY, f64::max);
        0.5 * (ub + lb)
    } else {
        free.iter().sum::<f64>() / free.len() as f64
    };
    let sv: Vec<usize> = (0..n).filter(|&t| alpha[t] > 0.0).collect();
    Ok(SvmModel {
        support_vectors: features.select(&sv),
        coefficients: sv.iter().map(|&t| alpha[t] * y[t]).collect(),
        bias: -rho,
        gamma: params.gamma,
        c,
        alphas: alpha,
        converged,
        iterations,
    })
}

impl SvmModel {
    pub fn decision(&self, x: &[f64]) -> f64 {
        self.coefficients
            .iter()
            .enumerate()
            .map(|(k, a)| a * rbf(self.support_vectors.row(k), x, self.gamma))
            .sum::<f64>()
            + self.bias
    }

    pub fn predict(&self, x: &[f64]) -> Label {
        if self.decision(x) > 0.0 {
            Label::Alcohol
        } else {
            Label::NoAlcohol
        }
    }

    pub fn predict_all(&self, features: &FeatureMatrix) -> Vec<Label> {
        (0..features.rows())
            .into_par_iter()
            .map(|i| self.predict(features.row(i)))
            .collect()
    }

    /// CSV blocks: hyperparameters, then `coef,f1..fD` per support vector.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("# hyperparameters\nkey,value\n");
        let _ = writeln!(
            out,
            "gamma,{}\nc,{}\nbias,{}",
            self.gamma, self.c, self.bias
        );
        let _ = writeln!(
            out,
            "# support_vectors\ncoef{}",
            (1..=self.support_vectors.cols())
                .map(|k| format!(",f{k}"))
                .collect::<String>()
        );
        for (k, a) in self.coefficients.iter().enumerate() {
            let _ = write!(out, "{a}");
            for v in self.support_vectors.row(k) {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_csv().as_bytes())
    }

    pub fn from_csv(text: &str, path: &Path) -> Result<Self> {
        let bad = |line: usize, msg: &str| Error::Format {
            path: path.to_path_buf(),
            offset: line,
            msg: msg.to_string(),
        };
        let mut hyper = HashMap::new();
        let mut coefficients = Vec::new();
        let mut data = Vec::new();
        let mut cols = 0;
        let mut block = "";
        for (ln, line) in text.lines().enumerate() {
            if let Some(name) = line.strip_prefix("# ") {
                block = if name == "hyperparameters" { "h" } else { "s" };
                continue;
            }
            if line.starts_with("key,") || line.starts_with("coef") {
                cols = line.split(',').count().saturating_sub(1);
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            match block {
                "h" if fields.len() == 2 => {
                    let v: f64 = fields[1].parse().map_err(|_| bad(ln, "bad number"))?;
                    hyper.insert(fields[0].to_string(), v);
                }
                "s" if fields.len() == cols + 1 => {
                    let nums: std::result::Result<Vec<f64>, _> =
                        fields.iter().map(|f| f.parse::<f64>()).collect();
                    let nums = nums.map_err(|_| bad(ln, "bad number"))?;
                    coefficients.push(nums[0]);
                    data.extend_from_slice(&nums[1..]);
                }
                _ => return Err(bad(ln, "unexpected line")),
            }
        }
        let get = |k: &str| {
            hyper
                .get(k)
                .copied()
                .ok_or_else(|| bad(0, &format!("missing {k}")))
        };
        Ok(SvmModel {
            support_vectors: FeatureMatrix::new(Provenance::RawPixels, cols.max(1), data)?,
            alphas: coefficients.iter().map(|c: &f64| c.abs()).collect(),
            coefficients,
            bias: get("bias")?,
            gamma: get("gamma")?,
            c: get("c")?,
            converged: true,
            iterations: 0,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text, path)
    }
}

// -------------------------------------------------------- cross-validation

/// Stratified assignment of samples to `folds` folds.
pub fn stratified_folds(labels: &[Label], folds: usize, seed: u64) -> Result<Vec<usize>> {
    if folds < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 folds, got {folds}"
        )));
    }
    let mut assignment = vec![0; labels.len()];
    let mut offset = 0;
    for (k, class) in Label::ALL.into_iter().enumerate() {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if idx.len() < folds {
            return Err(Error::InvalidArgument(format!(
                "{folds} folds exceed the {} samples of class {class}",
                idx.len()
            )));
        }
        idx.shuffle(&mut stream(seed, "folds", k as u64));
        for (pos, i) in idx.into_iter().enumerate() {
            assignment[i] = (pos + offset) % folds;
        }
        offset += 1;
    }
    Ok(assignment)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CvRow {
    pub c: f64,
    pub gamma: f64,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CvResult {
    pub best: CvRow,
    pub table: Vec<CvRow>,
}

impl fmt::Display for CvRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "C={} gamma={}: {}% +/- {}",
            self.c,
            self.gamma,
            percent(self.mean_accuracy),
            percent(self.std_accuracy)
        )
    }
}

/// Grid search over `(C, gamma)` by stratified k-fold accuracy. Ties go to
/// the earlier grid entry.
pub fn svm_cross_validate(
    features: &FeatureMatrix,
    labels: &[Label],
    folds: usize,
    grid: &[(f64, f64)],
    seed: u64,
) -> Result<CvResult> {
    if grid.is_empty() {
        return Err(Error::Empty("parameter grid"));
    }
    let assignment = stratified_folds(labels, folds, seed)?;
    let mut table = Vec::new();
    for &(c, gamma) in grid {
        let mut accs = Vec::with_capacity(folds);
        for f in 0..folds {
            let train: Vec<usize> = (0..labels.len()).filter(|&i| assignment[i] != f).collect();
            let test: Vec<usize> = (0..labels.len()).filter(|&i| assignment[i] == f).collect();
            let ytr: Vec<Label> = train.iter().map(|&i| labels[i]).collect();
            let yte: Vec<Label> = test.iter().map(|&i| labels[i]).collect();
            let model = svm_train(&features.select(&train), &ytr, SvmParams::new(c, gamma))?;
            let pred = model.predict_all(&features.select(&test));
            accs.push(confusion_metrics(&pred, &yte)?.accuracy);
        }
        let mean = accs.iter().sum::<f64>() / folds as f64;
        let std = (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / folds as f64).sqrt();
        table.push(CvRow {
            c,
            gamma,
            mean_accuracy: mean,
            std_accuracy: std,
        });
    }
    let best = table
        .iter()
        .fold(None::<&CvRow>, |b, r| match b {
            Some(b) if b.mean_accuracy >= r.mean_accuracy => Some(b),
            _ => Some(r),
        })
        .cloned()
        .expect("grid is non-empty");
    Ok(CvResult { best, table })
}

#[derive(Clone, Debug)]
pub struct SvmProtocolResult {
    pub cv: CvResult,
    pub model: SvmModel,
    pub test_metrics: MetricsReport,
}

/// Stratified 60/40 split, k-fold selection on the 60 %, refit, and
/// evaluation on the held-out 40 %.
pub fn svm_protocol(
    features: &FeatureMatrix,
    labels: &[Label],
    folds: usize,
    grid: &[(f64, f64)],
    seed: u64,
) -> Result<SvmProtocolResult> {
    let holdout = stratified_folds(labels, 5, seed ^ 0x5eed)?;
    let train: Vec<usize> = (0..labels.len()).filter(|&i| holdout[i] < 3).collect();
    let test: Vec<usize> = (0..labels.len()).filter(|&i| holdout[i] >= 3).collect();
    let ytr: Vec<Label> = train.iter().map(|&i| labels[i]).collect();
    let yte: Vec<Label> = test.iter().map(|&i| labels[i]).collect();
    let xtr = features.select(&train);
    let cv = svm_cross_validate(&xtr, &ytr, folds, grid, seed)?;
    let model = svm_train(&xtr, &ytr, SvmParams::new(cv.best.c, cv.best.gamma))?;
    let test_metrics = confusion_metrics(&model.predict_all(&features.select(&test)), &yte)?;
    Ok(SvmProtocolResult {
        cv,
        model,
        test_metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn labels(bits: &[bool]) -> Vec<Label> {
        bits.iter()
            .map(|&b| if b { Label::Alcohol } else { Label::NoAlcohol })
            .collect()
    }

    #[test]
    fn metric_examples() {
        let t = labels(&[true, true, false, false]);
        let m = confusion_metrics(&t, &t).unwrap();
        assert_eq!((m.accuracy, m.tpr, m.tnr), (1.0, 1.0, 1.0));
        let all = labels(&[true; 4]);
        let m = confusion_metrics(&all, &t).unwrap();
        assert_eq!((m.accuracy, m.tpr, m.tnr), (0.5, 1.0, 0.0));
        assert!(confusion_metrics(&[], &[]).is_err());
        assert!(confusion_metrics(&all[..3], &t).is_err());
        assert_eq!(percent(0.923_5), "92.35");
    }

    fn clouds(n: usize, seed: u64) -> (FeatureMatrix, Vec<Label>) {
        let mut rng = stream(seed, "t", 0);
        let mut data = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let pos = i % 2 == 0;
            let c = if pos { 2.0 } else { -2.0 };
            data.push(c + rng.gen_range(-0.7..0.7));
            data.push(c + rng.gen_range(-0.7..0.7));
            y.push(if pos {
                Label::Alcohol
            } else {
                Label::NoAlcohol
            });
        }
        (
            FeatureMatrix::new(Provenance::RawPixels, 2, data).unwrap(),
            y,
        )
    }

    #[test]
    fn separable_clouds() {
        let (x, y) = clouds(40, 1);
        let m = svm_train(&x, &y, SvmParams::new(1.0, 0.5)).unwrap();
        assert!(m.converged);
        assert_eq!(m.predict_all(&x), y);
        let s: f64 = m.alphas.iter().zip(&y).map(|(a, &l)| a * sign(l)).sum();
        assert!(s.abs() < 1e-8, "{s}");
        assert!(m.alphas.iter().all(|&a| (0.0..=1.0).contains(&a)));
    }

    #[test]
    fn xor_needs_the_kernel() {
        let x = FeatureMatrix::new(
            Provenance::RawPixels,
            2,
            vec![0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 0.0],
        )
        .unwrap();
        let y = labels(&[true, true, false, false]);
        let m = svm_train(&x, &y, SvmParams::new(10.0, 2.0)).unwrap();
        assert_eq!(m.predict_all(&x), y);
    }

    #[test]
    fn single_class_rejected() {
        let (x, _) = clouds(4, 0);
        assert!(matches!(
            svm_train(&x, &labels(&[true; 4]), SvmParams::new(1.0, 1.0)),
            Err(Error::SingleClass)
        ));
    }

    #[test]
    fn model_csv_round_trip() {
        let (x, y) = clouds(20, 2);
        let m = svm_train(&x, &y, SvmParams::new(1.0, 0.5)).unwrap();
        let back = SvmModel::from_csv(&m.to_csv(), Path::new("m.csv")).unwrap();
        for i in 0..x.rows() {
            assert_eq!(back.decision(x.row(i)), m.decision(x.row(i)));
        }
    }

    #[test]
    fn folds_partition_and_grid_of_one() {
        let (x, y) = clouds(30, 3);
        let a = stratified_folds(&y, 5, 9).unwrap();
        let mut counts = [0; 5];
        a.iter().for_each(|&f| counts[f] += 1);
        assert_eq!(counts, [6; 5]);
        let cv = svm_cross_validate(&x, &y, 5, &[(1.0, 0.5)], 0).unwrap();
        assert_eq!((cv.best.c, cv.best.gamma), (1.0, 0.5));
        assert!(stratified_folds(&y[..6], 5, 0).is_err());
        assert!(format!("{}", cv.best).contains("+/-"));
    }

    #[test]
    fn embeddings() {
        let dir = tempfile::tempdir().unwrap();
        let row = |id: &str, d: usize| format!("{id}{}\n", ",0.5".repeat(d));
        let good = dir.path().join("good.csv");
        std::fs::write(
            &good,
            format!(
                "sample_id{}\n{}{}",
                (1..=512).map(|k| format!(",f{k}")).collect::<String>(),
                row("a", 512),
                row("b", 512)
            ),
        )
        .unwrap();
        let (ids, m) = load_embeddings(&good, 512).unwrap();
        assert_eq!((ids.len(), m.cols()), (2, 512));
        let short = dir.path().join("short.csv");
        std::fs::write(&short, row("a", 511)).unwrap();
        assert!(matches!(
            load_embeddings(&short, 512),
            Err(Error::Dimension {
                expected: 512,
                found: 511
            })
        ));
        let empty = dir.path().join("empty.csv");
        std::fs::write(&empty, "").unwrap();
        assert!(load_embeddings(&empty, 512).is_err());
    }

    proptest! {
        #[test]
        fn confusion_identities(v in proptest::collection::vec((any::<bool>(), any::<bool>()), 1..100)) {
            let p: Vec<Label> = labels(&v.iter().map(|x| x.0).collect::<Vec<_>>());
            let t: Vec<Label> = labels(&v.iter().map(|x| x.1).collect::<Vec<_>>());
            let m = confusion_metrics(&p, &t).unwrap();
            prop_assert_eq!(m.positives(), v.iter().filter(|x| x.1).count());
            prop_assert_eq!(m.negatives(), v.iter().filter(|x| !x.1).count());
            prop_assert_eq!(m.total(), v.len());
        }

        #[test]
        fn svm_is_order_invariant(seed in 0u64..20) {
            let (x, y) = clouds(24, seed);
            let m = svm_train(&x, &y, SvmParams::new(1.0, 0.5)).unwrap();
            let mut perm: Vec<usize> = (0..24).collect();
            perm.shuffle(&mut stream(seed, "perm", 0));
            let yp: Vec<Label> = perm.iter().map(|&i| y[i]).collect();
            let mp = svm_train(&x.select(&perm), &yp, SvmParams::new(1.0, 0.5)).unwrap();
            let probe = clouds(50, seed + 100).0;
            prop_assert_eq!(m.predict_all(&probe), mp.predict_all(&probe));
        }
    }
}
