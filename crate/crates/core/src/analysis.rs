//! Pupil/iris ratios, radius estimation, per-session histograms and the
//! ratio-threshold classifier.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::baselines::{confusion_metrics, MetricsReport};
use crate::data::{Label, Manifest, Session, SESSION_COUNT};
use crate::image::write_atomic;
use crate::{Error, Image, Result};

/// Normalised pupil-to-iris ratio `Pr / Ir`.
pub fn pupil_iris_ratio(iris_r: f64, pupil_r: f64) -> Result<f64> {
    if !(iris_r > 0.0 && pupil_r > 0.0) || !iris_r.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "radii must be positive (iris {iris_r}, pupil {pupil_r})"
        )));
    }
    if pupil_r >= iris_r {
        return Err(Error::InvalidArgument(format!(
            "pupil radius {pupil_r} must be smaller than iris radius {iris_r}"
        )));
    }
    Ok(pupil_r / iris_r)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RatioRecord {
    /// Index of the record in its manifest.
    pub index: usize,
    pub session: Session,
    pub label: Label,
    pub iris_r: f64,
    pub pupil_r: f64,
    pub ratio: f64,
}

impl RatioRecord {
    /// The un-normalised `Ir / Pr` form.
    pub fn iris_to_pupil(&self) -> f64 {
        self.iris_r / self.pupil_r
    }
}

/// Ratios from the manifest's ground-truth radii.
pub fn ratios_from_truth(manifest: &Manifest) -> Result<Vec<RatioRecord>> {
    manifest
        .records
        .iter()
        .enumerate()
        .map(|(index, r)| {
            let (Some(iris_r), Some(pupil_r)) = (r.iris_r, r.pupil_r) else {
                return Err(Error::Validation(format!(
                    "{}: no ground-truth radii",
                    r.path
                )));
            };
            Ok(RatioRecord {
                index,
                session: r.session,
                label: r.label,
                iris_r,
                pupil_r,
                ratio: pupil_iris_ratio(iris_r, pupil_r)?,
            })
        })
        .collect()
}

/// Ratios measured by [`estimate_radii`] on every image.
pub fn ratios_from_images(manifest: &Manifest) -> Result<Vec<RatioRecord>> {
    manifest
        .records
        .par_iter()
        .enumerate()
        .map(|(index, r)| {
            let est = estimate_radii(&manifest.load_image(r)?)?;
            Ok(RatioRecord {
                index,
                session: r.session,
                label: r.label,
                iris_r: est.iris_r,
                pupil_r: est.pupil_r,
                ratio: pupil_iris_ratio(est.iris_r, est.pupil_r)?,
            })
        })
        .collect()
}

// ------------------------------------------------------- radius estimation

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RadiiEstimate {
    pub iris_r: f64,
    pub pupil_r: f64,
    pub cx: f64,
    pub cy: f64,
}

/// Otsu threshold over values in `[0,1]` (256 bins). `None` when the
/// values do not split into two non-empty classes.
pub fn otsu_threshold(values: &[f64]) -> Option<f64> {
    let mut hist = [0usize; 256];
    for &v in values {
        hist[(v.clamp(0.0, 1.0) * 255.0).round() as usize] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist
        .iter()
        .enumerate()
        .map(|(i, &c)| i as f64 * c as f64)
        .sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let mut best: Option<(f64, usize)> = None;
    for (t, &c) in hist.iter().enumerate().take(255) {
        w0 += c as f64;
        sum0 += t as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (m0 - m1).powi(2);
        if best.is_none_or(|(b, _)| between > b) {
            best = Some((between, t));
        }
    }
    best.map(|(_, t)| (t as f64 + 0.5) / 255.0)
}

/// Least-squares (Kasa) circle through `points` given as `(x, y)`.
/// Returns `(cx, cy, r)`.
pub fn fit_circle(points: &[(f64, f64)]) -> Option<(f64, f64, f64)> {
    if points.len() < 3 {
        return None;
    }
    // minimise Σ (x² + y² + a x + b y + c)²
    let mut m = [[0.0f64; 4]; 3];
    for &(x, y) in points {
        let row = [x, y, 1.0];
        let rhs = -(x * x + y * y);
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] += row[i] * row[j];
            }
            m[i][3] += row[i] * rhs;
        }
    }
    for col in 0..3 {
        let pivot = (col..3).max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs()))?;
        if m[pivot][col].abs() < 1e-12 {
            return None;
        }
        m.swap(col, pivot);
        for r in 0..3 {
            if r != col {
                let f = m[r][col] / m[col][col];
                for k in col..4 {
                    m[r][k] -= f * m[col][k];
                }
            }
        }
    }
    let (a, b, c) = (m[0][3] / m[0][0], m[1][3] / m[1][1], m[2][3] / m[2][2]);
    let (cx, cy) = (-a / 2.0, -b / 2.0);
    let r2 = cx * cx + cy * cy - c;
    (r2 > 0.0).then(|| (cx, cy, r2.sqrt()))
}

/// Circle fit with one round of outlier rejection.
fn robust_circle(points: &[(f64, f64)]) -> Option<(f64, f64, f64)> {
    let (cx, cy, r) = fit_circle(points)?;
    let resid: Vec<f64> = points
        .iter()
        .map(|&(x, y)| ((x - cx).hypot(y - cy) - r).abs())
        .collect();
    let mut sorted = resid.clone();
    sorted.sort_by(f64::total_cmp);
    let cut = (3.0 * sorted[sorted.len() / 2]).max(0.75);
    let kept: Vec<(f64, f64)> = points
        .iter()
        .zip(&resid)
        .filter(|(_, &e)| e <= cut)
        .map(|(p, _)| *p)
        .collect();
    if kept.len() == points.len() {
        Some((cx, cy, r))
    } else {
        fit_circle(&kept)
    }
}

const RAY_STEP: f64 = 0.25;

struct Ray<'a> {
    image: &'a Image,
    cx: f64,
    cy: f64,
    theta: f64,
}

impl Ray<'_> {
    /// Intensity at radius `r`, averaged across a short tangential segment.
    fn at(&self, r: f64) -> f64 {
        let (s, c) = self.theta.sin_cos();
        [-1.0, 0.0, 1.0]
            .iter()
            .map(|t| {
                self.image
                    .sample_bilinear(self.cy + r * s + t * c, self.cx + r * c - t * s)
            })
            .sum::<f64>()
            / 3.0
    }

    fn mean(&self, from: f64, to: f64) -> f64 {
        let n = ((to - from) / RAY_STEP).round().max(1.0) as usize;
        (0..=n)
            .map(|k| self.at(from + k as f64 * RAY_STEP))
            .sum::<f64>()
            / (n + 1) as f64
    }

    /// Sub-pixel rising crossing near `r`, using the midpoint between the
    /// local levels on either side.
    fn refine(&self, r: f64) -> Option<f64> {
        let lo = (r - 4.0).max(0.0);
        let inner = self.mean(lo, (r - 2.0).max(lo));
        let outer = self.mean(r + 2.0, r + 4.0);
        if outer - inner < 0.05 {
            return None;
        }
        let mid = 0.5 * (inner + outer);
        let mut prev = (r - 2.5).max(0.0);
        let mut pv = self.at(prev);
        let mut x = prev + RAY_STEP;
        while x <= r + 2.5 {
            let v = self.at(x);
            if pv < mid && v >= mid {
                return Some(prev + (mid - pv) / (v - pv) * (x - prev));
            }
            prev = x;
            pv = v;
            x += RAY_STEP;
        }
        None
    }
}

/// Largest 4-connected component of `mask`, as pixel indices.
fn largest_component(mask: &[bool], width: usize) -> Vec<usize> {
    let mut seen = vec![false; mask.len()];
    let mut best = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(i) = queue.pop_front() {
            comp.push(i);
            let (y, x) = (i / width, i % width);
            let mut visit = |j: usize| {
                if mask[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < width {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - width);
            }
            if i + width < mask.len() {
                visit(i + width);
            }
        }
        if comp.len() > best.len() {
            best = comp;
        }
    }
    best
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// Estimates pupil and iris circles by thresholding and circle fitting.
///
/// The pupil is the largest component darker than a two-stage Otsu
/// threshold; its boundary is located on 64 rays from the component
/// centroid. The iris boundary is the strongest rising edge on rays within
/// 30° of horizontal, where eyelids do not occlude it.
pub fn estimate_radii(image: &Image) -> Result<RadiiEstimate> {
    let px = image.pixels();
    let t1 = otsu_threshold(px).ok_or(Error::PupilNotFound)?;
    let dark: Vec<f64> = px.iter().copied().filter(|&v| v < t1).collect();
    let t2 = otsu_threshold(&dark).ok_or(Error::PupilNotFound)?;
    let mask: Vec<bool> = px.iter().map(|&v| v < t2).collect();
    let comp = largest_component(&mask, image.width());
    if comp.len() < 12 {
        return Err(Error::PupilNotFound);
    }
    let pupil_level = median(comp.iter().map(|&i| px[i]).collect());
    let iris_vals: Vec<f64> = dark.iter().copied().filter(|&v| v >= t2).collect();
    if iris_vals.is_empty() {
        return Err(Error::PupilNotFound);
    }
    let iris_level = median(iris_vals);
    if iris_level - pupil_level < 0.1 {
        return Err(Error::PupilNotFound);
    }
    let n = comp.len() as f64;
    let cx0 = comp
        .iter()
        .map(|&i| (i % image.width()) as f64)
        .sum::<f64>()
        / n;
    let cy0 = comp
        .iter()
        .map(|&i| (i / image.width()) as f64)
        .sum::<f64>()
        / n;
    let rough = (n / std::f64::consts::PI).sqrt();

    let threshold = 0.5 * (pupil_level + iris_level);
    let mut points = Vec::new();
    for k in 0..64 {
        let ray = Ray {
            image,
            cx: cx0,
            cy: cy0,
            theta: k as f64 * std::f64::consts::TAU / 64.0,
        };
        let mut r = 1.0;
        while r < 3.0 * rough && ray.at(r) < threshold {
            r += RAY_STEP;
        }
        if let Some(edge) = ray.refine(r) {
            let (s, c) = ray.theta.sin_cos();
            points.push((cx0 + edge * c, cy0 + edge * s));
        }
    }
    if points.len() < 8 {
        return Err(Error::PupilNotFound);
    }
    let (cx, cy, pupil_r) = robust_circle(&points).ok_or(Error::PupilNotFound)?;

    let max_r = 0.48 * image.width() as f64;
    let mut points = Vec::new();
    for side in [0.0, std::f64::consts::PI] {
        for k in 0..16 {
            let theta = side + (k as f64 - 7.5) / 7.5 * 30f64.to_radians();
            let ray = Ray {
                image,
                cx,
                cy,
                theta,
            };
            let start = pupil_r * 1.15 + 4.0;
            let mut best = (0.0, f64::NAN);
            let mut r = start;
            while r < max_r {
                let g = ray.at(r + 1.0) - ray.at(r - 1.0);
                if g > best.0 {
                    best = (g, r);
                }
                r += RAY_STEP;
            }
            if best.0 > 0.1 {
                if let Some(edge) = ray.refine(best.1) {
                    let (s, c) = theta.sin_cos();
                    points.push((cx + edge * c, cy + edge * s));
                }
            }
        }
    }
    if points.len() < 8 {
        return Err(Error::IrisNotFound);
    }
    let (_, _, iris_r) = robust_circle(&points).ok_or(Error::IrisNotFound)?;
    if iris_r <= pupil_r {
        return Err(Error::IrisNotFound);
    }
    Ok(RadiiEstimate {
        iris_r,
        pupil_r,
        cx,
        cy,
    })
}

// -------------------------------------------------------------- histograms

#[derive(Clone, Debug, PartialEq)]
pub struct SessionHistogram {
    pub session: Session,
    /// `bins + 1` shared edges spanning `[0, 1]`.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub mean: f64,
    pub std: f64,
}

impl SessionHistogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

fn bin_edges(bins: usize) -> Vec<f64> {
    (0..=bins).map(|i| i as f64 / bins as f64).collect()
}

/// Histogram of values in `[0,1]` over `bins` equal bins.
pub fn histogram(values: &[f64], bins: usize) -> Vec<usize> {
    let mut counts = vec![0; bins];
    for &v in values {
        counts[((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1)] += 1;
    }
    counts
}

/// One histogram per session over shared edges on `[0,1]`.
pub fn session_histograms(ratios: &[RatioRecord], bins: usize) -> Result<Vec<SessionHistogram>> {
    if bins == 0 {
        return Err(Error::InvalidArgument(
            "histograms need at least one bin".into(),
        ));
    }
    Session::ALL
        .into_iter()
        .map(|session| {
            let vals: Vec<f64> = ratios
                .iter()
                .filter(|r| r.session == session)
                .map(|r| r.ratio)
                .collect();
            if vals.is_empty() {
                return Err(Error::Validation(format!(
                    "session {session} has no records"
                )));
            }
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            Ok(SessionHistogram {
                session,
                edges: bin_edges(bins),
                counts: histogram(&vals, bins),
                mean,
                std,
            })
        })
        .collect()
}

/// Overlap coefficient `Σ min(pA, pB)` of two normalised histograms.
pub fn distribution_overlap(a: &SessionHistogram, b: &SessionHistogram) -> Result<f64> {
    if a.edges != b.edges {
        return Err(Error::InvalidArgument(
            "histograms use different bin edges".into(),
        ));
    }
    let (na, nb) = (a.total() as f64, b.total() as f64);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Empty("histogram"));
    }
    Ok(a.counts
        .iter()
        .zip(&b.counts)
        .map(|(&x, &y)| (x as f64 / na).min(y as f64 / nb))
        .sum())
}

/// `session,bin_lo,bin_hi,count` rows.
pub fn histograms_csv(hists: &[SessionHistogram]) -> String {
    let mut out = String::from("session,bin_lo,bin_hi,count\n");
    for h in hists {
        for (i, c) in h.counts.iter().enumerate() {
            let _ = writeln!(out, "{},{},{},{}", h.session, h.edges[i], h.edges[i + 1], c);
        }
    }
    out
}

/// Bar chart of one histogram: black bars on white, 4 px per bin.
pub fn histogram_chart(h: &SessionHistogram) -> Image {
    const HEIGHT: usize = 100;
    let width = 4 * h.counts.len();
    let max = h.counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let mut img = Image::filled(HEIGHT, width, 1.0);
    for (i, &c) in h.counts.iter().enumerate() {
        let bar = ((c as f64 / max) * HEIGHT as f64).round() as usize;
        for y in HEIGHT - bar..HEIGHT {
            for x in 4 * i..4 * i + 3 {
                img.set(y, x, 0.0);
            }
        }
    }
    img
}

/// Writes `histograms.csv` and one `hist_S<k>.pgm` per session to `dir`.
pub fn export_histograms(hists: &[SessionHistogram], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    write_atomic(
        &dir.join("histograms.csv"),
        histograms_csv(hists).as_bytes(),
    )?;
    for h in hists {
        histogram_chart(h).save_pgm(dir.join(format!("hist_{}.pgm", h.session)))?;
    }
    Ok(())
}

// ------------------------------------------------------ threshold classifier

/// A ratio above `dilation` or below `contraction` is classified alcohol.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RatioThresholds {
    pub dilation: f64,
    pub contraction: f64,
}

impl RatioThresholds {
    pub fn new(dilation: f64, contraction: f64) -> Result<Self> {
        if contraction >= dilation {
            return Err(Error::InvalidArgument(format!(
                "contraction threshold {contraction} must be below dilation threshold {dilation}"
            )));
        }
        Ok(RatioThresholds {
            dilation,
            contraction,
        })
    }

    /// Mean ± 2σ of the sober (no-alcohol) ratios.
    pub fn from_sober(ratios: &[RatioRecord]) -> Result<Self> {
        let v: Vec<f64> = ratios
            .iter()
            .filter(|r| r.label == Label::NoAlcohol)
            .map(|r| r.ratio)
            .collect();
        if v.is_empty() {
            return Err(Error::Empty("no-alcohol ratios"));
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        RatioThresholds::new(mean + 2.0 * std, mean - 2.0 * std - f64::EPSILON)
    }

    pub fn classify(&self, ratio: f64) -> Label {
        if ratio > self.dilation || ratio < self.contraction {
            Label::Alcohol
        } else {
            Label::NoAlcohol
        }
    }
}

/// Best single cut found by sweeping every midpoint between sorted ratios.
#[derive(Clone, Debug, PartialEq)]
pub struct SweptThreshold {
    pub threshold: f64,
    /// `true` when ratios above the cut are classified alcohol.
    pub alcohol_above: bool,
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdResult {
    pub metrics: MetricsReport,
    pub best: SweptThreshold,
}

pub fn threshold_classifier(
    ratios: &[RatioRecord],
    thresholds: &RatioThresholds,
) -> Result<ThresholdResult> {
    let truth: Vec<Label> = ratios.iter().map(|r| r.label).collect();
    let pred: Vec<Label> = ratios
        .iter()
        .map(|r| thresholds.classify(r.ratio))
        .collect();
    Ok(ThresholdResult {
        metrics: confusion_metrics(&pred, &truth)?,
        best: sweep_threshold(ratios)?,
    })
}

/// Exhaustive single-threshold oracle. Candidate cuts include both ends
/// of the range, so the result is never worse than the majority class.
pub fn sweep_threshold(ratios: &[RatioRecord]) -> Result<SweptThreshold> {
    if ratios.is_empty() {
        return Err(Error::Empty("ratios"));
    }
    let mut order: Vec<(f64, bool)> = ratios
        .iter()
        .map(|r| (r.ratio, r.label.is_positive()))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0));
    let positives = order.iter().filter(|o| o.1).count();
    let n = order.len();
    // cut k: the first k sorted samples lie below the threshold
    let mut best: Option<(usize, usize, bool)> = None;
    let mut pos_below = 0;
    for k in 0..=n {
        if k > 0 {
            pos_below += usize::from(order[k - 1].1);
        }
        if k > 0 && k < n && order[k - 1].0 == order[k].0 {
            continue;
        }
        let neg_below = k - pos_below;
        let above_correct = (positives - pos_below) + neg_below;
        let below_correct = n - above_correct;
        for (correct, above) in [(above_correct, true), (below_correct, false)] {
            if best.is_none_or(|b| correct > b.0) {
                best = Some((correct, k, above));
            }
        }
    }
    let (_, k, alcohol_above) = best.expect("at least one candidate");
    let threshold = match k {
        0 => order[0].0 - 1e-9,
        k if k == n => order[n - 1].0 + 1e-9,
        k => 0.5 * (order[k - 1].0 + order[k].0),
    };
    let truth: Vec<Label> = ratios.iter().map(|r| r.label).collect();
    let pred: Vec<Label> = ratios
        .iter()
        .map(|r| {
            if (r.ratio > threshold) == alcohol_above {
                Label::Alcohol
            } else {
                Label::NoAlcohol
            }
        })
        .collect();
    Ok(SweptThreshold {
        threshold,
        alcohol_above,
        metrics: confusion_metrics(&pred, &truth)?,
    })
}

/// Session-wise means for quick inspection (index = session number).
pub fn session_means(hists: &[SessionHistogram]) -> [f64; SESSION_COUNT] {
    let mut m = [f64::NAN; SESSION_COUNT];
    for h in hists {
        m[h.session.index()] = h.mean;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{render, synth_image, Preset, SubjectParams, SynthSpec, Truth};
    use crate::rng::stream;
    use proptest::prelude::*;

    #[test]
    fn ratio_examples() {
        assert_eq!(pupil_iris_ratio(60.0, 30.0).unwrap(), 0.5);
        assert!(pupil_iris_ratio(60.0, 59.999).unwrap() > 0.9999);
        assert!(pupil_iris_ratio(30.0, 30.0).is_err());
        assert!(pupil_iris_ratio(30.0, 0.0).is_err());
    }

    #[test]
    fn circle_fit_recovers_circle() {
        let pts: Vec<(f64, f64)> = (0..20)
            .map(|k| {
                let t = k as f64 * 0.3;
                (10.0 + 7.0 * t.cos(), -4.0 + 7.0 * t.sin())
            })
            .collect();
        let (cx, cy, r) = fit_circle(&pts).unwrap();
        assert!((cx - 10.0).abs() < 1e-9 && (cy + 4.0).abs() < 1e-9 && (r - 7.0).abs() < 1e-9);
    }

    #[test]
    fn estimator_on_clean_images() {
        let spec = SynthSpec::preset(Preset::Separable, 11);
        for s in 0..6 {
            let subject = SubjectParams::sample(11, s);
            for session in [0, 2] {
                let mut p = spec.sessions[session];
                p.blur = 1;
                let (img, t) =
                    synth_image(&subject, &p, 0.0, &mut stream(11, "t", s as u64)).unwrap();
                let e = estimate_radii(&img).unwrap();
                assert!(
                    (e.pupil_r / t.pupil_r - 1.0).abs() < 0.02,
                    "pupil {e:?} vs {t:?}"
                );
                assert!(
                    (e.iris_r / t.iris_r - 1.0).abs() < 0.02,
                    "iris {e:?} vs {t:?}"
                );
            }
        }
    }

    #[test]
    fn estimator_is_translation_equivariant() {
        let subject = SubjectParams::sample(3, 1);
        let base = Truth {
            iris_r: 45.0,
            pupil_r: 18.0,
            cx: 79.5,
            cy: 59.5,
        };
        let moved = Truth {
            cx: base.cx + 4.0,
            cy: base.cy - 3.0,
            ..base
        };
        let a =
            estimate_radii(&render(&subject, &base, 0.0, 1, 0.0, &mut stream(0, "t", 0)).unwrap())
                .unwrap();
        let b =
            estimate_radii(&render(&subject, &moved, 0.0, 1, 0.0, &mut stream(0, "t", 0)).unwrap())
                .unwrap();
        assert!((b.cx - a.cx - 4.0).abs() < 1.0 && (b.cy - a.cy + 3.0).abs() < 1.0);
        assert!((a.pupil_r - b.pupil_r).abs() < 1.0 && (a.iris_r - b.iris_r).abs() < 1.0);
    }

    #[test]
    fn white_image_has_no_pupil() {
        assert!(matches!(
            estimate_radii(&Image::standard(1.0)),
            Err(Error::PupilNotFound)
        ));
    }

    fn rec(ratio: f64, label: Label) -> RatioRecord {
        RatioRecord {
            index: 0,
            session: if label == Label::Alcohol {
                Session::S2
            } else {
                Session::S0
            },
            label,
            iris_r: 1.0,
            pupil_r: ratio,
            ratio,
        }
    }

    #[test]
    fn separable_sweep_is_perfect() {
        let mut v: Vec<RatioRecord> = (0..20)
            .map(|i| rec(0.2 + 0.005 * i as f64, Label::NoAlcohol))
            .collect();
        v.extend((0..20).map(|i| rec(0.5 + 0.005 * i as f64, Label::Alcohol)));
        let s = sweep_threshold(&v).unwrap();
        assert_eq!(s.metrics.accuracy, 1.0);
        assert!(s.alcohol_above && s.threshold > 0.3 && s.threshold < 0.5);
    }

    #[test]
    fn degenerate_thresholds_predict_sober() {
        let v = vec![
            rec(0.3, Label::Alcohol),
            rec(0.5, Label::NoAlcohol),
            rec(0.6, Label::Alcohol),
        ];
        let r = threshold_classifier(&v, &RatioThresholds::new(1.0, 0.0).unwrap()).unwrap();
        assert_eq!(r.metrics.tnr, 1.0);
        assert_eq!(r.metrics.tpr, 0.0);
    }

    #[test]
    fn overlap_extremes() {
        let all: Vec<RatioRecord> = Session::ALL
            .iter()
            .flat_map(|&s| {
                (0..10).map(move |i| RatioRecord {
                    session: s,
                    ratio: if s == Session::S1 {
                        0.8
                    } else {
                        0.1 + 0.01 * i as f64
                    },
                    ..rec(0.1, Label::Alcohol)
                })
            })
            .collect();
        let h = session_histograms(&all, 20).unwrap();
        assert_eq!(distribution_overlap(&h[0], &h[2]).unwrap(), 1.0);
        assert_eq!(distribution_overlap(&h[0], &h[1]).unwrap(), 0.0);
        let mut other = h[0].clone();
        other.edges = bin_edges(10);
        assert!(distribution_overlap(&h[0], &other).is_err());
        assert!(session_histograms(&all[..10], 20).is_err());
    }

    #[test]
    fn uniform_ratios_pass_chi_square() {
        use rand::Rng;
        let mut rng = stream(1, "t", 0);
        let v: Vec<RatioRecord> = (0..5000)
            .map(|i| RatioRecord {
                session: Session::ALL[i % 5],
                ratio: rng.gen_range(0.0..1.0),
                ..rec(0.1, Label::Alcohol)
            })
            .collect();
        // 99th percentile of chi-square with 19 degrees of freedom
        const CRITICAL: f64 = 36.191;
        for h in session_histograms(&v, 20).unwrap() {
            let expected = h.total() as f64 / 20.0;
            let chi: f64 = h
                .counts
                .iter()
                .map(|&c| (c as f64 - expected).powi(2) / expected)
                .sum();
            assert!(chi < CRITICAL, "{chi}");
        }
    }

    #[test]
    fn csv_and_chart() {
        let v: Vec<RatioRecord> = Session::ALL
            .iter()
            .map(|&s| RatioRecord {
                session: s,
                ..rec(0.45, Label::Alcohol)
            })
            .collect();
        let h = session_histograms(&v, 4).unwrap();
        let csv = histograms_csv(&h);
        assert!(csv.starts_with("session,bin_lo,bin_hi,count\nS0,0,0.25,0\nS0,0.25,0.5,1\n"));
        let chart = histogram_chart(&h[0]);
        assert_eq!(chart.get(99, 4), 0.0);
        assert_eq!(chart.get(99, 0), 1.0);
    }

    proptest! {
        #[test]
        fn ratio_is_scale_invariant(ir in 1.0f64..100.0, frac in 0.01f64..0.99, alpha in 0.01f64..100.0) {
            let p = pupil_iris_ratio(ir, frac * ir).unwrap();
            let q = pupil_iris_ratio(alpha * ir, alpha * frac * ir).unwrap();
            prop_assert!((p - q).abs() < 1e-12);
        }

        #[test]
        fn sweep_beats_majority(v in proptest::collection::vec((0.0f64..1.0, any::<bool>()), 1..60)) {
            let recs: Vec<RatioRecord> = v
                .iter()
                .map(|&(r, a)| rec(r, if a { Label::Alcohol } else { Label::NoAlcohol }))
                .collect();
            let pos = v.iter().filter(|x| x.1).count() as f64 / v.len() as f64;
            let s = sweep_threshold(&recs).unwrap();
            prop_assert!(s.metrics.accuracy + 1e-12 >= pos.max(1.0 - pos));
        }
    }
}
