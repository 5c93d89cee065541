//! Trainable classifiers, SGD, evaluation, grid search and checkpoints.

mod capsnet;
mod checkpoint;
mod layers;
mod vgg;

use std::cmp::Ordering;
use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use rayon::prelude::*;

pub use capsnet::{
    build_capsnet, build_fcapsnet, Arch, CapsModel, CapsOutput, FCapsNetConfig, Mask,
    FILTER_OPTIONS, KERNEL_SIZES,
};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use layers::{Conv2d, Dense};
pub use vgg::{SmallVgg, SmallVggConfig, VggOutput};

use crate::baselines::{confusion_metrics, MetricsReport};
use crate::capsule::{count_parameters, Parameterized, CAPSULE_COUNTS, MAX_ROUTING_ITERATIONS};
use crate::data::{synth_image, Label, Manifest, Preset, Session, SubjectParams, SynthSpec};
use crate::rng::stream;
use crate::tensor::{GradCheckOptions, Graph};
use crate::{Error, Image, Result};

/// Any classifier that can be trained by [`train`].
#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Caps(CapsModel),
    SmallVgg(SmallVgg),
}

impl Model {
    pub fn name(&self) -> String {
        match self {
            Model::Caps(m) => m.arch().to_string(),
            Model::SmallVgg(_) => "smallvgg".into(),
        }
    }

    /// Per-class scores: capsule lengths or softmax probabilities.
    pub fn scores(&self, image: &Image) -> Result<[f64; 2]> {
        match self {
            Model::Caps(m) => m.scores(image),
            Model::SmallVgg(m) => m.scores(image),
        }
    }

    pub fn classify(&self, image: &Image) -> Result<(Label, [f64; 2])> {
        let s = self.scores(image)?;
        Ok((Label::from_class(capsnet::argmax(&s))?, s))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(self, path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        load_checkpoint(path)
    }

    /// Loss and parameter gradients for one sample. `noise_index` selects the
    /// dropout stream.
    fn sample_gradient(
        &self,
        image: &Image,
        label: Label,
        schedule: FusionSchedule,
        seed: u64,
        noise_index: u64,
    ) -> Result<SampleGrad> {
        let mut g = Graph::new();
        let (params, loss, scores) = match self {
            Model::Caps(m) => {
                let only = match schedule {
                    FusionSchedule::Joint => None,
                    FusionSchedule::ClassRouted => m.branch_for(label),
                };
                let params = m.leaves(&mut g, only);
                let out = m.forward(&mut g, &params, image, Mask::Label(label))?;
                let loss = m.loss(&mut g, &out, image, label)?;
                let n = g.value(out.norms);
                (params, loss, [n[0], n[1]])
            }
            Model::SmallVgg(m) => {
                let mut rng = stream(seed, "dropout", noise_index);
                let params = m.leaves(&mut g);
                let out = m.forward(&mut g, &params, image, Some(&mut rng))?;
                let loss = m.loss(&mut g, &out, label)?;
                let p = g.value(out.probs);
                (params, loss, [p[0], p[1]])
            }
        };
        let value = g.scalar(loss);
        if !value.is_finite() {
            g.check_finite()?;
        }
        g.backward(loss)?;
        Ok(SampleGrad {
            loss: value,
            correct: capsnet::argmax(&scores) == label.class_index(),
            grads: g.into_grads(&params),
        })
    }
}

impl Parameterized for Model {
    fn parameters(&self) -> Vec<&crate::tensor::Tensor> {
        match self {
            Model::Caps(m) => m.parameters(),
            Model::SmallVgg(m) => m.parameters(),
        }
    }

    fn parameters_mut(&mut self) -> Vec<&mut crate::tensor::Tensor> {
        match self {
            Model::Caps(m) => m.parameters_mut(),
            Model::SmallVgg(m) => m.parameters_mut(),
        }
    }
}

struct SampleGrad {
    loss: f64,
    correct: bool,
    grads: Vec<Vec<f64>>,
}

/// Images with labels, all 120×160.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub labels: Vec<Label>,
}

impl Dataset {
    pub fn new(images: Vec<Image>, labels: Vec<Label>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Dimension {
                expected: images.len(),
                found: labels.len(),
            });
        }
        for img in &images {
            img.ensure_standard()?;
        }
        Ok(Dataset { images, labels })
    }

    pub fn from_manifest(manifest: &Manifest) -> Result<Self> {
        Self::new(manifest.load_images()?, manifest.labels())
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// How the fused network's branches receive gradients.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FusionSchedule {
    /// Every image updates both branches.
    #[default]
    Joint,
    /// An image updates only the branch of its own class; the other branch
    /// still contributes to the forward pass.
    ClassRouted,
}

impl std::str::FromStr for FusionSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(FusionSchedule::Joint),
            "class-routed" => Ok(FusionSchedule::ClassRouted),
            _ => Err(Error::Config(format!(
                "unknown fusion schedule `{s}` (joint, class-routed)"
            ))),
        }
    }
}

impl std::fmt::Display for FusionSchedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FusionSchedule::Joint => "joint",
            FusionSchedule::ClassRouted => "class-routed",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainParams {
    pub seed: u64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Ignored by models without branches.
    pub schedule: FusionSchedule,
    /// Scale each sample's loss by `n / (2·n_class)` so both classes carry
    /// equal total weight.
    pub class_balanced: bool,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            seed: 0,
            learning_rate: 1e-5,
            epochs: 100,
            batch_size: 16,
            schedule: FusionSchedule::Joint,
            class_balanced: true,
        }
    }
}

impl TrainParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!(
                "learning rate {} must be finite and >= 0",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean per-sample training loss.
    pub loss: f64,
    /// Training accuracy measured during the epoch.
    pub accuracy: f64,
    pub val_accuracy: Option<f64>,
    pub val_balanced_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainRun {
    pub params: TrainParams,
    pub history: Vec<EpochStats>,
    /// Epoch whose parameters were kept, when training had a validation set.
    pub best_epoch: Option<usize>,
    /// Test metrics, filled in by the caller after evaluation.
    pub final_metrics: Option<MetricsReport>,
}

impl TrainRun {
    pub fn final_loss(&self) -> Option<f64> {
        self.history.last().map(|e| e.loss)
    }

    /// `epoch,loss,accuracy,val_accuracy,val_balanced_accuracy`.
    pub fn history_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        let mut out = String::from("epoch,loss,accuracy,val_accuracy,val_balanced_accuracy\n");
        for e in &self.history {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.epoch + 1,
                e.loss,
                e.accuracy,
                opt(e.val_accuracy),
                opt(e.val_balanced_accuracy)
            ));
        }
        out
    }

    /// Best validation balanced accuracy seen, if validated.
    pub fn best_val_balanced_accuracy(&self) -> Option<f64> {
        self.history
            .iter()
            .filter_map(|e| e.val_balanced_accuracy)
            .fold(None, |b: Option<f64>, v| Some(b.map_or(v, |b| b.max(v))))
    }
}

/// Validation-driven model selection for [`train_validated`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Selection {
    /// Stop after this many epochs without a validation improvement.
    pub patience: Option<usize>,
}

/// Mini-batch SGD. The batch loss is the sum of per-sample losses; sample
/// gradients are computed in parallel and summed in a fixed order, so results
/// do not depend on the thread count.
pub fn train(model: &mut Model, data: &Dataset, params: &TrainParams) -> Result<TrainRun> {
    run_sgd(model, data, None, params)
}

/// [`train`] that scores `val` after every epoch and finishes with the
/// parameters of the first epoch reaching the best validation balanced
/// accuracy, which does not reward predicting the majority class.
pub fn train_validated(
    model: &mut Model,
    data: &Dataset,
    val: &Dataset,
    params: &TrainParams,
    selection: Selection,
) -> Result<TrainRun> {
    if val.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    run_sgd(model, data, Some((val, selection)), params)
}

fn run_sgd(
    model: &mut Model,
    data: &Dataset,
    validation: Option<(&Dataset, Selection)>,
    params: &TrainParams,
) -> Result<TrainRun> {
    params.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let class_weight = class_weights(&data.labels, params.class_balanced);
    let mut history = Vec::with_capacity(params.epochs);
    let mut best: Option<(usize, f64, Model)> = None;
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..params.epochs {
        order.sort_unstable();
        order.shuffle(&mut stream(params.seed, "shuffle", epoch as u64));
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (b, batch) in order.chunks(params.batch_size).enumerate() {
            let base = ((epoch as u64) << 32) | (b * params.batch_size) as u64;
            let snapshot = &*model;
            let samples = batch
                .par_iter()
                .enumerate()
                .map(|(k, &i)| {
                    snapshot.sample_gradient(
                        &data.images[i],
                        data.labels[i],
                        params.schedule,
                        params.seed,
                        base + k as u64,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            for s in &samples {
                loss_sum += s.loss;
                correct += usize::from(s.correct);
            }
            for (t, idx) in model.parameters_mut().into_iter().zip(0..) {
                let values = t.values_mut();
                for (s, &i) in samples.iter().zip(batch) {
                    let step = params.learning_rate * class_weight[data.labels[i].class_index()];
                    for (v, g) in values.iter_mut().zip(&s.grads[idx]) {
                        *v -= step * g;
                    }
                }
                if let Some(j) = values.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        index: idx,
                        op: format!("sgd update (element {j}, epoch {epoch})"),
                    });
                }
            }
        }
        let val_metrics = match validation {
            Some((val, _)) => Some(evaluate(model, val)?),
            None => None,
        };
        let val_accuracy = val_metrics.as_ref().map(|m| m.accuracy);
        let val_balanced_accuracy = val_metrics.as_ref().map(MetricsReport::balanced_accuracy);
        let stats = EpochStats {
            epoch,
            loss: loss_sum / data.len() as f64,
            accuracy: correct as f64 / data.len() as f64,
            val_accuracy,
            val_balanced_accuracy,
        };
        info!(
            "epoch {}/{}: loss {:.6} train acc {:.4}{}",
            epoch + 1,
            params.epochs,
            stats.loss,
            stats.accuracy,
            val_metrics
                .map(|m| format!(
                    " val acc {:.4} balanced {:.4}",
                    m.accuracy,
                    m.balanced_accuracy()
                ))
                .unwrap_or_default()
        );
        history.push(stats);
        if let (Some(acc), Some((_, selection))) = (val_balanced_accuracy, validation) {
            if best.as_ref().is_none_or(|(_, b, _)| acc > *b) {
                best = Some((epoch, acc, model.clone()));
            }
            let since = epoch - best.as_ref().map_or(epoch, |b| b.0);
            if selection.patience.is_some_and(|p| since >= p) {
                info!("no validation improvement for {since} epochs; stopping");
                break;
            }
        }
    }
    let best_epoch = best.map(|(epoch, _, kept)| {
        *model = kept;
        epoch
    });
    Ok(TrainRun {
        params: params.clone(),
        history,
        best_epoch,
        final_metrics: None,
    })
}

/// Short validation runs that pick a learning rate.
#[derive(Clone, Debug, PartialEq)]
pub struct LrSearch {
    pub candidates: Vec<f64>,
    pub probe_epochs: usize,
}

impl Default for LrSearch {
    fn default() -> Self {
        LrSearch {
            candidates: LEARNING_RATES.to_vec(),
            probe_epochs: 4,
        }
    }
}

/// Trains a fresh model from `build` for `probe_epochs` at each candidate
/// rate and returns the rate with the best validation balanced accuracy
/// reached during the probe (earliest candidate on ties), together with
/// every `(rate, score)` pair.
pub fn tune_learning_rate(
    build: impl Fn() -> Result<Model>,
    data: &Dataset,
    val: &Dataset,
    params: &TrainParams,
    search: &LrSearch,
) -> Result<(f64, Vec<(f64, f64)>)> {
    if search.candidates.is_empty() {
        return Err(Error::Empty("learning-rate candidates"));
    }
    let mut scores = Vec::with_capacity(search.candidates.len());
    for &lr in &search.candidates {
        let mut model = build()?;
        let p = TrainParams {
            learning_rate: lr,
            epochs: search.probe_epochs,
            ..params.clone()
        };
        let acc = match train_validated(&mut model, data, val, &p, Selection { patience: None }) {
            Ok(run) => run
                .best_val_balanced_accuracy()
                .unwrap_or(f64::NEG_INFINITY),
            Err(e @ Error::NonFinite { .. }) => {
                warn!("learning rate {lr} diverged: {e}");
                f64::NEG_INFINITY
            }
            Err(e) => return Err(e),
        };
        info!("learning rate {lr}: val accuracy {acc:.4}");
        scores.push((lr, acc));
    }
    let best = scores
        .iter()
        .fold(scores[0], |b, &s| if s.1 > b.1 { s } else { b });
    Ok((best.0, scores))
}

fn class_weights(labels: &[Label], balanced: bool) -> [f64; 2] {
    if !balanced {
        return [1.0; 2];
    }
    let mut counts = [0usize; 2];
    for l in labels {
        counts[l.class_index()] += 1;
    }
    counts.map(|c| {
        if c == 0 {
            1.0
        } else {
            labels.len() as f64 / (2 * c) as f64
        }
    })
}

pub fn predict(model: &Model, data: &Dataset) -> Result<Vec<Label>> {
    data.images
        .par_iter()
        .map(|img| model.classify(img).map(|(l, _)| l))
        .collect()
}

pub fn evaluate(model: &Model, data: &Dataset) -> Result<MetricsReport> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    confusion_metrics(&predict(model, data)?, &data.labels)
}

/// Hyperparameter axes; the candidate order nests them as listed.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSpace {
    pub num_capsules: Vec<usize>,
    pub routing_iterations: Vec<usize>,
    pub kernel_sizes: Vec<usize>,
    pub filters: Vec<usize>,
    pub reconstruction_weights: Vec<f64>,
    pub learning_rates: Vec<f64>,
}

pub const RECONSTRUCTION_WEIGHTS: [f64; 6] = [0.0, 0.5, 0.05, 0.005, 0.0005, 0.00005];
pub const LEARNING_RATES: [f64; 3] = [1e-3, 1e-4, 1e-5];

impl GridSpace {
    pub fn full() -> Self {
        GridSpace {
            num_capsules: CAPSULE_COUNTS.to_vec(),
            routing_iterations: (1..=MAX_ROUTING_ITERATIONS).collect(),
            kernel_sizes: KERNEL_SIZES.to_vec(),
            filters: FILTER_OPTIONS.to_vec(),
            reconstruction_weights: RECONSTRUCTION_WEIGHTS.to_vec(),
            learning_rates: LEARNING_RATES.to_vec(),
        }
    }

    pub fn single(config: &FCapsNetConfig, learning_rate: f64) -> Self {
        GridSpace {
            num_capsules: vec![config.num_capsules],
            routing_iterations: vec![config.routing_iterations],
            kernel_sizes: vec![config.kernel_size],
            filters: vec![config.filters],
            reconstruction_weights: vec![config.loss.reconstruction_weight],
            learning_rates: vec![learning_rate],
        }
    }

    pub fn len(&self) -> usize {
        self.num_capsules.len()
            * self.routing_iterations.len()
            * self.kernel_sizes.len()
            * self.filters.len()
            * self.reconstruction_weights.len()
            * self.learning_rates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every candidate, with the remaining fields taken from `base`.
    pub fn candidates(&self, base: &FCapsNetConfig) -> Vec<(FCapsNetConfig, f64)> {
        let mut out = Vec::with_capacity(self.len());
        for &n in &self.num_capsules {
            for &r in &self.routing_iterations {
                for &k in &self.kernel_sizes {
                    for &f in &self.filters {
                        for &w in &self.reconstruction_weights {
                            for &lr in &self.learning_rates {
                                let mut c = base.clone();
                                c.num_capsules = n;
                                c.routing_iterations = r;
                                c.kernel_size = k;
                                c.filters = f;
                                c.loss.reconstruction_weight = w;
                                out.push((c, lr));
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridRow {
    pub index: usize,
    pub config: FCapsNetConfig,
    pub learning_rate: f64,
    pub parameters: usize,
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridResult {
    /// In candidate order.
    pub rows: Vec<GridRow>,
    /// Index into `rows` of the selected configuration.
    pub best: usize,
}

impl GridResult {
    pub fn best_row(&self) -> &GridRow {
        &self.rows[self.best]
    }

    /// Rows from best to worst under the selection order.
    pub fn ranked(&self) -> Vec<&GridRow> {
        let mut r: Vec<&GridRow> = self.rows.iter().collect();
        r.sort_by(|a, b| rank(a, b));
        r
    }
}

/// Higher validation accuracy, then fewer parameters, then earlier candidate.
fn rank(a: &GridRow, b: &GridRow) -> Ordering {
    let acc = |r: &GridRow| {
        if r.metrics.accuracy.is_nan() {
            f64::NEG_INFINITY
        } else {
            r.metrics.accuracy
        }
    };
    acc(b)
        .total_cmp(&acc(a))
        .then(a.parameters.cmp(&b.parameters))
        .then(a.index.cmp(&b.index))
}

/// Trains one model per candidate on `train_set` and scores it on `val_set`.
/// `params.learning_rate` is ignored in favour of the grid's.
pub fn grid_search(
    arch: Arch,
    base: &FCapsNetConfig,
    space: &GridSpace,
    train_set: &Dataset,
    val_set: &Dataset,
    params: &TrainParams,
) -> Result<GridResult> {
    if space.is_empty() {
        return Err(Error::Empty("grid"));
    }
    let mut rows = Vec::with_capacity(space.len());
    for (index, (config, learning_rate)) in space.candidates(base).into_iter().enumerate() {
        let mut model = Model::Caps(CapsModel::new(arch, &config)?);
        let p = TrainParams {
            learning_rate,
            ..params.clone()
        };
        let metrics = match train(&mut model, train_set, &p) {
            Ok(_) => evaluate(&model, val_set)?,
            Err(e @ Error::NonFinite { .. }) => {
                warn!("candidate {index} diverged: {e}");
                MetricsReport::default()
            }
            Err(e) => return Err(e),
        };
        info!("candidate {index}: val accuracy {:.4}", metrics.accuracy);
        rows.push(GridRow {
            index,
            parameters: count_parameters(&model),
            config,
            learning_rate,
            metrics,
        });
    }
    let best = rows
        .iter()
        .min_by(|a, b| rank(a, b))
        .map(|r| r.index)
        .expect("grid is non-empty");
    Ok(GridResult { rows, best })
}

/// Coordinates checked per parameter tensor by [`gradient_check_tiny`].
pub const GRADCHECK_COORDS: usize = 20;
pub const GRADCHECK_EPSILON: f64 = 1e-5;

/// Finite-difference check of the tiny fused network on one sober and one
/// intoxicated synthetic frame.
pub fn gradient_check_tiny(seed: u64) -> Result<f64> {
    let model = build_fcapsnet(&FCapsNetConfig {
        seed,
        ..FCapsNetConfig::tiny()
    })?;
    let spec = SynthSpec::preset(Preset::Separable, seed);
    let subject = SubjectParams::sample(seed, 0);
    let mut rng = stream(seed, "gradcheck", 0);
    let mut samples = Vec::new();
    for session in [Session::S0, Session::S2] {
        let (img, _) = synth_image(
            &subject,
            &spec.sessions[session.index()],
            spec.noise_std,
            &mut rng,
        )?;
        samples.push((img, session.label()));
    }
    model.gradient_check(
        &samples,
        GradCheckOptions::sampled(GRADCHECK_EPSILON, GRADCHECK_COORDS, seed),
    )
}
