//! Small-VGG baseline: three conv/pool blocks, a dropout-regularised dense
//! layer and a two-way softmax.

use rand::Rng;

use super::layers::{Conv2d, Dense};
use crate::capsule::Parameterized;
use crate::data::Label;
use crate::image::{IMAGE_HEIGHT, IMAGE_WIDTH};
use crate::kv::{KvMap, KvWriter};
use crate::rng::stream;
use crate::tensor::{Graph, Tensor, Var};
use crate::{Error, Image, Result};

/// Each block halves both spatial dimensions.
const BLOCKS: usize = 3;
const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct SmallVggConfig {
    pub filters: [usize; BLOCKS],
    pub dense: usize,
    pub dropout: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for SmallVggConfig {
    fn default() -> Self {
        SmallVggConfig {
            filters: [32, 32, 32],
            dense: 7200,
            dropout: 0.5,
            batch_size: 16,
            epochs: 100,
            seed: 0,
        }
    }
}

impl SmallVggConfig {
    pub fn small() -> Self {
        SmallVggConfig {
            filters: [4, 4, 4],
            dense: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.filters.contains(&0) || self.dense == 0 {
            return Err(Error::Config("Small-VGG widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }

    pub fn flat_features(&self) -> usize {
        let f = 1 << BLOCKS;
        self.filters[BLOCKS - 1] * (IMAGE_HEIGHT / f) * (IMAGE_WIDTH / f)
    }

    pub(crate) fn write_kv(&self, w: &mut KvWriter) {
        for (i, f) in self.filters.iter().enumerate() {
            w.put(&format!("filters{}", i + 1), f);
        }
        w.put("dense", self.dense);
        w.put("dropout", self.dropout);
        w.put("batch_size", self.batch_size);
        w.put("epochs", self.epochs);
        w.put("seed", self.seed);
    }

    pub(crate) fn read_kv(kv: &KvMap, base: &Self) -> Result<Self> {
        let mut filters = base.filters;
        for (i, f) in filters.iter_mut().enumerate() {
            *f = kv.get_or(&format!("filters{}", i + 1), *f)?;
        }
        Ok(SmallVggConfig {
            filters,
            dense: kv.get_or("dense", base.dense)?,
            dropout: kv.get_or("dropout", base.dropout)?,
            batch_size: kv.get_or("batch_size", base.batch_size)?,
            epochs: kv.get_or("epochs", base.epochs)?,
            seed: kv.get_or("seed", base.seed)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SmallVgg {
    config: SmallVggConfig,
    convs: Vec<Conv2d>,
    hidden: Dense,
    output: Dense,
}

#[derive(Clone, Debug)]
pub struct VggOutput {
    /// Pre-softmax scores `[2]`.
    pub logits: Var,
    /// Class probabilities `[2]`.
    pub probs: Var,
    pub layers: Vec<(&'static str, Var)>,
}

impl SmallVgg {
    pub fn new(config: &SmallVggConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(config.seed, "init", 0);
        let mut convs = Vec::with_capacity(BLOCKS);
        let mut channels = 1;
        for &f in &config.filters {
            convs.push(Conv2d::new(channels, f, 3, &mut rng));
            channels = f;
        }
        let hidden = Dense::new(config.flat_features(), config.dense, &mut rng);
        let output = Dense::new(config.dense, 2, &mut rng);
        Ok(SmallVgg {
            config: config.clone(),
            convs,
            hidden,
            output,
        })
    }

    pub fn config(&self) -> &SmallVggConfig {
        &self.config
    }

    pub fn leaves<'p>(&'p self, g: &mut Graph<'p>) -> Vec<Var> {
        self.parameters().into_iter().map(|t| g.param(t)).collect()
    }

    /// Dropout is applied only when `dropout_rng` is given.
    pub fn forward<R: Rng>(
        &self,
        g: &mut Graph<'_>,
        params: &[Var],
        image: &Image,
        mut dropout_rng: Option<&mut R>,
    ) -> Result<VggOutput> {
        image.ensure_standard()?;
        const NAMES: [&str; BLOCKS] = ["conv1", "conv2", "conv3"];
        let mut x = g.input(image.to_tensor());
        let mut layers = Vec::new();
        for (b, name) in NAMES.iter().enumerate() {
            let y = Conv2d::forward(g, params[2 * b], params[2 * b + 1], x)?;
            let y = g.relu(y);
            layers.push((*name, y));
            x = g.max_pool(y, 2)?;
        }
        let base = 2 * BLOCKS;
        let mut h = g.flatten(x)?;
        if let Some(rng) = dropout_rng.as_deref_mut() {
            h = self.dropout(g, h, rng)?;
        }
        h = g.dense(h, params[base], params[base + 1])?;
        h = g.relu(h);
        if let Some(rng) = dropout_rng {
            h = self.dropout(g, h, rng)?;
        }
        let logits = g.dense(h, params[base + 2], params[base + 3])?;
        let probs = g.softmax(logits, 0)?;
        Ok(VggOutput {
            logits,
            probs,
            layers,
        })
    }

    /// Inverted dropout: survivors are scaled by `1/(1-p)`.
    fn dropout<R: Rng>(&self, g: &mut Graph<'_>, x: Var, rng: &mut R) -> Result<Var> {
        let p = self.config.dropout;
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let shape = g.shape(x).to_vec();
        let mask = (0..g.value(x).len())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let mask = g.constant(shape, mask)?;
        g.mul(x, mask)
    }

    /// Cross-entropy `-ln p[label]`.
    pub fn loss(&self, g: &mut Graph<'_>, out: &VggOutput, label: Label) -> Result<Var> {
        let p = g.select(out.probs, label.class_index())?;
        let p = g.affine(p, 1.0, PROB_FLOOR);
        let l = g.ln(p);
        Ok(g.scale(l, -1.0))
    }

    pub fn scores(&self, image: &Image) -> Result<[f64; 2]> {
        let mut g = Graph::new();
        let params = self.leaves(&mut g);
        let out = self.forward::<crate::rng::StreamRng>(&mut g, &params, image, None)?;
        let p = g.value(out.probs);
        Ok([p[0], p[1]])
    }
}

impl Parameterized for SmallVgg {
    fn parameters(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for c in &self.convs {
            out.push(&c.kernels);
            out.push(&c.bias);
        }
        out.extend([
            &self.hidden.weights,
            &self.hidden.bias,
            &self.output.weights,
            &self.output.bias,
        ]);
        out
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for c in &mut self.convs {
            out.push(&mut c.kernels);
            out.push(&mut c.bias);
        }
        out.extend([
            &mut self.hidden.weights,
            &mut self.hidden.bias,
            &mut self.output.weights,
            &mut self.output.bias,
        ]);
        out
    }
}
