//! Fused and plain capsule networks.

use std::fmt;
use std::str::FromStr;

use super::layers::{Conv2d, Dense};
use crate::capsule::{
    margin_loss, primary_capsules, reconstruction_loss, route, CapsuleLayerConfig, LossWeights,
    Parameterized,
};
use crate::data::Label;
use crate::image::{IMAGE_HEIGHT, IMAGE_WIDTH};
use crate::kv::{KvMap, KvWriter};
use crate::rng::stream;
use crate::tensor::{grad_check, GradCheckOptions, Graph, Tensor, Var};
use crate::{Error, Image, Result};

pub const KERNEL_SIZES: [usize; 5] = [3, 5, 7, 9, 11];
pub const FILTER_OPTIONS: [usize; 3] = [64, 128, 256];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    /// Two per-class convolutional branches fused before the capsules.
    Fused,
    /// A single convolutional stem.
    Plain,
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Fused => "fcapsnet",
            Arch::Plain => "capsnet",
        })
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fcapsnet" => Ok(Arch::Fused),
            "capsnet" => Ok(Arch::Plain),
            _ => Err(Error::Config(format!("unknown capsule architecture `{s}`"))),
        }
    }
}

/// Capsule-network hyperparameters shared by the fused and plain variants.
#[derive(Clone, Debug, PartialEq)]
pub struct FCapsNetConfig {
    /// Filters of each branch (or of the plain stem).
    pub filters: usize,
    pub kernel_size: usize,
    /// Channels each fused branch is projected to by a 1×1 convolution.
    pub projection_channels: usize,
    pub primary_dim: usize,
    /// Class-capsule dimension, the "capsule count" of the model grid.
    pub num_capsules: usize,
    pub routing_iterations: usize,
    /// Max-pool factor between the convolution and the primary capsules.
    pub reduction: usize,
    pub decoder_hidden: usize,
    /// The decoder predicts a `1/scale` image that is upsampled to 120×160.
    pub decoder_scale: usize,
    pub loss: LossWeights,
    pub seed: u64,
}

impl Default for FCapsNetConfig {
    fn default() -> Self {
        FCapsNetConfig {
            filters: 256,
            kernel_size: 3,
            projection_channels: 2,
            primary_dim: 2,
            num_capsules: 8,
            routing_iterations: 3,
            reduction: 2,
            decoder_hidden: 1024,
            decoder_scale: 1,
            loss: LossWeights::default(),
            seed: 0,
        }
    }
}

impl FCapsNetConfig {
    /// Under 50k parameters; used for finite-difference checks.
    pub fn tiny() -> Self {
        FCapsNetConfig {
            filters: 2,
            reduction: 8,
            decoder_hidden: 8,
            decoder_scale: 4,
            routing_iterations: 1,
            ..Self::default()
        }
    }

    /// Small enough to train on a laptop CPU in minutes.
    pub fn desk() -> Self {
        FCapsNetConfig {
            filters: 8,
            reduction: 4,
            decoder_hidden: 32,
            decoder_scale: 4,
            ..Self::default()
        }
    }

    pub fn spatial(&self) -> (usize, usize) {
        (IMAGE_HEIGHT / self.reduction, IMAGE_WIDTH / self.reduction)
    }

    /// Channels that are grouped into primary capsules.
    pub fn capsule_channels(&self, arch: Arch) -> usize {
        match arch {
            Arch::Fused => 2 * self.projection_channels,
            Arch::Plain => self.filters,
        }
    }

    pub fn num_primary(&self, arch: Arch) -> usize {
        let (h, w) = self.spatial();
        self.capsule_channels(arch) / self.primary_dim * h * w
    }

    pub fn validate(&self, arch: Arch) -> Result<()> {
        CapsuleLayerConfig {
            num_capsules: self.num_capsules,
            capsule_dim: self.primary_dim,
            routing_iterations: self.routing_iterations,
        }
        .validate()?;
        self.loss.validate()?;
        if !KERNEL_SIZES.contains(&self.kernel_size) {
            return Err(Error::Config(format!(
                "kernel size {} not in {KERNEL_SIZES:?}",
                self.kernel_size
            )));
        }
        if self.filters == 0 || self.projection_channels == 0 || self.decoder_hidden == 0 {
            return Err(Error::Config(
                "filters, projection channels and decoder width must be positive".into(),
            ));
        }
        let r = self.reduction;
        if r == 0 || !IMAGE_HEIGHT.is_multiple_of(r) || !IMAGE_WIDTH.is_multiple_of(r) {
            return Err(Error::Config(format!(
                "a {k}x{k} stride-1 same convolution keeps {IMAGE_HEIGHT}x{IMAGE_WIDTH}; \
                 reduction {r} must divide both ({IMAGE_HEIGHT}/{r}, {IMAGE_WIDTH}/{r}) to give integral capsule maps",
                k = self.kernel_size
            )));
        }
        let s = self.decoder_scale;
        if s == 0 || !IMAGE_HEIGHT.is_multiple_of(s) || !IMAGE_WIDTH.is_multiple_of(s) {
            return Err(Error::Config(format!(
                "decoder scale {s} must divide {IMAGE_HEIGHT} and {IMAGE_WIDTH}"
            )));
        }
        if !self.capsule_channels(arch).is_multiple_of(self.primary_dim) {
            return Err(Error::Config(format!(
                "{} channels cannot form capsules of dimension {}",
                self.capsule_channels(arch),
                self.primary_dim
            )));
        }
        Ok(())
    }

    /// Trainable parameters of the model this config builds, without
    /// allocating it.
    pub fn parameter_count(&self, arch: Arch) -> usize {
        let conv = |cin: usize, f: usize, k: usize| f * cin * k * k + f;
        let branch = conv(1, self.filters, self.kernel_size)
            + match arch {
                Arch::Fused => conv(self.filters, self.projection_channels, 1),
                Arch::Plain => 0,
            };
        let branches = match arch {
            Arch::Fused => 2,
            Arch::Plain => 1,
        };
        let transforms = self.num_primary(arch) * 2 * self.num_capsules * self.primary_dim;
        let out_pixels = (IMAGE_HEIGHT / self.decoder_scale) * (IMAGE_WIDTH / self.decoder_scale);
        let decoder = (2 * self.num_capsules + 1) * self.decoder_hidden
            + (self.decoder_hidden + 1) * out_pixels;
        branches * branch + transforms + decoder
    }

    pub(crate) fn write_kv(&self, w: &mut KvWriter) {
        w.put("filters", self.filters);
        w.put("kernel_size", self.kernel_size);
        w.put("projection_channels", self.projection_channels);
        w.put("primary_dim", self.primary_dim);
        w.put("num_capsules", self.num_capsules);
        w.put("routing_iterations", self.routing_iterations);
        w.put("reduction", self.reduction);
        w.put("decoder_hidden", self.decoder_hidden);
        w.put("decoder_scale", self.decoder_scale);
        w.put("reconstruction_weight", self.loss.reconstruction_weight);
        w.put("margin_plus", self.loss.margin_plus);
        w.put("margin_minus", self.loss.margin_minus);
        w.put("down_weight", self.loss.down_weight);
        w.put("seed", self.seed);
    }

    /// Reads keys over `base`; unknown keys are left to the caller.
    pub(crate) fn read_kv(kv: &KvMap, base: &Self) -> Result<Self> {
        let d = base;
        Ok(FCapsNetConfig {
            filters: kv.get_or("filters", d.filters)?,
            kernel_size: kv.get_or("kernel_size", d.kernel_size)?,
            projection_channels: kv.get_or("projection_channels", d.projection_channels)?,
            primary_dim: kv.get_or("primary_dim", d.primary_dim)?,
            num_capsules: kv.get_or("num_capsules", d.num_capsules)?,
            routing_iterations: kv.get_or("routing_iterations", d.routing_iterations)?,
            reduction: kv.get_or("reduction", d.reduction)?,
            decoder_hidden: kv.get_or("decoder_hidden", d.decoder_hidden)?,
            decoder_scale: kv.get_or("decoder_scale", d.decoder_scale)?,
            loss: LossWeights {
                reconstruction_weight: kv
                    .get_or("reconstruction_weight", d.loss.reconstruction_weight)?,
                margin_plus: kv.get_or("margin_plus", d.loss.margin_plus)?,
                margin_minus: kv.get_or("margin_minus", d.loss.margin_minus)?,
                down_weight: kv.get_or("down_weight", d.loss.down_weight)?,
            },
            seed: kv.get_or("seed", d.seed)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Branch {
    conv: Conv2d,
    projection: Option<Conv2d>,
}

/// A capsule network: convolution → primary capsules → two routed class
/// capsules → masked decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct CapsModel {
    arch: Arch,
    config: FCapsNetConfig,
    branches: Vec<Branch>,
    /// `[num_primary, 2, num_capsules, primary_dim]`.
    transforms: Tensor,
    hidden: Dense,
    output: Dense,
}

/// Which class capsule the decoder reconstructs from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mask {
    Label(Label),
    Predicted,
}

/// Nodes of one forward pass.
#[derive(Clone, Debug)]
pub struct CapsOutput {
    /// Class-capsule lengths `[2]`.
    pub norms: Var,
    /// Class capsules `[2, num_capsules]`.
    pub capsules: Var,
    /// `[1, 120, 160]` in `[0,1]`.
    pub reconstruction: Var,
    /// Named convolutional feature maps, `[C, H, W]` each.
    pub layers: Vec<(&'static str, Var)>,
}

pub fn build_fcapsnet(config: &FCapsNetConfig) -> Result<CapsModel> {
    CapsModel::new(Arch::Fused, config)
}

pub fn build_capsnet(config: &FCapsNetConfig) -> Result<CapsModel> {
    CapsModel::new(Arch::Plain, config)
}

impl CapsModel {
    pub fn new(arch: Arch, config: &FCapsNetConfig) -> Result<Self> {
        config.validate(arch)?;
        let mut rng = stream(config.seed, "init", 0);
        let c = config;
        let branch = |rng: &mut _| Branch {
            conv: Conv2d::new(1, c.filters, c.kernel_size, rng),
            projection: (arch == Arch::Fused)
                .then(|| Conv2d::new(c.filters, c.projection_channels, 1, rng)),
        };
        let branches = match arch {
            Arch::Fused => vec![branch(&mut rng), branch(&mut rng)],
            Arch::Plain => vec![branch(&mut rng)],
        };
        let ni = c.num_primary(arch);
        // each W_ij is a [dout, din] matrix
        let transforms = Tensor::glorot(
            [ni, 2, c.num_capsules, c.primary_dim],
            c.primary_dim,
            c.num_capsules,
            &mut rng,
        );
        let out_pixels = (IMAGE_HEIGHT / c.decoder_scale) * (IMAGE_WIDTH / c.decoder_scale);
        let hidden = Dense::new(2 * c.num_capsules, c.decoder_hidden, &mut rng);
        let output = Dense::new(c.decoder_hidden, out_pixels, &mut rng);
        Ok(CapsModel {
            arch,
            config: config.clone(),
            branches,
            transforms,
            hidden,
            output,
        })
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn config(&self) -> &FCapsNetConfig {
        &self.config
    }

    /// Branch that owns the parameter at each position of
    /// [`Parameterized::parameters`]; `None` for shared layers.
    pub fn parameter_branches(&self) -> Vec<Option<usize>> {
        let mut out = Vec::new();
        for (b, br) in self.branches.iter().enumerate() {
            let n = if br.projection.is_some() { 4 } else { 2 };
            out.extend(std::iter::repeat_n(Some(b), n));
        }
        out.extend([None; 5]);
        out
    }

    /// Branch trained on images of `label` in the fused model.
    pub fn branch_for(&self, label: Label) -> Option<usize> {
        (self.arch == Arch::Fused).then(|| label.class_index())
    }

    /// Records every parameter as a leaf. Parameters of branches other than
    /// `train_only` enter as constants.
    pub fn leaves<'p>(&'p self, g: &mut Graph<'p>, train_only: Option<usize>) -> Vec<Var> {
        self.parameters()
            .into_iter()
            .zip(self.parameter_branches())
            .map(|(t, b)| match (train_only, b) {
                (Some(keep), Some(b)) if b != keep => g.frozen(t),
                _ => g.param(t),
            })
            .collect()
    }

    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        params: &[Var],
        image: &Image,
        mask: Mask,
    ) -> Result<CapsOutput> {
        image.ensure_standard()?;
        let c = &self.config;
        let x = g.input(image.to_tensor());
        let mut layers = Vec::new();
        let mut parts = Vec::new();
        let mut p = params.iter().copied();
        let mut next = || {
            p.next()
                .ok_or_else(|| Error::shape("capsnet", "too few parameter leaves"))
        };
        for (b, br) in self.branches.iter().enumerate() {
            let (k, bias) = (next()?, next()?);
            let conv = Conv2d::forward(g, k, bias, x)?;
            let conv = g.relu(conv);
            layers.push((
                match (self.arch, b) {
                    (Arch::Plain, _) => "stem",
                    (_, 0) => "branch_a",
                    _ => "branch_b",
                },
                conv,
            ));
            let pooled = if c.reduction > 1 {
                g.max_pool(conv, c.reduction)?
            } else {
                conv
            };
            if br.projection.is_some() {
                let (k, bias) = (next()?, next()?);
                parts.push(Conv2d::forward(g, k, bias, pooled)?);
            } else {
                parts.push(pooled);
            }
        }
        let features = if parts.len() > 1 {
            g.concat(&parts)?
        } else {
            parts[0]
        };
        if self.arch == Arch::Fused {
            layers.push(("fused", features));
        }
        let u = primary_capsules(g, features, c.primary_dim)?;
        let w = next()?;
        let predictions = g.capsule_predict(u, w)?;
        let (capsules, _) = route(g, predictions, c.routing_iterations)?;
        let norms = g.norms(capsules)?;

        let class = match mask {
            Mask::Label(l) => l.class_index(),
            Mask::Predicted => argmax(g.value(norms)),
        };
        let mut m = vec![0.0; 2 * c.num_capsules];
        m[class * c.num_capsules..(class + 1) * c.num_capsules].fill(1.0);
        let m = g.constant([2, c.num_capsules], m)?;
        let masked = g.mul(capsules, m)?;
        let flat = g.flatten(masked)?;
        let (hw, hb, ow, ob) = (next()?, next()?, next()?, next()?);
        let h = g.dense(flat, hw, hb)?;
        let h = g.relu(h);
        let o = g.dense(h, ow, ob)?;
        let o = g.sigmoid(o);
        let s = c.decoder_scale;
        let o = g.reshape(o, vec![1, IMAGE_HEIGHT / s, IMAGE_WIDTH / s])?;
        let reconstruction = if s > 1 { g.upsample(o, s)? } else { o };
        Ok(CapsOutput {
            norms,
            capsules,
            reconstruction,
            layers,
        })
    }

    /// Margin loss plus weighted reconstruction loss.
    pub fn loss(
        &self,
        g: &mut Graph<'_>,
        out: &CapsOutput,
        image: &Image,
        label: Label,
    ) -> Result<Var> {
        let m = margin_loss(g, out.norms, &label.one_hot(), &self.config.loss)?;
        let r = reconstruction_loss(
            g,
            out.reconstruction,
            image.pixels(),
            self.config.loss.reconstruction_weight,
        )?;
        g.add(m, r)
    }

    /// Class-capsule norms for one image.
    pub fn scores(&self, image: &Image) -> Result<[f64; 2]> {
        let mut g = Graph::new();
        let params = self.leaves(&mut g, None);
        let out = self.forward(&mut g, &params, image, Mask::Predicted)?;
        let n = g.value(out.norms);
        Ok([n[0], n[1]])
    }
}

impl CapsModel {
    /// Largest relative error between backprop and central differences of
    /// the summed training loss over `samples`, across all parameters.
    pub fn gradient_check(
        &self,
        samples: &[(Image, Label)],
        options: GradCheckOptions,
    ) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::Empty("gradient check samples"));
        }
        let inputs: Vec<Tensor> = self.parameters().into_iter().cloned().collect();
        grad_check(
            |g, params| {
                let mut terms = Vec::with_capacity(samples.len());
                for (image, label) in samples {
                    let out = self.forward(g, params, image, Mask::Label(*label))?;
                    terms.push(self.loss(g, &out, image, *label)?);
                }
                g.add_all(&terms)
            },
            &inputs,
            options,
        )
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| {
            if x > bv {
                (i, x)
            } else {
                (bi, bv)
            }
        })
        .0
}

impl Parameterized for CapsModel {
    fn parameters(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for br in &self.branches {
            out.push(&br.conv.kernels);
            out.push(&br.conv.bias);
            if let Some(p) = &br.projection {
                out.push(&p.kernels);
                out.push(&p.bias);
            }
        }
        out.extend([
            &self.transforms,
            &self.hidden.weights,
            &self.hidden.bias,
            &self.output.weights,
            &self.output.bias,
        ]);
        out
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for br in &mut self.branches {
            out.push(&mut br.conv.kernels);
            out.push(&mut br.conv.bias);
            if let Some(p) = &mut br.projection {
                out.push(&mut p.kernels);
                out.push(&mut p.bias);
            }
        }
        out.extend([
            &mut self.transforms,
            &mut self.hidden.weights,
            &mut self.hidden.bias,
            &mut self.output.weights,
            &mut self.output.bias,
        ]);
        out
    }
}
