//! Grad-CAM and Grad-CAM++ heatmaps over convolutional feature maps.
//!
//! The target score is the class-capsule length for capsule models and the
//! pre-softmax logit for Small-VGG.

use std::path::Path;

use rayon::prelude::*;

use crate::data::{Label, Manifest};
use crate::image::{write_atomic, RgbImage, IMAGE_HEIGHT, IMAGE_WIDTH};
use crate::models::{Arch, Mask, Model};
use crate::tensor::{Graph, Var};
use crate::{Error, Image, Result};

/// Overlay blend factor.
pub const OVERLAY_ALPHA: f64 = 0.4;

/// Below this range a map is treated as constant.
const FLAT: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CamMethod {
    /// Channel weights are spatially averaged gradients.
    #[default]
    GradCam,
    /// Channel weights use the second/third-order gradient terms.
    GradCamPlusPlus,
}

impl std::str::FromStr for CamMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gradcam" => Ok(CamMethod::GradCam),
            "gradcam++" | "gradcampp" => Ok(CamMethod::GradCamPlusPlus),
            _ => Err(Error::Config(format!(
                "unknown CAM method `{s}` (gradcam, gradcam++)"
            ))),
        }
    }
}

impl std::fmt::Display for CamMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CamMethod::GradCam => "gradcam",
            CamMethod::GradCamPlusPlus => "gradcam++",
        })
    }
}

/// A 120×160 map normalized to `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub values: Vec<f64>,
    /// Gradients or activations vanished; `values` are all zero.
    pub degenerate: bool,
}

impl Heatmap {
    pub fn height(&self) -> usize {
        IMAGE_HEIGHT
    }

    pub fn width(&self) -> usize {
        IMAGE_WIDTH
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * IMAGE_WIDTH + x]
    }

    /// Min-max normalizes `raw`, flagging constant maps as degenerate.
    fn normalized(raw: Vec<f64>) -> Heatmap {
        let (lo, hi) = raw
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        if !(hi - lo > FLAT) {
            return Heatmap {
                values: vec![0.0; raw.len()],
                degenerate: true,
            };
        }
        Heatmap {
            values: raw.into_iter().map(|v| (v - lo) / (hi - lo)).collect(),
            degenerate: false,
        }
    }

    /// Sum of absolute differences between 4-neighbours.
    pub fn total_variation(&self) -> f64 {
        let mut tv = 0.0;
        for y in 0..IMAGE_HEIGHT {
            for x in 0..IMAGE_WIDTH {
                let v = self.get(y, x);
                if x + 1 < IMAGE_WIDTH {
                    tv += (self.get(y, x + 1) - v).abs();
                }
                if y + 1 < IMAGE_HEIGHT {
                    tv += (self.get(y + 1, x) - v).abs();
                }
            }
        }
        tv
    }

    /// One CSV row per image row.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.values.len() * 8);
        for row in self.values.chunks(IMAGE_WIDTH) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_csv().as_bytes())
    }

    pub fn to_image(&self) -> Image {
        Image::new(IMAGE_HEIGHT, IMAGE_WIDTH, self.values.clone()).expect("heatmap is 120x160")
    }
}

/// Names of the layers [`gradcam`] accepts, last one first.
pub fn conv_layers(model: &Model) -> Vec<&'static str> {
    match model {
        Model::Caps(m) => match m.arch() {
            Arch::Fused => vec!["fused", "branch_b", "branch_a"],
            Arch::Plain => vec!["stem"],
        },
        Model::SmallVgg(_) => vec!["conv3", "conv2", "conv1"],
    }
}

/// The last convolutional output before capsule grouping (or before the
/// dense head).
pub fn default_layer(model: &Model) -> &'static str {
    conv_layers(model)[0]
}

/// Forward pass returning the class score and the named layer.
fn score_and_layer<'p>(
    g: &mut Graph<'p>,
    model: &'p Model,
    image: &Image,
    class: Label,
    layer: &str,
) -> Result<(Var, Var)> {
    let layers = match model {
        Model::Caps(m) => {
            let params = m.leaves(g, None);
            let out = m.forward(g, &params, image, Mask::Predicted)?;
            let score = g.select(out.norms, class.class_index())?;
            (score, out.layers)
        }
        Model::SmallVgg(m) => {
            let params = m.leaves(g);
            let out = m.forward::<crate::rng::StreamRng>(g, &params, image, None)?;
            let score = g.select(out.logits, class.class_index())?;
            (score, out.layers)
        }
    };
    let (score, named) = layers;
    let found = named.iter().find(|(n, _)| *n == layer).map(|(_, v)| *v);
    match found {
        Some(v) => Ok((score, v)),
        None => Err(Error::InvalidArgument(format!(
            "`{layer}` is not a convolutional layer of {}; choose one of {:?}",
            model.name(),
            conv_layers(model)
        ))),
    }
}

/// Class-activation map of `class` at `layer`, bilinearly upsampled to
/// 120×160 and min-max normalized.
pub fn gradcam(
    model: &Model,
    image: &Image,
    layer: &str,
    class: Label,
    method: CamMethod,
) -> Result<Heatmap> {
    let mut g = Graph::new();
    let (score, fmap) = score_and_layer(&mut g, model, image, class, layer)?;
    g.backward(score)?;
    let shape = g.shape(fmap).to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let acts = g.value(fmap).to_vec();
    let grads = g
        .grad(fmap)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; acts.len()]);
    let hw = h * w;
    let mut cam = vec![0.0; hw];
    for k in 0..c {
        let a = &acts[k * hw..(k + 1) * hw];
        let d = &grads[k * hw..(k + 1) * hw];
        let weight = match method {
            CamMethod::GradCam => d.iter().sum::<f64>() / hw as f64,
            CamMethod::GradCamPlusPlus => {
                let total: f64 = a.iter().sum();
                d.iter()
                    .map(|&gr| {
                        let g2 = gr * gr;
                        let denom = 2.0 * g2 + total * g2 * gr;
                        let alpha = if denom.abs() > FLAT { g2 / denom } else { 0.0 };
                        alpha * gr.max(0.0)
                    })
                    .sum()
            }
        };
        for (o, &v) in cam.iter_mut().zip(a) {
            *o += weight * v;
        }
    }
    cam.iter_mut().for_each(|v| *v = v.max(0.0));
    Ok(Heatmap::normalized(upsample_bilinear(
        &cam,
        h,
        w,
        IMAGE_HEIGHT,
        IMAGE_WIDTH,
    )))
}

/// Half-pixel-centred bilinear resize with edge clamping.
fn upsample_bilinear(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(oh * ow);
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    for y in 0..oh {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for x in 0..ow {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            let top = src[y0 * w + x0] * (1.0 - tx) + src[y0 * w + x1] * tx;
            let bottom = src[y1 * w + x0] * (1.0 - tx) + src[y1 * w + x1] * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

/// Pixelwise mean of per-image maps, renormalized.
pub fn average_heatmap(
    model: &Model,
    images: &[Image],
    layer: &str,
    class: Label,
    method: CamMethod,
) -> Result<Heatmap> {
    if images.is_empty() {
        return Err(Error::Empty("heatmap subset"));
    }
    let maps = images
        .par_iter()
        .map(|img| gradcam(model, img, layer, class, method))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_heatmap(&maps))
}

/// [`average_heatmap`] over every image in `manifest`.
pub fn average_heatmap_manifest(
    model: &Model,
    manifest: &Manifest,
    layer: &str,
    class: Label,
    method: CamMethod,
) -> Result<Heatmap> {
    average_heatmap(model, &manifest.load_images()?, layer, class, method)
}

pub fn mean_heatmap(maps: &[Heatmap]) -> Heatmap {
    let n = maps.len().max(1) as f64;
    let mut sum = vec![0.0; IMAGE_HEIGHT * IMAGE_WIDTH];
    for m in maps {
        for (s, v) in sum.iter_mut().zip(&m.values) {
            *s += v;
        }
    }
    Heatmap::normalized(sum.into_iter().map(|v| v / n).collect())
}

/// Heat `t ∈ [0,1]` to RGB: blue at 0, red at 1, linear in between.
pub fn colormap(t: f64) -> [f64; 3] {
    let t = t.clamp(0.0, 1.0);
    [t, 0.0, 1.0 - t]
}

/// Blends the colormap over the grayscale image:
/// `(1 − α)·gray + α·colormap(heat)` with `α = 0.4`.
pub fn overlay(heatmap: &Heatmap, image: &Image) -> Result<RgbImage> {
    if image.height() != IMAGE_HEIGHT || image.width() != IMAGE_WIDTH {
        return Err(Error::Dimension {
            expected: IMAGE_HEIGHT * IMAGE_WIDTH,
            found: image.height() * image.width(),
        });
    }
    let mut data = Vec::with_capacity(3 * image.pixels().len());
    for (&gray, &heat) in image.pixels().iter().zip(&heatmap.values) {
        for c in colormap(heat) {
            let v = (1.0 - OVERLAY_ALPHA) * gray + OVERLAY_ALPHA * c;
            data.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(RgbImage {
        height: IMAGE_HEIGHT,
        width: IMAGE_WIDTH,
        data,
    })
}

/// Heatmap mass inside and outside the annulus `pupil_r ≤ d ≤ iris_r`
/// around `(cx, cy)`, each as a mean per pixel.
pub fn annulus_mass(heatmap: &Heatmap, cx: f64, cy: f64, pupil_r: f64, iris_r: f64) -> (f64, f64) {
    let (mut inside, mut n_in, mut outside, mut n_out) = (0.0, 0usize, 0.0, 0usize);
    for y in 0..IMAGE_HEIGHT {
        for x in 0..IMAGE_WIDTH {
            let d = ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)).sqrt();
            let v = heatmap.get(y, x);
            if (pupil_r..=iris_r).contains(&d) {
                inside += v;
                n_in += 1;
            } else {
                outside += v;
                n_out += 1;
            }
        }
    }
    (inside / n_in.max(1) as f64, outside / n_out.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capsule::Parameterized;
    use crate::models::{build_fcapsnet, FCapsNetConfig, SmallVgg, SmallVggConfig};

    fn textured() -> Image {
        let mut img = Image::standard(0.5);
        for y in 0..IMAGE_HEIGHT {
            for x in 0..IMAGE_WIDTH {
                let d = ((y as f64 - 60.0).powi(2) + (x as f64 - 80.0).powi(2)).sqrt();
                img.set(
                    y,
                    x,
                    if d < 15.0 {
                        0.05
                    } else if d < 45.0 {
                        0.4
                    } else {
                        0.8
                    },
                );
            }
        }
        img
    }

    fn models() -> Vec<Model> {
        vec![
            Model::Caps(build_fcapsnet(&FCapsNetConfig::tiny()).unwrap()),
            Model::SmallVgg(SmallVgg::new(&SmallVggConfig::small()).unwrap()),
        ]
    }

    #[test]
    fn maps_are_normalized_for_every_architecture() {
        let img = textured();
        for m in models() {
            for method in [CamMethod::GradCam, CamMethod::GradCamPlusPlus] {
                for layer in conv_layers(&m) {
                    let h = gradcam(&m, &img, layer, Label::Alcohol, method).unwrap();
                    assert_eq!(h.values.len(), IMAGE_HEIGHT * IMAGE_WIDTH);
                    assert!(h.values.iter().all(|v| (0.0..=1.0).contains(v)));
                    if !h.degenerate {
                        let max = h.values.iter().cloned().fold(0.0, f64::max);
                        let min = h.values.iter().cloned().fold(1.0, f64::min);
                        assert_eq!((min, max), (0.0, 1.0));
                    }
                }
            }
        }
    }

    #[test]
    fn zero_model_on_zero_image_is_flagged() {
        let mut m = Model::Caps(build_fcapsnet(&FCapsNetConfig::tiny()).unwrap());
        for t in m.parameters_mut() {
            t.values_mut().fill(0.0);
        }
        let h = gradcam(
            &m,
            &Image::standard(0.0),
            "fused",
            Label::Alcohol,
            CamMethod::GradCam,
        )
        .unwrap();
        assert!(h.degenerate);
        assert!(h.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unknown_layer_is_rejected() {
        let m = &models()[0];
        let e = gradcam(
            m,
            &textured(),
            "decoder",
            Label::Alcohol,
            CamMethod::GradCam,
        )
        .unwrap_err();
        assert!(e.to_string().contains("fused"), "{e}");
        assert!(gradcam(
            m,
            &Image::filled(10, 10, 0.0),
            "fused",
            Label::Alcohol,
            CamMethod::GradCam
        )
        .is_err());
    }

    #[test]
    fn averages_of_one_or_identical_images_match_single_map() {
        let m = &models()[1];
        let img = textured();
        let one = gradcam(m, &img, "conv3", Label::NoAlcohol, CamMethod::GradCam).unwrap();
        let avg1 = average_heatmap(
            m,
            std::slice::from_ref(&img),
            "conv3",
            Label::NoAlcohol,
            CamMethod::GradCam,
        )
        .unwrap();
        let avg3 = average_heatmap(
            m,
            &[img.clone(), img.clone(), img],
            "conv3",
            Label::NoAlcohol,
            CamMethod::GradCam,
        )
        .unwrap();
        for (a, b) in one.values.iter().zip(&avg1.values) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in one.values.iter().zip(&avg3.values) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(average_heatmap(m, &[], "conv3", Label::NoAlcohol, CamMethod::GradCam).is_err());
    }

    #[test]
    fn overlay_tints_and_round_trips() {
        let img = Image::standard(0.5);
        let zero = Heatmap {
            values: vec![0.0; IMAGE_HEIGHT * IMAGE_WIDTH],
            degenerate: true,
        };
        let one = Heatmap {
            values: vec![1.0; IMAGE_HEIGHT * IMAGE_WIDTH],
            degenerate: false,
        };
        // 0.6·0.5 + 0.4·{0,1}
        assert_eq!(overlay(&zero, &img).unwrap().pixel(3, 4), [77, 77, 179]);
        assert_eq!(overlay(&one, &img).unwrap().pixel(3, 4), [179, 77, 77]);
        let mut h = zero.clone();
        for (i, v) in h.values.iter_mut().enumerate() {
            *v = (i % 256) as f64 / 255.0;
        }
        let rgb = overlay(&h, &textured()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("o.ppm");
        rgb.save_ppm(&p).unwrap();
        assert_eq!(RgbImage::load_ppm(&p).unwrap(), rgb);
        assert!(overlay(&h, &Image::filled(5, 5, 0.0)).is_err());
    }

    #[test]
    fn bilinear_keeps_constants_and_corners() {
        let up = upsample_bilinear(&[2.0; 6], 2, 3, 120, 160);
        assert!(up.iter().all(|&v| (v - 2.0).abs() < 1e-12));
        let up = upsample_bilinear(&[0.0, 1.0, 2.0, 3.0], 2, 2, 4, 4);
        assert_eq!(up[0], 0.0);
        assert_eq!(up[15], 3.0);
    }
}
