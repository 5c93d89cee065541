//! Capsule primitives: squash, primary capsules, routing-by-agreement and
//! the margin / reconstruction losses.

use crate::tensor::{Graph, Tensor, Var};
use crate::{Error, Result};

/// Capsule counts explored by the model grid.
pub const CAPSULE_COUNTS: [usize; 4] = [8, 16, 32, 64];
pub const MAX_ROUTING_ITERATIONS: usize = 5;
pub const DEFAULT_ROUTING_ITERATIONS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CapsuleLayerConfig {
    pub num_capsules: usize,
    pub capsule_dim: usize,
    pub routing_iterations: usize,
}

impl CapsuleLayerConfig {
    pub fn validate(&self) -> Result<()> {
        if !CAPSULE_COUNTS.contains(&self.num_capsules) {
            return Err(Error::Config(format!(
                "capsule count {} not in {CAPSULE_COUNTS:?}",
                self.num_capsules
            )));
        }
        if self.capsule_dim == 0 {
            return Err(Error::Config("capsule dimension must be positive".into()));
        }
        if !(1..=MAX_ROUTING_ITERATIONS).contains(&self.routing_iterations) {
            return Err(Error::Config(format!(
                "routing iterations {} outside 1..={MAX_ROUTING_ITERATIONS}",
                self.routing_iterations
            )));
        }
        Ok(())
    }
}

/// Weights of the capsule training objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub reconstruction_weight: f64,
    pub margin_plus: f64,
    pub margin_minus: f64,
    pub down_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            reconstruction_weight: 0.0005,
            margin_plus: 0.9,
            margin_minus: 0.1,
            down_weight: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.reconstruction_weight,
            self.margin_plus,
            self.margin_minus,
            self.down_weight,
        ];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be finite and non-negative: {self:?}"
            )));
        }
        if self.margin_plus <= self.margin_minus {
            return Err(Error::Config(format!(
                "m+ ({}) must exceed m- ({})",
                self.margin_plus, self.margin_minus
            )));
        }
        Ok(())
    }
}

/// Anything that owns trainable tensors.
pub trait Parameterized {
    fn parameters(&self) -> Vec<&Tensor>;
    fn parameters_mut(&mut self) -> Vec<&mut Tensor>;
}

/// Exact number of trainable scalars.
pub fn count_parameters<M: Parameterized + ?Sized>(model: &M) -> usize {
    model
        .parameters()
        .iter()
        .filter(|t| t.requires_grad())
        .map(|t| t.len())
        .sum()
}

/// Squash of a single vector (or of each row along the last axis).
pub fn squash(s: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.frozen(s);
    let y = g.squash(x)?;
    Ok(g.tensor(y))
}

/// Turns `features [F,H,W]` into squashed capsules `[F/d · H · W, d]`.
///
/// Capsule vectors are formed from `d` consecutive channels at one pixel;
/// capsules are ordered by channel group, then row, then column.
pub fn primary_capsules(g: &mut Graph<'_>, features: Var, capsule_dim: usize) -> Result<Var> {
    let s = g.shape(features).to_vec();
    if s.len() != 3 {
        return Err(Error::shape(
            "primary_capsules",
            format!("expected [F,H,W], got {s:?}"),
        ));
    }
    if capsule_dim == 0 || !s[0].is_multiple_of(capsule_dim) {
        return Err(Error::shape(
            "primary_capsules",
            format!(
                "{} channels cannot be grouped into capsules of dim {capsule_dim}",
                s[0]
            ),
        ));
    }
    let groups = s[0] / capsule_dim;
    let pixels = s[1] * s[2];
    let grouped = g.reshape(features, vec![groups, capsule_dim, pixels])?;
    let per_pixel = g.transpose(grouped)?;
    let caps = g.reshape(per_pixel, vec![groups * pixels, capsule_dim])?;
    g.squash(caps)
}

/// Snapshot of one routing pass.
#[derive(Clone, Debug, PartialEq)]
pub struct CapsuleLayerState {
    /// `û[i,j]`, shape `[num_in, num_out, out_dim]`.
    pub predictions: Tensor,
    /// Logits `b[i,j]` that produced the final couplings.
    pub logits: Tensor,
    /// Couplings `c[i,j]`; each row sums to one.
    pub couplings: Tensor,
    /// Output capsules `v[j]`, shape `[num_out, out_dim]`.
    pub outputs: Tensor,
}

struct Routed {
    logits: Vec<f64>,
    couplings: Vec<f64>,
    outputs: Vec<f64>,
}

fn softmax_rows(logits: &[f64], width: usize, out: &mut [f64]) {
    for (row, dst) in logits.chunks(width).zip(out.chunks_mut(width)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, &b) in dst.iter_mut().zip(row) {
            *d = (b - max).exp();
            total += *d;
        }
        dst.iter_mut().for_each(|d| *d /= total);
    }
}

fn route_values(pred: &[f64], ni: usize, nj: usize, d: usize, iterations: usize) -> Routed {
    let mut logits = vec![0.0; ni * nj];
    let mut couplings = vec![0.0; ni * nj];
    let mut outputs = vec![0.0; nj * d];
    for it in 0..iterations {
        softmax_rows(&logits, nj, &mut couplings);
        outputs.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..ni {
            for j in 0..nj {
                let c = couplings[i * nj + j];
                let p = &pred[(i * nj + j) * d..(i * nj + j + 1) * d];
                outputs[j * d..(j + 1) * d]
                    .iter_mut()
                    .zip(p)
                    .for_each(|(o, u)| *o += c * u);
            }
        }
        for v in outputs.chunks_mut(d) {
            let q = v.iter().map(|x| x * x).sum::<f64>() + crate::tensor::NORM_EPS;
            let gain = q.sqrt() / (1.0 + q);
            v.iter_mut().for_each(|x| *x *= gain);
        }
        if it + 1 < iterations {
            for i in 0..ni {
                for j in 0..nj {
                    let p = &pred[(i * nj + j) * d..(i * nj + j + 1) * d];
                    let v = &outputs[j * d..(j + 1) * d];
                    logits[i * nj + j] += p.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
    }
    Routed {
        logits,
        couplings,
        outputs,
    }
}

fn check_predictions(shape: &[usize], iterations: usize) -> Result<(usize, usize, usize)> {
    if iterations == 0 {
        return Err(Error::InvalidArgument(
            "routing needs at least one iteration".into(),
        ));
    }
    match shape {
        [ni, nj, d] => Ok((*ni, *nj, *d)),
        _ => Err(Error::shape(
            "dynamic_routing",
            format!("expected [in, out, dim], got {shape:?}"),
        )),
    }
}

/// Routing-by-agreement over prediction vectors `û [num_in, num_out, dim]`.
pub fn dynamic_routing(predictions: &Tensor, iterations: usize) -> Result<CapsuleLayerState> {
    let (ni, nj, d) = check_predictions(predictions.shape(), iterations)?;
    let r = route_values(predictions.values(), ni, nj, d, iterations);
    Ok(CapsuleLayerState {
        predictions: predictions.clone(),
        logits: Tensor::new([ni, nj], r.logits)?,
        couplings: Tensor::new([ni, nj], r.couplings)?,
        outputs: Tensor::new([nj, d], r.outputs)?,
    })
}

/// Differentiable routing: the couplings are computed from the current
/// prediction values and then held constant, so gradients flow only
/// through the final weighted sum and squash.
///
/// Returns the output capsules `[num_out, dim]` and the couplings used.
pub fn route(g: &mut Graph<'_>, predictions: Var, iterations: usize) -> Result<(Var, Vec<f64>)> {
    let (ni, nj, d) = check_predictions(g.shape(predictions), iterations)?;
    let r = route_values(g.value(predictions), ni, nj, d, iterations);
    let s = g.route_sum(predictions, &r.couplings)?;
    let v = g.squash(s)?;
    Ok((v, r.couplings))
}

fn check_one_hot(one_hot: &[f64], classes: usize) -> Result<()> {
    let ones = one_hot.iter().filter(|&&v| v == 1.0).count();
    let zeros = one_hot.iter().filter(|&&v| v == 0.0).count();
    if one_hot.len() != classes || ones != 1 || ones + zeros != classes {
        return Err(Error::InvalidArgument(format!(
            "label {one_hot:?} is not one-hot over {classes} classes"
        )));
    }
    Ok(())
}

/// `Σ_k T_k·max(0, m⁺ − ‖v_k‖)² + λ(1 − T_k)·max(0, ‖v_k‖ − m⁻)²`.
pub fn margin_loss(
    g: &mut Graph<'_>,
    norms: Var,
    one_hot: &[f64],
    weights: &LossWeights,
) -> Result<Var> {
    let classes = g.value(norms).len();
    check_one_hot(one_hot, classes)?;
    let shape = g.shape(norms).to_vec();
    let present = g.affine(norms, -1.0, weights.margin_plus);
    let present = g.relu(present);
    let present = g.square(present);
    let t = g.constant(shape.clone(), one_hot.to_vec())?;
    let present = g.mul(present, t)?;

    let absent = g.affine(norms, 1.0, -weights.margin_minus);
    let absent = g.relu(absent);
    let absent = g.square(absent);
    let rest = g.constant(
        shape,
        one_hot
            .iter()
            .map(|t| weights.down_weight * (1.0 - t))
            .collect(),
    )?;
    let absent = g.mul(absent, rest)?;

    let both = g.add(present, absent)?;
    Ok(g.sum(both))
}

/// Plain-value margin loss over capsule norms.
pub fn margin_loss_value(norms: &[f64], one_hot: &[f64], weights: &LossWeights) -> Result<f64> {
    let mut g = Graph::new();
    let n = g.input(Tensor::from_vec(norms.to_vec()));
    let l = margin_loss(&mut g, n, one_hot, weights)?;
    Ok(g.scalar(l))
}

/// `weight · Σ (decoded − original)²`.
pub fn reconstruction_loss(
    g: &mut Graph<'_>,
    decoded: Var,
    original: &[f64],
    weight: f64,
) -> Result<Var> {
    if g.value(decoded).len() != original.len() {
        return Err(Error::shape(
            "reconstruction_loss",
            format!(
                "decoded {:?} vs {} original pixels",
                g.shape(decoded),
                original.len()
            ),
        ));
    }
    let shape = g.shape(decoded).to_vec();
    let target = g.constant(shape, original.to_vec())?;
    let diff = g.sub(decoded, target)?;
    let sq = g.square(diff);
    let total = g.sum(sq);
    Ok(g.scale(total, weight))
}

pub fn reconstruction_loss_value(
    decoded: &crate::Image,
    original: &crate::Image,
    weight: f64,
) -> Result<f64> {
    original.ensure_standard()?;
    decoded.ensure_standard()?;
    let mut g = Graph::new();
    let d = g.input(Tensor::from_vec(decoded.pixels().to_vec()));
    let l = reconstruction_loss(&mut g, d, original.pixels(), weight)?;
    Ok(g.scalar(l))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, GradCheckOptions};
    use crate::Image;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn squash_zero_unit_and_large() {
        let z = squash(&Tensor::from_vec(vec![0.0; 3])).unwrap();
        assert_eq!(z.values(), &[0.0; 3]);

        let u = squash(&Tensor::from_vec(vec![0.6, 0.8])).unwrap();
        assert!((norm(u.values()) - 0.5).abs() < 1e-12);

        let big = Tensor::from_vec(vec![600.0, 800.0]);
        let b = squash(&big).unwrap();
        assert!((norm(b.values()) - 1.0).abs() < 1e-5);
        assert!((b.values()[0] / b.values()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn squash_norm_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = Tensor::new([4, 3], (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let err = grad_check(
            |g, v| {
                let q = g.squash(v[0])?;
                let n = g.norms(q)?;
                Ok(g.sum(n))
            },
            &[s],
            GradCheckOptions::exhaustive(1e-5),
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    /// Scalar, loop-by-loop routing for 2 inputs × 2 outputs × dim 2.
    fn reference_trace(u: [[[f64; 2]; 2]; 2], iterations: usize) -> ([[f64; 2]; 2], [[f64; 2]; 2]) {
        let mut b = [[0.0f64; 2]; 2];
        let mut c = [[0.0f64; 2]; 2];
        let mut v = [[0.0f64; 2]; 2];
        for it in 0..iterations {
            for i in 0..2 {
                let e0 = b[i][0].exp();
                let e1 = b[i][1].exp();
                c[i][0] = e0 / (e0 + e1);
                c[i][1] = e1 / (e0 + e1);
            }
            for j in 0..2 {
                let sx = c[0][j] * u[0][j][0] + c[1][j] * u[1][j][0];
                let sy = c[0][j] * u[0][j][1] + c[1][j] * u[1][j][1];
                let n2 = sx * sx + sy * sy;
                let n = n2.sqrt();
                let f = n2 / (1.0 + n2) / n;
                v[j] = [sx * f, sy * f];
            }
            if it + 1 < iterations {
                for i in 0..2 {
                    for j in 0..2 {
                        b[i][j] += u[i][j][0] * v[j][0] + u[i][j][1] * v[j][1];
                    }
                }
            }
        }
        (c, v)
    }

    #[test]
    fn routing_matches_scalar_trace() {
        let u = [[[0.5, -1.0], [2.0, 0.3]], [[0.7, -0.4], [-1.5, 0.9]]];
        let flat: Vec<f64> = u.iter().flatten().flatten().copied().collect();
        let state = dynamic_routing(&Tensor::new([2, 2, 2], flat).unwrap(), 3).unwrap();
        let (c, v) = reference_trace(u, 3);
        for i in 0..2 {
            for j in 0..2 {
                assert!((state.couplings.values()[i * 2 + j] - c[i][j]).abs() < 1e-10);
                assert!((state.outputs.values()[j * 2 + i] - v[j][i]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn single_iteration_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (ni, nj, d) = (5, 3, 4);
        let p: Vec<f64> = (0..ni * nj * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let state = dynamic_routing(&Tensor::new([ni, nj, d], p.clone()).unwrap(), 1).unwrap();
        for c in state.couplings.values() {
            assert!((c - 1.0 / nj as f64).abs() < 1e-15);
        }
        for j in 0..nj {
            let s: Vec<f64> = (0..d)
                .map(|k| (0..ni).map(|i| p[(i * nj + j) * d + k]).sum::<f64>() / nj as f64)
                .collect();
            let n2: f64 = s.iter().map(|x| x * x).sum();
            for k in 0..d {
                let expect = s[k] * n2 / (1.0 + n2) / n2.sqrt();
                assert!((state.outputs.values()[j * d + k] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn agreement_wins() {
        // output 0: identical predictions; output 1: antipodal
        let p = vec![1.0, 0.5, 0.8, -0.6, 1.0, 0.5, -0.8, 0.6];
        let state = dynamic_routing(&Tensor::new([2, 2, 2], p).unwrap(), 3).unwrap();
        let c = state.couplings.values();
        assert!(c[0] > c[1]);
        assert!(c[2] > c[3]);
    }

    #[test]
    fn zero_iterations_rejected() {
        assert!(dynamic_routing(&Tensor::zeros([2, 2, 2]), 0).is_err());
    }

    #[test]
    fn graph_routing_matches_value_routing() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let p = Tensor::new(
            [6, 2, 3],
            (0..36).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let state = dynamic_routing(&p, 4).unwrap();
        let mut g = Graph::new();
        let pv = g.frozen(&p);
        let (v, c) = route(&mut g, pv, 4).unwrap();
        assert_eq!(g.value(v), state.outputs.values());
        assert_eq!(&c[..], state.couplings.values());
    }

    #[test]
    fn primary_capsule_geometry() {
        let mut g = Graph::new();
        let f = g.input(Tensor::zeros([4, 60, 80]));
        let caps = primary_capsules(&mut g, f, 2).unwrap();
        assert_eq!(g.shape(caps), &[9600, 2]);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = Tensor::new(
            [4, 2, 2],
            (0..16).map(|_| rng.gen_range(-3.0..3.0)).collect(),
        )
        .unwrap();
        let f = g.frozen(&t);
        let caps = primary_capsules(&mut g, f, 4).unwrap();
        assert_eq!(g.shape(caps), &[4, 4]);
        for row in g.value(caps).chunks(4) {
            assert!(norm(row) < 1.0);
        }
        // capsule 1 (pixel (0,1)) gathers channel values at that pixel
        let raw: Vec<f64> = (0..4).map(|c| t.values()[c * 4 + 1]).collect();
        let expect = squash(&Tensor::from_vec(raw)).unwrap();
        assert_eq!(&g.value(caps)[4..8], expect.values());

        let f = g.input(Tensor::zeros([3, 2, 2]));
        assert!(primary_capsules(&mut g, f, 2).is_err());
    }

    #[test]
    fn margin_loss_examples() {
        let w = LossWeights::default();
        assert_eq!(
            margin_loss_value(&[0.95, 0.05], &[1.0, 0.0], &w).unwrap(),
            0.0
        );
        let l = margin_loss_value(&[0.0, 1.0], &[1.0, 0.0], &w).unwrap();
        assert!((l - 1.215).abs() < 1e-12, "{l}");
        assert!(margin_loss_value(&[0.5, 0.5], &[1.0, 1.0], &w).is_err());
        assert!(margin_loss_value(&[0.5, 0.5], &[0.5, 0.5], &w).is_err());
    }

    #[test]
    fn margin_loss_gradient() {
        let w = LossWeights::default();
        let err = grad_check(
            |g, v| {
                let n = g.norms(v[0])?;
                margin_loss(g, n, &[0.0, 1.0], &w)
            },
            &[Tensor::new([2, 3], vec![0.3, -0.2, 0.4, 0.1, 0.25, -0.3]).unwrap()],
            GradCheckOptions::exhaustive(1e-6),
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn reconstruction_examples() {
        let ones = Image::standard(1.0);
        let zeros = Image::standard(0.0);
        assert_eq!(
            reconstruction_loss_value(&ones, &ones, 0.0005).unwrap(),
            0.0
        );
        let l = reconstruction_loss_value(&zeros, &ones, 0.0005).unwrap();
        assert!((l - 9.6).abs() < 1e-9, "{l}");
        assert_eq!(reconstruction_loss_value(&zeros, &ones, 0.0).unwrap(), 0.0);
        assert!(reconstruction_loss_value(&Image::filled(10, 10, 0.0), &ones, 1.0).is_err());
    }

    #[test]
    fn loss_weight_validation() {
        assert!(LossWeights::default().validate().is_ok());
        let bad = LossWeights {
            margin_plus: 0.1,
            margin_minus: 0.9,
            ..LossWeights::default()
        };
        assert!(bad.validate().is_err());
        let cfg = CapsuleLayerConfig {
            num_capsules: 12,
            capsule_dim: 2,
            routing_iterations: 3,
        };
        assert!(cfg.validate().is_err());
        assert!(CapsuleLayerConfig {
            num_capsules: 8,
            ..cfg
        }
        .validate()
        .is_ok());
        assert!(CapsuleLayerConfig {
            num_capsules: 8,
            routing_iterations: 6,
            ..cfg
        }
        .validate()
        .is_err());
    }

    fn predictions() -> impl Strategy<Value = (usize, usize, usize, Vec<f64>, usize)> {
        (1usize..6, 2usize..5, 1usize..5, 1usize..6).prop_flat_map(|(ni, nj, d, it)| {
            proptest::collection::vec(-3.0f64..3.0, ni * nj * d)
                .prop_map(move |p| (ni, nj, d, p, it))
        })
    }

    proptest! {
        #[test]
        fn routing_invariants((ni, nj, d, p, it) in predictions()) {
            let t = Tensor::new([ni, nj, d], p.clone()).unwrap();
            let state = dynamic_routing(&t, it).unwrap();
            for row in state.couplings.values().chunks(nj) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(row.iter().all(|&c| c > 0.0));
            }
            for v in state.outputs.values().chunks(d) {
                prop_assert!(norm(v) < 1.0);
            }
            // reversing the output axis permutes the outputs identically
            let mut q = vec![0.0; p.len()];
            for i in 0..ni {
                for j in 0..nj {
                    let src = (i * nj + j) * d;
                    let dst = (i * nj + (nj - 1 - j)) * d;
                    q[dst..dst + d].copy_from_slice(&p[src..src + d]);
                }
            }
            let flipped = dynamic_routing(&Tensor::new([ni, nj, d], q).unwrap(), it).unwrap();
            for j in 0..nj {
                let a = &state.outputs.values()[j * d..(j + 1) * d];
                let b = &flipped.outputs.values()[(nj - 1 - j) * d..(nj - j) * d];
                for (x, y) in a.iter().zip(b) {
                    prop_assert!((x - y).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn squash_parallel_and_bounded(v in proptest::collection::vec(-50.0f64..50.0, 1..6), alpha in 0.01f64..20.0) {
            let s = squash(&Tensor::from_vec(v.clone())).unwrap();
            prop_assert!(norm(s.values()) < 1.0);
            let scaled = squash(&Tensor::from_vec(v.iter().map(|x| x * alpha).collect())).unwrap();
            let (a, b) = (s.values(), scaled.values());
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = norm(a);
            let nb = norm(b);
            if na > 1e-9 && nb > 1e-9 {
                prop_assert!((dot / (na * nb) - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn margin_loss_non_negative(a in 0.0f64..1.0, b in 0.0f64..1.0, class in 0usize..2) {
            let mut t = [0.0, 0.0];
            t[class] = 1.0;
            prop_assert!(margin_loss_value(&[a, b], &t, &LossWeights::default()).unwrap() >= 0.0);
        }
    }
}
